//! Simulation core for a keyboard-playing robotic hand: joint model,
//! drive mechanics, the command wire format, the joint controller and a
//! plant it can drive.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod firmware;
pub mod mechanics;
pub mod metrics;
pub mod model;
pub mod plant;
pub mod protocol;
pub mod retarget;
pub mod session;
