//! Kinematic structure of the hand: joint identifiers, ranges, the
//! normalized position convention, and splay geometry.
//!
//! Angles are degrees throughout. Every joint has a *zero end*, the
//! calibration stop that maps to normalized position 0 (extended or
//! neutral-most), and a *full end* that maps to 255.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of actuated degrees of freedom.
pub const DOF: usize = 7;

/// Number of discrete splay positions.
pub const SPLAY_LEVELS: u8 = 5;

/// Finger abduction angles (Index, Middle, Ring, Little) at the widest
/// splay position, relative to the hand's central axis.
pub const SPLAY_OPEN_ANGLES: [f64; 4] = [-12.0, 0.0, 10.0, 19.0];

const RANGE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{joint}: angle {angle}° outside [{min}°, {max}°]")]
    AngleOutOfRange {
        joint: JointId,
        angle: f64,
        min: f64,
        max: f64,
    },
    #[error("splay level {0} outside 1..=5")]
    SplayLevel(u8),
    #[error("{joint}: invalid joint spec: {reason}")]
    InvalidSpec { joint: JointId, reason: String },
    #[error("invalid splay table: {0}")]
    InvalidSplayTable(String),
    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),
}

/// The seven actuated joints, in motor-slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JointId {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
    WristDeviation,
    WristRotation,
}

impl JointId {
    pub const ALL: [JointId; DOF] = [
        JointId::Thumb,
        JointId::Index,
        JointId::Middle,
        JointId::Ring,
        JointId::Little,
        JointId::WristDeviation,
        JointId::WristRotation,
    ];

    /// The four splayable fingers.
    pub const FINGERS: [JointId; 4] = [
        JointId::Index,
        JointId::Middle,
        JointId::Ring,
        JointId::Little,
    ];

    /// Thumb plus the four fingers.
    pub const DIGITS: [JointId; 5] = [
        JointId::Thumb,
        JointId::Index,
        JointId::Middle,
        JointId::Ring,
        JointId::Little,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn from_slot(slot: usize) -> Option<JointId> {
        JointId::ALL.get(slot).copied()
    }

    /// Bit in the command flags byte.
    pub fn flag(self) -> u8 {
        1 << self.slot()
    }

    pub fn is_digit(self) -> bool {
        self.slot() <= JointId::Little.slot()
    }

    /// Index into [`SPLAY_OPEN_ANGLES`] for the four fingers.
    pub fn finger_index(self) -> Option<usize> {
        match self {
            JointId::Index | JointId::Middle | JointId::Ring | JointId::Little => {
                Some(self.slot() - 1)
            }
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::Thumb => "thumb",
            JointId::Index => "index",
            JointId::Middle => "middle",
            JointId::Ring => "ring",
            JointId::Little => "little",
            JointId::WristDeviation => "wrist_deviation",
            JointId::WristRotation => "wrist_rotation",
        }
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JointId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        let joint = match key.as_str() {
            "thumb" => JointId::Thumb,
            "index" => JointId::Index,
            "middle" => JointId::Middle,
            "ring" => JointId::Ring,
            "little" | "pinky" => JointId::Little,
            "wristdeviation" | "deviation" => JointId::WristDeviation,
            "wristrotation" | "rotation" => JointId::WristRotation,
            _ => return Err(ModelError::UnknownJoint(s.to_string())),
        };
        Ok(joint)
    }
}

/// Which hard stop of a joint is the normalized zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopEnd {
    Min,
    Max,
}

/// Range of motion for one joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub joint: JointId,
    pub min_angle: f64,
    pub max_angle: f64,
    pub neutral: f64,
    /// Stop that normalized position 0 corresponds to.
    pub zero_at: StopEnd,
}

impl JointSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidSpec {
            joint: self.joint,
            reason: reason.to_string(),
        };
        if !(self.min_angle.is_finite() && self.max_angle.is_finite() && self.neutral.is_finite()) {
            return Err(bad("non-finite angle"));
        }
        if self.min_angle >= self.max_angle {
            return Err(bad("min_angle must be below max_angle"));
        }
        if self.neutral < self.min_angle || self.neutral > self.max_angle {
            return Err(bad("neutral outside range"));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.max_angle - self.min_angle
    }

    pub fn zero_angle(&self) -> f64 {
        match self.zero_at {
            StopEnd::Min => self.min_angle,
            StopEnd::Max => self.max_angle,
        }
    }

    pub fn full_angle(&self) -> f64 {
        match self.zero_at {
            StopEnd::Min => self.max_angle,
            StopEnd::Max => self.min_angle,
        }
    }

    /// +1 when moving toward the full end increases the angle.
    pub fn forward_sign(&self) -> f64 {
        match self.zero_at {
            StopEnd::Min => 1.0,
            StopEnd::Max => -1.0,
        }
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.min_angle - RANGE_EPS && angle <= self.max_angle + RANGE_EPS
    }

    pub fn clamp(&self, angle: f64) -> f64 {
        angle.clamp(self.min_angle, self.max_angle)
    }

    /// Fraction of travel from the zero end, in [0, 1].
    pub fn fraction(&self, angle: f64) -> Result<f64, ModelError> {
        if !angle.is_finite() || !self.contains(angle) {
            return Err(ModelError::AngleOutOfRange {
                joint: self.joint,
                angle,
                min: self.min_angle,
                max: self.max_angle,
            });
        }
        Ok(((angle - self.zero_angle()) / (self.full_angle() - self.zero_angle())).clamp(0.0, 1.0))
    }

    pub fn angle_at_fraction(&self, fraction: f64) -> f64 {
        self.zero_angle() + fraction * (self.full_angle() - self.zero_angle())
    }

    /// Affine map of the joint range onto 0..=255, rounded to nearest.
    pub fn angle_to_normalized(&self, angle: f64) -> Result<u8, ModelError> {
        let f = self.fraction(angle)?;
        Ok((f * 255.0).round() as u8)
    }

    pub fn normalized_to_angle(&self, value: u8) -> f64 {
        self.angle_at_fraction(f64::from(value) / 255.0)
    }

    /// Largest round-trip error of the 8-bit quantization, in degrees.
    pub fn quantization_error(&self) -> f64 {
        self.span() / 510.0
    }
}

/// Default ranges for all seven joints, in slot order.
///
/// Fingers measure the distal flexion angle (180° extended, 15° closed).
/// Wrist deviation is positive toward the ulnar (little finger) side and
/// wrist rotation is positive in supination, both from the palm-down pose.
pub fn default_joint_specs() -> [JointSpec; DOF] {
    let finger = |joint| JointSpec {
        joint,
        min_angle: 15.0,
        max_angle: 180.0,
        neutral: 180.0,
        zero_at: StopEnd::Max,
    };
    [
        JointSpec {
            joint: JointId::Thumb,
            min_angle: -10.0,
            max_angle: 90.0,
            neutral: 0.0,
            zero_at: StopEnd::Min,
        },
        finger(JointId::Index),
        finger(JointId::Middle),
        finger(JointId::Ring),
        finger(JointId::Little),
        JointSpec {
            joint: JointId::WristDeviation,
            min_angle: -30.0,
            max_angle: 30.0,
            neutral: 0.0,
            zero_at: StopEnd::Min,
        },
        JointSpec {
            joint: JointId::WristRotation,
            min_angle: -40.0,
            max_angle: 190.0,
            neutral: 0.0,
            zero_at: StopEnd::Min,
        },
    ]
}

/// Abduction angles for a splay level, interpolated linearly between
/// parallel fingers (level 1) and [`SPLAY_OPEN_ANGLES`] (level 5).
pub fn splay_angles(level: u8) -> Result<[f64; 4], ModelError> {
    interpolate_splay(&SPLAY_OPEN_ANGLES, level)
}

fn interpolate_splay(open: &[f64; 4], level: u8) -> Result<[f64; 4], ModelError> {
    if !(1..=SPLAY_LEVELS).contains(&level) {
        return Err(ModelError::SplayLevel(level));
    }
    let t = f64::from(level - 1) / f64::from(SPLAY_LEVELS - 1);
    Ok(open.map(|a| a * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplayConfig {
    pub level: u8,
    /// Index, Middle, Ring, Little abduction in degrees.
    pub angles: [f64; 4],
}

impl SplayConfig {
    pub fn at_level(level: u8) -> Result<Self, ModelError> {
        Ok(SplayConfig {
            level,
            angles: splay_angles(level)?,
        })
    }

    pub fn angle_for(&self, joint: JointId) -> f64 {
        joint.finger_index().map_or(0.0, |i| self.angles[i])
    }
}

impl Default for SplayConfig {
    fn default() -> Self {
        SplayConfig {
            level: 1,
            angles: [0.0; 4],
        }
    }
}

/// Joint ranges plus splay geometry, loadable from the shared JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandSpec {
    pub joints: Vec<JointSpec>,
    pub splay_open: [f64; 4],
    /// Explicit per-level angles (5 rows) replacing the interpolation.
    pub splay_table: Option<Vec<[f64; 4]>>,
}

impl Default for HandSpec {
    fn default() -> Self {
        HandSpec {
            joints: default_joint_specs().to_vec(),
            splay_open: SPLAY_OPEN_ANGLES,
            splay_table: None,
        }
    }
}

impl HandSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.joints.len() != DOF {
            return Err(ModelError::InvalidSpec {
                joint: JointId::Thumb,
                reason: format!("expected {DOF} joint specs, found {}", self.joints.len()),
            });
        }
        for (slot, spec) in self.joints.iter().enumerate() {
            if spec.joint.slot() != slot {
                return Err(ModelError::InvalidSpec {
                    joint: spec.joint,
                    reason: format!("listed at slot {slot}"),
                });
            }
            spec.validate()?;
        }
        if let Some(table) = &self.splay_table {
            if table.len() != usize::from(SPLAY_LEVELS) {
                return Err(ModelError::InvalidSplayTable(format!(
                    "expected {SPLAY_LEVELS} rows, found {}",
                    table.len()
                )));
            }
            if table[0].iter().any(|a| *a != 0.0) {
                return Err(ModelError::InvalidSplayTable(
                    "level 1 must be all zeros".into(),
                ));
            }
            for finger in 0..4 {
                for pair in table.windows(2) {
                    if pair[1][finger].abs() < pair[0][finger].abs() {
                        return Err(ModelError::InvalidSplayTable(format!(
                            "finger {finger} not monotone in level"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn joint(&self, joint: JointId) -> &JointSpec {
        &self.joints[joint.slot()]
    }

    pub fn splay(&self, level: u8) -> Result<SplayConfig, ModelError> {
        let angles = match &self.splay_table {
            Some(table) => {
                if !(1..=SPLAY_LEVELS).contains(&level) {
                    return Err(ModelError::SplayLevel(level));
                }
                table[usize::from(level - 1)]
            }
            None => interpolate_splay(&self.splay_open, level)?,
        };
        Ok(SplayConfig { level, angles })
    }

    pub fn total_span(&self) -> f64 {
        self.joints.iter().map(JointSpec::span).sum()
    }
}

/// Full kinematic and actuation state of the hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub angles: [f64; DOF],
    pub counts: [i64; DOF],
    pub splay: SplayConfig,
    pub timestamp: f64,
}

impl HandState {
    pub fn neutral(spec: &HandSpec) -> Self {
        let mut angles = [0.0; DOF];
        for (a, s) in angles.iter_mut().zip(&spec.joints) {
            *a = s.neutral;
        }
        HandState {
            angles,
            counts: [0; DOF],
            splay: SplayConfig::default(),
            timestamp: 0.0,
        }
    }

    pub fn angle(&self, joint: JointId) -> f64 {
        self.angles[joint.slot()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec(joint: JointId) -> JointSpec {
        default_joint_specs()[joint.slot()]
    }

    #[test]
    fn slots_are_contiguous() {
        for (i, j) in JointId::ALL.iter().enumerate() {
            assert_eq!(j.slot(), i);
            assert_eq!(JointId::from_slot(i), Some(*j));
        }
        assert_eq!(JointId::from_slot(7), None);
        assert_eq!(JointId::Index.flag(), 0x02);
        assert_eq!(JointId::WristRotation.flag(), 0x40);
    }

    #[test]
    fn joint_names_parse() {
        for j in JointId::ALL {
            assert_eq!(j.name().parse::<JointId>().unwrap(), j);
        }
        assert_eq!(
            "WristDeviation".parse::<JointId>().unwrap(),
            JointId::WristDeviation
        );
        assert!("wrist".parse::<JointId>().is_err());
    }

    #[test]
    fn default_spans() {
        let spans: Vec<f64> = default_joint_specs().iter().map(JointSpec::span).collect();
        assert_eq!(spans, vec![100.0, 165.0, 165.0, 165.0, 165.0, 60.0, 230.0]);
        assert_eq!(HandSpec::default().total_span(), 1050.0);
        let rot = spec(JointId::WristRotation);
        assert_eq!(rot.max_angle - rot.neutral, 190.0);
        assert_eq!(rot.neutral - rot.min_angle, 40.0);
        HandSpec::default().validate().unwrap();
    }

    #[test]
    fn splay_endpoints_and_midpoint() {
        assert_eq!(splay_angles(1).unwrap(), [0.0; 4]);
        assert_eq!(splay_angles(5).unwrap(), [-12.0, 0.0, 10.0, 19.0]);
        let mid = splay_angles(3).unwrap();
        for (got, want) in mid.iter().zip([-6.0, 0.0, 5.0, 9.5]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_eq!(splay_angles(0), Err(ModelError::SplayLevel(0)));
        assert_eq!(splay_angles(6), Err(ModelError::SplayLevel(6)));
    }

    #[test]
    fn splay_monotone_in_level() {
        for finger in 0..4 {
            let mags: Vec<f64> = (1..=5)
                .map(|l| splay_angles(l).unwrap()[finger].abs())
                .collect();
            assert!(
                mags.windows(2).all(|w| w[0] <= w[1]),
                "finger {finger}: {mags:?}"
            );
        }
    }

    #[test]
    fn splay_table_override() {
        let mut hand = HandSpec {
            splay_table: Some(vec![
                [0.0; 4],
                [-2.0, 0.0, 2.0, 4.0],
                [-5.0, 0.0, 4.0, 8.0],
                [-8.0, 0.0, 7.0, 13.0],
                [-12.0, 0.0, 10.0, 19.0],
            ]),
            ..HandSpec::default()
        };
        hand.validate().unwrap();
        assert_eq!(hand.splay(2).unwrap().angles, [-2.0, 0.0, 2.0, 4.0]);
        hand.splay_table.as_mut().unwrap()[3][0] = -1.0;
        assert!(hand.validate().is_err());
    }

    #[test]
    fn normalization_endpoints() {
        let finger = spec(JointId::Index);
        assert_eq!(finger.angle_to_normalized(180.0).unwrap(), 0);
        assert_eq!(finger.angle_to_normalized(15.0).unwrap(), 255);
        assert_eq!(finger.angle_to_normalized(97.5).unwrap(), 128);
        let thumb = spec(JointId::Thumb);
        assert_eq!(thumb.angle_to_normalized(-10.0).unwrap(), 0);
        assert_eq!(thumb.angle_to_normalized(90.0).unwrap(), 255);
    }

    #[test]
    fn normalization_rejects_out_of_range() {
        let finger = spec(JointId::Ring);
        assert!(matches!(
            finger.angle_to_normalized(181.0),
            Err(ModelError::AngleOutOfRange {
                joint: JointId::Ring,
                ..
            })
        ));
        assert!(finger.angle_to_normalized(f64::NAN).is_err());
        assert!(finger.angle_to_normalized(14.0).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(JointId::Thumb);
        s.min_angle = 95.0;
        assert!(s.validate().is_err());
        let mut s = spec(JointId::Thumb);
        s.neutral = 100.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hand_spec_json_defaults() {
        let parsed: HandSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, HandSpec::default());
        let text = serde_json::to_string(&HandSpec::default()).unwrap();
        let back: HandSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, HandSpec::default());
    }

    proptest! {
        #[test]
        fn normalize_round_trip(slot in 0usize..7, t in 0.0f64..=1.0) {
            let s = default_joint_specs()[slot];
            let angle = s.min_angle + t * s.span();
            let q = s.angle_to_normalized(angle).unwrap();
            let back = s.normalized_to_angle(q);
            prop_assert!((back - angle).abs() <= s.quantization_error() + 1e-9);
        }
    }
}
