//! JSON messages exchanged with teleoperation clients over WebSocket.
//! The catalog is documented in `docs/ui-protocol.md`.

use keyhand_core::firmware::{FirmwareEvent, TelemetrySnapshot};
use keyhand_core::model::{HandSpec, JointId};
use keyhand_core::plant::{KeyBed, WorldSnapshot};
use keyhand_core::protocol::CommandFrame;
use keyhand_core::session::Task;
use serde::{Deserialize, Serialize};

pub const UI_PROTOCOL_VERSION: u32 = 1;

/// Close code sent when a client breaks the message grammar.
pub const CLOSE_PROTOCOL_VIOLATION: u16 = 4001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointTarget {
    pub joint: JointId,
    /// Normalized position 0-255.
    pub target: u8,
    pub pwm: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UiCommand {
    Joint(JointTarget),
    Joints { targets: Vec<JointTarget> },
    Splay { level: u8 },
    Translate { x: f64, y: f64 },
    Task { task: Task },
}

impl UiCommand {
    /// Builds the wire frame for joint commands.
    pub fn to_frame(&self) -> Result<Option<CommandFrame>, String> {
        let targets: &[JointTarget] = match self {
            UiCommand::Joint(t) => std::slice::from_ref(t),
            UiCommand::Joints { targets } => targets,
            _ => return Ok(None),
        };
        if targets.is_empty() {
            return Err("no joint targets".into());
        }
        let mut frame = CommandFrame::noop();
        for t in targets {
            if t.pwm == 0 {
                return Err(format!("{}: pwm must be 1-255", t.joint));
            }
            if frame.is_flagged(t.joint.slot()) {
                return Err(format!("{} listed twice", t.joint));
            }
            frame.set(t.joint.slot(), t.target, t.pwm);
        }
        Ok(Some(frame))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Command {
        /// Echoed in the matching `ack` event.
        #[serde(default)]
        id: Option<u64>,
        command: UiCommand,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UiEvent {
    Key {
        key: String,
        finger: JointId,
        pressed: bool,
    },
    Firmware {
        event: FirmwareEvent,
    },
    /// A controller command was applied (joint commands: put on the link).
    Ack {
        id: Option<u64>,
    },
    Splay {
        level: u8,
    },
    Translate {
        x: f64,
        y: f64,
    },
    Task {
        task: Task,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ServerMessage {
    Hello {
        protocol: u32,
        role: Role,
        seed: u64,
        tick_rate: f64,
        snapshot_rate: f64,
        hand: HandSpec,
        keybed: Option<KeyBed>,
        /// Full run configuration.
        config: serde_json::Value,
    },
    Snapshot {
        t: f64,
        tick: u64,
        world: WorldSnapshot,
        telemetry: TelemetrySnapshot,
    },
    Event {
        t: f64,
        event: UiEvent,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Unparseable or unknown message; the connection is closed.
    ProtocolViolation,
    /// Observers cannot send commands.
    ReadOnly,
    /// Well-formed command the session cannot carry out.
    InvalidCommand,
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
