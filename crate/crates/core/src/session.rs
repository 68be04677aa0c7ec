//! JSONL session log: one header line followed by timestamped records.
//!
//! Every line is a JSON object with a `type` tag. The header's
//! `wall_clock` field is the only non-deterministic content.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firmware::{FirmwareEvent, TelemetrySnapshot};
use crate::model::JointId;
use crate::plant::{KeyEvent, WorldSnapshot};
use crate::protocol::CommandFrame;
use crate::retarget::{IntentEvent, MarkerFrame};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("log is empty")]
    Empty,
    #[error("log version {found} is not supported (expected {LOG_VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Typing,
    Piano,
}

/// Device capability available to the operator during a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Fingers fixed at the first splay level, wrist locked.
    NoSplayNoWrist,
    SplayOnly,
    Full,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::NoSplayNoWrist,
        Condition::SplayOnly,
        Condition::Full,
    ];

    pub fn allows_splay(self) -> bool {
        self != Condition::NoSplayNoWrist
    }

    pub fn allows_wrist(self) -> bool {
        self == Condition::Full
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "typing" => Ok(Task::Typing),
            "piano" => Ok(Task::Piano),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_lowercase().as_str() {
            "nosplaynowrist" => Ok(Condition::NoSplayNoWrist),
            "splayonly" => Ok(Condition::SplayOnly),
            "full" => Ok(Condition::Full),
            _ => Err(format!("unknown condition {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub task: Task,
    pub condition: Condition,
    pub splay_level: u8,
    pub subject: String,
    pub seed: u64,
    /// Full run configuration, echoed for replay.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<String>,
}

impl Header {
    pub fn new(
        task: Task,
        condition: Condition,
        splay_level: u8,
        subject: &str,
        seed: u64,
    ) -> Self {
        Header {
            version: LOG_VERSION,
            task,
            condition,
            splay_level,
            subject: subject.to_string(),
            seed,
            config: serde_json::Value::Null,
            wall_clock: None,
        }
    }
}

/// Who issued a command frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandSource {
    Script,
    Retarget,
    Ui,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Record {
    Header(Header),
    /// A frame handed to the link at `t`.
    Command {
        t: f64,
        source: CommandSource,
        frame: CommandFrame,
    },
    Splay {
        t: f64,
        level: u8,
    },
    Translate {
        t: f64,
        x: f64,
        y: f64,
    },
    Telemetry {
        t: f64,
        snapshot: TelemetrySnapshot,
    },
    World {
        t: f64,
        snapshot: WorldSnapshot,
    },
    Key {
        t: f64,
        key: String,
        finger: JointId,
        pressed: bool,
    },
    Firmware {
        t: f64,
        event: FirmwareEvent,
    },
    Marker {
        t: f64,
        frame: MarkerFrame,
    },
    Intent {
        t: f64,
        event: IntentEvent,
    },
    End {
        t: f64,
        ticks: u64,
    },
}

impl Record {
    pub fn time(&self) -> Option<f64> {
        match self {
            Record::Header(_) => None,
            Record::Command { t, .. }
            | Record::Splay { t, .. }
            | Record::Translate { t, .. }
            | Record::Telemetry { t, .. }
            | Record::World { t, .. }
            | Record::Key { t, .. }
            | Record::Firmware { t, .. }
            | Record::Marker { t, .. }
            | Record::Intent { t, .. }
            | Record::End { t, .. } => Some(*t),
        }
    }

    pub fn key_event(e: &KeyEvent) -> Record {
        Record::Key {
            t: e.t,
            key: e.key.clone(),
            finger: e.finger,
            pressed: e.pressed,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// Streams records to a writer, enforcing the header-first and
/// time-ordering rules as it goes.
pub struct SessionWriter<W: Write> {
    out: W,
    last_t: f64,
}

impl<W: Write> SessionWriter<W> {
    pub fn new(mut out: W, header: &Header) -> Result<Self, LogError> {
        writeln!(out, "{}", Record::Header(header.clone()).to_line())?;
        Ok(SessionWriter {
            out,
            last_t: f64::NEG_INFINITY,
        })
    }

    pub fn write(&mut self, record: &Record) -> Result<(), LogError> {
        let Some(t) = record.time() else {
            return Err(LogError::Invalid {
                line: 0,
                message: "second header".into(),
            });
        };
        if t < self.last_t {
            return Err(LogError::Invalid {
                line: 0,
                message: format!("timestamp {t} goes backwards from {}", self.last_t),
            });
        }
        self.last_t = t;
        writeln!(self.out, "{}", record.to_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), LogError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: Header,
    pub records: Vec<Record>,
}

impl SessionLog {
    pub fn new(header: Header) -> Self {
        SessionLog {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        Self::read(text.as_bytes())
    }

    /// Parses and validates a log. A truncated final line is an error.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, LogError> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|source| LogError::Json {
                line: i + 1,
                source,
            })?;
            match rec {
                Record::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
                Record::Header(_) => {
                    return Err(LogError::Invalid {
                        line: i + 1,
                        message: "header must be the first and only header line".into(),
                    })
                }
                _ if header.is_none() => {
                    return Err(LogError::Invalid {
                        line: i + 1,
                        message: "record before header".into(),
                    });
                }
                r => records.push(r),
            }
        }
        let header = header.ok_or(LogError::Empty)?;
        let log = SessionLog { header, records };
        log.validate()?;
        Ok(log)
    }

    /// Reads the longest valid prefix, for logs cut off mid-write.
    pub fn read_partial<R: BufRead>(reader: R) -> Result<(Self, usize), LogError> {
        let mut lines = Vec::new();
        for line in reader.lines() {
            lines.push(line?);
        }
        while lines.last().is_some_and(|l| l.trim().is_empty()) {
            lines.pop();
        }
        match Self::parse(&lines.join("\n")) {
            Err(LogError::Json { line, .. }) if line == lines.len() && line > 1 => {
                lines.pop();
                Ok((Self::parse(&lines.join("\n"))?, 1))
            }
            r => r.map(|log| (log, 0)),
        }
    }

    pub fn validate(&self) -> Result<(), LogError> {
        if self.header.version != LOG_VERSION {
            return Err(LogError::Version {
                found: self.header.version,
            });
        }
        let mut last = f64::NEG_INFINITY;
        for (i, r) in self.records.iter().enumerate() {
            let t = r.time().ok_or_else(|| LogError::Invalid {
                line: i + 2,
                message: "unexpected header".into(),
            })?;
            if !t.is_finite() || t < last {
                return Err(LogError::Invalid {
                    line: i + 2,
                    message: format!("timestamp {t} goes backwards from {last}"),
                });
            }
            last = t;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = Record::Header(self.header.clone()).to_line();
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<(), LogError> {
        let mut w = SessionWriter::new(out, &self.header)?;
        for r in &self.records {
            w.write(r)?;
        }
        w.flush()
    }

    /// Copy with the wall-clock stamp removed, for determinism checks.
    pub fn without_wall_clock(&self) -> SessionLog {
        let mut log = self.clone();
        log.header.wall_clock = None;
        log
    }

    pub fn key_events(&self) -> impl Iterator<Item = (f64, &str, JointId, bool)> {
        self.records.iter().filter_map(|r| match r {
            Record::Key {
                t,
                key,
                finger,
                pressed,
            } => Some((*t, key.as_str(), *finger, *pressed)),
            _ => None,
        })
    }

    pub fn commands(&self) -> impl Iterator<Item = (f64, &CommandFrame)> {
        self.records.iter().filter_map(|r| match r {
            Record::Command { t, frame, .. } => Some((*t, frame)),
            _ => None,
        })
    }

    pub fn markers(&self) -> impl Iterator<Item = &MarkerFrame> {
        self.records.iter().filter_map(|r| match r {
            Record::Marker { frame, .. } => Some(frame),
            _ => None,
        })
    }
}

/// Strips `"wall_clock"` from a header line so two logs can be compared
/// byte for byte.
pub fn strip_wall_clock(jsonl: &str) -> String {
    let mut out = String::with_capacity(jsonl.len());
    for (i, line) in jsonl.lines().enumerate() {
        if i == 0 {
            if let Ok(Record::Header(mut h)) = serde_json::from_str::<Record>(line) {
                h.wall_clock = None;
                out.push_str(&Record::Header(h).to_line());
                out.push('\n');
                continue;
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}
