//! Controller state machine: boot calibration against the hard stops,
//! per-motor closed-loop moves to normalized targets, and stall detection
//! from a short window of encoder samples.
//!
//! The controller is advanced only by [`Firmware::control_tick`] (one call
//! per control period, with fresh encoder readings) and by inbound
//! commands. It never reads a clock.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{default_joint_specs, JointId, DOF};
use crate::protocol::{CommandFrame, DecodeError, FrameStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Toward the full (normalized 255) stop.
    Forward,
    /// Toward the zero stop.
    Reverse,
}

/// Motor command for one control period. `pwm == 0` means off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriveOutput {
    pub pwm: u8,
    pub direction: Direction,
}

impl DriveOutput {
    pub const OFF: DriveOutput = DriveOutput {
        pwm: 0,
        direction: Direction::Forward,
    };

    pub fn is_off(&self) -> bool {
        self.pwm == 0
    }
}

/// Hardware seen by the controller: encoders in, motor drives out.
pub trait DriveInterface {
    fn read_encoders(&self) -> [i64; DOF];
    fn apply(&mut self, outputs: &[DriveOutput; DOF], dt: f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirmwareConfig {
    pub control_rate: f64,
    pub stall_window: usize,
    /// Stall when the encoder window spans fewer counts than this.
    pub stall_threshold: i64,
    /// Stall detection only applies at or above this commanded pwm.
    pub pwm_floor: u8,
    pub deadband: i64,
    pub calibration_pwm: u8,
    /// Seconds allowed per calibration sweep direction.
    pub calibration_timeout: f64,
    pub min_range: i64,
    /// Counts a position may sit beyond a calibrated limit.
    pub slack: i64,
    /// Normalized park position per slot after calibration.
    pub park: [u8; DOF],
    /// Limit pwm on the final approach so one period does not overshoot.
    pub approach_limit: bool,
}

impl Default for FirmwareConfig {
    fn default() -> Self {
        let specs = default_joint_specs();
        let park = specs.map(|s| s.angle_to_normalized(s.neutral).unwrap_or(0));
        FirmwareConfig {
            control_rate: 100.0,
            stall_window: 8,
            stall_threshold: 2,
            pwm_floor: 30,
            deadband: 2,
            calibration_pwm: 120,
            calibration_timeout: 5.0,
            min_range: 10,
            slack: 5,
            park,
            approach_limit: true,
        }
    }
}

impl FirmwareConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn validate(&self) -> Result<(), FirmwareError> {
        let bad = |m: &str| Err(FirmwareError::Config(m.to_string()));
        if !(self.control_rate > 0.0 && self.control_rate.is_finite()) {
            return bad("control_rate must be positive");
        }
        if self.stall_window < 2 {
            return bad("stall_window must be at least 2");
        }
        if self.stall_threshold < 1 || self.deadband < 0 || self.min_range < 1 || self.slack < 0 {
            return bad("thresholds must be positive");
        }
        if self.calibration_pwm == 0 {
            return bad("calibration_pwm must be nonzero");
        }
        if !(self.calibration_timeout > 0.0) {
            return bad("calibration_timeout must be positive");
        }
        Ok(())
    }

    fn timeout_ticks(&self) -> u64 {
        (self.calibration_timeout * self.control_rate).ceil() as u64
    }
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum CalibrationError {
    #[error("no stall detected within the timeout while seeking the {0:?} stop")]
    StallNeverDetected(Direction),
    #[error("calibrated range of {range} counts is below the minimum of {min}")]
    CalibrationRangeTooSmall { range: i64, min: i64 },
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChannelError {
    #[error("channel is not calibrated")]
    UncalibratedChannel,
    #[error("channel failed calibration: {0}")]
    FailedChannel(CalibrationError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FirmwareError {
    #[error("commands are not accepted in phase {0:?}")]
    NotReady(Phase),
    #[error("invalid firmware config: {0}")]
    Config(String),
    #[error("slot {0} out of range")]
    BadSlot(usize),
    #[error("calibration of slot {slot} failed: {error}")]
    Calibration {
        slot: usize,
        error: CalibrationError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Uncalibrated,
    Calibrating { slot: usize },
    Idle,
    Executing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionStatus {
    Reached,
    Stalled,
    Preempted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Calibration {
    Uncalibrated,
    /// `zero_raw` is the raw encoder count at the zero stop; positions
    /// are reported relative to it, so the limits are `(0, max_count)`.
    Calibrated {
        zero_raw: i64,
        max_count: i64,
    },
    Failed {
        error: CalibrationError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveCommand {
    pub target: i64,
    pub pwm: u8,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotorChannel {
    pub slot: usize,
    pub calibration: Calibration,
    pub active: Option<ActiveCommand>,
    pub last_status: Option<CompletionStatus>,
    raw: Option<i64>,
    history: VecDeque<i64>,
    /// Counts per control period per pwm unit, measured during calibration.
    gain: Option<f64>,
}

impl MotorChannel {
    fn new(slot: usize) -> Self {
        MotorChannel {
            slot,
            calibration: Calibration::Uncalibrated,
            active: None,
            last_status: None,
            raw: None,
            history: VecDeque::new(),
            gain: None,
        }
    }

    pub fn raw(&self) -> Option<i64> {
        self.raw
    }

    /// Position relative to the zero stop, once calibrated.
    pub fn position(&self) -> Option<i64> {
        match (&self.calibration, self.raw) {
            (Calibration::Calibrated { zero_raw, .. }, Some(raw)) => Some(raw - zero_raw),
            _ => None,
        }
    }

    pub fn limits(&self) -> Option<(i64, i64)> {
        match self.calibration {
            Calibration::Calibrated { max_count, .. } => Some((0, max_count)),
            _ => None,
        }
    }

    /// Limits in the raw encoder frame.
    pub fn raw_limits(&self) -> Option<(i64, i64)> {
        match self.calibration {
            Calibration::Calibrated {
                zero_raw,
                max_count,
            } => Some((zero_raw, zero_raw + max_count)),
            _ => None,
        }
    }

    pub fn normalized(&self) -> Option<u8> {
        let (_, max) = self.limits()?;
        let pos = self.position()?;
        Some((pos as f64 / max as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
    }

    pub fn target_count(&self, normalized: u8) -> Option<i64> {
        let (min, max) = self.limits()?;
        Some(min + (f64::from(normalized) / 255.0 * (max - min) as f64).round() as i64)
    }

    fn usable(&self) -> Result<(), ChannelError> {
        match &self.calibration {
            Calibration::Calibrated { .. } => Ok(()),
            Calibration::Uncalibrated => Err(ChannelError::UncalibratedChannel),
            Calibration::Failed { error } => Err(ChannelError::FailedChannel(error.clone())),
        }
    }

    fn push_sample(&mut self, value: i64, window: usize) {
        if self.history.len() == window {
            self.history.pop_front();
        }
        self.history.push_back(value);
    }

    fn stalled(&self, cfg: &FirmwareConfig, pwm: u8) -> bool {
        if pwm < cfg.pwm_floor || self.history.len() < cfg.stall_window {
            return false;
        }
        let lo = self.history.iter().min().copied().unwrap_or(0);
        let hi = self.history.iter().max().copied().unwrap_or(0);
        hi - lo < cfg.stall_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum FirmwareEvent {
    Completed {
        slot: usize,
        status: CompletionStatus,
        tick: u64,
        position: i64,
    },
    Calibrated {
        slot: usize,
        min: i64,
        max: i64,
        zero_raw: i64,
        tick: u64,
    },
    CalibrationFailed {
        slot: usize,
        error: CalibrationError,
        tick: u64,
    },
    CalibrationDone {
        tick: u64,
    },
    Rejected {
        slot: usize,
        reason: ChannelError,
        tick: u64,
    },
    FrameRejected {
        phase: Phase,
        tick: u64,
    },
    DecodeError {
        error: String,
        tick: u64,
    },
}

/// Result of dispatching one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecuteReport {
    pub accepted: Vec<usize>,
    /// Slots whose target was already within the deadband.
    pub already_there: Vec<usize>,
    pub rejected: Vec<(usize, ChannelError)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CalStep {
    SeekZero {
        ticks: u64,
    },
    SeekFull {
        ticks: u64,
        last_change: u64,
        prev: i64,
    },
    Park,
}

#[derive(Debug, Clone, PartialEq)]
struct CalibrationRun {
    slot: usize,
    step: CalStep,
    remaining: VecDeque<usize>,
}

#[derive(Debug, Clone)]
pub struct Firmware {
    config: FirmwareConfig,
    channels: Vec<MotorChannel>,
    phase: Phase,
    tick: u64,
    stream: FrameStream,
    run: Option<CalibrationRun>,
    events: Vec<FirmwareEvent>,
}

impl Firmware {
    pub fn new(config: FirmwareConfig) -> Result<Self, FirmwareError> {
        config.validate()?;
        Ok(Firmware {
            config,
            channels: (0..DOF).map(MotorChannel::new).collect(),
            phase: Phase::Uncalibrated,
            tick: 0,
            stream: FrameStream::new(),
            run: None,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &FirmwareConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 / self.config.control_rate
    }

    pub fn channel(&self, slot: usize) -> &MotorChannel {
        &self.channels[slot]
    }

    pub fn channels(&self) -> &[MotorChannel] {
        &self.channels
    }

    pub fn drain_events(&mut self) -> Vec<FirmwareEvent> {
        std::mem::take(&mut self.events)
    }

    /// Starts calibrating every slot in order 0..=6.
    pub fn begin_calibration(&mut self) {
        self.start_run((0..DOF).collect());
    }

    /// Recalibrates one channel; any command on it is dropped.
    pub fn request_recalibration(&mut self, slot: usize) -> Result<(), FirmwareError> {
        if slot >= DOF {
            return Err(FirmwareError::BadSlot(slot));
        }
        if let Phase::Calibrating { .. } = self.phase {
            return Err(FirmwareError::NotReady(self.phase));
        }
        for ch in &mut self.channels {
            ch.active = None;
        }
        self.start_run(VecDeque::from([slot]));
        Ok(())
    }

    fn start_run(&mut self, mut slots: VecDeque<usize>) {
        let Some(slot) = slots.pop_front() else {
            return;
        };
        self.begin_slot(slot);
        self.run = Some(CalibrationRun {
            slot,
            step: CalStep::SeekZero { ticks: 0 },
            remaining: slots,
        });
        self.phase = Phase::Calibrating { slot };
    }

    fn begin_slot(&mut self, slot: usize) {
        let ch = &mut self.channels[slot];
        ch.calibration = Calibration::Uncalibrated;
        ch.active = None;
        ch.gain = None;
        ch.history.clear();
    }

    /// Feeds raw bytes from the link; decoded frames are executed at once.
    pub fn receive(&mut self, bytes: &[u8]) {
        for item in self.stream.push(bytes) {
            match item {
                Ok(frame) => {
                    if let Err(FirmwareError::NotReady(phase)) = self.execute(&frame) {
                        self.events.push(FirmwareEvent::FrameRejected {
                            phase,
                            tick: self.tick,
                        });
                    }
                }
                Err(e) => self.push_decode_error(&e),
            }
        }
    }

    fn push_decode_error(&mut self, e: &DecodeError) {
        self.events.push(FirmwareEvent::DecodeError {
            error: e.to_string(),
            tick: self.tick,
        });
    }

    /// Dispatches a frame. A new command for a moving motor preempts the
    /// old one; unflagged motors are untouched.
    pub fn execute(&mut self, frame: &CommandFrame) -> Result<ExecuteReport, FirmwareError> {
        if !matches!(self.phase, Phase::Idle | Phase::Executing) {
            return Err(FirmwareError::NotReady(self.phase));
        }
        let mut report = ExecuteReport::default();
        for slot in frame.flagged_slots() {
            if let Err(reason) = self.channels[slot].usable() {
                self.events.push(FirmwareEvent::Rejected {
                    slot,
                    reason: reason.clone(),
                    tick: self.tick,
                });
                report.rejected.push((slot, reason));
                continue;
            }
            if self.start_command(slot, frame.targets[slot], frame.pwms[slot]) {
                report.accepted.push(slot);
            } else {
                report.already_there.push(slot);
            }
        }
        self.refresh_phase();
        Ok(report)
    }

    /// Returns false when the target is already within the deadband.
    fn start_command(&mut self, slot: usize, normalized: u8, pwm: u8) -> bool {
        let tick = self.tick;
        let deadband = self.config.deadband;
        let ch = &mut self.channels[slot];
        let Some(target) = ch.target_count(normalized) else {
            return false;
        };
        let position = ch.position().unwrap_or(0);
        if ch.active.take().is_some() {
            self.events.push(FirmwareEvent::Completed {
                slot,
                status: CompletionStatus::Preempted,
                tick,
                position,
            });
            ch.last_status = Some(CompletionStatus::Preempted);
        }
        ch.history.clear();
        let error = target - position;
        if error.abs() <= deadband {
            ch.last_status = Some(CompletionStatus::Reached);
            self.events.push(FirmwareEvent::Completed {
                slot,
                status: CompletionStatus::Reached,
                tick,
                position,
            });
            return false;
        }
        ch.active = Some(ActiveCommand {
            target,
            pwm,
            direction: if error > 0 {
                Direction::Forward
            } else {
                Direction::Reverse
            },
        });
        true
    }

    fn refresh_phase(&mut self) {
        if matches!(self.phase, Phase::Idle | Phase::Executing) {
            self.phase = if self.channels.iter().any(|c| c.active.is_some()) {
                Phase::Executing
            } else {
                Phase::Idle
            };
        }
    }

    /// One control period: ingest encoder readings, return motor drives.
    /// Channels without an active command always get [`DriveOutput::OFF`].
    pub fn control_tick(&mut self, readings: [i64; DOF]) -> [DriveOutput; DOF] {
        self.tick += 1;
        for (ch, r) in self.channels.iter_mut().zip(readings) {
            ch.raw = Some(r);
        }
        let mut out = [DriveOutput::OFF; DOF];
        match self.phase {
            Phase::Calibrating { .. } => self.calibration_tick(&mut out),
            Phase::Idle | Phase::Executing => {
                for (slot, o) in out.iter_mut().enumerate() {
                    *o = self.command_tick(slot);
                }
                self.refresh_phase();
            }
            Phase::Uncalibrated => {}
        }
        out
    }

    fn command_tick(&mut self, slot: usize) -> DriveOutput {
        let cfg = &self.config;
        let tick = self.tick;
        let ch = &mut self.channels[slot];
        let Some(cmd) = ch.active else {
            return DriveOutput::OFF;
        };
        let Some(pos) = ch.position() else {
            ch.active = None;
            return DriveOutput::OFF;
        };
        ch.push_sample(pos, cfg.stall_window);
        let error = cmd.target - pos;
        let status = if error.abs() <= cfg.deadband {
            Some(CompletionStatus::Reached)
        } else if ch.stalled(cfg, cmd.pwm) {
            Some(CompletionStatus::Stalled)
        } else {
            None
        };
        if let Some(status) = status {
            ch.active = None;
            ch.last_status = Some(status);
            self.events.push(FirmwareEvent::Completed {
                slot,
                status,
                tick,
                position: pos,
            });
            return DriveOutput::OFF;
        }
        let direction = if error > 0 {
            Direction::Forward
        } else {
            Direction::Reverse
        };
        let mut pwm = cmd.pwm;
        if let (true, Some(gain)) = (cfg.approach_limit, ch.gain) {
            let limit = (error.abs() as f64 / gain).floor().clamp(1.0, 255.0) as u8;
            pwm = pwm.min(limit);
        }
        ch.active = Some(ActiveCommand { direction, ..cmd });
        DriveOutput { pwm, direction }
    }

    fn calibration_tick(&mut self, out: &mut [DriveOutput; DOF]) {
        let Some(mut run) = self.run.take() else {
            self.phase = Phase::Idle;
            return;
        };
        let slot = run.slot;
        let cfg = self.config.clone();
        let tick = self.tick;
        let timeout = cfg.timeout_ticks();
        let seek = |direction| DriveOutput {
            pwm: cfg.calibration_pwm,
            direction,
        };
        let raw = self.channels[slot].raw.unwrap_or(0);

        let mut finished: Option<Result<(), CalibrationError>> = None;
        match run.step {
            CalStep::SeekZero { ticks } => {
                let ch = &mut self.channels[slot];
                ch.push_sample(raw, cfg.stall_window);
                if ch.stalled(&cfg, cfg.calibration_pwm) {
                    ch.history.clear();
                    ch.calibration = Calibration::Calibrated {
                        zero_raw: raw,
                        max_count: 0,
                    };
                    run.step = CalStep::SeekFull {
                        ticks: 0,
                        last_change: 0,
                        prev: raw,
                    };
                    out[slot] = seek(Direction::Forward);
                } else if ticks + 1 > timeout {
                    finished = Some(Err(CalibrationError::StallNeverDetected(
                        Direction::Reverse,
                    )));
                } else {
                    run.step = CalStep::SeekZero { ticks: ticks + 1 };
                    out[slot] = seek(Direction::Reverse);
                }
            }
            CalStep::SeekFull {
                ticks,
                last_change,
                prev,
            } => {
                let ticks = ticks + 1;
                let last_change = if raw != prev { ticks } else { last_change };
                let ch = &mut self.channels[slot];
                ch.push_sample(raw, cfg.stall_window);
                if ch.stalled(&cfg, cfg.calibration_pwm) {
                    let zero_raw = match ch.calibration {
                        Calibration::Calibrated { zero_raw, .. } => zero_raw,
                        _ => raw,
                    };
                    let range = raw - zero_raw;
                    ch.history.clear();
                    if range < cfg.min_range {
                        finished = Some(Err(CalibrationError::CalibrationRangeTooSmall {
                            range,
                            min: cfg.min_range,
                        }));
                    } else {
                        ch.calibration = Calibration::Calibrated {
                            zero_raw,
                            max_count: range,
                        };
                        ch.gain = (last_change > 0).then(|| {
                            range as f64 / (last_change as f64 * f64::from(cfg.calibration_pwm))
                        });
                        self.events.push(FirmwareEvent::Calibrated {
                            slot,
                            min: 0,
                            max: range,
                            zero_raw,
                            tick,
                        });
                        run.step = CalStep::Park;
                        if self.start_command(slot, cfg.park[slot], cfg.calibration_pwm) {
                            out[slot] = self.command_tick_no_sample(slot);
                        } else {
                            finished = Some(Ok(()));
                        }
                    }
                } else if ticks > timeout {
                    finished = Some(Err(CalibrationError::StallNeverDetected(
                        Direction::Forward,
                    )));
                } else {
                    run.step = CalStep::SeekFull {
                        ticks,
                        last_change,
                        prev: raw,
                    };
                    out[slot] = seek(Direction::Forward);
                }
            }
            CalStep::Park => {
                out[slot] = self.command_tick(slot);
                if self.channels[slot].active.is_none() {
                    out[slot] = DriveOutput::OFF;
                    finished = Some(Ok(()));
                }
            }
        }

        match finished {
            None => self.run = Some(run),
            Some(result) => {
                if let Err(error) = result {
                    let ch = &mut self.channels[slot];
                    ch.calibration = Calibration::Failed {
                        error: error.clone(),
                    };
                    ch.active = None;
                    ch.history.clear();
                    out[slot] = DriveOutput::OFF;
                    self.events
                        .push(FirmwareEvent::CalibrationFailed { slot, error, tick });
                }
                match run.remaining.pop_front() {
                    Some(next) => {
                        self.begin_slot(next);
                        run.slot = next;
                        run.step = CalStep::SeekZero { ticks: 0 };
                        self.phase = Phase::Calibrating { slot: next };
                        self.run = Some(run);
                    }
                    None => {
                        self.phase = Phase::Idle;
                        self.events.push(FirmwareEvent::CalibrationDone { tick });
                    }
                }
            }
        }
    }

    /// First drive of a freshly started command, without recording the
    /// current sample twice.
    fn command_tick_no_sample(&mut self, slot: usize) -> DriveOutput {
        let ch = &self.channels[slot];
        match ch.active {
            Some(cmd) => DriveOutput {
                pwm: cmd.pwm,
                direction: cmd.direction,
            },
            None => DriveOutput::OFF,
        }
    }

    pub fn failed_channels(&self) -> Vec<(usize, CalibrationError)> {
        self.channels
            .iter()
            .filter_map(|c| match &c.calibration {
                Calibration::Failed { error } => Some((c.slot, error.clone())),
                _ => None,
            })
            .collect()
    }

    /// Runs a single-channel calibration to completion against `hw`.
    pub fn calibrate<H: DriveInterface>(
        &mut self,
        slot: usize,
        hw: &mut H,
    ) -> Result<(i64, i64), FirmwareError> {
        self.request_recalibration(slot)?;
        self.run_until_calibrated(hw);
        let ch = &self.channels[slot];
        match &ch.calibration {
            Calibration::Failed { error } => Err(FirmwareError::Calibration {
                slot,
                error: error.clone(),
            }),
            _ => ch.limits().ok_or(FirmwareError::BadSlot(slot)),
        }
    }

    /// Calibrates all channels in slot order against `hw`. Returns the
    /// failures, if any; the remaining channels stay usable.
    pub fn calibrate_all<H: DriveInterface>(
        &mut self,
        hw: &mut H,
    ) -> Vec<(usize, CalibrationError)> {
        self.begin_calibration();
        self.run_until_calibrated(hw);
        self.failed_channels()
    }

    fn run_until_calibrated<H: DriveInterface>(&mut self, hw: &mut H) {
        let dt = self.config.dt();
        while matches!(self.phase, Phase::Calibrating { .. }) {
            let out = self.control_tick(hw.read_encoders());
            hw.apply(&out, dt);
        }
    }

    pub fn telemetry(&self) -> TelemetrySnapshot {
        TelemetrySnapshot {
            tick: self.tick,
            time: self.time(),
            phase: self.phase,
            channels: self
                .channels
                .iter()
                .map(|c| ChannelTelemetry {
                    slot: c.slot,
                    joint: JointId::ALL[c.slot],
                    raw: c.raw,
                    position: c.position(),
                    normalized: c.normalized(),
                    calibration: c.calibration.clone(),
                    active: c.active,
                    last_status: c.last_status,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTelemetry {
    pub slot: usize,
    pub joint: JointId,
    pub raw: Option<i64>,
    pub position: Option<i64>,
    /// `None` until the channel is calibrated.
    pub normalized: Option<u8>,
    pub calibration: Calibration,
    pub active: Option<ActiveCommand>,
    pub last_status: Option<CompletionStatus>,
}

/// Immutable view of the controller, safe to hand to other threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub tick: u64,
    pub time: f64,
    pub phase: Phase,
    pub channels: Vec<ChannelTelemetry>,
}

impl TelemetrySnapshot {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("telemetry serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ideal motor moving `rate` counts per tick at full pwm between
    /// hard stops at 0 and `span`, reading raw counts offset by `offset`.
    struct Rig {
        pos: [f64; DOF],
        span: [f64; DOF],
        rate: f64,
        offset: i64,
    }

    impl Rig {
        fn new(span: f64) -> Self {
            Rig {
                pos: [span / 2.0; DOF],
                span: [span; DOF],
                rate: 10.0,
                offset: 1000,
            }
        }
    }

    impl DriveInterface for Rig {
        fn read_encoders(&self) -> [i64; DOF] {
            self.pos.map(|p| p.floor() as i64 + self.offset)
        }

        fn apply(&mut self, outputs: &[DriveOutput; DOF], _dt: f64) {
            for (i, o) in outputs.iter().enumerate() {
                let step = self.rate * f64::from(o.pwm) / 255.0;
                let d = if o.direction == Direction::Forward {
                    step
                } else {
                    -step
                };
                self.pos[i] = (self.pos[i] + d).clamp(0.0, self.span[i]);
            }
        }
    }

    fn calibrated(span: f64) -> (Firmware, Rig) {
        let mut fw = Firmware::new(FirmwareConfig::default()).unwrap();
        let mut rig = Rig::new(span);
        assert!(fw.calibrate_all(&mut rig).is_empty());
        (fw, rig)
    }

    fn run_until_idle(fw: &mut Firmware, rig: &mut Rig, max_ticks: usize) -> usize {
        for n in 0..max_ticks {
            let out = fw.control_tick(rig.read_encoders());
            for (slot, o) in out.iter().enumerate() {
                if fw.channel(slot).active.is_none() {
                    assert!(o.is_off(), "slot {slot} driven without a command");
                }
            }
            rig.apply(&out, 0.01);
            if fw.phase() == Phase::Idle {
                return n + 1;
            }
        }
        panic!("did not settle in {max_ticks} ticks");
    }

    #[test]
    fn commands_rejected_before_calibration() {
        let mut fw = Firmware::new(FirmwareConfig::default()).unwrap();
        let f = CommandFrame::noop().with(1, 200, 255);
        assert_eq!(
            fw.execute(&f),
            Err(FirmwareError::NotReady(Phase::Uncalibrated))
        );
        fw.begin_calibration();
        assert!(matches!(
            fw.execute(&f),
            Err(FirmwareError::NotReady(Phase::Calibrating { slot: 0 }))
        ));
    }

    #[test]
    fn calibration_finds_stops() {
        let (fw, _) = calibrated(400.0);
        for ch in fw.channels() {
            assert_eq!(ch.limits(), Some((0, 400)));
            assert_eq!(ch.raw_limits(), Some((1000, 1400)));
        }
        assert_eq!(fw.phase(), Phase::Idle);
    }

    #[test]
    fn calibration_parks() {
        let (fw, rig) = calibrated(400.0);
        let park = FirmwareConfig::default().park;
        for (slot, &n) in park.iter().enumerate() {
            let want = fw.channel(slot).target_count(n).unwrap();
            let got = rig.read_encoders()[slot] - 1000;
            assert!((got - want).abs() <= 2, "slot {slot}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_travel_fails_calibration() {
        let mut fw = Firmware::new(FirmwareConfig::default()).unwrap();
        let mut rig = Rig::new(400.0);
        rig.span[3] = 0.0;
        rig.pos[3] = 0.0;
        let failed = fw.calibrate_all(&mut rig);
        assert_eq!(
            failed,
            vec![(
                3,
                CalibrationError::CalibrationRangeTooSmall { range: 0, min: 10 }
            )]
        );
        let report = fw
            .execute(&CommandFrame::noop().with(3, 10, 100).with(4, 200, 100))
            .unwrap();
        assert_eq!(report.accepted, vec![4]);
        assert!(matches!(
            report.rejected[0],
            (3, ChannelError::FailedChannel(_))
        ));
    }

    #[test]
    fn missing_stop_times_out() {
        struct Endless(f64);
        impl DriveInterface for Endless {
            fn read_encoders(&self) -> [i64; DOF] {
                [self.0 as i64; DOF]
            }
            fn apply(&mut self, outputs: &[DriveOutput; DOF], _dt: f64) {
                if outputs.iter().any(|o| !o.is_off()) {
                    self.0 -= 5.0;
                }
            }
        }
        let mut fw = Firmware::new(FirmwareConfig::default()).unwrap();
        let err = fw.calibrate(2, &mut Endless(0.0)).unwrap_err();
        assert_eq!(
            err,
            FirmwareError::Calibration {
                slot: 2,
                error: CalibrationError::StallNeverDetected(Direction::Reverse)
            }
        );
        assert!(fw.tick_count() >= 500 && fw.tick_count() <= 502);
    }

    #[test]
    fn target_within_deadband_completes_immediately() {
        let (mut fw, mut rig) = calibrated(400.0);
        let pos = fw.channel(1).normalized().unwrap();
        let report = fw.execute(&CommandFrame::noop().with(1, pos, 255)).unwrap();
        assert_eq!(report.already_there, vec![1]);
        assert_eq!(fw.phase(), Phase::Idle);
        let out = fw.control_tick(rig.read_encoders());
        assert!(out.iter().all(DriveOutput::is_off));
        rig.apply(&out, 0.01);
    }

    #[test]
    fn move_reaches_target() {
        let (mut fw, mut rig) = calibrated(400.0);
        fw.drain_events();
        fw.execute(&CommandFrame::noop().with(2, 255, 255)).unwrap();
        assert_eq!(fw.phase(), Phase::Executing);
        run_until_idle(&mut fw, &mut rig, 200);
        let pos = fw.channel(2).position().unwrap();
        assert!((pos - 400).abs() <= 2, "{pos}");
        assert_eq!(fw.channel(2).last_status, Some(CompletionStatus::Reached));
        assert!(fw.drain_events().iter().any(|e| matches!(
            e,
            FirmwareEvent::Completed {
                slot: 2,
                status: CompletionStatus::Reached,
                ..
            }
        )));
    }

    #[test]
    fn preemption_replaces_target() {
        let (mut fw, mut rig) = calibrated(400.0);
        fw.execute(&CommandFrame::noop().with(1, 255, 255)).unwrap();
        for _ in 0..5 {
            let out = fw.control_tick(rig.read_encoders());
            rig.apply(&out, 0.01);
        }
        fw.execute(&CommandFrame::noop().with(1, 10, 200)).unwrap();
        assert_eq!(fw.channel(1).last_status, Some(CompletionStatus::Preempted));
        run_until_idle(&mut fw, &mut rig, 200);
        let want = fw.channel(1).target_count(10).unwrap();
        assert!((fw.channel(1).position().unwrap() - want).abs() <= 2);
    }

    #[test]
    fn frozen_encoder_stalls() {
        let (mut fw, mut rig) = calibrated(400.0);
        fw.execute(&CommandFrame::noop().with(4, 255, 255)).unwrap();
        rig.rate = 0.0;
        let ticks = run_until_idle(&mut fw, &mut rig, 50);
        assert_eq!(fw.channel(4).last_status, Some(CompletionStatus::Stalled));
        assert!(ticks <= 8, "{ticks}");
    }

    #[test]
    fn slow_pwm_never_stalls() {
        let (mut fw, mut rig) = calibrated(400.0);
        fw.execute(&CommandFrame::noop().with(4, 255, 10)).unwrap();
        rig.rate = 0.0;
        for _ in 0..100 {
            let out = fw.control_tick(rig.read_encoders());
            rig.apply(&out, 0.01);
        }
        assert!(fw.channel(4).active.is_some());
    }

    #[test]
    fn wire_bytes_execute() {
        let (mut fw, _) = calibrated(400.0);
        let bytes = crate::protocol::encode(&CommandFrame::noop().with(0, 255, 100)).unwrap();
        fw.receive(&bytes[..9]);
        assert_eq!(fw.phase(), Phase::Idle);
        fw.receive(&bytes[9..]);
        assert_eq!(fw.phase(), Phase::Executing);
        fw.receive(&[0x00, 0x13, 0xAA]);
        assert!(fw
            .drain_events()
            .iter()
            .any(|e| matches!(e, FirmwareEvent::DecodeError { .. })));
    }

    #[test]
    fn telemetry_views() {
        let fw = Firmware::new(FirmwareConfig::default()).unwrap();
        let snap = fw.telemetry();
        assert!(snap.channels.iter().all(|c| c.normalized.is_none()));
        let (fw, _) = calibrated(400.0);
        let snap = fw.telemetry();
        assert!(snap
            .channels
            .iter()
            .all(|c| c.normalized.is_some() && c.active.is_none()));
        let line = snap.to_json_line();
        let back: TelemetrySnapshot = serde_json::from_str(&line).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn config_validation() {
        let cfg = FirmwareConfig {
            control_rate: 0.0,
            ..FirmwareConfig::default()
        };
        assert!(Firmware::new(cfg).is_err());
        let park = FirmwareConfig::default().park;
        assert_eq!(park, [26, 0, 0, 0, 0, 128, 44]);
    }
}
