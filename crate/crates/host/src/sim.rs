//! Lockstep driver: firmware and plant advance together one control
//! period at a time, with the seeded latency channel between the command
//! source and the firmware as the only asynchrony.

use std::collections::BTreeMap;

use keyhand_core::firmware::{CalibrationError, Firmware, FirmwareError, Phase};
use keyhand_core::model::{JointId, DOF};
use keyhand_core::plant::{KeyBedSelection, LatencyChannel, PlantError, PlantWorld};
use keyhand_core::protocol::{encode, CommandFrame, FrameError, FRAME_LEN};
use keyhand_core::retarget::{retarget_stream, IntentEvent, MarkerFrame, RetargetError};
use keyhand_core::session::{CommandSource, Header, LogError, Record, SessionLog, Task};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::script::{Action, Script};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Firmware(#[from] FirmwareError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("calibration failed: {}", describe_failures(.0))]
    Calibration(Vec<(usize, CalibrationError)>),
    #[error("{0} is locked in the {1} condition")]
    Locked(&'static str, keyhand_core::session::Condition),
    #[error("log header carries an unreadable config: {0}")]
    HeaderConfig(serde_json::Error),
}

fn describe_failures(f: &[(usize, CalibrationError)]) -> String {
    f.iter()
        .map(|(slot, e)| format!("{} ({e})", JointId::ALL[*slot]))
        .collect::<Vec<_>>()
        .join(", ")
}

pub struct Simulator {
    config: RunConfig,
    seed: u64,
    firmware: Firmware,
    world: PlantWorld,
    link: LatencyChannel<[u8; FRAME_LEN]>,
    tick: u64,
    dt: f64,
    records: Vec<Record>,
    ready_at: Option<f64>,
}

impl Simulator {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        let firmware = Firmware::new(config.firmware.clone())?;
        let mut world = PlantWorld::new(
            config.hand.clone(),
            config.plant.clone(),
            config.mechanics.force_model.clone(),
        )?;
        world.set_splay(config.effective_splay())?;
        let link = LatencyChannel::new(config.latency, seed)?;
        let dt = config.firmware.dt();
        Ok(Simulator {
            config,
            seed,
            firmware,
            world,
            link,
            tick: 0,
            dt,
            records: Vec::new(),
            ready_at: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn header(&self) -> Header {
        let s = &self.config.session;
        let mut h = Header::new(
            s.task,
            s.condition,
            self.config.effective_splay(),
            &s.subject,
            self.seed,
        );
        let mut echo = self.config.clone();
        echo.seed = Some(self.seed);
        h.config = serde_json::to_value(&echo).expect("config serializes");
        h
    }

    /// Simulated seconds since power-on.
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn ready_at(&self) -> Option<f64> {
        self.ready_at
    }

    pub fn firmware(&self) -> &Firmware {
        &self.firmware
    }

    pub fn world(&self) -> &PlantWorld {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut PlantWorld {
        &mut self.world
    }

    /// Calibrates every channel; any failed channel aborts the run.
    /// The hand is held clear of the keybed while the sweeps run.
    pub fn boot(&mut self) -> Result<f64, SimError> {
        self.world.set_keybed(&KeyBedSelection::None)?;
        self.firmware.begin_calibration();
        while matches!(self.firmware.phase(), Phase::Calibrating { .. }) {
            self.step();
        }
        self.world.set_keybed(&self.config.plant.keybed)?;
        let failed = self.firmware.failed_channels();
        if !failed.is_empty() {
            return Err(SimError::Calibration(failed));
        }
        self.ready_at = Some(self.time());
        Ok(self.time())
    }

    /// One control period.
    pub fn step(&mut self) {
        for bytes in self.link.poll(self.time()) {
            self.firmware.receive(&bytes);
        }
        let drives = self.firmware.control_tick(self.world.encoders());
        let keys = self.world.step(&drives, self.dt);
        self.tick += 1;
        let t = self.time();
        for event in self.firmware.drain_events() {
            self.records.push(Record::Firmware { t, event });
        }
        for k in keys {
            self.records.push(Record::Key {
                t,
                key: k.key,
                finger: k.finger,
                pressed: k.pressed,
            });
        }
        if self
            .tick
            .is_multiple_of(u64::from(self.config.snapshot_every))
        {
            self.push_snapshots();
        }
    }

    fn push_snapshots(&mut self) {
        let t = self.time();
        self.records.push(Record::Telemetry {
            t,
            snapshot: self.firmware.telemetry(),
        });
        let mut snapshot = self.world.snapshot();
        snapshot.t = t;
        self.records.push(Record::World { t, snapshot });
    }

    /// Puts a frame on the link. Wrist slots are dropped when the
    /// session condition locks the wrist; returns the frame as sent.
    pub fn send_frame(
        &mut self,
        frame: CommandFrame,
        source: CommandSource,
    ) -> Result<Option<CommandFrame>, SimError> {
        let mut frame = frame;
        if !self.config.session.condition.allows_wrist() {
            for j in [JointId::WristDeviation, JointId::WristRotation] {
                frame.flags &= !j.flag();
                frame.targets[j.slot()] = 0;
                frame.pwms[j.slot()] = 0;
            }
            if frame.flags == 0 {
                return Ok(None);
            }
        }
        let bytes = encode(&frame)?;
        let t = self.time();
        self.link.send(t, bytes);
        self.records.push(Record::Command { t, source, frame });
        Ok(Some(frame))
    }

    pub fn set_splay(&mut self, level: u8) -> Result<(), SimError> {
        let condition = self.config.session.condition;
        if !condition.allows_splay() && level != 1 {
            return Err(SimError::Locked("splay", condition));
        }
        self.world.set_splay(level)?;
        self.records.push(Record::Splay {
            t: self.time(),
            level,
        });
        Ok(())
    }

    pub fn set_translation(&mut self, x: f64, y: f64) {
        self.world.set_translation([x, y]);
        self.records.push(Record::Translate {
            t: self.time(),
            x,
            y,
        });
    }

    pub fn set_task(&mut self, task: Task) -> Result<(), SimError> {
        let bed = match task {
            Task::Typing => KeyBedSelection::Keyboard,
            Task::Piano => KeyBedSelection::Piano,
        };
        self.world.set_keybed(&bed)?;
        self.config.plant.keybed = bed;
        self.config.session.task = task;
        Ok(())
    }

    pub fn record_marker(&mut self, frame: MarkerFrame) {
        self.records.push(Record::Marker {
            t: self.time(),
            frame,
        });
    }

    pub fn record_intent(&mut self, event: IntentEvent) {
        self.records.push(Record::Intent {
            t: self.time(),
            event,
        });
    }

    /// Nothing in flight and no motor commanded.
    pub fn is_quiescent(&self) -> bool {
        self.link.in_flight() == 0 && self.firmware.phase() == Phase::Idle
    }

    pub fn take_records(&mut self) -> Vec<Record> {
        std::mem::take(&mut self.records)
    }

    pub fn finish(&mut self) {
        self.records.push(Record::End {
            t: self.time(),
            ticks: self.tick,
        });
    }
}

/// Where commands come from.
#[derive(Debug, Clone, Default)]
pub enum Source {
    #[default]
    Empty,
    Script(Script),
    /// Marker stream run through the retarget pipeline; times are
    /// relative to the first frame.
    Markers(Vec<MarkerFrame>),
}

#[derive(Debug, Clone)]
enum Item {
    Frame(CommandFrame, CommandSource),
    Splay(u8),
    Translate(f64, f64),
    Marker(MarkerFrame),
    Intent(IntentEvent),
    End,
}

fn timeline(source: &Source, config: &RunConfig, ready: f64) -> Result<Vec<(f64, Item)>, SimError> {
    let mut items = Vec::new();
    match source {
        Source::Empty => {}
        Source::Script(script) => {
            for step in &script.steps {
                let item = match step.action {
                    Action::Frame(f) => Item::Frame(f, CommandSource::Script),
                    Action::Splay(l) => Item::Splay(l),
                    Action::Translate(x, y) => Item::Translate(x, y),
                    Action::End => Item::End,
                };
                items.push((ready + step.t, item));
            }
        }
        Source::Markers(frames) => {
            let out = retarget_stream(frames, &config.hand, &config.retarget)?;
            let t0 = frames.first().map_or(0.0, |f| f.t);
            for f in frames {
                let mut f = f.clone();
                f.t = ready + f.t - t0;
                items.push((f.t, Item::Marker(f)));
            }
            for e in &out.events {
                let mut e = *e;
                e.t = ready + e.t - t0;
                items.push((e.t, Item::Intent(e)));
            }
            for tf in &out.frames {
                items.push((
                    ready + tf.t - t0,
                    Item::Frame(tf.frame, CommandSource::Retarget),
                ));
            }
            let last = frames.last().map_or(0.0, |f| f.t - t0);
            items.push((ready + last, Item::End));
        }
    }
    // stable: equal times keep source order
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(items)
}

/// Boots, runs the source to completion and returns the session log.
/// Without an explicit end the run stops once everything has been
/// delivered and the hand has been idle for `settle_time`.
pub fn run_simulation(
    config: &RunConfig,
    seed: u64,
    source: &Source,
) -> Result<SessionLog, SimError> {
    let mut sim = Simulator::new(config.clone(), seed)?;
    let mut log = SessionLog::new(sim.header());
    let ready = sim.boot()?;
    let items = timeline(source, config, ready)?;
    let explicit_end = items.iter().any(|(_, i)| matches!(i, Item::End));
    let mut next = 0;
    let mut idle_since: Option<f64> = None;
    let mut stop = false;
    loop {
        let now = sim.time();
        while next < items.len() && items[next].0 <= now + 1e-9 {
            match &items[next].1 {
                Item::Frame(f, src) => {
                    sim.send_frame(*f, *src)?;
                }
                Item::Splay(l) => sim.set_splay(*l)?,
                Item::Translate(x, y) => sim.set_translation(*x, *y),
                Item::Marker(f) => sim.record_marker(f.clone()),
                Item::Intent(e) => sim.record_intent(*e),
                Item::End => stop = true,
            }
            next += 1;
        }
        if !explicit_end && next == items.len() && sim.is_quiescent() {
            let since = *idle_since.get_or_insert(now);
            if now - since >= config.settle_time - 1e-9 {
                stop = true;
            }
        } else {
            idle_since = None;
        }
        if stop || now - ready >= config.max_time {
            break;
        }
        sim.step();
    }
    sim.finish();
    log.records = sim.take_records();
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    /// World snapshots compared against the original.
    pub compared: usize,
    /// Largest absolute angle difference per joint, degrees.
    pub max_divergence: [f64; DOF],
    pub max: f64,
    pub original_key_events: usize,
    pub replayed_key_events: usize,
    /// Lines dropped from a torn log tail.
    pub truncated_lines: usize,
    pub seed: u64,
}

/// Re-executes a log's operator inputs against a fresh world and compares
/// the resulting trajectory with the recorded one.
pub fn replay(
    log: &SessionLog,
    seed: Option<u64>,
    truncated_lines: usize,
) -> Result<ReplayReport, SimError> {
    log.validate()?;
    let config: RunConfig = if log.header.config.is_null() {
        RunConfig::default()
    } else {
        serde_json::from_value(log.header.config.clone()).map_err(SimError::HeaderConfig)?
    };
    let seed = seed.unwrap_or(log.header.seed);
    let mut sim = Simulator::new(config, seed)?;
    sim.boot()?;

    let dt = sim.dt();
    let tick_of = |t: f64| (t / dt).round() as u64;
    let mut inputs: Vec<(u64, &Record)> = Vec::new();
    let mut expected: BTreeMap<u64, [f64; DOF]> = BTreeMap::new();
    let mut original_keys = 0;
    let mut last_tick = sim.ticks();
    for r in &log.records {
        let t = r.time().unwrap_or(0.0);
        match r {
            Record::Command { .. } | Record::Splay { .. } | Record::Translate { .. } => {
                inputs.push((tick_of(t), r))
            }
            Record::World { snapshot, .. } => {
                expected.insert(tick_of(t), snapshot.angles);
            }
            Record::Key { .. } => original_keys += 1,
            _ => {}
        }
        last_tick = last_tick.max(tick_of(t));
    }

    let mut report = ReplayReport {
        compared: 0,
        max_divergence: [0.0; DOF],
        max: 0.0,
        original_key_events: original_keys,
        replayed_key_events: 0,
        truncated_lines,
        seed,
    };
    let compare = |sim: &Simulator, report: &mut ReplayReport| {
        if let Some(want) = expected.get(&sim.ticks()) {
            report.compared += 1;
            for (i, (a, b)) in sim.world().angles().iter().zip(want).enumerate() {
                let d = (a - b).abs();
                report.max_divergence[i] = report.max_divergence[i].max(d);
                report.max = report.max.max(d);
            }
        }
    };
    compare(&sim, &mut report);
    let mut next = 0;
    while sim.ticks() <= last_tick {
        while next < inputs.len() && inputs[next].0 <= sim.ticks() {
            match inputs[next].1 {
                Record::Command { frame, source, .. } => {
                    sim.send_frame(*frame, *source)?;
                }
                Record::Splay { level, .. } => sim.set_splay(*level)?,
                Record::Translate { x, y, .. } => sim.set_translation(*x, *y),
                _ => {}
            }
            next += 1;
        }
        if sim.ticks() == last_tick {
            break;
        }
        sim.step();
        compare(&sim, &mut report);
    }
    report.replayed_key_events = sim
        .take_records()
        .iter()
        .filter(|r| matches!(r, Record::Key { .. }))
        .count();
    Ok(report)
}
