//! Simulated electromechanical plant.
//!
//! Motors follow a first-order kinematic model: while driven, the output
//! shaft turns at `omega_max * pwm / 255` and stops dead at hard stops or
//! an obstruction. Encoders are ideal incremental counters. Fingertips
//! come from planar three-link forward kinematics placed on the palm by
//! splay, wrist deviation, wrist rotation and the hand translation.
//!
//! Frames: hand frame x points to the little-finger side, y along the
//! fingers, z up out of the back of the (palm-down) hand.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firmware::{Direction, DriveInterface, DriveOutput};
use crate::mechanics::{ForceVoltageModel, MechanicsError, VOLTAGE_RANGE};
use crate::model::{HandSpec, JointId, JointSpec, ModelError, SplayConfig, DOF};

pub type Vec3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant config: {0}")]
    Config(String),
    #[error("invalid keybed: {0}")]
    KeyBed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
}

/// Per-digit link geometry and inter-phalanx coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerChain {
    /// Proximal, middle, distal lengths in mm.
    pub links: [f64; 3],
    /// Relative share of the total flexion taken by each joint.
    pub coupling: [f64; 3],
}

impl Default for FingerChain {
    fn default() -> Self {
        FingerChain {
            links: [45.0, 25.0, 20.0],
            coupling: [1.0, 1.0, 1.0],
        }
    }
}

impl FingerChain {
    /// Joint bends in degrees for a distal angle (180 = straight). The
    /// total flexion `180 - angle` is split in proportion to the coupling.
    pub fn bends(&self, angle: f64) -> [f64; 3] {
        let flexion = 180.0 - angle;
        let total: f64 = self.coupling.iter().sum();
        self.coupling.map(|c| flexion * c / total)
    }

    /// Tip in the finger plane: (along the finger, up).
    pub fn planar_tip(&self, angle: f64) -> [f64; 2] {
        let mut heading = 0.0f64;
        let mut tip = [0.0, 0.0];
        for (len, bend) in self.links.iter().zip(self.bends(angle)) {
            heading += bend.to_radians();
            tip[0] += len * heading.cos();
            tip[1] -= len * heading.sin();
        }
        tip
    }

    pub fn length(&self) -> f64 {
        self.links.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandGeometry {
    pub finger: FingerChain,
    /// Knuckle x positions for Index, Middle, Ring, Little.
    pub finger_base_x: [f64; 4],
    pub wrist_center: Vec3,
    pub thumb_base: Vec3,
    pub thumb_length: f64,
    /// Angle between the thumb plane and the hand's main axis.
    pub thumb_mount: f64,
}

impl Default for HandGeometry {
    fn default() -> Self {
        HandGeometry {
            finger: FingerChain::default(),
            finger_base_x: [-27.0, -9.0, 9.0, 27.0],
            wrist_center: [0.0, -85.0, 0.0],
            thumb_base: [-35.0, -45.0, 0.0],
            thumb_length: 50.0,
            thumb_mount: 40.0,
        }
    }
}

fn rotate_z(p: Vec3, deg: f64) -> Vec3 {
    let (s, c) = deg.to_radians().sin_cos();
    [p[0] * c - p[1] * s, p[0] * s + p[1] * c, p[2]]
}

fn rotate_y(p: Vec3, deg: f64) -> Vec3 {
    let (s, c) = deg.to_radians().sin_cos();
    [p[0] * c + p[2] * s, p[1], -p[0] * s + p[2] * c]
}

/// Wrist posture and hand placement applied after the digit chains.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HandPose {
    /// Positive toward the little-finger side.
    pub deviation: f64,
    /// Positive in supination.
    pub rotation: f64,
    /// Lateral and forward translation of the whole hand, mm.
    pub translation: [f64; 2],
}

impl HandGeometry {
    /// Maps a hand-frame point to the world through the wrist.
    pub fn to_world(&self, p: Vec3, pose: &HandPose) -> Vec3 {
        let w = self.wrist_center;
        let local = [p[0] - w[0], p[1] - w[1], p[2] - w[2]];
        let r = rotate_y(rotate_z(local, -pose.deviation), pose.rotation);
        [
            w[0] + r[0] + pose.translation[0],
            w[1] + r[1] + pose.translation[1],
            w[2] + r[2],
        ]
    }

    /// Finger tip in the hand frame before wrist motion.
    pub fn finger_tip_local(&self, joint: JointId, angle: f64, splay_angle: f64) -> Vec3 {
        let i = joint.finger_index().expect("finger joint");
        let [along, up] = self.finger.planar_tip(angle);
        let (s, c) = splay_angle.to_radians().sin_cos();
        [self.finger_base_x[i] + along * s, along * c, up]
    }

    pub fn thumb_tip_local(&self, angle: f64) -> Vec3 {
        let (ms, mc) = self.thumb_mount.to_radians().sin_cos();
        let (s, c) = angle.to_radians().sin_cos();
        let b = self.thumb_base;
        let along = self.thumb_length * c;
        [
            b[0] - along * ms,
            b[1] + along * mc,
            b[2] - self.thumb_length * s,
        ]
    }

    /// World position of a digit tip.
    pub fn fingertip(
        &self,
        joint: JointId,
        angles: &[f64; DOF],
        splay: &SplayConfig,
        pose: &HandPose,
    ) -> Vec3 {
        let local = match joint {
            JointId::Thumb => self.thumb_tip_local(angles[0]),
            j if j.finger_index().is_some() => {
                self.finger_tip_local(j, angles[j.slot()], splay.angle_for(j))
            }
            _ => panic!("{joint} has no tip"),
        };
        self.to_world(local, pose)
    }
}

/// Forward kinematics of one finger with an explicit wrist posture.
pub fn fingertip_position(
    geometry: &HandGeometry,
    joint: JointId,
    angle: f64,
    splay: &SplayConfig,
    pose: &HandPose,
) -> Vec3 {
    let mut angles = [0.0; DOF];
    angles[joint.slot()] = angle;
    angles[JointId::WristDeviation.slot()] = pose.deviation;
    angles[JointId::WristRotation.slot()] = pose.rotation;
    geometry.fingertip(joint, &angles, splay, pose)
}

/// One motor, its gearing and encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorPlant {
    pub angle: f64,
    /// Output speed at pwm 255, degrees per second.
    pub omega_max: f64,
    pub stop_min: f64,
    pub stop_max: f64,
    pub counts_per_degree: f64,
    /// +1 if forward drive increases the angle.
    pub forward_sign: f64,
    /// Forward motion cannot pass this angle.
    pub obstruction: Option<f64>,
    encoder_origin: f64,
    encoder_offset: i64,
    frozen: Option<i64>,
    last_drive: DriveOutput,
}

impl MotorPlant {
    pub fn new(spec: &JointSpec, angle: f64, omega_max: f64, counts_per_degree: f64) -> Self {
        let angle = spec.clamp(angle);
        MotorPlant {
            angle,
            omega_max,
            stop_min: spec.min_angle,
            stop_max: spec.max_angle,
            counts_per_degree,
            forward_sign: spec.forward_sign(),
            obstruction: None,
            encoder_origin: angle,
            encoder_offset: 0,
            frozen: None,
            last_drive: DriveOutput::OFF,
        }
    }

    /// Raw incremental count; zero at power-on.
    pub fn encoder(&self) -> i64 {
        if let Some(c) = self.frozen {
            return c;
        }
        let travel =
            self.forward_sign * (self.angle - self.encoder_origin) * self.counts_per_degree;
        (travel + 1e-9).floor() as i64 + self.encoder_offset
    }

    /// Adds a count slip, as if pulses had been lost.
    pub fn inject_drift(&mut self, counts: i64) {
        self.encoder_offset += counts;
    }

    pub fn freeze_encoder(&mut self) {
        self.frozen = Some(self.encoder());
    }

    pub fn unfreeze_encoder(&mut self) {
        self.frozen = None;
    }

    pub fn last_drive(&self) -> DriveOutput {
        self.last_drive
    }

    pub fn step(&mut self, drive: DriveOutput, dt: f64) {
        self.last_drive = drive;
        if drive.is_off() || dt <= 0.0 {
            return;
        }
        let sign = match drive.direction {
            Direction::Forward => self.forward_sign,
            Direction::Reverse => -self.forward_sign,
        };
        let from = self.angle;
        let mut to = (from + sign * self.omega_max * f64::from(drive.pwm) / 255.0 * dt)
            .clamp(self.stop_min, self.stop_max);
        if let (Some(o), Direction::Forward) = (self.obstruction, drive.direction) {
            let u_from = self.forward_sign * from;
            let u_to = self.forward_sign * to;
            let u_o = self.forward_sign * o;
            if u_from <= u_o && u_to > u_o {
                to = o;
            }
        }
        self.angle = to;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyBedKind {
    Keyboard,
    Piano,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Key {
    pub label: String,
    /// Lateral centre, world x in mm.
    pub center: f64,
    pub width: f64,
    /// Newtons needed to register a press.
    pub activation_force: f64,
    pub travel: f64,
}

impl Key {
    /// Half-open so that adjacent keys never both contain a point.
    pub fn contains_x(&self, x: f64) -> bool {
        x >= self.center - self.width / 2.0 && x < self.center + self.width / 2.0
    }
}

/// A single row of keys lying under the hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBed {
    pub kind: KeyBedKind,
    pub keys: Vec<Key>,
    /// Forward extent of the key tops, world y.
    pub y_range: [f64; 2],
    /// Height of the key tops, world z.
    pub surface_z: f64,
    #[serde(skip)]
    pressed: Vec<Option<JointId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub t: f64,
    pub key: String,
    pub finger: JointId,
    pub pressed: bool,
}

/// Tip location and the normal force it applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipState {
    pub finger: JointId,
    pub position: Vec3,
    pub force: f64,
}

impl KeyBed {
    pub fn new(
        kind: KeyBedKind,
        keys: Vec<Key>,
        y_range: [f64; 2],
        surface_z: f64,
    ) -> Result<Self, PlantError> {
        let bed = KeyBed {
            kind,
            pressed: vec![None; keys.len()],
            keys,
            y_range,
            surface_z,
        };
        bed.validate()?;
        Ok(bed)
    }

    /// Home row, 19 mm pitch, with J under the index knuckle.
    pub fn qwerty_row() -> Self {
        let labels = ["A", "S", "D", "F", "G", "H", "J", "K", "L", ";"];
        let keys = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Key {
                label: (*l).to_string(),
                center: -27.0 + (i as f64 - 6.0) * 19.0,
                width: 18.0,
                activation_force: 0.6,
                travel: 3.0,
            })
            .collect();
        KeyBed::new(KeyBedKind::Keyboard, keys, [40.0, 130.0], -30.0).expect("valid default layout")
    }

    /// One octave of white keys, C4 to C5.
    pub fn piano_octave() -> Self {
        let labels = ["C4", "D4", "E4", "F4", "G4", "A4", "B4", "C5"];
        let keys = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Key {
                label: (*l).to_string(),
                center: -27.0 + (i as f64 - 2.0) * 23.5,
                width: 23.0,
                activation_force: 0.5,
                travel: 10.0,
            })
            .collect();
        KeyBed::new(KeyBedKind::Piano, keys, [0.0, 150.0], -30.0).expect("valid default layout")
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: String| Err(PlantError::KeyBed(m));
        if self.y_range[0] >= self.y_range[1] {
            return bad("empty y_range".into());
        }
        for k in &self.keys {
            if !(k.activation_force > 0.0) {
                return bad(format!(
                    "key {}: activation force must be positive",
                    k.label
                ));
            }
            if !(k.width > 0.0 && k.travel > 0.0) {
                return bad(format!(
                    "key {}: width and travel must be positive",
                    k.label
                ));
            }
        }
        let mut spans: Vec<(f64, f64, &str)> = self
            .keys
            .iter()
            .map(|k| {
                (
                    k.center - k.width / 2.0,
                    k.center + k.width / 2.0,
                    k.label.as_str(),
                )
            })
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return bad(format!("keys {} and {} overlap", w[0].2, w[1].2));
            }
        }
        Ok(())
    }

    pub fn key_at(&self, p: Vec3) -> Option<usize> {
        if p[1] < self.y_range[0] || p[1] > self.y_range[1] {
            return None;
        }
        self.keys.iter().position(|k| k.contains_x(p[0]))
    }

    /// Tip touches a key top (at or below the surface) within its footprint.
    pub fn contact(&self, p: Vec3) -> Option<usize> {
        if p[2] > self.surface_z {
            return None;
        }
        self.key_at(p)
    }

    pub fn pressed_labels(&self) -> Vec<String> {
        self.keys
            .iter()
            .zip(&self.pressed)
            .filter(|(_, p)| p.is_some())
            .map(|(k, _)| k.label.clone())
            .collect()
    }

    fn ensure_state(&mut self) {
        if self.pressed.len() != self.keys.len() {
            self.pressed = vec![None; self.keys.len()];
        }
    }

    /// Applies tip contacts: a key goes down when a tip inside it pushes
    /// with at least the activation force, and comes back up when that
    /// tip leaves or its force falls under half the activation force.
    pub fn key_events(&mut self, tips: &[TipState], t: f64) -> Vec<KeyEvent> {
        self.ensure_state();
        let mut events = Vec::new();
        for k in 0..self.keys.len() {
            let Some(finger) = self.pressed[k] else {
                continue;
            };
            let holding = tips.iter().find(|s| s.finger == finger).is_some_and(|s| {
                self.contact(s.position) == Some(k)
                    && s.force >= 0.5 * self.keys[k].activation_force
            });
            if !holding {
                self.pressed[k] = None;
                events.push(KeyEvent {
                    t,
                    key: self.keys[k].label.clone(),
                    finger,
                    pressed: false,
                });
            }
        }
        for tip in tips {
            let Some(k) = self.contact(tip.position) else {
                continue;
            };
            if self.pressed[k].is_none() && tip.force >= self.keys[k].activation_force {
                self.pressed[k] = Some(tip.finger);
                events.push(KeyEvent {
                    t,
                    key: self.keys[k].label.clone(),
                    finger: tip.finger,
                    pressed: true,
                });
            }
        }
        events
    }
}

/// FIFO link with a uniform random delay per item.
#[derive(Debug, Clone)]
pub struct LatencyChannel<T> {
    d_min: f64,
    d_max: f64,
    rng: ChaCha8Rng,
    queue: VecDeque<(f64, T)>,
    last_due: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyConfig {
    pub min: f64,
    pub max: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            min: 0.05,
            max: 0.1,
        }
    }
}

impl<T> LatencyChannel<T> {
    pub fn new(config: LatencyConfig, seed: u64) -> Result<Self, PlantError> {
        if !(config.min >= 0.0 && config.max >= config.min && config.max.is_finite()) {
            return Err(PlantError::Config(format!(
                "latency bounds [{}, {}] invalid",
                config.min, config.max
            )));
        }
        Ok(LatencyChannel {
            d_min: config.min,
            d_max: config.max,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
            last_due: f64::NEG_INFINITY,
        })
    }

    /// Queues an item sent at `now`; returns its delivery time.
    pub fn send(&mut self, now: f64, item: T) -> f64 {
        let delay = if self.d_max > self.d_min {
            self.rng.gen_range(self.d_min..=self.d_max)
        } else {
            self.d_min
        };
        // never overtake the previous item; still within [min, max]
        let due = (now + delay).max(self.last_due);
        self.last_due = due;
        self.queue.push_back((due, item));
        due
    }

    /// Items due at or before `now`, in send order.
    pub fn poll(&mut self, now: f64) -> Vec<T> {
        let mut out = Vec::new();
        while self
            .queue
            .front()
            .is_some_and(|(due, _)| *due <= now + 1e-9)
        {
            if let Some((_, item)) = self.queue.pop_front() {
                out.push(item);
            }
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyBedSelection {
    Keyboard,
    Piano,
    None,
    Custom(KeyBed),
}

impl KeyBedSelection {
    pub fn build(&self) -> Result<Option<KeyBed>, PlantError> {
        Ok(match self {
            KeyBedSelection::Keyboard => Some(KeyBed::qwerty_row()),
            KeyBedSelection::Piano => Some(KeyBed::piano_octave()),
            KeyBedSelection::None => None,
            KeyBedSelection::Custom(bed) => {
                let mut bed = bed.clone();
                bed.validate()?;
                bed.ensure_state();
                Some(bed)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Finger output speed at pwm 255.
    pub finger_omega_max: f64,
    /// Motor revolutions per joint revolution, per slot.
    pub reductions: [f64; DOF],
    /// Encoder counts per motor revolution.
    pub base_cpr: f64,
    /// Explicit per-slot speeds replacing the reduction scaling.
    pub omega_override: Option<[f64; DOF]>,
    pub supply_voltage: f64,
    pub geometry: HandGeometry,
    /// Power-on joint angles; neutral pose when absent.
    pub boot_angles: Option<[f64; DOF]>,
    pub keybed: KeyBedSelection,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            finger_omega_max: 412.5,
            reductions: [100.0, 75.0, 75.0, 75.0, 75.0, 220.0, 100.0],
            base_cpr: 12.0,
            omega_override: None,
            supply_voltage: 6.0,
            geometry: HandGeometry::default(),
            boot_angles: None,
            keybed: KeyBedSelection::Keyboard,
        }
    }
}

impl PlantConfig {
    pub fn omega_max(&self, joint: JointId) -> f64 {
        if let Some(o) = self.omega_override {
            return o[joint.slot()];
        }
        let finger = self.reductions[JointId::Index.slot()];
        self.finger_omega_max * finger / self.reductions[joint.slot()]
    }

    pub fn counts_per_degree(&self, joint: JointId) -> f64 {
        self.base_cpr * self.reductions[joint.slot()] / 360.0
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: &str| Err(PlantError::Config(m.to_string()));
        if !(self.finger_omega_max > 0.0) || !(self.base_cpr > 0.0) || !(self.supply_voltage > 0.0)
        {
            return bad("speeds, encoder resolution and supply voltage must be positive");
        }
        if self.reductions.iter().any(|r| !(*r > 0.0)) {
            return bad("reductions must be positive");
        }
        if let Some(o) = self.omega_override {
            if o.iter().any(|w| !(*w > 0.0)) {
                return bad("omega_override entries must be positive");
            }
        }
        let g = &self.geometry;
        if g.finger
            .links
            .iter()
            .chain(&g.finger.coupling)
            .any(|v| !(*v > 0.0))
            || !(g.thumb_length > 0.0)
        {
            return bad("link lengths and coupling ratios must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
struct Contact {
    force: f64,
}

/// Serializable view of the world for logs and the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub t: f64,
    pub angles: [f64; DOF],
    pub encoders: [i64; DOF],
    pub splay_level: u8,
    pub splay_angles: [f64; 4],
    pub translation: [f64; 2],
    /// Thumb, Index, Middle, Ring, Little.
    pub tips: [Vec3; 5],
    pub tip_forces: [f64; 5],
    pub pressed: Vec<String>,
}

/// Motors, digits and keybed advanced in fixed steps.
#[derive(Debug, Clone)]
pub struct PlantWorld {
    hand: HandSpec,
    config: PlantConfig,
    force_model: ForceVoltageModel,
    motors: Vec<MotorPlant>,
    splay: SplayConfig,
    translation: [f64; 2],
    keybed: Option<KeyBed>,
    contacts: [Contact; 5],
    time: f64,
    unclaimed: Vec<KeyEvent>,
}

impl PlantWorld {
    pub fn new(
        hand: HandSpec,
        config: PlantConfig,
        force_model: ForceVoltageModel,
    ) -> Result<Self, PlantError> {
        hand.validate()?;
        config.validate()?;
        force_model.validate()?;
        let motors = JointId::ALL
            .iter()
            .map(|&j| {
                let spec = hand.joint(j);
                let boot = config.boot_angles.map_or(spec.neutral, |b| b[j.slot()]);
                MotorPlant::new(spec, boot, config.omega_max(j), config.counts_per_degree(j))
            })
            .collect();
        let keybed = config.keybed.build()?;
        let mut world = PlantWorld {
            hand,
            config,
            force_model,
            motors,
            splay: SplayConfig::default(),
            translation: [0.0; 2],
            keybed,
            contacts: [Contact::default(); 5],
            time: 0.0,
            unclaimed: Vec::new(),
        };
        world.update_contacts();
        Ok(world)
    }

    pub fn with_defaults() -> Self {
        PlantWorld::new(
            HandSpec::default(),
            PlantConfig::default(),
            ForceVoltageModel::default(),
        )
        .expect("defaults are valid")
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn hand(&self) -> &HandSpec {
        &self.hand
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn motor(&self, joint: JointId) -> &MotorPlant {
        &self.motors[joint.slot()]
    }

    pub fn motor_mut(&mut self, joint: JointId) -> &mut MotorPlant {
        &mut self.motors[joint.slot()]
    }

    pub fn angles(&self) -> [f64; DOF] {
        let mut a = [0.0; DOF];
        for (dst, m) in a.iter_mut().zip(&self.motors) {
            *dst = m.angle;
        }
        a
    }

    pub fn encoders(&self) -> [i64; DOF] {
        let mut e = [0; DOF];
        for (dst, m) in e.iter_mut().zip(&self.motors) {
            *dst = m.encoder();
        }
        e
    }

    pub fn splay(&self) -> SplayConfig {
        self.splay
    }

    pub fn set_splay(&mut self, level: u8) -> Result<(), PlantError> {
        self.splay = self.hand.splay(level)?;
        Ok(())
    }

    pub fn translation(&self) -> [f64; 2] {
        self.translation
    }

    pub fn set_translation(&mut self, xy: [f64; 2]) {
        self.translation = xy;
    }

    pub fn keybed(&self) -> Option<&KeyBed> {
        self.keybed.as_ref()
    }

    /// Swaps the key layout; keys down on the old layout are dropped.
    pub fn set_keybed(&mut self, selection: &KeyBedSelection) -> Result<(), PlantError> {
        self.keybed = selection.build()?;
        self.config.keybed = selection.clone();
        Ok(())
    }

    pub fn pose(&self) -> HandPose {
        HandPose {
            deviation: self.motors[JointId::WristDeviation.slot()].angle,
            rotation: self.motors[JointId::WristRotation.slot()].angle,
            translation: self.translation,
        }
    }

    pub fn tip(&self, joint: JointId) -> Vec3 {
        self.config
            .geometry
            .fingertip(joint, &self.angles(), &self.splay, &self.pose())
    }

    pub fn tips(&self) -> [Vec3; 5] {
        JointId::DIGITS.map(|j| self.tip(j))
    }

    /// Force a digit applies when pressing at `pwm`. Below the bottom of
    /// the calibrated voltage range the force scales linearly to zero.
    pub fn press_force(&self, pwm: u8) -> f64 {
        let v = self.config.supply_voltage * f64::from(pwm) / 255.0;
        let (lo, hi) = VOLTAGE_RANGE;
        let v = v.min(hi);
        if v < lo {
            self.force_model.force_at_voltage(lo).unwrap_or(0.0) * v / lo
        } else {
            self.force_model.force_at_voltage(v).unwrap_or(0.0)
        }
    }

    /// Advances every motor by `dt` and returns key transitions.
    pub fn step(&mut self, drives: &[DriveOutput; DOF], dt: f64) -> Vec<KeyEvent> {
        for (m, d) in self.motors.iter_mut().zip(drives) {
            m.step(*d, dt);
        }
        self.time += dt;
        self.update_contacts()
    }

    fn update_contacts(&mut self) -> Vec<KeyEvent> {
        let tips = self.tips();
        let Some(bed) = self.keybed.as_ref() else {
            return Vec::new();
        };
        let mut states = Vec::with_capacity(5);
        for (i, joint) in JointId::DIGITS.iter().enumerate() {
            let drive = self.motors[joint.slot()].last_drive();
            let force = if bed.contact(tips[i]).is_none() {
                0.0
            } else if drive.is_off() {
                // gearmotors hold their last effort when unpowered
                self.contacts[i].force
            } else if drive.direction == Direction::Forward {
                self.press_force(drive.pwm)
            } else {
                0.0
            };
            self.contacts[i].force = force;
            states.push(TipState {
                finger: *joint,
                position: tips[i],
                force,
            });
        }
        let t = self.time;
        self.keybed
            .as_mut()
            .map_or_else(Vec::new, |bed| bed.key_events(&states, t))
    }

    pub fn take_unclaimed_events(&mut self) -> Vec<KeyEvent> {
        std::mem::take(&mut self.unclaimed)
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            t: self.time,
            angles: self.angles(),
            encoders: self.encoders(),
            splay_level: self.splay.level,
            splay_angles: self.splay.angles,
            translation: self.translation,
            tips: self.tips(),
            tip_forces: self.contacts.map(|c| c.force),
            pressed: self
                .keybed
                .as_ref()
                .map_or_else(Vec::new, KeyBed::pressed_labels),
        }
    }
}

impl DriveInterface for PlantWorld {
    fn read_encoders(&self) -> [i64; DOF] {
        self.encoders()
    }

    fn apply(&mut self, outputs: &[DriveOutput; DOF], dt: f64) {
        let events = self.step(outputs, dt);
        self.unclaimed.extend(events);
    }
}
