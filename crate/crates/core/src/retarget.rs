//! Mimicking pipeline: marker trajectories in, command frames out.
//!
//! Stages are pure folds: [`joint_angles`] per frame, a
//! [`CompletionDetector`] per joint, then [`batch_events`] and
//! [`intent_to_frame`]. [`retarget_stream`] chains them.
//!
//! Marker names: `wrist`, `elbow`, `{index,middle,ring,little}_{mcp,pip,tip}`,
//! `thumb_base`, `thumb_tip`. The optional `radial_styloid` and
//! `ulnar_styloid` pair drives forearm rotation; without it rotation stays
//! neutral. Coordinates are mm in a lab frame whose y axis runs along the
//! forearm.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HandSpec, JointId, DOF};
use crate::plant::Vec3;
use crate::protocol::CommandFrame;

pub const FINGER_MARKERS: [&str; 4] = ["index", "middle", "ring", "little"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetargetError {
    #[error("missing marker {0}")]
    MissingMarker(String),
    #[error("degenerate marker geometry: {0}")]
    DegenerateGeometry(String),
    #[error("timestamp {t} does not increase (previous {prev})")]
    NonMonotonicTime { t: f64, prev: f64 },
    #[error("marker {0} has a non-finite coordinate")]
    NonFinite(String),
    #[error("joint {0} appears twice in one frame")]
    DuplicateJoint(JointId),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerFrame {
    pub t: f64,
    pub markers: BTreeMap<String, Vec3>,
}

impl MarkerFrame {
    pub fn new(t: f64) -> Self {
        MarkerFrame {
            t,
            markers: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Vec3, RetargetError> {
        self.markers
            .get(name)
            .copied()
            .ok_or_else(|| RetargetError::MissingMarker(name.to_string()))
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        for (name, p) in &self.markers {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(RetargetError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }
}

/// Checks that timestamps strictly increase.
pub fn validate_stream(frames: &[MarkerFrame]) -> Result<(), RetargetError> {
    for w in frames.windows(2) {
        if w[1].t <= w[0].t {
            return Err(RetargetError::NonMonotonicTime {
                t: w[1].t,
                prev: w[0].t,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    t: f64,
    name: String,
    x: f64,
    y: f64,
    z: f64,
}

/// Reads `t,name,x,y,z` rows; consecutive rows with equal `t` form a frame.
pub fn read_markers_csv<R: std::io::Read>(reader: R) -> Result<Vec<MarkerFrame>, RetargetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut frames: Vec<MarkerFrame> = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| RetargetError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        match frames.last_mut() {
            Some(f) if f.t == row.t => {
                f.markers.insert(row.name, [row.x, row.y, row.z]);
            }
            _ => {
                let mut f = MarkerFrame::new(row.t);
                f.markers.insert(row.name, [row.x, row.y, row.z]);
                frames.push(f);
            }
        }
    }
    validate_stream(&frames)?;
    Ok(frames)
}

/// Reads one JSON `MarkerFrame` per line; blank lines are skipped.
pub fn read_markers_jsonl<R: BufRead>(reader: R) -> Result<Vec<MarkerFrame>, RetargetError> {
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| RetargetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let f: MarkerFrame = serde_json::from_str(&line).map_err(|e| RetargetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        frames.push(f);
    }
    validate_stream(&frames)?;
    Ok(frames)
}

pub fn write_markers_csv<W: std::io::Write>(frames: &[MarkerFrame], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "name", "x", "y", "z"])?;
    for f in frames {
        for (name, p) in &f.markers {
            w.write_record([
                f.t.to_string(),
                name.clone(),
                p[0].to_string(),
                p[1].to_string(),
                p[2].to_string(),
            ])?;
        }
    }
    w.flush()
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Vec3, what: &str) -> Result<Vec3, RetargetError> {
    let n = norm(a);
    if n < 1e-6 {
        return Err(RetargetError::DegenerateGeometry(what.to_string()));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

fn reject(a: Vec3, n: Vec3) -> Vec3 {
    let d = dot(a, n);
    [a[0] - d * n[0], a[1] - d * n[1], a[2] - d * n[2]]
}

/// Interior angle at `b` of the polyline a-b-c, degrees.
pub fn interior_angle(a: Vec3, b: Vec3, c: Vec3) -> Result<f64, RetargetError> {
    let u = unit(sub(a, b), "zero-length proximal segment")?;
    let v = unit(sub(c, b), "zero-length distal segment")?;
    Ok(dot(u, v).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Unit normal of the palm, pointing out of the palm side.
pub fn palm_normal(frame: &MarkerFrame) -> Result<Vec3, RetargetError> {
    let w = frame.get("wrist")?;
    let a = sub(frame.get("index_mcp")?, w);
    let b = sub(frame.get("little_mcp")?, w);
    unit(cross(a, b), "wrist and knuckle markers are collinear")
}

/// Per-joint angles in degrees, clamped to the joint ranges.
pub fn joint_angles(frame: &MarkerFrame, spec: &HandSpec) -> Result<[f64; DOF], RetargetError> {
    frame.validate()?;
    let mut out = [0.0; DOF];
    for (j, s) in JointId::ALL.iter().zip(&spec.joints) {
        out[j.slot()] = s.neutral;
    }
    for (joint, name) in JointId::FINGERS.iter().zip(FINGER_MARKERS) {
        let mcp = frame.get(&format!("{name}_mcp"))?;
        let pip = frame.get(&format!("{name}_pip"))?;
        let tip = frame.get(&format!("{name}_tip"))?;
        out[joint.slot()] = interior_angle(mcp, pip, tip)?;
    }

    let n = palm_normal(frame)?;
    let wrist = frame.get("wrist")?;

    let thumb = unit(
        sub(frame.get("thumb_tip")?, frame.get("thumb_base")?),
        "thumb markers coincide",
    )?;
    out[JointId::Thumb.slot()] = dot(thumb, n).clamp(-1.0, 1.0).asin().to_degrees();

    let forearm = reject(sub(wrist, frame.get("elbow")?), n);
    let hand = reject(sub(frame.get("middle_mcp")?, wrist), n);
    let forearm = unit(forearm, "forearm axis normal to palm")?;
    let hand = unit(hand, "hand axis normal to palm")?;
    out[JointId::WristDeviation.slot()] = dot(cross(forearm, hand), n)
        .atan2(dot(forearm, hand))
        .to_degrees();

    if let (Ok(radial), Ok(ulnar)) = (frame.get("radial_styloid"), frame.get("ulnar_styloid")) {
        let axis = unit(sub(wrist, frame.get("elbow")?), "elbow and wrist coincide")?;
        let v = reject(sub(radial, ulnar), axis);
        unit(v, "styloid markers aligned with the forearm")?;
        // palm-down reference has the radial styloid toward -x
        out[JointId::WristRotation.slot()] = v[2].atan2(-v[0]).to_degrees();
    }

    for (a, s) in out.iter_mut().zip(&spec.joints) {
        *a = s.clamp(*a);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentEvent {
    pub joint: JointId,
    /// Settled angle, degrees.
    pub target: f64,
    /// Largest |angular velocity| during the excursion, degrees/s.
    pub peak_velocity: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetargetConfig {
    pub settle_velocity: f64,
    pub settle_hold: f64,
    pub min_excursion: f64,
    pub batch_window: f64,
    /// Angular velocity mapped to pwm 255.
    pub v_ref: f64,
    pub pwm_floor: u8,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        RetargetConfig {
            settle_velocity: 10.0,
            settle_hold: 0.15,
            min_excursion: 8.0,
            batch_window: 0.05,
            v_ref: 412.5,
            pwm_floor: 30,
        }
    }
}

/// Streaming settle detector for one joint.
#[derive(Debug, Clone)]
pub struct CompletionDetector {
    joint: JointId,
    cfg: RetargetConfig,
    settled: Option<f64>,
    prev: Option<(f64, f64)>,
    quiet_since: Option<f64>,
    peak: f64,
    armed: bool,
}

impl CompletionDetector {
    pub fn new(joint: JointId, cfg: RetargetConfig) -> Self {
        CompletionDetector {
            joint,
            cfg,
            settled: None,
            prev: None,
            quiet_since: None,
            peak: 0.0,
            armed: false,
        }
    }

    pub fn settled(&self) -> Option<f64> {
        self.settled
    }

    pub fn push(&mut self, t: f64, angle: f64) -> Option<IntentEvent> {
        let settled = *self.settled.get_or_insert(angle);
        let Some((pt, pa)) = self.prev.replace((t, angle)) else {
            self.quiet_since = Some(t);
            return None;
        };
        let v = (angle - pa) / (t - pt);
        if (angle - settled).abs() >= self.cfg.min_excursion {
            self.armed = true;
        }
        if v.abs() >= self.cfg.settle_velocity {
            self.peak = self.peak.max(v.abs());
            self.quiet_since = None;
            return None;
        }
        let since = *self.quiet_since.get_or_insert(pt);
        if t - since < self.cfg.settle_hold - 1e-9 {
            return None;
        }
        if !self.armed {
            // tremor below the excursion threshold
            self.peak = 0.0;
            return None;
        }
        let event = IntentEvent {
            joint: self.joint,
            target: angle,
            peak_velocity: self.peak,
            t,
        };
        self.settled = Some(angle);
        self.armed = false;
        self.peak = 0.0;
        Some(event)
    }
}

/// Runs a detector over a whole (t, angle) series.
pub fn detect_completion(
    series: &[(f64, f64)],
    joint: JointId,
    cfg: RetargetConfig,
) -> Vec<IntentEvent> {
    let mut d = CompletionDetector::new(joint, cfg);
    series.iter().filter_map(|&(t, a)| d.push(t, a)).collect()
}

pub fn velocity_to_pwm(velocity: f64, cfg: &RetargetConfig) -> u8 {
    (255.0 * velocity.abs() / cfg.v_ref)
        .round()
        .clamp(f64::from(cfg.pwm_floor), 255.0) as u8
}

pub fn intent_to_frame(
    events: &[IntentEvent],
    spec: &HandSpec,
    cfg: &RetargetConfig,
) -> Result<CommandFrame, RetargetError> {
    let mut frame = CommandFrame::noop();
    for e in events {
        let slot = e.joint.slot();
        if frame.is_flagged(slot) {
            return Err(RetargetError::DuplicateJoint(e.joint));
        }
        let js = spec.joint(e.joint);
        let target = js
            .angle_to_normalized(js.clamp(e.target))
            .expect("clamped angle is in range");
        frame.set(slot, target, velocity_to_pwm(e.peak_velocity, cfg));
    }
    Ok(frame)
}

/// A frame stamped with the time it becomes available for sending.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedFrame {
    pub t: f64,
    pub frame: CommandFrame,
}

/// Groups time-ordered events: each batch opens at its first event and
/// takes every later event within `batch_window` on a joint not yet in it.
pub fn batch_events(events: &[IntentEvent], cfg: &RetargetConfig) -> Vec<Vec<IntentEvent>> {
    let mut sorted = events.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.joint.cmp(&b.joint)));
    let mut batches: Vec<Vec<IntentEvent>> = Vec::new();
    for e in sorted {
        match batches.last_mut() {
            Some(b)
                if e.t - b[0].t <= cfg.batch_window + 1e-9
                    && b.iter().all(|x| x.joint != e.joint) =>
            {
                b.push(e)
            }
            _ => batches.push(vec![e]),
        }
    }
    batches
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetargetOutput {
    pub events: Vec<IntentEvent>,
    pub frames: Vec<TimedFrame>,
    /// Frames dropped for missing or degenerate markers.
    pub skipped: Vec<(f64, String)>,
}

/// Full pipeline. Each batch is sent when its window closes.
pub fn retarget_stream(
    frames: &[MarkerFrame],
    spec: &HandSpec,
    cfg: &RetargetConfig,
) -> Result<RetargetOutput, RetargetError> {
    validate_stream(frames)?;
    let mut detectors: Vec<CompletionDetector> = JointId::ALL
        .iter()
        .map(|j| CompletionDetector::new(*j, *cfg))
        .collect();
    let mut out = RetargetOutput::default();
    for f in frames {
        match joint_angles(f, spec) {
            Ok(angles) => {
                for (d, a) in detectors.iter_mut().zip(angles) {
                    out.events.extend(d.push(f.t, a));
                }
            }
            Err(e @ (RetargetError::MissingMarker(_) | RetargetError::DegenerateGeometry(_))) => {
                out.skipped.push((f.t, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    for batch in batch_events(&out.events, cfg) {
        let frame = intent_to_frame(&batch, spec, cfg)?;
        out.frames.push(TimedFrame {
            t: batch[0].t + cfg.batch_window,
            frame,
        });
    }
    Ok(out)
}

/// Ground-truth posture for the synthetic marker generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanPose {
    /// Interior PIP angles for Index, Middle, Ring, Little.
    pub fingers: [f64; 4],
    /// Elevation of the thumb toward the palm side.
    pub thumb: f64,
    pub deviation: f64,
    pub rotation: f64,
    /// Forearm translation in the lab frame, mm.
    pub offset: Vec3,
}

impl Default for HumanPose {
    fn default() -> Self {
        HumanPose {
            fingers: [180.0; 4],
            thumb: 0.0,
            deviation: 0.0,
            rotation: 0.0,
            offset: [0.0; 3],
        }
    }
}

impl HumanPose {
    pub fn angle(&self, joint: JointId) -> f64 {
        match joint {
            JointId::Thumb => self.thumb,
            JointId::WristDeviation => self.deviation,
            JointId::WristRotation => self.rotation,
            j => self.fingers[j.finger_index().expect("finger")],
        }
    }
}

/// Places a full marker set for a given posture on a palm-down right hand.
pub fn synthesize_markers(t: f64, pose: &HumanPose) -> MarkerFrame {
    let (ds, dc) = (-pose.deviation).to_radians().sin_cos();
    let (rs, rc) = pose.rotation.to_radians().sin_cos();
    // wrist at the origin; deviation about z, then forearm roll about y
    let place = |p: Vec3, deviate: bool| -> Vec3 {
        let p = if deviate {
            [p[0] * dc - p[1] * ds, p[0] * ds + p[1] * dc, p[2]]
        } else {
            p
        };
        let p = [p[0] * rc + p[2] * rs, p[1], -p[0] * rs + p[2] * rc];
        [
            p[0] + pose.offset[0],
            p[1] + pose.offset[1],
            p[2] + pose.offset[2],
        ]
    };
    let mut f = MarkerFrame::new(t);
    let mut put = |name: &str, p: Vec3, deviate: bool| {
        f.markers.insert(name.to_string(), place(p, deviate));
    };
    put("elbow", [0.0, -260.0, 0.0], false);
    put("wrist", [0.0, 0.0, 0.0], false);
    put("radial_styloid", [-25.0, -10.0, 0.0], false);
    put("ulnar_styloid", [25.0, -10.0, 0.0], false);
    // middle knuckle on the forearm axis
    let knuckle_x = [-22.0, 0.0, 20.0, 38.0];
    for (i, name) in FINGER_MARKERS.iter().enumerate() {
        let x = knuckle_x[i];
        let mcp = [x, 85.0, 0.0];
        let pip = [x, 130.0, 0.0];
        let bend = (180.0 - pose.fingers[i]).to_radians();
        let tip = [x, 130.0 + 30.0 * bend.cos(), -30.0 * bend.sin()];
        put(&format!("{name}_mcp"), mcp, true);
        put(&format!("{name}_pip"), pip, true);
        put(&format!("{name}_tip"), tip, true);
    }
    let (ms, mc) = 40f64.to_radians().sin_cos();
    let (ts, tc) = pose.thumb.to_radians().sin_cos();
    let base = [-35.0, 40.0, 0.0];
    put("thumb_base", base, true);
    put(
        "thumb_tip",
        [
            base[0] - 45.0 * tc * ms,
            base[1] + 45.0 * tc * mc,
            -45.0 * ts,
        ],
        true,
    );
    f
}

/// Samples `pose_at` on a uniform clock.
pub fn synthesize_stream(
    duration: f64,
    rate: f64,
    pose_at: impl Fn(f64) -> HumanPose,
) -> Vec<MarkerFrame> {
    let n = (duration * rate).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / rate;
            synthesize_markers(t, &pose_at(t))
        })
        .collect()
}

/// Smooth 0→1 ramp between `t0` and `t1` (cosine profile).
pub fn smooth_step(t: f64, t0: f64, t1: f64) -> f64 {
    if t <= t0 {
        0.0
    } else if t >= t1 {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * (t - t0) / (t1 - t0)).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec() -> HandSpec {
        HandSpec::default()
    }

    #[test]
    fn collinear_is_straight() {
        let a = interior_angle([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(a, 180.0, epsilon = 1e-9);
    }

    #[test]
    fn right_angle() {
        let a = interior_angle([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(a, 90.0, epsilon = 1e-9);
    }

    #[test]
    fn coincident_markers_are_degenerate() {
        let e = interior_angle([1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 2.0, 0.0]).unwrap_err();
        assert!(matches!(e, RetargetError::DegenerateGeometry(_)));
    }

    #[test]
    fn missing_marker_is_reported() {
        let mut f = synthesize_markers(0.0, &HumanPose::default());
        f.markers.remove("ring_pip");
        assert_eq!(
            joint_angles(&f, &spec()),
            Err(RetargetError::MissingMarker("ring_pip".into()))
        );
    }

    #[test]
    fn neutral_pose_recovered() {
        let f = synthesize_markers(0.0, &HumanPose::default());
        let a = joint_angles(&f, &spec()).unwrap();
        for (got, want) in a.iter().zip([0.0, 180.0, 180.0, 180.0, 180.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn analytic_sweep_recovered() {
        let spec = spec();
        let pose = |t: f64| HumanPose {
            fingers: [
                180.0 - 150.0 * (t / 2.0),
                170.0 - 60.0 * (t * 3.0).sin().abs(),
                120.0,
                160.0 - 20.0 * t,
            ],
            thumb: 40.0 * t,
            deviation: -25.0 + 27.0 * t,
            rotation: 60.0 * (t * 2.0).sin(),
            offset: [3.0 * t, -10.0, 5.0],
        };
        for f in synthesize_stream(2.0, 100.0, pose) {
            let truth = pose(f.t);
            let got = joint_angles(&f, &spec).unwrap();
            for j in JointId::ALL {
                assert!(
                    (got[j.slot()] - spec.joint(j).clamp(truth.angle(j))).abs() < 0.5,
                    "{j} at t={}: {} vs {}",
                    f.t,
                    got[j.slot()],
                    truth.angle(j)
                );
            }
        }
    }

    fn step_series(t_step: f64, amplitude: f64) -> Vec<(f64, f64)> {
        (0..200)
            .map(|i| {
                let t = i as f64 / 100.0;
                (t, 180.0 - amplitude * smooth_step(t, t_step, t_step + 0.3))
            })
            .collect()
    }

    #[test]
    fn step_and_hold_emits_once() {
        let cfg = RetargetConfig::default();
        let ev = detect_completion(&step_series(0.2, 40.0), JointId::Index, cfg);
        assert_eq!(ev.len(), 1, "{ev:?}");
        assert_abs_diff_eq!(ev[0].target, 140.0, epsilon = 1e-9);
        // cosine ramp peaks at pi/2 * amplitude / duration
        let peak = std::f64::consts::FRAC_PI_2 * 40.0 / 0.3;
        assert!((ev[0].peak_velocity - peak).abs() / peak < 0.02);
        assert!(ev[0].t >= 0.5 + 0.13 && ev[0].t < 0.5 + 0.25);
    }

    #[test]
    fn constant_stream_is_quiet() {
        let s: Vec<_> = (0..300).map(|i| (i as f64 * 0.01, 120.0)).collect();
        assert!(detect_completion(&s, JointId::Ring, RetargetConfig::default()).is_empty());
    }

    #[test]
    fn small_tremor_is_ignored() {
        let s: Vec<_> = (0..300)
            .map(|i| {
                let t = i as f64 * 0.01;
                (t, 120.0 + 3.0 * (t * 6.0).sin())
            })
            .collect();
        assert!(detect_completion(&s, JointId::Ring, RetargetConfig::default()).is_empty());
    }

    #[test]
    fn two_excursions_in_order() {
        let s: Vec<_> = (0..300)
            .map(|i| {
                let t = i as f64 / 100.0;
                (
                    t,
                    180.0 - 30.0 * smooth_step(t, 0.2, 0.5) + 50.0 * smooth_step(t, 1.5, 1.9)
                        - 70.0,
                )
            })
            .collect();
        let ev = detect_completion(&s, JointId::Middle, RetargetConfig::default());
        assert_eq!(ev.len(), 2);
        assert!(ev[0].t < ev[1].t);
        assert_abs_diff_eq!(ev[0].target, 80.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ev[1].target, 130.0, epsilon = 1e-9);
    }

    fn event(joint: JointId, target: f64, v: f64, t: f64) -> IntentEvent {
        IntentEvent {
            joint,
            target,
            peak_velocity: v,
            t,
        }
    }

    #[test]
    fn full_speed_index_frame() {
        let cfg = RetargetConfig::default();
        let f = intent_to_frame(&[event(JointId::Index, 15.0, 412.5, 1.0)], &spec(), &cfg).unwrap();
        assert_eq!(f.flags, 0x02);
        assert_eq!(f.pwms[1], 255);
        assert_eq!(f.targets[1], 255);
    }

    #[test]
    fn slow_motion_pwm() {
        let cfg = RetargetConfig::default();
        assert_eq!(velocity_to_pwm(412.5 / 4.0, &cfg), 64);
        assert_eq!(velocity_to_pwm(1.0, &cfg), 30);
        assert_eq!(velocity_to_pwm(5000.0, &cfg), 255);
    }

    #[test]
    fn empty_events_noop() {
        let f = intent_to_frame(&[], &spec(), &RetargetConfig::default()).unwrap();
        assert_eq!(f, CommandFrame::noop());
    }

    #[test]
    fn duplicate_joint_rejected() {
        let e = event(JointId::Ring, 100.0, 50.0, 0.0);
        assert_eq!(
            intent_to_frame(&[e, e], &spec(), &RetargetConfig::default()),
            Err(RetargetError::DuplicateJoint(JointId::Ring))
        );
    }

    #[test]
    fn batching_window() {
        let cfg = RetargetConfig::default();
        let ev = [
            event(JointId::Index, 100.0, 50.0, 1.00),
            event(JointId::WristDeviation, 10.0, 50.0, 1.04),
            event(JointId::Ring, 100.0, 50.0, 1.06),
        ];
        let b = batch_events(&ev, &cfg);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let frames = synthesize_stream(0.05, 100.0, |_| HumanPose::default());
        let mut buf = Vec::new();
        write_markers_csv(&frames, &mut buf).unwrap();
        let back = read_markers_csv(buf.as_slice()).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn csv_rejects_time_reversal() {
        let text = "t,name,x,y,z\n0.1,wrist,0,0,0\n0.0,wrist,0,0,0\n";
        assert!(matches!(
            read_markers_csv(text.as_bytes()),
            Err(RetargetError::NonMonotonicTime { .. })
        ));
    }

    #[test]
    fn jsonl_reports_line() {
        let text = "{\"t\":0,\"markers\":{}}\n\nnot json\n";
        assert!(matches!(
            read_markers_jsonl(text.as_bytes()),
            Err(RetargetError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn pipeline_single_flexion() {
        let spec = spec();
        let frames = synthesize_stream(1.5, 100.0, |t| HumanPose {
            fingers: [180.0 - 40.0 * smooth_step(t, 0.2, 0.5), 180.0, 180.0, 180.0],
            ..Default::default()
        });
        let out = retarget_stream(&frames, &spec, &RetargetConfig::default()).unwrap();
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.frames.len(), 1);
        let f = out.frames[0].frame;
        assert_eq!(f.flags, 0x02);
        assert_eq!(
            f.targets[1],
            spec.joint(JointId::Index)
                .angle_to_normalized(140.0)
                .unwrap()
        );
    }

    proptest! {
        #[test]
        fn events_match_stream_value(amps in proptest::collection::vec(-60.0f64..60.0, 1..4)) {
            let cfg = RetargetConfig::default();
            let series: Vec<(f64, f64)> = (0..(amps.len() * 100 + 50))
                .map(|i| {
                    let t = i as f64 / 100.0;
                    let a: f64 = amps.iter().enumerate().map(|(k, amp)| amp * smooth_step(t, k as f64 + 0.1, k as f64 + 0.4)).sum();
                    (t, 100.0 + a)
                })
                .collect();
            for e in detect_completion(&series, JointId::Index, cfg) {
                let at = series.iter().find(|(t, _)| *t == e.t).unwrap().1;
                prop_assert!((e.target - at).abs() <= cfg.settle_velocity);
            }
        }

        #[test]
        fn frame_is_idempotent(target in 15.0f64..180.0, v in 0.0f64..800.0) {
            let cfg = RetargetConfig::default();
            let e = [event(JointId::Little, target, v, 0.0)];
            let a = crate::protocol::encode(&intent_to_frame(&e, &spec(), &cfg).unwrap()).unwrap();
            let b = crate::protocol::encode(&intent_to_frame(&e, &spec(), &cfg).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
