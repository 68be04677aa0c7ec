//! Static torque and force relations for the wrist gear stages and the
//! cable-driven digits, plus the empirical force-vs-voltage curve.
//!
//! Units: torques in N·mm, forces in N, lengths in mm. The digits are
//! treated as quasi-rigid bodies; there is no friction, elasticity,
//! backlash or efficiency loss here.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::JointId;

/// Lowest and highest supply voltage covered by the force model.
pub const VOLTAGE_RANGE: (f64, f64) = (2.0, 6.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanicsError {
    #[error("{operation} requires a {expected:?} stage, got {actual:?}")]
    WrongKind {
        operation: &'static str,
        expected: GearKind,
        actual: GearKind,
    },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("gear with {teeth} teeth; at least 3 required")]
    TooFewTeeth { teeth: u32 },
    #[error("voltage {0} V outside [2, 6] V")]
    VoltageOutOfRange(f64),
    #[error("invalid force model: {0}")]
    InvalidModel(String),
    #[error("invalid mechanics parameters:{}", format_issues(.0))]
    Invalid(Vec<ValidationIssue>),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| format!("\n  - {i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GearKind {
    BevelPair,
    Planetary,
}

/// One gear reduction driven by a motor.
///
/// For a bevel pair `driver_teeth` is the pinion and `driven_teeth` the
/// large gear; for a planetary stage they are the sun and the fixed ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GearStage {
    pub kind: GearKind,
    pub motor_torque: f64,
    pub driver_teeth: u32,
    pub driven_teeth: u32,
    /// Planet tooth count; does not enter the fixed-ring ratio.
    pub planet_teeth: Option<u32>,
}

impl GearStage {
    pub fn bevel(motor_torque: f64, pinion_teeth: u32, gear_teeth: u32) -> Self {
        GearStage {
            kind: GearKind::BevelPair,
            motor_torque,
            driver_teeth: pinion_teeth,
            driven_teeth: gear_teeth,
            planet_teeth: None,
        }
    }

    pub fn planetary(
        motor_torque: f64,
        sun_teeth: u32,
        ring_teeth: u32,
        planet_teeth: u32,
    ) -> Self {
        GearStage {
            kind: GearKind::Planetary,
            motor_torque,
            driver_teeth: sun_teeth,
            driven_teeth: ring_teeth,
            planet_teeth: Some(planet_teeth),
        }
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        positive("motor_torque", self.motor_torque)?;
        let teeth = [
            Some(self.driver_teeth),
            Some(self.driven_teeth),
            self.planet_teeth,
        ];
        for t in teeth.into_iter().flatten() {
            if t < 3 {
                return Err(MechanicsError::TooFewTeeth { teeth: t });
            }
        }
        Ok(())
    }

    /// Torque multiplication of the stage.
    pub fn ratio(&self) -> f64 {
        match self.kind {
            GearKind::BevelPair => bevel_ratio(self.driver_teeth, self.driven_teeth),
            GearKind::Planetary => planetary_ratio(self.driver_teeth, self.driven_teeth),
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), MechanicsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(MechanicsError::NonPositive { name, value })
    }
}

pub fn bevel_ratio(pinion_teeth: u32, gear_teeth: u32) -> f64 {
    f64::from(gear_teeth) / f64::from(pinion_teeth)
}

/// Sun-driven, ring-fixed, carrier output.
pub fn planetary_ratio(sun_teeth: u32, ring_teeth: u32) -> f64 {
    1.0 + f64::from(ring_teeth) / f64::from(sun_teeth)
}

pub fn bevel_output_torque(stage: &GearStage) -> Result<f64, MechanicsError> {
    if stage.kind != GearKind::BevelPair {
        return Err(MechanicsError::WrongKind {
            operation: "bevel_output_torque",
            expected: GearKind::BevelPair,
            actual: stage.kind,
        });
    }
    stage.validate()?;
    Ok(stage.motor_torque * stage.ratio())
}

pub fn planetary_output_torque(stage: &GearStage) -> Result<f64, MechanicsError> {
    if stage.kind != GearKind::Planetary {
        return Err(MechanicsError::WrongKind {
            operation: "planetary_output_torque",
            expected: GearKind::Planetary,
            actual: stage.kind,
        });
    }
    stage.validate()?;
    Ok(stage.motor_torque * stage.ratio())
}

pub fn cable_tension(torque: f64, moment_arm: f64) -> Result<f64, MechanicsError> {
    positive("moment_arm", moment_arm)?;
    Ok(torque / moment_arm)
}

/// Moment balance about the joint: `F * lever = T * d_cyl`.
pub fn tip_force(tension: f64, d_cyl: f64, lever: f64) -> Result<f64, MechanicsError> {
    positive("lever", lever)?;
    Ok(tension * d_cyl / lever)
}

/// A torque source pulling a cable around a drum, acting on a lever.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CableDrive {
    pub drive_torque: f64,
    pub moment_arm: f64,
    pub d_cyl: f64,
    pub lever: f64,
}

impl CableDrive {
    pub fn validate(&self) -> Result<(), MechanicsError> {
        positive("moment_arm", self.moment_arm)?;
        positive("d_cyl", self.d_cyl)?;
        positive("lever", self.lever)
    }

    pub fn tension(&self) -> Result<f64, MechanicsError> {
        cable_tension(self.drive_torque, self.moment_arm)
    }

    pub fn tip_force(&self) -> Result<f64, MechanicsError> {
        self.validate()?;
        tip_force(self.tension()?, self.d_cyl, self.lever)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcePoint {
    pub voltage: f64,
    pub force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceCurve {
    Mean,
    Max,
}

/// Piecewise-linear fingertip force as a function of motor voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceVoltageModel {
    pub mean: Vec<ForcePoint>,
    pub max: Vec<ForcePoint>,
}

impl Default for ForceVoltageModel {
    fn default() -> Self {
        ForceVoltageModel::proportional(3.6, 3.6 * (2.0 / 6.0))
    }
}

impl ForceVoltageModel {
    /// Two-anchor model through (2 V, `force_at_2v`) and (6 V, `force_at_6v`),
    /// used for both curves.
    pub fn proportional(force_at_6v: f64, force_at_2v: f64) -> Self {
        let points = vec![
            ForcePoint {
                voltage: VOLTAGE_RANGE.0,
                force: force_at_2v,
            },
            ForcePoint {
                voltage: VOLTAGE_RANGE.1,
                force: force_at_6v,
            },
        ];
        ForceVoltageModel {
            mean: points.clone(),
            max: points,
        }
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        validate_curve("mean", &self.mean)?;
        validate_curve("max", &self.max)
    }

    /// Max-force curve at `voltage`.
    pub fn force_at_voltage(&self, voltage: f64) -> Result<f64, MechanicsError> {
        self.force(ForceCurve::Max, voltage)
    }

    pub fn force(&self, curve: ForceCurve, voltage: f64) -> Result<f64, MechanicsError> {
        if !(VOLTAGE_RANGE.0..=VOLTAGE_RANGE.1).contains(&voltage) {
            return Err(MechanicsError::VoltageOutOfRange(voltage));
        }
        let points = match curve {
            ForceCurve::Mean => &self.mean,
            ForceCurve::Max => &self.max,
        };
        validate_curve("curve", points)?;
        Ok(interpolate(points, voltage))
    }
}

fn validate_curve(name: &str, points: &[ForcePoint]) -> Result<(), MechanicsError> {
    let bad = |m: String| Err(MechanicsError::InvalidModel(format!("{name}: {m}")));
    if points.len() < 2 {
        return bad("needs at least two points".into());
    }
    if points
        .iter()
        .any(|p| !p.voltage.is_finite() || !p.force.is_finite())
    {
        return bad("non-finite point".into());
    }
    if points[0].voltage > VOLTAGE_RANGE.0 || points[points.len() - 1].voltage < VOLTAGE_RANGE.1 {
        return bad("points must cover 2 V to 6 V".into());
    }
    for w in points.windows(2) {
        if w[1].voltage <= w[0].voltage {
            return bad("voltages must be strictly increasing".into());
        }
        if w[1].force < w[0].force {
            return bad("force must not decrease with voltage".into());
        }
    }
    if points.iter().any(|p| p.force < 0.0) {
        return bad("negative force".into());
    }
    Ok(())
}

fn interpolate(points: &[ForcePoint], v: f64) -> f64 {
    let i = points.partition_point(|p| p.voltage <= v);
    if i == 0 {
        return points[0].force;
    }
    if i == points.len() {
        return points[i - 1].force;
    }
    let (a, b) = (points[i - 1], points[i]);
    if v == a.voltage {
        return a.force;
    }
    a.force + (b.force - a.force) * (v - a.voltage) / (b.voltage - a.voltage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BevelDriveConfig {
    pub motor_torque: f64,
    pub pinion_teeth: u32,
    pub gear_teeth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanetaryDriveConfig {
    pub motor_torque: f64,
    pub sun_teeth: u32,
    pub ring_teeth: u32,
    pub planet_teeth: u32,
    pub planet_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerDriveConfig {
    pub motor_torque: f64,
    pub pinion_teeth: u32,
    pub bevel_teeth: u32,
    /// Cable moment arm from the bevel gear centre.
    pub d_bg: f64,
    pub d_cyl: f64,
    pub d_length: f64,
    pub gearmotor_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThumbDriveConfig {
    pub motor_torque: f64,
    pub d_spool: f64,
    pub d_cyl: f64,
    pub d_offset: f64,
    pub gearmotor_reduction: f64,
}

impl Default for BevelDriveConfig {
    fn default() -> Self {
        BevelDriveConfig {
            motor_torque: 156.9,
            pinion_teeth: 12,
            gear_teeth: 132,
        }
    }
}

impl Default for PlanetaryDriveConfig {
    fn default() -> Self {
        PlanetaryDriveConfig {
            motor_torque: 274.6,
            sun_teeth: 9,
            ring_teeth: 36,
            planet_teeth: 13,
            planet_count: 3,
        }
    }
}

impl Default for FingerDriveConfig {
    fn default() -> Self {
        FingerDriveConfig {
            motor_torque: 100.0,
            pinion_teeth: 6,
            bevel_teeth: 15,
            d_bg: 5.5,
            d_cyl: 0.8,
            d_length: 7.3,
            gearmotor_reduction: 75.0,
        }
    }
}

impl Default for ThumbDriveConfig {
    fn default() -> Self {
        ThumbDriveConfig {
            motor_torque: 156.9,
            d_spool: 3.5,
            d_cyl: 3.5,
            d_offset: 50.0,
            gearmotor_reduction: 100.0,
        }
    }
}

/// Drive parameters for all seven joints. The four fingers share one
/// drive design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MechanicsConfig {
    pub wrist_deviation: BevelDriveConfig,
    pub wrist_rotation: PlanetaryDriveConfig,
    pub finger: FingerDriveConfig,
    pub thumb: ThumbDriveConfig,
    pub force_model: ForceVoltageModel,
}

impl MechanicsConfig {
    pub fn deviation_stage(&self) -> GearStage {
        let c = &self.wrist_deviation;
        GearStage::bevel(c.motor_torque, c.pinion_teeth, c.gear_teeth)
    }

    pub fn rotation_stage(&self) -> GearStage {
        let c = &self.wrist_rotation;
        GearStage::planetary(c.motor_torque, c.sun_teeth, c.ring_teeth, c.planet_teeth)
    }

    pub fn finger_stage(&self) -> GearStage {
        let c = &self.finger;
        GearStage::bevel(c.motor_torque, c.pinion_teeth, c.bevel_teeth)
    }

    /// Collects every parameter problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), MechanicsError> {
        let mut issues = Vec::new();
        let mut check = |field: &str, result: Result<(), MechanicsError>| {
            if let Err(e) = result {
                issues.push(ValidationIssue {
                    field: field.to_string(),
                    message: e.to_string(),
                });
            }
        };
        check("wrist_deviation", self.deviation_stage().validate());
        check("wrist_rotation", self.rotation_stage().validate());
        check("finger", self.finger_stage().validate());
        check("finger.d_bg", positive("d_bg", self.finger.d_bg));
        check("finger.d_cyl", positive("d_cyl", self.finger.d_cyl));
        check(
            "finger.d_length",
            positive("d_length", self.finger.d_length),
        );
        check(
            "finger.gearmotor_reduction",
            positive("gearmotor_reduction", self.finger.gearmotor_reduction),
        );
        check(
            "thumb.motor_torque",
            positive("motor_torque", self.thumb.motor_torque),
        );
        check("thumb.d_spool", positive("d_spool", self.thumb.d_spool));
        check("thumb.d_cyl", positive("d_cyl", self.thumb.d_cyl));
        check("thumb.d_offset", positive("d_offset", self.thumb.d_offset));
        check(
            "thumb.gearmotor_reduction",
            positive("gearmotor_reduction", self.thumb.gearmotor_reduction),
        );
        check("force_model", self.force_model.validate());
        if issues.is_empty() {
            Ok(())
        } else {
            Err(MechanicsError::Invalid(issues))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveReport {
    pub joint: JointId,
    pub mechanism: String,
    pub motor_torque: f64,
    pub stage_ratio: f64,
    pub output_torque: f64,
    pub cable_tension: Option<f64>,
    pub tip_force: Option<f64>,
    pub gearmotor_reduction: Option<f64>,
}

/// The four headline quantities of the static analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSummary {
    pub wrist_deviation_torque: f64,
    pub wrist_rotation_torque: f64,
    pub finger_tip_force: f64,
    pub thumb_tip_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechReport {
    pub summary: DriveSummary,
    pub drives: Vec<DriveReport>,
    pub max_force_at_6v: f64,
}

pub fn mech_report(config: &MechanicsConfig) -> Result<MechReport, MechanicsError> {
    config.validate()?;

    let dev = config.deviation_stage();
    let dev_torque = bevel_output_torque(&dev)?;
    let rot = config.rotation_stage();
    let rot_torque = planetary_output_torque(&rot)?;

    let f = &config.finger;
    let finger_stage = config.finger_stage();
    let m_bg = bevel_output_torque(&finger_stage)?;
    let finger_tension = cable_tension(m_bg, f.d_bg)?;
    let finger_force = tip_force(finger_tension, f.d_cyl, f.d_length)?;

    let t = &config.thumb;
    let thumb_tension = cable_tension(t.motor_torque, t.d_spool)?;
    let thumb_force = tip_force(thumb_tension, t.d_cyl, t.d_offset)?;

    let mut drives = Vec::with_capacity(7);
    drives.push(DriveReport {
        joint: JointId::Thumb,
        mechanism: format!("spool d={} mm, lever {} mm", t.d_spool, t.d_offset),
        motor_torque: t.motor_torque,
        stage_ratio: 1.0,
        output_torque: t.motor_torque,
        cable_tension: Some(thumb_tension),
        tip_force: Some(thumb_force),
        gearmotor_reduction: Some(t.gearmotor_reduction),
    });
    for joint in JointId::FINGERS {
        drives.push(DriveReport {
            joint,
            mechanism: format!("bevel {}:{} + cable", f.pinion_teeth, f.bevel_teeth),
            motor_torque: f.motor_torque,
            stage_ratio: finger_stage.ratio(),
            output_torque: m_bg,
            cable_tension: Some(finger_tension),
            tip_force: Some(finger_force),
            gearmotor_reduction: Some(f.gearmotor_reduction),
        });
    }
    drives.push(DriveReport {
        joint: JointId::WristDeviation,
        mechanism: format!("bevel {}:{}", dev.driver_teeth, dev.driven_teeth),
        motor_torque: dev.motor_torque,
        stage_ratio: dev.ratio(),
        output_torque: dev_torque,
        cable_tension: None,
        tip_force: None,
        gearmotor_reduction: None,
    });
    drives.push(DriveReport {
        joint: JointId::WristRotation,
        mechanism: format!(
            "planetary sun {} / {}x planet {} / fixed ring {}",
            rot.driver_teeth,
            config.wrist_rotation.planet_count,
            config.wrist_rotation.planet_teeth,
            rot.driven_teeth
        ),
        motor_torque: rot.motor_torque,
        stage_ratio: rot.ratio(),
        output_torque: rot_torque,
        cable_tension: None,
        tip_force: None,
        gearmotor_reduction: None,
    });

    Ok(MechReport {
        summary: DriveSummary {
            wrist_deviation_torque: dev_torque,
            wrist_rotation_torque: rot_torque,
            finger_tip_force: finger_force,
            thumb_tip_force: thumb_force,
        },
        drives,
        max_force_at_6v: config.force_model.force_at_voltage(VOLTAGE_RANGE.1)?,
    })
}

impl MechReport {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let w = self
            .drives
            .iter()
            .map(|d| d.mechanism.len())
            .max()
            .unwrap_or(0)
            .max(9);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:<w$} {:>10} {:>7} {:>11} {:>9} {:>8} {:>7}\n",
            "joint", "mechanism", "M [N·mm]", "ratio", "out [N·mm]", "T [N]", "F [N]", "gmotor"
        ));
        let opt = |v: Option<f64>, prec: usize| {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
        };
        for d in &self.drives {
            out.push_str(&format!(
                "{:<16} {:<w$} {:>10.1} {:>7.3} {:>11.1} {:>9} {:>8} {:>7}\n",
                d.joint.name(),
                d.mechanism,
                d.motor_torque,
                d.stage_ratio,
                d.output_torque,
                opt(d.cable_tension, 2),
                opt(d.tip_force, 2),
                d.gearmotor_reduction
                    .map_or_else(|| "-".to_string(), |r| format!("1:{r}")),
            ));
        }
        let s = &self.summary;
        out.push_str(&format!(
            "\nulnar/radial deviation output torque  {:>9.1} N·mm\n",
            s.wrist_deviation_torque
        ));
        out.push_str(&format!(
            "pronation/supination output torque    {:>9.1} N·mm\n",
            s.wrist_rotation_torque
        ));
        out.push_str(&format!(
            "finger tip force                      {:>9.2} N\n",
            s.finger_tip_force
        ));
        out.push_str(&format!(
            "thumb tip force                       {:>9.2} N\n",
            s.thumb_tip_force
        ));
        out.push_str(&format!(
            "max key force at 6 V                  {:>9.2} N\n",
            self.max_force_at_6v
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn wrist_deviation_torque() {
        let t = bevel_output_torque(&GearStage::bevel(156.9, 12, 132)).unwrap();
        assert_relative_eq!(t, 1725.9, max_relative = 1e-12);
        let t = bevel_output_torque(&GearStage::bevel(100.0, 6, 15)).unwrap();
        assert_relative_eq!(t, 250.0, max_relative = 1e-12);
        let t = bevel_output_torque(&GearStage::bevel(42.5, 17, 17)).unwrap();
        assert_eq!(t, 42.5);
    }

    #[test]
    fn wrist_rotation_torque() {
        let t = planetary_output_torque(&GearStage::planetary(274.6, 9, 36, 13)).unwrap();
        assert_relative_eq!(t, 1373.0, max_relative = 1e-12);
        let t = planetary_output_torque(&GearStage::planetary(100.0, 10, 30, 10)).unwrap();
        assert_relative_eq!(t, 400.0, max_relative = 1e-12);
        // zero ring is only an analytic limit of the ratio; stages reject it
        assert_eq!(planetary_ratio(9, 0), 1.0);
        assert!(planetary_output_torque(&GearStage::planetary(100.0, 9, 0, 13)).is_err());
    }

    #[test]
    fn wrong_stage_kind() {
        let p = GearStage::planetary(10.0, 9, 36, 13);
        assert!(matches!(
            bevel_output_torque(&p),
            Err(MechanicsError::WrongKind { .. })
        ));
        let b = GearStage::bevel(10.0, 12, 132);
        assert!(matches!(
            planetary_output_torque(&b),
            Err(MechanicsError::WrongKind { .. })
        ));
    }

    #[test]
    fn stage_validation() {
        assert!(GearStage::bevel(0.0, 12, 132).validate().is_err());
        assert!(GearStage::bevel(-1.0, 12, 132).validate().is_err());
        assert_eq!(
            GearStage::bevel(1.0, 2, 132).validate(),
            Err(MechanicsError::TooFewTeeth { teeth: 2 })
        );
    }

    #[test]
    fn tensions() {
        assert_relative_eq!(
            cable_tension(250.0, 5.5).unwrap(),
            500.0 / 11.0,
            max_relative = 1e-12
        );
        assert!((cable_tension(156.9, 3.5).unwrap() - 44.83).abs() <= 0.01);
        assert_eq!(cable_tension(0.0, 2.0).unwrap(), 0.0);
        assert!(cable_tension(1.0, 0.0).is_err());
        assert!(cable_tension(1.0, -3.0).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn tip_forces() {
        assert!((tip_force(500.0 / 11.0, 0.8, 7.3).unwrap() - 4.98).abs() <= 0.01);
        assert!((tip_force(44.83, 3.5, 50.0).unwrap() - 3.14).abs() <= 0.01);
        assert_eq!(tip_force(12.5, 4.0, 4.0).unwrap(), 12.5);
        assert!(tip_force(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn cable_drive_struct() {
        let c = CableDrive {
            drive_torque: 250.0,
            moment_arm: 5.5,
            d_cyl: 0.8,
            lever: 7.3,
        };
        assert!((c.tip_force().unwrap() - 4.98).abs() <= 0.01);
    }

    #[test]
    fn finger_pipeline_end_to_end() {
        let m_bg = bevel_output_torque(&GearStage::bevel(100.0, 6, 15)).unwrap();
        let f = tip_force(cable_tension(m_bg, 5.5).unwrap(), 0.8, 7.3).unwrap();
        assert!((f - 4.98).abs() / 4.98 <= 0.005);
    }

    #[test]
    fn default_force_model() {
        let m = ForceVoltageModel::default();
        assert_eq!(m.force_at_voltage(6.0).unwrap(), 3.6);
        assert_relative_eq!(m.force_at_voltage(2.0).unwrap(), 1.2, max_relative = 1e-12);
        assert_relative_eq!(m.force_at_voltage(4.0).unwrap(), 2.4, max_relative = 1e-12);
        assert!(m.force_at_voltage(1.9).is_err());
        assert!(m.force_at_voltage(6.1).is_err());
    }

    #[test]
    fn force_model_through_nodes() {
        let pts = |fs: &[(f64, f64)]| {
            fs.iter()
                .map(|&(voltage, force)| ForcePoint { voltage, force })
                .collect::<Vec<_>>()
        };
        let m = ForceVoltageModel {
            mean: pts(&[(2.0, 0.5), (4.0, 1.0), (6.0, 2.5)]),
            max: pts(&[(2.0, 0.9), (3.0, 1.5), (5.0, 3.0), (6.0, 3.6)]),
        };
        m.validate().unwrap();
        assert_eq!(m.force_at_voltage(3.0).unwrap(), 1.5);
        assert_eq!(m.force_at_voltage(5.0).unwrap(), 3.0);
        assert_relative_eq!(m.force_at_voltage(4.0).unwrap(), 2.25, max_relative = 1e-12);
        assert_relative_eq!(
            m.force(ForceCurve::Mean, 5.0).unwrap(),
            1.75,
            max_relative = 1e-12
        );
    }

    #[test]
    fn force_model_rejects_bad_curves() {
        let mut m = ForceVoltageModel::default();
        m.max[1].force = 0.5;
        assert!(m.validate().is_err());
        let mut m = ForceVoltageModel::default();
        m.mean[1].voltage = 5.0;
        assert!(m.validate().is_err());
        let mut m = ForceVoltageModel::default();
        m.max[0].voltage = 6.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn report_under_defaults() {
        #[allow(clippy::approx_constant)]
        let thumb = 3.14;
        let r = mech_report(&MechanicsConfig::default()).unwrap();
        let s = r.summary;
        assert_relative_eq!(s.wrist_deviation_torque, 1725.9, max_relative = 1e-9);
        assert_relative_eq!(s.wrist_rotation_torque, 1373.0, max_relative = 1e-9);
        assert!((s.finger_tip_force - 4.98).abs() <= 0.01);
        assert!((s.thumb_tip_force - thumb).abs() <= 0.01);
        assert_eq!(r.drives.len(), 7);
        assert_eq!(r.drives[1].gearmotor_reduction, Some(75.0));
        assert_eq!(r.drives[0].gearmotor_reduction, Some(100.0));
        let table = r.to_table();
        assert!(table.contains("1725.9"));
        assert!(table.contains("1373.0"));
    }

    #[test]
    fn report_doubles_with_torque() {
        let base = mech_report(&MechanicsConfig::default()).unwrap().summary;
        let mut cfg = MechanicsConfig::default();
        cfg.wrist_deviation.motor_torque *= 2.0;
        cfg.wrist_rotation.motor_torque *= 2.0;
        cfg.finger.motor_torque *= 2.0;
        cfg.thumb.motor_torque *= 2.0;
        let d = mech_report(&cfg).unwrap().summary;
        assert_relative_eq!(
            d.wrist_deviation_torque,
            2.0 * base.wrist_deviation_torque,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            d.wrist_rotation_torque,
            2.0 * base.wrist_rotation_torque,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            d.finger_tip_force,
            2.0 * base.finger_tip_force,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            d.thumb_tip_force,
            2.0 * base.thumb_tip_force,
            max_relative = 1e-12
        );
    }

    #[test]
    fn report_custom_gear_set() {
        // Hand-substituted values:
        //   deviation 200 * 90/10 = 1800
        //   rotation 150 * (1 + 40/8) = 900
        //   finger (80 * 20/8) / 4 * 1.0 / 8 = 6.25
        //   thumb 120 / 4 * 2 / 40 = 1.5
        let mut cfg = MechanicsConfig {
            wrist_deviation: BevelDriveConfig {
                motor_torque: 200.0,
                pinion_teeth: 10,
                gear_teeth: 90,
            },
            ..MechanicsConfig::default()
        };
        cfg.wrist_rotation.motor_torque = 150.0;
        cfg.wrist_rotation.sun_teeth = 8;
        cfg.wrist_rotation.ring_teeth = 40;
        cfg.finger = FingerDriveConfig {
            motor_torque: 80.0,
            pinion_teeth: 8,
            bevel_teeth: 20,
            d_bg: 4.0,
            d_cyl: 1.0,
            d_length: 8.0,
            gearmotor_reduction: 50.0,
        };
        cfg.thumb = ThumbDriveConfig {
            motor_torque: 120.0,
            d_spool: 4.0,
            d_cyl: 2.0,
            d_offset: 40.0,
            gearmotor_reduction: 100.0,
        };
        let s = mech_report(&cfg).unwrap().summary;
        assert_relative_eq!(s.wrist_deviation_torque, 1800.0, max_relative = 1e-12);
        assert_relative_eq!(s.wrist_rotation_torque, 900.0, max_relative = 1e-12);
        assert_relative_eq!(s.finger_tip_force, 6.25, max_relative = 1e-12);
        assert_relative_eq!(s.thumb_tip_force, 1.5, max_relative = 1e-12);
    }

    #[test]
    fn report_itemizes_every_problem() {
        let mut cfg = MechanicsConfig::default();
        cfg.finger.d_bg = 0.0;
        cfg.thumb.d_offset = -5.0;
        cfg.wrist_rotation.sun_teeth = 1;
        match mech_report(&cfg) {
            Err(MechanicsError::Invalid(issues)) => {
                let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
                assert_eq!(
                    fields,
                    vec!["wrist_rotation", "finger.d_bg", "thumb.d_offset"]
                );
            }
            other => panic!("expected itemized errors, got {other:?}"),
        }
    }

    fn arb_model() -> impl Strategy<Value = ForceVoltageModel> {
        let curve = (1usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.01f64..1.0, n),
                proptest::collection::vec(0.0f64..2.0, n + 2),
            )
                .prop_map(|(gaps, incs)| {
                    let total: f64 = gaps.iter().sum();
                    let mut v = 2.0;
                    let mut volts = vec![2.0];
                    for g in &gaps[..gaps.len() - 1] {
                        v += 4.0 * g / total;
                        volts.push(v);
                    }
                    volts.push(6.0);
                    let mut f = 0.0;
                    volts
                        .into_iter()
                        .zip(incs)
                        .map(|(voltage, inc)| {
                            f += inc;
                            ForcePoint { voltage, force: f }
                        })
                        .collect::<Vec<_>>()
                })
        });
        (curve.clone(), curve).prop_map(|(mean, max)| ForceVoltageModel { mean, max })
    }

    proptest! {
        #[test]
        fn homogeneous_in_torque(m in 0.1f64..1000.0, k in 0.01f64..100.0, a in 3u32..200, b in 3u32..200) {
            let s1 = bevel_output_torque(&GearStage::bevel(m, a, b)).unwrap();
            let s2 = bevel_output_torque(&GearStage::bevel(k * m, a, b)).unwrap();
            prop_assert!((s2 - k * s1).abs() <= 1e-9 * s2.abs().max(1.0));
            let p1 = planetary_output_torque(&GearStage::planetary(m, a, b, 13)).unwrap();
            let p2 = planetary_output_torque(&GearStage::planetary(k * m, a, b, 13)).unwrap();
            prop_assert!((p2 - k * p1).abs() <= 1e-9 * p2.abs().max(1.0));
            let t1 = cable_tension(m, 5.5).unwrap();
            prop_assert!((cable_tension(k * m, 5.5).unwrap() - k * t1).abs() <= 1e-9 * (k * t1).max(1.0));
            let f1 = tip_force(m, 0.8, 7.3).unwrap();
            prop_assert!((tip_force(k * m, 0.8, 7.3).unwrap() - k * f1).abs() <= 1e-9 * (k * f1).max(1.0));
        }

        #[test]
        fn bevel_ratio_inverse(a in 3u32..500, b in 3u32..500) {
            let fwd = bevel_output_torque(&GearStage::bevel(1.0, a, b)).unwrap();
            let back = bevel_output_torque(&GearStage::bevel(1.0, b, a)).unwrap();
            prop_assert!((fwd * back - 1.0).abs() < 1e-12);
        }

        #[test]
        fn force_monotone(model in arb_model(), u in 0.0f64..=1.0, w in 0.0f64..=1.0) {
            model.validate().unwrap();
            let (lo, hi) = if u <= w { (u, w) } else { (w, u) };
            let a = model.force_at_voltage(2.0 + 4.0 * lo).unwrap();
            let b = model.force_at_voltage(2.0 + 4.0 * hi).unwrap();
            prop_assert!(a <= b + 1e-12);
        }
    }
}
