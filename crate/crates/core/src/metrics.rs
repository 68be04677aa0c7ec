//! Analysis over session logs: press segmentation, compensatory
//! displacement rate, finger-usage heatmaps and splay-level statistics.
//!
//! Outputs are in metres and seconds; markers are logged in mm.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::JointId;
use crate::plant::Vec3;
use crate::session::{Condition, Record, SessionLog, Task};

pub const MM_PER_M: f64 = 1000.0;
pub const DEFAULT_MARKERS: [&str; 2] = ["elbow", "wrist"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressInterval {
    pub key: String,
    pub finger: JointId,
    /// Dispatch of the pressing finger's command.
    pub t_start: f64,
    /// Key release.
    pub t_end: f64,
}

impl PressInterval {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Segmentation {
    pub intervals: Vec<PressInterval>,
    /// Presses with no earlier command for the pressing finger.
    pub orphans: usize,
    /// Presses still down when the log ends.
    pub unreleased: usize,
}

pub fn segment_presses(log: &SessionLog) -> Segmentation {
    let mut seg = Segmentation::default();
    let mut last_command: BTreeMap<usize, f64> = BTreeMap::new();
    let mut open: BTreeMap<String, (JointId, f64)> = BTreeMap::new();
    for r in &log.records {
        match r {
            Record::Command { t, frame, .. } => {
                for slot in frame.flagged_slots() {
                    last_command.insert(slot, *t);
                }
            }
            Record::Key {
                t,
                key,
                finger,
                pressed: true,
            } => match last_command.get(&finger.slot()) {
                Some(start) if start < t => {
                    open.insert(key.clone(), (*finger, *start));
                }
                _ => seg.orphans += 1,
            },
            Record::Key {
                t,
                key,
                pressed: false,
                ..
            } => {
                if let Some((finger, start)) = open.remove(key) {
                    seg.intervals.push(PressInterval {
                        key: key.clone(),
                        finger,
                        t_start: start,
                        t_end: *t,
                    });
                }
            }
            _ => {}
        }
    }
    seg.unreleased = open.len();
    seg
}

/// Length of a polyline, in the input units.
pub fn path_length(points: &[Vec3]) -> f64 {
    points
        .windows(2)
        .map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisplacementReport {
    /// m/s per interval; `None` where samples were too sparse.
    pub rates: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub excluded: usize,
}

/// Marker path length over each interval divided by its duration,
/// averaged over the designated markers.
pub fn displacement_rate(
    log: &SessionLog,
    intervals: &[PressInterval],
    markers: &[&str],
) -> DisplacementReport {
    let tracks: Vec<Vec<(f64, Vec3)>> = markers
        .iter()
        .map(|name| {
            log.markers()
                .filter_map(|f| f.markers.get(*name).map(|p| (f.t, *p)))
                .collect()
        })
        .collect();
    let mut report = DisplacementReport::default();
    for iv in intervals {
        let mut per_marker = Vec::with_capacity(tracks.len());
        for track in &tracks {
            let pts: Vec<Vec3> = track
                .iter()
                .filter(|(t, _)| *t >= iv.t_start - 1e-9 && *t <= iv.t_end + 1e-9)
                .map(|(_, p)| *p)
                .collect();
            if pts.len() < 2 {
                break;
            }
            per_marker.push(path_length(&pts) / MM_PER_M / iv.duration());
        }
        if per_marker.len() == tracks.len() && !tracks.is_empty() && iv.duration() > 0.0 {
            report.rates.push(Some(
                per_marker.iter().sum::<f64>() / per_marker.len() as f64,
            ));
        } else {
            report.rates.push(None);
            report.excluded += 1;
        }
    }
    let valid: Vec<f64> = report.rates.iter().flatten().copied().collect();
    report.mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    report
}

/// Press counts, digits × keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageHeatmap {
    pub fingers: Vec<JointId>,
    pub keys: Vec<String>,
    pub counts: Vec<Vec<u32>>,
}

impl UsageHeatmap {
    pub fn from_intervals<'a>(intervals: impl IntoIterator<Item = &'a PressInterval>) -> Self {
        let intervals: Vec<&PressInterval> = intervals.into_iter().collect();
        let keys: Vec<String> = intervals
            .iter()
            .map(|iv| iv.key.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let fingers = JointId::DIGITS.to_vec();
        let mut counts = vec![vec![0u32; keys.len()]; fingers.len()];
        for iv in intervals {
            let (Some(r), Ok(c)) = (
                fingers.iter().position(|f| *f == iv.finger),
                keys.binary_search(&iv.key),
            ) else {
                continue;
            };
            counts[r][c] += 1;
        }
        UsageHeatmap {
            fingers,
            keys,
            counts,
        }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }

    fn key_total(&self, c: usize) -> u32 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// Each key's finger distribution; columns with presses sum to 1.
    pub fn normalized_by_key(&self) -> Vec<Vec<f64>> {
        let totals: Vec<u32> = (0..self.keys.len()).map(|c| self.key_total(c)).collect();
        self.counts
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&totals)
                    .map(|(n, t)| {
                        if *t == 0 {
                            0.0
                        } else {
                            f64::from(*n) / f64::from(*t)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Each finger's key distribution; rows with presses sum to 1.
    pub fn normalized_by_finger(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u32 = row.iter().sum();
                row.iter()
                    .map(|n| {
                        if t == 0 {
                            0.0
                        } else {
                            f64::from(*n) / f64::from(t)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn counts_f64(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| r.iter().map(|n| f64::from(*n)).collect())
            .collect()
    }

    /// CSV with a `finger` column followed by one column per key.
    pub fn to_csv(&self, values: &[Vec<f64>]) -> String {
        let mut s = String::from("finger");
        for k in &self.keys {
            s.push(',');
            s.push_str(&csv_field(k));
        }
        s.push('\n');
        for (f, row) in self.fingers.iter().zip(values) {
            s.push_str(f.name());
            for v in row {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    /// Binary greyscale image, one `cell`-pixel square per entry, scaled
    /// so the largest value is white.
    pub fn to_pgm(values: &[Vec<f64>], cell: usize) -> Vec<u8> {
        let rows = values.len();
        let cols = values.first().map_or(0, Vec::len);
        let max = values.iter().flatten().copied().fold(0.0f64, f64::max);
        let (w, h) = (cols * cell, rows * cell);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for row in values {
            let line: Vec<u8> = row
                .iter()
                .flat_map(|v| {
                    let level = if max > 0.0 {
                        (255.0 * v / max).round() as u8
                    } else {
                        0
                    };
                    std::iter::repeat_n(level, cell)
                })
                .collect();
            for _ in 0..cell {
                out.extend_from_slice(&line);
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplayStat {
    pub task: Task,
    pub condition: Condition,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over √n; zero for a single session.
    pub se: f64,
}

pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Chosen splay level per (task, condition). Sessions without splay
/// adjustment count as level 1.
pub fn splay_stats<'a>(logs: impl IntoIterator<Item = &'a SessionLog>) -> Vec<SplayStat> {
    let mut groups: BTreeMap<(Task, Condition), Vec<f64>> = BTreeMap::new();
    for log in logs {
        let h = &log.header;
        let level = if h.condition.allows_splay() {
            h.splay_level
        } else {
            1
        };
        groups
            .entry((h.task, h.condition))
            .or_default()
            .push(f64::from(level));
    }
    groups
        .into_iter()
        .map(|((task, condition), levels)| {
            let (mean, se) = mean_se(&levels);
            SplayStat {
                task,
                condition,
                n: levels.len(),
                mean,
                se,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub task: Task,
    pub condition: Condition,
    pub sessions: usize,
    pub intervals: usize,
    pub excluded: usize,
    pub orphans: usize,
    pub unreleased: usize,
    /// Mean displacement rate over all intervals, m/s.
    pub mean_rate: Option<f64>,
    pub rate_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub sessions: usize,
    pub conditions: Vec<ConditionSummary>,
    pub splay: Vec<SplayStat>,
    pub heatmap: UsageHeatmap,
}

pub fn analyze(logs: &[SessionLog], markers: &[&str]) -> MetricsSummary {
    #[derive(Default)]
    struct Acc {
        sessions: usize,
        rates: Vec<f64>,
        intervals: usize,
        excluded: usize,
        orphans: usize,
        unreleased: usize,
    }
    let mut groups: BTreeMap<(Task, Condition), Acc> = BTreeMap::new();
    let mut all_intervals = Vec::new();
    for log in logs {
        let seg = segment_presses(log);
        let d = displacement_rate(log, &seg.intervals, markers);
        let acc = groups
            .entry((log.header.task, log.header.condition))
            .or_default();
        acc.sessions += 1;
        acc.intervals += seg.intervals.len();
        acc.excluded += d.excluded;
        acc.orphans += seg.orphans;
        acc.unreleased += seg.unreleased;
        acc.rates.extend(d.rates.iter().flatten());
        all_intervals.extend(seg.intervals);
    }
    let conditions = groups
        .into_iter()
        .map(|((task, condition), a)| {
            let (mean, se) = mean_se(&a.rates);
            let some = !a.rates.is_empty();
            ConditionSummary {
                task,
                condition,
                sessions: a.sessions,
                intervals: a.intervals,
                excluded: a.excluded,
                orphans: a.orphans,
                unreleased: a.unreleased,
                mean_rate: some.then_some(mean),
                rate_se: some.then_some(se),
            }
        })
        .collect();
    MetricsSummary {
        sessions: logs.len(),
        conditions,
        splay: splay_stats(logs),
        heatmap: UsageHeatmap::from_intervals(&all_intervals),
    }
}

/// Generator for synthetic cohorts with a known displacement structure.
pub mod synthetic {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::protocol::CommandFrame;
    use crate::retarget::MarkerFrame;
    use crate::session::{CommandSource, Header};

    const KEYS: [(&str, JointId); 8] = [
        ("A", JointId::Little),
        ("S", JointId::Ring),
        ("D", JointId::Middle),
        ("F", JointId::Index),
        ("J", JointId::Index),
        ("K", JointId::Middle),
        ("L", JointId::Ring),
        ("space", JointId::Thumb),
    ];

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct SessionPlan {
        pub task: Task,
        pub condition: Condition,
        pub splay_level: u8,
        pub presses: usize,
        /// Multiplies every marker excursion.
        pub path_scale: f64,
        pub marker_rate: f64,
    }

    /// One session. Press timing, keys and the arm trajectory shape
    /// depend only on `seed`, so sessions sharing a seed differ only by
    /// `path_scale`.
    pub fn session(subject: &str, seed: u64, plan: &SessionPlan) -> SessionLog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut log = SessionLog::new(Header::new(
            plan.task,
            plan.condition,
            plan.splay_level,
            subject,
            seed,
        ));
        let harmonics: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.gen_range(5.0..25.0),
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        let mut events: Vec<Record> = Vec::new();
        let mut t = 0.5;
        for _ in 0..plan.presses {
            let (key, finger) = KEYS[rng.gen_range(0..KEYS.len())];
            let start = t;
            let press = start + rng.gen_range(0.15..0.4);
            let release = press + rng.gen_range(0.1..0.3);
            events.push(Record::Command {
                t: start,
                source: CommandSource::Script,
                frame: CommandFrame::noop().with(finger.slot(), 255, 255),
            });
            events.push(Record::Key {
                t: press,
                key: key.to_string(),
                finger,
                pressed: true,
            });
            events.push(Record::Key {
                t: release,
                key: key.to_string(),
                finger,
                pressed: false,
            });
            t = release + rng.gen_range(0.2..0.6);
        }
        let end = t;
        let arm = |t: f64, base: Vec3, k: f64| -> Vec3 {
            let mut p = base;
            for h in &harmonics {
                let w = std::f64::consts::TAU * h[1];
                p[0] += k * plan.path_scale * h[0] * (w * t + h[2]).sin();
                p[1] += k * plan.path_scale * h[0] * 0.5 * (w * t + h[3]).cos();
                p[2] += k * plan.path_scale * h[0] * 0.3 * (w * 0.7 * t).sin();
            }
            p
        };
        let n = (end * plan.marker_rate).ceil() as usize;
        let mut markers: Vec<Record> = (0..=n)
            .map(|i| {
                let t = i as f64 / plan.marker_rate;
                let mut f = MarkerFrame::new(t);
                f.markers
                    .insert("elbow".into(), arm(t, [0.0, -260.0, 0.0], 1.0));
                f.markers
                    .insert("wrist".into(), arm(t, [0.0, 0.0, 0.0], 0.6));
                Record::Marker { t, frame: f }
            })
            .collect();
        markers.append(&mut events);
        // stable: markers first at equal times
        markers.sort_by(|a, b| a.time().unwrap_or(0.0).total_cmp(&b.time().unwrap_or(0.0)));
        log.records = markers;
        log
    }

    /// `subjects` sessions per condition; condition `c` scales the
    /// trajectory by `ratios[c]`.
    pub fn cohort(
        task: Task,
        subjects: usize,
        presses: usize,
        ratios: [f64; 3],
        seed: u64,
    ) -> Vec<SessionLog> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logs = Vec::new();
        for s in 0..subjects {
            let subject_seed: u64 = rng.gen();
            for (condition, ratio) in Condition::ALL.iter().zip(ratios) {
                let plan = SessionPlan {
                    task,
                    condition: *condition,
                    splay_level: if condition.allows_splay() {
                        rng.gen_range(2..=5)
                    } else {
                        1
                    },
                    presses,
                    path_scale: ratio,
                    marker_rate: 100.0,
                };
                logs.push(session(&format!("s{s:02}"), subject_seed, &plan));
            }
        }
        logs
    }
}
