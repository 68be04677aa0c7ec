//! Plain-text command scripts for `simulate`.
//!
//! ```text
//! # times are seconds after calibration finishes
//! at 0.0  splay 3
//! at 0.2  move wrist_deviation 12
//! at 1.0  move index 140 middle 150 pwm 200
//! at 2.0  raw index 0 pwm 255
//! at 2.5  translate 10 -5
//! at 4.0  end
//! ```
//!
//! `move` takes angles in degrees, `raw` takes normalized targets 0-255.
//! `pwm` defaults to 255 and applies to every joint on the line.

use keyhand_core::model::{HandSpec, JointId};
use keyhand_core::protocol::CommandFrame;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Frame(CommandFrame),
    Splay(u8),
    Translate(f64, f64),
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub t: f64,
    pub line: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    pub steps: Vec<Step>,
}

impl Script {
    pub fn parse(text: &str, spec: &HandSpec) -> Result<Self, ScriptError> {
        let mut steps: Vec<Step> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScriptError { line, message };
            let words: Vec<&str> = content.split_whitespace().collect();
            if words.len() < 3 || words[0] != "at" {
                return Err(err(format!(
                    "expected `at <time> <action>`, got {content:?}"
                )));
            }
            let t: f64 = words[1]
                .parse()
                .ok()
                .filter(|t: &f64| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| err(format!("bad time {:?}", words[1])))?;
            if let Some(prev) = steps.last() {
                if prev.action == Action::End {
                    return Err(err("nothing may follow `end`".into()));
                }
                if t < prev.t {
                    return Err(err(format!(
                        "time {t} is earlier than the previous step at {}",
                        prev.t
                    )));
                }
            }
            let args = &words[3..];
            let action = match words[2] {
                "move" | "raw" => {
                    Action::Frame(parse_frame(words[2] == "raw", args, spec).map_err(err)?)
                }
                "splay" => {
                    let [level] = args else {
                        return Err(err("usage: splay <level>".into()));
                    };
                    let level: u8 = level
                        .parse()
                        .map_err(|_| err(format!("bad splay level {level:?}")))?;
                    spec.splay(level).map_err(|e| err(e.to_string()))?;
                    Action::Splay(level)
                }
                "translate" => {
                    let [x, y] = args else {
                        return Err(err("usage: translate <x> <y>".into()));
                    };
                    let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
                    match (parse(x), parse(y)) {
                        (Some(x), Some(y)) => Action::Translate(x, y),
                        _ => return Err(err(format!("bad translation {x:?} {y:?}"))),
                    }
                }
                "end" if args.is_empty() => Action::End,
                other => return Err(err(format!("unknown action {other:?}"))),
            };
            steps.push(Step { t, line, action });
        }
        Ok(Script { steps })
    }

    pub fn end_time(&self) -> Option<f64> {
        self.steps
            .iter()
            .find(|s| s.action == Action::End)
            .map(|s| s.t)
    }
}

fn parse_frame(raw: bool, args: &[&str], spec: &HandSpec) -> Result<CommandFrame, String> {
    let (pairs, pwm) = match args {
        [rest @ .., "pwm", p] => (rest, *p),
        _ => (args, "255"),
    };
    let pwm: u8 = pwm
        .parse()
        .ok()
        .filter(|p| *p > 0)
        .ok_or_else(|| format!("pwm must be 1-255, got {pwm:?}"))?;
    if pairs.is_empty() || pairs.len() % 2 != 0 {
        return Err("expected <joint> <value> pairs".into());
    }
    let mut frame = CommandFrame::noop();
    for pair in pairs.chunks(2) {
        let joint: JointId = pair[0]
            .parse()
            .map_err(|e: keyhand_core::model::ModelError| e.to_string())?;
        if frame.is_flagged(joint.slot()) {
            return Err(format!("{joint} listed twice"));
        }
        let target = if raw {
            pair[1]
                .parse::<u8>()
                .map_err(|_| format!("bad normalized target {:?}", pair[1]))?
        } else {
            let angle: f64 = pair[1]
                .parse()
                .map_err(|_| format!("bad angle {:?}", pair[1]))?;
            spec.joint(joint)
                .angle_to_normalized(angle)
                .map_err(|e| e.to_string())?
        };
        frame.set(joint.slot(), target, pwm);
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Script, ScriptError> {
        Script::parse(text, &HandSpec::default())
    }

    #[test]
    fn full_example() {
        let s = parse(
            "# demo\nat 0 splay 3\n\nat 0.2 move wrist_deviation 12\nat 1 move index 15 middle 180 pwm 200\nat 2 raw ring 100\nat 2.5 translate 10 -5\nat 4 end\n",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 6);
        assert_eq!(s.steps[0].action, Action::Splay(3));
        let Action::Frame(f) = s.steps[2].action else {
            panic!()
        };
        assert_eq!(f.flags, 0b110);
        assert_eq!(f.targets[1], 255);
        assert_eq!(f.targets[2], 0);
        assert_eq!(f.pwms[1], 200);
        let Action::Frame(f) = s.steps[3].action else {
            panic!()
        };
        assert_eq!((f.targets[3], f.pwms[3]), (100, 255));
        assert_eq!(s.steps[4].action, Action::Translate(10.0, -5.0));
        assert_eq!(s.end_time(), Some(4.0));
        assert_eq!(s.steps[5].line, 8);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("at 0 move index 140\nat x move index 140", 2),
            ("at 0 move index 200", 1),
            ("\n\nat 0 move elbow 10", 3),
            ("at 1 splay 2\nat 0.5 splay 3", 2),
            ("at 0 splay 6", 1),
            ("at 0 move index 140 pwm 0", 1),
            ("at 0 end\nat 1 splay 2", 2),
            ("at 0 jump", 1),
            ("move index 140", 1),
            ("at 0 move index 140 index 150", 1),
        ];
        for (text, line) in cases {
            let e = parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }

    #[test]
    fn empty_script() {
        assert!(parse("# nothing\n\n").unwrap().steps.is_empty());
    }
}
