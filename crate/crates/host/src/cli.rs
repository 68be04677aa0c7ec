use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use keyhand_core::mechanics::mech_report;
use keyhand_core::metrics::{analyze, UsageHeatmap, DEFAULT_MARKERS};
use keyhand_core::retarget::{read_markers_csv, read_markers_jsonl, retarget_stream, MarkerFrame};
use keyhand_core::session::SessionLog;

use crate::config::RunConfig;
use crate::script::Script;
use crate::serve::{serve_forever, ServeOptions};
use crate::sim::{replay, run_simulation, Source};

#[derive(Debug, Parser)]
#[command(
    name = "keyhand",
    version,
    about = "Teleoperated robotic hand simulator"
)]
pub struct Cli {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the latency channel; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scripted or marker-driven session and write its log.
    Simulate {
        /// Command script.
        #[arg(long, conflicts_with = "markers")]
        script: Option<PathBuf>,
        /// Marker capture (.csv or .jsonl) fed through the retarget pipeline.
        #[arg(long)]
        markers: Option<PathBuf>,
    },
    /// Re-run a session log and report trajectory divergence.
    Replay {
        /// Session log (.jsonl)
        log: PathBuf,
    },
    /// Convert a marker capture into intent events and command frames.
    Retarget {
        /// Marker capture (.csv or .jsonl)
        markers: PathBuf,
    },
    /// Aggregate session logs into summary statistics and heatmaps.
    Metrics {
        /// Glob selecting session logs.
        pattern: String,
        /// Markers whose path length counts as compensatory movement.
        #[arg(long, value_delimiter = ',')]
        markers: Option<Vec<String>>,
        /// Pixel size of one heatmap cell.
        #[arg(long, default_value_t = 16)]
        cell: usize,
    },
    /// Static torque and force analysis of the drive train.
    MechReport,
    /// Real-time WebSocket bridge for teleoperation clients.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: SocketAddr,
        /// Snapshots per second.
        #[arg(long, default_value_t = 20.0)]
        snapshot_rate: f64,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_markers(path: &Path) -> anyhow::Result<Vec<MarkerFrame>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let frames = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_markers_csv(file)?,
        Some("jsonl") | Some("json") => read_markers_jsonl(BufReader::new(file))?,
        _ => bail!("{}: marker files must be .csv or .jsonl", path.display()),
    };
    Ok(frames)
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Simulate { script, markers } => {
            let seed = config.resolve_seed(cli.seed)?;
            let source = match (script, markers) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    Source::Script(
                        Script::parse(&text, &config.hand)
                            .with_context(|| p.display().to_string())?,
                    )
                }
                (None, Some(p)) => Source::Markers(read_markers(&p)?),
                (None, None) => Source::Empty,
            };
            let mut log = run_simulation(&config, seed, &source)?;
            log.header.wall_clock = Some(crate::wall_clock_now());
            let dest = out.or(config.record.as_deref());
            let mut w = output(dest)?;
            log.write_to(&mut w)?;
            w.flush()?;
            if let Some(p) = dest {
                eprintln!(
                    "{} keys pressed, log written to {}",
                    log.key_events().filter(|k| k.3).count(),
                    p.display()
                );
            }
        }
        Command::Replay { log } => {
            let file = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let (session, dropped) = SessionLog::read_partial(BufReader::new(file))?;
            if dropped > 0 {
                eprintln!("warning: ignored {dropped} unreadable trailing line(s)");
            }
            let report = replay(&session, cli.seed, dropped)?;
            write_json(out, &report)?;
        }
        Command::Retarget { markers } => {
            let frames = read_markers(&markers)?;
            let result = retarget_stream(&frames, &config.hand, &config.retarget)?;
            write_json(out, &result)?;
        }
        Command::Metrics {
            pattern,
            markers,
            cell,
        } => {
            anyhow::ensure!(cell > 0, "--cell must be positive");
            let mut logs = Vec::new();
            for entry in glob::glob(&pattern).context("bad glob pattern")? {
                let path = entry?;
                let file =
                    File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                logs.push(
                    SessionLog::read(BufReader::new(file))
                        .with_context(|| path.display().to_string())?,
                );
            }
            if logs.is_empty() {
                bail!("no session logs match {pattern:?}");
            }
            let names: Vec<String> =
                markers.unwrap_or_else(|| DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect());
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let summary = analyze(&logs, &names);
            let dir = out.unwrap_or(Path::new("metrics"));
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_json(Some(&dir.join("summary.json")), &summary)?;
            write_metrics_tables(dir, &summary.heatmap, &summary, cell)?;
            eprintln!("{} sessions summarized into {}", logs.len(), dir.display());
        }
        Command::MechReport => {
            let report = mech_report(&config.mechanics)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write_json(Some(p), &report)?;
            }
        }
        Command::Serve {
            addr,
            snapshot_rate,
            speed,
        } => {
            let seed = config.resolve_seed(cli.seed)?;
            let record = out
                .map(Path::to_path_buf)
                .or_else(|| config.record.clone())
                .unwrap_or_else(|| PathBuf::from(format!("session-{seed}.jsonl")));
            let opts = ServeOptions {
                addr,
                record: Some(record.clone()),
                snapshot_rate,
                speed,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            let summary = runtime.block_on(serve_forever(config, seed, opts))?;
            eprintln!(
                "served {} client(s), {} ticks, {} commands; log in {}",
                summary.clients,
                summary.ticks,
                summary.commands,
                record.display()
            );
        }
    }
    Ok(())
}

fn write_metrics_tables(
    dir: &Path,
    heatmap: &UsageHeatmap,
    summary: &keyhand_core::metrics::MetricsSummary,
    cell: usize,
) -> anyhow::Result<()> {
    let maps = [
        ("heatmap_counts", heatmap.counts_f64()),
        ("heatmap_by_key", heatmap.normalized_by_key()),
        ("heatmap_by_finger", heatmap.normalized_by_finger()),
    ];
    for (name, values) in &maps {
        std::fs::write(dir.join(format!("{name}.csv")), heatmap.to_csv(values))?;
        std::fs::write(
            dir.join(format!("{name}.pgm")),
            UsageHeatmap::to_pgm(values, cell),
        )?;
    }
    let mut w = csv::Writer::from_path(dir.join("conditions.csv"))?;
    w.write_record([
        "task",
        "condition",
        "sessions",
        "intervals",
        "excluded",
        "mean_rate",
        "rate_se",
    ])?;
    for c in &summary.conditions {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        w.write_record([
            c.task.to_string(),
            c.condition.to_string(),
            c.sessions.to_string(),
            c.intervals.to_string(),
            c.excluded.to_string(),
            opt(c.mean_rate),
            opt(c.rate_se),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("splay.csv"))?;
    w.write_record(["task", "condition", "sessions", "mean_level", "se"])?;
    for s in &summary.splay {
        w.write_record([
            s.task.to_string(),
            s.condition.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
