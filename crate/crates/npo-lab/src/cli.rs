//! Command-line entry points.
//!
//! Subcommands: `train` (run a configured experiment), `measure-qv`
//! (quality/variance/effective-signal table over checkpoint distances),
//! `plot` (SVG curves from metrics streams or tables), and `replay`
//! (bit-exact re-execution check of a finished run segment). The
//! `NPO_OUT_ROOT` environment variable prefixes relative output directories.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoints::CheckpointStore;
use crate::config::RunConfig;
use crate::error::{NpoError, Result};
use crate::metrics::{read_stream, Event};
use crate::plot::{render_qv, render_series, Series};
use crate::sources;
use crate::tasks::{Dataset, Prompt};
use crate::trainer;

#[derive(Debug, Parser)]
#[command(
    name = "npo",
    about = "Desk-scale group-based RL with verifiable rewards and near-future policy guidance"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a training experiment from a config file.
    Train(TrainArgs),
    /// Measure quality / variance-proxy / effective-signal over checkpoint
    /// distances from an anchor step of a finished run.
    MeasureQv(MeasureQvArgs),
    /// Render metrics streams or quality tables to an SVG file.
    Plot(PlotArgs),
    /// Re-execute a run segment with guidance disabled and diff its metrics
    /// against the original stream.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Path to the run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's mode (e.g. grpo, autonpo, source:past_replay).
    #[arg(long)]
    pub mode: Option<String>,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeasureQvArgs {
    /// Run directory containing checkpoints.
    #[arg(long)]
    pub run: PathBuf,
    /// Anchor step T.
    #[arg(long)]
    pub anchor: u64,
    /// Comma-separated checkpoint distances; defaults to every saved
    /// distance ahead of the anchor.
    #[arg(long)]
    pub deltas: Option<String>,
    /// Output table path (tab-separated).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Input files: metrics streams (.jsonl) or quality tables (.tsv).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metric field for stream inputs.
    #[arg(long, default_value = "reward_mean")]
    pub field: String,
    /// Plot title.
    #[arg(long, default_value = "training curves")]
    pub title: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run directory to verify.
    #[arg(long)]
    pub run: PathBuf,
    /// Start checkpoint step.
    #[arg(long)]
    pub from: u64,
    /// Final step to verify (defaults to the last logged step).
    #[arg(long)]
    pub to: Option<u64>,
}

/// Prefix relative paths with `NPO_OUT_ROOT` when set.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("NPO_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Entry point used by `main`; returns a process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::MeasureQv(args) => cmd_measure_qv(args),
        Command::Plot(args) => cmd_plot(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                NpoError::Config(_) => 2,
                NpoError::ReplayDivergence { .. } => 3,
                _ => 1,
            }
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse()?;
    }
    cfg.validate()?;
    let out = resolve_out(&args.out);
    match trainer::train_run(&cfg, &out) {
        Ok(summary) => {
            println!(
                "run complete: {} steps, reward ema {:.4}, {} intervention(s), artifacts in {}",
                summary.final_step,
                summary.final_reward_ema,
                summary.interventions,
                summary.run_dir.display()
            );
            Ok(0)
        }
        Err(e) => {
            // A NaN abort still leaves a diagnostics record behind.
            if let NpoError::NanGradient { .. } = &e {
                let _ = append_abort_record(&out, &format!("{e}"));
            }
            Err(e)
        }
    }
}

fn append_abort_record(run_dir: &Path, message: &str) -> Result<()> {
    use std::io::Write as _;
    let path = run_dir.join("metrics.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| NpoError::io(&path, e))?;
    let record = crate::metrics::MetricsRecord::Event(crate::metrics::EventRecord {
        step: 0,
        event: Event::Abort {
            message: message.to_string(),
        },
    });
    let line = serde_json::to_string(&record)
        .map_err(|e| NpoError::Contract(format!("abort record serialization: {e}")))?;
    writeln!(f, "{line}").map_err(|e| NpoError::io(&path, e))
}

fn load_run_dataset(run_dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let text = std::fs::read_to_string(run_dir.join("dataset.txt"))
        .map_err(|e| NpoError::io(run_dir.join("dataset.txt"), e))?;
    Dataset::import(&text, cfg.policy.vocab, cfg.seed)
}

fn cmd_measure_qv(args: MeasureQvArgs) -> Result<i32> {
    let run = resolve_out(&args.run);
    let cfg = RunConfig::load(&run.join("config.toml"))?;
    let store = CheckpointStore::open(
        run.join("checkpoints"),
        cfg.checkpoint.every,
        cfg.checkpoint.keep,
    )?;
    let dataset = load_run_dataset(&run, &cfg)?;
    let prompts: Vec<&Prompt> = dataset.prompts.iter().collect();
    let deltas: Vec<u64> = match &args.deltas {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim().parse::<u64>().map_err(|e| NpoError::Config(format!(
                    "bad delta {s:?}: {e}"
                )))
            })
            .collect::<Result<Vec<_>>>()?,
        None => store
            .list()?
            .into_iter()
            .filter(|&s| s >= args.anchor)
            .map(|s| s - args.anchor)
            .collect(),
    };
    let rows = sources::measure_qv(
        &store,
        args.anchor,
        &deltas,
        &prompts,
        cfg.grpo.group_size,
        cfg.grpo.temperature,
        cfg.seed,
        cfg.controller.v_proxy_c,
        cfg.controller.kl_samples,
    )?;
    let table = sources::format_qv_table(&rows);
    let out = resolve_out(&args.out);
    std::fs::write(&out, table).map_err(|e| NpoError::io(&out, e))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(0)
}

fn cmd_plot(args: PlotArgs) -> Result<i32> {
    let out = resolve_out(&args.out);
    // Table inputs are detected by their header line.
    let mut qv_rows = None;
    let mut series = Vec::new();
    for input in &args.inputs {
        let path = resolve_out(input);
        let text = std::fs::read_to_string(&path).map_err(|e| NpoError::io(&path, e))?;
        if text.starts_with("delta\t") {
            qv_rows = Some(sources::parse_qv_table(&text)?);
        } else {
            let records = crate::metrics::parse_stream(&text)?;
            let label = path
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            series.push(Series::from_metrics(&label, &records, &args.field));
        }
    }
    let svg = match qv_rows {
        Some(rows) if series.is_empty() => render_qv(&args.title, &rows)?,
        Some(_) => {
            return Err(NpoError::Config(
                "cannot mix metrics streams and quality tables in one plot".into(),
            ))
        }
        None => render_series(&args.title, &args.field, &series)?,
    };
    std::fs::write(&out, svg).map_err(|e| NpoError::io(&out, e))?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_replay(args: ReplayArgs) -> Result<i32> {
    let run = resolve_out(&args.run);
    let to = match args.to {
        Some(t) => t,
        None => {
            let records = read_stream(&run.join("metrics.jsonl"))?;
            records
                .iter()
                .filter_map(|r| r.as_step())
                .map(|s| s.step)
                .max()
                .unwrap_or(0)
        }
    };
    let report = trainer::replay_run(&run, args.from, to)?;
    match report.divergence {
        None => {
            println!(
                "replay ok: steps {}..={} reproduced ({} compared)",
                report.from, report.to, report.steps_compared
            );
            Ok(0)
        }
        Some((step, field)) => {
            eprintln!(
                "replay diverged at step {step} ({field}) after {} matching steps",
                report.steps_compared
            );
            Err(NpoError::ReplayDivergence { step, field })
        }
    }
}
