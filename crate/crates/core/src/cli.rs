//! Command-line front end: `generate`, `train`, `eval` and `collect`.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::collector::{read_questions, Collector, CollectorConfig};
use crate::config::{parse_override, CostAccounting, Method, RunConfig};
use crate::error::{Error, Result};
use crate::env::answer_universe;
use crate::trace::{generate_synthetic, load_traces, save_traces, SyntheticConfig};
use crate::trainer::{evaluate, load_splits, run_with, Checkpoint, IterationRecord, MetricsRecord, TrainState};

/// Prints a status line; a closed stdout is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "ccpo", version, about = "Cost-aware orchestration of a base and a guide model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic trace corpus.
    Generate {
        /// Generator settings (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        /// Override a generator field, e.g. `--set num_traces=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a method (or fit a rule) and write checkpoint, logs and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a trace file, one CSV row per checkpoint.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Overrides each checkpoint's cost accounting.
        #[arg(long, value_enum)]
        accounting: Option<AccountingArg>,
    },
    /// Build a trace corpus by calling live chat-completion endpoints.
    Collect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum AccountingArg {
    Executed,
    SampledPath,
}

impl From<AccountingArg> for CostAccounting {
    fn from(a: AccountingArg) -> Self {
        match a {
            AccountingArg::Executed => CostAccounting::Executed,
            AccountingArg::SampledPath => CostAccounting::SampledPath,
        }
    }
}

/// One evaluation CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub cost_cents: f64,
    pub coverage: f64,
    pub avg_len: f64,
    pub set_size: f64,
    pub n_episodes: usize,
}

impl MetricsRow {
    pub fn new(cfg: &RunConfig, m: &MetricsRecord) -> Self {
        Self {
            method: cfg.method,
            alpha: cfg.alpha,
            lambda: cfg.lambda,
            seed: cfg.seed,
            cost_cents: m.cost_cents,
            coverage: m.coverage,
            avg_len: m.avg_len,
            set_size: m.set_size,
            n_episodes: m.n_episodes,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_generate(config: Option<&Path>, output: &Path, overrides: &[String]) -> Result<()> {
    let mut table: toml::Table = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    let cfg: SyntheticConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let set = generate_synthetic(&cfg)?;
    save_traces(output, &set)?;
    let unsolvable = set.traces.iter().filter(|t| !answer_universe(t).contains(t.true_answer)).count();
    say!(
        "wrote {} traces (T = {}, unsolvable rate {:.3}) to {}",
        set.len(),
        set.horizon(),
        unsolvable as f64 / set.len().max(1) as f64,
        output.display()
    );
    Ok(())
}

/// Keeps the first `keep` lines of an iteration log and opens it for appending.
fn open_log(path: &Path, keep: usize) -> Result<BufWriter<File>> {
    let kept: Vec<String> = if keep > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        BufReader::new(f)
            .lines()
            .take(keep)
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?
    } else {
        Vec::new()
    };
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for l in &kept {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(BufWriter::new(f))
}

fn cmd_train(config: Option<&Path>, overrides: &[String], output_dir: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p, overrides)?,
        None => RunConfig::from_toml_str("", overrides)?,
    };
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    let resume_state: Option<TrainState> = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.method != cfg.method {
                return Err(Error::Usage(format!(
                    "checkpoint was trained with `{}`, config asks for `{}`",
                    ck.method, cfg.method
                )));
            }
            Some(ck.state.ok_or_else(|| Error::Usage("checkpoint holds no training state".into()))?)
        }
        None => None,
    };
    let splits = load_splits(&cfg)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?).map_err(|e| Error::io(dir.join("config.toml"), e))?;

    let log_path = dir.join("iterations.jsonl");
    let ck_path = dir.join("checkpoint.json");
    let start = resume_state.as_ref().map_or(0, |s| s.iteration);
    let mut log = open_log(&log_path, start)?;
    let every = cfg.checkpoint_every;
    let outcome = run_with(&cfg, &splits, resume_state, |rec: &IterationRecord, state: &TrainState| {
        let line = serde_json::to_string(rec).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && rec.iteration % every == 0 {
            Checkpoint::trained(&cfg, state.clone(), state.calibrator.kappa, false).save(&ck_path)?;
        }
        log::info!(
            "iter {} cost {:.4} jbar {:.3} kl {:.2e} kappa {:.4}",
            rec.iteration,
            rec.mean_cost,
            rec.jbar,
            rec.kl,
            rec.kappa
        );
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let outcome = outcome?;
    outcome.checkpoint.save(&ck_path)?;
    if let Some(report) = &outcome.calibration {
        write_json(&dir.join("calibration.json"), report)?;
    }
    if let Some(m) = &outcome.metrics {
        write_metrics_csv(&dir.join("metrics.csv"), &[MetricsRow::new(&cfg, m)])?;
        say!(
            "{}: cost {:.4} cents, coverage {:.3}, avg len {:.2}, set size {:.2} over {} test episodes",
            cfg.method, m.cost_cents, m.coverage, m.avg_len, m.set_size, m.n_episodes
        );
    }
    say!("checkpoint written to {}", ck_path.display());
    Ok(())
}

fn cmd_eval(checkpoints: &[PathBuf], traces: &Path, output: &Path, accounting: Option<CostAccounting>) -> Result<()> {
    let set = load_traces(traces)?;
    if set.is_empty() {
        return Err(Error::Usage(format!("{} holds no traces", traces.display())));
    }
    let mut rows = Vec::new();
    for p in checkpoints {
        let ck = Checkpoint::load(p)?;
        if set.horizon() != ck.horizon {
            return Err(Error::validation(
                "traces.horizon",
                format!("trace file has T = {}, checkpoint expects {}", set.horizon(), ck.horizon),
            ));
        }
        ck.check_traces(&set.traces)?;
        let cfg = &ck.config;
        let m = evaluate(
            &ck.decider()?,
            &set.traces,
            &cfg.env(),
            &cfg.prices(),
            accounting.unwrap_or(cfg.cost_accounting),
            cfg.seed,
        )?;
        rows.push(MetricsRow::new(cfg, &m));
    }
    write_metrics_csv(output, &rows)?;
    say!("wrote {} rows to {}", rows.len(), output.display());
    Ok(())
}

fn cmd_collect(config: &Path, output: &Path) -> Result<()> {
    let cfg = CollectorConfig::load(config)?;
    let questions = read_questions(&cfg.questions)?;
    let collection = Collector::new(cfg)?.collect(&questions)?;
    save_traces(output, &collection.traces)?;
    say!(
        "collected {} traces, skipped {}, wrote {}",
        collection.traces.len(),
        collection.skipped.len(),
        output.display()
    );
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            output,
            overrides,
        } => cmd_generate(config.as_deref(), &output, &overrides),
        Command::Train {
            config,
            overrides,
            output_dir,
            resume,
        } => cmd_train(config.as_deref(), &overrides, output_dir.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoints,
            traces,
            output,
            accounting,
        } => cmd_eval(&checkpoints, &traces, &output, accounting.map(Into::into)),
        Command::Collect { config, output } => cmd_collect(&config, &output),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
