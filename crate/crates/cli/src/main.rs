use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metavt::config::TrainConfig;
use metavt::metrics::{latent_export, read_metrics, summarize};
use metavt::trainer::{load_checkpoint, run_ablation_suite, train, RunDir, RunState, Variant};

#[derive(Parser)]
#[command(name = "metavt", version, about = "Meta-RL with virtual training tasks on point-robot families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of epochs in the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// `key=value` override, repeatable. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write metrics and checkpoints to a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Meta-test the parameters of a run (or fresh parameters from a config).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write per-task latents of the training tasks as JSON lines.
        #[arg(long, value_name = "PATH")]
        export_latents: Option<PathBuf>,
    },
    /// Train every ablation variant for each seed and print one JSON row per run.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Write per-task latents of a run as JSON lines.
    ExportLatents {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a metrics file.
    MetricsSummary {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Error whose exit code is 2 (missing input files, usage).
#[derive(Debug)]
struct Missing(String);

impl std::fmt::Display for Missing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Missing {}

/// Print one line; a closed pipe surfaces as an `io::Error` instead of a panic.
fn emit(line: impl std::fmt::Display) -> anyhow::Result<()> {
    writeln!(std::io::stdout().lock(), "{line}")?;
    Ok(())
}

fn load_config(a: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Missing(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = a.set.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    Ok(TrainConfig::from_toml_with_overrides(&text, &overrides)?)
}

fn require_config(a: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    if a.config.is_none() {
        return Err(Missing("--config is required".into()).into());
    }
    load_config(a)
}

/// Run state from a run directory's checkpoint, or fresh from the config.
fn open_state(cfg: &ConfigArgs, run_dir: Option<&Path>) -> anyhow::Result<RunState> {
    match run_dir {
        Some(d) => {
            let rd = RunDir::new(d);
            if !rd.checkpoint().join("params.json").exists() {
                return Err(Missing(format!("no checkpoint in {}", d.display())).into());
            }
            let mut state = load_checkpoint(&rd.checkpoint(), None)?;
            if let Some(s) = cfg.seed {
                state.config.seed = s;
            }
            Ok(state)
        }
        None => Ok(RunState::new(require_config(cfg)?)?),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { cfg, run_dir, resume } => {
            let config = require_config(&cfg)?;
            let rd = RunDir::new(&run_dir);
            let mut state = if resume && rd.checkpoint().join("params.json").exists() {
                load_checkpoint(&rd.checkpoint(), Some(&config))?
            } else {
                if rd.metrics().exists() {
                    bail!("{} already holds a run; pass --resume or use a new directory", run_dir.display());
                }
                RunState::new(config)?
            };
            let records = train(&mut state, Some(&rd))?;
            for r in &records {
                let ood = r.get("ood_return").map_or("-".to_string(), |v| format!("{v:.3}"));
                eprintln!("epoch {:>4}  train_return {:>9.3}  ood_return {ood}", r.epoch, r.get("train_return").unwrap_or(f64::NAN));
            }
        }
        Command::Eval { cfg, run_dir, split, export_latents } => {
            let mut state = open_state(&cfg, run_dir.as_deref())?;
            let tasks = match split {
                SplitArg::Train => state.train_tasks.clone(),
                SplitArg::Test => state.test_tasks.clone(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
            let report = state.meta_test(&tasks, &mut rng)?;
            let bias = state.q_bias(&report, &mut rng)?;
            let per_task: Vec<_> = report
                .results
                .iter()
                .map(|r| serde_json::json!({ "params": r.task.params, "return": r.ret, "z_on": r.z_on.z }))
                .collect();
            emit(serde_json::json!({ "mean_return": report.mean_return, "q_bias": bias, "tasks": per_task }))?;
            if let Some(p) = export_latents {
                latent_export(&state.export_latents()?, &p)?;
            }
        }
        Command::Ablate { cfg, seeds } => {
            let config = require_config(&cfg)?;
            for row in run_ablation_suite(&config, &seeds, &Variant::ALL)? {
                emit(serde_json::to_string(&row)?)?;
            }
        }
        Command::ExportLatents { cfg, run_dir, out } => {
            let state = open_state(&cfg, run_dir.as_deref())?;
            latent_export(&state.export_latents()?, &out)?;
        }
        Command::MetricsSummary { run_dir } => {
            let path = RunDir::new(&run_dir).metrics();
            if !path.exists() {
                return Err(Missing(format!("no metrics file at {}", path.display())).into());
            }
            let records = read_metrics(&path).with_context(|| format!("reading {}", path.display()))?;
            for s in summarize(&records) {
                emit(serde_json::to_string(&s)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Missing>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
