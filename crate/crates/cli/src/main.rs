use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use utm::config::{preset, PRESETS};
use utm::params::{param_breakdown, param_count};
use utm::run::{self, RunDir};
use utm::sudoku::{gen_micro_dataset, write_csv};
use utm::{Result, RunConfig, UtmError};

#[derive(Parser)]
#[command(name = "utm", version, about = "Universal Transformer with memory tokens and adaptive halting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (see `utm presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Override a key, e.g. `--set train.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => {
                preset(name).ok_or_else(|| UtmError::config("preset", format!("unknown preset `{name}`")))?
            }
            (None, None) => preset("micro-default").expect("default preset exists"),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct CheckpointArgs {
    /// Run directory written by `utm train`.
    #[arg(long)]
    run_dir: PathBuf,
    /// Checkpoint file; defaults to the run's latest.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override a key of the run's saved config. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl CheckpointArgs {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let dir = RunDir::new(&self.run_dir);
        let cfg = RunConfig::load(&dir.config())?.with_overrides(&self.overrides)?;
        let ckpt = self.checkpoint.clone().unwrap_or_else(|| dir.latest_checkpoint());
        Ok((cfg, ckpt))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: $UTM_RUNS_DIR/<name>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Exact match of a checkpoint on the evaluation set.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Per-step accuracy when iterating past the trained depth.
    InferExtended {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Iteration budget.
        #[arg(long)]
        k_run: usize,
        /// Output CSV (default: <run-dir>/extended_<k>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Router statistics, attention dumps and per-step predictions.
    Diagnose {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Number of evaluation puzzles.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        k_run: Option<usize>,
        /// Comma-separated steps whose attention is dumped (default: first, middle, last).
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        /// Output directory (default: <run-dir>/diagnose).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a sweep grid and write summary.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parent directory (default: $UTM_RUNS_DIR).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Count model parameters.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        breakdown: bool,
    },
    /// List presets, or print one as TOML.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
    /// Write generated 4x4 puzzles as CSV.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        givens_min: usize,
        #[arg(long, default_value_t = 12)]
        givens_max: usize,
    },
}

fn print_summary(s: &run::RunSummary) {
    println!(
        "{}: eval_em {:.4}  mean_halt {:.2}  halt_range [{:.2}, {:.2}]",
        s.name, s.eval_em, s.mean_halt, s.halt_min, s.halt_max
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, run_dir, resume, quiet } => {
            let cfg = cfg.resolve()?;
            if !cfg.sweep.is_empty() {
                return Err(UtmError::config("sweep", "config defines a sweep; use `utm sweep`"));
            }
            let dir = run_dir.map_or_else(|| RunDir::for_config(&run::runs_root(), &cfg), RunDir::new);
            let summary = run::run_train(&cfg, &dir, resume, !quiet)?;
            print_summary(&summary);
            println!("run directory: {}", dir.path.display());
        }
        Command::Eval { ckpt } => {
            let (cfg, path) = ckpt.resolve()?;
            print_summary(&run::run_eval(&cfg, &path)?);
        }
        Command::InferExtended { ckpt, k_run, out } => {
            let (cfg, path) = ckpt.resolve()?;
            let steps = run::infer_extended(&cfg, &path, k_run)?;
            let out = out.unwrap_or_else(|| ckpt.run_dir.join(format!("extended_{k_run}.csv")));
            run::write_step_csv(&out, &steps)?;
            for s in &steps {
                println!("step {:>3}  em_blend {:.4}  em_raw {:.4}", s.step, s.em_blend, s.em_raw);
            }
            println!("wrote {}", out.display());
        }
        Command::Diagnose { ckpt, count, k_run, steps, out } => {
            let (cfg, path) = ckpt.resolve()?;
            let k = k_run.unwrap_or(cfg.model.max_ponder);
            let steps = if steps.is_empty() { utm::diagnostics::default_capture_steps(k) } else { steps };
            let out = out.unwrap_or_else(|| ckpt.run_dir.join("diagnose"));
            let files = run::run_diagnose(&cfg, &path, count, k_run, &steps, &out)?;
            for p in [&files.steps, &files.predictions, &files.attention] {
                println!("wrote {}", p.display());
            }
        }
        Command::Sweep { cfg, root, quiet } => {
            let cfg = cfg.resolve()?;
            let root = root.unwrap_or_else(run::runs_root);
            let (cells, summary) = run::run_sweep(&cfg, &root, !quiet)?;
            for c in &cells {
                match &c.outcome {
                    Ok(s) => print_summary(s),
                    Err(e) => println!("{}: FAILED ({e})", c.cfg.name),
                }
            }
            println!("wrote {}", summary.display());
        }
        Command::ParamCount { cfg, breakdown } => {
            let cfg = cfg.resolve()?;
            if breakdown {
                for (name, shape, n) in param_breakdown(&cfg.model) {
                    println!("{name:<24} {:<14} {n}", format!("{shape:?}"));
                }
            }
            println!("{}", param_count(&cfg.model));
        }
        Command::Presets { show } => match show {
            Some(name) => {
                let cfg = preset(&name).ok_or_else(|| UtmError::config("preset", format!("unknown preset `{name}`")))?;
                print!("{}", cfg.to_toml_string());
            }
            None => PRESETS.iter().for_each(|p| println!("{p}")),
        },
        Command::GenData { out, count, seed, givens_min, givens_max } => {
            if givens_min > givens_max || givens_max > 16 {
                return Err(UtmError::config("givens_min", "need givens_min <= givens_max <= 16"));
            }
            let puzzles = gen_micro_dataset(count, seed, (givens_min, givens_max));
            write_csv(std::fs::File::create(Path::new(&out))?, &puzzles)?;
            println!("wrote {} puzzles to {}", puzzles.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(code as u8)
        }
    }
}
