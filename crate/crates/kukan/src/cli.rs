//! Command-line interface. Exit codes: 0 success, 1 usage or IO error,
//! 2 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use kukan_core::gradcheck::suite::{run_suite, SuiteConfig};

use crate::config::{RunConfig, Scale};
use crate::dataset::{self, Dataset, Split};
use crate::diag::{self, grad_check_csv};
use crate::error::{self, HarnessError, Result};
use crate::eval::{evaluate_checkpoint, Aggregate};
use crate::train;

#[derive(Parser, Debug)]
#[command(name = "kukan", version, about = "Panoramic X-ray to volume reconstruction: data, training, evaluation")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub scale: Option<ScaleArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScaleArg {
    Toy,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Toy => Scale::Toy,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate phantoms, radiographs and a manifest (default out: data).
    GenData,
    /// Train on a dataset (default out: run).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on one split (default out: <checkpoint dir>/eval).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Spectrum, gradient checks and op counts (default out: <checkpoint dir>/diag).
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference checks of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Only operations whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let scale = cli.scale.map(Scale::from);
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, scale)?,
        None => RunConfig::for_scale(scale.unwrap_or(Scale::Toy)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
    cli.out.clone().unwrap_or_else(fallback)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn print_aggregate(agg: &Aggregate) {
    println!(
        "psnr_db {:.4} ± {:.4}  ssim {:.4} ± {:.4}  perc_dist {:.4} ± {:.4}",
        agg.mean[0], agg.std[0], agg.mean[1], agg.std[1], agg.mean[2], agg.std[2]
    );
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = run_config(cli)?;
            let out = out_dir(cli, || PathBuf::from("data"));
            let data = dataset::generate(&cfg, &out)?;
            println!("wrote {} samples to {}", data.entries.len(), out.display());
        }
        Command::Train { data, epochs, quiet } => {
            let mut cfg = run_config(cli)?;
            if let Some(n) = epochs {
                cfg.epochs = *n;
            }
            let out = out_dir(cli, || cfg.out.clone());
            let data = Dataset::open(data)?;
            let quiet = *quiet;
            let summary = train::train(&cfg, &data, &out, &mut |r| {
                if !quiet {
                    println!(
                        "epoch {:>3}  train {:.6e}  val {:.6e}  best {:.6e}  lr {:.1e}",
                        r.epoch, r.train_loss, r.val_loss, r.best_val_loss, r.lr
                    );
                }
            })?;
            println!(
                "train loss {:.6e} -> {:.6e}; best val {:.6e} at epoch {}",
                summary.initial_train_loss, summary.final_train_loss, summary.best_val_loss, summary.best_epoch
            );
        }
        Command::Eval { checkpoint, data, split } => {
            let out = out_dir(cli, || sibling(checkpoint, "eval"));
            let data = Dataset::open(data)?;
            let (_, agg) = evaluate_checkpoint(checkpoint, &data, (*split).into(), Some(&out))?;
            print_aggregate(&agg);
        }
        Command::Diag { checkpoint, trials } => {
            let out = out_dir(cli, || sibling(checkpoint, "diag"));
            let suite = SuiteConfig { trials: *trials, seed: cli.seed.unwrap_or(0), ..SuiteConfig::default() };
            let report = diag::run(checkpoint, &out, &suite)?;
            print!("{}", report.summary_text());
        }
        Command::GradCheck { trials, filter } => {
            let suite = SuiteConfig { trials: *trials, seed: cli.seed.unwrap_or(0), ..SuiteConfig::default() };
            let reports = run_suite(&suite, filter.as_deref())?;
            let csv = grad_check_csv(&reports);
            print!("{csv}");
            if let Some(out) = &cli.out {
                error::create_dir(out)?;
                error::write(&out.join("grad_check.csv"), &csv)?;
            }
            if let Some(bad) = reports.iter().find(|r| !r.passed()) {
                return Err(HarnessError::Numerical(format!(
                    "{} max relative error {} exceeds {}",
                    bad.name, bad.max_rel_error, bad.tolerance
                )));
            }
        }
    }
    Ok(())
}
