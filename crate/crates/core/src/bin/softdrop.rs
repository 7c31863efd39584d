use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use softdrop::config::ExperimentConfig;
use softdrop::experiment::{self, EpochRecord};
use softdrop::{gradcheck, selftest, Result};

#[derive(Parser)]
#[command(
    name = "softdrop",
    version,
    about = "Train and evaluate stochastic-masking and Bayes-by-Backprop networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and per-epoch history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Use the published epoch count, learning rate and data split.
        #[arg(long)]
        full_scale: bool,
    },
    /// Monte-Carlo evaluation of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        full_scale: bool,
    },
    /// Train and evaluate several configs and tabulate them per method.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Directory for comparison.csv and comparison.json.
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
        #[arg(long)]
        full_scale: bool,
    },
    /// Finite-difference gradient checks of every layer type.
    Gradcheck,
    /// Fast built-in correctness checks.
    Selftest,
}

fn load(path: &Path, full_scale: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if full_scale {
        cfg.apply_full_scale();
    }
    Ok(cfg)
}

fn log_epoch(label: &str, start: Instant, r: &EpochRecord) {
    eprintln!(
        "[{label}] epoch {:>3}  loss {:.5}  val_acc {:.4}  val_mi {:.5} bits  ({:.0}s)",
        r.epoch + 1,
        r.mean_loss,
        r.val_accuracy,
        r.val_mean_mi_bits,
        start.elapsed().as_secs_f64()
    );
}

fn label(cfg: &ExperimentConfig) -> String {
    match cfg.p {
        Some(p) => format!("{} p={p} seed={}", cfg.method, cfg.seed),
        None => format!("{} seed={}", cfg.method, cfg.seed),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, full_scale } => {
            let cfg = load(&config, full_scale)?;
            let start = Instant::now();
            let name = label(&cfg);
            experiment::train(&cfg, &mut |r| log_epoch(&name, start, r))?;
            println!("{}", cfg.output_dir.join(experiment::CHECKPOINT_FILE).display());
            Ok(true)
        }
        Command::Eval {
            config,
            checkpoint,
            full_scale,
        } => {
            let cfg = load(&config, full_scale)?;
            let report = experiment::evaluate(&cfg, &checkpoint)?;
            println!("{}", experiment::METRICS_HEADER);
            println!("{}", report.csv_row());
            Ok(true)
        }
        Command::Compare {
            configs,
            out,
            full_scale,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, full_scale))
                .collect::<Result<Vec<_>>>()?;
            let start = Instant::now();
            let report = experiment::compare_methods(&cfgs, &out, &mut |c, r| log_epoch(&label(c), start, r))?;
            print!("{}", report.to_csv());
            Ok(true)
        }
        Command::Gradcheck => {
            let cases = gradcheck::gradient_suite()?;
            let mut ok = true;
            for c in &cases {
                ok &= c.passed();
                println!(
                    "{:<6} {:<28} max_rel_err {:.3e}  checked {:>4}  skipped {:>3}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.checked,
                    c.skipped
                );
            }
            Ok(ok)
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{:<6} {:<28} {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
