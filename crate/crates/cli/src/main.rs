use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freqpriv::config::{ExperimentConfig, Variant};
use freqpriv::eval::fmt_metric;
use freqpriv::gradsuite::{self, SuiteOptions};
use freqpriv::pipeline::{self, EvalSource};
use freqpriv::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "freqpriv", version, about = "Frequency-enhanced small-object detection experiments")]
struct Cli {
    /// Flat key = value experiment file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the ablation variant (I, II, III or IV).
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and the full objective.
    Gradcheck {
        /// Corrupts the named op's VJP to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Generates train and test datasets under --out.
    Synth,
    /// Dataset statistics for a dataset directory or annotation file.
    Stats { data: PathBuf },
    /// Trains one variant and writes its checkpoint and loss trace.
    Train,
    /// Scores a checkpoint or a predictions file.
    Eval {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON-lines predictions file.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Test dataset; overrides test_data from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains and evaluates variants I to IV for every seed.
    Ablate {
        /// Comma-separated seeds; overrides the config list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = cli.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Error> {
    let mut cfg = resolve(&cli)?;
    let out = &cli.out;
    match cli.command {
        Command::Gradcheck { corrupt } => {
            let opts = SuiteOptions {
                seed: cfg.seed,
                corrupt,
                ..SuiteOptions::default()
            };
            let rows = gradsuite::run(&opts)?;
            println!("{:<40} {:>12} {:>10}  result", "check", "max_rel_err", "components");
            for r in &rows {
                let verdict = if r.passed { "pass" } else { "FAIL" };
                println!("{:<40} {:>12.3e} {:>10}  {verdict}", r.name, r.max_rel_error, r.components);
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                println!("all {} checks within {:e}", rows.len(), opts.tolerance);
                Ok(0)
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(EXIT_NUMERICAL)
            }
        }
        Command::Synth => {
            let (train, test) = pipeline::cmd_synth(&cfg, out)?;
            println!(
                "train: {} images, {} objects ({} skipped)\ntest: {} images, {} objects ({} skipped)",
                train.n_images, train.n_objects, train.skipped_objects, test.n_images, test.n_objects, test.skipped_objects
            );
            Ok(0)
        }
        Command::Stats { data } => {
            let report = pipeline::cmd_stats(&data, out)?;
            let s = &report.summary;
            println!("images {}  instances {}", s.n_images, s.n_instances);
            println!("cv {}  top20 {}", s.cv, s.top20);
            for (id, n) in &s.per_class_counts {
                println!("class {id}: {n}");
            }
            Ok(0)
        }
        Command::Train => {
            let outcome = pipeline::cmd_train(&cfg, out)?;
            if let Some(last) = outcome.trace.last() {
                println!(
                    "{} steps, final det {:.6} freq {:.6} total {:.6}",
                    outcome.trace.len(),
                    last.det,
                    last.freq,
                    last.total
                );
            }
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            predictions,
            data,
        } => {
            if data.is_some() {
                cfg.test_data = data;
            }
            let source = match (checkpoint, predictions) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => unreachable!("clap requires one source"),
            };
            let r = pipeline::cmd_eval(&cfg, &source, out)?;
            println!(
                "AP {}  AP50 {}  AP75 {}  AP_S {}  AP_M {}  AP_L {}  F1 {}",
                fmt_metric(r.ap),
                fmt_metric(r.ap50),
                fmt_metric(r.ap75),
                fmt_metric(r.ap_s),
                fmt_metric(r.ap_m),
                fmt_metric(r.ap_l),
                fmt_metric(r.f1)
            );
            Ok(0)
        }
        Command::Ablate { seeds } => {
            if let Some(s) = seeds {
                cfg.seeds = s;
                cfg.validate()?;
            }
            let table = pipeline::cmd_ablate(&cfg, out)?;
            print!("{}", table.to_csv());
            let failed = table.rows.iter().filter(|r| r.metrics.is_none()).count();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see the status column");
                Ok(EXIT_NUMERICAL)
            } else {
                Ok(0)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
