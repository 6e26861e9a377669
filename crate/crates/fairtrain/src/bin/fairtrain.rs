use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairtrain::dataset::{dataset_stats, prepare};
use fairtrain::fairness::FairnessKind;
use fairtrain::harness::{
    acceptance_checks, bank_stats_check, collect_manifests, full_dataset_stats, manifest_to_json,
    render_table, resolve_dataset, run_once, run_suite, summarize, write_manifest,
    write_results_csv, CheckOutcome, CheckResult, ExperimentPlan, RunSpec,
};
use fairtrain::trainers::{Algorithm, TrainConfig};

#[derive(Parser)]
#[command(name = "fairtrain", version, about = "Train and audit fair linear classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataDir {
    /// Directory holding the raw dataset files
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics (whole file and per split) as JSON
    Stats {
        /// Dataset name: adult or bank
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Verify the published reference rates; nonzero exit on failure
        #[arg(long)]
        check: bool,
        #[command(flatten)]
        data: DataDir,
    },
    /// Train one model and print its run manifest as JSON
    Train {
        /// unconstrained, reweigh, prejudice, arl, or bilevel
        #[arg(value_parser = parse_algorithm)]
        algorithm: Algorithm,
        #[arg(long, default_value = "adult")]
        dataset: String,
        /// Fraction of train rows keeping their sensitive attribute
        #[arg(long, default_value_t = 1.0)]
        dem_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fairness loss: aod, eod, or spd
        #[arg(long, default_value = "aod", value_parser = parse_loss)]
        loss: FairnessKind,
        /// Weight of the utility term in the bilevel outer loss
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Tracked inner steps per outer iteration
        #[arg(long, default_value_t = 2)]
        tin: usize,
        /// Label flip probability outside the demographic subset
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Impute soft group probabilities instead of hard fills
        #[arg(long)]
        soft_impute: bool,
        /// Evaluate at threshold 0.5 instead of tuning it on validation
        #[arg(long)]
        fixed_threshold: bool,
        /// Also write the manifest to this file
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataDir,
    },
    /// Run a sweep described by a plan file (JSON), resuming finished runs
    Suite {
        plan: PathBuf,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[command(flatten)]
        data: DataDir,
    },
    /// Rebuild results.csv/results.txt from a directory of run manifests
    Report {
        /// Suite output directory (or its manifests/ subdirectory)
        dir: PathBuf,
        /// Also evaluate the published-number checks; nonzero exit on failure
        #[arg(long)]
        check: bool,
    },
    /// Print a plan file template to stdout
    Plan {
        #[arg(long, default_value = "adult")]
        dataset: String,
        /// The label-noise stress protocol instead of the clean sweep
        #[arg(long)]
        noisy: bool,
    },
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: fairtrain::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<FairnessKind, String> {
    s.parse().map_err(|e: fairtrain::Error| e.to_string())
}

fn print_checks(checks: &[CheckResult]) -> bool {
    let mut failed = false;
    for c in checks {
        let tag = match c.outcome {
            CheckOutcome::Pass => "PASS",
            CheckOutcome::Fail => {
                failed = true;
                "FAIL"
            }
            CheckOutcome::Skip => "SKIP",
        };
        println!("{tag} {}: {}", c.name, c.detail);
    }
    failed
}

fn run(cli: Cli) -> fairtrain::Result<bool> {
    match cli.command {
        Command::Stats { dataset, seed, check, data } => {
            let (schema, path) = resolve_dataset(&dataset, &data.data_dir)?;
            let splits = prepare(&path, &schema, seed, 1.0, 0.0)?;
            let overall = full_dataset_stats(&splits)?;
            let json = serde_json::json!({
                "dataset": dataset,
                "overall": overall,
                "train": dataset_stats(&splits.train)?,
                "validation": dataset_stats(&splits.validation)?,
                "test": dataset_stats(&splits.test)?,
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
            if check && dataset == "bank" {
                return Ok(print_checks(&[bank_stats_check(&overall)]));
            }
            Ok(false)
        }
        Command::Train {
            algorithm,
            dataset,
            dem_fraction,
            seed,
            loss,
            lambda,
            tin,
            noise,
            max_epochs,
            batch_size,
            soft_impute,
            fixed_threshold,
            out,
            data,
        } => {
            let mut train = TrainConfig {
                seed,
                lambda,
                fairness: loss,
                inner_steps: tin,
                soft_impute,
                tuned_threshold: !fixed_threshold,
                ..TrainConfig::default()
            };
            if let Some(e) = max_epochs {
                train.max_epochs = e;
            }
            if let Some(b) = batch_size {
                train.batch_size = b;
            }
            let spec = RunSpec { dataset, algorithm, dem_fraction, label_noise: noise, train };
            let manifest = run_once(&spec, &data.data_dir)?;
            print!("{}", manifest_to_json(&manifest));
            if let Some(path) = out {
                write_manifest(&path, &manifest)?;
            }
            Ok(false)
        }
        Command::Suite { plan, out_dir, data } => {
            let text = std::fs::read_to_string(&plan)?;
            let plan: ExperimentPlan = serde_json::from_str(&text)?;
            let outcome = run_suite(&plan, &data.data_dir, &out_dir)?;
            print!("{}", render_table(&outcome.cells));
            println!(
                "{} runs, {} failed; wrote {} and {}",
                outcome.manifests.len() + outcome.failures.len(),
                outcome.failures.len(),
                outcome.csv_path.display(),
                outcome.table_path.display()
            );
            for f in &outcome.failures {
                eprintln!("failed {}: {}", f.file_name, f.error);
            }
            Ok(!outcome.failures.is_empty())
        }
        Command::Report { dir, check } => {
            let manifest_dir = if dir.join("manifests").is_dir() { dir.join("manifests") } else { dir.clone() };
            let manifests = collect_manifests(&manifest_dir)?;
            if manifests.is_empty() {
                return Err(fairtrain::Error::Harness(format!(
                    "no manifests under {}",
                    manifest_dir.display()
                )));
            }
            let cells = summarize(&manifests);
            print!("{}", render_table(&cells));
            let csv_path = dir.join("results.csv");
            write_results_csv(&csv_path, &manifests, &cells)?;
            std::fs::write(dir.join("results.txt"), render_table(&cells))?;
            if check {
                return Ok(print_checks(&acceptance_checks(&manifests)));
            }
            Ok(false)
        }
        Command::Plan { dataset, noisy } => {
            let plan = if noisy {
                ExperimentPlan::noisy(&dataset)
            } else {
                ExperimentPlan { dataset, ..ExperimentPlan::default() }
            };
            println!("{}", serde_json::to_string_pretty(&plan)?);
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
