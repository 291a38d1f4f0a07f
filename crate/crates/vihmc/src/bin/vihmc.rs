//! Config-driven pipeline runner. Exit codes: 0 success, 1 usage or config
//! error, 2 numerical failure, 3 quality-gate failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vihmc::config::ExperimentConfig;
use vihmc::pipeline;

#[derive(Parser)]
#[command(name = "vihmc", version, about = "Hybrid VI-HMC Bayesian inference for small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// Output run directory
    #[arg(short, long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the mean-field variational posterior
    TrainVi(ConfigArg),
    /// Rank parameters by predictive-variance contribution and partition them
    Sensitivity {
        #[command(flatten)]
        common: ConfigArg,
        /// Trained posterior archive
        #[arg(long)]
        posterior: PathBuf,
        /// Override the config's cumulative-variance threshold
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run HMC over the full or reduced parameter space
    Sample {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        posterior: PathBuf,
        /// Partition artifact (required context for reduced mode unless the
        /// config carries a sensitivity block)
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Summarize archives: parameter tables, prediction bands, joint scatter
    Report {
        /// Chain archive directories (repeatable)
        #[arg(long, required = true)]
        archive: Vec<PathBuf>,
        #[arg(long)]
        posterior: PathBuf,
        /// Dataset directory to evaluate against
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long, default_value = "runs/report")]
        out: PathBuf,
        /// Two parameter names for a joint scatter, e.g. layer0.weight[0][0]
        #[arg(long, num_args = 2)]
        joint: Option<Vec<String>>,
    },
    /// Compare full vs reduced mode at fixed and adapted step sizes
    CostCompare {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        posterior: PathBuf,
    },
    /// Generate and persist the config's datasets
    GenData(ConfigArg),
}

fn run() -> Result<(), vihmc::Error> {
    match Cli::parse().command {
        Command::TrainVi(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let out = pipeline::cmd_train_vi(&cfg, &c.out)?;
            println!("posterior: {}", out.posterior_path.display());
            println!("history rows: {}", out.history.len());
        }
        Command::Sensitivity { common, posterior, tau } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let out = pipeline::cmd_sensitivity(&cfg, &posterior, &common.out, tau)?;
            println!(
                "selected {} of {} parameters (tau {})",
                out.partition.sensitive.len(),
                out.report.len(),
                out.partition.tau
            );
            println!("partition: {}", out.partition_path.display());
        }
        Command::Sample { common, posterior, partition } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let out = pipeline::cmd_sample(&cfg, &posterior, partition.as_deref(), &common.out)?;
            println!("archive: {}", out.archive_dir.display());
            println!("acceptance: {:.3}", out.result.acceptance_rate());
            match out.diagnostics {
                Ok(d) => {
                    let worst = d.r_hat.iter().cloned().fold(f64::NAN, f64::max);
                    let min_ess = d.ess.iter().cloned().fold(f64::INFINITY, f64::min);
                    println!(
                        "max r-hat: {worst:.4}, min ess: {min_ess:.0}, divergences: {}, bad chains: {}",
                        d.n_divergences, d.n_bad_chains
                    );
                }
                Err(e) => println!("diagnostics unavailable: {e}"),
            }
        }
        Command::Report { archive, posterior, data, out, joint } => {
            let joint_pair = joint.as_ref().map(|j| (j[0].as_str(), j[1].as_str()));
            let r = pipeline::cmd_report(&archive, &posterior, &data, &out, joint_pair)?;
            println!("params table: {}", r.params_table_path.display());
            println!("summary: {}", r.summary_path.display());
            for b in &r.band_paths {
                println!("band: {}", b.display());
            }
            if let Some(j) = &r.joint_path {
                println!("joint: {}", j.display());
            }
        }
        Command::CostCompare { common, posterior } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let out = pipeline::cmd_cost_compare(&cfg, &posterior, &common.out)?;
            println!("table: {}", out.csv_path.display());
            for row in &out.rows {
                println!(
                    "{} / {}: eps {:.3e}, acceptance {:.3}, mse {:.3e}, s/sample {:.3e}",
                    row.mode, row.phase, row.step_size, row.acceptance_rate, row.posterior_mean_mse,
                    row.seconds_per_sample
                );
            }
        }
        Command::GenData(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let (train, val) = pipeline::cmd_gen_data(&cfg, &c.out)?;
            println!("train: {}", train.display());
            println!("val: {}", val.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
