use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stg_lab::config::ExperimentConfig;
use stg_lab::error::Error;
use stg_lab::guidance::GuidanceMethod;
use stg_lab::mlp::{train_dsm, MlpScoreNet, TrainOpts};
use stg_lab::runner::{self, CheckSuite};
use stg_lab::schedule::NoiseSchedule;
use stg_lab::score::ToyWorld;

const EXIT_CHECK_FAILURE: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;

/// Guided-diffusion laboratory for a 2D Gaussian toy world.
#[derive(Parser)]
#[command(name = "stg-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StgOverrides {
    /// Override the STG update scale for every STG method in the run.
    #[arg(long)]
    rho: Option<f64>,
    /// Override the STG update threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Override the STG update-step ratio.
    #[arg(long)]
    gamma: Option<f64>,
}

impl StgOverrides {
    fn apply(&self, methods: &mut [GuidanceMethod]) {
        for m in methods {
            if let GuidanceMethod::Stg { config, .. } = m {
                if let Some(rho) = self.rho {
                    config.rho = rho;
                }
                if let Some(tau) = self.tau {
                    config.tau = tau;
                }
                if let Some(gamma) = self.gamma {
                    config.gamma = gamma;
                }
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of samples per cell.
        #[arg(long)]
        samples: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        stg: StgOverrides,
    },
    /// Reproduce the five-panel toy comparison (no guidance, SDG and STG
    /// under both safety functions) and print a summary table.
    Fig3 {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        stg: StgOverrides,
    },
    /// Run a verification suite: gradients, theorem1, taylor_bound or
    /// distribution.
    Check { suite: String },
    /// Train the MLP score network by denoising score matching and write
    /// the weight file.
    TrainScore {
        /// Output weight file path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60_000)]
        iterations: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
    },
}

/// Default output root: --out-dir, else $STG_LAB_OUT, else ./out.
fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("STG_LAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_CONFIG_ERROR,
        _ => EXIT_CHECK_FAILURE,
    }
}

fn print_summary(rows: &[runner::SummaryRow]) {
    println!("{:<10} {:<10} {:>10} {:>12}", "method", "safety", "kl_nats", "safety_rate");
    for r in rows {
        println!(
            "{:<10} {:<10} {:>10.4} {:>12.4}",
            r.method, r.safety_fn, r.kl_nats, r.safety_rate
        );
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            samples,
            out_dir,
            stg,
        } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seeds = vec![seed];
            }
            if let Some(samples) = samples {
                config.n_samples = samples;
            }
            if let Some(dir) = out_dir {
                config.out_dir = dir;
            }
            stg.apply(&mut config.methods);
            config.validate()?;
            let manifest = runner::run_experiment(&config)?;
            println!(
                "wrote {} artifacts to {} (config hash {})",
                manifest.entries.len(),
                config.out_dir.display(),
                &manifest.config_hash[..12]
            );
            Ok(0)
        }
        Command::Fig3 {
            seed,
            samples,
            out_dir,
            stg,
        } => {
            let out = resolve_out_dir(out_dir);
            let mut config = runner::fig3_config(&out, seed, samples);
            stg.apply(&mut config.methods);
            config.validate()?;
            let manifest = runner::run_experiment(&config)?;
            let rows: Vec<_> = manifest
                .entries
                .iter()
                .map(|e| runner::SummaryRow {
                    method: e.method.split('_').next().unwrap_or(&e.method).into(),
                    safety_fn: e
                        .method
                        .split_once('_')
                        .map(|(_, s)| s.to_string())
                        .unwrap_or_else(|| "-".into()),
                    kl_nats: e.kl_nats,
                    safety_rate: e.safety_rate,
                })
                .collect();
            print_summary(&rows);
            Ok(0)
        }
        Command::Check { suite } => {
            let suite: CheckSuite = suite.parse()?;
            let report = runner::run_checks(suite)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.passed { 0 } else { EXIT_CHECK_FAILURE })
        }
        Command::TrainScore {
            out,
            iterations,
            seed,
            batch_size,
            learning_rate,
        } => {
            let world = ToyWorld::default_2d();
            let schedule = NoiseSchedule::linear(100, 1e-4, 0.2)?;
            let net = MlpScoreNet::new(world.dim, &[64, 64], 8, schedule.num_steps())?
                .init_seeded(seed);
            let opts = TrainOpts {
                iterations,
                seed,
                batch_size,
                learning_rate,
                ..TrainOpts::default()
            };
            let (net, trace) = train_dsm(net, &world, &schedule, &opts)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            net.save(&out)?;
            let tail = trace.iter().rev().take(200).sum::<f64>() / 200f64.min(trace.len() as f64);
            println!(
                "trained {iterations} iterations, trailing loss {tail:.4}, wrote {}",
                out.display()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
