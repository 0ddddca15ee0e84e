use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use repudiate_cli::commands::{self, Layout};
use repudiate_cli::error::EXIT_FAILURE;
use repudiate_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "repudiate", version, about = "Proof-of-learning forging and membership-inference experiments")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the verification threshold.
    #[arg(long)]
    epsilon: Option<f64>,
}

impl Common {
    fn load(&self) -> CliResult<(ExperimentConfig, Layout)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(eps) = self.epsilon {
            cfg.epsilon = eps;
        }
        cfg.validate()?;
        Ok((cfg, Layout::new(&self.out)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and record an honest proof-of-learning log.
    Train(Common),
    /// Build the forged batch store for every group.
    Forge(Common),
    /// Replay forged trajectories into PoR logs.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Reconstruct only this group (default: the configured probe selection).
        #[arg(long)]
        group: Option<usize>,
    },
    /// Replay a log and report verification errors; exits 1 on failure.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Log directory to check (default: <out>/log).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Check only the k largest updates.
        #[arg(long)]
        subset_k: Option<usize>,
    },
    /// Calibrate the attacks and score original and forged models.
    Attack(Common),
    /// Compute metrics from scores and PoRs.
    Metrics(Common),
    /// Check the off-subspace lower bound on random instances; exits 1 on a violation.
    DemoImpossibility {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the whole pipeline and write report.json.
    Report(Common),
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train(c) => {
            let (cfg, layout) = c.load()?;
            print_json(&commands::cmd_train(&cfg, &layout)?)
        }
        Command::Forge(c) => {
            let (cfg, layout) = c.load()?;
            print_json(&commands::cmd_forge(&cfg, &layout)?)
        }
        Command::Reconstruct { common, group } => {
            let (cfg, layout) = common.load()?;
            let pors = commands::cmd_reconstruct(&cfg, &layout, group)?;
            print_json(&pors)?;
            if pors.iter().any(|p| p.exclusion_violations != 0) {
                return Err(CliError::failure("exclusion scan found target samples in a PoR"));
            }
            Ok(())
        }
        Command::Verify { common, log, subset_k } => {
            let (cfg, layout) = common.load()?;
            let dir = log.unwrap_or_else(|| layout.log());
            let report = commands::cmd_verify(&cfg, &dir, cfg.epsilon, subset_k)?;
            print_json(&report)?;
            if report.pass {
                Ok(())
            } else {
                Err(CliError::failure(format!("verification failed: max error {} > {}", report.max_error, report.threshold)))
            }
        }
        Command::Attack(c) => {
            let (cfg, layout) = c.load()?;
            let rows = commands::cmd_attack(&cfg, &layout)?;
            println!("wrote {rows} score rows to {}", layout.scores().display());
            Ok(())
        }
        Command::Metrics(c) => {
            let (cfg, layout) = c.load()?;
            let report = commands::cmd_metrics(&cfg, &layout)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::DemoImpossibility { n, d, trials, seed } => {
            let rows = commands::demo_impossibility(n, d, trials, seed)?;
            println!("trial\tmin_distance\tbound\tholds");
            for r in &rows {
                println!("{}\t{:.6e}\t{:.6e}\t{}", r.trial, r.min_distance, r.bound, r.holds);
            }
            let violations = rows.iter().filter(|r| !r.holds).count();
            eprintln!("{violations} violations in {trials} trials");
            if violations == 0 {
                Ok(())
            } else {
                Err(CliError { code: EXIT_FAILURE, message: format!("{violations} bound violations") })
            }
        }
        Command::Report(c) => {
            let (cfg, layout) = c.load()?;
            let report = commands::cmd_report(&cfg, &layout)?;
            print_json(&report)?;
            if report.honest_verification.pass && report.por_verification_pass && report.exclusion_violations == 0 {
                Ok(())
            } else {
                Err(CliError::failure("pipeline checks failed; see report.json"))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPUDIATE_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
