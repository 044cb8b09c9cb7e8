use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierts_cli::commands::{self, IngestOptions};
use hierts_cli::{CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "hierts", version, about = "Hierarchical Thompson sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment of a config (or manifest) file
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run every grid point of the config's [sweep] table
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Print the Bayes regret bound of the config's problem
    Bound {
        config: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        /// Failure probability; defaults to 1/horizon
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Factorize a `user::item::rating::timestamp` file into embeddings
    Ingest {
        ratings: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long, default_value_t = 0.1)]
        reg: f64,
        #[arg(long, default_value_t = 20)]
        sweeps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest tolerated share of malformed lines
        #[arg(long, default_value_t = hierts_core::data::DEFAULT_MAX_MALFORMED)]
        max_malformed: f64,
        /// Actions per run in the written config
        #[arg(long)]
        actions: Option<usize>,
        /// Prefix of the written embeddings and config
        #[arg(long, default_value = "movielens")]
        out: String,
    },
    /// Check the posterior computations against direct ones
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fewer instances and draws
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Also write an SVG chart per experiment
    #[arg(long)]
    svg: bool,
    /// Output path prefix
    #[arg(long)]
    out: Option<String>,
    /// LinUCB confidence width
    #[arg(long)]
    alpha: Option<f64>,
    /// Relative diagonal jitter for covariance factorizations
    #[arg(long)]
    jitter: Option<f64>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            runs: self.runs,
            horizon: self.horizon,
            parallelism: self.parallelism,
            svg: self.svg,
            out: self.out.clone(),
            alpha: self.alpha,
            jitter: self.jitter,
        }
    }
}

fn experiment(config: &PathBuf, flags: &Flags, grid: bool) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(&flags.overrides())?;
    let outcomes = commands::run_experiments(&cfg, grid)?;
    let mut first_error = None;
    for o in outcomes {
        match o.curves {
            Ok(curves) => {
                println!("{} -> {}", o.label, o.csv.display());
                for c in &curves {
                    let n = c.horizon();
                    println!("  {:<12} {:>12.3} +- {:.3}", c.agent, c.final_mean(), c.stderr[n - 1]);
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", o.label);
                first_error.get_or_insert(e);
            }
        }
    }
    println!("manifest -> {}", commands::manifest_path(&cfg).display());
    first_error.map_or(Ok(()), Err)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, flags } => experiment(&config, &flags, false),
        Command::Sweep { config, flags } => experiment(&config, &flags, true),
        Command::Bound { config, horizon, delta } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides {
                horizon,
                ..Overrides::default()
            })?;
            let (inputs, report) = commands::bound(&cfg, delta)?;
            print!("{}", commands::format_bound(&inputs, &report));
            Ok(())
        }
        Command::Ingest {
            ratings,
            rank,
            clusters,
            reg,
            sweeps,
            seed,
            max_malformed,
            actions,
            out,
        } => {
            let s = commands::ingest(
                &ratings,
                &IngestOptions {
                    rank,
                    clusters,
                    reg,
                    sweeps,
                    seed,
                    max_malformed,
                    actions,
                    out,
                },
            )?;
            if !s.malformed.is_empty() {
                eprintln!("skipped {} malformed lines (first: line {})", s.malformed.len(), s.malformed[0]);
            }
            println!("{} ratings, {} users, {} items", s.ratings, s.users, s.items);
            println!("training rmse {:.6}", s.rmse);
            println!("cluster sizes {:?}", s.cluster_sizes);
            println!("embeddings -> {}", s.embeddings.display());
            println!("config -> {}", s.config.display());
            Ok(())
        }
        Command::Selftest { seed, quick } => {
            let outcomes = commands::selftest(seed, quick)?;
            for o in &outcomes {
                println!("{o}");
            }
            match outcomes.iter().find(|o| !o.passed) {
                Some(o) => Err(CliError::Numerical(format!("self-check `{}` failed", o.name))),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
