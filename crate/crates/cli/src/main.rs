use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dualrec::corpus::synthetic::SynthSpec;
use dualrec::corpus::RawFormat;
use dualrec_cli::commands;
use dualrec_cli::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "dualrec", version, about = "Dual-process recommendation agent harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Derive every seed in the configuration from this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Reject malformed model output, duplicate interactions and rebound mock scripts.
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Repair what can be repaired instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureFormat {
    Movielens,
    Amazon,
}

#[derive(Subcommand)]
enum Command {
    /// Build the canonical corpus and dataset statistics.
    Ingest(Common),
    /// Run agent cycles over training users.
    Simulate(Common),
    /// Leave-one-out evaluation with activity groups and best-of-n.
    Eval(Common),
    /// Generate, screen and export the SFT corpus.
    SftGen(Common),
    /// Toy SFT anchor plus GRPO, curves and a finite-difference report.
    ToyTrain(Common),
    /// Merge stored EvalRecords into comparison tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Records files or directories, added to `report.inputs`.
        inputs: Vec<PathBuf>,
    },
    /// Write a seeded synthetic dataset in a raw layout.
    MakeFixture {
        #[arg(long, value_enum, default_value = "movielens")]
        format: FixtureFormat,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 400)]
        items: usize,
        #[arg(long, default_value_t = 12)]
        min_per_user: usize,
        #[arg(long, default_value_t = 60)]
        max_per_user: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let strict = match (common.strict, common.lenient) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    };
    cfg.apply(&Overrides { out_dir: common.out.clone(), seed: common.seed, strict });
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeFixture { format, dir, users, items, min_per_user, max_per_user, seed } => {
            let format = match format {
                FixtureFormat::Movielens => RawFormat::Movielens,
                FixtureFormat::Amazon => RawFormat::Amazon,
            };
            let spec = SynthSpec { n_users: users, n_items: items, min_per_user, max_per_user, seed };
            commands::make_fixture(format, &dir, &spec)?;
            println!("wrote fixture to {}", dir.display());
        }
        Command::Ingest(c) => {
            let cfg = load(&c)?;
            let s = commands::ingest(&cfg)?;
            println!(
                "full: {} users, {} items, {} interactions, sparsity {:.2}%",
                s.full.n_users,
                s.full.n_items,
                s.full.n_interactions,
                s.full.sparsity_percent()
            );
            println!(
                "train: {} users, {} interactions ({} at the length cap, shortfall {})",
                s.train.n_users, s.train.n_interactions, s.train_cap.users_at_cap, s.train_cap.shortfall
            );
            println!("corpus written to {}", cfg.corpus_dir().display());
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let s = commands::simulate(&cfg)?;
            println!("{} users, {} cycles, {} failures", s.users, s.cycles, s.failures);
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let records = commands::eval(&cfg)?;
            let table = cfg.out_dir.join(commands::EVAL_DIR).join("metrics_table.txt");
            println!("{} records", records.len());
            print!("{}", std::fs::read_to_string(table)?);
        }
        Command::SftGen(c) => {
            let cfg = load(&c)?;
            let m = commands::sft_gen(&cfg)?;
            println!("{} samples, {} exported, corpus sha256 {}", m.samples, m.exported, m.corpus_sha256);
        }
        Command::ToyTrain(c) => {
            let cfg = load(&c)?;
            let s = commands::toy_train(&cfg)?;
            println!(
                "median steps to {}: anchored {}, cold {} (budget {})",
                s.threshold, s.anchored_median_steps, s.cold_median_steps, s.budget
            );
            println!("finite-difference max relative error: {:e}", s.finite_difference.max_relative_error);
        }
        Command::Report { common, inputs } => {
            let cfg = load(&common)?;
            let n = commands::report(&cfg, &inputs)?;
            println!("{n} records reshaped into {}", cfg.out_dir.join(commands::REPORT_DIR).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<ConfigError>() {
                Some(ConfigError::Invalid(_)) => eprint!("{e}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::from(2)
        }
    }
}
