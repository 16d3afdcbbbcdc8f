use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use opstress::attacks::AttackMethod;
use opstress::operators::Arch;
use opstress::Error;
use opstress_cli::config::RunConfig;
use opstress_cli::pipeline;

/// Worker-count override; the `--workers` flag wins over it.
const WORKERS_ENV: &str = "OPSTRESS_WORKERS";

#[derive(Parser)]
#[command(
    name = "opstress",
    version,
    about = "Sparse adversarial stress tests for neural operators"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint files.
    #[arg(long, value_delimiter = ',', required = true)]
    model: Vec<PathBuf>,
    /// Sparsity budgets.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Success thresholds.
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    /// Number of test samples attacked.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct RecordsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    model: Vec<PathBuf>,
    /// Directory of attack records.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenerateData {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train operator models.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        arch: Option<Vec<Arch>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Differential-evolution attack campaign.
    Attack {
        #[command(flatten)]
        args: AttackArgs,
        #[arg(long)]
        max_gen: Option<usize>,
    },
    /// Random sparse perturbations of equal magnitude.
    BaselineRandom {
        #[command(flatten)]
        args: AttackArgs,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Projected sign-gradient attack under the same sparsity budget.
    BaselinePgd {
        #[command(flatten)]
        args: AttackArgs,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Stealth annotation, success summaries and sensitivity profiles.
    Analyze {
        #[command(flatten)]
        args: RecordsArgs,
    },
    /// Cross-model transfer of successful attacks.
    Transfer {
        #[command(flatten)]
        args: RecordsArgs,
    },
    /// Check the theoretical bounds; exits 3 if any check fails.
    VerifyTheory {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        model: Vec<PathBuf>,
    },
    /// Render a summary as CSV tables.
    Report {
        #[arg(long)]
        summary: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Check,
    Other(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            e => Failure::Other(e),
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n = v
            .parse()
            .map_err(|_| Failure::Config(Error::Config(format!("{WORKERS_ENV}={v:?} is not a count"))))?;
        cfg.workers = Some(n);
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    Ok(cfg)
}

fn apply_attack_args(cfg: &mut RunConfig, a: &AttackArgs) {
    if let Some(k) = &a.k {
        cfg.campaign.ks = k.clone();
    }
    if let Some(t) = &a.tau {
        cfg.campaign.thresholds = t.clone();
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
}

fn apply_records_args(cfg: &mut RunConfig, a: &RecordsArgs) {
    if let Some(t) = &a.tau {
        cfg.campaign.thresholds = t.clone();
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
}

fn attack(cfg: RunConfig, method: AttackMethod, a: &AttackArgs, out: &Path) -> Result<(), Failure> {
    let cfg = cfg.resolve()?;
    pipeline::run_attack(&cfg, method, &a.data, &a.model, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = base_config(&cli)?;
    if let Some(n) = cfg.workers {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenerateData { n_train, n_test } => {
            if let Some(n) = n_train {
                cfg.dataset.n_train = *n;
            }
            if let Some(n) = n_test {
                cfg.dataset.n_test = *n;
            }
            pipeline::generate_data(&cfg.resolve()?, out)?;
        }
        Command::Train { data, arch, epochs } => {
            if let Some(a) = arch {
                cfg.archs = a.clone();
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            pipeline::train_models(&cfg.resolve()?, data, out)?;
        }
        Command::Attack { args, max_gen } => {
            apply_attack_args(&mut cfg, args);
            if let Some(g) = max_gen {
                cfg.campaign.de.max_gen = *g;
            }
            attack(cfg, AttackMethod::De, args, out)?;
        }
        Command::BaselineRandom { args, trials } => {
            apply_attack_args(&mut cfg, args);
            if let Some(t) = trials {
                cfg.random_trials = *t;
            }
            attack(cfg, AttackMethod::Random, args, out)?;
        }
        Command::BaselinePgd { args, iters } => {
            apply_attack_args(&mut cfg, args);
            if let Some(s) = iters {
                cfg.pgd.iters = *s;
            }
            attack(cfg, AttackMethod::Pgd, args, out)?;
        }
        Command::Analyze { args } => {
            apply_records_args(&mut cfg, args);
            pipeline::analyze(&cfg.resolve()?, &args.data, &args.model, &args.records, out)?;
        }
        Command::Transfer { args } => {
            apply_records_args(&mut cfg, args);
            pipeline::transfer(&cfg.resolve()?, &args.data, &args.model, &args.records, out)?;
        }
        Command::VerifyTheory { data, model } => {
            let report = pipeline::verify_theory(&cfg.resolve()?, data.as_deref(), model, out)?;
            if !report.passed() {
                for c in report.checks.iter().filter(|c| !c.pass) {
                    error!("check {} failed: worst slack {:e}", c.name, c.worst_slack);
                }
                return Err(Failure::Check);
            }
        }
        Command::Report { summary } => {
            for p in pipeline::report(summary, out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap prints usage and exits 2 on unknown flags.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
        Err(Failure::Other(e)) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
