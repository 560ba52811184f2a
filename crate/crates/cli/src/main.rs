//! `versionguard` command-line tool.
//!
//! Every subcommand reads an optional JSON config (`--config`); flags
//! override the matching config keys. Exit codes: 0 success, 2 bad config or
//! flags, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{config_error, ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "versionguard",
    version,
    about = "Model versioning and loss-gap filtering after model leaks"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioFlags {
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Target false positive rate.
    #[arg(long)]
    fpr: Option<f64>,
    /// Attack inputs per round.
    #[arg(long)]
    inputs: Option<usize>,
    /// pgd, cw, ead, pgd-dropout or pgd-low-confidence.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Drop probability for pgd-dropout.
    #[arg(long, default_value_t = 0.1)]
    p_drop: f64,
    /// Confidence cap for pgd-low-confidence.
    #[arg(long, default_value_t = 0.95)]
    target_prob: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train versions into an empty store and print their accuracy.
    TrainVersions {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Simulate repeated breaches and write rounds.csv and summary.json.
    BreachGame {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioFlags,
    },
    /// Craft adversarial examples on stored versions (JSON lines).
    Attack {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of examples (defaults to the scenario's input count).
        #[arg(long)]
        count: Option<usize>,
        /// Version ids to attack as an ensemble (default: the deployed one).
        #[arg(long = "version", value_delimiter = ',')]
        versions: Vec<u64>,
        #[command(flatten)]
        scenario: ScenarioFlags,
    },
    /// Calibrate the filter of a store and evaluate it on benign and
    /// adversarial inputs.
    FilterEval {
        #[arg(long)]
        store: Option<PathBuf>,
        /// JSON-lines file written by `attack`.
        #[arg(long)]
        adv: Option<PathBuf>,
        #[arg(long)]
        fpr: Option<f64>,
        /// Report file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the loss-gap bound for linear models by simulation. Exits 3
    /// when a grid point fails.
    TheoryCheck {
        /// Grid spec JSON (default: config `theory`, else the worked example).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve filtered inference over newline-delimited JSON on TCP.
    Serve {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        fpr: Option<f64>,
    },
}

fn apply_scenario(cfg: &mut RunConfig, f: &ScenarioFlags) -> anyhow::Result<()> {
    let s = &mut cfg.scenario;
    if let Some(v) = f.horizon {
        s.horizon = v;
    }
    if let Some(v) = f.trials {
        s.trials = v;
    }
    if let Some(v) = f.fpr {
        s.target_fpr = v;
    }
    if let Some(v) = f.inputs {
        s.n_attack_inputs = v;
    }
    if let Some(name) = &f.attack {
        s.attack = commands::attack_kind(name, f.p_drop, f.target_prob)?;
    }
    if let Some(eps) = f.epsilon {
        s.budget.epsilon = eps;
        s.budget.step_size = eps / 10.0;
    }
    Ok(())
}

fn set<T>(slot: &mut Option<T>, v: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = v {
        *slot = Some(v.clone());
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    match &cli.command {
        Command::TrainVersions { store, .. } => set(&mut cfg.paths.store, store),
        Command::BreachGame { out, scenario } => {
            set(&mut cfg.paths.out, out);
            apply_scenario(&mut cfg, scenario)?;
        }
        Command::Attack {
            store,
            out,
            scenario,
            ..
        } => {
            set(&mut cfg.paths.store, store);
            set(&mut cfg.paths.out, out);
            apply_scenario(&mut cfg, scenario)?;
        }
        Command::FilterEval {
            store, fpr, out, ..
        } => {
            set(&mut cfg.paths.store, store);
            set(&mut cfg.paths.out, out);
            if let Some(f) = fpr {
                cfg.scenario.target_fpr = *f;
            }
        }
        Command::TheoryCheck { out, .. } => set(&mut cfg.paths.out, out),
        Command::Serve { store, bind, fpr } => {
            set(&mut cfg.paths.store, store);
            if let Some(b) = bind {
                cfg.serve.bind = b.clone();
            }
            if let Some(f) = fpr {
                cfg.scenario.target_fpr = *f;
            }
        }
    }
    let cfg = cfg.resolve();
    cfg.validate()?;

    match &cli.command {
        Command::TrainVersions { count, .. } => commands::train_versions(&cfg, *count)?,
        Command::BreachGame { .. } => commands::breach_game(&cfg)?,
        Command::Attack {
            count, versions, ..
        } => commands::attack(
            &cfg,
            count.unwrap_or(cfg.scenario.n_attack_inputs),
            versions,
        )?,
        Command::FilterEval { adv, .. } => commands::filter_eval(&cfg, adv.as_deref())?,
        Command::TheoryCheck { grid, samples, .. } => {
            if !commands::theory_check(&cfg, grid.as_deref(), *samples)? {
                eprintln!("error: some grid points failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Serve { .. } => commands::serve(&cfg)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<versionguard::Error>() {
        Some(versionguard::Error::InvalidConfig(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
