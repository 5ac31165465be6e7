//! Command-line interface.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use crate::embedding::{comm_cost, representation_capacity, HashPooling, Strategy};
use crate::federation::artifacts::{load_simulation, provenance_line, write_pretrain};
use crate::federation::simulation::pretrain_with;
use crate::federation::{prepare_data, run_experiment, Phase};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fedpeft", version, about = "Federated recommendation with parameter-efficient item embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set strategy.rank=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (also settable through FEDPEFT_OUTPUT_DIR).
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for client training; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Accept hyperparameters outside the tuned grids.
    #[arg(long = "unsafe")]
    pub allow_unsafe: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the autoencoder (and RQ-VAE codes) and write them out.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Also train semantic codes when the strategy does not need them.
        #[arg(long)]
        codes: bool,
    },
    /// Run a full federated experiment.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Item-model checkpoint (default: <output_dir>/model.fpeb).
        #[arg(long)]
        model: Option<PathBuf>,
        /// User-state file (default: <output_dir>/users.fpeu).
        #[arg(long)]
        users: Option<PathBuf>,
    },
    /// Per-client upload cost and representation capacity of each strategy.
    Comm {
        #[command(flatten)]
        common: Common,
        /// Item count (default: 3706, MovieLens-1M).
        #[arg(long, default_value_t = 3706)]
        items: usize,
        /// Embedding dimension (default: model.k).
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `strategy.rank`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::config("--config", other.to_string()),
    }
}

/// Resolves file, environment and flag settings (flags win).
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(config_error)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    for o in &common.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(r) = common.rounds {
        cfg.federation.rounds = r;
    }
    if common.allow_unsafe {
        cfg.allow_unsafe = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Strategies listed by `comm`.
pub fn comm_grid(base: &ExperimentConfig) -> Vec<Strategy> {
    let mut out = vec![Strategy::Full];
    out.extend((2..=6).map(|rank| Strategy::Lora { rank }));
    for pooling in [HashPooling::Mean, HashPooling::Senet] {
        for table_size in [256, 512, 1024] {
            out.push(Strategy::Hash {
                table_size,
                functions: base.strategy.functions,
                prime: base.strategy.prime,
                pooling,
                expansion: base.strategy.expansion,
            });
        }
    }
    for levels in [2, 3, 4] {
        for codebook_size in [64, 256] {
            out.push(Strategy::RqVae { levels, codebook_size });
        }
    }
    out
}

/// CSV: `strategy,params,bytes,kb,capacity`.
pub fn comm_report(cfg: &ExperimentConfig, strategies: &[Strategy], n: usize, k: usize) -> String {
    let mut out = provenance_line(cfg);
    let _ = write!(out, " items={n} k={k}\nstrategy,params,bytes,kb,capacity\n");
    for s in strategies {
        let bytes = comm_cost(s, n, k);
        let _ = writeln!(
            out,
            "\"{}\",{},{},{:.1},{}",
            s.label(),
            bytes / 4,
            bytes,
            bytes as f64 / 1000.0,
            representation_capacity(s, n)
        );
    }
    out
}

fn write_file(path: &std::path::Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_command(command: Command) -> Result<String> {
    match command {
        Command::Pretrain { common, codes } => {
            let cfg = resolve_config(&common)?;
            let data = prepare_data(&cfg)?;
            let pre = pretrain_with(&cfg, &data.log, codes)?;
            write_pretrain(&cfg.output_dir, &cfg, &pre, &data.log)?;
            Ok(format!(
                "wrote pretrained table ({} items, k = {}){} to {}\n",
                pre.table.rows(),
                pre.table.cols(),
                if pre.codes.is_some() { " and semantic codes" } else { "" },
                cfg.output_dir.display()
            ))
        }
        Command::Train { common } => {
            let cfg = resolve_config(&common)?;
            let out = run_experiment(&cfg, Some(&cfg.output_dir))?;
            Ok(crate::federation::artifacts::metrics_csv(&cfg, &out.evals))
        }
        Command::Eval { common, model, users } => {
            let cfg = resolve_config(&common)?;
            let model = model.unwrap_or_else(|| cfg.output_dir.join("model.fpeb"));
            let users = users.unwrap_or_else(|| cfg.output_dir.join("users.fpeu"));
            let data = prepare_data(&cfg)?;
            let sim = load_simulation(&cfg, data.split, &model, &users)?;
            let table = sim.evaluate()?;
            let mut out = provenance_line(&cfg);
            let _ = write!(out, "\nphase,{}\n{},{}\n", table.csv_header(), sim.model.phase.name(), table.csv_row());
            write_file(&cfg.output_dir.join("eval.csv"), &out)?;
            Ok(out)
        }
        Command::Comm { common, items, dim } => {
            let cfg = resolve_config(&common)?;
            let k = dim.unwrap_or(cfg.model.k);
            let report = comm_report(&cfg, &comm_grid(&cfg), items, k);
            if common.output_dir.is_some() || std::env::var_os(OUTPUT_DIR_ENV).is_some() {
                write_file(&cfg.output_dir.join("comm.csv"), &report)?;
            }
            Ok(report)
        }
        Command::Sweep { common, param, values } => {
            let base = resolve_config(&common)?;
            let mut header = None;
            let mut rows = String::new();
            for v in &values {
                let mut cfg = base.clone();
                cfg.set(&format!("{param}={v}"))?;
                cfg.output_dir = base.output_dir.join(format!("{}={}", param, v.replace('"', "")));
                cfg.validate()?;
                let out = run_experiment(&cfg, Some(&cfg.output_dir))?;
                let last = out.evals.last().expect("initial evaluation");
                let peft_bytes = out
                    .reports
                    .iter()
                    .rev()
                    .find(|r| r.phase != Phase::WarmUp)
                    .or(out.reports.last())
                    .map_or(0, |r| r.bytes_per_client);
                header.get_or_insert_with(|| format!("{param},comm_kb,{}\n", last.table.csv_header()));
                let _ = writeln!(rows, "{v},{:.1},{}", peft_bytes as f64 / 1000.0, last.table.csv_row());
            }
            let text = format!("{}\n{}{rows}", provenance_line(&base), header.unwrap_or_default());
            write_file(&base.output_dir.join("sweep.csv"), &text)?;
            Ok(text)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
