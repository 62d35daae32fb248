//! Experiment harness: load a run configuration, execute one scenario and
//! write CSV reports plus a JSON manifest into the output directory.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use hierctl_core::oracle::ORACLE_SIZE_LIMIT;

use crate::commands::{Outcome, Table};
use crate::config::{ConfigError, LoadedConfig, Overrides};

#[derive(Debug, Clone, Parser)]
#[command(
    name = "hierctl",
    version,
    about = "Hierarchical null-control experiments on a scenario tree"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration (TOML). The bundled default is used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory receiving the CSV reports and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub nx: Option<usize>,
    #[arg(long, global = true)]
    pub nt: Option<usize>,
    /// Penalty sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    #[arg(long, global = true)]
    pub beta1: Option<f64>,
    #[arg(long, global = true)]
    pub beta2: Option<f64>,
    #[arg(long, global = true)]
    pub alpha1: Option<f64>,
    #[arg(long, global = true)]
    pub alpha2: Option<f64>,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the followers' game for the configured leaders.
    Nash,
    /// Penalized null control over the configured eps sweep.
    NullControl,
    /// Monte Carlo observability ratios of the adjoint system.
    Observability,
    /// Monte Carlo Carleman ratios at the configured lambda and mu.
    CarlemanCheck,
    /// Compare every iterative solver against its dense counterpart.
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Nash => "nash",
            Command::NullControl => "null-control",
            Command::Observability => "observability",
            Command::CarlemanCheck => "carleman-check",
            Command::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {0}")]
    Config(#[from] ConfigError),

    #[error("solver failure: {error} (diagnostics written to {})", path.display())]
    Solver {
        error: hierctl_core::Error,
        path: PathBuf,
    },

    #[error("oracle mismatch: {}", .0.join("; "))]
    Mismatch(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },

    #[error("writing {file}: {source}")]
    Csv { file: String, source: csv::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver { .. } => 3,
            CliError::Mismatch(_) | CliError::Io { .. } | CliError::Csv { .. } => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub tables: Vec<Table>,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            nx: self.nx,
            nt: self.nt,
            eps: self.eps.clone(),
            lambda: self.lambda,
            mu: self.mu,
            beta1: self.beta1,
            beta2: self.beta2,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            threads: self.threads,
        }
    }
}

fn write_table(dir: &Path, t: &Table) -> Result<PathBuf, CliError> {
    let path = dir.join(t.name);
    let csv_err = |source| CliError::Csv {
        file: t.name.to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(&t.header).map_err(csv_err)?;
    for row in &t.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(io_err(format!("writing {}", path.display())))?;
    Ok(path)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    std::fs::write(path, text + "\n").map_err(io_err(format!("writing {}", path.display())))
}

fn solver_diagnostics(command: Command, error: &hierctl_core::Error) -> serde_json::Value {
    use hierctl_core::Error as E;
    let detail = match error {
        E::SolverFailure {
            solver,
            iterations,
            residuals,
        } => serde_json::json!({
            "kind": "solver_failure", "solver": solver, "iterations": iterations, "residuals": residuals,
        }),
        E::CoercivityViolation {
            beta1,
            beta2,
            quotient,
        } => serde_json::json!({
            "kind": "coercivity_violation", "beta1": beta1, "beta2": beta2, "rayleigh_quotient": quotient,
        }),
        E::CouplingDivergence {
            iterations,
            contraction,
            damping,
        } => serde_json::json!({
            "kind": "coupling_divergence", "iterations": iterations, "contraction": contraction, "damping": damping,
        }),
        E::Pole(t) => serde_json::json!({ "kind": "pole", "t": t }),
        E::SizeGuard { size, limit } => {
            serde_json::json!({ "kind": "size_guard", "size": size, "limit": limit })
        }
        E::InvalidArgument(m) => serde_json::json!({ "kind": "invalid_argument", "message": m }),
    };
    serde_json::json!({ "command": command.name(), "error": error.to_string(), "detail": detail })
}

/// Runs one scenario and writes its reports under `cli.out_dir`.
pub fn run(cli: &Cli) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let mut loaded = match &cli.config {
        Some(path) => LoadedConfig::from_path(path)?,
        None => LoadedConfig::bundled_default(),
    };
    loaded.apply(&cli.overrides());
    let spec = loaded.build_spec()?;
    let weights = loaded.weight_config(&spec)?;
    let penalty = loaded.penalty();
    let cfg = loaded.config.clone();
    if cli.command == Command::OracleCheck {
        let size = spec.n_x() * spec.tree().node_count();
        if size > ORACLE_SIZE_LIMIT {
            return Err(ConfigError {
                origin: "problem.nx/problem.nt".into(),
                message: format!(
                    "dense oracles need nx * (2^(nt+1) - 1) <= {ORACLE_SIZE_LIMIT}, got {size}"
                ),
            }
            .into());
        }
    }

    std::fs::create_dir_all(&cli.out_dir)
        .map_err(io_err(format!("creating {}", cli.out_dir.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build()
        .map_err(|e| CliError::Io {
            context: "starting thread pool".into(),
            source: std::io::Error::other(e),
        })?;
    let result = pool.install(|| match cli.command {
        Command::Nash => commands::nash(&spec, &cfg),
        Command::NullControl => commands::null_control(&spec, &cfg, &penalty, &weights),
        Command::Observability => commands::observability(&spec, &cfg, &penalty, &weights),
        Command::CarlemanCheck => commands::carleman_check(&spec, &cfg, &penalty, &weights),
        Command::OracleCheck => commands::oracle_check(&spec, &cfg, &penalty),
    });
    let Outcome {
        tables,
        summary,
        mismatches,
    } = match result {
        Ok(o) => o,
        Err(error) => {
            let path = cli.out_dir.join("diagnostics.json");
            write_json(&path, &solver_diagnostics(cli.command, &error))?;
            return Err(CliError::Solver { error, path });
        }
    };

    let mut files = Vec::new();
    for t in &tables {
        files.push(write_table(&cli.out_dir, t)?);
    }
    let manifest = serde_json::json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.run.seed,
        "threads": pool.current_num_threads(),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "outputs": tables.iter().map(|t| t.name).collect::<Vec<_>>(),
        "summary": summary,
        "config": cfg,
    });
    let manifest_path = cli.out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    files.push(manifest_path);
    if !mismatches.is_empty() {
        return Err(CliError::Mismatch(mismatches));
    }
    Ok(RunReport {
        tables,
        files,
        summary,
    })
}
