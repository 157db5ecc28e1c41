//! The `qcrit` experiment runner.

pub mod config;
pub mod expr;
pub mod report;

mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use config::{load_table, set_override, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum CommandKind {
    /// Principal eigenvalue and eigenfunction
    Eig,
    /// Dirichlet problem Q'[u] = g
    Dirichlet,
    /// Picone identity check
    Picone,
    /// Nonnegativity / positive solution / first-order field round trip
    AapCheck,
    /// Subcritical / critical / supercritical classification
    Classify,
    /// (A,V)-capacity of a set K
    Capacity,
    /// Hardy-weight synthesis or best constant against a given weight
    Hardy,
    /// Perturbation threshold tau_+
    Tau,
    /// Morrey norm and empirical Morrey-Adams constant
    Morrey,
    /// Structural inequalities of the operator on random samples
    VerifyOperator,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Eig => "eig",
            CommandKind::Dirichlet => "dirichlet",
            CommandKind::Picone => "picone",
            CommandKind::AapCheck => "aap-check",
            CommandKind::Classify => "classify",
            CommandKind::Capacity => "capacity",
            CommandKind::Hardy => "hardy",
            CommandKind::Tau => "tau",
            CommandKind::Morrey => "morrey",
            CommandKind::VerifyOperator => "verify-operator",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML experiment config; every key has a default
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Exponent p (operator.p)
    #[arg(long, global = true)]
    pub p: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Nodes per axis, e.g. 1001 or 128,128
    #[arg(long, global = true, value_delimiter = ',')]
    pub resolution: Option<Vec<usize>>,
    /// Potential as an expression in x, y
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub potential: Option<String>,
    /// Potential from a file (grid-function CSV or one value per cell)
    #[arg(long, global = true)]
    pub potential_file: Option<String>,
    /// Right-hand side g (dirichlet.rhs)
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub rhs: Option<String>,
    /// Boundary data (dirichlet.boundary)
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub boundary: Option<String>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    #[arg(long, global = true)]
    pub eps_min: Option<f64>,
    /// Output directory (output.dir)
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// Arbitrary override, e.g. --set classify.levels=5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads; does not change results
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(name = "qcrit", version, about = "Numerical lab for Q'[u] = -div A(x, grad u) + V |u|^(p-2) u")]
pub struct Invocation {
    #[command(subcommand)]
    pub command: CommandKind,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Merged config table: file, then the dedicated flags, then `--set` entries.
pub fn merged_table(ov: &Overrides) -> Result<toml::Table> {
    let mut t = load_table(ov.config.as_deref())?;
    let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
    let mut sets: Vec<(String, String)> = Vec::new();
    if let Some(p) = ov.p {
        sets.push(("operator.p".into(), format!("{p:?}")));
    }
    if let Some(s) = ov.seed {
        sets.push(("seed".into(), s.to_string()));
    }
    if let Some(r) = &ov.resolution {
        sets.push(("domain.resolution".into(), format!("{r:?}")));
    }
    if let Some(v) = &ov.potential {
        t.remove("potential");
        sets.push(("potential.expr".into(), quote(v)));
    }
    if let Some(v) = &ov.potential_file {
        t.remove("potential");
        sets.push(("potential.file".into(), quote(v)));
    }
    if let Some(v) = &ov.rhs {
        sets.push(("dirichlet.rhs".into(), quote(v)));
    }
    if let Some(v) = &ov.boundary {
        sets.push(("dirichlet.boundary".into(), quote(v)));
    }
    if let Some(v) = ov.max_iters {
        sets.push(("solver.max_iters".into(), v.to_string()));
    }
    if let Some(v) = ov.tol {
        sets.push(("solver.tol".into(), format!("{v:?}")));
    }
    if let Some(v) = ov.restarts {
        sets.push(("solver.restarts".into(), v.to_string()));
    }
    if let Some(v) = ov.eps_min {
        sets.push(("solver.eps_min".into(), format!("{v:?}")));
    }
    if let Some(v) = &ov.out {
        sets.push(("output.dir".into(), quote(v)));
    }
    for kv in &ov.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        sets.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in sets {
        set_override(&mut t, &k, &v)?;
    }
    Ok(t)
}

/// Runs one invocation and returns the process exit status.
pub fn run(inv: &Invocation) -> i32 {
    match run_inner(inv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qcrit {}: {e}", inv.command.name());
            match e {
                Error::Inconclusive(_) => EXIT_INCONCLUSIVE,
                _ => EXIT_ERROR,
            }
        }
    }
}

fn run_inner(inv: &Invocation) -> Result<i32> {
    if let Some(n) = inv.overrides.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let table = merged_table(&inv.overrides)?;
    let base = inv.overrides.config.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let cfg = ExperimentConfig::from_table(&table, &base)?;
    let mut hashed = table.clone();
    hashed.remove("output");
    let hash = report::config_hash(&hashed);
    let out = commands::execute(inv.command, &cfg, &hash)?;
    let dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    let name = inv.command.name();
    let report_path = dir.join(format!("{name}.json"));
    write_file(&report_path, &out.json)?;
    for (file, text) in &out.artifacts {
        write_file(&dir.join(file), text)?;
    }
    println!("{}", report_path.display());
    Ok(if out.inconclusive { EXIT_INCONCLUSIVE } else { EXIT_OK })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

pub fn main_entry() -> i32 {
    let inv = Invocation::parse();
    run(&inv)
}
