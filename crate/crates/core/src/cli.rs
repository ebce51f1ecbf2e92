//! Batch front-end: `solve`, `simulate`, `verify` and `sweep` runs.
//!
//! Every run writes into `<outdir>/<run-id>/`, where the run id is the config
//! name plus a prefix of its hash. Files are first written to a scratch
//! directory next to it and moved into place only when the run has
//! succeeded, so a failed run leaves nothing behind. A `verify` run whose
//! checks fail still writes its report.
//!
//! Exit codes: 0 success, 1 failed checks, 2 bad config, 3 solver did not
//! converge, 4 I/O failure, 5 other numerical failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::config::{set_param, ConfigError, RunConfig};
use crate::model::{ModelError, State};
use crate::rng::{child, derive_seed};
use crate::simulate::{estimate_value, simulate_path, Policy, SimError, ValueEstimate};
use crate::solver::{solve, SolveError, SolveReport, Solution};
use crate::verify::{run_suite, SuiteInputs, VerificationReport, VerifyError};

#[derive(Parser, Debug, Clone)]
#[command(name = "disaster-growth", version, about = "HJB solver, Monte Carlo and verification for disaster-growth models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config (default `out`).
    #[arg(long, global = true)]
    pub outdir: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Solve the HJB equation and write the value and policy fields.
    Solve,
    /// Estimate the value of the solved policy by Monte Carlo at the probes.
    Simulate,
    /// Run the verification suite; exit status 1 if any check fails.
    Verify,
    /// Solve once per value of the swept parameter.
    Sweep,
}

#[derive(Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver did not converge: {0}")]
    NotConverged(SolveError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Numerical(_) => 5,
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::NotConverged { .. } => CliError::NotConverged(e),
            SolveError::Model(_) | SolveError::Grid(_) | SolveError::Options(_) => {
                CliError::Config(ConfigError::Invalid(e.to_string()))
            }
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(ConfigError::Invalid(e.to_string()))
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Solve(s) => s.into(),
            VerifyError::Model(m) => m.into(),
            VerifyError::Sim(s) => s.into(),
            VerifyError::NotApplicable(m) => CliError::Config(ConfigError::Invalid(m)),
        }
    }
}

/// What a successful run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub run_dir: PathBuf,
    /// `false` only for a verify run with failing checks.
    pub passed: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Number of full trajectories written by `simulate`.
pub const RECORDED_PATHS: usize = 4;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Scratch directory that becomes the run directory on `commit`.
struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    header: String,
    /// Set when the output directory was created for this run.
    made_outdir: Option<PathBuf>,
    committed: bool,
}

impl Staging {
    fn new(outdir: &Path, run_id: &str, header: String) -> Result<Self, CliError> {
        let made_outdir = (!outdir.exists()).then(|| outdir.to_path_buf());
        fs::create_dir_all(outdir).map_err(io_err(outdir))?;
        let tmp = outdir.join(format!(".{run_id}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir(&tmp).map_err(io_err(&tmp))?;
        Ok(Self { tmp, dest: outdir.join(run_id), header, made_outdir, committed: false })
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>, &str) -> io::Result<()>) -> Result<(), CliError> {
        let path = self.tmp.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w, &self.header).and_then(|_| w.flush()).map_err(io_err(&path))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("outputs serialize");
        self.write(name, |w, _| writeln!(w, "{text}"))
    }

    fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(io_err(&self.dest))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(io_err(&self.dest))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
            if let Some(dir) = &self.made_outdir {
                let _ = fs::remove_dir(dir);
            }
        }
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    master_seed: u64,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct ProbeEstimate {
    #[serde(rename = "K")]
    k: f64,
    #[serde(rename = "P")]
    p: f64,
    v_solver: f64,
    estimate: ValueEstimate,
}

/// Load, apply the command-line overrides and validate.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli.config.as_deref().ok_or_else(|| ConfigError::Invalid("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.simulation.master_seed = seed;
    }
    if let Some(dir) = &cli.outdir {
        cfg.outdir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run `cli` on a pool of `--threads` workers.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let cfg = load_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError::Invalid("--threads must be at least 1".into()).into());
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, &cfg))
}

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    match command {
        Command::Solve => cmd_solve(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Verify => cmd_verify(cfg),
        Command::Sweep => cmd_sweep(cfg),
    }
}

fn staging(cfg: &RunConfig) -> Result<Staging, CliError> {
    let outdir = cfg.outdir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let header = format!("config_hash={}, master_seed={}", cfg.hash(), cfg.simulation.master_seed);
    Staging::new(&outdir, &cfg.run_id(), header)
}

fn solve_config(cfg: &RunConfig) -> Result<Solution, CliError> {
    let t = Instant::now();
    let sol = solve(&cfg.model()?, &cfg.grid()?, &cfg.scheme)?;
    info!("solved {} in {:.1?} ({} iterations)", cfg.name, t.elapsed(), sol.report.iterations);
    Ok(sol)
}

fn write_solution(out: &Staging, cfg: &RunConfig, sol: &Solution) -> Result<(), CliError> {
    out.write("value.csv", |w, h| sol.value.write_csv(w, h))?;
    out.write("policy.csv", |w, h| sol.policy.write_csv(w, h, &sol.value))?;
    let body: &SolveReport = &sol.report;
    out.json("convergence.json", &Stamped { config_hash: &cfg.hash(), master_seed: cfg.simulation.master_seed, body })
}

/// Solve and write `value.csv`, `policy.csv` and `convergence.json`.
pub fn cmd_solve(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let out = staging(cfg)?;
    let sol = solve_config(cfg)?;
    write_solution(&out, cfg, &sol)?;
    Ok(Outcome { run_dir: out.commit()?, passed: true })
}

/// Solve, then estimate the value of the solved policy at every probe
/// (`summary.json`) and record a few trajectories from the middle probe
/// (`paths/`).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let out = staging(cfg)?;
    let model = cfg.model()?;
    let sol = solve_config(cfg)?;
    write_solution(&out, cfg, &sol)?;
    let sim = &cfg.simulation;
    let policy = Policy::field(&sol.policy);
    let probes = cfg.probes()?;
    let mut rows = Vec::with_capacity(probes.len());
    for (n, &s) in probes.iter().enumerate() {
        let t = Instant::now();
        let seed = derive_seed(sim.master_seed, n as u64);
        let estimate = estimate_value(&model, &policy, s, sim.n_paths, sim.t_end, sim.dt, seed, &sim.opts)?;
        info!("probe ({}, {}): {} +- {} in {:.1?}", s.k, s.p, estimate.mean, estimate.stderr, t.elapsed());
        rows.push(ProbeEstimate { k: s.k, p: s.p, v_solver: sol.value.interpolate(s.k, s.p), estimate });
    }
    let mid: State = probes[probes.len() / 2];
    let seed = derive_seed(sim.master_seed, probes.len() as u64);
    for i in 0..RECORDED_PATHS.min(sim.n_paths) {
        let rec = simulate_path(&model, &policy, mid, sim.t_end, sim.dt, &sim.opts, &mut child(seed, i as u64))?;
        out.write(&format!("paths/path_{i:04}.csv"), |w, h| rec.write_csv(w, h))?;
    }
    out.json("summary.json", &Stamped { config_hash: &cfg.hash(), master_seed: sim.master_seed, body: Probes { probes: rows } })?;
    Ok(Outcome { run_dir: out.commit()?, passed: true })
}

#[derive(Serialize)]
struct Probes {
    probes: Vec<ProbeEstimate>,
}

/// Solve and run the verification suite: `report.json`, `report.csv` plus
/// the solve outputs.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let out = staging(cfg)?;
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let sol = solve_config(cfg)?;
    write_solution(&out, cfg, &sol)?;
    let probes = cfg.probes()?;
    let inputs = SuiteInputs {
        model: &model,
        grid: &grid,
        scheme: &cfg.scheme,
        sim: &cfg.simulation,
        probes: &probes,
        settings: &cfg.verify,
    };
    let t = Instant::now();
    let checks = run_suite(&inputs, &sol)?;
    info!("verification suite ran in {:.1?}", t.elapsed());
    let report = VerificationReport::new(model.params.variant, cfg.hash(), cfg.simulation.master_seed, checks);
    for c in report.failures() {
        warn!("FAILED {}: {} > {} ({})", c.name, c.statistic, c.tolerance, c.detail);
    }
    out.write("report.json", |w, _| writeln!(w, "{}", report.to_json()))?;
    out.write("report.csv", |w, h| report.write_csv(w, h))?;
    Ok(Outcome { run_dir: out.commit()?, passed: report.passed })
}

/// Solve once per swept value; `sweep.csv` has one row per value with the
/// solver diagnostics and the value at every probe.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let sw = cfg.sweep.as_ref().ok_or_else(|| ConfigError::Invalid("sweep runs need a \"sweep\" section".into()))?;
    let out = staging(cfg)?;
    let probes = cfg.probes()?;
    let mut rows = Vec::with_capacity(sw.values.len());
    for &x in &sw.values {
        let mut c = cfg.clone();
        set_param(&mut c.params, &sw.param, x)?;
        let sol = solve_config(&c)?;
        let vals: Vec<f64> = probes.iter().map(|s| sol.value.interpolate(s.k, s.p)).collect();
        rows.push((x, sol.report.iterations, sol.report.interior_residual, vals));
    }
    out.write("sweep.csv", |w, h| {
        writeln!(w, "# {h}")?;
        write!(w, "{},iterations,interior_residual", sw.param)?;
        for s in &probes {
            write!(w, ",v(K={} P={})", s.k, s.p)?;
        }
        writeln!(w)?;
        for (x, it, res, vals) in &rows {
            write!(w, "{x},{it},{res}")?;
            for v in vals {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    Ok(Outcome { run_dir: out.commit()?, passed: true })
}
