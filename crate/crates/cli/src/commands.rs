//! File-system side of the commands: argument types, artifact layout and
//! atomic publication of output directories.
//!
//! Layout under `--out`:
//!
//! - `manifest.json`, `report.json`, `epsilon.csv`, and per feasible degree
//!   `solution-dNN.json` and `samples-dNN.csv` (from `solve`)
//! - `simulate-dNN/` with `manifest.json`, `summary.json`, `run-KKK.csv`
//! - `verify-dNN/` with `manifest.json`, `audit.json`
//! - `oracle/` with `manifest.json`, `summary.json`, `oracle-<region>.csv`

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lsctl_core::config::{ConfigError, LoadedConfig};
use lsctl_core::oracle;
use lsctl_core::sdp::SolverSettings;
use lsctl_core::sim::SimConfig;

use crate::pipeline::{self, DegreeReport, PipelineError, Solution};

pub const TOOL: &str = "lsctl";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Simulate,
    Verify,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub out: PathBuf,
    /// Inclusive range; `None` uses the configured hierarchy.
    pub degrees: Option<(u32, u32)>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub force: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: ConfigError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists; pass --force to replace it")]
    Exists(PathBuf),
    #[error("missing artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(_) => 3,
            _ => 2,
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
    SolverFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::VerificationFailed => 1,
            Outcome::SolverFailed => 3,
        }
    }
}

/// Embedded in every directory a command publishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub problem_file: String,
    pub output_dir: String,
    pub config_hash: String,
    pub degrees: Vec<u32>,
    pub solver: SolverSettings,
    pub simulation: Option<SimConfig>,
}

/// Header shared by every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
}

impl Stamp {
    fn new(hash: &str) -> Self {
        Stamp {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash: hash.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReportFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub name: String,
    pub degrees: Vec<DegreeReport>,
    pub first_feasible_degree: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub solution: Solution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFile<T> {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub report: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRegion {
    pub region: String,
    pub a: f64,
    pub b: f64,
    pub nodes: usize,
    /// Max change at shared nodes when the grid is refined to `2n - 1` nodes.
    pub refinement_gap: f64,
    pub value_sup: f64,
}

pub fn solution_file(out: &Path, degree: u32) -> PathBuf {
    out.join(format!("solution-d{degree:02}.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts always serialize");
    s.push('\n');
    write(path, &s)
}

/// Build `target` in a sibling temporary directory and rename it into place.
/// An existing `target` is replaced only when `force` is set.
pub fn publish_dir(
    target: &Path,
    force: bool,
    fill: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    if target.exists() && !force {
        return Err(CliError::Exists(target.to_path_buf()));
    }
    let name = target
        .file_name()
        .ok_or_else(|| {
            CliError::Usage(format!(
                "{} is not a usable directory name",
                target.display()
            ))
        })?
        .to_string_lossy()
        .into_owned();
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if target.exists() {
        fs::remove_dir_all(target).map_err(io_err(target))?;
    }
    fs::rename(&tmp, target).map_err(io_err(target))
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let src = fs::read_to_string(path).map_err(io_err(path))?;
    LoadedConfig::from_json(&src).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })
}

fn degrees(inv: &Invocation, loaded: &LoadedConfig) -> Result<Vec<u32>, CliError> {
    let list: Vec<u32> = match inv.degrees {
        Some((a, b)) => (a..=b).filter(|d| d % 2 == 0 && *d >= 2).collect(),
        None => loaded.config.hierarchy.degrees(),
    };
    if list.is_empty() {
        return Err(CliError::Usage(
            "the degree range contains no even degree >= 2".into(),
        ));
    }
    Ok(list)
}

fn manifest(
    inv: &Invocation,
    loaded: &LoadedConfig,
    degrees: &[u32],
    sim: Option<SimConfig>,
) -> RunManifest {
    RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: inv.command,
        problem_file: inv.config.display().to_string(),
        output_dir: inv.out.display().to_string(),
        config_hash: loaded.hash.clone(),
        degrees: degrees.to_vec(),
        solver: loaded.config.solver,
        simulation: sim,
    }
}

fn read_solution(out: &Path, degree: u32, loaded: &LoadedConfig) -> Result<Solution, CliError> {
    let path = solution_file(out, degree);
    let src = fs::read_to_string(&path).map_err(|_| {
        CliError::Artifact(format!(
            "{} (run `solve` first; degree {degree} may have been infeasible)",
            path.display()
        ))
    })?;
    let file: SolutionFile = serde_json::from_str(&src)
        .map_err(|e| CliError::Artifact(format!("{} is unreadable: {e}", path.display())))?;
    if file.stamp.config_hash != loaded.hash {
        return Err(CliError::Artifact(format!(
            "{} was produced from a different configuration",
            path.display()
        )));
    }
    Ok(file.solution)
}

pub fn run(inv: &Invocation) -> Result<Outcome, CliError> {
    let loaded = load_config(&inv.config)?;
    match inv.command {
        Command::Solve => solve(inv, &loaded),
        Command::Simulate => simulate(inv, &loaded),
        Command::Verify => verify(inv, &loaded),
        Command::Oracle => oracle_cmd(inv, &loaded),
    }
}

fn solve(inv: &Invocation, loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    let degrees = degrees(inv, loaded)?;
    let config = &loaded.config;
    let subs = config.subproblems().map_err(|source| CliError::Config {
        path: inv.config.clone(),
        source,
    })?;
    let mut outcome = Outcome::Success;
    publish_dir(&inv.out, inv.force, |dir| {
        let mut reports = Vec::with_capacity(degrees.len());
        for &d in &degrees {
            let (report, solution) = pipeline::solve_degree(&subs, d, &config.solver);
            eprintln!(
                "degree {d:2}: {}",
                report
                    .regions
                    .iter()
                    .map(|r| format!(
                        "{} {} eps={}",
                        r.region,
                        r.status.map_or("error".into(), |s| format!("{s:?}")),
                        r.epsilon.map_or("-".into(), |e| format!("{e:.3e}"))
                    ))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            if !report.resolved {
                outcome = Outcome::SolverFailed;
            }
            if let Some(sol) = solution {
                write(
                    &dir.join(format!("samples-d{d:02}.csv")),
                    &pipeline::samples_csv(&subs, &sol, config.audit.sample_points),
                )?;
                write_json(
                    &solution_file(dir, d),
                    &SolutionFile {
                        stamp: Stamp::new(&loaded.hash),
                        solution: sol,
                    },
                )?;
            }
            reports.push(report);
        }
        write(&dir.join("epsilon.csv"), &pipeline::epsilon_csv(&reports))?;
        write_json(
            &dir.join("report.json"),
            &SolveReportFile {
                stamp: Stamp::new(&loaded.hash),
                name: config.name.clone(),
                first_feasible_degree: reports.iter().find(|r| r.feasible).map(|r| r.degree),
                degrees: reports,
            },
        )?;
        write_json(
            &dir.join("manifest.json"),
            &manifest(inv, loaded, &degrees, None),
        )
    })?;
    Ok(outcome)
}

fn require_out(inv: &Invocation) -> Result<(), CliError> {
    if !inv.out.is_dir() {
        return Err(CliError::Artifact(format!(
            "output directory {} does not exist (run `solve` first)",
            inv.out.display()
        )));
    }
    Ok(())
}

fn simulate(inv: &Invocation, loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    require_out(inv)?;
    let degrees = degrees(inv, loaded)?;
    let sim =
        loaded.config.simulation.as_ref().ok_or_else(|| {
            CliError::Usage("the configuration has no `simulation` section".into())
        })?;
    let mut settings = sim.sim_config();
    if let Some(seed) = inv.seed {
        settings.rng_seed = seed;
    }
    if let Some(runs) = inv.runs {
        settings.num_runs = runs;
    }
    if settings.num_runs < 2 {
        return Err(CliError::Usage(
            "Monte Carlo needs at least 2 runs (--runs)".into(),
        ));
    }
    let solutions = degrees
        .iter()
        .map(|&d| read_solution(&inv.out, d, loaded))
        .collect::<Result<Vec<_>, _>>()?;
    for (d, sol) in degrees.iter().zip(&solutions) {
        let (report, result) = pipeline::simulate(&loaded.config, sol, &sim.x0, &settings)?;
        eprintln!(
            "degree {d:2}: V_u(x0) = {:.4}, mean J = {}, std err = {}, exits: {} origin, {} boundary, {} timed out",
            report.value_at_x0,
            report.summary.mean_cost.map_or("-".into(), |m| format!("{m:.4}")),
            report.summary.std_err.map_or("-".into(), |s| format!("{s:.4}")),
            report.summary.counts.origin_reached,
            report.summary.counts.boundary_exited,
            report.summary.counts.timed_out,
        );
        publish_dir(
            &inv.out.join(format!("simulate-d{d:02}")),
            inv.force,
            |dir| {
                for (k, t) in result.trajectories.iter().enumerate() {
                    write(&dir.join(format!("run-{k:03}.csv")), &t.to_csv())?;
                }
                write_json(
                    &dir.join("summary.json"),
                    &ArtifactFile {
                        stamp: Stamp::new(&loaded.hash),
                        report: &report,
                    },
                )?;
                write_json(
                    &dir.join("manifest.json"),
                    &manifest(inv, loaded, &[*d], Some(settings.clone())),
                )
            },
        )?;
    }
    Ok(Outcome::Success)
}

fn verify(inv: &Invocation, loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    require_out(inv)?;
    let degrees = degrees(inv, loaded)?;
    let solutions = degrees
        .iter()
        .map(|&d| read_solution(&inv.out, d, loaded))
        .collect::<Result<Vec<_>, _>>()?;
    let mut outcome = Outcome::Success;
    for (d, sol) in degrees.iter().zip(&solutions) {
        let report = pipeline::verify(&loaded.config, sol)?;
        eprintln!(
            "degree {d:2}: sclf max L(V) = {:.3e} ({} violations), oracle {}, passed = {}",
            report.sclf.max_lv,
            report.sclf.violations.len(),
            report
                .oracle
                .iter()
                .map(|c| format!("{}:{}", c.region, if c.passed() { "ok" } else { "FAIL" }))
                .collect::<Vec<_>>()
                .join(" "),
            report.passed
        );
        if !report.passed {
            outcome = Outcome::VerificationFailed;
        }
        publish_dir(&inv.out.join(format!("verify-d{d:02}")), inv.force, |dir| {
            write_json(
                &dir.join("audit.json"),
                &ArtifactFile {
                    stamp: Stamp::new(&loaded.hash),
                    report: &report,
                },
            )?;
            write_json(
                &dir.join("manifest.json"),
                &manifest(inv, loaded, &[*d], None),
            )
        })?;
    }
    Ok(outcome)
}

fn oracle_cmd(inv: &Invocation, loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    let config = &loaded.config;
    if config.nvars() != 1 {
        return Err(CliError::Usage(
            "the oracle command handles one-dimensional problems only".into(),
        ));
    }
    let subs = config.subproblems().map_err(|source| CliError::Config {
        path: inv.config.clone(),
        source,
    })?;
    let n = config.audit.oracle_nodes;
    let mut regions = Vec::with_capacity(subs.len());
    let mut grids = Vec::with_capacity(subs.len());
    for sub in &subs {
        let grid = oracle::solve_problem(&sub.problem, n).map_err(PipelineError::from)?;
        let (a, b) = (grid.a, grid.b);
        let boundary = (grid.values[0], grid.values[n - 1]);
        let gap = oracle::refinement_gap(&sub.problem, (a, b), boundary, n)
            .map_err(PipelineError::from)?;
        let sup =
            oracle::sup_norm_estimate(&grid, sub.problem.lambda()).map_err(PipelineError::from)?;
        regions.push(OracleRegion {
            region: sub.label.clone(),
            a,
            b,
            nodes: n,
            refinement_gap: gap,
            value_sup: sup,
        });
        grids.push((sub.label.clone(), grid, sub.problem.lambda()));
    }
    publish_dir(&inv.out.join("oracle"), inv.force, |dir| {
        for (label, grid, lambda) in &grids {
            write(
                &dir.join(format!("oracle-{label}.csv")),
                &grid.to_csv(*lambda),
            )?;
        }
        write_json(
            &dir.join("summary.json"),
            &ArtifactFile {
                stamp: Stamp::new(&loaded.hash),
                report: &regions,
            },
        )?;
        write_json(
            &dir.join("manifest.json"),
            &manifest(inv, loaded, &[], None),
        )
    })?;
    Ok(Outcome::Success)
}
