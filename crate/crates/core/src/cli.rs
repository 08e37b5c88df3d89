//! Command-line front end: config loading, run orchestration and file output.
//!
//! A run is described by a JSON config (see the README for the schema).
//! Every emitted CSV starts with a `# model_hash=… spec_hash=…` comment line;
//! JSON reports carry the same two hashes as top-level fields.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Axis, ChainError, Grid};
use crate::model::{hex_digest, validate, BoxDomain, Horizon, ModelError, ModelText, SwitchingModel, ValidationReport};
use crate::oracle::{enumerate, ChainProblem, OracleError, OracleLimits};
use crate::policy::Action;
use crate::solver::{check_complementarity, solve, LevelData, Scheme, SolveDiagnostics, SolveError, SolveOptions, ValueField};
use crate::strategy::{estimate_j, extract, random_policy, MCEstimate, SimConfig, StrategyError, TieBreak, TOL_ACTION};

#[derive(Debug, Parser)]
#[command(name = "switchgrid", version, about = "Optimal multi-mode switching with risk of default")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the simulation and validation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run even when model validation reports hard failures.
    #[arg(long, global = true)]
    pub force: bool,
    /// Solver scheme: coupled or picard.
    #[arg(long, global = true)]
    pub scheme: Option<Scheme>,
    /// Reuse a values.csv instead of solving (check, extract, simulate).
    #[arg(long, global = true)]
    pub values: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the model hypotheses on a quasi-random sample of the box.
    Validate,
    /// Solve for the value functions and write values.csv.
    Solve,
    /// Verify obstacle inequalities and the complementarity residual.
    Check,
    /// Extract the continue/default/switch regions and write regions.csv.
    Extract,
    /// Monte Carlo estimate of the extracted strategy (and random policies).
    Simulate,
    /// Compare the solver with brute-force policy enumeration.
    Oracle,
    /// Solve at two resolutions and report the difference.
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSpec {
    pub scheme: Scheme,
    pub tol: f64,
    pub max_passes: usize,
    pub max_outer: usize,
}

impl Default for SolveSpec {
    fn default() -> Self {
        let o = SolveOptions::default();
        SolveSpec {
            scheme: o.scheme,
            tol: o.tol,
            max_passes: o.max_passes,
            max_outer: o.max_outer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySpec {
    pub tol_action: f64,
    pub tie: TieBreak,
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec {
            tol_action: TOL_ACTION,
            tie: TieBreak::Default,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSpec {
    /// Start state; the box centre when absent.
    pub x0: Option<Vec<f64>>,
    /// Start mode, one-based.
    pub mode: usize,
    pub paths: usize,
    /// Euler step; the grid step when absent.
    pub dt_sim: Option<f64>,
    pub seed: u64,
    /// Grid levels simulated for an infinite horizon.
    pub truncation: Option<usize>,
    /// Number of seeded random policies to estimate alongside.
    pub random_policies: usize,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        SimulateSpec {
            x0: None,
            mode: 1,
            paths: 10_000,
            dt_sim: None,
            seed: 0,
            truncation: None,
            random_policies: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSpec {
    pub samples: usize,
    pub seed: u64,
    /// Sample box; the grid box when absent.
    #[serde(rename = "box")]
    pub domain: Option<BoxDomain>,
}

impl Default for ValidateSpec {
    fn default() -> Self {
        ValidateSpec {
            samples: 256,
            seed: 0,
            domain: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    /// Steps of stationary-policy evaluation for an infinite horizon.
    pub truncation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub factor: usize,
    /// Comparison point; the box centre when absent.
    pub x0: Option<Vec<f64>>,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec { factor: 2, x0: None }
    }
}

/// A complete, deterministic run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelText>,
    /// Path to a model JSON file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    pub grid: GridSpec,
    #[serde(default)]
    pub solve: SolveSpec,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub validate: ValidateSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub compare: CompareSpec,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("model error at {pointer}: {source}")]
    Model { pointer: String, source: ModelError },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("model validation failed ({}); rerun with --force to proceed outside the model hypotheses", .failed.join(", "))]
    ValidationFailed { failed: Vec<String> },
    #[error("values file {path}: {message}")]
    Values { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config { .. } => "config",
            CliError::Model { .. } => "model",
            CliError::Chain(_) => "chain",
            CliError::Solve(_) => "solve",
            CliError::Strategy(_) => "strategy",
            CliError::Oracle(_) => "oracle",
            CliError::ValidationFailed { .. } => "validation",
            CliError::Values { .. } => "values",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn pointer(&self) -> Option<&str> {
        match self {
            CliError::Config { pointer, .. } | CliError::Model { pointer, .. } => Some(pointer),
            _ => None,
        }
    }

    /// One-line machine-readable report.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "pointer": self.pointer(),
        })
        .to_string()
    }

    fn model(prefix: &str, source: ModelError) -> CliError {
        let pointer = format!("{prefix}{}", source.field().unwrap_or(""));
        CliError::Model { pointer, source }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => {
                let _ = write!(out, "/{index}");
            }
            Segment::Map { key } => {
                let _ = write!(out, "/{}", key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                let _ = write!(out, "/{variant}");
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, prefix: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = json_pointer(e.path());
        let pointer = if inner == "/" && !prefix.is_empty() { prefix.to_string() } else { format!("{prefix}{}", inner.trim_end_matches('/')) };
        CliError::Config {
            pointer: if pointer.is_empty() { "/".into() } else { pointer },
            message: e.into_inner().to_string(),
        }
    })
}

/// Reads and schema-checks a config. A `model_file` reference is inlined.
pub fn load_config(path: &Path) -> Result<RunSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut spec: RunSpec = parse_json(&text, "")?;
    match (&spec.model, spec.model_file.take()) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config {
                pointer: "/model_file".into(),
                message: "give either `model` or `model_file`, not both".into(),
            })
        }
        (None, None) => {
            return Err(CliError::Config {
                pointer: "/model".into(),
                message: "missing model definition (`model` or `model_file`)".into(),
            })
        }
        (None, Some(file)) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(&file);
            let text = fs::read_to_string(&full).map_err(|e| io_err(&full, e))?;
            spec.model = Some(parse_json(&text, "/model")?);
        }
        (Some(_), None) => {}
    }
    Ok(spec)
}

/// A spec with its model compiled and grid built.
#[derive(Debug, Clone)]
pub struct Session {
    pub spec: RunSpec,
    pub model: SwitchingModel,
    pub grid: Grid,
    pub model_hash: String,
    pub spec_hash: String,
}

impl Session {
    pub fn new(spec: RunSpec) -> Result<Session, CliError> {
        let text = spec.model.as_ref().ok_or_else(|| CliError::Config {
            pointer: "/model".into(),
            message: "missing model definition".into(),
        })?;
        let model = text.compile().map_err(|e| CliError::model("/model", e))?;
        let grid = Grid::for_model(&model, spec.grid.axes.clone(), spec.grid.steps, spec.grid.dt)?;
        let canonical = serde_json::to_string(&spec).expect("run spec serializes");
        Ok(Session {
            model_hash: model.fingerprint(),
            spec_hash: hex_digest(canonical.as_bytes()),
            spec,
            model,
            grid,
        })
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            scheme: self.spec.solve.scheme,
            tol: self.spec.solve.tol,
            max_passes: self.spec.solve.max_passes,
            max_outer: self.spec.solve.max_outer,
            ..SolveOptions::default()
        }
    }

    fn header(&self) -> Hashes {
        Hashes {
            model_hash: self.model_hash.clone(),
            spec_hash: self.spec_hash.clone(),
        }
    }

    fn centre(&self) -> Vec<f64> {
        let d = self.grid.domain();
        d.lo.iter().zip(&d.hi).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hashes {
    pub model_hash: String,
    pub spec_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    pub report: ValidationReport,
}

pub fn run_validate(s: &Session) -> Result<ValidateOutput, CliError> {
    let v = &s.spec.validate;
    let domain = v.domain.clone().unwrap_or_else(|| s.grid.domain());
    let report = validate(&s.model, &domain, v.samples, v.seed).map_err(|e| CliError::model("/model", e))?;
    Ok(ValidateOutput { hashes: s.header(), report })
}

fn gate(s: &Session, force: bool) -> Result<(), CliError> {
    let out = run_validate(s)?;
    for c in &out.report.checks {
        match c.status {
            crate::model::CheckStatus::Warn => eprintln!("warning: {}: {}", c.name, c.detail),
            crate::model::CheckStatus::Fail if force => eprintln!("forced past failed check {}: {}", c.name, c.detail),
            _ => {}
        }
    }
    if out.report.has_failures() && !force {
        let failed = out
            .report
            .checks
            .iter()
            .filter(|c| c.status == crate::model::CheckStatus::Fail)
            .map(|c| c.name.clone())
            .collect();
        return Err(CliError::ValidationFailed { failed });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    pub nodes: usize,
    pub levels: usize,
    pub dt: f64,
    pub diagnostics: SolveDiagnostics,
}

pub fn run_solve(s: &Session) -> Result<(ValueField, SolveOutput), CliError> {
    let (field, diagnostics) = solve(&s.model, &s.grid, &s.solve_options())?;
    let out = SolveOutput {
        hashes: s.header(),
        nodes: s.grid.node_count(),
        levels: field.levels(),
        dt: s.grid.dt(),
        diagnostics,
    };
    Ok((field, out))
}

fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn coord_headers(dim: usize) -> impl Iterator<Item = String> {
    (1..=dim).map(|j| format!("x{j}"))
}

fn write_csv(path: &Path, hashes: &Hashes, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(file, "# model_hash={} spec_hash={}", hashes.model_hash, hashes.spec_hash).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes one row per (mode, time index, node), modes one-based.
pub fn write_values(path: &Path, field: &ValueField, hashes: &Hashes) -> Result<(), CliError> {
    let grid = field.grid();
    let mut header = vec!["mode".to_string(), "time_index".to_string()];
    header.extend(coord_headers(grid.dim()));
    header.push("value".into());
    let rows = (0..field.modes()).flat_map(move |i| {
        (0..field.levels()).flat_map(move |n| {
            (0..grid.node_count()).map(move |node| {
                let mut row = vec![(i + 1).to_string(), n.to_string()];
                row.extend(grid.coords(node).into_iter().map(fmt_num));
                row.push(fmt_num(field.value(n, i, node)));
                row
            })
        })
    });
    write_csv(path, hashes, header, rows)
}

/// Reads a values file written by [`write_values`] for the same model and grid.
pub fn read_values(path: &Path, model: &SwitchingModel, grid: &Grid) -> Result<ValueField, CliError> {
    let bad = |message: String| CliError::Values {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| io_err(path, e))?;
    let hash = first
        .trim()
        .strip_prefix("# model_hash=")
        .and_then(|rest| rest.split_whitespace().next())
        .ok_or_else(|| bad("missing `# model_hash=` header line".into()))?;
    let fingerprint = model.fingerprint();
    if hash != fingerprint {
        return Err(bad(format!("written for model {hash}, config model is {fingerprint}")));
    }
    let m = model.modes();
    let levels = if grid.is_finite() { grid.decision_levels() + 1 } else { 1 };
    let nodes = grid.node_count();
    let dim = grid.dim();
    let mut values = vec![vec![vec![f64::NAN; nodes]; m]; levels];
    let mut expected = (0..m).flat_map(|i| (0..levels).flat_map(move |n| (0..nodes).map(move |node| (i, n, node))));
    let mut rdr = csv::Reader::from_reader(reader);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let (i, n, node) = expected.next().ok_or_else(|| bad("more rows than the grid has cells".into()))?;
        let field = |k: usize| rec.get(k).ok_or_else(|| bad(format!("row {}: too few columns", line + 1)));
        let num = |k: usize| -> Result<f64, CliError> { field(k)?.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", line + 1))) };
        let mode: usize = field(0)?.parse().map_err(|_| bad(format!("row {}: bad mode", line + 1)))?;
        let time: usize = field(1)?.parse().map_err(|_| bad(format!("row {}: bad time index", line + 1)))?;
        if mode != i + 1 || time != n {
            return Err(bad(format!("row {}: expected mode {}, time index {n}", line + 1, i + 1)));
        }
        let x = grid.coords(node);
        for (j, xj) in x.iter().enumerate() {
            if (num(2 + j)? - xj).abs() > 1e-9 * (1.0 + xj.abs()) {
                return Err(bad(format!("row {}: coordinates do not match the grid", line + 1)));
            }
        }
        values[n][i][node] = num(2 + dim)?;
    }
    if expected.next().is_some() {
        return Err(bad("fewer rows than the grid has cells".into()));
    }
    ValueField::from_parts(grid.clone(), values, fingerprint).map_err(CliError::from)
}

fn field_for(s: &Session, values: Option<&Path>) -> Result<ValueField, CliError> {
    match values {
        Some(p) => read_values(p, &s.model, &s.grid),
        None => Ok(run_solve(s)?.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    /// `max |min(V − MV, V − C)|` over non-terminal cells.
    pub residual: f64,
    /// `min (V_i + F_i)`.
    pub min_default_gap: f64,
    /// `min (V_i + g_ij − V_j)` over `i ≠ j`.
    pub min_switch_gap: f64,
    /// `max |V(T, ·)|`; absent for an infinite horizon.
    pub terminal_max_abs: Option<f64>,
    pub residual_tolerance: f64,
    pub obstacle_tolerance: f64,
    pub pass: bool,
}

pub const RESIDUAL_TOL: f64 = 1e-12;
pub const OBSTACLE_TOL: f64 = 1e-9;

pub fn run_check(s: &Session, field: &ValueField) -> Result<CheckOutput, CliError> {
    let residual = check_complementarity(field, &s.model)?;
    let grid = field.grid();
    let m = field.modes();
    let mut min_default_gap = f64::INFINITY;
    let mut min_switch_gap = f64::INFINITY;
    for n in 0..grid.decision_levels() {
        let data = LevelData::tabulate(&s.model, grid, n)?;
        for node in 0..grid.node_count() {
            for i in 0..m {
                let vi = field.value(n, i, node);
                min_default_gap = min_default_gap.min(vi + data.default_cost[i][node]);
                for j in (0..m).filter(|&j| j != i) {
                    min_switch_gap = min_switch_gap.min(vi + data.switching_cost[i][j][node] - field.value(n, j, node));
                }
            }
        }
    }
    let terminal_max_abs = field
        .is_finite()
        .then(|| field.level(field.levels() - 1).iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())));
    // An infinite-horizon field is an iterate, exact only up to the solve tolerance.
    let residual_tolerance = if field.is_finite() { RESIDUAL_TOL } else { s.spec.solve.tol };
    let pass = residual <= residual_tolerance
        && min_default_gap >= -OBSTACLE_TOL
        && (m == 1 || min_switch_gap >= -OBSTACLE_TOL)
        && terminal_max_abs.is_none_or(|t| t == 0.0);
    Ok(CheckOutput {
        hashes: s.header(),
        residual,
        min_default_gap,
        min_switch_gap,
        terminal_max_abs,
        residual_tolerance,
        obstacle_tolerance: OBSTACLE_TOL,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    pub tol_action: f64,
    pub tie: TieBreak,
    pub continue_cells: usize,
    pub default_cells: usize,
    pub switch_cells: usize,
}

fn regions_for(s: &Session, field: &ValueField) -> Result<crate::strategy::StrategyRegions, CliError> {
    Ok(extract(field, &s.model, s.spec.strategy.tol_action, s.spec.strategy.tie)?)
}

pub fn write_regions(path: &Path, grid: &Grid, table: &crate::policy::ActionTable, hashes: &Hashes) -> Result<(), CliError> {
    let mut header = vec!["mode".to_string(), "time_index".to_string()];
    header.extend(coord_headers(grid.dim()));
    header.push("action".into());
    let rows = (0..table.modes()).flat_map(move |i| {
        (0..table.levels()).flat_map(move |n| {
            (0..grid.node_count()).map(move |node| {
                let mut row = vec![(i + 1).to_string(), n.to_string()];
                row.extend(grid.coords(node).into_iter().map(fmt_num));
                row.push(table.get(n, i, node).to_string());
                row
            })
        })
    });
    write_csv(path, hashes, header, rows)
}

pub fn run_extract(s: &Session, field: &ValueField) -> Result<(crate::strategy::StrategyRegions, ExtractOutput), CliError> {
    let regions = regions_for(s, field)?;
    let t = &regions.table;
    let mut counts = [0usize; 3];
    for n in 0..t.levels() {
        for i in 0..t.modes() {
            for node in 0..t.nodes() {
                counts[match t.get(n, i, node) {
                    Action::Continue => 0,
                    Action::Default => 1,
                    Action::Switch(_) => 2,
                }] += 1;
            }
        }
    }
    let out = ExtractOutput {
        hashes: s.header(),
        tol_action: regions.tol_action,
        tie: regions.tie,
        continue_cells: counts[0],
        default_cells: counts[1],
        switch_cells: counts[2],
    };
    Ok((regions, out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEstimate {
    pub index: usize,
    pub estimate: MCEstimate,
    /// `mean ≤ V + 3·SE`.
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    pub x0: Vec<f64>,
    /// Coordinates of the grid node nearest to `x0`.
    pub node_x: Vec<f64>,
    /// One-based start mode.
    pub mode: usize,
    pub dt_sim: f64,
    /// Grid value `V_i(0, node_x)`.
    pub value: f64,
    pub estimate: MCEstimate,
    /// `|mean − value|`.
    pub abs_error: f64,
    pub random_policies: Vec<PolicyEstimate>,
}

/// Stream reserved for drawing random policies, distinct from every path stream.
const POLICY_STREAM: u64 = u64::MAX;

pub fn run_simulate(s: &Session, field: &ValueField) -> Result<SimulateOutput, CliError> {
    let sim = &s.spec.simulate;
    if sim.mode == 0 || sim.mode > s.model.modes() {
        return Err(CliError::Config {
            pointer: "/simulate/mode".into(),
            message: format!("mode must be in 1..={}", s.model.modes()),
        });
    }
    let i0 = sim.mode - 1;
    let x0 = sim.x0.clone().unwrap_or_else(|| s.centre());
    let regions = regions_for(s, field)?;
    let cfg = SimConfig {
        dt_sim: sim.dt_sim.unwrap_or(s.grid.dt()),
        truncation_steps: sim.truncation,
    };
    let (node, _) = s.grid.nearest_node(&x0);
    let value = field.value(0, i0, node);
    let estimate = estimate_j(&s.model, &regions.table, &s.grid, &x0, i0, sim.paths, &cfg, sim.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(POLICY_STREAM);
    let mut random_policies = Vec::with_capacity(sim.random_policies);
    for index in 0..sim.random_policies {
        let policy = random_policy(s.grid.decision_levels(), s.model.modes(), s.grid.node_count(), &mut rng);
        let est = estimate_j(&s.model, &policy, &s.grid, &x0, i0, sim.paths, &cfg, sim.seed)?;
        random_policies.push(PolicyEstimate {
            index,
            within_bound: est.mean <= value + 3.0 * est.std_err,
            estimate: est,
        });
    }
    Ok(SimulateOutput {
        hashes: s.header(),
        node_x: s.grid.coords(node),
        x0,
        mode: sim.mode,
        dt_sim: cfg.dt_sim,
        value,
        abs_error: (estimate.mean - value).abs(),
        estimate,
        random_policies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    pub cells: usize,
    pub policies_evaluated: u64,
    pub truncation_bound: Option<f64>,
    /// `max |oracle best − solver value|` over start cells at time 0.
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn run_oracle(s: &Session) -> Result<OracleOutput, CliError> {
    let (field, _) = run_solve(s)?;
    let truncation = match (s.model.horizon(), s.spec.oracle.truncation) {
        (Horizon::Finite { .. }, _) => 0,
        (Horizon::Infinite { discount_rate }, None) => {
            let beta = 1.0 / (1.0 + discount_rate * s.grid.dt());
            (1e-10f64.ln() / beta.ln()).ceil() as usize
        }
        (Horizon::Infinite { .. }, Some(n)) => n,
    };
    let problem = ChainProblem::new(&s.model, &s.grid, truncation)?;
    let result = enumerate(&problem, &OracleLimits::default())?;
    let mut max_discrepancy = 0.0f64;
    for (i, row) in result.best.iter().enumerate() {
        for (node, best) in row.iter().enumerate() {
            max_discrepancy = max_discrepancy.max((best - field.value(0, i, node)).abs());
        }
    }
    let tolerance = match result.truncation_bound {
        None => RESIDUAL_TOL,
        Some(b) => b + 100.0 * s.spec.solve.tol,
    };
    Ok(OracleOutput {
        hashes: s.header(),
        cells: problem.cells(),
        policies_evaluated: result.policies_evaluated,
        truncation_bound: result.truncation_bound,
        pass: max_discrepancy <= tolerance,
        max_discrepancy,
        tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolution {
    pub nodes: Vec<usize>,
    pub dt: f64,
    /// Largest spacing over axes.
    pub dx: f64,
    /// `dx + sqrt(dt)`.
    pub h: f64,
    /// `V_i(0, x0)` per mode.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareOutput {
    #[serde(flatten)]
    pub hashes: Hashes,
    pub factor: usize,
    pub x0: Vec<f64>,
    pub coarse: Resolution,
    pub fine: Resolution,
    /// `|V_coarse − V_fine|` per mode.
    pub differences: Vec<f64>,
    /// `|V_coarse − V_fine| / (h_coarse − h_fine)` per mode.
    pub constants: Vec<f64>,
    pub max_constant: f64,
}

fn resolution(s: &Session, grid: &Grid, x: &[f64]) -> Result<Resolution, CliError> {
    let (field, _) = solve(&s.model, grid, &s.solve_options())?;
    let (node, _) = grid.nearest_node(x);
    let dx = grid.axes().iter().map(Axis::spacing).fold(0.0, f64::max);
    Ok(Resolution {
        nodes: grid.axes().iter().map(|a| a.nodes).collect(),
        dt: grid.dt(),
        dx,
        h: dx + grid.dt().sqrt(),
        values: (0..s.model.modes()).map(|i| field.value(0, i, node)).collect(),
    })
}

pub fn run_compare(s: &Session) -> Result<CompareOutput, CliError> {
    let factor = s.spec.compare.factor;
    if factor < 2 {
        return Err(CliError::Config {
            pointer: "/compare/factor".into(),
            message: "refinement factor must be at least 2".into(),
        });
    }
    let requested = s.spec.compare.x0.clone().unwrap_or_else(|| s.centre());
    let x0 = s.grid.coords(s.grid.nearest_node(&requested).0);
    let fine_grid = s.grid.refined(factor)?;
    let coarse = resolution(s, &s.grid, &x0)?;
    let fine = resolution(s, &fine_grid, &x0)?;
    let differences: Vec<f64> = coarse.values.iter().zip(&fine.values).map(|(c, f)| (c - f).abs()).collect();
    let constants: Vec<f64> = differences.iter().map(|d| d / (coarse.h - fine.h)).collect();
    Ok(CompareOutput {
        hashes: s.header(),
        factor,
        x0,
        max_constant: constants.iter().copied().fold(0.0, f64::max),
        coarse,
        fine,
        differences,
        constants,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Runs one subcommand, writing outputs into `cli.out`. Returns the paths written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let config = cli.config.as_deref().ok_or_else(|| CliError::Usage("--config FILE is required".into()))?;
    let mut spec = load_config(config)?;
    if let Some(seed) = cli.seed {
        spec.simulate.seed = seed;
        spec.validate.seed = seed;
    }
    if let Some(scheme) = cli.scheme {
        spec.solve.scheme = scheme;
    }
    let s = Session::new(spec)?;
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let out = |name: &str| cli.out.join(name);
    let mut written = Vec::new();
    if cli.command != Command::Validate {
        gate(&s, cli.force)?;
    }
    match cli.command {
        Command::Validate => {
            let report = run_validate(&s)?;
            write_json(&out("validation.json"), &report)?;
            written.push(out("validation.json"));
        }
        Command::Solve => {
            let (field, report) = run_solve(&s)?;
            write_values(&out("values.csv"), &field, &s.header())?;
            write_json(&out("solve.json"), &report)?;
            written.extend([out("values.csv"), out("solve.json")]);
        }
        Command::Check => {
            let field = field_for(&s, cli.values.as_deref())?;
            write_json(&out("check.json"), &run_check(&s, &field)?)?;
            written.push(out("check.json"));
        }
        Command::Extract => {
            let field = field_for(&s, cli.values.as_deref())?;
            let (regions, report) = run_extract(&s, &field)?;
            write_regions(&out("regions.csv"), &s.grid, &regions.table, &s.header())?;
            write_json(&out("extract.json"), &report)?;
            written.extend([out("regions.csv"), out("extract.json")]);
        }
        Command::Simulate => {
            let field = field_for(&s, cli.values.as_deref())?;
            write_json(&out("simulate.json"), &run_simulate(&s, &field)?)?;
            written.push(out("simulate.json"));
        }
        Command::Oracle => {
            write_json(&out("oracle.json"), &run_oracle(&s)?)?;
            written.push(out("oracle.json"));
        }
        Command::Compare => {
            write_json(&out("compare.json"), &run_compare(&s)?)?;
            written.push(out("compare.json"));
        }
    }
    Ok(written)
}

/// Applies `SWITCHGRID_THREADS` (0 or unset = automatic).
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SWITCHGRID_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("SWITCHGRID_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|()| run(&cli)) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
          "model": {
            "modes": 1, "state_dim": 1, "noise_dim": 1,
            "horizon": {"type": "finite", "T": 1.0},
            "drift": ["0"], "volatility": [["1"]],
            "profit": ["1"], "switching_cost": [[null]], "default_cost": ["10"],
            "alpha": 0.5
          },
          "grid": {"axes": [{"lo": -5, "hi": 5, "nodes": 21}], "steps": 10}
        }"#
        .to_string()
    }

    fn load_str(text: &str) -> Result<RunSpec, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, text).unwrap();
        load_config(&p)
    }

    #[test]
    fn defaults_are_filled() {
        let spec = load_str(&minimal()).unwrap();
        assert_eq!(spec.solve, SolveSpec::default());
        assert_eq!(spec.strategy.tol_action, 1e-7);
        assert_eq!(spec.compare.factor, 2);
        assert_eq!(spec.model.as_ref().unwrap().growth_exponent, 1);
    }

    #[test]
    fn schema_errors_carry_pointers() {
        let bad = minimal().replace("\"nodes\": 21", "\"nodes\": 21, \"extra\": 1");
        match load_str(&bad) {
            Err(CliError::Config { pointer, .. }) => assert_eq!(pointer, "/grid/axes/0/extra"),
            other => panic!("{other:?}"),
        }
        let bad = minimal().replace("\"drift\": [\"0\"]", "\"drift\": [0]");
        match load_str(&bad) {
            Err(CliError::Config { pointer, .. }) => assert_eq!(pointer, "/model/drift/0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_errors_name_the_field() {
        let zero = minimal().replace("\"modes\": 1", "\"modes\": 0");
        let err = Session::new(load_str(&zero).unwrap()).unwrap_err();
        assert_eq!(err.kind(), "model");
        assert!(err.pointer().unwrap().starts_with("/model/modes"));

        let x9 = minimal().replace("\"profit\": [\"1\"]", "\"profit\": [\"x9\"]");
        let err = Session::new(load_str(&x9).unwrap()).unwrap_err();
        assert_eq!(err.pointer(), Some("/model/profit/0"));
        assert!(err.to_json().contains("\"pointer\":\"/model/profit/0\""));
    }

    #[test]
    fn values_round_trip_exactly() {
        let s = Session::new(load_str(&minimal()).unwrap()).unwrap();
        let (field, _) = run_solve(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("values.csv");
        write_values(&p, &field, &s.header()).unwrap();
        let back = read_values(&p, &s.model, &s.grid).unwrap();
        assert_eq!(back, field);

        let other = minimal().replace("\"profit\": [\"1\"]", "\"profit\": [\"2\"]");
        let s2 = Session::new(load_str(&other).unwrap()).unwrap();
        assert!(matches!(read_values(&p, &s2.model, &s2.grid), Err(CliError::Values { .. })));
    }

    #[test]
    fn spec_hash_tracks_overrides() {
        let a = Session::new(load_str(&minimal()).unwrap()).unwrap();
        let mut spec = load_str(&minimal()).unwrap();
        spec.simulate.seed = 9;
        let b = Session::new(spec).unwrap();
        assert_eq!(a.model_hash, b.model_hash);
        assert_ne!(a.spec_hash, b.spec_hash);
    }
}
