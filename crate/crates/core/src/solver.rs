//! Discrete value functions of the switching system.
//!
//! Finite horizon: backward induction from `V[·][N] = 0`. At each level the
//! continuation `C_i = ψ_i Δt + E[V_i(next)]` is computed and the modes are
//! coupled through the obstacle
//! `V_i = max(C_i, −F_i, max_{j≠i}(−g_ij + V_j))`. [`Scheme::Coupled`]
//! solves that fixed point at every level directly; [`Scheme::Picard`] runs
//! full backward passes where pass `p` takes its obstacle from pass `p−1`,
//! starting from single-mode stopping against `−F_i`.
//!
//! Infinite horizon: each outer pass solves `m` decoupled stopping problems
//! `V_i = max(O_i, ψ_i Δt + β E[V_i])` by value iteration, with the obstacle
//! `O_i` frozen from the previous pass. Iterates increase monotonically from
//! `−F` (or decrease from the upper bound `max|ψ|(1 + rΔt)/r`).

use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::chain::{ChainApprox, ChainError, Chains, Grid};
use crate::model::{obstacle_value, Horizon, ModelError, SwitchingModel};

/// Slack allowed on the pass-to-pass monotonicity checks.
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Coupled,
    Picard,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coupled" => Ok(Scheme::Coupled),
            "picard" => Ok(Scheme::Picard),
            other => Err(format!("unknown scheme `{other}` (expected coupled or picard)")),
        }
    }
}

/// Starting point of the infinite-horizon iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum Initialization {
    /// `V ≡ −F`; iterates increase.
    #[default]
    DefaultCost,
    /// `V ≡ max|ψ|(1 + rΔt)/r`; iterates decrease.
    UpperBound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub scheme: Scheme,
    pub tol: f64,
    /// Cap on PICARD backward passes.
    pub max_passes: usize,
    /// Cap on infinite-horizon outer passes.
    pub max_outer: usize,
    /// Cap on value-iteration sweeps inside one outer pass.
    pub max_inner: usize,
    pub init: Initialization,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            scheme: Scheme::Coupled,
            tol: 1e-8,
            max_passes: 10_000,
            max_outer: 10_000,
            max_inner: 50_000_000,
            init: Initialization::DefaultCost,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite {what} for mode {mode} at level {level}, node {node}")]
    NonFinite {
        what: &'static str,
        mode: usize,
        level: usize,
        node: usize,
    },
    #[error("coupled obstacle did not settle within {modes} iterations at level {level}, node {node}; switching costs must stay positive")]
    SwitchCycle { level: usize, node: usize, modes: usize },
    #[error("{stage} did not converge within {passes} passes (last change {change:e})")]
    NoConvergence {
        stage: &'static str,
        passes: usize,
        change: f64,
    },
}

/// Profit, default and switching costs tabulated on the nodes of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelData {
    /// `[mode][node]`
    pub profit: Vec<Vec<f64>>,
    /// `[mode][node]`
    pub default_cost: Vec<Vec<f64>>,
    /// `[from][to][node]`; the diagonal holds NaN.
    pub switching_cost: Vec<Vec<Vec<f64>>>,
}

impl LevelData {
    pub fn tabulate(model: &SwitchingModel, grid: &Grid, level: usize) -> Result<LevelData, SolveError> {
        let m = model.modes();
        let t = grid.time_at(level);
        let nodes = grid.node_count();
        let mut profit = vec![vec![0.0; nodes]; m];
        let mut default_cost = vec![vec![0.0; nodes]; m];
        let mut switching_cost = vec![vec![vec![f64::NAN; nodes]; m]; m];
        for node in 0..nodes {
            let x = grid.coords(node);
            for i in 0..m {
                let p = model.profit(i, t, &x);
                let f = model.default_cost(i, t, &x);
                if !p.is_finite() {
                    return Err(SolveError::NonFinite { what: "profit", mode: i, level, node });
                }
                if !f.is_finite() {
                    return Err(SolveError::NonFinite { what: "default cost", mode: i, level, node });
                }
                profit[i][node] = p;
                default_cost[i][node] = f;
                for j in (0..m).filter(|&j| j != i) {
                    let g = model.switching_cost(i, j, t, &x);
                    if !g.is_finite() {
                        return Err(SolveError::NonFinite { what: "switching cost", mode: i, level, node });
                    }
                    switching_cost[i][j][node] = g;
                }
            }
        }
        Ok(LevelData {
            profit,
            default_cost,
            switching_cost,
        })
    }

    pub fn modes(&self) -> usize {
        self.profit.len()
    }

    /// `g_i·` at one node, NaN in slot `i`.
    pub fn switching_row(&self, i: usize, node: usize) -> Vec<f64> {
        self.switching_cost[i].iter().map(|g| g[node]).collect()
    }

    /// `M_i V` at one node; `v[j]` is mode `j`'s value there.
    pub fn obstacle(&self, i: usize, node: usize, v: &[f64]) -> Result<f64, SolveError> {
        Ok(obstacle_value(i, v, &self.switching_row(i, node), self.default_cost[i][node])?)
    }
}

/// Per-level tables; time-homogeneous models share one.
pub(crate) struct Tables {
    levels: Vec<LevelData>,
}

impl Tables {
    pub(crate) fn build(model: &SwitchingModel, grid: &Grid) -> Result<Tables, SolveError> {
        let count = if model.time_homogeneous() { 1 } else { grid.decision_levels() };
        let levels = (0..count)
            .map(|n| LevelData::tabulate(model, grid, n))
            .collect::<Result<_, _>>()?;
        Ok(Tables { levels })
    }

    pub(crate) fn at(&self, level: usize) -> &LevelData {
        &self.levels[level.min(self.levels.len() - 1)]
    }
}

/// Fixed point of `V_i = max(C_i, −F_i, max_{j≠i}(−g_ij + V_j))` at one node.
///
/// `switching[i][j]` is `g_ij`. Returns the values and the number of
/// iterations that changed something (at most `m − 1` when costs are
/// positive). Fails if the iterate still moves after `m` rounds.
pub fn coupled_fixed_point(contin: &[f64], switching: &[Vec<f64>], default_cost: &[f64]) -> Result<(Vec<f64>, usize), usize> {
    let m = contin.len();
    let mut v: Vec<f64> = (0..m).map(|i| contin[i].max(-default_cost[i])).collect();
    let mut next = v.clone();
    for round in 0..m {
        let mut changed = false;
        for i in 0..m {
            let mut best = v[i];
            for j in (0..m).filter(|&j| j != i) {
                let candidate = v[j] - switching[i][j];
                if candidate > best {
                    best = candidate;
                }
            }
            changed |= best != v[i];
            next[i] = best;
        }
        if !changed {
            return Ok((v, round));
        }
        std::mem::swap(&mut v, &mut next);
    }
    Err(m)
}

/// Applies [`coupled_fixed_point`] at every node. `contin` is `[mode][node]`.
pub fn coupled_step(contin: &[Vec<f64>], data: &LevelData, level: usize) -> Result<Vec<Vec<f64>>, SolveError> {
    let m = contin.len();
    let nodes = contin.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; nodes]; m];
    let mut c = vec![0.0; m];
    let mut f = vec![0.0; m];
    let mut g = vec![vec![f64::NAN; m]; m];
    for node in 0..nodes {
        for i in 0..m {
            c[i] = contin[i][node];
            f[i] = data.default_cost[i][node];
            for j in 0..m {
                g[i][j] = data.switching_cost[i][j][node];
            }
        }
        let (v, _) = coupled_fixed_point(&c, &g, &f).map_err(|modes| SolveError::SwitchCycle { level, node, modes })?;
        for i in 0..m {
            out[i][node] = v[i];
        }
    }
    Ok(out)
}

/// Run statistics. Wall time is informational and never written to files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub scheme: Scheme,
    /// PICARD passes or infinite-horizon outer passes; 1 for COUPLED.
    pub outer_iterations: usize,
    /// Total value-iteration sweeps (infinite horizon).
    pub inner_iterations: usize,
    /// `max |min(V − MV, V − C)|` over all non-terminal points.
    pub max_residual: f64,
    /// Minimum over points of `V^(p+1) − V^(p)` for each pass transition.
    pub pass_min_increments: Vec<f64>,
    /// Pass transitions whose minimum increment fell below `−1e−12`.
    pub monotonicity_violations: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Per-mode value arrays over the grid.
///
/// Finite horizon: levels `0..=N` with level `N` identically zero.
/// Infinite horizon: a single stationary level.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Grid,
    /// `[level][mode][node]`
    values: Vec<Vec<Vec<f64>>>,
    model_fingerprint: String,
}

impl ValueField {
    pub fn from_parts(grid: Grid, values: Vec<Vec<Vec<f64>>>, model_fingerprint: String) -> Result<ValueField, SolveError> {
        let levels = if grid.is_finite() { grid.decision_levels() + 1 } else { 1 };
        if values.len() != levels {
            return Err(SolveError::Mismatch(format!("expected {levels} levels, found {}", values.len())));
        }
        let m = values[0].len();
        if values.iter().any(|l| l.len() != m || l.iter().any(|v| v.len() != grid.node_count())) {
            return Err(SolveError::Mismatch("ragged value arrays".into()));
        }
        Ok(ValueField {
            grid,
            values,
            model_fingerprint,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn is_finite(&self) -> bool {
        self.grid.is_finite()
    }

    pub fn levels(&self) -> usize {
        self.values.len()
    }

    pub fn modes(&self) -> usize {
        self.values[0].len()
    }

    /// All modes at one level, `[mode][node]`.
    pub fn level(&self, n: usize) -> &[Vec<f64>] {
        &self.values[n]
    }

    pub fn mode(&self, level: usize, mode: usize) -> &[f64] {
        &self.values[level][mode]
    }

    pub fn value(&self, level: usize, mode: usize, node: usize) -> f64 {
        self.values[level][mode][node]
    }

    /// Values of every mode at one cell.
    pub fn at(&self, level: usize, node: usize) -> Vec<f64> {
        self.values[level].iter().map(|v| v[node]).collect()
    }

    pub fn values_mut(&mut self) -> &mut Vec<Vec<Vec<f64>>> {
        &mut self.values
    }

    /// Largest absolute difference to another field on the same grid.
    pub fn max_abs_diff(&self, other: &ValueField) -> f64 {
        sup_diff(&self.values, &other.values)
    }
}

fn sup_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn min_increment(new: &[Vec<Vec<f64>>], old: &[Vec<Vec<f64>>]) -> f64 {
    new.iter()
        .flatten()
        .flatten()
        .zip(old.iter().flatten().flatten())
        .map(|(x, y)| x - y)
        .fold(f64::INFINITY, f64::min)
}

fn check_grid(model: &SwitchingModel, grid: &Grid) -> Result<(), SolveError> {
    if grid.dim() != model.state_dim() {
        return Err(SolveError::Mismatch(format!(
            "grid has {} axes, model state dimension is {}",
            grid.dim(),
            model.state_dim()
        )));
    }
    match (model.horizon(), grid.time()) {
        (Horizon::Finite { maturity }, crate::chain::TimeGrid::Finite { maturity: gm, .. }) if maturity == gm => Ok(()),
        (Horizon::Infinite { .. }, crate::chain::TimeGrid::Infinite { .. }) => Ok(()),
        _ => Err(SolveError::Mismatch("grid time axis does not match the model horizon".into())),
    }
}

fn continuation(chain: &ChainApprox, data: &LevelData, next: &[Vec<f64>], level: usize) -> Result<Vec<Vec<f64>>, SolveError> {
    let dt = chain.dt();
    let beta = chain.discount();
    next.iter()
        .enumerate()
        .map(|(i, v)| {
            let e = chain.expected_next(v);
            e.iter()
                .zip(&data.profit[i])
                .enumerate()
                .map(|(node, (&e, &p))| {
                    let c = match beta {
                        Some(b) => p * dt + b * e,
                        None => p * dt + e,
                    };
                    if c.is_finite() {
                        Ok(c)
                    } else {
                        Err(SolveError::NonFinite { what: "continuation value", mode: i, level, node })
                    }
                })
                .collect()
        })
        .collect()
}

/// Finite-horizon solve.
pub fn solve_finite(model: &SwitchingModel, grid: &Grid, opts: &SolveOptions) -> Result<(ValueField, SolveDiagnostics), SolveError> {
    let start = Instant::now();
    if !model.horizon().is_finite() {
        return Err(SolveError::Mismatch("solve_finite needs a finite-horizon model".into()));
    }
    check_grid(model, grid)?;
    let chains = Chains::build(model, grid)?;
    let tables = Tables::build(model, grid)?;
    let (m, nodes, n_steps) = (model.modes(), grid.node_count(), grid.decision_levels());

    let backward = |obstacle_from: Option<&Vec<Vec<Vec<f64>>>>| -> Result<Vec<Vec<Vec<f64>>>, SolveError> {
        let mut values = vec![vec![vec![0.0; nodes]; m]; n_steps + 1];
        for n in (0..n_steps).rev() {
            let data = tables.at(n);
            let contin = continuation(chains.at(n), data, &values[n + 1], n)?;
            values[n] = match (opts.scheme, obstacle_from) {
                (Scheme::Coupled, _) => coupled_step(&contin, data, n)?,
                (Scheme::Picard, None) => (0..m)
                    .map(|i| {
                        contin[i]
                            .iter()
                            .zip(&data.default_cost[i])
                            .map(|(&c, &f)| c.max(-f))
                            .collect()
                    })
                    .collect(),
                (Scheme::Picard, Some(prev)) => {
                    let mut level = vec![vec![0.0; nodes]; m];
                    for node in 0..nodes {
                        let frozen: Vec<f64> = prev[n].iter().map(|v| v[node]).collect();
                        for i in 0..m {
                            level[i][node] = contin[i][node].max(data.obstacle(i, node, &frozen)?);
                        }
                    }
                    level
                }
            };
        }
        Ok(values)
    };

    let mut diag = SolveDiagnostics {
        scheme: opts.scheme,
        outer_iterations: 1,
        inner_iterations: 0,
        max_residual: 0.0,
        pass_min_increments: Vec::new(),
        monotonicity_violations: 0,
        wall_time: Duration::ZERO,
    };
    let values = match opts.scheme {
        Scheme::Coupled => backward(None)?,
        Scheme::Picard => {
            let mut prev = backward(None)?;
            let mut passes = 1;
            loop {
                if passes >= opts.max_passes {
                    return Err(SolveError::NoConvergence {
                        stage: "PICARD",
                        passes,
                        change: f64::NAN,
                    });
                }
                let next = backward(Some(&prev))?;
                passes += 1;
                let inc = min_increment(&next, &prev);
                diag.pass_min_increments.push(inc);
                if inc < -MONOTONE_SLACK {
                    diag.monotonicity_violations += 1;
                }
                let change = sup_diff(&next, &prev);
                prev = next;
                if change <= opts.tol {
                    break;
                }
            }
            diag.outer_iterations = passes;
            prev
        }
    };
    let field = ValueField {
        grid: grid.clone(),
        values,
        model_fingerprint: model.fingerprint(),
    };
    diag.max_residual = residual_with(&field, &chains, &tables)?;
    diag.wall_time = start.elapsed();
    Ok((field, diag))
}

/// `max|ψ| (1 + rΔt) / r` over the grid nodes.
pub fn infinite_upper_bound(model: &SwitchingModel, grid: &Grid) -> Result<f64, SolveError> {
    let Horizon::Infinite { discount_rate } = model.horizon() else {
        return Err(SolveError::Mismatch("upper bound needs an infinite-horizon model".into()));
    };
    let data = LevelData::tabulate(model, grid, 0)?;
    let max_psi = data.profit.iter().flatten().fold(0.0f64, |a, p| a.max(p.abs()));
    Ok(max_psi * (1.0 + discount_rate * grid.dt()) / discount_rate)
}

/// Infinite-horizon solve by the outer Picard iteration.
pub fn solve_infinite(model: &SwitchingModel, grid: &Grid, opts: &SolveOptions) -> Result<(ValueField, SolveDiagnostics), SolveError> {
    let start = Instant::now();
    if model.horizon().is_finite() {
        return Err(SolveError::Mismatch("solve_infinite needs an infinite-horizon model".into()));
    }
    if !model.time_homogeneous() {
        return Err(SolveError::Mismatch("infinite-horizon coefficients must not depend on t".into()));
    }
    check_grid(model, grid)?;
    let chains = Chains::build(model, grid)?;
    let tables = Tables::build(model, grid)?;
    let chain = chains.at(0);
    let data = tables.at(0);
    let beta = chain.discount().expect("infinite horizon has a discount");
    let (m, nodes) = (model.modes(), grid.node_count());
    let inner_tol = opts.tol / 10.0;
    // Stop value iteration once the contraction bound on the distance to the
    // fixed point, |ΔV| β/(1−β), is below the inner tolerance.
    let bound_factor = beta / (1.0 - beta);

    let obstacle_of = |frozen: Option<&Vec<Vec<f64>>>| -> Result<Vec<Vec<f64>>, SolveError> {
        let mut o = vec![vec![0.0; nodes]; m];
        for node in 0..nodes {
            match frozen {
                None => (0..m).for_each(|i| o[i][node] = -data.default_cost[i][node]),
                Some(prev) => {
                    let v: Vec<f64> = prev.iter().map(|p| p[node]).collect();
                    for i in 0..m {
                        o[i][node] = data.obstacle(i, node, &v)?;
                    }
                }
            }
        }
        Ok(o)
    };

    let mut inner_total = 0usize;
    let mut stop = |obstacle: &[Vec<f64>], init: Vec<Vec<f64>>| -> Result<Vec<Vec<f64>>, SolveError> {
        let mut out = Vec::with_capacity(m);
        let mut expected = vec![0.0; nodes];
        for (i, mut w) in init.into_iter().enumerate() {
            let mut sweeps = 0usize;
            loop {
                chain.expected_next_into(&w, &mut expected);
                let mut change = 0.0f64;
                for node in 0..nodes {
                    let c = data.profit[i][node] * chain.dt() + beta * expected[node];
                    let v = c.max(obstacle[i][node]);
                    if !v.is_finite() {
                        return Err(SolveError::NonFinite { what: "value", mode: i, level: 0, node });
                    }
                    change = change.max((v - w[node]).abs());
                    w[node] = v;
                }
                sweeps += 1;
                if change == 0.0 || change * bound_factor <= inner_tol {
                    break;
                }
                if sweeps >= opts.max_inner {
                    return Err(SolveError::NoConvergence {
                        stage: "value iteration",
                        passes: sweeps,
                        change,
                    });
                }
            }
            inner_total += sweeps;
            out.push(w);
        }
        Ok(out)
    };

    let (mut prev, mut current) = match opts.init {
        Initialization::DefaultCost => {
            let init: Vec<Vec<f64>> = data.default_cost.iter().map(|f| f.iter().map(|v| -v).collect()).collect();
            let first = stop(&obstacle_of(None)?, init.clone())?;
            (init, first)
        }
        Initialization::UpperBound => {
            let ub = infinite_upper_bound(model, grid)?;
            let init = vec![vec![ub; nodes]; m];
            let first = stop(&obstacle_of(Some(&init))?, init.clone())?;
            (init, first)
        }
    };

    let mut diag = SolveDiagnostics {
        scheme: Scheme::Picard,
        outer_iterations: 1,
        inner_iterations: 0,
        max_residual: 0.0,
        pass_min_increments: Vec::new(),
        monotonicity_violations: 0,
        wall_time: Duration::ZERO,
    };
    let sign = match opts.init {
        Initialization::DefaultCost => 1.0,
        Initialization::UpperBound => -1.0,
    };
    loop {
        let inc = sign * min_increment(&[current.clone()], &[prev.clone()]);
        diag.pass_min_increments.push(inc);
        if inc < -MONOTONE_SLACK {
            diag.monotonicity_violations += 1;
        }
        let change = sup_diff(&[current.clone()], &[prev.clone()]);
        if diag.outer_iterations > 1 && change <= opts.tol {
            break;
        }
        if diag.outer_iterations >= opts.max_outer {
            return Err(SolveError::NoConvergence {
                stage: "outer Picard",
                passes: diag.outer_iterations,
                change,
            });
        }
        let next = stop(&obstacle_of(Some(&current))?, current.clone())?;
        prev = std::mem::replace(&mut current, next);
        diag.outer_iterations += 1;
    }
    diag.inner_iterations = inner_total;
    let field = ValueField {
        grid: grid.clone(),
        values: vec![current],
        model_fingerprint: model.fingerprint(),
    };
    diag.max_residual = residual_with(&field, &chains, &tables)?;
    diag.wall_time = start.elapsed();
    Ok((field, diag))
}

/// Dispatches on the model horizon.
pub fn solve(model: &SwitchingModel, grid: &Grid, opts: &SolveOptions) -> Result<(ValueField, SolveDiagnostics), SolveError> {
    if model.horizon().is_finite() {
        solve_finite(model, grid, opts)
    } else {
        solve_infinite(model, grid, opts)
    }
}

/// `max |min(V_i − M_iV, V_i − C_i)|` over all non-terminal points.
pub fn check_complementarity(field: &ValueField, model: &SwitchingModel) -> Result<f64, SolveError> {
    if field.model_fingerprint != model.fingerprint() {
        return Err(SolveError::Mismatch("value field was computed for a different model".into()));
    }
    check_grid(model, &field.grid)?;
    let chains = Chains::build(model, &field.grid)?;
    let tables = Tables::build(model, &field.grid)?;
    residual_with(field, &chains, &tables)
}

fn residual_with(field: &ValueField, chains: &Chains, tables: &Tables) -> Result<f64, SolveError> {
    let m = field.modes();
    let nodes = field.grid.node_count();
    let decision_levels = field.grid.decision_levels();
    let mut worst = 0.0f64;
    for n in 0..decision_levels {
        let next = if field.is_finite() { &field.values[n + 1] } else { &field.values[0] };
        let data = tables.at(n);
        let contin = continuation(chains.at(n), data, next, n)?;
        for node in 0..nodes {
            let v = field.at(n, node);
            for i in 0..m {
                let obstacle = data.obstacle(i, node, &v)?;
                let r = (v[i] - obstacle).min(v[i] - contin[i][node]).abs();
                worst = worst.max(r);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{Axis, TimeGrid};
    use crate::model::tests::text;

    const NAN: f64 = f64::NAN;

    /// Best value over every switch chain without repeated modes.
    fn chain_oracle(c: &[f64], g: &[Vec<f64>], f: &[f64]) -> Vec<f64> {
        fn walk(i: usize, c: &[f64], g: &[Vec<f64>], f: &[f64], seen: &mut Vec<usize>) -> f64 {
            let mut best = c[i].max(-f[i]);
            for j in 0..c.len() {
                if !seen.contains(&j) {
                    seen.push(j);
                    best = best.max(-g[i][j] + walk(j, c, g, f, seen));
                    seen.pop();
                }
            }
            best
        }
        (0..c.len()).map(|i| walk(i, c, g, f, &mut vec![i])).collect()
    }

    #[test]
    fn coupled_fixed_point_examples() {
        let g2 = vec![vec![NAN, 0.1], vec![0.1, NAN]];
        let (v, _) = coupled_fixed_point(&[0.0, 1.0], &g2, &[10.0, 10.0]).unwrap();
        assert_eq!(v, vec![0.9, 1.0]);
        let (v, _) = coupled_fixed_point(&[0.0, 0.0], &g2, &[0.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);

        let g3 = vec![vec![NAN, 1.0, 3.0], vec![1.0, NAN, 1.0], vec![1.0, 1.0, NAN]];
        let c = [0.0, 0.0, 5.0];
        let f = [10.0, 10.0, 10.0];
        let (v, rounds) = coupled_fixed_point(&c, &g3, &f).unwrap();
        assert_eq!(v, chain_oracle(&c, &g3, &f));
        assert_eq!(v, vec![3.0, 4.0, 5.0]);
        assert_eq!(rounds, 2);
    }

    #[test]
    fn coupled_fixed_point_detects_free_cycles() {
        let g = vec![vec![NAN, -1.0], vec![-1.0, NAN]];
        assert_eq!(coupled_fixed_point(&[0.0, 0.0], &g, &[1.0, 1.0]), Err(2));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coupled_fixed_point_matches_chain_enumeration(
                m in 1usize..5,
                c in prop::collection::vec(-5.0f64..5.0, 4),
                f in prop::collection::vec(0.0f64..5.0, 4),
                g in prop::collection::vec(0.05f64..3.0, 16),
            ) {
                let g: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { NAN } else { g[i * 4 + j] }).collect()).collect();
                let (v, rounds) = coupled_fixed_point(&c[..m], &g, &f[..m]).unwrap();
                prop_assert!(rounds <= m.saturating_sub(1));
                let oracle = chain_oracle(&c[..m], &g, &f[..m]);
                for (a, b) in v.iter().zip(&oracle) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    fn finite_grid(nodes: usize, lo: f64, hi: f64, steps: usize) -> Grid {
        Grid::new(vec![Axis { lo, hi, nodes }], TimeGrid::Finite { maturity: 1.0, steps }).unwrap()
    }

    const FIN: Horizon = Horizon::Finite { maturity: 1.0 };

    #[test]
    fn single_mode_collects_the_horizon() {
        let model = text(1, FIN, &["1"], "1", &["10"], "1", "0").compile().unwrap();
        let grid = finite_grid(21, -2.0, 2.0, 200);
        let (field, diag) = solve_finite(&model, &grid, &SolveOptions::default()).unwrap();
        for node in 1..20 {
            assert!((field.value(0, 0, node) - 1.0).abs() < 1e-12);
        }
        assert!(diag.max_residual <= 1e-12);
        assert!(field.level(200).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_two_mode_example() {
        let model = text(2, FIN, &["0", "1"], "0.1", &["10", "10"], "0", "0").compile().unwrap();
        let grid = finite_grid(5, -1.0, 1.0, 10);
        for scheme in [Scheme::Coupled, Scheme::Picard] {
            let opts = SolveOptions { scheme, ..Default::default() };
            let (field, _) = solve_finite(&model, &grid, &opts).unwrap();
            for node in 0..5 {
                assert!((field.value(0, 0, node) - 0.9).abs() < 1e-12);
                assert!((field.value(0, 1, node) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_modes_are_identical() {
        let model = text(2, FIN, &["sin(3*x1) - t", "sin(3*x1) - t"], "0.2 + 0.1*x1^2", &["0.5", "0.5"], "0.7", "-x1")
            .compile()
            .unwrap();
        let grid = finite_grid(41, -2.0, 2.0, 100);
        let (field, _) = solve_finite(&model, &grid, &SolveOptions::default()).unwrap();
        for n in 0..field.levels() {
            assert_eq!(field.mode(n, 0), field.mode(n, 1));
        }
    }

    #[test]
    fn picard_matches_coupled_and_is_monotone() {
        let model = text(3, FIN, &["x1", "-x1", "0.3 - abs(x1)"], "0.2", &["0.5", "1", "0.2"], "0.6", "0")
            .compile()
            .unwrap();
        let grid = finite_grid(41, -3.0, 3.0, 50);
        let (coupled, cd) = solve_finite(&model, &grid, &SolveOptions::default()).unwrap();
        let opts = SolveOptions { scheme: Scheme::Picard, ..Default::default() };
        let (picard, pd) = solve_finite(&model, &grid, &opts).unwrap();
        assert!(coupled.max_abs_diff(&picard) <= 10.0 * opts.tol);
        assert_eq!(pd.monotonicity_violations, 0);
        assert!(pd.pass_min_increments.iter().all(|&d| d >= -MONOTONE_SLACK));
        assert!(pd.outer_iterations > 2);
        assert!(cd.max_residual <= 1e-12);
        assert!(pd.max_residual <= 1e-7);
    }

    #[test]
    fn corrupted_field_has_large_residual() {
        let model = text(2, FIN, &["x1", "-x1"], "0.3", &["1", "1"], "0.5", "0").compile().unwrap();
        let grid = finite_grid(21, -2.0, 2.0, 20);
        let (mut field, _) = solve_finite(&model, &grid, &SolveOptions::default()).unwrap();
        assert!(check_complementarity(&field, &model).unwrap() <= 1e-12);
        field.values_mut()[5][1][10] += 1.0;
        assert!(check_complementarity(&field, &model).unwrap() >= 0.5);
    }

    #[test]
    fn wrong_horizon_or_model_is_rejected() {
        let model = text(1, FIN, &["1"], "1", &["1"], "1", "0").compile().unwrap();
        let grid = Grid::new(vec![Axis { lo: -1.0, hi: 1.0, nodes: 5 }], TimeGrid::Infinite { dt: 0.01 }).unwrap();
        assert!(matches!(solve_finite(&model, &grid, &SolveOptions::default()), Err(SolveError::Mismatch(_))));
        let grid = finite_grid(5, -1.0, 1.0, 10);
        let (field, _) = solve_finite(&model, &grid, &SolveOptions::default()).unwrap();
        let other = text(1, FIN, &["2"], "1", &["1"], "1", "0").compile().unwrap();
        assert!(matches!(check_complementarity(&field, &other), Err(SolveError::Mismatch(_))));
    }

    #[test]
    fn nan_coefficients_are_located() {
        let model = text(1, FIN, &["log(x1)"], "1", &["1"], "0", "0").compile().unwrap();
        let grid = finite_grid(5, -1.0, 1.0, 10);
        match solve_finite(&model, &grid, &SolveOptions::default()) {
            Err(SolveError::NonFinite { what: "profit", mode: 0, node: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    fn infinite_grid(nodes: usize, dt: f64) -> Grid {
        Grid::new(vec![Axis { lo: -4.0, hi: 4.0, nodes }], TimeGrid::Infinite { dt }).unwrap()
    }

    #[test]
    fn infinite_single_mode_examples() {
        let inf = Horizon::Infinite { discount_rate: 0.1 };
        let model = text(1, inf, &["1"], "1", &["10"], "1", "0").compile().unwrap();
        let grid = infinite_grid(17, 0.01);
        let (field, diag) = solve_infinite(&model, &grid, &SolveOptions::default()).unwrap();
        let expected = 1.0 * (1.0 + 0.1 * 0.01) / 0.1;
        for node in 0..17 {
            assert!((field.value(0, 0, node) - expected).abs() < 1e-7);
        }
        assert!(diag.max_residual < 1e-7);

        let model = text(1, inf, &["-1"], "1", &["0"], "1", "0").compile().unwrap();
        let (field, _) = solve_infinite(&model, &grid, &SolveOptions::default()).unwrap();
        assert!(field.mode(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infinite_symmetric_and_uniqueness() {
        let inf = Horizon::Infinite { discount_rate: 0.5 };
        let mut t = text(2, inf, &["min(x1, 2)", "min(-x1, 2)"], "0.5", &["1", "1"], "0.3", "0");
        t.alpha = 2.0;
        let model = t.compile().unwrap();
        let grid = infinite_grid(41, 0.01);
        let (low, ld) = solve_infinite(&model, &grid, &SolveOptions::default()).unwrap();
        let opts = SolveOptions { init: Initialization::UpperBound, ..Default::default() };
        let (high, hd) = solve_infinite(&model, &grid, &opts).unwrap();
        assert!(low.max_abs_diff(&high) <= 1e-6, "{}", low.max_abs_diff(&high));
        assert_eq!(ld.monotonicity_violations, 0);
        assert_eq!(hd.monotonicity_violations, 0);
        // Mirror symmetry x -> -x swaps the modes.
        for node in 0..41 {
            let a = low.value(0, 0, node);
            let b = low.value(0, 1, 40 - node);
            assert!((a - b).abs() < 1e-7);
        }

        let sym = text(2, inf, &["1", "1"], "0.5", &["100", "100"], "0.3", "0");
        let model = ModelTextExt::alpha(sym, 2.0).compile().unwrap();
        let (field, _) = solve_infinite(&model, &grid, &SolveOptions::default()).unwrap();
        assert_eq!(field.mode(0, 0), field.mode(0, 1));
        assert!((field.value(0, 0, 20) - (1.0 + 0.005) / 0.5).abs() < 1e-6);
    }

    trait ModelTextExt {
        fn alpha(self, a: f64) -> Self;
    }

    impl ModelTextExt for crate::model::ModelText {
        fn alpha(mut self, a: f64) -> Self {
            self.alpha = a;
            self
        }
    }
}
