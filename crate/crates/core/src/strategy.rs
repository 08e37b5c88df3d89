//! Optimal strategy extraction and Monte Carlo verification.
//!
//! A cell is labelled CONTINUE while `V_i − M_iV > tol_action`. Otherwise the
//! obstacle is active and the label is the action attaining it: SWITCH(j*)
//! for the best switch target (smallest `j` on ties) or DEFAULT. Exact ties
//! between switching and defaulting go to DEFAULT unless
//! [`TieBreak::PreferSwitch`] is chosen.
//!
//! Paths are simulated with Euler–Maruyama. At each grid level the controller
//! looks up the label at the nearest node, so the simulated policy is exactly
//! the extracted discrete one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Grid;
use crate::model::{Horizon, SwitchingModel};
use crate::policy::{Action, ActionTable, PolicyError};
use crate::solver::{LevelData, SolveError, ValueField};

/// Default action tolerance.
pub const TOL_ACTION: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    #[default]
    Default,
    Switch,
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid simulation setup: {0}")]
    Setup(String),
    #[error("non-finite {what} at t={t}, x={x:?}")]
    NonFinite { what: &'static str, t: f64, x: Vec<f64> },
    #[error("more than {limit} chained switches at t={t} (modes {modes:?})")]
    SwitchStorm { t: f64, limit: usize, modes: Vec<usize> },
}

/// Action labels per (level, mode, node).
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRegions {
    pub table: ActionTable,
    pub tol_action: f64,
    pub tie: TieBreak,
}

/// Labels every decision cell of `field`.
pub fn extract(field: &ValueField, model: &SwitchingModel, tol_action: f64, tie: TieBreak) -> Result<StrategyRegions, StrategyError> {
    let grid = field.grid();
    let (m, nodes) = (field.modes(), grid.node_count());
    let levels = grid.decision_levels();
    let mut table = ActionTable::filled(levels, m, nodes, Action::Continue);
    let homogeneous = model.time_homogeneous();
    let mut data = LevelData::tabulate(model, grid, 0)?;
    for n in 0..levels {
        if n > 0 && !homogeneous {
            data = LevelData::tabulate(model, grid, n)?;
        }
        for node in 0..nodes {
            let v = field.at(n, node);
            for i in 0..m {
                let obstacle = data.obstacle(i, node, &v)?;
                if v[i] - obstacle > tol_action {
                    continue;
                }
                let mut best: Option<(usize, f64)> = None;
                for j in (0..m).filter(|&j| j != i) {
                    let s = v[j] - data.switching_cost[i][j][node];
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                let default_value = -data.default_cost[i][node];
                let action = match best {
                    Some((j, s)) if s > default_value || (tie == TieBreak::Switch && s == default_value) => Action::Switch(j),
                    _ => Action::Default,
                };
                table.set(n, i, node, action);
            }
        }
    }
    table.check_cycle_free()?;
    Ok(StrategyRegions { table, tol_action, tie })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Euler step; must divide the grid step.
    pub dt_sim: f64,
    /// Grid levels simulated for an infinite horizon.
    pub truncation_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    /// Amount charged, discounted for an infinite horizon.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefaultEvent {
    pub time: f64,
    pub mode: usize,
    pub cost: f64,
}

/// One simulated controlled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathResult {
    pub switches: Vec<SwitchEvent>,
    /// `None` when the activity never defaults (γ = +∞).
    pub default: Option<DefaultEvent>,
    pub terminal_time: f64,
    pub final_mode: usize,
    /// Profit accrued, discounted for an infinite horizon.
    pub profit: f64,
    /// Realized total profit.
    pub payoff: f64,
    /// Euler steps that left the box and were clamped back.
    pub clamped_steps: usize,
    /// Nearest node at each decision epoch.
    pub decision_nodes: Vec<usize>,
}

impl PathResult {
    /// Payoff recomputed from the event log.
    pub fn payoff_from_events(&self) -> f64 {
        self.profit - self.switches.iter().map(|s| s.cost).sum::<f64>() - self.default.as_ref().map_or(0.0, |d| d.cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub paths: usize,
    pub seed: u64,
    /// Fraction of paths that were clamped at least once.
    pub clamp_fraction: f64,
    pub default_fraction: f64,
    pub mean_switches: f64,
}

struct Plan {
    substeps: usize,
    h: f64,
    levels: usize,
    finite: bool,
    rate: f64,
}

fn plan(model: &SwitchingModel, grid: &Grid, cfg: &SimConfig) -> Result<Plan, StrategyError> {
    let dt = grid.dt();
    if !(cfg.dt_sim > 0.0) || cfg.dt_sim > dt * (1.0 + 1e-12) {
        return Err(StrategyError::Setup(format!("dt_sim = {} must be in (0, grid dt = {dt}]", cfg.dt_sim)));
    }
    let ratio = dt / cfg.dt_sim;
    let substeps = ratio.round() as usize;
    if (ratio - substeps as f64).abs() > 1e-9 * ratio {
        return Err(StrategyError::Setup(format!("dt_sim = {} does not divide grid dt = {dt}", cfg.dt_sim)));
    }
    let (levels, finite, rate) = match model.horizon() {
        Horizon::Finite { .. } => (grid.decision_levels(), true, 0.0),
        Horizon::Infinite { discount_rate } => {
            let beta = 1.0 / (1.0 + discount_rate * dt);
            let default_steps = (1e-8f64.ln() / beta.ln()).ceil() as usize;
            (cfg.truncation_steps.unwrap_or(default_steps), false, discount_rate)
        }
    };
    Ok(Plan {
        substeps,
        h: dt / substeps as f64,
        levels,
        finite,
        rate,
    })
}

fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

fn simulate_with(
    model: &SwitchingModel,
    policy: &ActionTable,
    grid: &Grid,
    x0: &[f64],
    i0: usize,
    plan: &Plan,
    rng: &mut ChaCha8Rng,
) -> Result<PathResult, StrategyError> {
    let m = model.modes();
    let (k, d) = (model.state_dim(), model.noise_dim());
    let domain = grid.domain();
    let mut x = x0.to_vec();
    let mut mode = i0;
    let mut profit = 0.0;
    let mut payoff = 0.0;
    let mut switches = Vec::new();
    let mut clamped_steps = 0;
    let mut decision_nodes = Vec::with_capacity(plan.levels);
    let mut z = vec![0.0; d];
    let sqrt_h = plan.h.sqrt();
    let step_discount = 1.0 / (1.0 + plan.rate * plan.h);
    let mut discount = 1.0;
    let level_time = |n: usize| if plan.finite { grid.time_at(n) } else { n as f64 * grid.dt() };

    for n in 0..plan.levels {
        let t = level_time(n);
        let (node, _) = grid.nearest_node(&x);
        decision_nodes.push(node);
        let level = if plan.finite { n } else { 0 };

        let mut visited = vec![mode];
        let mut epoch_cost = 0.0;
        loop {
            match policy.get(level, mode, node) {
                Action::Continue => break,
                Action::Default => {
                    let f = model.default_cost(mode, t, &x);
                    if !f.is_finite() {
                        return Err(StrategyError::NonFinite { what: "default cost", t, x });
                    }
                    payoff -= epoch_cost;
                    payoff -= discount * f;
                    return Ok(PathResult {
                        switches,
                        default: Some(DefaultEvent {
                            time: t,
                            mode,
                            cost: discount * f,
                        }),
                        terminal_time: t,
                        final_mode: mode,
                        profit,
                        payoff,
                        clamped_steps,
                        decision_nodes,
                    });
                }
                Action::Switch(j) => {
                    if visited.contains(&j) || visited.len() > m - 1 {
                        visited.push(j);
                        return Err(StrategyError::SwitchStorm {
                            t,
                            limit: m - 1,
                            modes: visited,
                        });
                    }
                    let g = model.switching_cost(mode, j, t, &x);
                    if !g.is_finite() {
                        return Err(StrategyError::NonFinite { what: "switching cost", t, x });
                    }
                    let cost = discount * g;
                    epoch_cost += cost;
                    switches.push(SwitchEvent { time: t, from: mode, to: j, cost });
                    visited.push(j);
                    mode = j;
                }
            }
        }
        payoff -= epoch_cost;

        for s in 0..plan.substeps {
            let ts = t + s as f64 * plan.h;
            let psi = model.profit(mode, ts, &x);
            let b = model.drift_at(ts, &x);
            let sigma = model.volatility_at(ts, &x);
            if !psi.is_finite() {
                return Err(StrategyError::NonFinite { what: "profit", t: ts, x });
            }
            let accrued = psi * plan.h * discount;
            profit += accrued;
            payoff += accrued;
            for zl in z.iter_mut() {
                *zl = rng.sample(StandardNormal);
            }
            let mut clamped = false;
            for r in 0..k {
                let diffusion: f64 = (0..d).map(|l| sigma[r][l] * z[l]).sum();
                let next = x[r] + b[r] * plan.h + diffusion * sqrt_h;
                if !next.is_finite() {
                    return Err(StrategyError::NonFinite { what: "state", t: ts, x });
                }
                x[r] = if next < domain.lo[r] {
                    clamped = true;
                    domain.lo[r]
                } else if next > domain.hi[r] {
                    clamped = true;
                    domain.hi[r]
                } else {
                    next
                };
            }
            clamped_steps += usize::from(clamped);
            if !plan.finite {
                discount *= step_discount;
            }
        }
    }
    Ok(PathResult {
        switches,
        default: None,
        terminal_time: level_time(plan.levels),
        final_mode: mode,
        profit,
        payoff,
        clamped_steps,
        decision_nodes,
    })
}

fn check_start(model: &SwitchingModel, policy: &ActionTable, grid: &Grid, x0: &[f64], i0: usize) -> Result<(), StrategyError> {
    if x0.len() != grid.dim() || i0 >= model.modes() {
        return Err(StrategyError::Setup("start state or mode out of range".into()));
    }
    let domain = grid.domain();
    if (0..x0.len()).any(|j| !(x0[j] >= domain.lo[j] && x0[j] <= domain.hi[j])) {
        return Err(StrategyError::Setup(format!("x0 = {x0:?} lies outside the grid box")));
    }
    if policy.modes() != model.modes() || policy.nodes() != grid.node_count() {
        return Err(StrategyError::Setup("policy table does not match model and grid".into()));
    }
    if policy.levels() != grid.decision_levels() && policy.levels() != 1 {
        return Err(StrategyError::Setup("policy table has the wrong number of levels".into()));
    }
    Ok(())
}

/// Simulates one controlled path. Equal to path 0 of [`estimate_j`] with the same seed.
pub fn simulate_path(
    model: &SwitchingModel,
    policy: &ActionTable,
    grid: &Grid,
    x0: &[f64],
    i0: usize,
    cfg: &SimConfig,
    seed: u64,
) -> Result<PathResult, StrategyError> {
    check_start(model, policy, grid, x0, i0)?;
    let plan = plan(model, grid, cfg)?;
    simulate_with(model, policy, grid, x0, i0, &plan, &mut path_rng(seed, 0))
}

/// Monte Carlo estimate of the expected total profit of `policy` from `(x0, i0)`.
/// Path `p` draws from its own ChaCha stream of `seed`, so the result does not
/// depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn estimate_j(
    model: &SwitchingModel,
    policy: &ActionTable,
    grid: &Grid,
    x0: &[f64],
    i0: usize,
    paths: usize,
    cfg: &SimConfig,
    seed: u64,
) -> Result<MCEstimate, StrategyError> {
    if paths < 2 {
        return Err(StrategyError::Setup("need at least 2 paths".into()));
    }
    check_start(model, policy, grid, x0, i0)?;
    let plan = plan(model, grid, cfg)?;
    let results: Vec<(f64, bool, bool, usize)> = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let r = simulate_with(model, policy, grid, x0, i0, &plan, &mut path_rng(seed, p))?;
            Ok((r.payoff, r.clamped_steps > 0, r.default.is_some(), r.switches.len()))
        })
        .collect::<Result<_, StrategyError>>()?;
    let n = paths as f64;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MCEstimate {
        mean,
        std_err: (var / n).sqrt(),
        paths,
        seed,
        clamp_fraction: results.iter().filter(|r| r.1).count() as f64 / n,
        default_fraction: results.iter().filter(|r| r.2).count() as f64 / n,
        mean_switches: results.iter().map(|r| r.3 as f64).sum::<f64>() / n,
    })
}

/// A uniformly drawn cycle-free action table.
pub fn random_policy<R: Rng>(levels: usize, modes: usize, nodes: usize, rng: &mut R) -> ActionTable {
    let mut table = ActionTable::filled(levels, modes, nodes, Action::Continue);
    for level in 0..levels {
        for node in 0..nodes {
            loop {
                for i in 0..modes {
                    let pick = rng.random_range(0..modes + 1);
                    let action = match pick {
                        0 => Action::Continue,
                        1 => Action::Default,
                        p => {
                            let j = p - 2;
                            Action::Switch(if j >= i { j + 1 } else { j })
                        }
                    };
                    table.set(level, i, node, action);
                }
                if (0..modes).all(|i| table.resolve(level, i, node).is_ok()) {
                    break;
                }
            }
        }
    }
    table
}
