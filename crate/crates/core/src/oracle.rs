//! Brute-force certification on micro instances.
//!
//! Enumerates every cycle-free Markov policy over the same chain the solvers
//! use and keeps the best expected profit per starting cell. No maximization
//! over actions happens inside a policy's evaluation, so the result is
//! independent of the solver recursions. On a finite chain Markov policies
//! attain the optimum over all adapted strategies, which is what makes the
//! comparison meaningful.
//!
//! Infinite-horizon policies are stationary and are evaluated over a fixed
//! number of discounted steps; the tail is bounded by
//! `β^N ((max|ψ|Δt + (m−1) max g)/(1−β) + max F)`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::chain::{Chains, Grid};
use crate::model::SwitchingModel;
use crate::policy::{Action, ActionTable, PolicyError, Terminal};
use crate::solver::{LevelData, SolveError, Tables};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(
        "instance too large for enumeration: {cells} cells, (m+1)^cells = {policies:e} policies \
         (limits: {max_cells} cells, {max_policies:e} policies); shrink modes, nodes or steps"
    )]
    TooLarge {
        cells: usize,
        policies: f64,
        max_cells: usize,
        max_policies: f64,
    },
    #[error("policy table shape does not match the instance")]
    Shape,
    #[error("start cell out of range")]
    Start,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleLimits {
    pub max_cells: usize,
    pub max_policies: f64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_cells: 14,
            max_policies: 1e7,
        }
    }
}

/// A model laid onto a grid: kernels plus tabulated coefficients.
pub struct ChainProblem {
    grid: Grid,
    modes: usize,
    chains: Chains,
    tables: Tables,
    /// Steps evaluated: `N` (finite) or the truncation length (infinite).
    steps: usize,
    discount: Option<f64>,
}

impl ChainProblem {
    /// `truncation` is the number of discounted steps used for an infinite
    /// horizon; ignored for a finite one.
    pub fn new(model: &SwitchingModel, grid: &Grid, truncation: usize) -> Result<ChainProblem, OracleError> {
        let chains = Chains::build(model, grid).map_err(SolveError::from)?;
        let tables = Tables::build(model, grid)?;
        let discount = chains.at(0).discount();
        let steps = if grid.is_finite() { grid.decision_levels() } else { truncation };
        Ok(ChainProblem {
            grid: grid.clone(),
            modes: model.modes(),
            chains,
            tables,
            steps,
            discount,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Decision cells: `m × N × nodes` (finite) or `m × nodes` (infinite).
    pub fn cells(&self) -> usize {
        self.modes * self.grid.decision_levels() * self.grid.node_count()
    }

    /// Bound on the value lost by truncating an infinite horizon.
    pub fn truncation_bound(&self) -> Option<f64> {
        let beta = self.discount?;
        let data = self.tables.at(0);
        let max_psi = data.profit.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_f = data.default_cost.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_g = data
            .switching_cost
            .iter()
            .flatten()
            .flatten()
            .filter(|v| !v.is_nan())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let dt = self.chains.at(0).dt();
        let tail = (max_psi * dt + (self.modes - 1) as f64 * max_g) / (1.0 - beta) + max_f;
        Some(beta.powi(self.steps as i32) * tail)
    }

    fn policy_level(&self, step: usize) -> usize {
        if self.grid.is_finite() {
            step
        } else {
            0
        }
    }
}

/// Expected profit of `policy` from `(mode, node)` at time 0, by pushing the
/// state distribution forward through the chain.
pub fn evaluate_policy(policy: &ActionTable, problem: &ChainProblem, start: (usize, usize)) -> Result<f64, OracleError> {
    let (m, nodes) = (problem.modes, problem.grid.node_count());
    let expected_levels = problem.grid.decision_levels();
    if policy.modes() != m || policy.nodes() != nodes || (policy.levels() != expected_levels && policy.levels() != 1) {
        return Err(OracleError::Shape);
    }
    if start.0 >= m || start.1 >= nodes {
        return Err(OracleError::Start);
    }
    let mut mass = vec![vec![0.0; nodes]; m];
    mass[start.0][start.1] = 1.0;
    let mut payoff = 0.0;
    let mut weight = 1.0;
    for step in 0..problem.steps {
        let level = problem.policy_level(step);
        let chain = problem.chains.at(level);
        let data = problem.tables.at(level);
        let mut next = vec![vec![0.0; nodes]; m];
        for i in 0..m {
            for node in 0..nodes {
                let p = mass[i][node];
                if p == 0.0 {
                    continue;
                }
                let (visited, terminal) = policy.resolve(level, i, node)?;
                let switch_cost: f64 = visited.windows(2).map(|w| data.switching_cost[w[0]][w[1]][node]).sum();
                let last = *visited.last().expect("resolve returns the start mode");
                payoff -= weight * p * switch_cost;
                match terminal {
                    Terminal::Default => payoff -= weight * p * data.default_cost[last][node],
                    Terminal::Continue => {
                        payoff += weight * p * data.profit[last][node] * chain.dt();
                        for (target, q) in chain.row(node) {
                            next[last][target] += p * q;
                        }
                    }
                }
            }
        }
        mass = next;
        if let Some(beta) = problem.discount {
            weight *= beta;
        }
    }
    Ok(payoff)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    /// Best expected profit per `[mode][node]` at time 0.
    pub best: Vec<Vec<f64>>,
    /// A policy attaining the largest total over all start cells.
    #[serde(skip)]
    pub best_policy: ActionTable,
    pub policies_evaluated: u64,
    pub truncation_bound: Option<f64>,
}

/// Joint actions of all modes at one (level, node), with switch chains resolved.
struct Joint {
    actions: Vec<Action>,
    /// Per starting mode: modes visited and final action.
    routes: Vec<(Vec<usize>, Terminal)>,
}

fn joint_actions(m: usize) -> Vec<Joint> {
    let per_mode: Vec<Vec<Action>> = (0..m)
        .map(|i| {
            let mut a = vec![Action::Continue, Action::Default];
            a.extend((0..m).filter(|&j| j != i).map(Action::Switch));
            a
        })
        .collect();
    let total: usize = per_mode.iter().map(Vec::len).product();
    let mut out = Vec::new();
    for mut code in 0..total {
        let mut actions = Vec::with_capacity(m);
        for opts in &per_mode {
            actions.push(opts[code % opts.len()]);
            code /= opts.len();
        }
        let mut table = ActionTable::filled(1, m, 1, Action::Continue);
        for (i, a) in actions.iter().enumerate() {
            table.set(0, i, 0, *a);
        }
        let routes: Result<Vec<_>, _> = (0..m).map(|i| table.resolve(0, i, 0)).collect();
        if let Ok(routes) = routes {
            out.push(Joint { actions, routes });
        }
    }
    out
}

/// Per-mode values at one node under one joint action, given the next-step
/// values (`None` at the last step).
fn cell_values(
    joint: &Joint,
    data: &LevelData,
    problem: &ChainProblem,
    level: usize,
    node: usize,
    next: Option<&[Vec<f64>]>,
    out: &mut [f64],
) {
    let chain = problem.chains.at(level);
    for (i, (visited, terminal)) in joint.routes.iter().enumerate() {
        let last = *visited.last().expect("non-empty route");
        let end = match terminal {
            Terminal::Default => -data.default_cost[last][node],
            Terminal::Continue => {
                let e: f64 = match next {
                    Some(v) => chain.row(node).map(|(c, p)| p * v[last][c]).sum(),
                    None => 0.0,
                };
                match problem.discount {
                    Some(beta) => data.profit[last][node] * chain.dt() + beta * e,
                    None => data.profit[last][node] * chain.dt() + e,
                }
            }
        };
        let cost: f64 = visited.windows(2).map(|w| data.switching_cost[w[0]][w[1]][node]).sum();
        out[i] = end - cost;
    }
}

struct Best {
    best: Vec<Vec<f64>>,
    total: f64,
    policy: Vec<usize>,
    count: u64,
}

impl Best {
    fn new(m: usize, nodes: usize) -> Best {
        Best {
            best: vec![vec![f64::NEG_INFINITY; nodes]; m],
            total: f64::NEG_INFINITY,
            policy: Vec::new(),
            count: 0,
        }
    }

    fn offer(&mut self, values: &[Vec<f64>], assignment: &[usize]) {
        self.count += 1;
        for (b, v) in self.best.iter_mut().flatten().zip(values.iter().flatten()) {
            if *v > *b {
                *b = *v;
            }
        }
        let total: f64 = values.iter().flatten().sum();
        if total > self.total {
            self.total = total;
            self.policy = assignment.to_vec();
        }
    }

    /// Merge in enumeration order; the earlier policy wins ties.
    fn merge(mut self, other: Best) -> Best {
        for (b, v) in self.best.iter_mut().flatten().zip(other.best.iter().flatten()) {
            if *v > *b {
                *b = *v;
            }
        }
        if other.total > self.total {
            self.total = other.total;
            self.policy = other.policy;
        }
        self.count += other.count;
        self
    }
}

struct Enumerator<'a> {
    problem: &'a ChainProblem,
    joints: &'a [Joint],
    /// (level, node) pairs in assignment order.
    cells: Vec<(usize, usize)>,
}

impl Enumerator<'_> {
    /// Finite horizon: assign cells level by level (last level first) and
    /// evaluate each node as soon as its joint action is fixed.
    fn dfs_finite(&self, pos: usize, values: &mut Vec<Vec<Vec<f64>>>, assignment: &mut Vec<usize>, best: &mut Best) {
        if pos == self.cells.len() {
            best.offer(&values[0], assignment);
            return;
        }
        let (level, node) = self.cells[pos];
        let data = self.problem.tables.at(level);
        let m = self.problem.modes;
        let mut cell = vec![0.0; m];
        for (k, joint) in self.joints.iter().enumerate() {
            {
                let (head, tail) = values.split_at_mut(level + 1);
                let next = tail.first().map(|v| v.as_slice());
                let next = if level + 1 == self.problem.steps { None } else { next };
                cell_values(joint, data, self.problem, level, node, next, &mut cell);
                for i in 0..m {
                    head[level][i][node] = cell[i];
                }
            }
            assignment.push(k);
            self.dfs_finite(pos + 1, values, assignment, best);
            assignment.pop();
        }
    }

    /// Infinite horizon: choose a stationary joint action per node, then
    /// evaluate the policy over the truncated horizon.
    fn dfs_stationary(&self, pos: usize, assignment: &mut Vec<usize>, best: &mut Best) {
        let nodes = self.problem.grid.node_count();
        if pos == nodes {
            let values = self.evaluate_stationary(assignment);
            best.offer(&values, assignment);
            return;
        }
        for k in 0..self.joints.len() {
            assignment.push(k);
            self.dfs_stationary(pos + 1, assignment, best);
            assignment.pop();
        }
    }

    fn evaluate_stationary(&self, assignment: &[usize]) -> Vec<Vec<f64>> {
        let (m, nodes) = (self.problem.modes, self.problem.grid.node_count());
        let data = self.problem.tables.at(0);
        let mut v = vec![vec![0.0; nodes]; m];
        let mut cur = vec![vec![0.0; nodes]; m];
        let mut cell = vec![0.0; m];
        for step in 0..self.problem.steps {
            for node in 0..nodes {
                let next = if step == 0 { None } else { Some(v.as_slice()) };
                cell_values(&self.joints[assignment[node]], data, self.problem, 0, node, next, &mut cell);
                for i in 0..m {
                    cur[i][node] = cell[i];
                }
            }
            std::mem::swap(&mut v, &mut cur);
        }
        v
    }
}

/// Exact maximum over all cycle-free Markov policies.
pub fn enumerate(problem: &ChainProblem, limits: &OracleLimits) -> Result<OracleResult, OracleError> {
    let (m, nodes) = (problem.modes, problem.grid.node_count());
    let cells = problem.cells();
    let policies = ((m + 1) as f64).powi(cells as i32);
    if cells > limits.max_cells || policies > limits.max_policies {
        return Err(OracleError::TooLarge {
            cells,
            policies,
            max_cells: limits.max_cells,
            max_policies: limits.max_policies,
        });
    }
    let joints = joint_actions(m);
    let finite = problem.grid.is_finite();
    let levels = problem.grid.decision_levels();
    let order: Vec<(usize, usize)> = if finite {
        (0..levels).rev().flat_map(|n| (0..nodes).map(move |x| (n, x))).collect()
    } else {
        (0..nodes).map(|x| (0, x)).collect()
    };
    let en = Enumerator {
        problem,
        joints: &joints,
        cells: order.clone(),
    };

    // Split on the first cell's joint action; merge in index order.
    let partials: Vec<Best> = (0..joints.len())
        .into_par_iter()
        .map(|k| {
            let mut best = Best::new(m, nodes);
            let mut assignment = vec![k];
            if finite {
                let mut values = vec![vec![vec![0.0; nodes]; m]; levels];
                let (level, node) = order[0];
                let mut cell = vec![0.0; m];
                cell_values(&joints[k], problem.tables.at(level), problem, level, node, None, &mut cell);
                for i in 0..m {
                    values[level][i][node] = cell[i];
                }
                en.dfs_finite(1, &mut values, &mut assignment, &mut best);
            } else {
                en.dfs_stationary(1, &mut assignment, &mut best);
            }
            best
        })
        .collect();
    let best = partials
        .into_iter()
        .reduce(Best::merge)
        .expect("at least one joint action");

    let mut table = ActionTable::filled(if finite { levels } else { 1 }, m, nodes, Action::Continue);
    for (&(level, node), &k) in order.iter().zip(&best.policy) {
        for (i, a) in joints[k].actions.iter().enumerate() {
            table.set(level, i, node, *a);
        }
    }
    Ok(OracleResult {
        best: best.best,
        best_policy: table,
        policies_evaluated: best.count,
        truncation_bound: problem.truncation_bound(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{Axis, TimeGrid};
    use crate::model::tests::text;
    use crate::model::Horizon;
    use crate::solver::{solve_finite, solve_infinite, SolveOptions};

    fn grid(nodes: usize, maturity: f64, steps: usize) -> Grid {
        Grid::new(vec![Axis { lo: -1.0, hi: 1.0, nodes }], TimeGrid::Finite { maturity, steps }).unwrap()
    }

    fn fin(maturity: f64) -> Horizon {
        Horizon::Finite { maturity }
    }

    #[test]
    fn evaluate_policy_examples() {
        let model = text(1, fin(1.0), &["1"], "1", &["2"], "0.3", "0").compile().unwrap();
        let g = grid(3, 1.0, 2);
        let problem = ChainProblem::new(&model, &g, 0).unwrap();
        let always = ActionTable::filled(2, 1, 3, Action::Continue);
        assert!((evaluate_policy(&always, &problem, (0, 1)).unwrap() - 1.0).abs() < 1e-15);
        let mut quit = always.clone();
        quit.set(0, 0, 1, Action::Default);
        assert_eq!(evaluate_policy(&quit, &problem, (0, 1)).unwrap(), -2.0);

        let model = text(2, fin(1.0), &["0", "1"], "0.1", &["10", "10"], "0", "0").compile().unwrap();
        let problem = ChainProblem::new(&model, &g, 0).unwrap();
        let mut switch = ActionTable::filled(2, 2, 3, Action::Continue);
        switch.set(0, 0, 1, Action::Switch(1));
        assert!((evaluate_policy(&switch, &problem, (0, 1)).unwrap() - 0.9).abs() < 1e-15);

        let mut cyclic = switch.clone();
        cyclic.set(0, 1, 1, Action::Switch(0));
        assert!(matches!(evaluate_policy(&cyclic, &problem, (0, 1)), Err(OracleError::Policy(_))));
    }

    #[test]
    fn enumerate_examples() {
        // Single frozen node approximated by a zero-noise chain on 3 nodes.
        let model = text(1, fin(0.5), &["1"], "1", &["1"], "0", "0").compile().unwrap();
        let problem = ChainProblem::new(&model, &grid(3, 0.5, 1), 0).unwrap();
        let r = enumerate(&problem, &OracleLimits::default()).unwrap();
        assert_eq!(r.best[0][1], 0.5);
        assert_eq!(r.policies_evaluated, 8);

        let model = text(1, fin(1.0), &["-1"], "1", &["0"], "0.5", "0").compile().unwrap();
        let problem = ChainProblem::new(&model, &grid(3, 1.0, 2), 0).unwrap();
        let r = enumerate(&problem, &OracleLimits::default()).unwrap();
        assert!(r.best.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn cap_is_enforced() {
        let model = text(3, fin(1.0), &["1", "1", "1"], "1", &["1", "1", "1"], "0.2", "0").compile().unwrap();
        let problem = ChainProblem::new(&model, &grid(5, 1.0, 3), 0).unwrap();
        assert!(matches!(
            enumerate(&problem, &OracleLimits::default()),
            Err(OracleError::TooLarge { cells: 45, .. })
        ));
    }

    #[test]
    fn matches_coupled_solver_and_dominates_policies() {
        let model = text(2, fin(1.0), &["x1 + t", "0.5 - x1"], "0.2 + 0.1*x1^2", &["0.3", "0.6"], "0.5", "0.1*x1")
            .compile()
            .unwrap();
        let g = grid(3, 1.0, 2);
        let problem = ChainProblem::new(&model, &g, 0).unwrap();
        let r = enumerate(&problem, &OracleLimits::default()).unwrap();
        let (field, _) = solve_finite(&model, &g, &SolveOptions::default()).unwrap();
        for i in 0..2 {
            for node in 0..3 {
                assert!((r.best[i][node] - field.value(0, i, node)).abs() <= 1e-12);
                let v = evaluate_policy(&r.best_policy, &problem, (i, node)).unwrap();
                assert!((v - r.best[i][node]).abs() <= 1e-12);
            }
        }
        // Fixed-action policies never beat the optimum.
        for a in [Action::Continue, Action::Default, Action::Switch(1)] {
            let mut p = ActionTable::filled(2, 2, 3, Action::Continue);
            for n in 0..2 {
                for node in 0..3 {
                    p.set(n, 0, node, a);
                }
            }
            assert!(evaluate_policy(&p, &problem, (0, 1)).unwrap() <= r.best[0][1] + 1e-15);
        }
    }

    #[test]
    fn infinite_truncated_enumeration_brackets_solver() {
        let inf = Horizon::Infinite { discount_rate: 1.0 };
        let mut t = text(2, inf, &["x1", "-x1"], "0.5", &["0.5", "0.5"], "0.5", "0");
        t.alpha = 2.0;
        let model = t.compile().unwrap();
        let g = Grid::new(vec![Axis { lo: -1.0, hi: 1.0, nodes: 3 }], TimeGrid::Infinite { dt: 0.5 }).unwrap();
        let problem = ChainProblem::new(&model, &g, 120).unwrap();
        let r = enumerate(&problem, &OracleLimits::default()).unwrap();
        let bound = r.truncation_bound.unwrap();
        assert!(bound < 1e-9, "{bound}");
        let (field, _) = solve_infinite(&model, &g, &SolveOptions::default()).unwrap();
        for i in 0..2 {
            for node in 0..3 {
                let d = (r.best[i][node] - field.value(0, i, node)).abs();
                assert!(d <= bound + 1e-7, "{d}");
            }
        }
    }
}
