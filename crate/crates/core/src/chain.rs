//! Markov-chain approximation of the controlled diffusion on a box grid.
//!
//! Each node moves to itself or to an axis neighbour with probabilities
//! given by an explicit upwind stencil:
//!
//! ```text
//! p(x → x ± e_j Δx_j) = Δt · ( a_jj / (2 Δx_j²) + b_j^± / Δx_j )
//! p(x → x)            = 1 − Σ (the rest)
//! ```
//!
//! so that `E[X' − x] = b Δt` and the per-axis variance is `a_jj Δt + O(Δt²)`.
//! On a face of the box the second difference along the normal axis is taken
//! as zero and drift pointing out of the box is dropped, so rows stay
//! stochastic without inventing boundary data.
//!
//! The same kernel backs the solvers, the brute-force oracle and the
//! extracted strategy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoxDomain, Horizon, ModelError, SwitchingModel};

/// Rows sum to one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Below this many nodes, work stays on the calling thread.
const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, idx: usize) -> f64 {
        if idx + 1 == self.nodes {
            self.hi
        } else {
            self.lo + idx as f64 * self.spacing()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeGrid {
    /// `steps` uniform steps on `[0, maturity]`.
    Finite { maturity: f64, steps: usize },
    /// A single stationary level with step `dt`.
    Infinite { dt: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(
        "CFL condition violated at node {node} (x = {x:?}): dt * load = {ratio} > 1; \
         largest admissible dt is {max_dt}"
    )]
    Cfl {
        node: usize,
        x: Vec<f64>,
        ratio: f64,
        max_dt: f64,
    },
    #[error("diffusion matrix is not diagonal at node {node} (x = {x:?}): a[{row}][{col}] = {value}")]
    CrossDiffusion {
        node: usize,
        x: Vec<f64>,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rectangular state grid plus time discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    time: TimeGrid,
    strides: Vec<usize>,
    nodes: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>, time: TimeGrid) -> Result<Grid, ChainError> {
        if axes.is_empty() {
            return Err(ChainError::Grid("at least one axis is required".into()));
        }
        for (j, ax) in axes.iter().enumerate() {
            if !(ax.lo.is_finite() && ax.hi.is_finite() && ax.lo < ax.hi) {
                return Err(ChainError::Grid(format!("axis {j}: need finite lo < hi")));
            }
            if ax.nodes < 3 {
                return Err(ChainError::Grid(format!("axis {j}: need at least 3 nodes")));
            }
        }
        match time {
            TimeGrid::Finite { maturity, steps } => {
                if !(maturity > 0.0 && maturity.is_finite()) || steps == 0 {
                    return Err(ChainError::Grid("finite horizon needs T > 0 and steps >= 1".into()));
                }
            }
            TimeGrid::Infinite { dt } => {
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(ChainError::Grid("dt must be positive".into()));
                }
            }
        }
        let mut strides = Vec::with_capacity(axes.len());
        let mut nodes = 1usize;
        for ax in &axes {
            strides.push(nodes);
            nodes = nodes
                .checked_mul(ax.nodes)
                .ok_or_else(|| ChainError::Grid("node count overflows".into()))?;
        }
        Ok(Grid {
            axes,
            time,
            strides,
            nodes,
        })
    }

    /// Builds a grid whose time axis matches the model horizon.
    /// `steps` is used for a finite horizon, `dt` for an infinite one.
    pub fn for_model(model: &SwitchingModel, axes: Vec<Axis>, steps: Option<usize>, dt: Option<f64>) -> Result<Grid, ChainError> {
        if axes.len() != model.state_dim() {
            return Err(ChainError::Grid(format!(
                "grid has {} axes, model state dimension is {}",
                axes.len(),
                model.state_dim()
            )));
        }
        let time = match (model.horizon(), steps, dt) {
            (Horizon::Finite { maturity }, Some(steps), None) => TimeGrid::Finite { maturity, steps },
            (Horizon::Infinite { .. }, None, Some(dt)) => TimeGrid::Infinite { dt },
            (Horizon::Finite { .. }, _, _) => {
                return Err(ChainError::Grid("finite horizon grids take `steps` (and no `dt`)".into()))
            }
            (Horizon::Infinite { .. }, _, _) => {
                return Err(ChainError::Grid("infinite horizon grids take `dt` (and no `steps`)".into()))
            }
        };
        Grid::new(axes, time)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn dt(&self) -> f64 {
        match self.time {
            TimeGrid::Finite { maturity, steps } => maturity / steps as f64,
            TimeGrid::Infinite { dt } => dt,
        }
    }

    /// Number of decision levels: `N` for a finite horizon, 1 otherwise.
    pub fn decision_levels(&self) -> usize {
        match self.time {
            TimeGrid::Finite { steps, .. } => steps,
            TimeGrid::Infinite { .. } => 1,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.time, TimeGrid::Finite { .. })
    }

    /// Calendar time of level `n` (0 for an infinite horizon).
    pub fn time_at(&self, n: usize) -> f64 {
        match self.time {
            TimeGrid::Finite { maturity, steps } if n == steps => maturity,
            TimeGrid::Finite { maturity, steps } => n as f64 * (maturity / steps as f64),
            TimeGrid::Infinite { .. } => 0.0,
        }
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        self.axes
            .iter()
            .zip(&self.strides)
            .map(|(ax, s)| (node / s) % ax.nodes)
            .collect()
    }

    pub fn node_of(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        self.axes
            .iter()
            .zip(&self.strides)
            .map(|(ax, s)| ax.coord((node / s) % ax.nodes))
            .collect()
    }

    /// True when the node lies on a face of the box.
    pub fn on_face(&self, node: usize) -> bool {
        self.multi_index(node)
            .iter()
            .zip(&self.axes)
            .any(|(&i, ax)| i == 0 || i + 1 == ax.nodes)
    }

    /// Nearest node to `x`, and whether `x` lay outside the box.
    pub fn nearest_node(&self, x: &[f64]) -> (usize, bool) {
        let mut outside = false;
        let mut node = 0;
        for ((ax, s), &xj) in self.axes.iter().zip(&self.strides).zip(x) {
            if xj < ax.lo || xj > ax.hi {
                outside = true;
            }
            let pos = ((xj - ax.lo) / ax.spacing()).round();
            let idx = if pos.is_nan() || pos < 0.0 {
                0
            } else {
                (pos as usize).min(ax.nodes - 1)
            };
            node += idx * s;
        }
        (node, outside)
    }

    pub fn domain(&self) -> BoxDomain {
        BoxDomain {
            lo: self.axes.iter().map(|a| a.lo).collect(),
            hi: self.axes.iter().map(|a| a.hi).collect(),
        }
    }

    /// Same box, each spacing divided by `factor` and `dt` by `factor²`.
    pub fn refined(&self, factor: usize) -> Result<Grid, ChainError> {
        let axes = self
            .axes
            .iter()
            .map(|a| Axis {
                nodes: (a.nodes - 1) * factor + 1,
                ..*a
            })
            .collect();
        let time = match self.time {
            TimeGrid::Finite { maturity, steps } => TimeGrid::Finite {
                maturity,
                steps: steps * factor * factor,
            },
            TimeGrid::Infinite { dt } => TimeGrid::Infinite {
                dt: dt / (factor * factor) as f64,
            },
        };
        Grid::new(axes, time)
    }
}

/// Transition kernel at one time level, stored as sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainApprox {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    probs: Vec<f64>,
    dt: f64,
    discount: Option<f64>,
}

fn node_row(model: &SwitchingModel, grid: &Grid, t: f64, dt: f64, node: usize) -> Result<(Vec<(usize, f64)>, f64), ChainError> {
    let x = grid.coords(node);
    let (b, a) = model.drift_diffusion(t, &x)?;
    let k = grid.dim();
    for r in 0..k {
        for c in 0..r {
            let tol = 1e-12 * (1.0 + a[r][r].abs() + a[c][c].abs());
            if a[r][c].abs() > tol {
                return Err(ChainError::CrossDiffusion {
                    node,
                    x,
                    row: r,
                    col: c,
                    value: a[r][c],
                });
            }
        }
    }
    let idx = grid.multi_index(node);
    let mut load = 0.0;
    let mut moves = Vec::with_capacity(2 * k);
    for j in 0..k {
        let ax = grid.axes[j];
        let h = ax.spacing();
        load += a[j][j] / (h * h) + b[j].abs() / h;
        let diff = a[j][j] / (2.0 * h * h);
        let (up_drift, down_drift) = (b[j].max(0.0) / h, (-b[j]).max(0.0) / h);
        let at_lo = idx[j] == 0;
        let at_hi = idx[j] + 1 == ax.nodes;
        let stride = grid.strides[j];
        let (p_down, p_up) = if at_lo {
            (0.0, dt * up_drift)
        } else if at_hi {
            (dt * down_drift, 0.0)
        } else {
            (dt * (diff + down_drift), dt * (diff + up_drift))
        };
        if p_down > 0.0 {
            moves.push((node - stride, p_down));
        }
        if p_up > 0.0 {
            moves.push((node + stride, p_up));
        }
    }
    Ok((moves, load))
}

impl ChainApprox {
    /// Builds the kernel for time level `level` (ignored for an infinite horizon).
    pub fn build(model: &SwitchingModel, grid: &Grid, level: usize) -> Result<ChainApprox, ChainError> {
        if grid.dim() != model.state_dim() {
            return Err(ChainError::Grid("grid dimension differs from model state dimension".into()));
        }
        let t = grid.time_at(level);
        let dt = grid.dt();
        let build_row = |node| node_row(model, grid, t, dt, node);
        let rows: Vec<_> = if grid.node_count() >= PAR_THRESHOLD {
            (0..grid.node_count()).into_par_iter().map(build_row).collect()
        } else {
            (0..grid.node_count()).map(build_row).collect()
        };

        let mut row_ptr = Vec::with_capacity(grid.node_count() + 1);
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        let mut worst: Option<(usize, f64)> = None;
        row_ptr.push(0);
        for (node, row) in rows.into_iter().enumerate() {
            let (moves, load) = row?;
            if worst.is_none_or(|(_, l)| load > l) {
                worst = Some((node, load));
            }
            let out: f64 = moves.iter().map(|(_, p)| p).sum();
            cols.push(node);
            probs.push((1.0 - out).max(0.0));
            for (c, p) in moves {
                cols.push(c);
                probs.push(p);
            }
            row_ptr.push(cols.len());
        }
        if let Some((node, load)) = worst {
            if dt * load > 1.0 + ROW_SUM_TOL {
                return Err(ChainError::Cfl {
                    node,
                    x: grid.coords(node),
                    ratio: dt * load,
                    max_dt: 1.0 / load,
                });
            }
        }
        let discount = match model.horizon() {
            Horizon::Finite { .. } => None,
            Horizon::Infinite { discount_rate } => Some(1.0 / (1.0 + discount_rate * dt)),
        };
        Ok(ChainApprox {
            row_ptr,
            cols,
            probs,
            dt,
            discount,
        })
    }

    pub fn node_count(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Running-reward weight of one step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Per-step discount `1/(1 + rΔt)`; `None` for a finite horizon.
    pub fn discount(&self) -> Option<f64> {
        self.discount
    }

    /// `(target, probability)` pairs of one row; the first entry is the node itself.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[node]..self.row_ptr[node + 1];
        self.cols[span.clone()].iter().copied().zip(self.probs[span].iter().copied())
    }

    fn row_dot(&self, node: usize, field: &[f64]) -> f64 {
        let span = self.row_ptr[node]..self.row_ptr[node + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.probs[span])
            .map(|(&c, &p)| p * field[c])
            .sum()
    }

    /// One-step conditional expectation `E[field(X') | X = node]` for every node.
    pub fn expected_next(&self, field: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count()];
        self.expected_next_into(field, &mut out);
        out
    }

    pub fn expected_next_into(&self, field: &[f64], out: &mut [f64]) {
        debug_assert_eq!(field.len(), self.node_count());
        if out.len() >= PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(|(n, o)| *o = self.row_dot(n, field));
        } else {
            out.iter_mut().enumerate().for_each(|(n, o)| *o = self.row_dot(n, field));
        }
    }
}

/// Kernels for every decision level of a grid. Time-free dynamics share one.
#[derive(Debug, Clone)]
pub struct Chains {
    levels: Vec<ChainApprox>,
}

impl Chains {
    pub fn build(model: &SwitchingModel, grid: &Grid) -> Result<Chains, ChainError> {
        let count = if model.dynamics_time_free() { 1 } else { grid.decision_levels() };
        let levels = (0..count)
            .map(|n| ChainApprox::build(model, grid, n))
            .collect::<Result<_, _>>()?;
        Ok(Chains { levels })
    }

    pub fn at(&self, level: usize) -> &ChainApprox {
        &self.levels[level.min(self.levels.len() - 1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::text;
    use crate::model::Horizon;

    fn line(lo: f64, hi: f64, nodes: usize) -> Vec<Axis> {
        vec![Axis { lo, hi, nodes }]
    }

    fn fin_grid(lo: f64, hi: f64, nodes: usize, dt: f64) -> Grid {
        let steps = (1.0 / dt).round() as usize;
        Grid::new(line(lo, hi, nodes), TimeGrid::Finite { maturity: 1.0, steps }).unwrap()
    }

    fn model(sigma: &str, b: &str) -> SwitchingModel {
        text(1, Horizon::Finite { maturity: 1.0 }, &["1"], "1", &["1"], sigma, b)
            .compile()
            .unwrap()
    }

    fn interior_row(c: &ChainApprox, node: usize) -> (f64, f64, f64) {
        let mut up = 0.0;
        let mut down = 0.0;
        let mut stay = 0.0;
        for (col, p) in c.row(node) {
            match col.cmp(&node) {
                std::cmp::Ordering::Less => down += p,
                std::cmp::Ordering::Greater => up += p,
                std::cmp::Ordering::Equal => stay += p,
            }
        }
        (up, down, stay)
    }

    #[test]
    fn stencil_examples() {
        // Δx = 0.1 on [-1, 1].
        let c = ChainApprox::build(&model("1", "0"), &fin_grid(-1.0, 1.0, 21, 0.004), 0).unwrap();
        let (up, down, stay) = interior_row(&c, 10);
        assert!((up - 0.2).abs() < 1e-15 && (down - 0.2).abs() < 1e-15 && (stay - 0.6).abs() < 1e-15);

        let c = ChainApprox::build(&model("0", "1"), &fin_grid(-1.0, 1.0, 21, 0.05), 0).unwrap();
        let (up, down, stay) = interior_row(&c, 10);
        assert!((up - 0.5).abs() < 1e-15 && down == 0.0 && (stay - 0.5).abs() < 1e-15);

        let err = ChainApprox::build(&model("1", "0"), &fin_grid(-1.0, 1.0, 21, 0.02), 0).unwrap_err();
        match err {
            ChainError::Cfl { ratio, max_dt, .. } => {
                assert!((ratio - 2.0).abs() < 1e-12);
                assert!((max_dt - 0.01).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn faces_keep_rows_stochastic() {
        let c = ChainApprox::build(&model("1", "x1"), &fin_grid(-1.0, 1.0, 21, 0.004), 0).unwrap();
        // Lower face: drift -1 points outward and is dropped; no diffusion.
        assert_eq!(c.row(0).collect::<Vec<_>>(), vec![(0, 1.0)]);
        // Upper face: drift +1 points outward.
        assert_eq!(c.row(20).collect::<Vec<_>>(), vec![(20, 1.0)]);
        let c = ChainApprox::build(&model("1", "-x1"), &fin_grid(-1.0, 1.0, 21, 0.004), 0).unwrap();
        let row: Vec<_> = c.row(0).collect();
        assert_eq!(row.len(), 2);
        assert!((row[1].1 - 0.04).abs() < 1e-15);
    }

    #[test]
    fn cross_diffusion_is_rejected() {
        let mut t = text(1, Horizon::Finite { maturity: 1.0 }, &["1"], "1", &["1"], "1", "0");
        t.state_dim = 2;
        t.noise_dim = 1;
        t.drift = vec!["0".into(), "0".into()];
        t.volatility = vec![vec!["1".into()], vec!["1".into()]];
        let m = t.compile().unwrap();
        let axes = vec![Axis { lo: -1.0, hi: 1.0, nodes: 5 }; 2];
        let g = Grid::new(axes, TimeGrid::Finite { maturity: 1.0, steps: 100 }).unwrap();
        assert!(matches!(ChainApprox::build(&m, &g, 0), Err(ChainError::CrossDiffusion { .. })));
    }

    #[test]
    fn two_dimensional_diagonal_rows() {
        let mut t = text(1, Horizon::Finite { maturity: 1.0 }, &["1"], "1", &["1"], "1", "0");
        t.state_dim = 2;
        t.noise_dim = 2;
        t.drift = vec!["x2".into(), "-x1".into()];
        t.volatility = vec![vec!["0.5".into(), "0".into()], vec!["0".into(), "1 + 0.1*x1".into()]];
        let m = t.compile().unwrap();
        let axes = vec![Axis { lo: -1.0, hi: 1.0, nodes: 11 }, Axis { lo: -2.0, hi: 2.0, nodes: 9 }];
        let g = Grid::new(axes, TimeGrid::Finite { maturity: 1.0, steps: 200 }).unwrap();
        let c = ChainApprox::build(&m, &g, 0).unwrap();
        for node in 0..g.node_count() {
            let s: f64 = c.row(node).map(|(_, p)| p).sum();
            assert!((s - 1.0).abs() <= ROW_SUM_TOL);
            assert!(c.row(node).all(|(_, p)| p >= 0.0));
        }
        // Interior mean displacement equals bΔt on both axes.
        let node = g.node_of(&[5, 6]);
        let x = g.coords(node);
        let dt = g.dt();
        let mut mean = [0.0; 2];
        for (col, p) in c.row(node) {
            let y = g.coords(col);
            mean[0] += p * (y[0] - x[0]);
            mean[1] += p * (y[1] - x[1]);
        }
        assert!((mean[0] - x[1] * dt).abs() < 1e-14);
        assert!((mean[1] + x[0] * dt).abs() < 1e-14);
    }

    #[test]
    fn expected_next_examples() {
        let g = fin_grid(-1.0, 1.0, 21, 0.004);
        let c = ChainApprox::build(&model("1", "0"), &g, 0).unwrap();
        let constant = vec![2.5; 21];
        assert!(c.expected_next(&constant).iter().all(|v| (v - 2.5).abs() < 1e-14));

        let mut indicator = vec![0.0; 21];
        indicator[7] = 1.0;
        let out = c.expected_next(&indicator);
        for node in 0..21 {
            let incoming: f64 = c.row(node).filter(|(col, _)| *col == 7).map(|(_, p)| p).sum();
            assert_eq!(out[node], incoming);
        }

        let linear: Vec<f64> = (0..21).map(|n| g.coords(n)[0]).collect();
        let out = c.expected_next(&linear);
        for node in 1..20 {
            assert!((out[node] - linear[node]).abs() < 1e-15);
        }
    }

    #[test]
    fn weak_consistency_under_refinement() {
        // (E[v(X')] - v(x)) / Δt → A v = ½σ²v'' + b v' for v = x², at x = 0.3.
        let m = model("0.8", "0.5 - x1");
        let v = |x: f64| x * x;
        let gen = |x: f64| 0.64 + (0.5 - x) * 2.0 * x;
        let mut errors = Vec::new();
        for level in 0..4 {
            let nodes = 20 * (1 << level) + 1;
            let h = 2.0 / (nodes - 1) as f64;
            let dt = 0.5 * h * h;
            let steps = (1.0 / dt).round() as usize;
            let g = Grid::new(line(-1.0, 1.0, nodes), TimeGrid::Finite { maturity: 1.0, steps }).unwrap();
            let c = ChainApprox::build(&m, &g, 0).unwrap();
            let field: Vec<f64> = (0..nodes).map(|n| v(g.coords(n)[0])).collect();
            let out = c.expected_next(&field);
            let node = g.nearest_node(&[0.3]).0;
            let x = g.coords(node)[0];
            errors.push(((out[node] - field[node]) / g.dt() - gen(x)).abs());
        }
        for w in errors.windows(2) {
            assert!(w[1] < w[0] * 0.75, "{errors:?}");
        }
        assert!(errors[3] < 0.02, "{errors:?}");
    }

    #[test]
    fn nearest_node_clamps() {
        let g = fin_grid(-1.0, 1.0, 21, 0.004);
        assert_eq!(g.nearest_node(&[0.04]), (10, false));
        assert_eq!(g.nearest_node(&[0.06]), (11, false));
        assert_eq!(g.nearest_node(&[-3.0]), (0, true));
        assert_eq!(g.nearest_node(&[3.0]), (20, true));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rows_are_probabilities_and_expectation_is_monotone(
                sigma in 0.0f64..2.0,
                slope in -2.0f64..2.0,
                shift in -1.0f64..1.0,
                nodes in 3usize..30,
                f1 in prop::collection::vec(-5.0f64..5.0, 30),
                bumps in prop::collection::vec(0.0f64..1.0, 30),
            ) {
                let m = model(&format!("{sigma} * (1 + 0.2*sin(x1))"), &format!("{shift} + {slope}*x1"));
                let g = Grid::new(line(-2.0, 2.0, nodes), TimeGrid::Finite { maturity: 1.0, steps: 1 }).unwrap();
                let load = |c: &ChainError| match c { ChainError::Cfl { max_dt, .. } => *max_dt, _ => unreachable!() };
                let c = match ChainApprox::build(&m, &g, 0) {
                    Ok(c) => c,
                    Err(e) => {
                        let dt = load(&e);
                        let steps = (1.0 / dt).ceil() as usize;
                        let g = Grid::new(line(-2.0, 2.0, nodes), TimeGrid::Finite { maturity: 1.0, steps }).unwrap();
                        ChainApprox::build(&m, &g, 0).unwrap()
                    }
                };
                for node in 0..nodes {
                    let s: f64 = c.row(node).map(|(_, p)| p).sum();
                    prop_assert!((s - 1.0).abs() <= ROW_SUM_TOL);
                    prop_assert!(c.row(node).all(|(_, p)| p >= 0.0));
                }
                let a: Vec<f64> = f1[..nodes].to_vec();
                let b: Vec<f64> = a.iter().zip(&bumps).map(|(x, d)| x + d).collect();
                let (ea, eb) = (c.expected_next(&a), c.expected_next(&b));
                prop_assert!(ea.iter().zip(&eb).all(|(x, y)| x <= y));
            }
        }
    }
}
