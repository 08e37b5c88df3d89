//! The switching problem datum.
//!
//! A [`SwitchingModel`] holds `m` operating modes driven by one diffusion
//! `dX = b(t,X) dt + σ(t,X) dB` in `R^k`. In mode `i` the activity earns the
//! profit rate `ψ_i`; moving from `i` to `j` costs `g_ij`; defaulting while in
//! `i` costs `F_i ≥ 0` and ends the activity. Coefficients are [`Expr`]s.
//!
//! Models are built from [`ModelText`], the string form used in config files.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{Expr, ParseError, Var};

/// Time horizon of the control problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Horizon {
    /// Terminal time `T`; all value functions vanish at `T`.
    Finite {
        #[serde(rename = "T")]
        maturity: f64,
    },
    /// Discount rate `r`; coefficients must not depend on `t`.
    Infinite {
        #[serde(rename = "r")]
        discount_rate: f64,
    },
}

impl Horizon {
    pub fn is_finite(&self) -> bool {
        matches!(self, Horizon::Finite { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{field}: {source}")]
    Expression {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("non-finite {what} at t={t}, x={x:?}")]
    NonFinite { what: String, t: f64, x: Vec<f64> },
    #[error("obstacle input is NaN")]
    NanInput,
}

impl ModelError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// JSON-pointer-style location of the offending model field, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            ModelError::Invalid { field, .. } | ModelError::Expression { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Textual model definition, as it appears in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelText {
    /// Number of modes `m`.
    pub modes: usize,
    /// State dimension `k`.
    pub state_dim: usize,
    /// Brownian dimension `d`.
    pub noise_dim: usize,
    pub horizon: Horizon,
    /// `k` drift entries.
    pub drift: Vec<String>,
    /// `k` rows of `d` volatility entries.
    pub volatility: Vec<Vec<String>>,
    /// Profit rates `ψ_i`.
    pub profit: Vec<String>,
    /// `m × m` switching costs; the diagonal must be `null`.
    pub switching_cost: Vec<Vec<Option<String>>>,
    /// Default costs `F_i`.
    pub default_cost: Vec<String>,
    /// Declared switching-cost gap.
    pub alpha: f64,
    /// Declared polynomial growth exponent.
    #[serde(default = "default_growth_exponent")]
    pub growth_exponent: u32,
}

fn default_growth_exponent() -> u32 {
    1
}

impl ModelText {
    /// Parses and checks every field. Error fields are JSON-pointer paths
    /// relative to the model object, e.g. `/profit/0`.
    pub fn compile(&self) -> Result<SwitchingModel, ModelError> {
        let (m, k, d) = (self.modes, self.state_dim, self.noise_dim);
        if m == 0 {
            return Err(ModelError::invalid("/modes", "must be at least 1"));
        }
        if k == 0 {
            return Err(ModelError::invalid("/state_dim", "must be at least 1"));
        }
        if d == 0 {
            return Err(ModelError::invalid("/noise_dim", "must be at least 1"));
        }
        match self.horizon {
            Horizon::Finite { maturity } if !(maturity > 0.0 && maturity.is_finite()) => {
                return Err(ModelError::invalid("/horizon/T", "must be a positive finite number"))
            }
            Horizon::Infinite { discount_rate } if !(discount_rate > 0.0 && discount_rate.is_finite()) => {
                return Err(ModelError::invalid("/horizon/r", "must be a positive finite number"))
            }
            _ => {}
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::invalid("/alpha", "must be a positive finite number"));
        }

        let time_homogeneous = !self.horizon.is_finite();
        let compile_one = |field: String, text: &str| -> Result<Expr, ModelError> {
            let e = Expr::parse(text, k).map_err(|source| ModelError::Expression {
                field: field.clone(),
                source,
            })?;
            if time_homogeneous && e.free_vars().contains(&Var::Time) {
                return Err(ModelError::invalid(
                    field,
                    "infinite-horizon coefficients must not depend on t",
                ));
            }
            Ok(e)
        };
        let compile_vec = |name: &str, items: &[String], len: usize| -> Result<Vec<Expr>, ModelError> {
            if items.len() != len {
                return Err(ModelError::invalid(
                    format!("/{name}"),
                    format!("expected {len} entries, found {}", items.len()),
                ));
            }
            items
                .iter()
                .enumerate()
                .map(|(n, s)| compile_one(format!("/{name}/{n}"), s))
                .collect()
        };

        let drift = compile_vec("drift", &self.drift, k)?;
        if self.volatility.len() != k {
            return Err(ModelError::invalid(
                "/volatility",
                format!("expected {k} rows, found {}", self.volatility.len()),
            ));
        }
        let volatility = self
            .volatility
            .iter()
            .enumerate()
            .map(|(row, entries)| compile_vec(&format!("volatility/{row}"), entries, d))
            .collect::<Result<Vec<_>, _>>()?;
        let profit = compile_vec("profit", &self.profit, m)?;
        let default_cost = compile_vec("default_cost", &self.default_cost, m)?;

        if self.switching_cost.len() != m {
            return Err(ModelError::invalid(
                "/switching_cost",
                format!("expected {m} rows, found {}", self.switching_cost.len()),
            ));
        }
        let mut switching_cost = Vec::with_capacity(m);
        for (i, row) in self.switching_cost.iter().enumerate() {
            if row.len() != m {
                return Err(ModelError::invalid(
                    format!("/switching_cost/{i}"),
                    format!("expected {m} entries, found {}", row.len()),
                ));
            }
            let mut compiled = Vec::with_capacity(m);
            for (j, entry) in row.iter().enumerate() {
                let field = format!("/switching_cost/{i}/{j}");
                compiled.push(match (i == j, entry) {
                    (true, None) => None,
                    (true, Some(_)) => {
                        return Err(ModelError::invalid(field, "self-switch cost must be null"))
                    }
                    (false, None) => return Err(ModelError::invalid(field, "switching cost is required")),
                    (false, Some(s)) => Some(compile_one(field, s)?),
                });
            }
            switching_cost.push(compiled);
        }

        Ok(SwitchingModel {
            modes: m,
            state_dim: k,
            noise_dim: d,
            horizon: self.horizon,
            drift,
            volatility,
            profit,
            switching_cost,
            default_cost,
            alpha: self.alpha,
            growth_exponent: self.growth_exponent,
        })
    }
}

/// Compiled switching problem. Immutable; all queries are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingModel {
    modes: usize,
    state_dim: usize,
    noise_dim: usize,
    horizon: Horizon,
    drift: Vec<Expr>,
    volatility: Vec<Vec<Expr>>,
    profit: Vec<Expr>,
    switching_cost: Vec<Vec<Option<Expr>>>,
    default_cost: Vec<Expr>,
    alpha: f64,
    growth_exponent: u32,
}

impl SwitchingModel {
    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn growth_exponent(&self) -> u32 {
        self.growth_exponent
    }

    pub fn profit(&self, i: usize, t: f64, x: &[f64]) -> f64 {
        self.profit[i].eval(t, x)
    }

    pub fn default_cost(&self, i: usize, t: f64, x: &[f64]) -> f64 {
        self.default_cost[i].eval(t, x)
    }

    /// `g_ij(t,x)`; `i != j`.
    pub fn switching_cost(&self, i: usize, j: usize, t: f64, x: &[f64]) -> f64 {
        match &self.switching_cost[i][j] {
            Some(e) => e.eval(t, x),
            None => panic!("no self-switch cost for mode {i}"),
        }
    }

    /// Row `g_i·(t,x)` with `NaN` on the diagonal slot.
    pub fn switching_row(&self, i: usize, t: f64, x: &[f64]) -> Vec<f64> {
        self.switching_cost[i]
            .iter()
            .map(|g| g.as_ref().map_or(f64::NAN, |e| e.eval(t, x)))
            .collect()
    }

    /// Drift `b(t,x)` and diffusion matrix `a = σσ*` at `(t,x)`.
    pub fn drift_diffusion(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let b: Vec<f64> = self.drift.iter().map(|e| e.eval(t, x)).collect();
        let sigma = self.volatility_at(t, x);
        let k = self.state_dim;
        let mut a = vec![vec![0.0; k]; k];
        for r in 0..k {
            for c in 0..=r {
                let v: f64 = (0..self.noise_dim).map(|l| sigma[r][l] * sigma[c][l]).sum();
                a[r][c] = v;
                a[c][r] = v;
            }
        }
        let non_finite = |what: &str| ModelError::NonFinite {
            what: what.to_string(),
            t,
            x: x.to_vec(),
        };
        if b.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("drift"));
        }
        if a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(non_finite("volatility"));
        }
        Ok((b, a))
    }

    pub fn drift_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.drift.iter().map(|e| e.eval(t, x)).collect()
    }

    pub fn volatility_at(&self, t: f64, x: &[f64]) -> Vec<Vec<f64>> {
        self.volatility
            .iter()
            .map(|row| row.iter().map(|e| e.eval(t, x)).collect())
            .collect()
    }

    /// True when `b` and `σ` do not depend on `t`.
    pub fn dynamics_time_free(&self) -> bool {
        self.drift
            .iter()
            .chain(self.volatility.iter().flatten())
            .all(|e| !e.depends_on_time())
    }

    /// True when every coefficient is free of `t`.
    pub fn time_homogeneous(&self) -> bool {
        self.dynamics_time_free()
            && self
                .profit
                .iter()
                .chain(self.default_cost.iter())
                .chain(self.switching_cost.iter().flatten().flatten())
                .all(|e| !e.depends_on_time())
    }

    /// Stable hex digest of the compiled model.
    pub fn fingerprint(&self) -> String {
        let mut canon = String::new();
        let _ = write!(
            canon,
            "m={};k={};d={};horizon={:?};alpha={:?};mu={};",
            self.modes, self.state_dim, self.noise_dim, self.horizon, self.alpha, self.growth_exponent
        );
        let mut push = |tag: &str, e: &Expr| {
            let _ = write!(canon, "{tag}={e};");
        };
        self.drift.iter().for_each(|e| push("b", e));
        self.volatility.iter().flatten().for_each(|e| push("s", e));
        self.profit.iter().for_each(|e| push("psi", e));
        self.default_cost.iter().for_each(|e| push("F", e));
        for row in &self.switching_cost {
            for g in row {
                match g {
                    Some(e) => push("g", e),
                    None => push("g", &Expr::Num(f64::NAN)),
                }
            }
        }
        hex_digest(canon.as_bytes())
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Best alternative to continuing in mode `i`:
/// `max( max_{j≠i}(−g_ij + v_j), −F_i )`.
///
/// `g_row[i]` is ignored. With one mode the switch set is empty and the
/// result is `−F_i`.
pub fn obstacle_value(i: usize, v: &[f64], g_row: &[f64], default_cost: f64) -> Result<f64, ModelError> {
    if default_cost.is_nan() {
        return Err(ModelError::NanInput);
    }
    let mut best = -default_cost;
    for (j, (&vj, &gij)) in v.iter().zip(g_row).enumerate() {
        if j == i {
            continue;
        }
        let candidate = vj - gij;
        if candidate.is_nan() {
            return Err(ModelError::NanInput);
        }
        if candidate > best {
            best = candidate;
        }
    }
    Ok(best)
}

/// Axis-aligned box in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub values: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn has_failures(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Fail)
    }

    pub fn has_warnings(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Warn)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut n: u64, base: u32) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut out) = (inv, 0.0);
    while n > 0 {
        out += (n % base as u64) as f64 * f;
        n /= base as u64;
        f *= inv;
    }
    out
}

/// Halton points with a seeded Cranley–Patterson shift, plus the box centre.
fn sample_points(model: &SwitchingModel, domain: &BoxDomain, samples: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let k = model.state_dim;
    let maturity = match model.horizon {
        Horizon::Finite { maturity } => Some(maturity),
        Horizon::Infinite { .. } => None,
    };
    let dims = k + usize::from(maturity.is_some());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dims).map(|_| rng.random::<f64>()).collect();

    let centre: Vec<f64> = (0..k).map(|j| 0.5 * (domain.lo[j] + domain.hi[j])).collect();
    let mut pts = vec![(0.0, centre)];
    for n in 1..=samples as u64 {
        let u: Vec<f64> = (0..dims)
            .map(|d| (radical_inverse(n, PRIMES[d % PRIMES.len()]) + shift[d]).fract())
            .collect();
        let x = (0..k).map(|j| domain.lo[j] + u[j] * (domain.hi[j] - domain.lo[j])).collect();
        let t = maturity.map_or(0.0, |tm| u[k] * tm);
        pts.push((t, x));
    }
    pts
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Samples the standing assumptions on a quasi-random point set in `domain`.
///
/// Hard checks (`fail`): finite coefficients, `F_i ≥ 0`, and the switching
/// cost bounds (`g_ij ≥ α` for a finite horizon, `1/α ≤ g_ij ≤ α` for an
/// infinite one). Growth and Lipschitz estimates only ever `warn`.
pub fn validate(model: &SwitchingModel, domain: &BoxDomain, samples: usize, seed: u64) -> Result<ValidationReport, ModelError> {
    let k = model.state_dim;
    if domain.lo.len() != k || domain.hi.len() != k {
        return Err(ModelError::invalid("/box", format!("box must have {k} coordinates")));
    }
    if (0..k).any(|j| !(domain.lo[j] < domain.hi[j]) || !domain.lo[j].is_finite() || !domain.hi[j].is_finite()) {
        return Err(ModelError::invalid("/box", "each axis needs finite lo < hi"));
    }
    if samples == 0 {
        return Err(ModelError::invalid("/samples", "must be at least 1"));
    }
    let m = model.modes;
    let points = sample_points(model, domain, samples, seed);
    let mut checks = Vec::new();

    // Finite values.
    let mut nan_witness = None;
    'outer: for (t, x) in &points {
        let mut values = Vec::new();
        for i in 0..m {
            values.push((format!("psi{}", i + 1), model.profit(i, *t, x)));
            values.push((format!("F{}", i + 1), model.default_cost(i, *t, x)));
            for j in (0..m).filter(|&j| j != i) {
                values.push((format!("g{}{}", i + 1, j + 1), model.switching_cost(i, j, *t, x)));
            }
        }
        for (l, v) in model.drift_at(*t, x).into_iter().enumerate() {
            values.push((format!("b{}", l + 1), v));
        }
        for (r, row) in model.volatility_at(*t, x).into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                values.push((format!("sigma{}{}", r + 1, c + 1), v));
            }
        }
        let bad: Vec<_> = values.into_iter().filter(|(_, v)| !v.is_finite()).collect();
        if !bad.is_empty() {
            nan_witness = Some(Witness { t: *t, x: x.clone(), values: bad });
            break 'outer;
        }
    }
    checks.push(match nan_witness {
        Some(w) => Check {
            name: "finite_values".into(),
            status: CheckStatus::Fail,
            detail: "a coefficient evaluated to NaN or infinity".into(),
            witness: Some(w),
        },
        None => Check {
            name: "finite_values".into(),
            status: CheckStatus::Pass,
            detail: format!("{} points", points.len()),
            witness: None,
        },
    });

    // Switching cost bounds.
    if m > 1 {
        let alpha = model.alpha;
        let (lower, upper) = match model.horizon {
            Horizon::Finite { .. } => (alpha, f64::INFINITY),
            Horizon::Infinite { .. } => (1.0 / alpha, alpha),
        };
        let mut worst: Option<(f64, Witness)> = None;
        for (t, x) in &points {
            for i in 0..m {
                for j in (0..m).filter(|&j| j != i) {
                    let g = model.switching_cost(i, j, *t, x);
                    let excess = if g.is_nan() {
                        f64::INFINITY
                    } else {
                        (lower - g).max(g - upper)
                    };
                    if worst.as_ref().is_none_or(|(e, _)| excess > *e) {
                        worst = Some((
                            excess,
                            Witness {
                                t: *t,
                                x: x.clone(),
                                values: vec![(format!("g{}{}", i + 1, j + 1), g)],
                            },
                        ));
                    }
                }
            }
        }
        let (excess, witness) = worst.expect("m > 1 yields at least one cost");
        let (name, bound) = match model.horizon {
            Horizon::Finite { .. } => ("switch_cost_lower_bound", format!("g_ij >= alpha = {alpha}")),
            Horizon::Infinite { .. } => ("switch_cost_bounds", format!("1/alpha = {lower} <= g_ij <= alpha = {alpha}")),
        };
        checks.push(Check {
            name: name.into(),
            status: if excess > 0.0 { CheckStatus::Fail } else { CheckStatus::Pass },
            detail: bound,
            witness: Some(witness),
        });
    }

    // Default costs.
    let mut worst_f: Option<(f64, Witness)> = None;
    for (t, x) in &points {
        for i in 0..m {
            let f = model.default_cost(i, *t, x);
            let key = if f.is_nan() { f64::NEG_INFINITY } else { f };
            if worst_f.as_ref().is_none_or(|(v, _)| key < *v) {
                worst_f = Some((
                    key,
                    Witness {
                        t: *t,
                        x: x.clone(),
                        values: vec![(format!("F{}", i + 1), f)],
                    },
                ));
            }
        }
    }
    let (min_f, w) = worst_f.expect("at least one mode");
    checks.push(Check {
        name: "default_cost_nonnegative".into(),
        status: if min_f >= 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
        detail: format!("min F_i = {min_f}"),
        witness: Some(w),
    });

    // Polynomial growth of the cost data, fitted on the whole box and on its
    // inner half; a constant that keeps growing toward the faces is flagged.
    let centre: Vec<f64> = (0..k).map(|j| 0.5 * (domain.lo[j] + domain.hi[j])).collect();
    let inner = |x: &[f64]| (0..k).all(|j| (x[j] - centre[j]).abs() <= 0.25 * (domain.hi[j] - domain.lo[j]));
    let mu = model.growth_exponent as i32;
    let growth_ratio = |t: f64, x: &[f64]| {
        let mut s = 0.0;
        for i in 0..m {
            s += model.profit(i, t, x).abs() + model.default_cost(i, t, x).abs();
            for j in (0..m).filter(|&j| j != i) {
                s += model.switching_cost(i, j, t, x).abs();
            }
        }
        s / (1.0 + norm(x).powi(mu))
    };
    checks.push(fitted_growth_check("cost_growth", &points, &inner, growth_ratio, format!("mu = {mu}")));

    let linear_ratio = |t: f64, x: &[f64]| {
        let b = norm(&model.drift_at(t, x));
        let s = norm(&model.volatility_at(t, x).concat());
        (b + s) / (1.0 + norm(x))
    };
    checks.push(fitted_growth_check("dynamics_linear_growth", &points, &inner, linear_ratio, "exponent 1".into()));

    checks.push(lipschitz_check(model, domain, &points));

    Ok(ValidationReport { samples, seed, checks })
}

fn fitted_growth_check(
    name: &str,
    points: &[(f64, Vec<f64>)],
    inner: &dyn Fn(&[f64]) -> bool,
    ratio: impl Fn(f64, &[f64]) -> f64,
    label: String,
) -> Check {
    let (mut full, mut inside) = (0.0f64, 0.0f64);
    let mut witness = None;
    for (t, x) in points {
        let r = ratio(*t, x);
        if !r.is_finite() {
            continue;
        }
        if r > full {
            full = r;
            witness = Some(Witness {
                t: *t,
                x: x.clone(),
                values: vec![("ratio".into(), r)],
            });
        }
        if inner(x) {
            inside = inside.max(r);
        }
    }
    let growing = full > 2.0 * inside + 1e-12;
    Check {
        name: name.into(),
        status: if growing { CheckStatus::Warn } else { CheckStatus::Pass },
        detail: format!(
            "fitted C = {full} on box, {inside} on inner half ({label}){}",
            if growing { "; constant grows toward the faces" } else { "" }
        ),
        witness,
    }
}

/// Compares difference quotients of `b` and `σ` at two step sizes. Slopes that
/// blow up under refinement suggest a non-Lipschitz coefficient.
fn lipschitz_check(model: &SwitchingModel, domain: &BoxDomain, points: &[(f64, Vec<f64>)]) -> Check {
    let k = model.state_dim;
    let coeffs = |t: f64, x: &[f64]| -> Vec<f64> {
        let mut v = model.drift_at(t, x);
        v.extend(model.volatility_at(t, x).concat());
        v
    };
    let slope = |rel: f64| -> (f64, Option<Witness>) {
        let mut best = 0.0f64;
        let mut witness = None;
        for (t, x) in points {
            let base = coeffs(*t, x);
            for j in 0..k {
                let h = rel * (domain.hi[j] - domain.lo[j]);
                let mut y = x.clone();
                y[j] += h;
                let moved = coeffs(*t, &y);
                let s = base
                    .iter()
                    .zip(&moved)
                    .map(|(a, b)| (b - a).abs() / h)
                    .fold(0.0, f64::max);
                if s.is_finite() && s > best {
                    best = s;
                    witness = Some(Witness {
                        t: *t,
                        x: x.clone(),
                        values: vec![("slope".into(), s)],
                    });
                }
            }
        }
        (best, witness)
    };
    let (coarse, _) = slope(1e-3);
    let (fine, witness) = slope(1e-6);
    let blowup = fine > 10.0 * coarse + 1e-9;
    Check {
        name: "dynamics_lipschitz".into(),
        status: if blowup { CheckStatus::Warn } else { CheckStatus::Pass },
        detail: format!("estimated L = {coarse} (step 1e-3 of width), {fine} (step 1e-6)"),
        witness,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn text(m: usize, horizon: Horizon, profit: &[&str], g: &str, f: &[&str], sigma: &str, b: &str) -> ModelText {
        ModelText {
            modes: m,
            state_dim: 1,
            noise_dim: 1,
            horizon,
            drift: vec![b.into()],
            volatility: vec![vec![sigma.into()]],
            profit: profit.iter().map(|s| s.to_string()).collect(),
            switching_cost: (0..m)
                .map(|i| (0..m).map(|j| (i != j).then(|| g.to_string())).collect())
                .collect(),
            default_cost: f.iter().map(|s| s.to_string()).collect(),
            alpha: 0.5,
            growth_exponent: 1,
        }
    }

    const FIN: Horizon = Horizon::Finite { maturity: 1.0 };

    #[test]
    fn obstacle_examples() {
        let nan = f64::NAN;
        assert_eq!(obstacle_value(0, &[nan, 5.0, 7.0], &[nan, 1.0, 4.0], 2.0).unwrap(), 4.0);
        assert_eq!(obstacle_value(0, &[0.0], &[nan], 3.0).unwrap(), -3.0);
        assert_eq!(
            obstacle_value(0, &[-100.0, -100.0, -100.0], &[nan, 1.0, 1.0], 2.0).unwrap(),
            -2.0
        );
        assert_eq!(obstacle_value(0, &[0.0, nan], &[nan, 1.0], 2.0), Err(ModelError::NanInput));
        assert_eq!(obstacle_value(0, &[0.0], &[nan], nan), Err(ModelError::NanInput));
    }

    #[test]
    fn drift_diffusion_examples() {
        let mut t = text(1, FIN, &["1"], "1", &["1"], "2", "x1");
        let model = t.compile().unwrap();
        let (b, a) = model.drift_diffusion(0.0, &[3.0]).unwrap();
        assert_eq!(b, vec![3.0]);
        assert_eq!(a, vec![vec![4.0]]);

        t.state_dim = 2;
        t.noise_dim = 2;
        t.drift = vec!["0".into(), "0".into()];
        t.volatility = vec![vec!["1".into(), "0".into()], vec!["0".into(), "1".into()]];
        let (_, a) = t.compile().unwrap().drift_diffusion(0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(a, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

        let nan_model = text(1, FIN, &["1"], "1", &["1"], "sqrt(x1)", "0").compile().unwrap();
        assert!(matches!(nan_model.drift_diffusion(0.0, &[-1.0]), Err(ModelError::NonFinite { .. })));
    }

    #[test]
    fn compile_rejects_bad_shapes() {
        let mut t = text(2, FIN, &["1", "1"], "1", &["1", "1"], "1", "0");
        t.modes = 0;
        assert_eq!(t.compile().unwrap_err().field(), Some("/modes"));
        let mut t = text(2, FIN, &["1", "x9"], "1", &["1", "1"], "1", "0");
        assert_eq!(t.compile().unwrap_err().field(), Some("/profit/1"));
        t.profit[1] = "1".into();
        t.switching_cost[0][0] = Some("1".into());
        assert_eq!(t.compile().unwrap_err().field(), Some("/switching_cost/0/0"));
        t.switching_cost[0][0] = None;
        t.switching_cost[1][0] = None;
        assert_eq!(t.compile().unwrap_err().field(), Some("/switching_cost/1/0"));
        let t = text(1, Horizon::Infinite { discount_rate: 0.1 }, &["t"], "1", &["1"], "1", "0");
        assert_eq!(t.compile().unwrap_err().field(), Some("/profit/0"));
    }

    fn boxed(lo: f64, hi: f64) -> BoxDomain {
        BoxDomain { lo: vec![lo], hi: vec![hi] }
    }

    #[test]
    fn validate_examples() {
        let t = text(2, FIN, &["1", "1"], "1", &["1", "1"], "1", "0");
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 64, 3).unwrap();
        assert_eq!(r.check("switch_cost_lower_bound").unwrap().status, CheckStatus::Pass);
        assert!(!r.has_failures());

        let t = text(2, FIN, &["1", "1"], "abs(x1)", &["1", "1"], "1", "0");
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 64, 3).unwrap();
        let c = r.check("switch_cost_lower_bound").unwrap();
        assert_eq!(c.status, CheckStatus::Fail);
        assert!(c.witness.as_ref().unwrap().x[0].abs() < 0.1);

        let mut t = text(2, Horizon::Infinite { discount_rate: 0.1 }, &["1", "1"], "3", &["1", "1"], "1", "0");
        t.alpha = 2.0;
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 64, 3).unwrap();
        assert_eq!(r.check("switch_cost_bounds").unwrap().status, CheckStatus::Fail);
        t.switching_cost = vec![vec![None, Some("1".into())], vec![Some("0.5".into()), None]];
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 64, 3).unwrap();
        assert_eq!(r.check("switch_cost_bounds").unwrap().status, CheckStatus::Pass);
    }

    #[test]
    fn validate_soft_and_nan_checks() {
        let t = text(1, FIN, &["1"], "1", &["-1"], "1", "0");
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 16, 0).unwrap();
        assert_eq!(r.check("default_cost_nonnegative").unwrap().status, CheckStatus::Fail);

        let t = text(1, FIN, &["log(x1)"], "1", &["1"], "1", "0");
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 16, 0).unwrap();
        let c = r.check("finite_values").unwrap();
        assert_eq!(c.status, CheckStatus::Fail);
        assert!(c.witness.as_ref().unwrap().x[0] <= 0.0);

        let t = text(1, FIN, &["x1^4"], "1", &["1"], "1", "0");
        let r = validate(&t.compile().unwrap(), &boxed(-5.0, 5.0), 64, 0).unwrap();
        assert_eq!(r.check("cost_growth").unwrap().status, CheckStatus::Warn);
        assert!(!r.has_failures());

        let t = text(1, FIN, &["1"], "1", &["1"], "sqrt(abs(x1))", "0");
        let r = validate(&t.compile().unwrap(), &boxed(-1.0, 1.0), 16, 0).unwrap();
        assert_eq!(r.check("dynamics_lipschitz").unwrap().status, CheckStatus::Warn);
    }

    #[test]
    fn validate_is_deterministic() {
        let t = text(2, FIN, &["x1", "sin(t)"], "1 + x1^2", &["1", "1"], "1", "0");
        let m = t.compile().unwrap();
        let a = validate(&m, &boxed(-2.0, 2.0), 50, 11).unwrap();
        let b = validate(&m, &boxed(-2.0, 2.0), 50, 11).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn classify(i: usize, v: &[f64], g: &[f64], f: f64) -> bool {
            // true when a switch attains the max
            let o = obstacle_value(i, v, g, f).unwrap();
            o > -f
        }

        proptest! {
            #[test]
            fn monotone_in_inputs(
                v in prop::collection::vec(-10.0f64..10.0, 3),
                g in prop::collection::vec(0.1f64..5.0, 3),
                f in 0.0f64..5.0,
                bump in 0.0f64..3.0,
                j in 1usize..3,
            ) {
                let base = obstacle_value(0, &v, &g, f).unwrap();
                let mut v2 = v.clone();
                v2[j] += bump;
                prop_assert!(obstacle_value(0, &v2, &g, f).unwrap() >= base);
                prop_assert!(obstacle_value(0, &v, &g, f + bump).unwrap() <= base);
                let mut g2 = g.clone();
                g2[j] += bump;
                prop_assert!(obstacle_value(0, &v, &g2, f).unwrap() <= base);
            }

            #[test]
            fn shift_additivity_by_branch(
                v in prop::collection::vec(-10.0f64..10.0, 3),
                g in prop::collection::vec(0.1f64..5.0, 3),
                f in 0.0f64..5.0,
                c in -3.0f64..3.0,
            ) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let (a, b) = (obstacle_value(0, &v, &g, f).unwrap(), obstacle_value(0, &shifted, &g, f).unwrap());
                match (classify(0, &v, &g, f), classify(0, &shifted, &g, f)) {
                    (true, true) => prop_assert!((b - (a + c)).abs() <= 1e-12),
                    (false, false) => prop_assert_eq!(a, b),
                    _ => {}
                }
            }
        }
    }
}
