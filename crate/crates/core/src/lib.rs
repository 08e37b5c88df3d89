//! Solvers for optimal multi-mode switching with risk of default.
//!
//! The crate computes the value functions of the coupled system of
//! variational inequalities with inter-connected obstacles, on a Markov-chain
//! approximation of the state diffusion, for finite and infinite horizons.
//! It also extracts the optimal switching/default strategy, certifies small
//! instances against brute-force policy enumeration, and checks values by
//! Monte Carlo simulation of the controlled process.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod cli;
pub mod expr;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod solver;
pub mod strategy;

pub use chain::{Axis, ChainApprox, ChainError, Chains, Grid, TimeGrid};
pub use expr::{Expr, ParseError, Var};
pub use model::{obstacle_value, validate, BoxDomain, Horizon, ModelError, ModelText, SwitchingModel, ValidationReport};
pub use oracle::{enumerate, evaluate_policy, ChainProblem, OracleLimits, OracleResult};
pub use policy::{Action, ActionTable};
pub use solver::{check_complementarity, solve, solve_finite, solve_infinite, Scheme, SolveDiagnostics, SolveOptions, ValueField};
pub use strategy::{estimate_j, extract, simulate_path, MCEstimate, PathResult, SimConfig, StrategyRegions, TieBreak};
