//! Actions and per-cell action tables.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// What the controller does in a (mode, time level, node) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Continue,
    Default,
    /// Switch to the given zero-based mode, then act per that mode's cell.
    Switch(usize),
}

/// Labels are `C`, `D` and `S:<j>` with `j` one-based.
impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Continue => write!(f, "C"),
            Action::Default => write!(f, "D"),
            Action::Switch(j) => write!(f, "S:{}", j + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad action label `{0}`")]
pub struct BadLabel(pub String);

impl FromStr for Action {
    type Err = BadLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "C" => Ok(Action::Continue),
            "D" => Ok(Action::Default),
            _ => s
                .strip_prefix("S:")
                .and_then(|j| j.parse::<usize>().ok())
                .filter(|&j| j >= 1)
                .map(|j| Action::Switch(j - 1))
                .ok_or_else(|| BadLabel(s.to_string())),
        }
    }
}

/// How a decision epoch ends after any chained switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    Continue,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("switch chain revisits mode {mode} at level {level}, node {node}")]
    Cycle { level: usize, node: usize, mode: usize },
    #[error("switch from mode {mode} to itself at level {level}, node {node}")]
    SelfSwitch { level: usize, node: usize, mode: usize },
    #[error("switch target {target} out of range at level {level}, node {node}")]
    BadTarget { level: usize, node: usize, target: usize },
}

/// Action per (level, mode, node).
///
/// A table with a single level is stationary: every lookup uses level 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTable {
    levels: usize,
    modes: usize,
    nodes: usize,
    actions: Vec<Action>,
}

impl ActionTable {
    pub fn filled(levels: usize, modes: usize, nodes: usize, action: Action) -> Self {
        ActionTable {
            levels,
            modes,
            nodes,
            actions: vec![action; levels * modes * nodes],
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    fn slot(&self, level: usize, mode: usize, node: usize) -> usize {
        let level = if self.levels == 1 { 0 } else { level };
        (level * self.modes + mode) * self.nodes + node
    }

    pub fn get(&self, level: usize, mode: usize, node: usize) -> Action {
        self.actions[self.slot(level, mode, node)]
    }

    pub fn set(&mut self, level: usize, mode: usize, node: usize, action: Action) {
        let s = self.slot(level, mode, node);
        self.actions[s] = action;
    }

    /// Follows chained switches from `mode` in one cell. Returns the modes
    /// visited (starting with `mode`) and the final action.
    pub fn resolve(&self, level: usize, mode: usize, node: usize) -> Result<(Vec<usize>, Terminal), PolicyError> {
        let mut visited = vec![mode];
        let mut current = mode;
        loop {
            match self.get(level, current, node) {
                Action::Continue => return Ok((visited, Terminal::Continue)),
                Action::Default => return Ok((visited, Terminal::Default)),
                Action::Switch(j) if j == current => {
                    return Err(PolicyError::SelfSwitch { level, node, mode: current })
                }
                Action::Switch(j) if j >= self.modes => {
                    return Err(PolicyError::BadTarget { level, node, target: j })
                }
                Action::Switch(j) => {
                    if visited.contains(&j) {
                        return Err(PolicyError::Cycle { level, node, mode: j });
                    }
                    visited.push(j);
                    current = j;
                }
            }
        }
    }

    /// Rejects tables with self-switches or switch cycles in any cell.
    pub fn check_cycle_free(&self) -> Result<(), PolicyError> {
        for level in 0..self.levels {
            for node in 0..self.nodes {
                for mode in 0..self.modes {
                    self.resolve(level, mode, node)?;
                }
            }
        }
        Ok(())
    }
}
