//! HyperBand-style fidelity ladders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LadderError {
    #[error("budgets must satisfy 0 < min_budget < max_budget <= 1 (got min {min}, max {max})")]
    Bounds { min: f64, max: f64 },
    #[error("eta must be greater than 1 (got {0})")]
    Eta(f64),
}

/// Slack for comparisons against the minimum budget and for flooring
/// capacities, so that e.g. `1 / 0.04` counts as 25.
const SLACK: f64 = 1e-9;

/// Budget fractions for each rung, stored ascending; the last rung is always
/// `max_budget` and consecutive rungs differ by a factor of `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLadder {
    pub eta: f64,
    pub min_budget: f64,
    pub max_budget: f64,
    rungs: Vec<f64>,
}

impl BudgetLadder {
    /// Anchors the ladder at `max_budget` and descends by `eta` while the
    /// budget stays at or above `min_budget`.
    pub fn new(min_budget: f64, max_budget: f64, eta: f64) -> Result<Self, LadderError> {
        if !(min_budget > 0.0 && min_budget < max_budget && max_budget <= 1.0) {
            return Err(LadderError::Bounds { min: min_budget, max: max_budget });
        }
        if eta <= 1.0 || !eta.is_finite() {
            return Err(LadderError::Eta(eta));
        }
        let mut rungs = Vec::new();
        let mut k = 0;
        loop {
            let b = max_budget / eta.powi(k);
            if b < min_budget * (1.0 - SLACK) {
                break;
            }
            rungs.push(b);
            k += 1;
        }
        rungs.reverse();
        Ok(Self { eta, min_budget, max_budget, rungs })
    }

    /// Rung budgets, lowest first.
    pub fn rungs(&self) -> &[f64] {
        &self.rungs
    }

    pub fn len(&self) -> usize {
        self.rungs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rungs.is_empty()
    }

    pub fn budget(&self, rung: usize) -> f64 {
        self.rungs[rung]
    }

    /// Number of configurations a rung evaluates so that it spends the
    /// equivalent of one run at `max_budget`.
    pub fn rung_capacity(&self, rung: usize) -> usize {
        ((self.max_budget / self.rungs[rung] + SLACK).floor() as usize).max(1)
    }

    /// Budget spent by one full pass over `rung`, in full-run equivalents.
    pub fn rung_spend(&self, rung: usize) -> f64 {
        self.rung_capacity(rung) as f64 * self.rungs[rung]
    }
}

pub fn ladder(min_budget: f64, max_budget: f64, eta: f64) -> Result<BudgetLadder, LadderError> {
    BudgetLadder::new(min_budget, max_budget, eta)
}
