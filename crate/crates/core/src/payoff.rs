//! Per-time nonnegative reward functions and the truncation operator.
//!
//! Discounting is folded into the payoff: variant evaluations are multiplied
//! by `discount^t`, so a market with continuously compounded rate `r` and
//! step length `dt` maps to `discount = exp(-r dt)`. There is no separate
//! discounting concept anywhere else in the engine.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::FiniteChain;

/// Tabulated payoff on a finite chain: one value per `(time, state)`.
#[derive(Debug, Clone)]
pub struct TablePayoff {
    /// State vectors the table is keyed on, matched by exact equality.
    pub states: Vec<Vec<f64>>,
    /// `values[t][j]` is the payoff at time `t` in state `j`; `T + 1` rows.
    pub values: Vec<Vec<f64>>,
}

impl TablePayoff {
    /// Builds a table for `chain` from `(t, state index, value)` rows, e.g.
    /// parsed from CSV. Missing entries default to zero.
    pub fn from_rows(chain: &FiniteChain, rows: &[(usize, usize, f64)]) -> Result<Self> {
        let k = chain.num_states();
        let horizon = chain.horizon();
        let mut values = vec![vec![0.0; k]; horizon + 1];
        for &(t, j, v) in rows {
            if t > horizon {
                return Err(Error::Argument(format!(
                    "table payoff: time {t} exceeds horizon {horizon}"
                )));
            }
            if j >= k {
                return Err(Error::Argument(format!(
                    "table payoff: state index {j} out of range for {k} states"
                )));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "table payoff: value at (t={t}, state={j}) must be finite and nonnegative"
                )));
            }
            values[t][j] = v;
        }
        Ok(TablePayoff {
            states: chain.states.clone(),
            values,
        })
    }
}

/// The payoff variant. `Put`, `Call`, and `MaxCall` evaluate intrinsic
/// values with a per-step discount factor baked in; `Table` looks states up
/// on a finite chain; `Custom` wraps an arbitrary nonnegative function.
#[derive(Clone)]
pub enum PayoffKind {
    /// `discount^t * (K - x_0)^+`.
    Put { strike: f64, discount: f64 },
    /// `discount^t * (x_0 - K)^+`.
    Call { strike: f64, discount: f64 },
    /// `discount^t * (max_j x_j - K)^+`.
    MaxCall { strike: f64, discount: f64 },
    /// Per-(time, state) values on a finite chain.
    Table(TablePayoff),
    /// `f(t, x)`; must be nonnegative.
    Custom(Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for PayoffKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PayoffKind::Put { strike, discount } => {
                write!(f, "Put {{ strike: {strike}, discount: {discount} }}")
            }
            PayoffKind::Call { strike, discount } => {
                write!(f, "Call {{ strike: {strike}, discount: {discount} }}")
            }
            PayoffKind::MaxCall { strike, discount } => {
                write!(f, "MaxCall {{ strike: {strike}, discount: {discount} }}")
            }
            PayoffKind::Table(_) => write!(f, "Table"),
            PayoffKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A per-time reward function `f_t >= 0` with an optional truncation level.
///
/// When `truncation` is set, every evaluation returns the truncated payoff,
/// so the whole engine (fitting, stopping, pricing) operates on the
/// truncated problem.
#[derive(Debug, Clone)]
pub struct PayoffSpec {
    kind: PayoffKind,
    horizon: usize,
    truncation: Option<f64>,
}

impl PayoffSpec {
    /// Wraps a payoff kind for a problem with horizon `T`.
    pub fn new(kind: PayoffKind, horizon: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::Validation("payoff: horizon must be >= 1".into()));
        }
        match &kind {
            PayoffKind::Put { strike, discount }
            | PayoffKind::Call { strike, discount }
            | PayoffKind::MaxCall { strike, discount } => {
                if !strike.is_finite() || *strike < 0.0 {
                    return Err(Error::Validation(
                        "payoff: strike must be finite and nonnegative".into(),
                    ));
                }
                if !(*discount > 0.0 && *discount <= 1.0) {
                    return Err(Error::Validation("payoff: discount must be in (0, 1]".into()));
                }
            }
            PayoffKind::Table(t) => {
                if t.values.len() != horizon + 1 {
                    return Err(Error::Validation(format!(
                        "payoff: table has {} time rows, expected {}",
                        t.values.len(),
                        horizon + 1
                    )));
                }
            }
            PayoffKind::Custom(_) => {}
        }
        Ok(PayoffSpec {
            kind,
            horizon,
            truncation: None,
        })
    }

    /// Convenience constructor for a discounted put.
    pub fn put(horizon: usize, strike: f64, discount: f64) -> Result<Self> {
        PayoffSpec::new(PayoffKind::Put { strike, discount }, horizon)
    }

    /// Convenience constructor for a discounted call.
    pub fn call(horizon: usize, strike: f64, discount: f64) -> Result<Self> {
        PayoffSpec::new(PayoffKind::Call { strike, discount }, horizon)
    }

    /// Sets the truncation level `beta > 0`; all evaluations are capped there.
    pub fn with_truncation(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Argument("payoff: truncation level must be positive".into()));
        }
        self.truncation = Some(beta);
        Ok(self)
    }

    /// The configured truncation level, if any.
    pub fn truncation(&self) -> Option<f64> {
        self.truncation
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The wrapped payoff kind.
    pub fn kind(&self) -> &PayoffKind {
        &self.kind
    }

    /// Evaluates `f_t(x)` (truncated when a level is set).
    pub fn evaluate(&self, t: usize, x: &[f64]) -> Result<f64> {
        if t > self.horizon {
            return Err(Error::Argument(format!(
                "payoff: time {t} out of range 0..={}",
                self.horizon
            )));
        }
        let raw = match &self.kind {
            PayoffKind::Put { strike, discount } => discount.powi(t as i32) * (strike - x[0]).max(0.0),
            PayoffKind::Call { strike, discount } => discount.powi(t as i32) * (x[0] - strike).max(0.0),
            PayoffKind::MaxCall { strike, discount } => {
                let best = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                discount.powi(t as i32) * (best - strike).max(0.0)
            }
            PayoffKind::Table(table) => {
                let j = table
                    .states
                    .iter()
                    .position(|s| s.as_slice() == x)
                    .ok_or_else(|| Error::Lookup(format!("table payoff: unknown state {x:?}")))?;
                table.values[t][j]
            }
            PayoffKind::Custom(f) => f(t, x),
        };
        debug_assert!(raw >= 0.0, "payoff must be nonnegative, got {raw} at t={t}");
        Ok(match self.truncation {
            Some(beta) => truncate(raw, beta).expect("beta validated positive"),
            None => raw,
        })
    }

    /// The largest payoff over a finite chain's states and all times.
    /// Used as the cash-flow bound `Theta` in diagnostics.
    pub fn sup_on_chain(&self, chain: &FiniteChain) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for t in 0..=self.horizon {
            for s in &chain.states {
                sup = sup.max(self.evaluate(t, s)?);
            }
        }
        Ok(sup)
    }
}

/// The truncation operator: `g` if `|g| <= beta`, else `sign(g) * beta`.
/// Idempotent and 1-Lipschitz.
pub fn truncate(g: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Argument("truncate: beta must be positive".into()));
    }
    Ok(if g.abs() <= beta { g } else { g.signum() * beta })
}
