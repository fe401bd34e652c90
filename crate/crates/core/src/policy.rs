//! Markov stopping rules and the cash flow functions they induce.
//!
//! A stopping rule is parameterized by a vector of per-time functions
//! `h = (h_0, ..., h_T)` with the terminal slot tied to the payoff
//! (`h_T = f_T`): starting from `t`, stop at the first `s` with
//! `f_s(x_s) >= h_s(x_s)`. Ties stop — the stop indicator is
//! `1_{f - h >= 0}` — which differs from implementations that use strict
//! inequality. The terminal tie makes `s = T` always a stop, so every rule
//! is a valid stopping time.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::{FiniteChain, PathView};
use crate::payoff::PayoffSpec;

/// Per-time evaluable functions `h_0, ..., h_{T-1}`; the terminal entry is
/// structurally payoff-tied and never stored.
#[derive(Clone)]
pub struct FunctionVector {
    horizon: usize,
    fns: Vec<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
}

impl std::fmt::Debug for FunctionVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionVector")
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl FunctionVector {
    /// Wraps `T` functions for times `0..T`. The slot at `T` is implicit.
    pub fn new(
        horizon: usize,
        fns: Vec<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    ) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::Validation("function vector: horizon must be >= 1".into()));
        }
        if fns.len() != horizon {
            return Err(Error::Validation(format!(
                "function vector: expected {horizon} functions for times 0..{horizon}, got {}",
                fns.len()
            )));
        }
        Ok(FunctionVector { horizon, fns })
    }

    /// The constant vector `h_t = c` for all `t < T`.
    pub fn constant(horizon: usize, c: f64) -> Self {
        let f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> = Arc::new(move |_| c);
        FunctionVector {
            horizon,
            fns: vec![f; horizon],
        }
    }

    /// Per-state tables on a finite chain: `values[t][j]` is `h_t` at chain
    /// state `j`. Accepts `T` rows, or `T + 1` rows whose terminal row is
    /// ignored (it is payoff-tied), which lets exact DP tables be passed
    /// directly. States not in the chain evaluate to 0.
    pub fn from_chain_table(chain: &FiniteChain, values: &[Vec<f64>]) -> Result<Self> {
        let horizon = chain.horizon();
        if values.len() != horizon && values.len() != horizon + 1 {
            return Err(Error::Validation(format!(
                "function vector: expected {horizon} or {} table rows, got {}",
                horizon + 1,
                values.len()
            )));
        }
        let k = chain.num_states();
        let mut fns: Vec<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>> = Vec::with_capacity(horizon);
        for row in values.iter().take(horizon) {
            if row.len() != k {
                return Err(Error::Validation(format!(
                    "function vector: table row has {} entries, chain has {k} states",
                    row.len()
                )));
            }
            let states = chain.states.clone();
            let row = row.clone();
            fns.push(Arc::new(move |x: &[f64]| {
                states
                    .iter()
                    .position(|s| s.as_slice() == x)
                    .map_or(0.0, |j| row[j])
            }));
        }
        Ok(FunctionVector { horizon, fns })
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Evaluates `h_t(x)` for `t < T`.
    pub fn eval(&self, t: usize, x: &[f64]) -> f64 {
        (self.fns[t])(x)
    }
}

/// Walks `s = from..=last` and returns the first stop: the smallest `s`
/// with `pay(s) >= h(s)`, where the value of `h` at the horizon is the
/// payoff itself. `None` if no stop occurred through `last`.
pub(crate) fn first_stop(
    from: usize,
    last: usize,
    horizon: usize,
    pay: &mut impl FnMut(usize) -> Result<f64>,
    cont: &mut impl FnMut(usize) -> Result<f64>,
) -> Result<Option<usize>> {
    for s in from..=last {
        let fs = pay(s)?;
        let hs = if s == horizon { fs } else { cont(s)? };
        if fs >= hs {
            return Ok(Some(s));
        }
    }
    Ok(None)
}

fn check_times(payoff: &PayoffSpec, h: &FunctionVector, t: usize) -> Result<usize> {
    let horizon = payoff.horizon();
    if h.horizon() != horizon {
        return Err(Error::Argument(format!(
            "horizon mismatch: payoff {horizon}, function vector {}",
            h.horizon()
        )));
    }
    if t > horizon {
        return Err(Error::Argument(format!("time {t} out of range 0..={horizon}")));
    }
    Ok(horizon)
}

/// The stop indicator `1_{f_t(x) - h_t(x) >= 0}`. At `t = T` the payoff tie
/// forces a stop.
pub fn stop_indicator(payoff: &PayoffSpec, h: &FunctionVector, t: usize, x: &[f64]) -> Result<bool> {
    let horizon = check_times(payoff, h, t)?;
    let f = payoff.evaluate(t, x)?;
    Ok(if t == horizon { true } else { f >= h.eval(t, x) })
}

/// The smallest `s` in `t..=T` with `f_s(x_s) >= h_s(x_s)`. Always `<= T`
/// because of the terminal tie, and depends only on coordinates `x_t..x_T`.
pub fn stopping_time(
    payoff: &PayoffSpec,
    h: &FunctionVector,
    t: usize,
    path: PathView<'_>,
) -> Result<usize> {
    let horizon = check_times(payoff, h, t)?;
    let stop = first_stop(
        t,
        horizon,
        horizon,
        &mut |s| payoff.evaluate(s, path.state(s)),
        &mut |s| Ok(h.eval(s, path.state(s))),
    )?;
    Ok(stop.expect("terminal tie guarantees a stop at T"))
}

/// The cash flow from holding for at most `w` periods starting at `t`:
/// exercise `f_s(x_s)` at the first stop `s <= t + w`, else sell at
/// `h_{t+w}(x_{t+w})`. Requires `0 <= w <= T - t`.
pub fn cashflow(
    payoff: &PayoffSpec,
    h: &FunctionVector,
    path: PathView<'_>,
    t: usize,
    w: usize,
) -> Result<f64> {
    let horizon = check_times(payoff, h, t)?;
    if t + w > horizon {
        return Err(Error::Argument(format!(
            "look-ahead w={w} out of range 0..={} at t={t}",
            horizon - t
        )));
    }
    let mut pay = |s: usize| payoff.evaluate(s, path.state(s));
    let mut cont = |s: usize| Ok(h.eval(s, path.state(s)));
    match first_stop(t, t + w, horizon, &mut pay, &mut cont)? {
        Some(s) => pay(s),
        None => {
            let s = t + w;
            if s == horizon {
                pay(s)
            } else {
                cont(s)
            }
        }
    }
}
