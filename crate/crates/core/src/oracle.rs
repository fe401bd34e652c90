//! Exact references for validation: backward dynamic programming on finite
//! chains, exact conditional expectations of cash flows, and a
//! Cox-Ross-Rubinstein binomial tree for one-dimensional geometric Brownian
//! motion.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::paths::{chain_marginals, FiniteChain};
use crate::payoff::PayoffSpec;
use crate::policy::FunctionVector;

/// Largest chain the exact DP accepts.
pub const MAX_DP_STATES: usize = 100_000;

/// Largest number of enumerated sub-paths for exact path-functional
/// expectations.
pub const MAX_ENUMERATED_PATHS: f64 = 1e7;

/// Exact solution tables of a finite-chain stopping problem.
///
/// All tables have `T + 1` rows of `k` entries. `v_t = max(f_t, q_t)`
/// pointwise, `q_T = f_T`, and the stop bit at `(t, x)` is set iff
/// `q_t(x) <= f_t(x)` (ties stop).
#[derive(Debug, Clone)]
pub struct ExactSolution {
    /// Continuation values `q_t(x)`.
    pub q: Vec<Vec<f64>>,
    /// Value function `v_t(x)`.
    pub v: Vec<Vec<f64>>,
    /// Optimal stop rule.
    pub stop: Vec<Vec<bool>>,
    /// `v_0` averaged over the initial distribution.
    pub value0: f64,
}

/// Backward dynamic programming on a finite chain:
/// `q_t(x) = sum_y P_t(x, y) max(f_{t+1}(y), q_{t+1}(y))`, `q_T = f_T`.
pub fn exact_dp(chain: &FiniteChain, payoff: &PayoffSpec) -> Result<ExactSolution> {
    let k = chain.num_states();
    if k > MAX_DP_STATES {
        return Err(Error::Capacity(format!(
            "exact dp: {k} states exceeds the limit of {MAX_DP_STATES}"
        )));
    }
    let horizon = chain.horizon();
    if payoff.horizon() != horizon {
        return Err(Error::Argument(format!(
            "exact dp: payoff horizon {} does not match chain horizon {horizon}",
            payoff.horizon()
        )));
    }

    let mut f = vec![vec![0.0; k]; horizon + 1];
    for (t, row) in f.iter_mut().enumerate() {
        for (j, s) in chain.states.iter().enumerate() {
            row[j] = payoff.evaluate(t, s)?;
        }
    }

    let mut q = vec![vec![0.0; k]; horizon + 1];
    let mut v = vec![vec![0.0; k]; horizon + 1];
    let mut stop = vec![vec![false; k]; horizon + 1];
    q[horizon] = f[horizon].clone();
    v[horizon] = f[horizon].clone();
    stop[horizon] = vec![true; k];

    for t in (0..horizon).rev() {
        let p = &chain.transitions[t];
        for x in 0..k {
            let mut acc = 0.0;
            for y in 0..k {
                acc += p[(x, y)] * v[t + 1][y];
            }
            q[t][x] = acc;
            v[t][x] = f[t][x].max(acc);
            stop[t][x] = acc <= f[t][x];
        }
    }

    let value0 = chain
        .initial
        .iter()
        .zip(&v[0])
        .map(|(&p, &val)| p * val)
        .sum();

    Ok(ExactSolution { q, v, stop, value0 })
}

/// Exact per-state conditional expectation `E[theta_{t+1:w}(f, h) | X_t = x]`
/// for every chain state `x`, by the backward transition-matrix recursion.
///
/// Requires `t <= T - 1` and `0 <= w <= T - t - 1`. `h` is any function
/// vector (its terminal slot is payoff-tied).
pub fn expected_cashflow_given_state(
    chain: &FiniteChain,
    payoff: &PayoffSpec,
    h: &FunctionVector,
    t: usize,
    w: usize,
) -> Result<Vec<f64>> {
    let horizon = chain.horizon();
    if payoff.horizon() != horizon || h.horizon() != horizon {
        return Err(Error::Argument("expected cashflow: horizon mismatch".into()));
    }
    if t + 1 > horizon || w > horizon - t - 1 {
        return Err(Error::Argument(format!(
            "expected cashflow: need t <= {} and w <= T - t - 1, got t={t}, w={w}",
            horizon - 1
        )));
    }
    let k = chain.num_states();

    let pay = |s: usize, j: usize| payoff.evaluate(s, &chain.states[j]);
    let hval = |s: usize, j: usize| -> Result<f64> {
        if s == horizon {
            pay(s, j)
        } else {
            Ok(h.eval(s, &chain.states[j]))
        }
    };

    // m_s(y) = E[theta_{s : t+w+1-s} | X_s = y], built from s = t+w+1 down.
    let last = t + w + 1;
    let mut m = vec![0.0; k];
    for (j, mj) in m.iter_mut().enumerate() {
        *mj = pay(last, j)?.max(hval(last, j)?);
    }
    for s in (t + 1..last).rev() {
        let p = &chain.transitions[s];
        let mut next = vec![0.0; k];
        for y in 0..k {
            let f = pay(s, y)?;
            if f >= hval(s, y)? {
                next[y] = f;
            } else {
                let mut acc = 0.0;
                for z in 0..k {
                    acc += p[(y, z)] * m[z];
                }
                next[y] = acc;
            }
        }
        m = next;
    }

    let p = &chain.transitions[t];
    let mut out = vec![0.0; k];
    for x in 0..k {
        let mut acc = 0.0;
        for z in 0..k {
            acc += p[(x, z)] * m[z];
        }
        out[x] = acc;
    }
    Ok(out)
}

/// Enumerates all state-index tuples `(x_{t0}, ..., x_{last})` together with
/// their joint probability (the marginal at `t0` times transition products),
/// invoking `visit` once per tuple. Tuples of zero probability are skipped.
pub fn for_each_suffix(
    chain: &FiniteChain,
    t0: usize,
    last: usize,
    visit: &mut impl FnMut(&[usize], f64),
) -> Result<()> {
    let horizon = chain.horizon();
    if last > horizon || t0 > last {
        return Err(Error::Argument(format!(
            "enumeration range {t0}..={last} out of 0..={horizon}"
        )));
    }
    let k = chain.num_states() as f64;
    if k.powi((last - t0 + 1) as i32) > MAX_ENUMERATED_PATHS {
        return Err(Error::Capacity(format!(
            "enumeration of {}^{} paths exceeds {MAX_ENUMERATED_PATHS}",
            chain.num_states(),
            last - t0 + 1
        )));
    }
    let mu = chain_marginals(chain);
    let mut idx = vec![0usize; last - t0 + 1];
    recurse(chain, t0, last, 0, 1.0, &mu[t0], &mut idx, visit);
    return Ok(());

    fn recurse(
        chain: &FiniteChain,
        t0: usize,
        last: usize,
        depth: usize,
        prob: f64,
        mu_t0: &[f64],
        idx: &mut [usize],
        visit: &mut impl FnMut(&[usize], f64),
    ) {
        let t = t0 + depth;
        for j in 0..chain.num_states() {
            let p = if depth == 0 {
                mu_t0[j]
            } else {
                chain.transitions[t - 1][(idx[depth - 1], j)]
            };
            if p == 0.0 {
                continue;
            }
            idx[depth] = j;
            let prob = prob * p;
            if t == last {
                visit(idx, prob);
            } else {
                recurse(chain, t0, last, depth + 1, prob, mu_t0, idx, visit);
            }
        }
    }
}

/// `L_2(mu)` norm of per-state values under a marginal distribution.
pub fn l2_norm_under(marginal: &[f64], values: &[f64]) -> f64 {
    marginal
        .iter()
        .zip(values)
        .map(|(&m, &v)| m * v * v)
        .sum::<f64>()
        .sqrt()
}

/// `L_r(mu)` norm of per-state values under a marginal distribution.
pub fn lr_norm_under(marginal: &[f64], values: &[f64], r: f64) -> f64 {
    marginal
        .iter()
        .zip(values)
        .map(|(&m, &v)| m * v.abs().powf(r))
        .sum::<f64>()
        .powf(1.0 / r)
}

/// Which option the CRR tree prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    /// `(K - S)^+`.
    Put,
    /// `(S - K)^+`.
    Call,
}

/// When exercise is allowed on the tree.
#[derive(Debug, Clone)]
pub enum ExerciseStyle {
    /// Every tree level.
    American,
    /// Only at the given fractions of maturity, each snapped to the nearest
    /// tree level. European pricing is `Bermudan(vec![1.0])`.
    Bermudan(Vec<f64>),
}

/// Parameters of the recombining binomial tree.
///
/// `rate_step` is the continuously compounded rate per tree step (growth
/// factor `e^{rate_step}`, discount `e^{-rate_step}`); `up` is the
/// multiplicative up factor with `down = 1/up`. Matching a GBM with
/// volatility `sigma` per year over maturity `tau` uses
/// `up = exp(sigma sqrt(tau / steps))`.
#[derive(Debug, Clone)]
pub struct CrrParams {
    pub s0: f64,
    pub strike: f64,
    pub rate_step: f64,
    pub up: f64,
    pub steps: usize,
    pub style: ExerciseStyle,
    pub kind: OptionKind,
}

/// Backward-induction price on the recombining tree.
pub fn crr_price(params: &CrrParams) -> Result<f64> {
    let CrrParams {
        s0,
        strike,
        rate_step,
        up,
        steps,
        style,
        kind,
    } = params;
    let (s0, strike, up, steps) = (*s0, *strike, *up, *steps);
    if steps == 0 {
        return Err(Error::Argument("crr: steps must be >= 1".into()));
    }
    if !(s0 > 0.0) || !(strike >= 0.0) || !up.is_finite() {
        return Err(Error::Argument("crr: s0 must be positive, strike nonnegative".into()));
    }
    let down = 1.0 / up;
    let growth = rate_step.exp();
    if !(down < growth && growth < up) {
        return Err(Error::Argument(format!(
            "crr: arbitrage bounds violated, need down < growth < up, got {down} < {growth} < {up}"
        )));
    }
    let p = (growth - down) / (up - down);
    let disc = (-rate_step).exp();

    let mut exercisable = vec![false; steps + 1];
    match style {
        ExerciseStyle::American => exercisable.fill(true),
        ExerciseStyle::Bermudan(fractions) => {
            for &frac in fractions {
                if !(0.0..=1.0).contains(&frac) {
                    return Err(Error::Argument(format!(
                        "crr: exercise fraction {frac} outside [0, 1]"
                    )));
                }
                let level = (frac * steps as f64).round() as usize;
                exercisable[level.min(steps)] = true;
            }
        }
    }

    let intrinsic = |s: f64| -> f64 {
        match kind {
            OptionKind::Put => (strike - s).max(0.0),
            OptionKind::Call => (s - strike).max(0.0),
        }
    };

    let ratio = up / down;
    let mut values = vec![0.0f64; steps + 1];
    let mut s_node = s0 * down.powi(steps as i32);
    for v in values.iter_mut() {
        *v = if exercisable[steps] { intrinsic(s_node) } else { 0.0 };
        s_node *= ratio;
    }

    for level in (0..steps).rev() {
        let mut s_low = s0 * down.powi(level as i32);
        for j in 0..=level {
            let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            values[j] = if exercisable[level] {
                cont.max(intrinsic(s_low))
            } else {
                cont
            };
            s_low *= ratio;
        }
    }
    Ok(values[0])
}

/// Convenience: a time-homogeneous chain from one transition matrix.
pub fn homogeneous_chain(
    states: Vec<Vec<f64>>,
    transition: DMatrix<f64>,
    initial: Vec<f64>,
    horizon: usize,
) -> FiniteChain {
    FiniteChain {
        states,
        transitions: vec![transition; horizon],
        initial,
    }
}
