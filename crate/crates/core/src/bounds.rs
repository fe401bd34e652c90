//! Closed-form evaluation of the estimator's convergence constants and
//! bounds: the look-ahead complexity factor `c(w)`, propagated VC
//! dimensions, covering-number bounds of the centered loss class, the
//! expected-error bound, the sample-complexity bound, the truncation-error
//! bound, and the degree schedule balancing approximation against sample
//! error for Sobolev-smooth continuation values.
//!
//! Several of these constants are astronomically large for realistic
//! inputs (the concentration constant contains `(1024 e beta)^v` with `v`
//! easily past 40), so everything is evaluated in log-space internally and
//! reported as a log-value plus a convenience linear value that may be
//! `+inf`.

use crate::error::{Error, Result};

/// A nonnegative quantity carried as its natural logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogValue {
    /// Natural log of the value.
    pub ln: f64,
}

impl LogValue {
    /// The linear value; `+inf` when the log exceeds the f64 range.
    pub fn value(&self) -> f64 {
        self.ln.exp()
    }
}

/// Inputs shared by the error and sample-complexity bounds.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    /// VC-dimension bound `d >= 1` of each approximation space.
    pub d: usize,
    /// Look-ahead parameter at the time step of interest.
    pub w: usize,
    /// Uniform bound `beta = max(Theta, H) > 0` on payoffs and fits.
    pub beta: f64,
    /// Number of sample paths.
    pub n: u64,
    /// Accuracy target.
    pub epsilon: f64,
    /// Confidence complement, in `(0, 1)`.
    pub delta: f64,
    /// Problem horizon `T`.
    pub horizon: usize,
    /// Time step `t`; `w` must satisfy `w <= T - t - 1`.
    pub t: usize,
}

impl BoundInputs {
    /// Checks positivity, the delta range, and the look-ahead range.
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Argument("bounds: d must be >= 1".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Argument("bounds: beta must be positive and finite".into()));
        }
        if self.n < 1 {
            return Err(Error::Argument("bounds: n must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Argument("bounds: epsilon must be positive and finite".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Argument("bounds: delta must be in (0, 1)".into()));
        }
        if self.horizon < 1 || self.t + 1 > self.horizon || self.w > self.horizon - self.t - 1 {
            return Err(Error::Argument(format!(
                "bounds: need t <= T - 1 and w <= T - t - 1, got T={}, t={}, w={}",
                self.horizon, self.t, self.w
            )));
        }
        Ok(())
    }
}

/// The look-ahead complexity factor `c(w) = 2 (w + 2) log2(e (w + 2))`.
pub fn c_of_w(w: usize) -> f64 {
    let wp2 = w as f64 + 2.0;
    2.0 * wp2 * (std::f64::consts::E * wp2).log2()
}

/// VC-dimension bound `c(w) d` of the cash-flow class built from spaces of
/// VC dimension at most `d`.
pub fn vc_cashflow_bound(d: usize, w: usize) -> f64 {
    c_of_w(w) * d as f64
}

/// Upper bound on the empirical L1 covering number of the centered loss
/// class at radius `epsilon`, for spaces uniformly bounded by `bound` with
/// VC dimension at most `d`.
pub fn covering_bound_loss_class(epsilon: f64, bound: f64, d: usize, w: usize) -> Result<LogValue> {
    if !(epsilon > 0.0) || !(bound > 0.0) {
        return Err(Error::Argument(
            "covering bound: epsilon and bound must be positive".into(),
        ));
    }
    if d < 1 {
        return Err(Error::Argument("covering bound: d must be >= 1".into()));
    }
    let df = d as f64;
    let ratio_ln = (64.0 * std::f64::consts::E * bound / epsilon).ln();
    let ln = if w == 0 {
        4.0 + 4.0 * (df + 1.0).ln() + 4.0 * df * ratio_ln
    } else {
        let c = c_of_w(w);
        4.0 + 2.0 * (df + 1.0).ln() + 2.0 * (c * df + 1.0).ln() + 2.0 * df * (c + 1.0) * ratio_ln
    };
    Ok(LogValue { ln })
}

/// The exponent `v = 2 d (c(w) + 1)` of the concentration tail.
pub fn v_constant(d: usize, w: usize) -> f64 {
    2.0 * d as f64 * (c_of_w(w) + 1.0)
}

/// The concentration constant
/// `K = 6 e^4 (d+1)^2 (c(w) d + 1)^2 (1024 e beta)^v`, in log-space.
pub fn k_constant(d: usize, w: usize, beta: f64) -> Result<LogValue> {
    if d < 1 || !(beta > 0.0) {
        return Err(Error::Argument("K: need d >= 1 and beta > 0".into()));
    }
    let df = d as f64;
    let c = c_of_w(w);
    let v = v_constant(d, w);
    let ln = 6.0f64.ln()
        + 4.0
        + 2.0 * (df + 1.0).ln()
        + 2.0 * (c * df + 1.0).ln()
        + v * (1024.0f64.ln() + 1.0 + beta.ln());
    Ok(LogValue { ln })
}

/// The evaluated expected-error bound.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBound {
    /// Full bound: propagated approximation error plus sample error.
    pub value: f64,
    /// The sample-error part alone.
    pub sample_part: f64,
    /// The propagated approximation part `2 * 16^w * approx_error`.
    pub approx_part: f64,
    /// Smallest `n` the bound is stated for, `382 beta^2 / epsilon`.
    pub n_threshold: f64,
    /// Whether `n` meets the threshold.
    pub valid: bool,
}

/// Expected squared-error bound at one time step:
/// `2 * 16^w * approx_error + 2 * 16^w (w+2) [(6998 beta^2 + ln(6998 K beta^2))/n + v ln(n)/n]`.
///
/// `approx_error` is the caller's bound on
/// `max_s inf_h ||h - q_s||_2^2`; the engine cannot know it for general
/// models (on finite chains it is computable exactly from the DP oracle).
pub fn error_bound(inputs: &BoundInputs, approx_error: f64) -> Result<ErrorBound> {
    inputs.validate()?;
    if approx_error < 0.0 || !approx_error.is_finite() {
        return Err(Error::Argument(
            "error bound: approximation error must be finite and nonnegative".into(),
        ));
    }
    let BoundInputs { d, w, beta, n, .. } = *inputs;
    let v = v_constant(d, w);
    let ln_k = k_constant(d, w, beta)?.ln;
    let nf = n as f64;
    let pow16 = 16.0f64.powi(w as i32);
    let log_term = 6998.0f64.ln() + ln_k + 2.0 * beta.ln();
    let sample_part =
        2.0 * pow16 * (w as f64 + 2.0) * ((6998.0 * beta * beta + log_term) / nf + v * nf.ln() / nf);
    let approx_part = 2.0 * pow16 * approx_error;
    let n_threshold = 382.0 * beta * beta / inputs.epsilon;
    Ok(ErrorBound {
        value: approx_part + sample_part,
        sample_part,
        approx_part,
        n_threshold,
        valid: nf >= n_threshold,
    })
}

/// The evaluated sample-complexity bound.
#[derive(Debug, Clone, Copy)]
pub struct SampleComplexity {
    /// Natural log of the bound.
    pub ln: f64,
    /// Ceiling of the bound as a count; `None` when it exceeds `u64::MAX`.
    pub count: Option<u64>,
}

/// Number of paths sufficient for the empirical minimizer to be
/// `epsilon`-close to the propagated best approximation with probability
/// `1 - delta`:
/// `2 * 13996 (w+2) 16^w beta^2 max((1/eps') ln(K/delta), v ln(1/eps'))`
/// with `eps' = epsilon / (32 (w+2) 16^w)`.
pub fn sample_complexity(inputs: &BoundInputs) -> Result<SampleComplexity> {
    inputs.validate()?;
    let BoundInputs {
        d,
        w,
        beta,
        epsilon,
        delta,
        ..
    } = *inputs;
    let v = v_constant(d, w);
    let ln_k = k_constant(d, w, beta)?.ln;
    let wp2 = w as f64 + 2.0;
    let ln16 = 16.0f64.ln();

    // ln(eps') from parts: eps' itself may underflow for extreme w.
    let ln_eps_prime = epsilon.ln() - (32.0 * wp2).ln() - w as f64 * ln16;
    // Branch 1: (1/eps') ln(K/delta); always positive since K > 1 > delta.
    let branch1_ln = (ln_k - delta.ln()).ln() - ln_eps_prime;
    // Branch 2: v ln(1/eps'); only competes when eps' < 1.
    let branch2_ln = if ln_eps_prime < 0.0 {
        Some(v.ln() + (-ln_eps_prime).ln())
    } else {
        None
    };
    let max_ln = match branch2_ln {
        Some(b2) => branch1_ln.max(b2),
        None => branch1_ln,
    };
    let ln = (2.0 * 13996.0 * wp2).ln() + w as f64 * ln16 + 2.0 * beta.ln() + max_ln;
    let linear = ln.exp();
    let count = if linear.is_finite() && linear < u64::MAX as f64 {
        Some(linear.ceil() as u64)
    } else {
        None
    };
    Ok(SampleComplexity { ln, count })
}

/// Truncation-error bound: for a payoff with `p`-th moments
/// `moments[s] = E[f_{t+1+s}^p]` over the future times `t+1..=T` and
/// `1 < r < p`, the `L_r` distance between the continuation values of the
/// raw and the `beta`-truncated problem is at most
/// `sum_s (r/(p-r) moments[s] beta^{r-p})^{1/r}`.
pub fn truncation_error_bound(beta: f64, p: f64, r: f64, moments: &[f64]) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Argument("truncation bound: beta must be positive".into()));
    }
    if !(1.0 < r && r < p) {
        return Err(Error::Argument(format!(
            "truncation bound: need 1 < r < p, got r={r}, p={p}"
        )));
    }
    if moments.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::Argument(
            "truncation bound: moments must be finite and nonnegative".into(),
        ));
    }
    Ok(moments
        .iter()
        .map(|&m| (r / (p - r) * m * beta.powf(r - p)).powf(1.0 / r))
        .sum())
}

/// Polynomial degree schedule balancing approximation and sample error for
/// continuation values with `k` derivatives on an `m`-dimensional cube:
/// `round(n^{1/(m + 2k)})`, at least 1.
pub fn sobolev_degree(n: u64, m: usize, k: usize) -> Result<usize> {
    if n < 1 || m < 1 || k < 1 {
        return Err(Error::Argument("sobolev degree: all inputs must be >= 1".into()));
    }
    let deg = (n as f64).powf(1.0 / (m + 2 * k) as f64).round() as usize;
    Ok(deg.max(1))
}

/// Every constant of the error and sample-complexity bounds, evaluated on
/// one set of inputs.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// Inputs echoed back.
    pub inputs: BoundInputs,
    /// Caller-supplied approximation error fed to the error bound.
    pub approx_error: f64,
    /// `c(w)`.
    pub c_w: f64,
    /// `c(w) d`.
    pub vc_cashflow: f64,
    /// `v = 2 d (c(w) + 1)`.
    pub v: f64,
    /// `K`, log-valued.
    pub k: LogValue,
    /// Covering-number bound of the loss class at radius `epsilon`.
    pub covering: LogValue,
    /// The expected-error bound.
    pub error: ErrorBound,
    /// The sample-complexity bound.
    pub complexity: SampleComplexity,
}

/// Evaluates all bound constants for `inputs`.
pub fn bound_report(inputs: &BoundInputs, approx_error: f64) -> Result<BoundReport> {
    inputs.validate()?;
    Ok(BoundReport {
        inputs: *inputs,
        approx_error,
        c_w: c_of_w(inputs.w),
        vc_cashflow: vc_cashflow_bound(inputs.d, inputs.w),
        v: v_constant(inputs.d, inputs.w),
        k: k_constant(inputs.d, inputs.w, inputs.beta)?,
        covering: covering_bound_loss_class(inputs.epsilon, inputs.beta, inputs.d, inputs.w)?,
        error: error_bound(inputs, approx_error)?,
        complexity: sample_complexity(inputs)?,
    })
}
