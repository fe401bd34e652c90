//! The backward-recursive dynamic look-ahead fitting algorithm.
//!
//! Fitting walks `t = T-1, ..., 0`. At each step the per-path regression
//! target is the cash flow realized by following the already-fitted stopping
//! rule for `w(t)` periods past `t+1` and then selling at the fitted
//! continuation value; the target is regressed onto the approximation space
//! at `t`. The look-ahead schedule `w(t) = T-t-1` realizes the
//! Longstaff-Schwartz algorithm, `w(t) = 0` the Tsitsiklis-Van Roy
//! algorithm, and anything between interpolates.
//!
//! Slot `t` is fitted from path data at times `>= t` only (admissibility),
//! and targets read the clipped predictions of future slots, so with a
//! truncated payoff the whole cash flow family stays uniformly bounded.
//!
//! Pricing is strictly out-of-sample: the evaluation batch must come from a
//! different seed than the fitting batch, which `price` enforces by
//! fingerprint comparison.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::oracle::expected_cashflow_given_state;
use crate::paths::{chain_marginals, FiniteChain, PathBatch};
use crate::payoff::PayoffSpec;
use crate::policy::FunctionVector;
use crate::regress::{fit_l2, fit_l2_weighted, ApproxSpace, BasisKind, ConstraintMode, FittedFunction, States};

/// Odd 64-bit offset separating evaluation seeds from fitting seeds.
pub const EVAL_SEED_OFFSET: u64 = 0x9E3779B97F4A7C15;

/// The evaluation-batch seed paired with a fitting seed.
pub fn eval_seed(fit_seed: u64) -> u64 {
    fit_seed.wrapping_add(EVAL_SEED_OFFSET)
}

/// Named look-ahead schedules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `w(t) = T - t - 1`: regress on the realized payoff of the fitted rule.
    LongstaffSchwartz,
    /// `w(t) = 0`: regress on `max(f_{t+1}, q_{t+1})`.
    TsitsiklisVanRoy,
    /// `w(t) = min(w0, T - t - 1)`.
    Constant(usize),
    /// Explicit per-time values.
    Custom(Vec<usize>),
}

/// A validated look-ahead schedule: `0 <= w(t) <= T - t - 1` for every `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookaheadSchedule {
    label: String,
    w: Vec<usize>,
}

impl LookaheadSchedule {
    /// Per-time look-ahead values, length `T`.
    pub fn values(&self) -> &[usize] {
        &self.w
    }

    /// `w(t)`.
    pub fn at(&self, t: usize) -> usize {
        self.w[t]
    }

    /// Horizon the schedule was built for.
    pub fn horizon(&self) -> usize {
        self.w.len()
    }

    /// Short name for reports (`ls`, `tvr`, `constant(k)`, `custom`).
    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Builds a schedule for horizon `T`, clamping `Constant` into range and
/// validating `Custom` against it.
pub fn make_schedule(kind: &ScheduleKind, horizon: usize) -> Result<LookaheadSchedule> {
    if horizon < 1 {
        return Err(Error::Argument("schedule: horizon must be >= 1".into()));
    }
    let max_at = |t: usize| horizon - t - 1;
    let (label, w) = match kind {
        ScheduleKind::LongstaffSchwartz => {
            ("ls".to_string(), (0..horizon).map(max_at).collect::<Vec<_>>())
        }
        ScheduleKind::TsitsiklisVanRoy => ("tvr".to_string(), vec![0; horizon]),
        ScheduleKind::Constant(w0) => (
            format!("constant({w0})"),
            (0..horizon).map(|t| (*w0).min(max_at(t))).collect(),
        ),
        ScheduleKind::Custom(values) => {
            if values.len() != horizon {
                return Err(Error::Validation(format!(
                    "schedule: {} values for horizon {horizon}",
                    values.len()
                )));
            }
            for (t, &wt) in values.iter().enumerate() {
                if wt > max_at(t) {
                    return Err(Error::Validation(format!(
                        "schedule: w({t}) = {wt} exceeds T - t - 1 = {}",
                        max_at(t)
                    )));
                }
            }
            ("custom".to_string(), values.clone())
        }
    };
    Ok(LookaheadSchedule { label, w })
}

/// How a continuation estimate was produced.
#[derive(Debug, Clone)]
pub struct Provenance {
    /// Seed of the fitting batch.
    pub seed: u64,
    /// Number of fitting paths.
    pub n: usize,
    /// Model fingerprint of the fitting batch.
    pub fingerprint: u64,
    /// Schedule used.
    pub schedule: LookaheadSchedule,
    /// Payoff truncation level, if any.
    pub beta: Option<f64>,
}

/// The learned continuation vector: one fitted function per `t < T`, with
/// the terminal slot structurally payoff-tied.
#[derive(Debug, Clone)]
pub struct FittedContinuation {
    slots: Vec<FittedFunction>,
    provenance: Provenance,
}

impl FittedContinuation {
    /// Wraps per-time fitted functions (index `t` = slot `t`).
    pub fn new(slots: Vec<FittedFunction>, provenance: Provenance) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Validation("continuation: no slots".into()));
        }
        for (t, s) in slots.iter().enumerate() {
            if s.t != t {
                return Err(Error::Validation(format!(
                    "continuation: slot at index {t} is labeled t={}",
                    s.t
                )));
            }
        }
        Ok(FittedContinuation { slots, provenance })
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.slots.len()
    }

    /// Fitted slot for time `t < T`.
    pub fn slot(&self, t: usize) -> &FittedFunction {
        &self.slots[t]
    }

    /// All slots.
    pub fn slots(&self) -> &[FittedFunction] {
        &self.slots
    }

    /// Fit provenance.
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// `q_hat_t(x)` for `t < T`.
    pub fn predict(&self, t: usize, x: &[f64]) -> f64 {
        self.slots[t].predict(x)
    }

    /// The continuation as a stopping-rule parameter vector.
    pub fn function_vector(&self) -> FunctionVector {
        let fns = self
            .slots
            .iter()
            .map(|s| {
                let s = Arc::new(s.clone());
                let f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> =
                    Arc::new(move |x: &[f64]| s.predict(x));
                f
            })
            .collect();
        FunctionVector::new(self.horizon(), fns).expect("slots validated nonempty")
    }

    /// Per-path regression targets this continuation would produce at
    /// `(t, w)`; see [`regression_targets`].
    pub fn regression_targets(
        &self,
        batch: &PathBatch,
        payoff: &PayoffSpec,
        t: usize,
        w: usize,
    ) -> Result<Vec<f64>> {
        let slots: Vec<Option<FittedFunction>> = self.slots.iter().cloned().map(Some).collect();
        regression_targets(&slots, batch, payoff, t, w)
    }
}

/// Walks `s = from..=from+w` over one path's payoff and prediction rows and
/// returns the realized cash flow: the payoff at the first `s` with
/// `pay >= pred`, else the prediction at `from + w`. The terminal column of
/// `preds` must mirror `pays` (payoff tie), which makes `s = T` a stop.
#[inline]
fn scan_row(pays: &[f64], preds: &[f64], from: usize, w: usize) -> f64 {
    let last = from + w;
    for s in from..=last {
        if pays[s] >= preds[s] {
            return pays[s];
        }
    }
    preds[last]
}

/// Per-path targets `y_i` = cash flow of the partially fitted rule over
/// `t+1..=t+1+w`. Slot `s` must be present for `t+1 <= s <= min(t+w+1, T-1)`;
/// a missing one is a state error. For `w = 0` the target is
/// `max(f_{t+1}, q_hat_{t+1})` per path; for `w = T-t-1` it is the payoff
/// realized at the fitted rule's stopping time.
pub fn regression_targets(
    slots: &[Option<FittedFunction>],
    batch: &PathBatch,
    payoff: &PayoffSpec,
    t: usize,
    w: usize,
) -> Result<Vec<f64>> {
    let horizon = payoff.horizon();
    if batch.horizon() != horizon {
        return Err(Error::Argument("targets: batch and payoff horizons differ".into()));
    }
    if slots.len() != horizon {
        return Err(Error::Argument(format!(
            "targets: {} slots for horizon {horizon}",
            slots.len()
        )));
    }
    if t >= horizon || w > horizon - t - 1 {
        return Err(Error::Argument(format!(
            "targets: need t < T and w <= T - t - 1, got t={t}, w={w}, T={horizon}"
        )));
    }
    let last = t + 1 + w;
    for s in t + 1..=last.min(horizon - 1) {
        if slots[s].is_none() {
            return Err(Error::State(format!("targets: slot {s} not fitted yet")));
        }
    }

    let n = batch.len();
    let mut pays = vec![0.0f64; n * (w + 2)];
    let mut preds = vec![0.0f64; n * (w + 2)];
    // Columns s = t+1..=last, stored relative to t+1 with a sentinel column
    // for the scan start offset; simplest is absolute-indexed small rows.
    for i in 0..n {
        for s in t + 1..=last {
            let x = batch.state(i, s);
            let f = payoff.evaluate(s, x)?;
            let col = s - (t + 1);
            pays[i * (w + 2) + col] = f;
            preds[i * (w + 2) + col] = if s == horizon {
                f
            } else {
                slots[s].as_ref().unwrap().predict(x)
            };
        }
    }
    Ok((0..n)
        .map(|i| {
            let row_p = &pays[i * (w + 2)..i * (w + 2) + w + 1];
            let row_q = &preds[i * (w + 2)..i * (w + 2) + w + 1];
            scan_row(row_p, row_q, 0, w)
        })
        .collect())
}

/// Fits the continuation vector on `batch` by backward recursion.
///
/// `spaces[t]` is the approximation space for slot `t`; the schedule fixes
/// the per-time look-ahead. Deterministic: the same batch, payoff, spaces,
/// and schedule reproduce bit-identical coefficients.
pub fn fit_continuation(
    batch: &PathBatch,
    payoff: &PayoffSpec,
    spaces: &[ApproxSpace],
    schedule: &LookaheadSchedule,
) -> Result<FittedContinuation> {
    let horizon = payoff.horizon();
    if batch.horizon() != horizon {
        return Err(Error::Validation(format!(
            "fit: batch horizon {} does not match payoff horizon {horizon}",
            batch.horizon()
        )));
    }
    if spaces.len() != horizon {
        return Err(Error::Validation(format!(
            "fit: {} spaces for horizon {horizon}, need one per t in 0..T",
            spaces.len()
        )));
    }
    if schedule.horizon() != horizon {
        return Err(Error::Validation(format!(
            "fit: schedule horizon {} does not match payoff horizon {horizon}",
            schedule.horizon()
        )));
    }

    let n = batch.len();
    let m = batch.dim();
    let stride = horizon + 1;

    // Payoff values per (path, time); evaluate() already truncates.
    let mut pays = vec![0.0f64; n * stride];
    let pay_err = std::sync::Mutex::new(None::<Error>);
    pays.par_chunks_mut(stride).enumerate().for_each(|(i, row)| {
        for (s, slot) in row.iter_mut().enumerate() {
            match payoff.evaluate(s, batch.state(i, s)) {
                Ok(v) => *slot = v,
                Err(e) => {
                    *pay_err.lock().unwrap() = Some(e);
                    return;
                }
            }
        }
    });
    if let Some(e) = pay_err.into_inner().unwrap().take() {
        return Err(e);
    }

    // Fitted predictions per (path, time); terminal column is payoff-tied.
    let mut preds = vec![0.0f64; n * stride];
    preds
        .par_chunks_mut(stride)
        .zip(pays.par_chunks(stride))
        .for_each(|(q, f)| q[horizon] = f[horizon]);

    let mut slots: Vec<Option<FittedFunction>> = vec![None; horizon];
    let mut state_buf = vec![0.0f64; n * m];

    for t in (0..horizon).rev() {
        let w = schedule.at(t);

        let targets: Vec<f64> = pays
            .par_chunks(stride)
            .zip(preds.par_chunks(stride))
            .map(|(f, q)| scan_row(f, q, t + 1, w))
            .collect();

        state_buf
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, out)| out.copy_from_slice(batch.state(i, t)));
        let states = States::new(m, &state_buf)?;

        let fitted = fit_l2(&spaces[t], states, &targets, t)?;

        let d = spaces[t].dim();
        preds
            .par_chunks_mut(stride)
            .enumerate()
            .for_each_init(
                || vec![0.0f64; d],
                |feats, (i, row)| {
                    fitted.space.basis.features_into(batch.state(i, t), feats);
                    row[t] = fitted.predict_from_features(feats);
                },
            );

        slots[t] = Some(fitted);
    }

    FittedContinuation::new(
        slots.into_iter().map(|s| s.expect("all slots fitted")).collect(),
        Provenance {
            seed: batch.seed(),
            n,
            fingerprint: batch.fingerprint(),
            schedule: schedule.clone(),
            beta: payoff.truncation(),
        },
    )
}

/// Out-of-sample price estimate.
#[derive(Debug, Clone, Copy)]
pub struct PriceEstimate {
    /// Mean realized payoff under the fitted stopping rule from `t = 0`.
    pub estimate: f64,
    /// Sample standard deviation divided by `sqrt(n)`.
    pub std_error: f64,
    /// Number of evaluation paths.
    pub n: usize,
}

/// Prices the fitted rule on an independent batch: each path is stopped at
/// the first `s` with `f_s >= q_hat_s` (immediate exercise at `t = 0`
/// included), and the realized payoffs are averaged. Reusing the fitting
/// batch is rejected, since an in-sample estimate is upward biased.
pub fn price(
    fitted: &FittedContinuation,
    eval: &PathBatch,
    payoff: &PayoffSpec,
) -> Result<PriceEstimate> {
    let horizon = payoff.horizon();
    if fitted.horizon() != horizon || eval.horizon() != horizon {
        return Err(Error::Argument("price: horizon mismatch".into()));
    }
    let prov = fitted.provenance();
    if eval.seed() == prov.seed && eval.fingerprint() == prov.fingerprint {
        return Err(Error::BatchReuse(format!(
            "evaluation batch has the fitting batch's seed {} and model; use a different seed",
            prov.seed
        )));
    }

    let n = eval.len();
    let err = std::sync::Mutex::new(None::<Error>);
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            for s in 0..=horizon {
                let x = eval.state(i, s);
                let f = match payoff.evaluate(s, x) {
                    Ok(v) => v,
                    Err(e) => {
                        *err.lock().unwrap() = Some(e);
                        return 0.0;
                    }
                };
                let q = if s == horizon { f } else { fitted.predict(s, x) };
                if f >= q {
                    return f;
                }
            }
            unreachable!("terminal tie always stops")
        })
        .collect();
    if let Some(e) = err.into_inner().unwrap().take() {
        return Err(e);
    }

    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(PriceEstimate {
        estimate: mean,
        std_error: (var / n as f64).sqrt(),
        n,
    })
}

/// Exact expected centered loss of `h` at `(t, w)` on a finite chain:
/// the expected squared loss of `h_t` against the cash flow it induces,
/// minus the squared loss of the exact population projection of that cash
/// flow onto `space`. Expectations use transition-matrix products; the
/// capacity guard mirrors the equivalent path enumeration.
///
/// Over a convex (coefficient-ball) space the result is nonnegative up to
/// rounding; clip-mode spaces are only approximately convex and carry no
/// such guarantee.
pub fn centered_loss_exact(
    chain: &FiniteChain,
    payoff: &PayoffSpec,
    h: &FunctionVector,
    space: &ApproxSpace,
    t: usize,
    w: usize,
) -> Result<f64> {
    let k = chain.num_states();
    if (k as f64).powi(w as i32 + 2) > crate::oracle::MAX_ENUMERATED_PATHS {
        return Err(Error::Capacity(format!(
            "centered loss: {k}^{} paths exceed the exact-computation limit",
            w + 2
        )));
    }
    let rho = expected_cashflow_given_state(chain, payoff, h, t, w)?;
    let mu = chain_marginals(chain);
    let weights = &mu[t];

    let flat: Vec<f64> = chain.states.iter().flatten().copied().collect();
    let states = States::new(chain.dim(), &flat)?;
    let proj = fit_l2_weighted(space, states, weights, &rho, t)?;

    let mut acc = 0.0;
    for (j, s) in chain.states.iter().enumerate() {
        let hj = h.eval(t, s);
        let pj = proj.predict(s);
        let dh = hj - rho[j];
        let dp = pj - rho[j];
        acc += weights[j] * (dh * dh - dp * dp);
    }
    Ok(acc)
}

impl FittedContinuation {
    /// Serializes to the versioned text format: a header with provenance,
    /// then one block per slot with basis, bound, mode, and coefficients at
    /// 17 significant digits. Custom bases are not serializable.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let p = &self.provenance;
        writeln!(w, "STOPFIT 1")?;
        writeln!(w, "horizon {}", self.horizon())?;
        writeln!(w, "n {}", p.n)?;
        writeln!(w, "seed {}", p.seed)?;
        writeln!(w, "fingerprint {}", p.fingerprint)?;
        match p.beta {
            Some(b) => writeln!(w, "beta {b:.16e}")?,
            None => writeln!(w, "beta none")?,
        }
        write!(w, "schedule {}", p.schedule.label())?;
        for v in p.schedule.values() {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
        for slot in &self.slots {
            let mode = match slot.space.mode {
                ConstraintMode::ClipPredictions => "clip".to_string(),
                ConstraintMode::CoefficientBall { radius } => format!("ball={radius:.16e}"),
            };
            match &slot.space.basis {
                BasisKind::Monomials { terms, dim } => writeln!(
                    w,
                    "slot t={} basis=monomials terms={terms} dim={dim} bound={:.16e} mode={mode}",
                    slot.t, slot.space.bound
                )?,
                BasisKind::Laguerre { terms } => writeln!(
                    w,
                    "slot t={} basis=laguerre terms={terms} bound={:.16e} mode={mode}",
                    slot.t, slot.space.bound
                )?,
                BasisKind::Indicator { states } => {
                    writeln!(
                        w,
                        "slot t={} basis=indicator k={} dim={} bound={:.16e} mode={mode}",
                        slot.t,
                        states.len(),
                        states.first().map_or(0, Vec::len),
                        slot.space.bound
                    )?;
                    write!(w, "states")?;
                    for s in states {
                        for v in s {
                            write!(w, " {v:.16e}")?;
                        }
                    }
                    writeln!(w)?;
                }
                BasisKind::Custom { .. } => {
                    return Err(Error::Unsupported(
                        "custom bases cannot be serialized".into(),
                    ))
                }
            }
            write!(w, "coef")?;
            for c in &slot.coefficients {
                write!(w, " {c:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parses the text format written by [`FittedContinuation::write_to`].
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format("continuation file truncated".into()))?
                .map_err(Error::from)
        };
        let magic = next()?;
        if magic.trim() != "STOPFIT 1" {
            return Err(Error::Format(format!("bad header line: {magic}")));
        }
        let horizon: usize = parse_kv(&next()?, "horizon")?;
        let n: usize = parse_kv(&next()?, "n")?;
        let seed: u64 = parse_kv(&next()?, "seed")?;
        let fingerprint: u64 = parse_kv(&next()?, "fingerprint")?;
        let beta_line = next()?;
        let beta_str = beta_line
            .strip_prefix("beta ")
            .ok_or_else(|| Error::Format(format!("expected beta line, got {beta_line}")))?;
        let beta = if beta_str.trim() == "none" {
            None
        } else {
            Some(parse_f64(beta_str.trim())?)
        };
        let sched_line = next()?;
        let mut parts = sched_line
            .strip_prefix("schedule ")
            .ok_or_else(|| Error::Format(format!("expected schedule line, got {sched_line}")))?
            .split_whitespace();
        let label = parts
            .next()
            .ok_or_else(|| Error::Format("schedule line missing label".into()))?
            .to_string();
        let values: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| Error::Format(format!("bad schedule value {p}"))))
            .collect::<Result<_>>()?;
        if values.len() != horizon {
            return Err(Error::Format("schedule length does not match horizon".into()));
        }
        let schedule = LookaheadSchedule { label, w: values };

        let mut slots = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let header = next()?;
            let fields = parse_fields(&header)?;
            if fields.get("slot-t").map(String::as_str) != Some(&t.to_string()) {
                return Err(Error::Format(format!("expected slot t={t}, got {header}")));
            }
            let bound = parse_f64(field(&fields, "bound")?)?;
            let mode = match field(&fields, "mode")? {
                "clip" => ConstraintMode::ClipPredictions,
                other => match other.strip_prefix("ball=") {
                    Some(radius) => ConstraintMode::CoefficientBall {
                        radius: parse_f64(radius)?,
                    },
                    None => return Err(Error::Format(format!("unknown mode {other}"))),
                },
            };
            let basis = match field(&fields, "basis")? {
                "monomials" => BasisKind::Monomials {
                    terms: field(&fields, "terms")?.parse().map_err(bad("terms"))?,
                    dim: field(&fields, "dim")?.parse().map_err(bad("dim"))?,
                },
                "laguerre" => BasisKind::Laguerre {
                    terms: field(&fields, "terms")?.parse().map_err(bad("terms"))?,
                },
                "indicator" => {
                    let k: usize = field(&fields, "k")?.parse().map_err(bad("k"))?;
                    let dim: usize = field(&fields, "dim")?.parse().map_err(bad("dim"))?;
                    let states_line = next()?;
                    let vals: Vec<f64> = states_line
                        .strip_prefix("states")
                        .ok_or_else(|| Error::Format("expected states line".into()))?
                        .split_whitespace()
                        .map(parse_f64)
                        .collect::<Result<_>>()?;
                    if vals.len() != k * dim {
                        return Err(Error::Format("states line has wrong length".into()));
                    }
                    BasisKind::Indicator {
                        states: vals.chunks(dim).map(<[f64]>::to_vec).collect(),
                    }
                }
                other => return Err(Error::Format(format!("unknown basis {other}"))),
            };
            let coef_line = next()?;
            let coefficients: Vec<f64> = coef_line
                .strip_prefix("coef")
                .ok_or_else(|| Error::Format("expected coef line".into()))?
                .split_whitespace()
                .map(parse_f64)
                .collect::<Result<_>>()?;
            let space = match mode {
                ConstraintMode::ClipPredictions => ApproxSpace::clipped(basis, bound)?,
                ConstraintMode::CoefficientBall { radius } => {
                    ApproxSpace::ball(basis, bound, radius)?
                }
            };
            if coefficients.len() != space.dim() {
                return Err(Error::Format(format!(
                    "slot t={t}: {} coefficients for basis dimension {}",
                    coefficients.len(),
                    space.dim()
                )));
            }
            slots.push(FittedFunction {
                space,
                coefficients,
                t,
            });
        }
        FittedContinuation::new(
            slots,
            Provenance {
                seed,
                n,
                fingerprint,
                schedule,
                beta,
            },
        )
    }
}

fn parse_kv<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| Error::Format(format!("expected `{key} ...`, got {line}")))?;
    rest.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad value in line: {line}")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad float {s}")))
}

fn parse_fields(header: &str) -> Result<std::collections::HashMap<String, String>> {
    let mut map = std::collections::HashMap::new();
    for (i, tok) in header.split_whitespace().enumerate() {
        if i == 0 {
            if tok != "slot" {
                return Err(Error::Format(format!("expected slot header, got {header}")));
            }
            continue;
        }
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad slot field {tok}")))?;
        let key = if i == 1 { format!("slot-{k}") } else { k.to_string() };
        map.insert(key, v.to_string());
    }
    Ok(map)
}

fn field<'a>(
    fields: &'a std::collections::HashMap<String, String>,
    key: &str,
) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("slot header missing field {key}")))
}

fn bad(what: &'static str) -> impl Fn(std::num::ParseIntError) -> Error {
    move |_| Error::Format(format!("bad {what} field"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_dp, homogeneous_chain, l2_norm_under};
    use crate::paths::{simulate, GbmSpec, ModelSpec};
    use crate::payoff::PayoffKind;
    use crate::policy::{self};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn custom_payoff(
        horizon: usize,
        f: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> PayoffSpec {
        PayoffSpec::new(PayoffKind::Custom(Arc::new(f)), horizon).unwrap()
    }

    fn test_chain(horizon: usize) -> FiniteChain {
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[0.55, 0.3, 0.15, 0.2, 0.5, 0.3, 0.1, 0.35, 0.55],
        );
        homogeneous_chain(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            p,
            vec![0.4, 0.35, 0.25],
            horizon,
        )
    }

    fn indicator_spaces(chain: &FiniteChain, bound: f64, horizon: usize) -> Vec<ApproxSpace> {
        (0..horizon)
            .map(|_| ApproxSpace::clipped(BasisKind::indicator_for(chain), bound).unwrap())
            .collect()
    }

    #[test]
    fn schedule_presets() {
        let ls = make_schedule(&ScheduleKind::LongstaffSchwartz, 4).unwrap();
        assert_eq!(ls.values(), &[3, 2, 1, 0]);
        let tvr = make_schedule(&ScheduleKind::TsitsiklisVanRoy, 4).unwrap();
        assert_eq!(tvr.values(), &[0, 0, 0, 0]);
        let c2 = make_schedule(&ScheduleKind::Constant(2), 4).unwrap();
        assert_eq!(c2.values(), &[2, 2, 1, 0]);
        assert!(matches!(
            make_schedule(&ScheduleKind::Custom(vec![3, 3, 1, 0]), 4),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn horizon_one_fits_terminal_projection() {
        // T = 1: the single slot is the empirical projection of f_1.
        let chain = test_chain(1);
        let payoff = custom_payoff(1, |t, x| if t == 1 { 1.0 + x[0] } else { 0.0 });
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 5000, 3).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 1);
        for kind in [ScheduleKind::LongstaffSchwartz, ScheduleKind::TsitsiklisVanRoy] {
            let schedule = make_schedule(&kind, 1).unwrap();
            let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
            // Indicator fit per state j is the mean of f_1 over successors.
            for (j, s) in chain.states.iter().enumerate() {
                let mut want = 0.0;
                for (y, sy) in chain.states.iter().enumerate() {
                    want += chain.transitions[0][(j, y)] * (1.0 + sy[0]);
                }
                // Loose: Monte Carlo estimate of the conditional mean.
                assert!(
                    (fitted.predict(0, s) - want).abs() < 0.1,
                    "state {j}: {} vs {want}",
                    fitted.predict(0, s)
                );
            }
        }
    }

    #[test]
    fn zero_lookahead_target_is_pointwise_max() {
        let chain = test_chain(3);
        let payoff = custom_payoff(3, |_, x| x[0]);
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 64, 5).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 3);
        let schedule = make_schedule(&ScheduleKind::TsitsiklisVanRoy, 3).unwrap();
        let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
        let targets = fitted.regression_targets(&batch, &payoff, 1, 0).unwrap();
        for (i, &y) in targets.iter().enumerate() {
            let x = batch.state(i, 2);
            let f = payoff.evaluate(2, x).unwrap();
            let q = fitted.predict(2, x);
            assert_relative_eq!(y, f.max(q), max_relative = 1e-12);
        }
    }

    #[test]
    fn ls_targets_equal_payoff_at_fitted_stopping_time() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.95f64.powi(t as i32));
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 256, 11).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 4);
        let schedule = make_schedule(&ScheduleKind::LongstaffSchwartz, 4).unwrap();
        let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
        let h = fitted.function_vector();
        for t in 0..3 {
            let w = 4 - t - 1;
            let targets = fitted.regression_targets(&batch, &payoff, t, w).unwrap();
            for (i, &y) in targets.iter().enumerate() {
                let tau = policy::stopping_time(&payoff, &h, t + 1, batch.path(i)).unwrap();
                let f = payoff.evaluate(tau, batch.state(i, tau)).unwrap();
                assert_relative_eq!(y, f, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn unfitted_slot_is_state_error() {
        let chain = test_chain(3);
        let payoff = custom_payoff(3, |_, x| x[0]);
        let batch = simulate(&ModelSpec::Chain(chain), 16, 5).unwrap();
        let slots = vec![None, None, None];
        assert!(matches!(
            regression_targets(&slots, &batch, &payoff, 0, 1),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.97f64.powi(t as i32));
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 2000, 21).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 4);
        let schedule = make_schedule(&ScheduleKind::Constant(1), 4).unwrap();
        let a = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
        let b = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
        for t in 0..4 {
            assert_eq!(a.slot(t).coefficients, b.slot(t).coefficients);
        }
    }

    #[test]
    fn admissibility_slots_ignore_earlier_times() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.97f64.powi(t as i32));
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 500, 8).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 4);
        let schedule = make_schedule(&ScheduleKind::LongstaffSchwartz, 4).unwrap();
        let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();

        // Corrupt every state strictly before t = 2 and refit.
        let t_cut = 2;
        let stride = (batch.horizon() + 1) * batch.dim();
        let mut raw = batch.raw_states().to_vec();
        for i in 0..batch.len() {
            for s in 0..t_cut {
                for c in 0..batch.dim() {
                    raw[i * stride + s * batch.dim() + c] = 777.0 + i as f64;
                }
            }
        }
        let mutated = PathBatch::from_raw(
            batch.len(),
            batch.horizon(),
            batch.dim(),
            batch.seed(),
            batch.fingerprint(),
            raw,
        )
        .unwrap();
        let refit = fit_continuation(&mutated, &payoff, &spaces, &schedule).unwrap();
        for t in t_cut..4 {
            assert_eq!(
                fitted.slot(t).coefficients,
                refit.slot(t).coefficients,
                "slot {t} depended on data before t"
            );
        }
    }

    #[test]
    fn indicator_fit_approaches_oracle_on_chain() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.95f64.powi(t as i32));
        let sol = exact_dp(&chain, &payoff).unwrap();
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 100_000, 31).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 4);
        for kind in [
            ScheduleKind::LongstaffSchwartz,
            ScheduleKind::TsitsiklisVanRoy,
            ScheduleKind::Constant(1),
        ] {
            let schedule = make_schedule(&kind, 4).unwrap();
            let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
            for t in 0..4 {
                for (j, s) in chain.states.iter().enumerate() {
                    let gap = (fitted.predict(t, s) - sol.q[t][j]).abs();
                    assert!(gap < 0.02, "{kind:?} t={t} state={j}: gap {gap}");
                }
            }
        }
    }

    #[test]
    fn price_zero_rule_stops_immediately() {
        // Single-state chain, f_t = t: a zero continuation stops at 0.
        let chain = homogeneous_chain(
            vec![vec![0.0]],
            DMatrix::from_element(1, 1, 1.0),
            vec![1.0],
            3,
        );
        let payoff = custom_payoff(3, |t, _| t as f64);
        let spaces = indicator_spaces(&chain, 10.0, 3);
        let slots: Vec<FittedFunction> = (0..3)
            .map(|t| FittedFunction {
                space: spaces[t].clone(),
                coefficients: vec![0.0],
                t,
            })
            .collect();
        let fitted = FittedContinuation::new(
            slots,
            Provenance {
                seed: 1,
                n: 0,
                fingerprint: 0,
                schedule: make_schedule(&ScheduleKind::TsitsiklisVanRoy, 3).unwrap(),
                beta: None,
            },
        )
        .unwrap();
        let eval = simulate(&ModelSpec::Chain(chain), 10, 2).unwrap();
        let est = price(&fitted, &eval, &payoff).unwrap();
        assert_eq!(est.estimate, 0.0);
    }

    #[test]
    fn price_with_oracle_rule_matches_oracle_value() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.95f64.powi(t as i32));
        let sol = exact_dp(&chain, &payoff).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 4);
        let slots: Vec<FittedFunction> = (0..4)
            .map(|t| FittedFunction {
                space: spaces[t].clone(),
                coefficients: sol.q[t].clone(),
                t,
            })
            .collect();
        let fitted = FittedContinuation::new(
            slots,
            Provenance {
                seed: 77,
                n: 0,
                fingerprint: 0,
                schedule: make_schedule(&ScheduleKind::LongstaffSchwartz, 4).unwrap(),
                beta: None,
            },
        )
        .unwrap();
        let eval = simulate(&ModelSpec::Chain(chain), 200_000, 4).unwrap();
        let est = price(&fitted, &eval, &payoff).unwrap();
        assert!(
            (est.estimate - sol.value0).abs() < 3.0 * est.std_error,
            "estimate {} vs oracle {} (se {})",
            est.estimate,
            sol.value0,
            est.std_error
        );
    }

    #[test]
    fn price_rejects_reused_fitting_batch() {
        let chain = test_chain(3);
        let payoff = custom_payoff(3, |_, x| x[0]);
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 100, 9).unwrap();
        let spaces = indicator_spaces(&chain, 10.0, 3);
        let schedule = make_schedule(&ScheduleKind::LongstaffSchwartz, 3).unwrap();
        let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
        assert!(matches!(
            price(&fitted, &batch, &payoff),
            Err(Error::BatchReuse(_))
        ));
        let eval = simulate(&ModelSpec::Chain(chain), 100, eval_seed(9)).unwrap();
        assert!(price(&fitted, &eval, &payoff).is_ok());
    }

    #[test]
    fn centered_loss_zero_at_projection_and_nonnegative() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.9f64.powi(t as i32));
        let space = ApproxSpace::ball(BasisKind::indicator_for(&chain), 10.0, 50.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        for (t, w) in [(0usize, 0usize), (0, 2), (1, 1), (2, 0)] {
            // Random h, then h' with slot t replaced by the exact projection.
            let hv: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(0.0..2.5)).collect())
                .collect();
            let h = FunctionVector::from_chain_table(&chain, &hv).unwrap();
            let loss = centered_loss_exact(&chain, &payoff, &h, &space, t, w).unwrap();
            assert!(loss >= -1e-10, "t={t} w={w}: loss {loss}");

            let rho = expected_cashflow_given_state(&chain, &payoff, &h, t, w).unwrap();
            let mu = chain_marginals(&chain);
            let flat: Vec<f64> = chain.states.iter().flatten().copied().collect();
            let proj = fit_l2_weighted(
                &space,
                States::new(1, &flat).unwrap(),
                &mu[t],
                &rho,
                t,
            )
            .unwrap();
            let mut hv2 = hv.clone();
            hv2[t] = chain.states.iter().map(|s| proj.predict(s)).collect();
            let h2 = FunctionVector::from_chain_table(&chain, &hv2).unwrap();
            let loss2 = centered_loss_exact(&chain, &payoff, &h2, &space, t, w).unwrap();
            assert!(loss2.abs() < 1e-12, "projection loss {loss2}");
        }
    }

    #[test]
    fn centered_loss_capacity_guard() {
        let mut states = Vec::new();
        for i in 0..60 {
            states.push(vec![i as f64]);
        }
        let chain = homogeneous_chain(
            states,
            DMatrix::from_element(60, 60, 1.0 / 60.0),
            vec![1.0 / 60.0; 60],
            6,
        );
        let payoff = custom_payoff(6, |_, x| x[0]);
        let space = ApproxSpace::ball(BasisKind::indicator_for(&chain), 100.0, 1000.0).unwrap();
        let h = FunctionVector::constant(6, 1.0);
        assert!(matches!(
            centered_loss_exact(&chain, &payoff, &h, &space, 0, 4),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn serialization_round_trip() {
        let chain = test_chain(3);
        let payoff = custom_payoff(3, |t, x| (2.0 - x[0]).max(0.0) * 0.9f64.powi(t as i32));
        let batch = simulate(&ModelSpec::Chain(chain.clone()), 300, 15).unwrap();
        let mut spaces = indicator_spaces(&chain, 10.0, 3);
        spaces[1] = ApproxSpace::ball(BasisKind::Monomials { terms: 2, dim: 1 }, 10.0, 7.5).unwrap();
        spaces[2] = ApproxSpace::clipped(BasisKind::Laguerre { terms: 3 }, 8.0).unwrap();
        let schedule = make_schedule(&ScheduleKind::Constant(1), 3).unwrap();
        let payoff = payoff.with_truncation(5.0).unwrap();
        let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();

        let mut buf = Vec::new();
        fitted.write_to(&mut buf).unwrap();
        let back = FittedContinuation::read_from(&buf[..]).unwrap();
        assert_eq!(back.horizon(), fitted.horizon());
        assert_eq!(back.provenance().seed, fitted.provenance().seed);
        assert_eq!(back.provenance().beta, fitted.provenance().beta);
        assert_eq!(
            back.provenance().schedule.values(),
            fitted.provenance().schedule.values()
        );
        for t in 0..3 {
            assert_eq!(back.slot(t).coefficients, fitted.slot(t).coefficients);
            for s in &chain.states {
                assert_eq!(back.predict(t, s), fitted.predict(t, s));
            }
        }
    }

    #[test]
    fn gbm_put_fit_prices_below_tree_smoke() {
        // Small smoke check of the full pipeline; the acceptance suite runs
        // the production-size version.
        let horizon = 10;
        let dt = 1.0 / horizon as f64;
        let sigma: f64 = 0.2;
        let rate: f64 = 0.06;
        let model = ModelSpec::Gbm(GbmSpec {
            dim: 1,
            s0: vec![36.0],
            drift: vec![(rate - 0.5 * sigma * sigma) * dt],
            vol: vec![sigma * dt.sqrt()],
            horizon,
            allow_degenerate: false,
        });
        let payoff = PayoffSpec::put(horizon, 40.0, (-rate * dt).exp()).unwrap();
        let spaces: Vec<ApproxSpace> = (0..horizon)
            .map(|_| ApproxSpace::clipped(BasisKind::Monomials { terms: 4, dim: 1 }, 40.0).unwrap())
            .collect();
        let schedule = make_schedule(&ScheduleKind::LongstaffSchwartz, horizon).unwrap();
        let batch = simulate(&model, 20_000, 42).unwrap();
        let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
        let eval = simulate(&model, 20_000, eval_seed(42)).unwrap();
        let est = price(&fitted, &eval, &payoff).unwrap();

        let tree = crate::oracle::crr_price(&crate::oracle::CrrParams {
            s0: 36.0,
            strike: 40.0,
            rate_step: rate / 2000.0,
            up: (sigma / 2000.0_f64.sqrt()).exp(),
            steps: 2000,
            style: crate::oracle::ExerciseStyle::Bermudan(
                (0..=horizon).map(|i| i as f64 / horizon as f64).collect(),
            ),
            kind: crate::oracle::OptionKind::Put,
        })
        .unwrap();
        assert!(
            est.estimate <= tree + 3.0 * est.std_error,
            "price {} above tree {tree} (se {})",
            est.estimate,
            est.std_error
        );
        assert!(
            tree - est.estimate < 0.1,
            "price {} too far below tree {tree}",
            est.estimate
        );
    }

    #[test]
    fn fitted_error_decreases_with_n_smoke() {
        let chain = test_chain(4);
        let payoff = custom_payoff(4, |t, x| (2.0 - x[0]).max(0.0) * 0.95f64.powi(t as i32));
        let sol = exact_dp(&chain, &payoff).unwrap();
        let mu = chain_marginals(&chain);
        let spaces = indicator_spaces(&chain, 10.0, 4);
        let schedule = make_schedule(&ScheduleKind::LongstaffSchwartz, 4).unwrap();
        let mut errs = Vec::new();
        for n in [500usize, 50_000] {
            let mut acc = 0.0;
            for seed in 0..4u64 {
                let batch = simulate(&ModelSpec::Chain(chain.clone()), n, seed).unwrap();
                let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule).unwrap();
                let diff: Vec<f64> = chain
                    .states
                    .iter()
                    .enumerate()
                    .map(|(j, s)| fitted.predict(0, s) - sol.q[0][j])
                    .collect();
                acc += l2_norm_under(&mu[0], &diff) / 4.0;
            }
            errs.push(acc);
        }
        assert!(errs[1] < errs[0], "error did not shrink: {errs:?}");
    }
}
