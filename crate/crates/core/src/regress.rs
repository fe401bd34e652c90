//! Approximation spaces and empirical L2 minimization over them.
//!
//! A space is a finite-dimensional basis plus a uniform bound `H` and a
//! constraint mode. `CoefficientBall` represents the closed convex class
//! `{x -> c . phi(x) : |c|_2 <= radius}` and solves the constrained problem
//! exactly; this is the mode under which the convexity-based diagnostics
//! (centered loss, projection contraction) are guaranteed. `ClipPredictions`
//! solves ordinary least squares (minimum-norm on rank deficiency) and clips
//! predictions to `[-H, H]`; the represented class is then only
//! approximately convex and reports label the mode non-conforming.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::paths::FiniteChain;
use std::sync::Arc;

/// Relative singular-value cutoff for rank decisions in the solver.
pub const SV_CUTOFF: f64 = 1e-12;

/// A family of basis functions on the state space.
#[derive(Clone)]
pub enum BasisKind {
    /// Tensor-product monomials with coordinate-wise degree `< terms` on
    /// `R^dim`; spans `terms^dim` functions. `terms = 1` is the constant.
    Monomials { terms: usize, dim: usize },
    /// Laguerre polynomials `L_0..L_{terms-1}` on the first coordinate.
    Laguerre { terms: usize },
    /// One indicator per finite-chain state, matched by exact equality.
    /// Unknown states evaluate to the zero feature vector.
    Indicator { states: Vec<Vec<f64>> },
    /// User feature map writing `dim` features.
    Custom {
        map: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
        dim: usize,
    },
}

impl std::fmt::Debug for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisKind::Monomials { terms, dim } => {
                write!(f, "Monomials {{ terms: {terms}, dim: {dim} }}")
            }
            BasisKind::Laguerre { terms } => write!(f, "Laguerre {{ terms: {terms} }}"),
            BasisKind::Indicator { states } => write!(f, "Indicator {{ states: {} }}", states.len()),
            BasisKind::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

impl BasisKind {
    /// Indicator basis over the states of a chain.
    pub fn indicator_for(chain: &FiniteChain) -> Self {
        BasisKind::Indicator {
            states: chain.states.clone(),
        }
    }

    /// Number of basis functions.
    pub fn len(&self) -> Result<usize> {
        match self {
            BasisKind::Monomials { terms, dim } => terms
                .checked_pow(*dim as u32)
                .filter(|&d| d >= 1 && d <= 10_000_000)
                .ok_or_else(|| {
                    Error::Validation("monomial basis dimension overflows or is zero".into())
                }),
            BasisKind::Laguerre { terms } => Ok(*terms),
            BasisKind::Indicator { states } => Ok(states.len()),
            BasisKind::Custom { dim, .. } => Ok(*dim),
        }
    }

    /// True when `len` is empty (never, for a validated basis).
    pub fn is_empty(&self) -> bool {
        matches!(self.len(), Ok(0))
    }

    /// Writes the feature vector of `x` into `out` (`out.len()` features).
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            BasisKind::Monomials { terms, dim } => {
                debug_assert_eq!(x.len(), *dim);
                let r = *terms;
                // Odometer over exponent tuples, first coordinate fastest.
                let mut exps = vec![0usize; *dim];
                for slot in out.iter_mut() {
                    let mut v = 1.0;
                    for (j, &e) in exps.iter().enumerate() {
                        v *= x[j].powi(e as i32);
                    }
                    *slot = v;
                    for e in exps.iter_mut() {
                        *e += 1;
                        if *e < r {
                            break;
                        }
                        *e = 0;
                    }
                }
            }
            BasisKind::Laguerre { terms } => {
                let x = x[0];
                if *terms >= 1 {
                    out[0] = 1.0;
                }
                if *terms >= 2 {
                    out[1] = 1.0 - x;
                }
                for k in 1..terms.saturating_sub(1) {
                    let kf = k as f64;
                    out[k + 1] = ((2.0 * kf + 1.0 - x) * out[k] - kf * out[k - 1]) / (kf + 1.0);
                }
            }
            BasisKind::Indicator { states } => {
                out.fill(0.0);
                if let Some(j) = states.iter().position(|s| s.as_slice() == x) {
                    out[j] = 1.0;
                }
            }
            BasisKind::Custom { map, .. } => map(x, out),
        }
    }
}

/// How the fitted class is kept uniformly bounded.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintMode {
    /// Unconstrained least squares; predictions clipped to `[-H, H]`.
    ClipPredictions,
    /// Coefficients constrained to `|c|_2 <= radius`; the class is closed
    /// and convex.
    CoefficientBall { radius: f64 },
}

impl ConstraintMode {
    /// True for the mode that satisfies the convexity condition exactly.
    pub fn is_convex_conforming(&self) -> bool {
        matches!(self, ConstraintMode::CoefficientBall { .. })
    }
}

/// A convex (or clipped) uniformly bounded approximation space.
#[derive(Debug, Clone)]
pub struct ApproxSpace {
    /// Basis family.
    pub basis: BasisKind,
    /// Uniform bound `H > 0` on the represented functions.
    pub bound: f64,
    /// Constraint mode.
    pub mode: ConstraintMode,
}

impl ApproxSpace {
    /// A clip-mode space: OLS fit, predictions clipped to `[-bound, bound]`.
    pub fn clipped(basis: BasisKind, bound: f64) -> Result<Self> {
        ApproxSpace::new(basis, bound, ConstraintMode::ClipPredictions)
    }

    /// A coefficient-ball space of the given radius with uniform bound `H`.
    pub fn ball(basis: BasisKind, bound: f64, radius: f64) -> Result<Self> {
        ApproxSpace::new(basis, bound, ConstraintMode::CoefficientBall { radius })
    }

    fn new(basis: BasisKind, bound: f64, mode: ConstraintMode) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::Validation("approx space: bound H must be positive".into()));
        }
        if let ConstraintMode::CoefficientBall { radius } = mode {
            if !(radius > 0.0) {
                return Err(Error::Validation(
                    "approx space: coefficient ball radius must be positive".into(),
                ));
            }
        }
        basis.len()?;
        Ok(ApproxSpace { basis, bound, mode })
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.basis.len().expect("validated at construction")
    }
}

/// A fitted member of an approximation space at one time step.
#[derive(Debug, Clone)]
pub struct FittedFunction {
    /// The space the coefficients live in.
    pub space: ApproxSpace,
    /// Basis coefficients, length `space.dim()`.
    pub coefficients: Vec<f64>,
    /// Time index the fit belongs to.
    pub t: usize,
}

impl FittedFunction {
    /// Basis expansion at `x`, clipped to `[-H, H]` in clip mode.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut feats = vec![0.0; self.coefficients.len()];
        self.space.basis.features_into(x, &mut feats);
        self.predict_from_features(&feats)
    }

    /// Prediction from an already-computed feature vector.
    pub fn predict_from_features(&self, feats: &[f64]) -> f64 {
        let raw: f64 = feats
            .iter()
            .zip(&self.coefficients)
            .map(|(&f, &c)| f * c)
            .sum();
        match self.space.mode {
            ConstraintMode::ClipPredictions => raw.clamp(-self.space.bound, self.space.bound),
            ConstraintMode::CoefficientBall { .. } => raw,
        }
    }
}

/// A borrowed list of `n` states of dimension `dim`, stored flat.
#[derive(Debug, Clone, Copy)]
pub struct States<'a> {
    dim: usize,
    data: &'a [f64],
}

impl<'a> States<'a> {
    /// Wraps `data` as `n = data.len() / dim` states.
    pub fn new(dim: usize, data: &'a [f64]) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Argument(format!(
                "states: data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(States { dim, data })
    }

    /// Number of states.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    /// True when there are no states.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// State `i`.
    pub fn get(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_input_dim(basis: &BasisKind, state_dim: usize) -> Result<()> {
    let ok = match basis {
        BasisKind::Monomials { dim, .. } => *dim == state_dim,
        BasisKind::Laguerre { .. } => state_dim >= 1,
        BasisKind::Indicator { states } => states.first().map_or(false, |s| s.len() == state_dim),
        BasisKind::Custom { .. } => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "basis {basis:?} does not accept states of dimension {state_dim}"
        )))
    }
}

/// The `n x dim` matrix whose row `i` holds the features of state `i`.
pub fn design_matrix(space: &ApproxSpace, states: States<'_>) -> Result<DMatrix<f64>> {
    if states.is_empty() {
        return Err(Error::Argument("design matrix: empty state list".into()));
    }
    check_input_dim(&space.basis, states.dim)?;
    let n = states.len();
    let d = space.dim();
    let mut m = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        space.basis.features_into(states.get(i), &mut row);
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Empirical L2 fit of `targets` over the represented class.
///
/// Clip mode solves ordinary least squares (minimum-norm solution under
/// rank deficiency, singular values below `SV_CUTOFF * s_max` treated as
/// zero); ball mode solves the radius-constrained problem exactly via the
/// singular decomposition and a one-dimensional multiplier search.
pub fn fit_l2(
    space: &ApproxSpace,
    states: States<'_>,
    targets: &[f64],
    t: usize,
) -> Result<FittedFunction> {
    let n = states.len();
    if n == 0 {
        return Err(Error::Argument("fit: empty state list".into()));
    }
    if targets.len() != n {
        return Err(Error::Argument(format!(
            "fit: {} targets for {n} states",
            targets.len()
        )));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Data("fit: non-finite target".into()));
    }
    let a = design_matrix(space, states)?;
    let b = DVector::from_column_slice(targets);
    let coefficients = solve_constrained(&a, &b, &space.mode);
    Ok(FittedFunction {
        space: space.clone(),
        coefficients,
        t,
    })
}

/// Weighted L2 fit: minimizes `sum_i weights[i] (h(x_i) - y_i)^2` over the
/// represented class. With weights set to an exact marginal distribution
/// this is the population projection onto the space; the engine's
/// centered-loss diagnostics rely on it.
pub fn fit_l2_weighted(
    space: &ApproxSpace,
    states: States<'_>,
    weights: &[f64],
    targets: &[f64],
    t: usize,
) -> Result<FittedFunction> {
    let n = states.len();
    if n == 0 || targets.len() != n || weights.len() != n {
        return Err(Error::Argument(
            "weighted fit: states, weights, and targets must have equal nonzero length".into(),
        ));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Data("weighted fit: weights must be finite and nonnegative".into()));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Data("weighted fit: non-finite target".into()));
    }
    let mut a = design_matrix(space, states)?;
    let mut b = DVector::from_column_slice(targets);
    for i in 0..n {
        let s = weights[i].sqrt();
        for j in 0..a.ncols() {
            a[(i, j)] *= s;
        }
        b[i] *= s;
    }
    let coefficients = solve_constrained(&a, &b, &space.mode);
    Ok(FittedFunction {
        space: space.clone(),
        coefficients,
        t,
    })
}

/// Least squares `min |A c - b|` with an optional euclidean coefficient
/// bound. Deterministic: min-norm on rank deficiency, and the constrained
/// multiplier is bisected to machine resolution.
fn solve_constrained(a: &DMatrix<f64>, b: &DVector<f64>, mode: &ConstraintMode) -> Vec<f64> {
    let dim = a.ncols();
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let s = &svd.singular_values;
    let smax = s.max();
    let cutoff = SV_CUTOFF * smax;
    let d = u.transpose() * b;

    let coef_in_basis = |lambda: f64| -> DVector<f64> {
        DVector::from_iterator(
            s.len(),
            s.iter().zip(d.iter()).map(|(&si, &di)| {
                if si > cutoff {
                    si * di / (si * si + lambda)
                } else {
                    0.0
                }
            }),
        )
    };

    let z0 = coef_in_basis(0.0);
    let z = match mode {
        ConstraintMode::ClipPredictions => z0,
        ConstraintMode::CoefficientBall { radius } => {
            if z0.norm() <= *radius {
                z0
            } else {
                // |c(lambda)| is strictly decreasing; bracket then bisect.
                let mut hi = smax * smax + 1.0;
                while coef_in_basis(hi).norm() > *radius {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if coef_in_basis(mid).norm() > *radius {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                coef_in_basis(0.5 * (lo + hi))
            }
        }
    };
    let c = vt.transpose() * z;
    debug_assert_eq!(c.len(), dim);
    c.iter().copied().collect()
}

/// VC dimension bound of the space: the linear dimension of the span.
/// Clipping does not raise it; the value is the `d` fed to the bound
/// calculators.
pub fn vc_dimension(space: &ApproxSpace) -> Result<usize> {
    space.basis.len()
}

/// Mean squared empirical error of `fitted` on `(states, targets)`.
pub fn empirical_objective(fitted: &FittedFunction, states: States<'_>, targets: &[f64]) -> f64 {
    let n = states.len();
    let mut acc = 0.0;
    for i in 0..n {
        let e = fitted.predict(states.get(i)) - targets[i];
        acc += e * e;
    }
    acc / n as f64
}
