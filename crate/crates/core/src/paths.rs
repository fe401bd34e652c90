//! Markov process models and reproducible path simulation.
//!
//! A [`PathBatch`] holds `n` independent trajectories of a discrete-time
//! Markov process on `R^m` over times `0..=T`. Each path is generated from
//! its own counter-derived RNG stream keyed on `(seed, path index)`, so
//! batches are bit-reproducible, prefixes of larger batches equal smaller
//! batches with the same seed, and generation parallelizes without
//! coordination.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance for probability vectors and transition rows summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Geometric Brownian motion, specified per simulation step.
///
/// The log-increment of each step is `drift + vol * z` with `z ~ N(0, I_m)`,
/// i.e. `drift` is the per-step log drift and `vol` the per-sqrt-step
/// volatility matrix. States evolve by the exact exponential step
/// `S_{t+1} = S_t ⊙ exp(drift + vol z)`, so there is no discretization bias
/// at coarse horizons. For a risk-neutral market with rate `r` and step
/// length `dt`, pass `drift_j = (r - sigma_j^2/2) dt` and `vol = sigma sqrt(dt)`.
#[derive(Debug, Clone)]
pub struct GbmSpec {
    /// State dimension `m`.
    pub dim: usize,
    /// Initial state, strictly positive componentwise.
    pub s0: Vec<f64>,
    /// Per-step log drift vector.
    pub drift: Vec<f64>,
    /// Per-sqrt-step volatility matrix (`m x m`), row-major.
    pub vol: Vec<f64>,
    /// Number of steps `T >= 1`; paths have `T + 1` time slices.
    pub horizon: usize,
    /// Accept a rank-deficient volatility matrix (e.g. zero noise).
    pub allow_degenerate: bool,
}

/// A finite-state Markov chain with exactly representable dynamics.
///
/// Transition matrices may vary by time step; `transitions[t]` moves the
/// chain from time `t` to `t + 1`, so there are `T` matrices for horizon `T`.
#[derive(Debug, Clone)]
pub struct FiniteChain {
    /// State vectors, one per chain state; all of equal dimension.
    pub states: Vec<Vec<f64>>,
    /// Row-stochastic `k x k` matrices, one per step.
    pub transitions: Vec<DMatrix<f64>>,
    /// Distribution of the initial state.
    pub initial: Vec<f64>,
}

/// User-supplied transition sampler. Correctness of the induced law cannot
/// be validated internally.
#[derive(Clone)]
pub struct CustomModel {
    /// State dimension `m`.
    pub dim: usize,
    /// Number of steps.
    pub horizon: usize,
    /// Draws the initial state into `out`.
    pub init: Arc<dyn Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync>,
    /// Draws the state at `t + 1` given the state at `t`.
    pub step: Arc<dyn Fn(&mut ChaCha8Rng, usize, &[f64], &mut [f64]) + Send + Sync>,
}

impl std::fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomModel")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// A simulatable model of the underlying Markov process.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    /// Geometric Brownian motion with exact log-Euler steps.
    Gbm(GbmSpec),
    /// Finite-state chain with explicit transition matrices.
    Chain(FiniteChain),
    /// Arbitrary user transition sampler.
    Custom(CustomModel),
}

impl GbmSpec {
    fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Validation("gbm: horizon must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Validation("gbm: dimension must be >= 1".into()));
        }
        if self.s0.len() != self.dim || self.drift.len() != self.dim {
            return Err(Error::Validation(format!(
                "gbm: s0/drift length must equal dim {}",
                self.dim
            )));
        }
        if self.vol.len() != self.dim * self.dim {
            return Err(Error::Validation(format!(
                "gbm: vol must be {dim} x {dim} row-major",
                dim = self.dim
            )));
        }
        if self.s0.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(
                "gbm: initial state must be strictly positive componentwise".into(),
            ));
        }
        if self.drift.iter().any(|d| !d.is_finite()) || self.vol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("gbm: drift and vol must be finite".into()));
        }
        if !self.allow_degenerate {
            let m = DMatrix::from_row_slice(self.dim, self.dim, &self.vol);
            let svd = m.svd(false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smin > 1e-12 * smax.max(1.0)) {
                return Err(Error::Validation(
                    "gbm: volatility matrix is rank-deficient; set allow_degenerate to accept"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

impl FiniteChain {
    /// Number of chain states `k`.
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// State-vector dimension `m`.
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Horizon `T` (number of transition matrices).
    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    /// Index of a state vector, by exact componentwise equality.
    pub fn state_index(&self, x: &[f64]) -> Option<usize> {
        self.states.iter().position(|s| s.as_slice() == x)
    }

    fn validate(&self) -> Result<()> {
        let k = self.num_states();
        if k == 0 {
            return Err(Error::Validation("chain: must have at least one state".into()));
        }
        let m = self.dim();
        if self.states.iter().any(|s| s.len() != m) {
            return Err(Error::Validation(
                "chain: all state vectors must have equal dimension".into(),
            ));
        }
        for (i, a) in self.states.iter().enumerate() {
            for b in self.states.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Validation(format!(
                        "chain: duplicate state vector {a:?}"
                    )));
                }
            }
        }
        if self.transitions.is_empty() {
            return Err(Error::Validation("chain: horizon must be >= 1".into()));
        }
        for (t, p) in self.transitions.iter().enumerate() {
            if p.nrows() != k || p.ncols() != k {
                return Err(Error::Validation(format!(
                    "chain: transition matrix at t={t} must be {k} x {k}"
                )));
            }
            for r in 0..k {
                let row = p.row(r);
                if row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(Error::Validation(format!(
                        "chain: transition row {r} at t={t} has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::Validation(format!(
                        "chain: transition row {r} at t={t} sums to {sum}, must be 1 within {PROB_SUM_TOL}"
                    )));
                }
            }
        }
        if self.initial.len() != k {
            return Err(Error::Validation(format!(
                "chain: initial distribution must have {k} entries"
            )));
        }
        if self.initial.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Validation(
                "chain: initial distribution has a negative or non-finite entry".into(),
            ));
        }
        let sum: f64 = self.initial.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Validation(format!(
                "chain: initial distribution sums to {sum}, must be 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(())
    }
}

impl ModelSpec {
    /// State dimension `m`.
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Gbm(g) => g.dim,
            ModelSpec::Chain(c) => c.dim(),
            ModelSpec::Custom(c) => c.dim,
        }
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        match self {
            ModelSpec::Gbm(g) => g.horizon,
            ModelSpec::Chain(c) => c.horizon(),
            ModelSpec::Custom(c) => c.horizon,
        }
    }

    /// Checks the model invariants, naming the violated one on failure.
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Gbm(g) => g.validate(),
            ModelSpec::Chain(c) => c.validate(),
            ModelSpec::Custom(c) => {
                if c.horizon < 1 {
                    return Err(Error::Validation("custom: horizon must be >= 1".into()));
                }
                if c.dim == 0 {
                    return Err(Error::Validation("custom: dimension must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Stable 64-bit digest of the model parameters. Two batches simulated
    /// from models with equal fingerprints and equal seeds contain identical
    /// paths; pricing uses this to reject in-sample evaluation.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        match self {
            ModelSpec::Gbm(g) => {
                h.write(b"gbm");
                h.write_usize(g.dim);
                h.write_usize(g.horizon);
                h.write_f64s(&g.s0);
                h.write_f64s(&g.drift);
                h.write_f64s(&g.vol);
            }
            ModelSpec::Chain(c) => {
                h.write(b"chain");
                h.write_usize(c.num_states());
                h.write_usize(c.horizon());
                for s in &c.states {
                    h.write_f64s(s);
                }
                for p in &c.transitions {
                    for &x in p.iter() {
                        h.write(&x.to_bits().to_le_bytes());
                    }
                }
                h.write_f64s(&c.initial);
            }
            ModelSpec::Custom(c) => {
                // Closure identity is not hashable; distinguish by shape only.
                h.write(b"custom");
                h.write_usize(c.dim);
                h.write_usize(c.horizon);
            }
        }
        h.finish()
    }
}

/// FNV-1a, used for model fingerprints. Stable across platforms and runs.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn write_usize(&mut self, v: usize) {
        self.write(&(v as u64).to_le_bytes());
    }
    fn write_f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.write(&x.to_bits().to_le_bytes());
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// `n` sampled trajectories over times `0..=T`, immutable after construction.
#[derive(Debug, Clone)]
pub struct PathBatch {
    n: usize,
    horizon: usize,
    dim: usize,
    seed: u64,
    fingerprint: u64,
    /// Row-major `[path][time][coordinate]`.
    states: Vec<f64>,
}

impl PathBatch {
    /// Number of paths.
    pub fn len(&self) -> usize {
        self.n
    }

    /// True when the batch holds no paths.
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Horizon `T`; each path has `T + 1` states.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// State dimension `m`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Seed the batch was generated from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fingerprint of the generating model.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// State of path `i` at time `t`.
    pub fn state(&self, i: usize, t: usize) -> &[f64] {
        let stride = (self.horizon + 1) * self.dim;
        let base = i * stride + t * self.dim;
        &self.states[base..base + self.dim]
    }

    /// One whole path as a view.
    pub fn path(&self, i: usize) -> PathView<'_> {
        let stride = (self.horizon + 1) * self.dim;
        PathView {
            dim: self.dim,
            data: &self.states[i * stride..(i + 1) * stride],
        }
    }

    /// Raw storage, row-major `[path][time][coordinate]`.
    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }

    /// Builds a batch from raw storage. Intended for file loading and tests;
    /// `states.len()` must equal `n * (horizon + 1) * dim`.
    pub fn from_raw(
        n: usize,
        horizon: usize,
        dim: usize,
        seed: u64,
        fingerprint: u64,
        states: Vec<f64>,
    ) -> Result<Self> {
        if states.len() != n * (horizon + 1) * dim {
            return Err(Error::Data(format!(
                "raw states length {} does not match n={n}, horizon={horizon}, dim={dim}",
                states.len()
            )));
        }
        Ok(PathBatch {
            n,
            horizon,
            dim,
            seed,
            fingerprint,
            states,
        })
    }

    /// Writes the batch in the flat binary path format.
    ///
    /// Layout: magic `STOPPATH`, version `u32`, `n: u64`, `T: u32`, `m: u32`,
    /// `seed: u64`, `fingerprint: u64`, then `n * (T+1) * m` little-endian
    /// `f64` values in `[path][time][coordinate]` order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"STOPPATH")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.horizon as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        for &x in &self.states {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a batch written by [`PathBatch::write_to`].
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"STOPPATH" {
            return Err(Error::Format("bad magic, not a path file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported path file version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let horizon = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let fingerprint = read_u64(&mut r)?;
        let len = n
            .checked_mul(horizon + 1)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Format("path file dimensions overflow".into()))?;
        let mut states = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for x in &mut states {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        PathBatch::from_raw(n, horizon, dim, seed, fingerprint, states)
    }
}

/// Borrowed view of a single path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    dim: usize,
    data: &'a [f64],
}

impl<'a> PathView<'a> {
    /// Wraps a raw `[(T+1) * m]` slice as a path.
    pub fn new(dim: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(data.len() % dim, 0);
        PathView { dim, data }
    }

    /// State at time `t`.
    pub fn state(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.data.len() / self.dim - 1
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG stream for path `index` of batch `seed`. Each path owns an
/// independent stream, so any prefix of a larger batch equals the smaller
/// batch generated from the same seed.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = splitmix(seed ^ 0x9e3779b97f4a7c15).wrapping_add(splitmix(index));
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        z = splitmix(z.wrapping_add(0x9e3779b97f4a7c15));
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Simulates `n` independent paths of `model`.
///
/// Path `i` is a deterministic function of `(seed, i)`: calling again with
/// the same arguments reproduces bit-identical states, and rows `0..n` of a
/// larger batch with the same seed equal this batch.
pub fn simulate(model: &ModelSpec, n: usize, seed: u64) -> Result<PathBatch> {
    model.validate()?;
    if n == 0 {
        return Err(Error::Argument("simulate: n must be >= 1".into()));
    }
    let horizon = model.horizon();
    let dim = model.dim();
    let stride = (horizon + 1) * dim;
    let mut states = vec![0.0f64; n * stride];

    states
        .par_chunks_exact_mut(stride)
        .enumerate()
        .for_each(|(i, path)| {
            let mut rng = path_rng(seed, i as u64);
            sample_path(model, &mut rng, path, horizon, dim);
        });

    Ok(PathBatch {
        n,
        horizon,
        dim,
        seed,
        fingerprint: model.fingerprint(),
        states,
    })
}

fn sample_path(model: &ModelSpec, rng: &mut ChaCha8Rng, path: &mut [f64], horizon: usize, dim: usize) {
    match model {
        ModelSpec::Gbm(g) => {
            path[..dim].copy_from_slice(&g.s0);
            let mut z = vec![0.0f64; dim];
            for t in 0..horizon {
                for zj in z.iter_mut() {
                    *zj = rng.sample(StandardNormal);
                }
                let (prev, next) = path.split_at_mut((t + 1) * dim);
                let prev = &prev[t * dim..];
                for j in 0..dim {
                    let mut inc = g.drift[j];
                    for (l, &zl) in z.iter().enumerate() {
                        inc += g.vol[j * dim + l] * zl;
                    }
                    next[j] = prev[j] * inc.exp();
                }
            }
        }
        ModelSpec::Chain(c) => {
            let mut idx = sample_categorical(rng, &c.initial);
            path[..dim].copy_from_slice(&c.states[idx]);
            for t in 0..horizon {
                let p = &c.transitions[t];
                let row: Vec<f64> = p.row(idx).iter().copied().collect();
                idx = sample_categorical(rng, &row);
                path[(t + 1) * dim..(t + 2) * dim].copy_from_slice(&c.states[idx]);
            }
        }
        ModelSpec::Custom(c) => {
            let (head, tail) = path.split_at_mut(dim);
            (c.init)(rng, head);
            let _ = tail;
            for t in 0..horizon {
                let (prev, next) = path.split_at_mut((t + 1) * dim);
                (c.step)(rng, t, &prev[t * dim..], &mut next[..dim]);
            }
        }
    }
}

/// Inverse-CDF draw from a probability vector. The final category absorbs
/// any rounding slack so the draw always lands.
fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact marginal distribution of `X_t` for every `t = 0..=T`, by repeated
/// transition-matrix products. Errors for non-chain models.
pub fn exact_marginals(model: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    let chain = match model {
        ModelSpec::Chain(c) => c,
        _ => {
            return Err(Error::Unsupported(
                "exact_marginals: only finite chains have computable marginals".into(),
            ))
        }
    };
    chain.validate()?;
    Ok(chain_marginals(chain))
}

/// Marginals of a (validated) chain: `mu_{t+1} = P_t^T mu_t`.
pub fn chain_marginals(chain: &FiniteChain) -> Vec<Vec<f64>> {
    let k = chain.num_states();
    let mut out = Vec::with_capacity(chain.horizon() + 1);
    out.push(chain.initial.clone());
    for p in &chain.transitions {
        let prev = out.last().unwrap();
        let mut next = vec![0.0f64; k];
        for i in 0..k {
            let pi = prev[i];
            if pi == 0.0 {
                continue;
            }
            for j in 0..k {
                next[j] += pi * p[(i, j)];
            }
        }
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity_chain(dim_states: usize, horizon: usize) -> FiniteChain {
        FiniteChain {
            states: (0..dim_states).map(|i| vec![i as f64]).collect(),
            transitions: vec![DMatrix::identity(dim_states, dim_states); horizon],
            initial: {
                let mut v = vec![0.0; dim_states];
                v[0] = 1.0;
                v
            },
        }
    }

    fn uniform_chain(k: usize, horizon: usize) -> FiniteChain {
        FiniteChain {
            states: (0..k).map(|i| vec![i as f64]).collect(),
            transitions: vec![DMatrix::from_element(k, k, 1.0 / k as f64); horizon],
            initial: {
                let mut v = vec![0.0; k];
                v[0] = 1.0;
                v
            },
        }
    }

    #[test]
    fn identity_chain_paths_are_constant() {
        let model = ModelSpec::Chain(identity_chain(1, 3));
        let batch = simulate(&model, 2, 7).unwrap();
        for i in 0..2 {
            for t in 0..=3 {
                assert_eq!(batch.state(i, t), &[0.0]);
            }
        }
    }

    #[test]
    fn zero_noise_gbm_is_flat() {
        let model = ModelSpec::Gbm(GbmSpec {
            dim: 1,
            s0: vec![100.0],
            drift: vec![0.0],
            vol: vec![0.0],
            horizon: 2,
            allow_degenerate: true,
        });
        let batch = simulate(&model, 1, 5).unwrap();
        assert_eq!(batch.state(0, 0), &[100.0]);
        assert_eq!(batch.state(0, 1), &[100.0]);
        assert_eq!(batch.state(0, 2), &[100.0]);
    }

    #[test]
    fn degenerate_vol_rejected_unless_flagged() {
        let model = ModelSpec::Gbm(GbmSpec {
            dim: 1,
            s0: vec![100.0],
            drift: vec![0.0],
            vol: vec![0.0],
            horizon: 2,
            allow_degenerate: false,
        });
        assert!(matches!(simulate(&model, 1, 5), Err(Error::Validation(_))));
    }

    #[test]
    fn uniform_two_state_frequency_near_half() {
        let model = ModelSpec::Chain(uniform_chain(2, 1));
        let batch = simulate(&model, 100_000, 1).unwrap();
        let ones = (0..batch.len())
            .filter(|&i| batch.state(i, 1) == [1.0])
            .count();
        let freq = ones as f64 / batch.len() as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq = {freq}");
    }

    #[test]
    fn seed_determinism_and_prefix_stability() {
        let model = ModelSpec::Gbm(GbmSpec {
            dim: 2,
            s0: vec![50.0, 80.0],
            drift: vec![0.001, -0.002],
            vol: vec![0.03, 0.0, 0.01, 0.02],
            horizon: 6,
            allow_degenerate: false,
        });
        let a = simulate(&model, 40, 99).unwrap();
        let b = simulate(&model, 40, 99).unwrap();
        assert_eq!(a.raw_states(), b.raw_states());

        let big = simulate(&model, 80, 99).unwrap();
        let stride = (a.horizon() + 1) * a.dim();
        assert_eq!(&big.raw_states()[..40 * stride], a.raw_states());

        let other = simulate(&model, 40, 100).unwrap();
        assert_ne!(a.raw_states(), other.raw_states());
    }

    #[test]
    fn n_zero_is_an_argument_error() {
        let model = ModelSpec::Chain(uniform_chain(2, 1));
        assert!(matches!(simulate(&model, 0, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn bad_transition_row_named_in_error() {
        let mut chain = uniform_chain(2, 1);
        chain.transitions[0][(1, 0)] = 0.6;
        let err = simulate(&ModelSpec::Chain(chain), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1"), "unexpected message: {msg}");
    }

    #[test]
    fn marginals_identity_and_uniform() {
        let ident = ModelSpec::Chain(identity_chain(3, 4));
        let m = exact_marginals(&ident).unwrap();
        for mt in &m {
            assert_eq!(mt, &vec![1.0, 0.0, 0.0]);
        }

        let uni = ModelSpec::Chain(uniform_chain(2, 3));
        let m = exact_marginals(&uni).unwrap();
        assert_eq!(m[0], vec![1.0, 0.0]);
        for mt in &m[1..] {
            assert_abs_diff_eq!(mt[0], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(mt[1], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn marginals_match_direct_matrix_product() {
        // 3-state chain, explicit product as oracle.
        let p0 = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.4, 0.4, 0.2]);
        let p1 = DMatrix::from_row_slice(3, 3, &[0.3, 0.3, 0.4, 0.25, 0.5, 0.25, 0.6, 0.2, 0.2]);
        let chain = FiniteChain {
            states: vec![vec![0.0], vec![1.0], vec![2.0]],
            transitions: vec![p0.clone(), p1.clone()],
            initial: vec![0.5, 0.3, 0.2],
        };
        let m = exact_marginals(&ModelSpec::Chain(chain)).unwrap();
        let mu0 = nalgebra::RowDVector::from_row_slice(&[0.5, 0.3, 0.2]);
        let mu2 = &mu0 * &p0 * &p1;
        for j in 0..3 {
            assert_abs_diff_eq!(m[2][j], mu2[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn marginals_unsupported_for_gbm() {
        let model = ModelSpec::Gbm(GbmSpec {
            dim: 1,
            s0: vec![1.0],
            drift: vec![0.0],
            vol: vec![0.1],
            horizon: 1,
            allow_degenerate: false,
        });
        assert!(matches!(exact_marginals(&model), Err(Error::Unsupported(_))));
    }

    #[test]
    fn empirical_marginals_converge_in_total_variation() {
        // Monte Carlo sanity: TV(empirical, exact) < 3 sqrt(k/n), mean over 5 seeds.
        let p = DMatrix::from_row_slice(3, 3, &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.2, 0.7]);
        let chain = FiniteChain {
            states: vec![vec![0.0], vec![1.0], vec![2.0]],
            transitions: vec![p.clone(), p.clone(), p],
            initial: vec![0.4, 0.4, 0.2],
        };
        let model = ModelSpec::Chain(chain.clone());
        let exact = exact_marginals(&model).unwrap();
        let n = 100_000;
        let k = 3;
        for t in 0..=3 {
            let mut mean_tv = 0.0;
            for seed in 0..5u64 {
                let batch = simulate(&model, n, seed).unwrap();
                let mut counts = vec![0usize; k];
                for i in 0..n {
                    let idx = chain.state_index(batch.state(i, t)).unwrap();
                    counts[idx] += 1;
                }
                let tv: f64 = (0..k)
                    .map(|j| (counts[j] as f64 / n as f64 - exact[t][j]).abs())
                    .sum::<f64>()
                    / 2.0;
                mean_tv += tv / 5.0;
            }
            assert!(
                mean_tv < 3.0 * (k as f64 / n as f64).sqrt(),
                "t={t}: mean TV {mean_tv}"
            );
        }
    }

    #[test]
    fn path_file_round_trip() {
        let model = ModelSpec::Chain(uniform_chain(3, 2));
        let batch = simulate(&model, 17, 3).unwrap();
        let mut buf = Vec::new();
        batch.write_to(&mut buf).unwrap();
        let back = PathBatch::read_from(&buf[..]).unwrap();
        assert_eq!(back.len(), batch.len());
        assert_eq!(back.horizon(), batch.horizon());
        assert_eq!(back.dim(), batch.dim());
        assert_eq!(back.seed(), batch.seed());
        assert_eq!(back.fingerprint(), batch.fingerprint());
        assert_eq!(back.raw_states(), batch.raw_states());
    }

    #[test]
    fn custom_model_simulates_deterministic_walk() {
        let model = ModelSpec::Custom(CustomModel {
            dim: 1,
            horizon: 3,
            init: Arc::new(|_, out| out[0] = 1.0),
            step: Arc::new(|_, _, prev, next| next[0] = prev[0] * 2.0),
        });
        let batch = simulate(&model, 2, 0).unwrap();
        assert_eq!(batch.state(0, 3), &[8.0]);
        assert_eq!(batch.state(1, 3), &[8.0]);
    }
}
