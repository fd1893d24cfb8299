//! Monte Carlo-moments Parareal for SDEs of any dimension.
//!
//! The micro state is a particle [`Ensemble`] advanced by Euler-Maruyama
//! ([`em_propagate`]); the macro state is a mean/covariance pair
//! ([`MomentState`]) advanced by forward Euler on the moment closure
//! ([`moment_rhs`], [`moment_propagate`]).
//!
//! Coupling:
//!
//! * restriction takes the sample mean and the population (`1/P`) covariance;
//! * matching maps particles through `Y = A (X - mean(X)) + M` with
//!   `A = U Q^{-1}`, where `U U^T = Sigma` and `Q Q^T = Cov[X]` are Cholesky
//!   factorizations. Coordinates whose `Q` pivot vanishes are first redrawn
//!   from a standard normal. An indefinite target covariance, which the
//!   three-term Parareal correction can produce, is clipped to the nearest
//!   PSD matrix first (or rejected under [`RepairPolicy::Strict`]);
//! * lifting matches against the initial ensemble.
//!
//! Wiener increments are addressed by `(seed, slab, particle)` through
//! [`crate::rng`], so the fine propagator is a deterministic function of its
//! input and every Parareal iteration reuses the same Brownian paths.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{
    self, Coupled, Coupling, CouplingReport, EngineError, IterateGrid, MacroAlgebra, ModelError,
    Propagator, RunConfig, Slot,
};
use crate::rng::{self, StreamDomain};
use crate::smallmat::{
    cholesky, default_pivot_tol, nearest_psd, psd_sqrt_factor, LinalgError, Matrix, SymMatrix,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("non-finite particle state at step {step}, particle {particle}")]
    NonFinite { step: usize, particle: usize },
    #[error("non-finite moment state at step {step}")]
    NonFiniteMoments { step: usize },
    #[error("ensemble has {particles} particles, at least 2 are required")]
    EmptyEnsemble { particles: usize },
    #[error("target covariance is not positive semidefinite")]
    UnrepairableCovariance,
    #[error("ensemble covariance stays singular after resampling dimensions {dims:?}")]
    DegenerateEnsemble { dims: Vec<usize> },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Where an ensemble came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub seed: u64,
    /// The slab the ensemble was last propagated over, if any.
    pub slab: Option<usize>,
}

/// `P` particles in `R^d`, stored row-major (`states[p * d + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    dim: usize,
    states: Vec<f64>,
    pub provenance: Provenance,
}

impl Ensemble {
    pub fn new(dim: usize, states: Vec<f64>) -> Result<Self, McError> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(McError::DimensionMismatch {
                expected: dim,
                found: states.len(),
            });
        }
        Ok(Self {
            dim,
            states,
            provenance: Provenance::default(),
        })
    }

    /// Every particle at `point`.
    pub fn dirac(point: &[f64], particles: usize) -> Self {
        let states = point.iter().copied().cycle().take(point.len() * particles).collect();
        Self {
            dim: point.len(),
            states,
            provenance: Provenance::default(),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particles(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn particle(&self, p: usize) -> &[f64] {
        &self.states[p * self.dim..(p + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Mean and covariance, with a flag recording whether the covariance is PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    psd: bool,
}

impl MomentState {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Self {
        assert_eq!(mean.len(), cov.dim(), "mean and covariance dimensions differ");
        let psd = cholesky(&cov, default_pivot_tol(&cov)).is_ok();
        Self { mean, cov, psd }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_psd(&self) -> bool {
        self.psd
    }

    /// Mean entries followed by the upper triangle of the covariance, row by
    /// row. For `d = 2`: `[M_x, M_y, C_xx, C_xy, C_yy]`.
    pub fn components(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.mean.clone();
        for i in 0..d {
            for j in i..d {
                out.push(self.cov.get(i, j));
            }
        }
        out
    }
}

/// Drift, diffusion and closure data of an SDE
/// `dX = a(X, Lambda, t) dt + b(X, Lambda, t) dW` with mean-field input
/// `Lambda = E[psi(X)]`.
///
/// Matrices are row-major slices. Implementations are called concurrently.
pub trait SdeModel: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// Length of `psi(x)`; zero when the model has no mean-field dependence.
    fn observable_dim(&self) -> usize {
        0
    }

    /// `psi(x)`.
    fn observable(&self, _x: &[f64], _out: &mut [f64]) {}

    fn drift(&self, x: &[f64], lambda: &[f64], t: f64, out: &mut [f64]);

    /// `d x n_w` diffusion matrix.
    fn diffusion(&self, x: &[f64], lambda: &[f64], t: f64, out: &mut [f64]);

    /// `d x d` Jacobian of the drift.
    fn drift_jacobian(&self, m: &[f64], lambda: &[f64], t: f64, out: &mut [f64]);

    /// One `d x d` Jacobian per Brownian direction (column of `b`), stacked;
    /// `n_w * d * d` entries. Zero for additive noise.
    fn diffusion_jacobians(&self, _m: &[f64], _lambda: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    /// Row `j` holds the flattened `d x d` Hessian of drift component `j`;
    /// `d * d * d` entries.
    fn drift_hessians(&self, m: &[f64], lambda: &[f64], t: f64, out: &mut [f64]);

    fn initial_ensemble(&self, particles: usize, seed: u64) -> Ensemble;
}

/// Pre-addressed Wiener increments, `sqrt(inner_dt) * N(0, 1)` per step,
/// particle and Brownian direction. Nothing is stored: the increments of
/// `(slab, particle)` are regenerated from the seed on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianTable {
    pub seed: u64,
    pub steps_per_slab: usize,
    pub noise_dim: usize,
    pub inner_dt: f64,
}

impl BrownianTable {
    pub fn new(seed: u64, steps_per_slab: usize, noise_dim: usize, inner_dt: f64) -> Self {
        Self {
            seed,
            steps_per_slab,
            noise_dim,
            inner_dt,
        }
    }

    /// Increment stream of one particle on one slab.
    pub fn stream(&self, slab: usize, particle: usize) -> IncrementStream {
        IncrementStream {
            rng: rng::stream(self.seed, StreamDomain::Brownian, slab as u32, particle as u32),
            scale: self.inner_dt.sqrt(),
        }
    }

    /// All increments of a slab, laid out `[step][particle][direction]`.
    pub fn materialize(&self, slab: usize, particles: usize) -> Vec<f64> {
        let (steps, nw) = (self.steps_per_slab, self.noise_dim);
        let mut out = vec![0.0; steps * particles * nw];
        for p in 0..particles {
            let mut s = self.stream(slab, p);
            for step in 0..steps {
                let at = (step * particles + p) * nw;
                s.fill(&mut out[at..at + nw]);
            }
        }
        out
    }
}

/// Sequential increments of one `(slab, particle)` address.
pub struct IncrementStream {
    rng: ChaCha8Rng,
    scale: f64,
}

impl IncrementStream {
    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            let z: f64 = self.rng.sample(StandardNormal);
            *v = self.scale * z;
        }
    }
}

/// Sample mean of `psi` over the ensemble, summed in particle order.
fn empirical_observable<M: SdeModel + ?Sized>(model: &M, ens: &Ensemble) -> Vec<f64> {
    let od = model.observable_dim();
    let mut acc = vec![0.0; od];
    if od == 0 {
        return acc;
    }
    let mut buf = vec![0.0; od];
    for x in ens.iter() {
        model.observable(x, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let p = ens.particles() as f64;
    acc.iter_mut().for_each(|a| *a /= p);
    acc
}

struct EmScratch {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    dw: Vec<f64>,
}

impl EmScratch {
    fn new(d: usize, nw: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            diffusion: vec![0.0; d * nw],
            dw: vec![0.0; nw],
        }
    }
}

/// One Ito step `x += a dt + b dW` evaluated at the left endpoint.
fn em_step<M: SdeModel + ?Sized>(
    model: &M,
    x: &mut [f64],
    lambda: &[f64],
    t: f64,
    dt: f64,
    stream: &mut IncrementStream,
    s: &mut EmScratch,
) -> bool {
    let nw = s.dw.len();
    model.drift(x, lambda, t, &mut s.drift);
    model.diffusion(x, lambda, t, &mut s.diffusion);
    stream.fill(&mut s.dw);
    let mut finite = true;
    for (i, xi) in x.iter_mut().enumerate() {
        let noise: f64 = (0..nw).map(|j| s.diffusion[i * nw + j] * s.dw[j]).sum();
        *xi += s.drift[i] * dt + noise;
        finite &= xi.is_finite();
    }
    finite
}

/// Euler-Maruyama over one slab starting at time `t0`.
///
/// Models without a mean-field observable are advanced particle by particle;
/// otherwise `Lambda` is re-estimated from the whole ensemble before every
/// step. Both paths give identical results for a model without observable.
pub fn em_propagate<M: SdeModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    table: &BrownianTable,
    slab: usize,
    t0: f64,
) -> Result<Ensemble, McError> {
    if model.observable_dim() == 0 {
        em_by_particle(ens, model, table, slab, t0)
    } else {
        em_by_step(ens, model, table, slab, t0, |_, _| {})
    }
}

/// Like [`em_propagate`], calling `observer(step, ensemble)` after every
/// inner step (`step` counts from 1).
pub fn em_propagate_observed<M, O>(
    ens: &Ensemble,
    model: &M,
    table: &BrownianTable,
    slab: usize,
    t0: f64,
    observer: O,
) -> Result<Ensemble, McError>
where
    M: SdeModel + ?Sized,
    O: FnMut(usize, &Ensemble),
{
    em_by_step(ens, model, table, slab, t0, observer)
}

fn check_shapes<M: SdeModel + ?Sized>(ens: &Ensemble, model: &M, table: &BrownianTable) -> Result<(), McError> {
    if ens.dim() != model.dim() {
        return Err(McError::DimensionMismatch {
            expected: model.dim(),
            found: ens.dim(),
        });
    }
    if table.noise_dim != model.noise_dim() {
        return Err(McError::DimensionMismatch {
            expected: model.noise_dim(),
            found: table.noise_dim,
        });
    }
    if !(table.inner_dt > 0.0) {
        return Err(McError::InvalidConfig("inner time step must be positive".into()));
    }
    Ok(())
}

fn em_by_particle<M: SdeModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    table: &BrownianTable,
    slab: usize,
    t0: f64,
) -> Result<Ensemble, McError> {
    check_shapes(ens, model, table)?;
    let d = ens.dim();
    let nw = model.noise_dim();
    let dt = table.inner_dt;
    let mut out = ens.clone();
    let failure = out
        .states
        .par_chunks_mut(d)
        .enumerate()
        .filter_map(|(p, x)| {
            let mut stream = table.stream(slab, p);
            let mut s = EmScratch::new(d, nw);
            (0..table.steps_per_slab).find_map(|step| {
                let t = t0 + step as f64 * dt;
                (!em_step(model, x, &[], t, dt, &mut stream, &mut s)).then_some((p, step + 1))
            })
        })
        .min();
    if let Some((particle, step)) = failure {
        return Err(McError::NonFinite { step, particle });
    }
    out.provenance = Provenance {
        seed: table.seed,
        slab: Some(slab),
    };
    Ok(out)
}

fn em_by_step<M, O>(
    ens: &Ensemble,
    model: &M,
    table: &BrownianTable,
    slab: usize,
    t0: f64,
    mut observer: O,
) -> Result<Ensemble, McError>
where
    M: SdeModel + ?Sized,
    O: FnMut(usize, &Ensemble),
{
    check_shapes(ens, model, table)?;
    let d = ens.dim();
    let nw = model.noise_dim();
    let dt = table.inner_dt;
    let mut out = ens.clone();
    out.provenance = Provenance {
        seed: table.seed,
        slab: Some(slab),
    };
    let mut streams: Vec<IncrementStream> =
        (0..ens.particles()).map(|p| table.stream(slab, p)).collect();
    for step in 0..table.steps_per_slab {
        let t = t0 + step as f64 * dt;
        let lambda = empirical_observable(model, &out);
        let failure = out
            .states
            .par_chunks_mut(d)
            .zip(streams.par_iter_mut())
            .enumerate()
            .filter_map(|(p, (x, stream))| {
                let mut s = EmScratch::new(d, nw);
                (!em_step(model, x, &lambda, t, dt, stream, &mut s)).then_some(p)
            })
            .min();
        if let Some(particle) = failure {
            return Err(McError::NonFinite {
                step: step + 1,
                particle,
            });
        }
        observer(step + 1, &out);
    }
    Ok(out)
}

/// Sample mean and population covariance (`1/P`), accumulated in particle
/// order.
pub fn restrict(ens: &Ensemble) -> MomentState {
    let d = ens.dim();
    let p = ens.particles() as f64;
    let mean = restrict_mean(ens);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for x in ens.iter() {
        for i in 0..d {
            centered[i] = x[i] - mean[i];
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / p;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    MomentState::new(mean, SymMatrix::new(d, cov).expect("square by construction"))
}

fn restrict_mean(ens: &Ensemble) -> Vec<f64> {
    let mut mean = vec![0.0; ens.dim()];
    for x in ens.iter() {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    let p = ens.particles() as f64;
    mean.iter_mut().for_each(|m| *m /= p);
    mean
}

/// Right-hand side of the moment closure:
///
/// ```text
/// dM/dt     = a(M, psi(M), t) + 1/2 H vec(Sigma)
/// dSigma/dt = A1 Sigma + Sigma A1^T + sum_j B1_j Sigma B1_j^T + b b^T
/// ```
///
/// with `H` the stacked drift Hessians and all coefficients at `(M, psi(M), t)`.
pub fn moment_rhs<M: SdeModel + ?Sized>(s: &MomentState, model: &M, t: f64) -> (Vec<f64>, SymMatrix) {
    let d = model.dim();
    let nw = model.noise_dim();
    let m = &s.mean;
    let mut lambda = vec![0.0; model.observable_dim()];
    model.observable(m, &mut lambda);

    let mut dmean = vec![0.0; d];
    model.drift(m, &lambda, t, &mut dmean);
    let mut hess = vec![0.0; d * d * d];
    model.drift_hessians(m, &lambda, t, &mut hess);
    let sigma = s.cov.as_slice();
    for (j, dm) in dmean.iter_mut().enumerate() {
        let row = &hess[j * d * d..(j + 1) * d * d];
        *dm += 0.5 * row.iter().zip(sigma).map(|(h, c)| h * c).sum::<f64>();
    }

    let mut jac = vec![0.0; d * d];
    model.drift_jacobian(m, &lambda, t, &mut jac);
    let mut bjac = vec![0.0; nw * d * d];
    model.diffusion_jacobians(m, &lambda, t, &mut bjac);
    let mut b = vec![0.0; d * nw];
    model.diffusion(m, &lambda, t, &mut b);

    let jac = Matrix::new(d, d, jac).expect("d x d");
    let sig = Matrix::new(d, d, sigma.to_vec()).expect("d x d");
    let js = jac.matmul(&sig);
    let mut dcov = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            dcov[i * d + k] = js.get(i, k) + js.get(k, i);
        }
    }
    for dir in 0..nw {
        let bj = Matrix::new(d, d, bjac[dir * d * d..(dir + 1) * d * d].to_vec()).expect("d x d");
        let term = bj.matmul(&sig).matmul(&bj.transpose());
        for (c, v) in dcov.iter_mut().zip(term.as_slice()) {
            *c += v;
        }
    }
    for i in 0..d {
        for k in 0..d {
            dcov[i * d + k] += (0..nw).map(|j| b[i * nw + j] * b[k * nw + j]).sum::<f64>();
        }
    }
    (dmean, SymMatrix::new(d, dcov).expect("d x d"))
}

/// Forward Euler on [`moment_rhs`] for `steps` steps of `inner_dt` from `t0`.
pub fn moment_propagate<M: SdeModel + ?Sized>(
    s: &MomentState,
    model: &M,
    t0: f64,
    steps: usize,
    inner_dt: f64,
) -> Result<MomentState, McError> {
    let mut last = s.clone();
    moment_trajectory_with(s, model, t0, steps, inner_dt, |_, st| last = st.clone())?;
    Ok(last)
}

/// All states of a forward Euler moment integration, initial state included.
pub fn moment_trajectory<M: SdeModel + ?Sized>(
    s: &MomentState,
    model: &M,
    t0: f64,
    steps: usize,
    inner_dt: f64,
) -> Result<Vec<MomentState>, McError> {
    let mut out = vec![s.clone()];
    moment_trajectory_with(s, model, t0, steps, inner_dt, |_, st| out.push(st.clone()))?;
    Ok(out)
}

fn moment_trajectory_with<M, O>(
    s: &MomentState,
    model: &M,
    t0: f64,
    steps: usize,
    inner_dt: f64,
    mut observer: O,
) -> Result<(), McError>
where
    M: SdeModel + ?Sized,
    O: FnMut(usize, &MomentState),
{
    if !(inner_dt > 0.0) {
        return Err(McError::InvalidConfig("inner time step must be positive".into()));
    }
    if s.dim() != model.dim() {
        return Err(McError::DimensionMismatch {
            expected: model.dim(),
            found: s.dim(),
        });
    }
    let mut mean = s.mean.clone();
    let mut cov = s.cov.clone();
    for step in 0..steps {
        let t = t0 + step as f64 * inner_dt;
        let (dm, dc) = moment_rhs(&MomentState::new(mean.clone(), cov.clone()), model, t);
        for (m, v) in mean.iter_mut().zip(&dm) {
            *m += inner_dt * v;
        }
        cov = cov.add(&dc.scale(inner_dt));
        if !(mean.iter().all(|v| v.is_finite()) && cov.is_finite()) {
            return Err(McError::NonFiniteMoments { step: step + 1 });
        }
        observer(step + 1, &MomentState::new(mean.clone(), cov.clone()));
    }
    Ok(())
}

/// What to do with an indefinite target covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepairPolicy {
    /// Clip negative eigenvalues to zero and record the repair.
    #[default]
    Clip,
    /// Refuse with [`McError::UnrepairableCovariance`].
    Strict,
}

/// Matching operator `Y = A (X - mean(X)) + M`, `A = U Q^{-1}`.
///
/// `resample_rng` supplies the standard-normal draws used when the ensemble
/// covariance is singular in some coordinates. When the target already equals
/// `restrict(ens)` exactly, the ensemble is returned unchanged.
pub fn match_ensemble(
    target: &MomentState,
    ens: &Ensemble,
    policy: RepairPolicy,
    resample_rng: &mut ChaCha8Rng,
) -> Result<Coupled<Ensemble>, McError> {
    let d = ens.dim();
    if ens.particles() < 2 {
        return Err(McError::EmptyEnsemble {
            particles: ens.particles(),
        });
    }
    if target.dim() != d {
        return Err(McError::DimensionMismatch {
            expected: d,
            found: target.dim(),
        });
    }
    let current = restrict(ens);
    if current.mean == target.mean && current.cov == target.cov {
        return Ok(Coupled::clean(ens.clone()));
    }

    let mut report = CouplingReport::default();
    let target_cov = match cholesky(&target.cov, default_pivot_tol(&target.cov)) {
        Ok(_) => target.cov.clone(),
        Err(LinalgError::NotPsd { .. }) => {
            if policy == RepairPolicy::Strict {
                return Err(McError::UnrepairableCovariance);
            }
            report.repaired = true;
            nearest_psd(&target.cov, 0.0)
        }
        Err(e) => return Err(e.into()),
    };
    let target_factor = covariance_factor(&target_cov);
    let mut work = ens.clone();
    let mut moments = current;
    let mut chol = cholesky(&moments.cov, default_pivot_tol(&moments.cov))?;
    if !chol.is_full_rank() {
        let dims = chol.degenerate.clone();
        for x in work.states.chunks_exact_mut(d) {
            for &i in &dims {
                x[i] = resample_rng.sample(StandardNormal);
            }
        }
        moments = restrict(&work);
        chol = cholesky(&moments.cov, default_pivot_tol(&moments.cov))?;
        if !chol.is_full_rank() {
            return Err(McError::DegenerateEnsemble { dims });
        }
        report.resampled = dims;
    }

    let transform = target_factor.right_divide_lower(&chol.factor)?;
    let state = affine_map(&work, &transform, &moments.mean, &target.mean);
    Ok(Coupled { state, report })
}

/// `F` with `F F^T = s`: the Cholesky factor when it reconstructs `s` to
/// `1e-10`, else the eigenvalue square root. Near-singular covariances lose
/// Cholesky accuracy in the pivots after a tiny one.
fn covariance_factor(s: &SymMatrix) -> Matrix {
    if let Ok(c) = cholesky(s, default_pivot_tol(s)) {
        let residual = c.factor.reconstruct().sub(s).frobenius_norm();
        if residual <= 1e-10 * s.frobenius_norm().max(f64::MIN_POSITIVE) {
            return c.factor.to_matrix();
        }
    }
    psd_sqrt_factor(s)
}

/// `A (x - from) + to` for every particle, followed by one shift that
/// removes the rounding left in the sample mean.
fn affine_map(ens: &Ensemble, a: &Matrix, from: &[f64], to: &[f64]) -> Ensemble {
    let d = ens.dim();
    let mut out = ens.clone();
    let mut centered = vec![0.0; d];
    for x in out.states.chunks_exact_mut(d) {
        for i in 0..d {
            centered[i] = x[i] - from[i];
        }
        for i in 0..d {
            x[i] = (0..d).map(|j| a.get(i, j) * centered[j]).sum::<f64>() + to[i];
        }
    }
    let mean = restrict_mean(&out);
    for x in out.states.chunks_exact_mut(d) {
        for i in 0..d {
            x[i] -= mean[i] - to[i];
        }
    }
    out
}

/// Componentwise arithmetic on moment states; the PSD flag is recomputed.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentAlgebra;

impl MacroAlgebra<MomentState> for MomentAlgebra {
    fn add(&self, a: &MomentState, b: &MomentState) -> MomentState {
        let mean = a.mean.iter().zip(&b.mean).map(|(x, y)| x + y).collect();
        MomentState::new(mean, a.cov.add(&b.cov))
    }

    fn sub(&self, a: &MomentState, b: &MomentState) -> MomentState {
        let mean = a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect();
        MomentState::new(mean, a.cov.sub(&b.cov))
    }
}

/// Two-dimensional test SDE with one additive noise source on `y`:
///
/// ```text
/// dx = (alpha x - x y) dt
/// dy = (-y + x^2) dt + sigma dW
/// ```
///
/// started from the point mass at `(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roberts {
    pub alpha: f64,
    pub sigma: f64,
}

impl Roberts {
    pub fn new(alpha: f64, sigma: f64) -> Self {
        Self { alpha, sigma }
    }

    pub const INITIAL: [f64; 2] = [1.0, 1.0];
}

impl SdeModel for Roberts {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out[0] = self.alpha * x[0] - x[0] * x[1];
        out[1] = -x[1] + x[0] * x[0];
    }

    fn diffusion(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = self.sigma;
    }

    fn drift_jacobian(&self, m: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(&[self.alpha - m[1], -m[0], 2.0 * m[0], -1.0]);
    }

    fn drift_hessians(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, -1.0, -1.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    }

    fn initial_ensemble(&self, particles: usize, seed: u64) -> Ensemble {
        Ensemble::dirac(&Self::INITIAL, particles).with_provenance(Provenance { seed, slab: None })
    }
}

/// Affine SDE `dX = (B X + c) dt + S dW` with a Gaussian initial law.
/// Its moment closure is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSde {
    pub drift_matrix: Matrix,
    pub drift_offset: Vec<f64>,
    /// `d x n_w`
    pub noise: Matrix,
    pub initial_mean: Vec<f64>,
    pub initial_cov: SymMatrix,
}

impl LinearSde {
    /// Scalar Ornstein-Uhlenbeck process `dX = -rate X dt + sigma dW`.
    pub fn ornstein_uhlenbeck(rate: f64, sigma: f64, mean0: f64, var0: f64) -> Self {
        Self {
            drift_matrix: Matrix::from_rows(&[[-rate]]),
            drift_offset: vec![0.0],
            noise: Matrix::from_rows(&[[sigma]]),
            initial_mean: vec![mean0],
            initial_cov: SymMatrix::from_rows(&[[var0]]),
        }
    }
}

impl SdeModel for LinearSde {
    fn dim(&self) -> usize {
        self.drift_matrix.rows()
    }

    fn noise_dim(&self) -> usize {
        self.noise.cols()
    }

    fn drift(&self, x: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.drift_offset[i]
                + (0..x.len()).map(|j| self.drift_matrix.get(i, j) * x[j]).sum::<f64>();
        }
    }

    fn diffusion(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(self.noise.as_slice());
    }

    fn drift_jacobian(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(self.drift_matrix.as_slice());
    }

    fn drift_hessians(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn initial_ensemble(&self, particles: usize, seed: u64) -> Ensemble {
        let d = self.dim();
        let factor = cholesky(&self.initial_cov, default_pivot_tol(&self.initial_cov))
            .expect("initial covariance must be PSD")
            .factor;
        let mut rng = rng::stream(seed, StreamDomain::Initial, 0, 0);
        let mut states = Vec::with_capacity(particles * d);
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        for _ in 0..particles {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            factor.mul_vec(&z, &mut x);
            states.extend(x.iter().zip(&self.initial_mean).map(|(a, m)| a + m));
        }
        Ensemble {
            dim: d,
            states,
            provenance: Provenance { seed, slab: None },
        }
    }
}

/// Run parameters of MC-moments Parareal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMomentsConfig {
    pub particles: usize,
    pub t_final: f64,
    pub slabs: usize,
    pub inner_dt: f64,
    pub seed: u64,
    pub repair: RepairPolicy,
}

impl McMomentsConfig {
    pub fn slab_length(&self) -> f64 {
        self.t_final / self.slabs as f64
    }

    /// Inner steps per slab; the slab length must be a whole multiple of
    /// `inner_dt` (relative tolerance `1e-9`).
    pub fn steps_per_slab(&self) -> Result<usize, McError> {
        if self.slabs == 0 {
            return Err(McError::InvalidConfig("at least one slab is required".into()));
        }
        if !(self.t_final > 0.0 && self.inner_dt > 0.0) {
            return Err(McError::InvalidConfig(
                "final time and inner time step must be positive".into(),
            ));
        }
        if self.particles < 2 {
            return Err(McError::InvalidConfig("at least two particles are required".into()));
        }
        let len = self.slab_length();
        let steps = (len / self.inner_dt).round();
        if steps < 1.0 || (steps * self.inner_dt - len).abs() > 1e-9 * len {
            return Err(McError::InvalidConfig(format!(
                "slab length {len} is not a multiple of the inner step {}",
                self.inner_dt
            )));
        }
        Ok(steps as usize)
    }
}

/// MC-moments Parareal for a model: fine and coarse propagators, coupling
/// and macro algebra in one value.
#[derive(Debug, Clone)]
pub struct McMoments<M> {
    pub model: M,
    pub config: McMomentsConfig,
    pub table: BrownianTable,
    initial: Ensemble,
}

impl<M: SdeModel> McMoments<M> {
    pub fn new(model: M, config: McMomentsConfig) -> Result<Self, McError> {
        let steps = config.steps_per_slab()?;
        let table = BrownianTable::new(config.seed, steps, model.noise_dim(), config.inner_dt);
        let initial = model.initial_ensemble(config.particles, config.seed);
        if initial.dim() != model.dim() {
            return Err(McError::DimensionMismatch {
                expected: model.dim(),
                found: initial.dim(),
            });
        }
        Ok(Self {
            model,
            config,
            table,
            initial,
        })
    }

    /// The cached initial ensemble, also the prior of every lift.
    pub fn initial(&self) -> &Ensemble {
        &self.initial
    }

    fn slab_start(&self, slab: usize) -> f64 {
        slab as f64 * self.config.slab_length()
    }

    fn resample_stream(&self, slot: Slot) -> ChaCha8Rng {
        rng::stream(
            self.config.seed,
            StreamDomain::Resample,
            slot.iteration as u32,
            slot.index as u32,
        )
    }

    pub fn lift(&self, target: &MomentState, slot: Slot) -> Result<Coupled<Ensemble>, McError> {
        match_ensemble(target, &self.initial, self.config.repair, &mut self.resample_stream(slot))
    }

    pub fn run(&self, iterations: usize, workers: usize) -> Result<IterateGrid<Ensemble, MomentState>, EngineError> {
        let config = RunConfig::new(self.config.slabs)
            .with_iterations(iterations)
            .with_workers(workers);
        engine::run_micro_macro(self, self, &MomentAlgebra, &self.initial, config)
    }
}

impl<M: SdeModel> Propagator for McMoments<M> {
    type Micro = Ensemble;
    type Macro = MomentState;

    fn fine(&self, u: &Ensemble, slab: usize) -> Result<Ensemble, ModelError> {
        Ok(em_propagate(u, &self.model, &self.table, slab, self.slab_start(slab))?)
    }

    fn coarse(&self, rho: &MomentState, slab: usize) -> Result<MomentState, ModelError> {
        Ok(moment_propagate(
            rho,
            &self.model,
            self.slab_start(slab),
            self.table.steps_per_slab,
            self.config.inner_dt,
        )?)
    }
}

impl<M: SdeModel> Coupling<Ensemble, MomentState> for McMoments<M> {
    fn restrict(&self, u: &Ensemble) -> MomentState {
        restrict(u)
    }

    fn match_state(&self, target: &MomentState, prior: &Ensemble, slot: Slot) -> Result<Coupled<Ensemble>, ModelError> {
        Ok(match_ensemble(target, prior, self.config.repair, &mut self.resample_stream(slot))?)
    }

    fn lift(&self, target: &MomentState, slot: Slot) -> Result<Coupled<Ensemble>, ModelError> {
        Ok(McMoments::lift(self, target, slot)?)
    }
}
