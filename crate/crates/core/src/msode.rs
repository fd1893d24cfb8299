//! Two-scale linear ODE testbed and its convergence bounds.
//!
//! The micro model is
//!
//! ```text
//! d/dt [x, y] = [[alpha, beta], [0, delta]] [x, y],
//! ```
//!
//! with `y` the fast variable, and the macro model is the scalar decay
//! `dX/dt = alpha_bar X`. Both are propagated exactly over a slab of length
//! `dt`: the fine propagator multiplies by `A = exp(K dt)`, the coarse one by
//! `G = exp(alpha_bar dt)`. Restriction keeps `x`, matching overwrites `x`
//! and keeps `y`, lifting zero-fills `y`.
//!
//! With these operators the Parareal error obeys a closed linear recursion
//! ([`error_recursion_oracle`]), the fast error contracts by `exp(delta dt)`
//! per iteration ([`fast_error_bound`]), and the slow error is dominated by
//! [`linear_bound`], [`superlinear_bound`] and the looser
//! [`nontight_bound`].

use thiserror::Error;

use crate::engine::{
    self, Coupled, Coupling, EngineError, IterateGrid, MacroAlgebra, ModelError, Propagator,
    RunConfig, Slot,
};
use crate::smallmat::{expm_2x2_upper, rates_coincide, UpperTri2x2Exp};

/// Micro state `[x, y]`.
pub type OdeState = [f64; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MsOdeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("the linear bound is undefined for G == 1")]
    DegenerateBound,
}

/// Parameters of the two-scale ODE, its reduced model, and the time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsOdeParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub alpha_bar: f64,
    /// Slab length.
    pub dt: f64,
    /// Number of slabs `N`.
    pub slabs: usize,
    pub x0: f64,
    pub y0: f64,
}

impl MsOdeParams {
    /// The reference configuration: `alpha_bar = alpha (1 + zeta_perturb)`
    /// with `zeta_perturb = 1`, `dt = 1`, `N = 10`, `x0 = y0 = 1`.
    pub fn reference_case(alpha: f64, delta: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            delta,
            alpha_bar: perturbed_rate(alpha, 1.0),
            dt: 1.0,
            slabs: 10,
            x0: 1.0,
            y0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), MsOdeError> {
        let finite = [self.alpha, self.beta, self.delta, self.alpha_bar, self.dt, self.x0, self.y0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(MsOdeError::InvalidParams("all parameters must be finite".into()));
        }
        if self.dt <= 0.0 {
            return Err(MsOdeError::InvalidParams(format!("dt must be positive, got {}", self.dt)));
        }
        if self.slabs == 0 {
            return Err(MsOdeError::InvalidParams("at least one slab is required".into()));
        }
        Ok(())
    }

    /// Whether the decay hypotheses of the slow-error bounds hold
    /// (`alpha < 0` and `delta < 0`).
    pub fn bounds_apply(&self) -> bool {
        self.alpha < 0.0 && self.delta < 0.0
    }

    pub fn initial_state(&self) -> OdeState {
        [self.x0, self.y0]
    }

    pub fn matrices(&self) -> PropagatorMatrices {
        PropagatorMatrices {
            fine: expm_2x2_upper(self.alpha, self.beta, self.delta, self.dt),
            coarse_gain: (self.alpha_bar * self.dt).exp(),
        }
    }
}

/// `alpha (1 + zeta_perturb)`: a reduced rate perturbed away from `alpha`.
pub fn perturbed_rate(alpha: f64, zeta_perturb: f64) -> f64 {
    alpha * (1.0 + zeta_perturb)
}

/// `zeta_timescale / epsilon`: a fast rate from a timescale ratio and a small
/// parameter.
pub fn fast_rate(zeta_timescale: f64, epsilon: f64) -> f64 {
    zeta_timescale / epsilon
}

/// One-slab propagators: the fine matrix `A` and the coarse multiplier `G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatorMatrices {
    pub fine: UpperTri2x2Exp,
    pub coarse_gain: f64,
}

/// The full micro-macro model: propagators, coupling operators and algebra.
#[derive(Debug, Clone, Copy)]
pub struct MsOde {
    pub params: MsOdeParams,
    pub matrices: PropagatorMatrices,
}

impl MsOde {
    pub fn new(params: MsOdeParams) -> Result<Self, MsOdeError> {
        params.validate()?;
        Ok(Self {
            params,
            matrices: params.matrices(),
        })
    }

    pub fn fine_prop(&self, u: OdeState) -> OdeState {
        self.matrices.fine.apply(u)
    }

    pub fn coarse_prop(&self, x: f64) -> f64 {
        self.matrices.coarse_gain * x
    }

    pub fn restrict(u: OdeState) -> f64 {
        u[0]
    }

    pub fn match_slow(x: f64, prior: OdeState) -> OdeState {
        [x, prior[1]]
    }

    pub fn lift(x: f64) -> OdeState {
        [x, 0.0]
    }

    pub fn run(&self, config: RunConfig) -> Result<IterateGrid<OdeState, f64>, EngineError> {
        engine::run_micro_macro(self, self, self, &self.params.initial_state(), config)
    }

    pub fn run_lifting(&self, config: RunConfig) -> Result<IterateGrid<OdeState, f64>, EngineError> {
        engine::run_lifting_variant(self, self, self, &self.params.initial_state(), config)
    }
}

impl Propagator for MsOde {
    type Micro = OdeState;
    type Macro = f64;

    fn fine(&self, u: &OdeState, _slab: usize) -> Result<OdeState, ModelError> {
        Ok(self.fine_prop(*u))
    }

    fn coarse(&self, x: &f64, _slab: usize) -> Result<f64, ModelError> {
        Ok(self.coarse_prop(*x))
    }
}

impl Coupling<OdeState, f64> for MsOde {
    fn restrict(&self, u: &OdeState) -> f64 {
        Self::restrict(*u)
    }

    fn match_state(&self, x: &f64, prior: &OdeState, _: Slot) -> Result<Coupled<OdeState>, ModelError> {
        Ok(Coupled::clean(Self::match_slow(*x, *prior)))
    }

    fn lift(&self, x: &f64, _: Slot) -> Result<Coupled<OdeState>, ModelError> {
        Ok(Coupled::clean(Self::lift(*x)))
    }
}

impl MacroAlgebra<f64> for MsOde {
    fn add(&self, a: &f64, b: &f64) -> f64 {
        a + b
    }
    fn sub(&self, a: &f64, b: &f64) -> f64 {
        a - b
    }
}

impl MacroAlgebra<OdeState> for MsOde {
    fn add(&self, a: &OdeState, b: &OdeState) -> OdeState {
        [a[0] + b[0], a[1] + b[1]]
    }
    fn sub(&self, a: &OdeState, b: &OdeState) -> OdeState {
        [a[0] - b[0], a[1] - b[1]]
    }
}

/// Micro errors `U[k][n] - reference[n]` of a run.
pub fn measured_errors(grid: &IterateGrid<OdeState, f64>) -> Vec<Vec<OdeState>> {
    grid.micro
        .iter()
        .map(|row| {
            row.iter()
                .zip(&grid.reference)
                .map(|(u, r)| [u[0] - r[0], u[1] - r[1]])
                .collect()
        })
        .collect()
}

/// Propagates the zeroth-iteration errors through
/// `e[k+1][n+1] = (A - B) e[k][n] + B e[k+1][n]`, `e[k][0] = 0`,
/// with `B = diag(G, 0)`.
pub fn error_recursion_oracle(
    matrices: &PropagatorMatrices,
    e0: &[OdeState],
    iterations: usize,
) -> Vec<Vec<OdeState>> {
    let a = matrices.fine;
    let g = matrices.coarse_gain;
    let mut out = Vec::with_capacity(iterations + 1);
    out.push(e0.to_vec());
    for k in 0..iterations {
        let prev = &out[k];
        let mut next = vec![[0.0; 2]; prev.len()];
        for n in 0..prev.len().saturating_sub(1) {
            let [ex, ey] = prev[n];
            next[n + 1] = [
                (a.slow - g) * ex + a.coupling * ey + g * next[n][0],
                a.fast * ey,
            ];
        }
        out.push(next);
    }
    out
}

/// Coupling coefficient of the slow error to the fast error:
/// `beta dt exp(delta dt)` for equal rates, else
/// `beta / (delta - alpha) (exp(delta dt) - exp(alpha dt))`.
pub fn gamma_coefficient(params: &MsOdeParams) -> f64 {
    let MsOdeParams {
        alpha,
        beta,
        delta,
        dt,
        ..
    } = *params;
    if rates_coincide(alpha, delta) {
        beta * dt * (delta * dt).exp()
    } else {
        beta / (delta - alpha) * ((delta * dt).exp() - (alpha * dt).exp())
    }
}

/// Everything the slow-error bounds depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// `F = exp(alpha dt)`
    pub slow_decay: f64,
    /// `G = exp(alpha_bar dt)`
    pub coarse_gain: f64,
    /// `d = exp(delta dt)`
    pub fast_decay: f64,
    pub gamma: f64,
    /// `max_n |x[0][n] - x[n]|`
    pub e_x0_max: f64,
    /// `max_n |y[0][n] - y[n]|`
    pub e_y0_max: f64,
    pub slabs: usize,
}

impl BoundInputs {
    /// Takes the initial errors from the zeroth iterate of an actual run.
    pub fn from_run(params: &MsOdeParams, grid: &IterateGrid<OdeState, f64>) -> Self {
        let m = params.matrices();
        let x_table = engine::error_table(grid, |u| u[0]);
        let y_table = engine::error_table(grid, |u| u[1]);
        Self {
            slow_decay: m.fine.slow,
            coarse_gain: m.coarse_gain,
            fast_decay: m.fine.fast,
            gamma: gamma_coefficient(params),
            e_x0_max: x_table.max[0],
            e_y0_max: y_table.max[0],
            slabs: params.slabs,
        }
    }

    /// Contraction factor `|F - G| / (1 - G)` of the linear bound.
    fn linear_rate(&self) -> f64 {
        (self.slow_decay - self.coarse_gain).abs() / (1.0 - self.coarse_gain)
    }
}

/// `r^k e_x0 + |gamma| / (1 - G) sum_{i<k} r^i d^(k-1-i) e_y0`
/// with `r = |F - G| / (1 - G)`.
pub fn linear_bound(inputs: &BoundInputs, k: usize) -> Result<f64, MsOdeError> {
    if inputs.coarse_gain == 1.0 {
        return Err(MsOdeError::DegenerateBound);
    }
    let r = inputs.linear_rate();
    let d = inputs.fast_decay;
    let mut sum = 0.0;
    for i in 0..k {
        sum += r.powi(i as i32) * d.powi((k - 1 - i) as i32);
    }
    Ok(r.powi(k as i32) * inputs.e_x0_max
        + inputs.gamma.abs() / (1.0 - inputs.coarse_gain) * sum * inputs.e_y0_max)
}

/// `prod_{j=1}^{i} (N - j) / i!`, which is zero once `i >= N`.
fn falling_over_factorial(slabs: usize, i: usize) -> f64 {
    (1..=i).fold(1.0, |acc, j| acc * (slabs as f64 - j as f64) / j as f64)
}

/// Amplification constant of the superlinear bound:
/// `(1 - |G|^N) / (1 - |G|)` if `|G| < 1`, else `|G|^N binom(N - 1, k)`.
pub fn bound_amplification(coarse_gain: f64, slabs: usize, k: usize) -> f64 {
    let g = coarse_gain.abs();
    let n = slabs as i32;
    if g < 1.0 {
        (1.0 - g.powi(n)) / (1.0 - g)
    } else {
        g.powi(n) * binomial(slabs.saturating_sub(1), k)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (1..=k).fold(1.0, |acc, j| acc * (n + 1 - j) as f64 / j as f64)
}

/// `|F - G|^k P(k) e_x0 + |gamma| Q sum_{i<k} |F - G|^i P(i) d^(k-1-i) e_y0`
/// with `P(i) = prod_{j=1}^{i} (N - j) / i!` and `Q` from [`bound_amplification`].
pub fn superlinear_bound(inputs: &BoundInputs, k: usize) -> f64 {
    let diff = (inputs.slow_decay - inputs.coarse_gain).abs();
    let d = inputs.fast_decay;
    let n = inputs.slabs;
    let q = bound_amplification(inputs.coarse_gain, n, k);
    let mut sum = 0.0;
    for i in 0..k {
        sum += diff.powi(i as i32) * falling_over_factorial(n, i) * d.powi((k - 1 - i) as i32);
    }
    diff.powi(k as i32) * falling_over_factorial(n, k) * inputs.e_x0_max
        + inputs.gamma.abs() * q * sum * inputs.e_y0_max
}

/// Generating-function style bound: iterates
/// `eta[k+1][n+1] = ||A - B|| eta[k][n] + ||B|| eta[k+1][n]` with equality,
/// infinity norms throughout, `eta[0][n] = e0_norms[n]`, `eta[k][0] = 0`.
/// Returns `max over n >= 1` for `k = 0..=iterations`.
pub fn nontight_bound(matrices: &PropagatorMatrices, e0_norms: &[f64], iterations: usize) -> Vec<f64> {
    let a = matrices.fine;
    let g = matrices.coarse_gain;
    let norm_diff = ((a.slow - g).abs() + a.coupling.abs()).max(a.fast.abs());
    let norm_coarse = g.abs();
    let max_tail = |row: &[f64]| row.iter().skip(1).fold(0.0_f64, |m, &v| m.max(v));

    let mut row = e0_norms.to_vec();
    let mut out = vec![max_tail(&row)];
    for _ in 0..iterations {
        let mut next = vec![0.0; row.len()];
        for n in 0..row.len().saturating_sub(1) {
            next[n + 1] = norm_diff * row[n] + norm_coarse * next[n];
        }
        out.push(max_tail(&next));
        row = next;
    }
    out
}

/// `exp(delta dt)^k e_y0_max`.
pub fn fast_error_bound(params: &MsOdeParams, e_y0_max: f64, k: usize) -> f64 {
    (params.delta * params.dt).exp().powi(k as i32) * e_y0_max
}

/// Measured slow error and all bounds for one iteration count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub k: usize,
    pub e_meas: f64,
    pub bound_linear: f64,
    pub bound_superlinear: f64,
    pub bound_nontight: f64,
}

impl ConvergenceRow {
    pub fn bound_min(&self) -> f64 {
        self.bound_linear.min(self.bound_superlinear)
    }
}

/// Runs micro-macro Parareal for `params` and evaluates every bound against
/// the measured slow error, for `k = 0..=iterations`.
pub fn convergence_study(
    params: &MsOdeParams,
    iterations: usize,
    workers: usize,
) -> Result<Vec<ConvergenceRow>, ConvergenceError> {
    let model = MsOde::new(*params)?;
    let config = RunConfig::new(params.slabs)
        .with_iterations(iterations)
        .with_workers(workers);
    let grid = model.run(config)?;
    let slow = engine::error_table(&grid, |u| u[0]);
    let inputs = BoundInputs::from_run(params, &grid);
    let e0_norms: Vec<f64> = measured_errors(&grid)[0]
        .iter()
        .map(|e| e[0].abs().max(e[1].abs()))
        .collect();
    let nontight = nontight_bound(&model.matrices, &e0_norms, iterations);
    (0..=iterations)
        .map(|k| {
            Ok(ConvergenceRow {
                k,
                e_meas: slow.max[k],
                bound_linear: linear_bound(&inputs, k)?,
                bound_superlinear: superlinear_bound(&inputs, k),
                bound_nontight: nontight[k],
            })
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error(transparent)]
    Params(#[from] MsOdeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
