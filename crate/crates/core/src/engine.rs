//! Parareal drivers.
//!
//! Three variants share one iterate layout ([`IterateGrid`]):
//!
//! * [`run_classical`]: micro and macro spaces coincide;
//!   `U[k+1][n+1] = F(U[k][n]) + C(U[k+1][n]) - C(U[k][n])`.
//! * [`run_micro_macro`]: the coarse propagator acts on restricted states,
//!   new micro states are obtained by matching the corrected macro state
//!   against the fine result.
//! * [`run_lifting_variant`]: the coarse correction is lifted and added to
//!   the fine result; only meaningful when micro states form a vector space.
//!
//! The fine propagations of one iteration are independent and run on a rayon
//! pool with `workers` threads. The coarse sweep is sequential. Results never
//! depend on the worker count: the fine sweep collects in slab order and every
//! model in this crate reduces in a fixed order.
//!
//! Coarse values `C(rho[k][n])` are computed once and recycled by the next
//! iteration, and `F(U[k][n])` is computed once per slot and shared between
//! the macro update and the matching step. A `K`-iteration run therefore
//! costs exactly `N * K` fine propagations plus `N` for the sequential
//! reference.

use rayon::prelude::*;
use thiserror::Error;

/// Boxed error returned by model callbacks.
pub type ModelError = Box<dyn std::error::Error + Send + Sync>;

/// Position in the iterate grid: iteration `k`, time index `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub iteration: usize,
    pub index: usize,
}

impl Slot {
    pub fn new(iteration: usize, index: usize) -> Self {
        Self { iteration, index }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("fine propagation failed on slab {slab}: {source}")]
    Fine { slab: usize, source: ModelError },
    #[error("coarse propagation failed on slab {slab}: {source}")]
    Coarse { slab: usize, source: ModelError },
    #[error("coupling failed at iteration {}, index {}: {source}", slot.iteration, slot.index)]
    Coupling { slot: Slot, source: ModelError },
}

/// Fine and coarse propagators over one time slab.
///
/// Both maps must be deterministic: identical inputs give identical outputs.
/// The fine map is called concurrently from several workers.
pub trait Propagator: Sync {
    type Micro: Clone + Send + Sync;
    type Macro: Clone + Send + Sync;

    fn fine(&self, u: &Self::Micro, slab: usize) -> Result<Self::Micro, ModelError>;
    fn coarse(&self, rho: &Self::Macro, slab: usize) -> Result<Self::Macro, ModelError>;
}

/// Non-fatal events raised while producing a micro state from a macro state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CouplingReport {
    /// The macro state was outside its domain (e.g. an indefinite covariance)
    /// and was repaired before matching.
    pub repaired: bool,
    /// Micro coordinates that had to be redrawn.
    pub resampled: Vec<usize>,
}

impl CouplingReport {
    pub fn is_clean(&self) -> bool {
        !self.repaired && self.resampled.is_empty()
    }
}

/// A micro state produced by matching or lifting, with its report.
#[derive(Debug, Clone)]
pub struct Coupled<U> {
    pub state: U,
    pub report: CouplingReport,
}

impl<U> Coupled<U> {
    pub fn clean(state: U) -> Self {
        Self {
            state,
            report: CouplingReport::default(),
        }
    }
}

/// Restriction, matching and lifting between micro states `U` and macro
/// states `R`.
///
/// Implementations must satisfy `restrict(match_state(r, u)) == r` and
/// `restrict(lift(r)) == r` up to their own tolerance, and should satisfy
/// `match_state(restrict(u), u) == u` for finite termination.
pub trait Coupling<U, R>: Sync {
    fn restrict(&self, u: &U) -> R;
    fn match_state(&self, target: &R, prior: &U, slot: Slot) -> Result<Coupled<U>, ModelError>;
    fn lift(&self, target: &R, slot: Slot) -> Result<Coupled<U>, ModelError>;
}

/// Affine operations on a state space. The three-term correction needs
/// `add` and `sub`; implementations should make `add(sub(a, b), b) == a`
/// hold to rounding.
pub trait MacroAlgebra<R> {
    fn add(&self, a: &R, b: &R) -> R;
    fn sub(&self, a: &R, b: &R) -> R;
}

/// Run size and parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    /// Number of time slabs `N`.
    pub slabs: usize,
    /// Number of Parareal iterations `K` after the zeroth.
    pub iterations: usize,
    /// Worker threads for the fine sweep (at least 1).
    pub workers: usize,
}

impl RunConfig {
    /// `K = N`, one worker.
    pub fn new(slabs: usize) -> Self {
        Self {
            slabs,
            iterations: slabs,
            workers: 1,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.slabs == 0 {
            return Err(EngineError::InvalidConfig("at least one slab is required".into()));
        }
        if self.workers == 0 {
            return Err(EngineError::InvalidConfig("at least one worker is required".into()));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool, EngineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| EngineError::InvalidConfig(format!("cannot start worker pool: {e}")))
    }
}

/// A coupling event recorded at a grid slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotEvent {
    pub slot: Slot,
    pub report: CouplingReport,
}

/// All iterates of a run, indexed `[k][n]` with `0 <= k <= K`, `0 <= n <= N`,
/// and the sequential fine reference `reference[n]`.
#[derive(Debug, Clone)]
pub struct IterateGrid<U, R> {
    pub micro: Vec<Vec<U>>,
    pub macro_states: Vec<Vec<R>>,
    pub reference: Vec<U>,
    /// Coupling events, in slot order. Clean slots are omitted.
    pub events: Vec<SlotEvent>,
    /// Fine propagator invocations, reference included.
    pub fine_calls: usize,
}

impl<U, R> IterateGrid<U, R> {
    pub fn slabs(&self) -> usize {
        self.reference.len() - 1
    }

    pub fn iterations(&self) -> usize {
        self.micro.len() - 1
    }
}

fn sequential_reference<P: Propagator>(
    prop: &P,
    u0: &P::Micro,
    slabs: usize,
) -> Result<Vec<P::Micro>, EngineError> {
    let mut reference = Vec::with_capacity(slabs + 1);
    reference.push(u0.clone());
    for n in 0..slabs {
        let next = prop
            .fine(&reference[n], n)
            .map_err(|source| EngineError::Fine { slab: n, source })?;
        reference.push(next);
    }
    Ok(reference)
}

fn coarse<P: Propagator>(prop: &P, rho: &P::Macro, slab: usize) -> Result<P::Macro, EngineError> {
    prop.coarse(rho, slab)
        .map_err(|source| EngineError::Coarse { slab, source })
}

/// Fine propagation of every slab start of one iteration, in parallel,
/// collected in slab order together with `extra(result)`.
fn fine_sweep<P, T, E>(prop: &P, starts: &[P::Micro], extra: E) -> Result<Vec<(P::Micro, T)>, EngineError>
where
    P: Propagator,
    T: Send,
    E: Fn(&P::Micro) -> T + Sync,
{
    starts
        .par_iter()
        .enumerate()
        .map(|(n, u)| {
            let f = prop
                .fine(u, n)
                .map_err(|source| EngineError::Fine { slab: n, source })?;
            let t = extra(&f);
            Ok((f, t))
        })
        .collect()
}

/// Classical Parareal on a single state space.
pub fn run_classical<P, A>(
    prop: &P,
    alg: &A,
    u0: &P::Micro,
    config: RunConfig,
) -> Result<IterateGrid<P::Micro, P::Micro>, EngineError>
where
    P: Propagator<Macro = <P as Propagator>::Micro>,
    A: MacroAlgebra<P::Micro> + Sync,
{
    config.validate()?;
    let n_slabs = config.slabs;
    config.pool()?.install(|| {
        let reference = sequential_reference(prop, u0, n_slabs)?;
        let mut fine_calls = n_slabs;

        let mut level = Vec::with_capacity(n_slabs + 1);
        let mut coarse_prev = Vec::with_capacity(n_slabs);
        level.push(u0.clone());
        for n in 0..n_slabs {
            let c = coarse(prop, &level[n], n)?;
            coarse_prev.push(c.clone());
            level.push(c);
        }
        let mut micro = vec![level];

        for _k in 0..config.iterations {
            let last = micro.last().expect("iteration 0 exists");
            let fine = fine_sweep(prop, &last[..n_slabs], |_| ())?;
            fine_calls += n_slabs;
            let mut next = Vec::with_capacity(n_slabs + 1);
            let mut coarse_new = Vec::with_capacity(n_slabs);
            next.push(u0.clone());
            for (n, (f, ())) in fine.iter().enumerate() {
                let c = coarse(prop, &next[n], n)?;
                let u = alg.add(f, &alg.sub(&c, &coarse_prev[n]));
                coarse_new.push(c);
                next.push(u);
            }
            coarse_prev = coarse_new;
            micro.push(next);
        }
        Ok(IterateGrid {
            macro_states: micro.clone(),
            micro,
            reference,
            events: Vec::new(),
            fine_calls,
        })
    })
}

/// Micro-macro Parareal with matching.
///
/// Iteration zero runs the coarse propagator on the restricted initial state
/// and lifts every result. Iteration `k + 1` then sets
/// `rho[k+1][n+1] = R(F(U[k][n])) + (C(rho[k+1][n]) - C(rho[k][n]))` and
/// `U[k+1][n+1] = M(rho[k+1][n+1], F(U[k][n]))`.
pub fn run_micro_macro<P, Cp, A>(
    prop: &P,
    cpl: &Cp,
    alg: &A,
    u0: &P::Micro,
    config: RunConfig,
) -> Result<IterateGrid<P::Micro, P::Macro>, EngineError>
where
    P: Propagator,
    Cp: Coupling<P::Micro, P::Macro>,
    A: MacroAlgebra<P::Macro> + Sync,
{
    config.validate()?;
    let n_slabs = config.slabs;
    config.pool()?.install(|| {
        let reference = sequential_reference(prop, u0, n_slabs)?;
        let mut fine_calls = n_slabs;
        let mut events = Vec::new();
        let rho0 = cpl.restrict(u0);

        let couple = |res: Result<Coupled<P::Micro>, ModelError>,
                      slot: Slot,
                      events: &mut Vec<SlotEvent>|
         -> Result<P::Micro, EngineError> {
            let c = res.map_err(|source| EngineError::Coupling { slot, source })?;
            if !c.report.is_clean() {
                events.push(SlotEvent {
                    slot,
                    report: c.report,
                });
            }
            Ok(c.state)
        };

        let mut macro_level = Vec::with_capacity(n_slabs + 1);
        let mut micro_level = Vec::with_capacity(n_slabs + 1);
        let mut coarse_prev = Vec::with_capacity(n_slabs);
        macro_level.push(rho0.clone());
        micro_level.push(u0.clone());
        for n in 0..n_slabs {
            let c = coarse(prop, &macro_level[n], n)?;
            let slot = Slot::new(0, n + 1);
            let u = couple(cpl.lift(&c, slot), slot, &mut events)?;
            coarse_prev.push(c.clone());
            macro_level.push(c);
            micro_level.push(u);
        }
        let mut micro = vec![micro_level];
        let mut macro_states = vec![macro_level];

        for k in 0..config.iterations {
            let starts = &micro[k][..n_slabs];
            let fine = fine_sweep(prop, starts, |f| cpl.restrict(f))?;
            fine_calls += n_slabs;

            let mut next_macro = Vec::with_capacity(n_slabs + 1);
            let mut next_micro = Vec::with_capacity(n_slabs + 1);
            let mut coarse_new = Vec::with_capacity(n_slabs);
            next_macro.push(rho0.clone());
            next_micro.push(u0.clone());
            for (n, (f, restricted)) in fine.iter().enumerate() {
                let c = coarse(prop, &next_macro[n], n)?;
                let rho = alg.add(restricted, &alg.sub(&c, &coarse_prev[n]));
                let slot = Slot::new(k + 1, n + 1);
                let u = couple(cpl.match_state(&rho, f, slot), slot, &mut events)?;
                coarse_new.push(c);
                next_macro.push(rho);
                next_micro.push(u);
            }
            coarse_prev = coarse_new;
            micro.push(next_micro);
            macro_states.push(next_macro);
        }
        Ok(IterateGrid {
            micro,
            macro_states,
            reference,
            events,
            fine_calls,
        })
    })
}

/// Parareal with a lifted coarse correction:
/// `U[k+1][n+1] = F(U[k][n]) + L(C(R(U[k+1][n])) - C(R(U[k][n])))`.
///
/// Micro states must support addition, which is expressed by requiring a
/// [`MacroAlgebra`] on the micro type as well. Particle ensembles have no such
/// structure, so this variant is not available for them.
pub fn run_lifting_variant<P, Cp, A>(
    prop: &P,
    cpl: &Cp,
    alg: &A,
    u0: &P::Micro,
    config: RunConfig,
) -> Result<IterateGrid<P::Micro, P::Macro>, EngineError>
where
    P: Propagator,
    Cp: Coupling<P::Micro, P::Macro>,
    A: MacroAlgebra<P::Macro> + MacroAlgebra<P::Micro> + Sync,
{
    config.validate()?;
    let n_slabs = config.slabs;
    config.pool()?.install(|| {
        let reference = sequential_reference(prop, u0, n_slabs)?;
        let mut fine_calls = n_slabs;
        let mut events = Vec::new();

        let lift = |rho: &P::Macro, slot: Slot, events: &mut Vec<SlotEvent>| {
            let c = cpl
                .lift(rho, slot)
                .map_err(|source| EngineError::Coupling { slot, source })?;
            if !c.report.is_clean() {
                events.push(SlotEvent {
                    slot,
                    report: c.report,
                });
            }
            Ok::<_, EngineError>(c.state)
        };

        let mut micro_level = Vec::with_capacity(n_slabs + 1);
        let mut macro_level = Vec::with_capacity(n_slabs + 1);
        let mut coarse_prev = Vec::with_capacity(n_slabs);
        micro_level.push(u0.clone());
        macro_level.push(cpl.restrict(u0));
        for n in 0..n_slabs {
            let c = coarse(prop, &macro_level[n], n)?;
            let u = lift(&c, Slot::new(0, n + 1), &mut events)?;
            coarse_prev.push(c);
            macro_level.push(cpl.restrict(&u));
            micro_level.push(u);
        }
        let mut micro = vec![micro_level];
        let mut macro_states = vec![macro_level];

        for k in 0..config.iterations {
            let fine = fine_sweep(prop, &micro[k][..n_slabs], |_| ())?;
            fine_calls += n_slabs;
            let mut next_micro = Vec::with_capacity(n_slabs + 1);
            let mut next_macro = Vec::with_capacity(n_slabs + 1);
            let mut coarse_new = Vec::with_capacity(n_slabs);
            next_micro.push(u0.clone());
            next_macro.push(cpl.restrict(u0));
            for (n, (f, ())) in fine.iter().enumerate() {
                let c = coarse(prop, &next_macro[n], n)?;
                let delta: P::Macro = MacroAlgebra::<P::Macro>::sub(alg, &c, &coarse_prev[n]);
                let lifted = lift(&delta, Slot::new(k + 1, n + 1), &mut events)?;
                let u: P::Micro = MacroAlgebra::<P::Micro>::add(alg, f, &lifted);
                coarse_new.push(c);
                next_macro.push(cpl.restrict(&u));
                next_micro.push(u);
            }
            coarse_prev = coarse_new;
            micro.push(next_micro);
            macro_states.push(next_macro);
        }
        Ok(IterateGrid {
            micro,
            macro_states,
            reference,
            events,
            fine_calls,
        })
    })
}

/// Errors of one scalar component against the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    /// `errors[k][n] = |c(U[k][n]) - c(reference[n])|`
    pub errors: Vec<Vec<f64>>,
    /// `max[k] = max over n >= 1 of errors[k][n]`
    pub max: Vec<f64>,
    /// `max over n >= 1 of |c(reference[n])|`
    pub reference_scale: f64,
}

impl ErrorTable {
    /// Builds the table from component values `iterates[k][n]` and `reference[n]`.
    pub fn from_components(iterates: &[Vec<f64>], reference: &[f64]) -> Self {
        let errors: Vec<Vec<f64>> = iterates
            .iter()
            .map(|row| row.iter().zip(reference).map(|(a, r)| (a - r).abs()).collect())
            .collect();
        let max = errors
            .iter()
            .map(|row| row.iter().skip(1).fold(0.0_f64, |m, &e| m.max(e)))
            .collect();
        let reference_scale = reference.iter().skip(1).fold(0.0_f64, |m, r| m.max(r.abs()));
        Self {
            errors,
            max,
            reference_scale,
        }
    }

    /// `max[k] / reference_scale`: the relative error in the infinity norm over time.
    pub fn relative_max(&self) -> Vec<f64> {
        self.max.iter().map(|m| m / self.reference_scale).collect()
    }
}

/// Error table of the scalar component `selector` of the micro iterates.
pub fn error_table<U, R>(grid: &IterateGrid<U, R>, selector: impl Fn(&U) -> f64) -> ErrorTable {
    let iterates: Vec<Vec<f64>> = grid
        .micro
        .iter()
        .map(|row| row.iter().map(&selector).collect())
        .collect();
    let reference: Vec<f64> = grid.reference.iter().map(&selector).collect();
    ErrorTable::from_components(&iterates, &reference)
}
