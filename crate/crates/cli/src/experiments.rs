//! The experiments behind each subcommand. Every `compute_*` function is
//! pure given its config; the matching `run_*` writes CSVs and the resolved
//! config into `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use mmparareal::engine::{ErrorTable, RunConfig, Slot};
use mmparareal::mcmoments::{
    em_propagate_observed, match_ensemble, moment_trajectory, restrict, BrownianTable, LinearSde,
    McMoments, McMomentsConfig, MomentState, RepairPolicy, Roberts, SdeModel,
};
use mmparareal::msode::{
    convergence_study, error_recursion_oracle, measured_errors, perturbed_rate, ConvergenceError,
    ConvergenceRow, MsOde, MsOdeParams,
};
use mmparareal::rng::{self, StreamDomain};
use mmparareal::smallmat::{Matrix, SymMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{whole_steps, Experiment, ExperimentConfig};
use crate::CliError;

pub const MOMENT_NAMES: [&str; 5] = ["M_x", "M_y", "C_xx", "C_xy", "C_yy"];

/// Seventeen significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::Writer::from_path(path)?)
}

fn moments5(s: &MomentState) -> [f64; 5] {
    s.components()
        .try_into()
        .expect("two-dimensional moment state")
}

/// Writes `<experiment>_config.txt` into the output directory, creating it.
pub fn write_resolved_config(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join(format!("{}_config.txt", config.experiment.name().replace('-', "_")));
    fs::write(&path, config.to_text())?;
    Ok(path)
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

/// One `(alpha, delta, beta)` case of the ODE sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeCase {
    pub params: MsOdeParams,
    pub rows: Vec<ConvergenceRow>,
}

pub fn ode_params(config: &ExperimentConfig) -> Vec<MsOdeParams> {
    let mut out = Vec::new();
    for (&alpha, &delta) in config.alpha.iter().zip(&config.delta) {
        for &beta in &config.beta {
            out.push(MsOdeParams {
                alpha,
                beta,
                delta,
                alpha_bar: config
                    .alpha_bar
                    .unwrap_or_else(|| perturbed_rate(alpha, config.zeta_perturb)),
                dt: config.dt,
                slabs: config.n_slabs,
                x0: 1.0,
                y0: 1.0,
            });
        }
    }
    out
}

pub fn compute_ode_convergence(config: &ExperimentConfig) -> Result<Vec<OdeCase>, CliError> {
    ode_params(config)
        .into_iter()
        .map(|params| {
            if !params.bounds_apply() {
                return Err(CliError::Config(format!(
                    "the bounds need alpha < 0 and delta < 0, got alpha={} delta={}",
                    params.alpha, params.delta
                )));
            }
            let rows = convergence_study(&params, config.iters, config.workers).map_err(|e| match e {
                ConvergenceError::Params(e) => CliError::Config(e.to_string()),
                ConvergenceError::Engine(e) => numerical(e),
            })?;
            Ok(OdeCase { params, rows })
        })
        .collect()
}

pub fn run_ode_convergence(config: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let cases = compute_ode_convergence(config)?;
    let cfg_path = write_resolved_config(config)?;
    let path = config.out_dir.join("ode_convergence.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "alpha",
        "delta",
        "beta",
        "k",
        "e_meas",
        "bound_linear",
        "bound_superlinear",
        "bound_nontight",
        "bound_min",
    ])?;
    for case in &cases {
        let p = &case.params;
        for r in &case.rows {
            w.write_record([
                num(p.alpha),
                num(p.delta),
                num(p.beta),
                r.k.to_string(),
                num(r.e_meas),
                num(r.bound_linear),
                num(r.bound_superlinear),
                num(r.bound_nontight),
                num(r.bound_min()),
            ])?;
        }
    }
    w.flush()?;
    Ok(vec![path, cfg_path])
}

/// Monte Carlo and moment-model trajectories for one noise level, sampled at
/// every inner step including `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrace {
    pub sigma: f64,
    pub times: Vec<f64>,
    pub mc: Vec<[f64; 5]>,
    pub moment: Vec<[f64; 5]>,
}

impl MomentTrace {
    /// `sup_t max(|M_x^mc - M_x|, |M_y^mc - M_y|)`.
    pub fn sup_mean_error(&self) -> f64 {
        self.mc
            .iter()
            .zip(&self.moment)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

pub fn compute_sde_moments(config: &ExperimentConfig) -> Result<Vec<MomentTrace>, CliError> {
    let steps = whole_steps(config.t_final, config.inner_dt)?;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * config.inner_dt).collect();
    let pool = pool(config.workers)?;
    config
        .sigma
        .iter()
        .map(|&sigma| {
            let model = Roberts::new(config.alpha[0], sigma);
            let initial = model.initial_ensemble(config.particles, config.seed);
            let start = restrict(&initial);
            let table = BrownianTable::new(config.seed, steps, model.noise_dim(), config.inner_dt);
            let mut mc = vec![moments5(&start)];
            pool.install(|| {
                em_propagate_observed(&initial, &model, &table, 0, 0.0, |_, ens| {
                    mc.push(moments5(&restrict(ens)))
                })
            })
            .map_err(numerical)?;
            let moment = moment_trajectory(&start, &model, 0.0, steps, config.inner_dt)
                .map_err(numerical)?
                .iter()
                .map(moments5)
                .collect();
            Ok(MomentTrace {
                sigma,
                times: times.clone(),
                mc,
                moment,
            })
        })
        .collect()
}

pub fn run_sde_moments(config: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let traces = compute_sde_moments(config)?;
    let cfg_path = write_resolved_config(config)?;
    let path = config.out_dir.join("sde_moments.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["t", "sigma", "source"];
    header.extend(MOMENT_NAMES);
    w.write_record(&header)?;
    for tr in &traces {
        for (source, rows) in [("mc", &tr.mc), ("moment", &tr.moment)] {
            for (t, m) in tr.times.iter().zip(rows.iter()) {
                let mut rec = vec![num(*t), num(tr.sigma), source.to_string()];
                rec.extend(m.iter().map(|v| num(*v)));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(vec![path, cfg_path])
}

/// One coupling event of an SDE Parareal run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub rep: usize,
    pub slot: Slot,
    pub psd_repair: bool,
    pub resampled: Vec<usize>,
}

/// Averaged errors of the SDE Parareal experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PararealStudy {
    /// `rel_err[k][c]`: mean over repetitions of the relative sup-in-time
    /// error of moment `c` at iteration `k`.
    pub rel_err: Vec<[f64; 5]>,
    /// Per-repetition `rel_err`.
    pub per_rep: Vec<Vec<[f64; 5]>>,
    /// Moments of the first repetition's iterates, `[k][n]`.
    pub iterates: Vec<Vec<[f64; 5]>>,
    pub slab_length: f64,
    pub diagnostics: Vec<Diagnostic>,
}

/// Relative errors `[k][c]` of the restricted micro iterates against the
/// restricted fine reference.
pub fn relative_errors(iterates: &[Vec<[f64; 5]>], reference: &[[f64; 5]]) -> Vec<[f64; 5]> {
    let mut out = vec![[0.0; 5]; iterates.len()];
    for c in 0..5 {
        let it: Vec<Vec<f64>> = iterates.iter().map(|row| row.iter().map(|m| m[c]).collect()).collect();
        let rf: Vec<f64> = reference.iter().map(|m| m[c]).collect();
        let rel = ErrorTable::from_components(&it, &rf).relative_max();
        for (k, r) in rel.into_iter().enumerate() {
            out[k][c] = r;
        }
    }
    out
}

pub fn parareal_model(config: &ExperimentConfig, rep: usize) -> Result<McMoments<Roberts>, CliError> {
    McMoments::new(
        Roberts::new(config.alpha[0], config.sigma[0]),
        McMomentsConfig {
            particles: config.particles,
            t_final: config.t_final,
            slabs: config.n_slabs,
            inner_dt: config.inner_dt,
            seed: config.seed.wrapping_add(rep as u64),
            repair: RepairPolicy::Clip,
        },
    )
    .map_err(|e| CliError::Config(e.to_string()))
}

pub fn compute_sde_parareal(config: &ExperimentConfig) -> Result<PararealStudy, CliError> {
    let mut per_rep = Vec::with_capacity(config.reps);
    let mut iterates = Vec::new();
    let mut diagnostics = Vec::new();
    for rep in 0..config.reps {
        let model = parareal_model(config, rep)?;
        let grid = model.run(config.iters, config.workers).map_err(numerical)?;
        let its: Vec<Vec<[f64; 5]>> = grid
            .micro
            .iter()
            .map(|row| row.iter().map(|u| moments5(&restrict(u))).collect())
            .collect();
        let reference: Vec<[f64; 5]> = grid.reference.iter().map(|u| moments5(&restrict(u))).collect();
        per_rep.push(relative_errors(&its, &reference));
        diagnostics.extend(grid.events.iter().map(|e| Diagnostic {
            rep,
            slot: e.slot,
            psd_repair: e.report.repaired,
            resampled: e.report.resampled.clone(),
        }));
        if rep == 0 {
            iterates = its;
        }
    }
    let mut rel_err = vec![[0.0; 5]; config.iters + 1];
    for rep in &per_rep {
        for (acc, row) in rel_err.iter_mut().zip(rep) {
            for c in 0..5 {
                acc[c] += row[c];
            }
        }
    }
    for row in &mut rel_err {
        row.iter_mut().for_each(|v| *v /= config.reps as f64);
    }
    Ok(PararealStudy {
        rel_err,
        per_rep,
        iterates,
        slab_length: config.t_final / config.n_slabs as f64,
        diagnostics,
    })
}

pub fn run_sde_parareal(config: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let study = compute_sde_parareal(config)?;
    let cfg_path = write_resolved_config(config)?;

    let err_path = config.out_dir.join("sde_parareal_err.csv");
    let mut w = csv_writer(&err_path)?;
    w.write_record(["k", "component", "rel_err_inf_time"])?;
    for (k, row) in study.rel_err.iter().enumerate() {
        for (name, v) in MOMENT_NAMES.iter().zip(row) {
            w.write_record([k.to_string(), name.to_string(), num(*v)])?;
        }
    }
    w.flush()?;

    let it_path = config.out_dir.join("sde_parareal_iterates.csv");
    let mut w = csv_writer(&it_path)?;
    let mut header = vec!["k", "n", "t"];
    header.extend(MOMENT_NAMES);
    w.write_record(&header)?;
    for (k, row) in study.iterates.iter().enumerate() {
        for (n, m) in row.iter().enumerate() {
            let mut rec = vec![k.to_string(), n.to_string(), num(n as f64 * study.slab_length)];
            rec.extend(m.iter().map(|v| num(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let diag_path = config.out_dir.join("diagnostics.csv");
    let mut w = csv_writer(&diag_path)?;
    w.write_record(["rep", "k", "n", "psd_repair", "resampled"])?;
    for d in &study.diagnostics {
        let dims: Vec<String> = d.resampled.iter().map(usize::to_string).collect();
        w.write_record([
            d.rep.to_string(),
            d.slot.iteration.to_string(),
            d.slot.index.to_string(),
            u8::from(d.psd_repair).to_string(),
            dims.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(vec![err_path, it_path, diag_path, cfg_path])
}

/// Outcome of one selftest property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Test-only knobs for the selftest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mutation {
    /// Multiplies every bound before the domination check.
    pub bound_scale: f64,
}

impl Default for Mutation {
    fn default() -> Self {
        Self { bound_scale: 1.0 }
    }
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("worst {} (tolerance {})", num(worst), num(tol)),
    }
}

/// Fast invariant suite: finite termination, consistency, the error
/// recursion, bound domination, and matching consistency.
pub fn compute_selftest(config: &ExperimentConfig, mutation: Mutation) -> Result<Vec<Check>, CliError> {
    let ode = ExperimentConfig::defaults(Experiment::OdeConvergence);
    let run = RunConfig::new(10).with_workers(config.workers);
    let mut termination: f64 = 0.0;
    let mut consistency: f64 = 0.0;
    let mut oracle: f64 = 0.0;
    let mut domination: f64 = 0.0;
    for p in ode_params(&ode) {
        let m = MsOde::new(p).map_err(|e| CliError::Config(e.to_string()))?;
        let g = m.run(run).map_err(numerical)?;
        for (u, r) in g.micro[10].iter().zip(&g.reference) {
            termination = termination.max((u[0] - r[0]).abs()).max((u[1] - r[1]).abs());
        }
        for (us, rs) in g.micro.iter().zip(&g.macro_states) {
            for (u, r) in us.iter().zip(rs) {
                consistency = consistency.max((MsOde::restrict(*u) - r).abs());
            }
        }
        let measured = measured_errors(&g);
        let expected = error_recursion_oracle(&m.matrices, &measured[0], 10);
        for (a, b) in measured.iter().flatten().zip(expected.iter().flatten()) {
            oracle = oracle.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
        for r in convergence_study(&p, 10, config.workers).map_err(numerical)? {
            let s = mutation.bound_scale;
            let excess = (r.e_meas / (s * r.bound_min() * (1.0 + 1e-9)))
                .max(r.e_meas / (s * r.bound_nontight * (1.0 + 1e-9)));
            if r.e_meas > 0.0 {
                domination = domination.max(excess);
            }
        }
    }

    let (mean_err, cov_err, idem_err) = matching_trials(config.seed, 50, 200)?;

    let sde = McMoments::new(
        Roberts::new(1.0, 0.5),
        McMomentsConfig {
            particles: 200,
            t_final: 2.0,
            slabs: 4,
            inner_dt: 0.02,
            seed: config.seed,
            repair: RepairPolicy::Clip,
        },
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let g = sde.run(4, config.workers).map_err(numerical)?;
    let sde_terminates = g.micro[4] == g.reference;

    Ok(vec![
        check("ode_finite_termination", termination, 1e-12),
        check("ode_micro_macro_consistency", consistency, 0.0),
        check("ode_error_recursion", oracle, 1e-12),
        check("ode_bound_domination", domination, 1.0),
        check("matching_mean", mean_err, 1e-12),
        check("matching_covariance", cov_err, 1e-8),
        check("matching_idempotence", idem_err, 1e-10),
        Check {
            name: "sde_finite_termination",
            passed: sde_terminates,
            detail: format!("final iterate bitwise equal to reference: {sde_terminates}"),
        },
    ])
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

/// `L L^T` with the lower triangle of `L` uniform in `[-1.5, 1.5)`.
fn random_psd(r: &mut ChaCha8Rng, d: usize) -> SymMatrix {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            l[i * d + j] = uniform(r, -1.5, 1.5);
        }
    }
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = (0..d).map(|k| l[i * d + k] * l[j * d + k]).sum();
        }
    }
    SymMatrix::new(d, s).expect("square")
}

/// Random matching instances with `d` cycling through 1..=3. Returns the
/// worst mean error (relative to `max(1, |M|)`), covariance error (relative
/// Frobenius, against `max(1, |Sigma|)`) and idempotence error.
pub fn matching_trials(seed: u64, trials: usize, particles: usize) -> Result<(f64, f64, f64), CliError> {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..trials {
        let d = 1 + t % 3;
        let mut r = rng::stream(seed, StreamDomain::Initial, 1, t as u32);
        let model = LinearSde {
            drift_matrix: Matrix::zeros(d, d),
            drift_offset: vec![0.0; d],
            noise: Matrix::zeros(d, 1),
            initial_mean: (0..d).map(|_| uniform(&mut r, -3.0, 3.0)).collect(),
            initial_cov: random_psd(&mut r, d),
        };
        let ens = model.initial_ensemble(particles, seed.wrapping_add(t as u64));
        let target = MomentState::new((0..d).map(|_| uniform(&mut r, -3.0, 3.0)).collect(), random_psd(&mut r, d));
        let mut resample = rng::stream(seed, StreamDomain::Resample, 1, t as u32);
        let out = match_ensemble(&target, &ens, RepairPolicy::Strict, &mut resample).map_err(numerical)?;
        let got = restrict(&out.state);
        for (a, b) in got.mean.iter().zip(&target.mean) {
            worst.0 = worst.0.max((a - b).abs() / b.abs().max(1.0));
        }
        worst.1 = worst.1.max(got.cov.sub(&target.cov).frobenius_norm() / target.cov.frobenius_norm().max(1.0));

        let again = match_ensemble(&restrict(&ens), &ens, RepairPolicy::Strict, &mut resample).map_err(numerical)?;
        for (a, b) in again.state.states().iter().zip(ens.states()) {
            worst.2 = worst.2.max((a - b).abs());
        }
    }
    Ok(worst)
}

pub fn run_selftest(config: &ExperimentConfig, mutation: Mutation) -> Result<(Vec<Check>, PathBuf), CliError> {
    let checks = compute_selftest(config, mutation)?;
    write_resolved_config(config)?;
    let path = config.out_dir.join("selftest.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["property", "passed", "detail"])?;
    for c in &checks {
        w.write_record([c.name, if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
    }
    w.flush()?;
    Ok((checks, path))
}
