//! Acceptance criteria, one line each. Run with `cargo test --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmparareal::engine::{RunConfig, Slot};
use mmparareal::mcmoments::{
    moment_propagate, restrict, LinearSde, McMoments, McMomentsConfig, MomentState, RepairPolicy,
    Roberts, SdeModel,
};
use mmparareal::msode::{
    convergence_study, error_recursion_oracle, measured_errors, MsOde, MsOdeParams,
};
use mmparareal::smallmat::{expm_2x2_upper, nearest_psd, SymMatrix};
use mmparareal_cli::config::{Experiment, ExperimentConfig};
use mmparareal_cli::experiments::{
    compute_sde_moments, compute_sde_parareal, matching_trials, ode_params,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn ode_cases() -> Vec<MsOdeParams> {
    ode_params(&ExperimentConfig::defaults(Experiment::OdeConvergence))
}

fn finite_termination_ode() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in ode_cases() {
        let g = MsOde::new(p).unwrap().run(RunConfig::new(10)).unwrap();
        for (u, r) in g.micro[10].iter().zip(&g.reference) {
            worst = worst.max((u[0] - r[0]).abs()).max((u[1] - r[1]).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max |U^N_n - ref_n| = {worst:e}, tol 1e-12"))
}

fn micro_macro_consistency() -> Outcome {
    let mut ode_exact = true;
    for p in ode_cases() {
        let g = MsOde::new(p).unwrap().run(RunConfig::new(10)).unwrap();
        for (us, rs) in g.micro.iter().zip(&g.macro_states) {
            ode_exact &= us.iter().zip(rs).all(|(u, r)| MsOde::restrict(*u) == *r);
        }
    }

    let model = McMoments::new(
        Roberts::new(1.0, 0.5),
        McMomentsConfig {
            particles: 1000,
            t_final: 10.0,
            slabs: 10,
            inner_dt: 0.02,
            seed: 1,
            repair: RepairPolicy::Clip,
        },
    )
    .unwrap();
    let g = model.run(10, 1).unwrap();
    let repaired: Vec<Slot> = g.events.iter().filter(|e| e.report.repaired).map(|e| e.slot).collect();
    let (mut cov_err, mut mean_err): (f64, f64) = (0.0, 0.0);
    for (k, (us, rs)) in g.micro.iter().zip(&g.macro_states).enumerate() {
        for (n, (u, rho)) in us.iter().zip(rs).enumerate() {
            // a repaired slot is matched to the clipped macro state
            let target = if repaired.contains(&Slot::new(k, n)) {
                MomentState::new(rho.mean.clone(), nearest_psd(&rho.cov, 0.0))
            } else {
                rho.clone()
            };
            let got = restrict(u);
            cov_err = cov_err.max(got.cov.sub(&target.cov).frobenius_norm() / target.cov.frobenius_norm().max(1.0));
            for (a, b) in got.mean.iter().zip(&target.mean) {
                mean_err = mean_err.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    outcome(
        ode_exact && cov_err <= 1e-8 && mean_err <= 1e-12,
        format!(
            "ODE bitwise: {ode_exact}; SDE cov rel err {cov_err:e} (tol 1e-8), mean {mean_err:e} (tol 1e-12), {} repaired slots",
            repaired.len()
        ),
    )
}

fn error_recursion_oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in ode_cases() {
        let m = MsOde::new(p).unwrap();
        let g = m.run(RunConfig::new(10)).unwrap();
        let measured = measured_errors(&g);
        let oracle = error_recursion_oracle(&m.matrices, &measured[0], 10);
        for (a, b) in measured.iter().flatten().zip(oracle.iter().flatten()) {
            worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max componentwise difference {worst:e}, tol 1e-12"))
}

fn bound_domination() -> Outcome {
    let mut worst_min: f64 = 0.0;
    let mut worst_nontight: f64 = 0.0;
    for p in ode_cases() {
        for r in convergence_study(&p, 10, 1).unwrap() {
            if r.e_meas > 0.0 {
                worst_min = worst_min.max(r.e_meas / (r.bound_min() * (1.0 + 1e-9)));
                worst_nontight = worst_nontight.max(r.e_meas / (r.bound_nontight * (1.0 + 1e-9)));
            }
        }
    }
    outcome(
        worst_min <= 1.0 && worst_nontight <= 1.0,
        format!("max e/min(lin,sup)(1+1e-9) = {worst_min:.12}, max e/nontight(1+1e-9) = {worst_nontight:.12}"),
    )
}

fn rk4(alpha: f64, beta: f64, delta: f64, u0: [f64; 2], h: f64, record_every: usize, records: usize) -> Vec<[f64; 2]> {
    let f = |u: [f64; 2]| [alpha * u[0] + beta * u[1], delta * u[1]];
    let mut u = u0;
    let mut out = Vec::with_capacity(records);
    for step in 1..=record_every * records {
        let k1 = f(u);
        let k2 = f([u[0] + 0.5 * h * k1[0], u[1] + 0.5 * h * k1[1]]);
        let k3 = f([u[0] + 0.5 * h * k2[0], u[1] + 0.5 * h * k2[1]]);
        let k4 = f([u[0] + h * k3[0], u[1] + h * k3[1]]);
        for i in 0..2 {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if step % record_every == 0 {
            out.push(u);
        }
    }
    out
}

fn exact_solution_vs_rk4() -> Outcome {
    let cases = [(-1.0, 1.0, -5.0), (-1.0, 2.0, -5.0), (-1.0, 1.0, -1.0), (-1.0, 2.0, -1.0), (-0.5, 1e-2, -3.0)];
    let mut worst: f64 = 0.0;
    for (alpha, beta, delta) in cases {
        // every 0.5 time units on [0, 10]
        let traj = rk4(alpha, beta, delta, [1.0, 1.0], 1e-4, 5000, 20);
        for (i, oracle) in traj.iter().enumerate() {
            let t = 0.5 * (i + 1) as f64;
            let u = expm_2x2_upper(alpha, beta, delta, t).apply([1.0, 1.0]);
            for c in 0..2 {
                worst = worst.max((u[c] - oracle[c]).abs() / oracle[c].abs());
            }
        }
    }
    outcome(worst <= 1e-8, format!("max relative error {worst:e} over both rate branches, tol 1e-8"))
}

fn matching_consistency() -> Outcome {
    let (mean, cov, idem) = matching_trials(2024, 200, 1000).unwrap();
    outcome(
        mean <= 1e-12 && cov <= 1e-8 && idem <= 1e-10,
        format!("200 instances: mean {mean:e} (1e-12), cov {cov:e} (1e-8), idempotence {idem:e} (1e-10)"),
    )
}

fn affine_moment_closure() -> Outcome {
    let (rate, sigma, m0, v0) = (1.0, 0.5, 1.0, 0.1);
    let model = LinearSde::ornstein_uhlenbeck(rate, sigma, m0, v0);
    let start = MomentState::new(vec![m0], SymMatrix::from_rows(&[[v0]]));
    let end = moment_propagate(&start, &model, 0.0, 1000, 1e-3).unwrap();
    let mean = m0 * (-rate).exp();
    let stationary = sigma * sigma / (2.0 * rate);
    let var = stationary + (v0 - stationary) * (-2.0 * rate).exp();
    let em = (end.mean[0] - mean).abs() / mean;
    let ev = (end.cov.get(0, 0) - var).abs() / var;
    assert_eq!(model.dim(), 1);
    outcome(em <= 1e-3 && ev <= 1e-3, format!("relative mean error {em:e}, variance error {ev:e}, tol 1e-3"))
}

fn sigma_trend() -> Outcome {
    let config = ExperimentConfig {
        particles: 10_000,
        ..ExperimentConfig::defaults(Experiment::SdeMoments)
    };
    let errs: Vec<f64> = compute_sde_moments(&config)
        .unwrap()
        .iter()
        .map(|t| t.sup_mean_error())
        .collect();
    // at 1e4 particles each error may exceed its successor by up to 2x
    let monotone = errs.windows(2).all(|w| w[0] <= 2.0 * w[1]);
    let strict = errs.windows(2).all(|w| w[0] < w[1]);
    outcome(
        monotone,
        format!("sup-time mean errors for sigma 0.1, 0.5, 1.0: {errs:?}; strictly increasing: {strict}"),
    )
}

fn sde_parareal_convergence() -> Outcome {
    let config = ExperimentConfig {
        particles: 10_000,
        reps: 5,
        ..ExperimentConfig::defaults(Experiment::SdeParareal)
    };
    let study = compute_sde_parareal(&config).unwrap();
    let final_err = study
        .per_rep
        .iter()
        .map(|rep| rep[10].iter().copied().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let ratio_x = study.rel_err[5][0] / study.rel_err[0][0];
    let ratio_y = study.rel_err[5][1] / study.rel_err[0][1];
    outcome(
        final_err <= 1e-12 && ratio_x < 0.5 && ratio_y < 0.5,
        format!(
            "k=10 max rel err {final_err:e} (1e-12); k=5/k=0 mean-error ratios M_x {ratio_x:.4}, M_y {ratio_y:.4} (< 0.5)"
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let runs: [(&str, &[&str]); 4] = [
        ("selftest", &[]),
        ("ode-convergence", &[]),
        ("sde-moments", &["--particles", "2000", "--t-final", "2"]),
        ("sde-parareal", &["--particles", "2000", "--t-final", "2", "--reps", "2", "--seed", "9"]),
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (cmd, extra) in runs {
        let mut outputs = Vec::new();
        for workers in ["1", "4"] {
            let dir = tempfile::tempdir().unwrap();
            let status = Command::new(env!("CARGO_BIN_EXE_mmparareal"))
                .arg(cmd)
                .args(extra)
                .args(["--workers", workers, "--out-dir"])
                .arg(dir.path())
                .output()
                .unwrap();
            assert!(status.status.success(), "{cmd}: {}", String::from_utf8_lossy(&status.stderr));
            outputs.push(csv_files(dir.path()));
        }
        compared += outputs[0].len();
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            mismatched.push(cmd);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{compared} CSVs compared across workers 1 and 4; mismatched: {mismatched:?}"),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("finite termination (ODE)", Duration::from_secs(1), finite_termination_ode),
        ("micro-macro consistency", Duration::from_secs(60), micro_macro_consistency),
        ("error recursion oracle", Duration::from_secs(1), error_recursion_oracle_equivalence),
        ("bound domination", Duration::from_secs(5), bound_domination),
        ("exact solution vs RK4", Duration::from_secs(5), exact_solution_vs_rk4),
        ("matching consistency", Duration::from_secs(10), matching_consistency),
        ("moment closure exact for OU", Duration::from_secs(1), affine_moment_closure),
        ("moment model sigma trend", Duration::from_secs(15), sigma_trend),
        ("SDE Parareal convergence", Duration::from_secs(180), sde_parareal_convergence),
        ("determinism across workers", Duration::from_secs(120), determinism),
    ];
    let mut failures = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let ok = o.passed && elapsed <= limit;
        failures += usize::from(!ok);
        println!(
            "{} {name}: {} [{:.2}s, limit {}s]",
            if ok { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
