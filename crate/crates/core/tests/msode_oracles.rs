use mmparareal::engine::{self, RunConfig};
use mmparareal::msode::{
    convergence_study, error_recursion_oracle, fast_error_bound, measured_errors, BoundInputs,
    MsOde, MsOdeParams,
};
use mmparareal::smallmat::expm_2x2_upper;

const PAIRS: [(f64, f64); 2] = [(-1.0, -1.0), (-1.0, -5.0)];
const BETAS: [f64; 6] = [0.0, 1e-4, 1e-2, 1e-1, 1.0, 2.0];

fn reference_cases() -> impl Iterator<Item = MsOdeParams> {
    PAIRS
        .iter()
        .flat_map(|&(a, d)| BETAS.iter().map(move |&b| MsOdeParams::reference_case(a, d, b)))
}

/// Classical RK4 on the two-scale system with a fixed step.
fn rk4(alpha: f64, beta: f64, delta: f64, u0: [f64; 2], t_end: f64, h: f64) -> [f64; 2] {
    let f = |u: [f64; 2]| [alpha * u[0] + beta * u[1], delta * u[1]];
    let steps = (t_end / h).round() as usize;
    let mut u = u0;
    for _ in 0..steps {
        let k1 = f(u);
        let k2 = f([u[0] + 0.5 * h * k1[0], u[1] + 0.5 * h * k1[1]]);
        let k3 = f([u[0] + 0.5 * h * k2[0], u[1] + 0.5 * h * k2[1]]);
        let k4 = f([u[0] + h * k3[0], u[1] + h * k3[1]]);
        for i in 0..2 {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    u
}

#[test]
fn coupling_entry_matches_rk4() {
    // x(0) = 0, y(0) = 1 isolates the coupling entry.
    let b = expm_2x2_upper(-1.0, 1.0, -5.0, 1.0).coupling;
    let oracle = rk4(-1.0, 1.0, -5.0, [0.0, 1.0], 1.0, 1e-4)[0];
    assert!((b - oracle).abs() < 1e-12, "{b} vs {oracle}");
    assert!((b - 0.090_285).abs() < 1e-6);

    let b = expm_2x2_upper(-1.0, 1.0, -1.0, 1.0).coupling;
    let oracle = rk4(-1.0, 1.0, -1.0, [0.0, 1.0], 1.0, 1e-4)[0];
    assert!((b - oracle).abs() < 1e-12);
    assert!((b - 0.367_879).abs() < 1e-6);
}

#[test]
fn fine_prop_matches_rk4_for_unit_fast_state() {
    let m = MsOde::new(MsOdeParams {
        alpha_bar: -2.0,
        ..MsOdeParams::reference_case(-1.0, -5.0, 1.0)
    })
    .unwrap();
    let u = m.fine_prop([0.0, 1.0]);
    let oracle = rk4(-1.0, 1.0, -5.0, [0.0, 1.0], 1.0, 1e-4);
    assert!((u[0] - oracle[0]).abs() < 1e-12);
    assert!((u[1] - (-5f64).exp()).abs() < 1e-15);
}

/// Closed-form solution of the two-scale system at time `t`.
fn closed_form(p: &MsOdeParams, t: f64) -> [f64; 2] {
    let (a, b, d) = (p.alpha, p.beta, p.delta);
    let x = if a == d {
        (a * t).exp() * p.x0 + b * t * (a * t).exp() * p.y0
    } else {
        (a * t).exp() * p.x0 + b / (d - a) * ((d * t).exp() - (a * t).exp()) * p.y0
    };
    [x, (d * t).exp() * p.y0]
}

#[test]
fn iterated_fine_prop_matches_closed_form_and_rk4() {
    for p in reference_cases().filter(|p| p.beta != 0.0) {
        let m = MsOde::new(p).unwrap();
        let mut u = p.initial_state();
        for n in 1..=10 {
            u = m.fine_prop(u);
            let exact = closed_form(&p, n as f64);
            let rk = rk4(p.alpha, p.beta, p.delta, p.initial_state(), n as f64, 1e-4);
            for i in 0..2 {
                assert!((u[i] - exact[i]).abs() <= 1e-12 * exact[i].abs(), "{p:?} n={n}");
                assert!((u[i] - rk[i]).abs() <= 1e-8 * rk[i].abs(), "{p:?} n={n}");
            }
        }
    }
}

#[test]
fn finite_termination_and_consistency() {
    for p in reference_cases() {
        let m = MsOde::new(p).unwrap();
        let g = m.run(RunConfig::new(10)).unwrap();
        for k in 0..=10 {
            for n in 0..=10 {
                assert_eq!(g.macro_states[k][n], MsOde::restrict(g.micro[k][n]));
                if k >= n {
                    assert_eq!(g.micro[k][n], g.reference[n], "{p:?} k={k} n={n}");
                }
            }
        }
    }
}

#[test]
fn lifting_variant_terminates() {
    for p in reference_cases() {
        let g = MsOde::new(p).unwrap().run_lifting(RunConfig::new(10)).unwrap();
        for n in 0..=10 {
            for i in 0..2 {
                assert!((g.micro[10][n][i] - g.reference[n][i]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn engine_errors_follow_the_error_recursion() {
    for p in reference_cases() {
        let m = MsOde::new(p).unwrap();
        let g = m.run(RunConfig::new(10)).unwrap();
        let measured = measured_errors(&g);
        let oracle = error_recursion_oracle(&m.matrices, &measured[0], 10);
        for k in 0..=10 {
            for n in 0..=10 {
                for i in 0..2 {
                    let diff = (measured[k][n][i] - oracle[k][n][i]).abs();
                    assert!(diff <= 1e-12, "{p:?} k={k} n={n} diff={diff:e}");
                }
            }
        }
    }
}

#[test]
fn fast_error_equals_its_bound() {
    for p in reference_cases() {
        let g = MsOde::new(p).unwrap().run(RunConfig::new(10)).unwrap();
        let fast = engine::error_table(&g, |u| u[1]);
        let inputs = BoundInputs::from_run(&p, &g);
        for k in 0..=10 {
            let bound = fast_error_bound(&p, inputs.e_y0_max, k);
            if k < p.slabs {
                assert!((fast.max[k] - bound).abs() <= 1e-12, "{p:?} k={k}");
            } else {
                // the last time index is already exact: nothing left to bound
                assert_eq!(fast.max[k], 0.0);
                assert!(bound >= 0.0);
            }
        }
    }
}

#[test]
fn bounds_dominate_measured_errors() {
    for p in reference_cases() {
        let rows = convergence_study(&p, 10, 1).unwrap();
        for r in rows {
            assert!(r.e_meas <= r.bound_linear * (1.0 + 1e-9), "{p:?} {r:?}");
            assert!(r.e_meas <= r.bound_superlinear * (1.0 + 1e-9), "{p:?} {r:?}");
            assert!(r.e_meas <= r.bound_nontight * (1.0 + 1e-9), "{p:?} {r:?}");
        }
    }
}

#[test]
fn error_decays_with_iterations() {
    for p in reference_cases() {
        let rows = convergence_study(&p, 10, 1).unwrap();
        assert!(rows[10].e_meas <= 1e-12);
        assert!(rows[3].e_meas < rows[0].e_meas, "{p:?}");
    }
}
