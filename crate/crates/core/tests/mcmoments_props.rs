use mmparareal::engine::{self, Coupling, Slot};
use mmparareal::mcmoments::{
    em_propagate, match_ensemble, moment_propagate, restrict, BrownianTable, Ensemble, LinearSde,
    McMoments, McMomentsConfig, MomentState, RepairPolicy, Roberts, SdeModel,
};
use mmparareal::rng::{self, StreamDomain};
use mmparareal::smallmat::{Matrix, SymMatrix};
use proptest::prelude::*;

fn close_moments(a: &MomentState, b: &MomentState, rel: f64) -> bool {
    let scale = 1.0 + b.cov.frobenius_norm() + b.mean.iter().map(|m| m.abs()).sum::<f64>();
    let mean_ok = a.mean.iter().zip(&b.mean).all(|(x, y)| (x - y).abs() <= rel * scale);
    mean_ok && a.cov.sub(&b.cov).frobenius_norm() <= rel * scale
}

fn gaussian_model(mean: Vec<f64>, cov: SymMatrix) -> LinearSde {
    let d = mean.len();
    LinearSde {
        drift_matrix: Matrix::zeros(d, d),
        drift_offset: vec![0.0; d],
        noise: Matrix::zeros(d, 1),
        initial_mean: mean,
        initial_cov: cov,
    }
}

fn psd2() -> impl Strategy<Value = SymMatrix> {
    (0.05f64..3.0, -1.0f64..1.0, 0.05f64..3.0).prop_map(|(a, c, b)| {
        // L = [[a, 0], [c, b]]
        SymMatrix::from_rows(&[[a * a, a * c], [a * c, c * c + b * b]])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_hits_the_target_moments(
        cov in psd2(),
        mean in prop::collection::vec(-5.0f64..5.0, 2),
        seed in 0u64..1000,
        particles in 3usize..200,
    ) {
        let ens = gaussian_model(vec![0.3, -0.7], SymMatrix::from_rows(&[[1.0, 0.2], [0.2, 0.5]]))
            .initial_ensemble(particles, seed);
        let target = MomentState::new(mean, cov);
        let mut r = rng::stream(seed, StreamDomain::Resample, 1, 1);
        let out = match_ensemble(&target, &ens, RepairPolicy::Strict, &mut r).unwrap();
        prop_assert!(out.report.is_clean());
        prop_assert!(close_moments(&restrict(&out.state), &target, 1e-10));
    }

    #[test]
    fn matching_is_idempotent_on_consistent_pairs(seed in 0u64..1000, particles in 2usize..100) {
        let ens = gaussian_model(vec![1.0, 2.0], SymMatrix::identity(2)).initial_ensemble(particles, seed);
        let mut r = rng::stream(seed, StreamDomain::Resample, 0, 0);
        let out = match_ensemble(&restrict(&ens), &ens, RepairPolicy::Strict, &mut r).unwrap();
        prop_assert_eq!(out.state, ens);
    }

    #[test]
    fn degenerate_ensembles_are_resampled(mean in prop::collection::vec(-2.0f64..2.0, 2), cov in psd2()) {
        let ens = Roberts::new(1.0, 0.5).initial_ensemble(500, 0);
        let target = MomentState::new(mean, cov);
        let mut r = rng::stream(4, StreamDomain::Resample, 0, 3);
        let out = match_ensemble(&target, &ens, RepairPolicy::Clip, &mut r).unwrap();
        prop_assert_eq!(out.report.resampled, vec![0, 1]);
        prop_assert!(close_moments(&restrict(&out.state), &target, 1e-9));
    }
}

#[test]
fn ou_ensemble_tracks_the_moment_closure() {
    let model = LinearSde::ornstein_uhlenbeck(1.0, 0.5, 1.0, 0.1);
    let ens = model.initial_ensemble(20_000, 2);
    let table = BrownianTable::new(2, 100, 1, 0.01);
    let mc = restrict(&em_propagate(&ens, &model, &table, 0, 0.0).unwrap());
    let moments = moment_propagate(&restrict(&ens), &model, 0.0, 100, 0.01).unwrap();
    // E[X(1)] = e^-1, Var -> 0.125 + (0.1 - 0.125) e^-2
    assert!((mc.mean[0] - moments.mean[0]).abs() < 0.02, "{mc:?} {moments:?}");
    assert!((mc.cov.get(0, 0) - moments.cov.get(0, 0)).abs() < 0.01, "{mc:?} {moments:?}");
    assert!((moments.mean[0] - (-1f64).exp()).abs() < 0.01);
    let var = 0.125 - 0.025 * (-2f64).exp();
    assert!((moments.cov.get(0, 0) - var).abs() < 0.005);
}

#[test]
fn em_is_exact_for_drift_free_additive_noise() {
    // dX = s dW: the ensemble moves by exactly s times the summed increments.
    let model = LinearSde {
        drift_matrix: Matrix::zeros(1, 1),
        drift_offset: vec![0.0],
        noise: Matrix::from_rows(&[[0.7]]),
        initial_mean: vec![0.0],
        initial_cov: SymMatrix::zeros(1),
    };
    let ens = Ensemble::new(1, vec![0.0, 1.0, 2.0]).unwrap();
    let table = BrownianTable::new(3, 10, 1, 0.1);
    let out = em_propagate(&ens, &model, &table, 2, 0.0).unwrap();
    let inc = table.materialize(2, 3);
    for p in 0..3 {
        let total: f64 = (0..10).map(|s| 0.7 * inc[s * 3 + p]).sum();
        assert!((out.particle(p)[0] - (p as f64 + total)).abs() < 1e-12);
    }
}

fn small_run(seed: u64) -> McMoments<Roberts> {
    McMoments::new(
        Roberts::new(1.0, 0.5),
        McMomentsConfig {
            particles: 300,
            t_final: 2.0,
            slabs: 5,
            inner_dt: 0.02,
            seed,
            repair: RepairPolicy::Clip,
        },
    )
    .unwrap()
}

#[test]
fn parareal_terminates_after_n_iterations() {
    let pr = small_run(7);
    let g = pr.run(5, 2).unwrap();
    for n in 0..=5 {
        assert_eq!(g.micro[5][n], g.reference[n], "n={n}");
        assert_eq!(g.macro_states[5][n], restrict(&g.reference[n]));
    }
    for k in 0..=5 {
        for n in 0..=k {
            assert_eq!(g.micro[k][n], g.reference[n]);
        }
    }
    assert_eq!(g.fine_calls, 5 * 5 + 5);
}

#[test]
fn parareal_is_independent_of_worker_count() {
    let pr = small_run(11);
    let a = pr.run(3, 1).unwrap();
    let b = pr.run(3, 4).unwrap();
    assert_eq!(a.micro, b.micro);
    assert_eq!(a.macro_states, b.macro_states);
}

#[test]
fn seeds_change_the_paths() {
    let a = small_run(1).run(1, 1).unwrap();
    let b = small_run(2).run(1, 1).unwrap();
    assert_ne!(a.reference[5], b.reference[5]);
}

#[test]
fn lifting_reaches_the_target() {
    let pr = small_run(3);
    let target = MomentState::new(vec![0.8, 1.4], SymMatrix::from_rows(&[[0.02, 0.01], [0.01, 0.3]]));
    let lifted = Coupling::lift(&pr, &target, Slot::new(0, 2)).unwrap();
    assert_eq!(lifted.report.resampled, vec![0, 1]);
    assert!(close_moments(&restrict(&lifted.state), &target, 1e-9));
}

#[test]
fn iterate_errors_shrink_before_termination() {
    let g = small_run(5).run(5, 2).unwrap();
    let table = engine::error_table(&g, |u| restrict(u).mean[1]);
    assert_eq!(table.max[5], 0.0);
    assert!(table.max[2] < table.max[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn clipped_targets_are_matched(raw in prop::collection::vec(-3.0f64..3.0, 9), seed in 0u64..100) {
        use mmparareal::smallmat::nearest_psd;
        let cov = SymMatrix::new(3, raw).unwrap();
        let ens = gaussian_model(vec![0.0; 3], SymMatrix::identity(3)).initial_ensemble(50, seed);
        let target = MomentState::new(vec![1.0, -1.0, 0.5], cov.clone());
        let mut r = rng::stream(seed, StreamDomain::Resample, 2, 2);
        let out = match_ensemble(&target, &ens, RepairPolicy::Clip, &mut r).unwrap();
        prop_assert_eq!(out.report.repaired, !target.is_psd());
        let want = MomentState::new(target.mean.clone(), nearest_psd(&cov, 0.0));
        let got = restrict(&out.state);
        for i in 0..3 {
            prop_assert!((got.mean[i] - want.mean[i]).abs() <= 1e-12);
        }
        let err = got.cov.sub(&want.cov).frobenius_norm() / want.cov.frobenius_norm().max(1.0);
        prop_assert!(err <= 1e-8, "err {err:e}");
    }
}
