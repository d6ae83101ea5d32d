use barycentre::constraints::{ConstraintSet, TerminalConstraint};
use barycentre::drift_learner::{train_drift, DriftLearnerConfig};
use barycentre::experiments::{constraint_means, Experiment, ExperimentConfig};
use barycentre::lagrange::{solve_eta, weighted_constraint_means, EtaSolution};
use barycentre::mlp::{Activation, FeedforwardNet, Head};
use barycentre::sde::{build_time_grid, simulate_paths, DriftField, ExpertEnsemble, VolatilityField};
use barycentre::value_learner::elicitability_loss;
use std::path::Path;

fn single(drift: DriftField, sigma: f64) -> ExpertEnsemble {
    ExpertEnsemble::new(vec![drift], VolatilityField::scalar(sigma).unwrap(), vec![1.0], vec![0.0]).unwrap()
}

fn terminal(label: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ConstraintSet {
    ConstraintSet::new(vec![], vec![TerminalConstraint::new(label, f)])
}

#[test]
fn driftless_terminal_increment_has_zero_mean() {
    let e = single(DriftField::constant(vec![0.0], "zero"), 0.7);
    let grid = build_time_grid(1.0, 50).unwrap();
    let batch = simulate_paths(e.average_drift(), e.vol(), &grid, 20_000, &[0.0], 3).unwrap();
    let cs = terminal("x", |x| x[0]);
    let m = &constraint_means(&cs, &batch).unwrap()[0];
    assert!(m.within(0.0, 3.0), "{m:?}");
    // Var X_T = σ² T.
    let var: f64 = batch.terminal_states().column(0).iter().map(|x| x * x).sum::<f64>() / 20_000.0;
    assert!((var - 0.49).abs() < 0.03, "{var}");
}

#[test]
fn constant_drift_moves_the_mean() {
    let e = single(DriftField::constant(vec![0.4], "c"), 1.0);
    let grid = build_time_grid(2.0, 40).unwrap();
    let batch = simulate_paths(e.average_drift(), e.vol(), &grid, 20_000, &[0.0], 4).unwrap();
    let m = &constraint_means(&terminal("x", |x| x[0]), &batch).unwrap()[0];
    assert!(m.within(0.8, 3.0), "{m:?}");
}

#[test]
fn multipliers_hold_on_a_fresh_batch() {
    let exp = Experiment::build(ExperimentConfig::builtin("gaussian-tilt-oracle").unwrap(), Path::new(".")).unwrap();
    let grid = build_time_grid(1.0, 50).unwrap();
    let mu = exp.ensemble.average_drift();
    let fit = simulate_paths(mu, exp.ensemble.vol(), &grid, 20_000, exp.ensemble.x0(), 10).unwrap();
    let eta = solve_eta(&exp.ensemble, &exp.constraints, &fit, 1e-8, 50).unwrap();
    assert!(eta.converged);
    let fresh = simulate_paths(mu, exp.ensemble.vol(), &grid, 20_000, exp.ensemble.x0(), 11).unwrap();
    for m in weighted_constraint_means(&exp.ensemble, &exp.constraints, &eta, &fresh).unwrap() {
        assert!(m.within(0.0, 3.0), "{m:?}");
    }
}

#[test]
fn drift_learner_recovers_a_single_unconstrained_expert() {
    let e = single(DriftField::scalar("ou", |t, x| 0.5 - x + t), 1.0);
    let cs = ConstraintSet::empty();
    let cfg = DriftLearnerConfig {
        num_paths: 128,
        steps: 20,
        iterations: 300,
        lr: 3e-3,
        seed: 5,
        ..Default::default()
    };
    let net = FeedforwardNet::new(&[2, 16, 1], Activation::Silu, Head::Identity, 1).unwrap();
    let trained = train_drift(&e, &cs, &EtaSolution::empty(), net, &cfg).unwrap();
    let tail = trained.losses[trained.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 1e-3, "tail loss {tail}");
    let mut worst = 0.0f64;
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        for j in 0..=10 {
            let x = -1.0 + j as f64 * 0.2;
            worst = worst.max((trained.drift.eval(t, &[x]).unwrap()[0] - (0.5 - x + t)).abs());
        }
    }
    assert!(worst < 0.05, "sup error {worst}");
}

#[test]
fn exact_value_function_minimises_the_regression_loss() {
    let e = single(DriftField::constant(vec![0.0], "zero"), 1.0);
    let cs = terminal("x-0.5", |x| x[0] - 0.5);
    let eta = EtaSolution::prescribed(vec![], vec![-0.5]);
    let grid = build_time_grid(1.0, 50).unwrap();
    let batch = simulate_paths(e.average_drift(), e.vol(), &grid, 20_000, &[0.0], 9).unwrap();
    let exact = |t: f64, x: &[f64]| (0.5 * x[0] - 0.25 + 0.125 * (1.0 - t)).exp();
    let best = elicitability_loss(exact, &e, &cs, &eta, &batch).unwrap();
    for k in 0..20 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let a = sign * (0.05 + 0.01 * k as f64);
        let b = 0.02 * ((k * 7 % 20) as f64 - 9.5);
        let perturbed = |t: f64, x: &[f64]| exact(t, x) * (1.0 + a) * (b * x[0]).exp();
        let loss = elicitability_loss(perturbed, &e, &cs, &eta, &batch).unwrap();
        assert!(loss > best, "perturbation {k}: {loss} <= {best}");
    }
}
