//! Monte Carlo behavior of the selectors: cross-validation should sit near
//! the null under pure noise, beat the null decisively under a step truth,
//! and the discrete super learner should pick the rung whose complexity
//! matches the truth.

use hal_core::basis::{BasisSpec, KnotStrategy};
use hal_core::data::make_folds;
use hal_core::selection::{cv_select_lambda, discrete_super_learner, HalSpecLadder};
use hal_core::sim::rng_for;
use hal_core::solver::{LossFamily, PathOptions, SolverOptions};
use rand::Rng;
use rand_distr::StandardNormal;

fn uniform_columns(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..d).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect()
}

#[test]
fn cv_on_pure_noise_selects_null_adjacent_lambda() {
    let reps = 50;
    let grid_size = 15;
    let mut null_adjacent = 0;
    for r in 0..reps {
        let mut rng = rng_for(4001, r);
        let n = 150;
        let xs = uniform_columns(n, 2, &mut rng);
        // Outcome independent of the covariates.
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let design: Vec<&[f64]> = xs.iter().map(|c| c.as_slice()).collect();
        let folds = make_folds(n, 5, 1000 + r).unwrap();
        let (report, _, _) = cv_select_lambda(
            &design,
            &y,
            &BasisSpec::zero_order(2, KnotStrategy::Quantiles(4)),
            LossFamily::Gaussian,
            &folds,
            &PathOptions {
                grid_size,
                ..PathOptions::default()
            },
            &SolverOptions::default(),
        )
        .unwrap();
        // Null-adjacent: within the first third of the descending grid,
        // i.e. a heavily penalized, nearly empty model.
        if report.selected < grid_size / 3 {
            null_adjacent += 1;
        }
    }
    eprintln!("null-adjacent {null_adjacent}/{reps}");
    assert!(
        null_adjacent * 100 >= reps * 90,
        "null-adjacent in only {null_adjacent}/{reps} replicates"
    );
}

#[test]
fn cv_on_step_truth_beats_null_training_mse_by_half() {
    for seed in 0..5 {
        let mut rng = rng_for(4100, seed);
        let n = 200;
        let xs = uniform_columns(n, 2, &mut rng);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let step = if xs[0][i] >= 0.5 { 1.0 } else { 0.0 };
                step + 0.3 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let design: Vec<&[f64]> = xs.iter().map(|c| c.as_slice()).collect();
        let folds = make_folds(n, 5, 77 + seed).unwrap();
        let (_, fit, path) = cv_select_lambda(
            &design,
            &y,
            &BasisSpec::zero_order(2, KnotStrategy::Quantiles(6)),
            LossFamily::Gaussian,
            &folds,
            &PathOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        let null_risk = path.fits[0].train_risk;
        assert!(
            fit.train_risk <= 0.5 * null_risk,
            "seed {seed}: training MSE {} vs null {null_risk}",
            fit.train_risk
        );
    }
}

fn dsl_pick(truth_interacts: bool, r: u64) -> usize {
    let mut rng = rng_for(if truth_interacts { 4300 } else { 4200 }, r);
    let n = 500;
    let xs = uniform_columns(n, 2, &mut rng);
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let q0 = if truth_interacts {
                if xs[0][i] >= 0.5 && xs[1][i] >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                let a = if xs[0][i] >= 0.35 { 0.9 } else { 0.0 };
                let b = if xs[1][i] >= 0.65 { -0.7 } else { 0.0 };
                a + b
            };
            q0 + 0.35 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let design: Vec<&[f64]> = xs.iter().map(|c| c.as_slice()).collect();
    let folds = make_folds(n, 5, 500 + r).unwrap();
    let ladder = HalSpecLadder::new(vec![
        BasisSpec::zero_order(1, KnotStrategy::Quantiles(8)),
        BasisSpec::zero_order(2, KnotStrategy::Quantiles(8)),
    ])
    .unwrap();
    let (report, _) = discrete_super_learner(
        &design,
        &y,
        &ladder,
        LossFamily::Gaussian,
        &folds,
        &PathOptions {
            grid_size: 15,
            ..PathOptions::default()
        },
        &SolverOptions::default(),
    )
    .unwrap();
    report.selected
}

#[test]
fn super_learner_prefers_additive_rung_for_additive_truth() {
    let reps: usize = 50;
    let wins = (0..reps as u64).filter(|&r| dsl_pick(false, r) == 0).count();
    eprintln!("additive wins {wins}/{reps}");
    assert!(
        wins * 100 >= reps * 80,
        "degree-1 rung selected in only {wins}/{reps} replicates"
    );
}

#[test]
fn super_learner_prefers_interaction_rung_for_interaction_truth() {
    let reps: usize = 50;
    let wins = (0..reps as u64).filter(|&r| dsl_pick(true, r) == 1).count();
    eprintln!("interaction wins {wins}/{reps}");
    assert!(
        wins * 100 >= reps * 80,
        "degree-2 rung selected in only {wins}/{reps} replicates"
    );
}
