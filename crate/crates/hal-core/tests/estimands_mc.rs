//! Seeded Monte Carlo checks of the estimation layer: plug-in and IPW
//! behavior under undersmoothing, the exact remainder decomposition of the
//! targeted estimator, ATE null/constant-effect behavior, and concordance
//! of the collaborative selector with the plain targeted update on a
//! well-behaved process.

use hal_core::basis::{enumerate_basis, BasisSpec, KnotStrategy};
use hal_core::data::{make_folds, Dataset};
use hal_core::estimands::{
    ate, ctmle_select, exact_remainder_tsm, integrate_unit_cube, tmle_update_tsm, Arm, AteMethod,
    CtmleOptions, OutcomeModel, PropensityModel, TargetReport, TmleOptions, DEFAULT_TRUNCATION,
};
use hal_core::selection::cv_select_lambda_on_catalog;
use hal_core::sim::{
    dgp_a, dgp_c, pipeline_estimator, rng_for, run_mc, Dgp, EstimatorKind, NoiseKind,
    PipelineOptions,
};
use hal_core::solver::{LossFamily, PathOptions};
use hal_core::Result;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn mc_options() -> PipelineOptions {
    PipelineOptions {
        folds: 5,
        path: PathOptions {
            grid_size: 15,
            min_ratio: 2e-2,
            lambdas: None,
        },
        knots: KnotStrategy::Quantiles(6),
        ..PipelineOptions::default()
    }
}

/// Cross-validated outcome model on the joint (A, W) design.
fn fit_q(ds: &Dataset, loss: LossFamily, opts: &PipelineOptions, rep: u64) -> Result<OutcomeModel> {
    let design = ds.outcome_design();
    let spec = BasisSpec::zero_order(2.min(design.len()), opts.knots);
    let catalog = enumerate_basis(&design, &spec)?;
    let folds = make_folds(ds.n(), opts.folds, rep)?;
    let (_, fit, _) = cv_select_lambda_on_catalog(
        &catalog,
        ds.outcome(),
        loss,
        &folds,
        &opts.path,
        &opts.solver,
    )?;
    OutcomeModel::from_fit(catalog, fit, ds)
}

/// Cross-validated propensity model on the covariate design.
fn fit_g(ds: &Dataset, opts: &PipelineOptions, rep: u64) -> Result<PropensityModel> {
    let a = ds.treatment().expect("treatment column").to_vec();
    let design = ds.covariate_design();
    let spec = BasisSpec::zero_order(2.min(design.len()), opts.knots);
    let catalog = enumerate_basis(&design, &spec)?;
    let folds = make_folds(ds.n(), opts.folds, rep.wrapping_add(77))?;
    let (_, fit, _) = cv_select_lambda_on_catalog(
        &catalog,
        &a,
        LossFamily::Binomial,
        &folds,
        &opts.path,
        &opts.solver,
    )?;
    PropensityModel::from_hal(catalog, fit, opts.truncation, "hal-cv")
}

fn true_g(dgp: &Dgp, ds: &Dataset) -> PropensityModel {
    PropensityModel::known(dgp.true_propensities(ds).unwrap(), DEFAULT_TRUNCATION, "true").unwrap()
}

#[test]
fn plugin_with_undersmoothed_outcome_tracks_truth() {
    let dgp = dgp_a();
    let truth = dgp.psi0(Arm::Treated);
    let opts = PipelineOptions {
        use_true_g: true,
        undersmooth_q: true,
        ..mc_options()
    };
    let est = pipeline_estimator(dgp, EstimatorKind::Plugin, opts);
    let result = run_mc(dgp, "plugin-us", truth, 2000, 100, 4101, est).unwrap();
    result.verify().unwrap();
    assert!(
        result.failure_fraction() < 0.05,
        "failures: {:?}",
        result.failures
    );
    let within = result
        .rows
        .iter()
        .filter(|r| (r.psi_hat - truth).abs() <= 3.0 * r.se)
        .count() as f64
        / result.rows.len() as f64;
    assert!(
        within >= 0.90,
        "only {:.0}% of replicates within 3 se (bias {:.4}, mean se {:.4})",
        100.0 * within,
        result.bias,
        result.mean_se
    );
}

#[test]
fn ipw_with_undersmoothed_propensity_covers() {
    let dgp = dgp_a();
    let truth = dgp.psi0(Arm::Treated);
    let opts = PipelineOptions {
        use_true_g: false,
        undersmooth_g: true,
        ..mc_options()
    };
    let est = pipeline_estimator(dgp, EstimatorKind::Ipw, opts);
    let result = run_mc(dgp, "ipw-us", truth, 2000, 100, 4203, est).unwrap();
    result.verify().unwrap();
    assert!(
        result.failure_fraction() < 0.05,
        "failures: {:?}",
        result.failures
    );
    assert!(
        result.coverage >= 0.88 && result.coverage <= 0.99,
        "coverage {:.1}% outside [88%, 99%] (bias {:.4})",
        100.0 * result.coverage,
        result.bias
    );
}

#[test]
fn tmle_identity_decomposition_holds_per_replicate() {
    // ψ(Q*) − ψ₀ = (P_n − P₀)D* + R₀ up to the solved score equation:
    // the plug-in of the targeted fit, the empirical and population means
    // of the canonical gradient, and the exact remainder are each computed
    // independently, and the gap must be |P_n D*| within quadrature error.
    let dgp = dgp_a();
    let psi0 = dgp.psi0(Arm::Treated);
    let opts = mc_options();
    let (lo, hi) = DEFAULT_TRUNCATION;
    let m = 150;
    for rep in 0..5u64 {
        let mut rng = rng_for(9300, rep + 1);
        let ds = dgp.sample(400, &mut rng).unwrap();
        let q = fit_q(&ds, LossFamily::Binomial, &opts, rep).unwrap();
        let g = fit_g(&ds, &opts, rep).unwrap();
        let (state, report) = tmle_update_tsm(&q, &g, &ds, &TmleOptions::default()).unwrap();

        // The targeted counterfactual regression as a function over the
        // cube: initial model fluctuated by the accumulated ε along the
        // clever covariate 1/Ḡ_trunc.
        let eps = state.eps_total;
        let q_star = |w: &[f64]| -> f64 {
            let mut x = vec![Arm::Treated.level()];
            x.extend_from_slice(w);
            let l0 = logit(q.predict_unit(&x));
            let gt = g.predict_at(w).expect("hal propensity").clamp(lo, hi);
            expit(l0 + eps / gt)
        };
        let g_trunc = |w: &[f64]| g.predict_at(w).expect("hal propensity").clamp(lo, hi);
        let q0 = |w: &[f64]| dgp.qbar_at(1.0, w);
        let g0 = |w: &[f64]| dgp.gbar_at(w);

        let psi_star = report.psi_hat;
        let pn_dstar = report.ic_values.iter().sum::<f64>() / ds.n() as f64;

        // P₀ D* by quadrature, with a grid-doubling error estimate.
        let p0d_at = |points: usize| -> f64 {
            let cross = integrate_unit_cube(dgp.d(), points, |_| 1.0, |w| {
                g0(w) / g_trunc(w) * (q0(w) - q_star(w))
            })
            .unwrap();
            let mean_qstar =
                integrate_unit_cube(dgp.d(), points, |_| 1.0, |w| q_star(w)).unwrap();
            cross + mean_qstar - psi_star
        };
        let p0d_coarse = p0d_at(m);
        let p0d = p0d_at(2 * m);
        let p0d_err = (p0d - p0d_coarse).abs();

        let r0 = exact_remainder_tsm(&q_star, &g_trunc, &q0, &g0, |_| 1.0, dgp.d(), m).unwrap();
        let quad_tol = 10.0 * (p0d_err + r0.quadrature_error) + 1e-6;

        // Exact form: ψ* − ψ₀ = −P₀D* + R₀.
        let exact_gap = psi_star - psi0 + p0d - r0.value;
        assert!(
            exact_gap.abs() <= quad_tol,
            "rep {rep}: exact identity gap {exact_gap:.3e} vs quadrature tol {quad_tol:.3e}"
        );
        // Sampled form: ψ* − ψ₀ − (P_n−P₀)D* − R₀ = −P_nD*.
        let sampled_gap = psi_star - psi0 - (pn_dstar - p0d) - r0.value;
        assert!(
            sampled_gap.abs() <= pn_dstar.abs() + quad_tol,
            "rep {rep}: decomposition gap {sampled_gap:.3e} vs |P_n D*| + quadrature {:.3e}",
            pn_dstar.abs() + quad_tol
        );
    }
}

fn gbar_ce(w: &[f64]) -> f64 {
    expit(0.6 * w[0] - 0.3)
}

fn qbar_ce(a: f64, w: &[f64]) -> f64 {
    let mut q = 0.4 + 0.3 * a;
    if w[0] >= 0.5 {
        q += 0.4;
    }
    if w[1] >= 0.6 {
        q += 0.3;
    }
    q
}

#[test]
fn ate_is_null_safe_and_covers_a_constant_effect() {
    // Null: the step process's regression ignores treatment entirely.
    let null_dgp = dgp_c();
    assert_eq!(null_dgp.ate0(), 0.0);
    let opts = mc_options();
    let tmle = TmleOptions::default();
    let mut within = 0usize;
    let null_reps = 40u64;
    for rep in 0..null_reps {
        let mut rng = rng_for(6400, rep + 1);
        let ds = null_dgp.sample(300, &mut rng).unwrap();
        let q = fit_q(&ds, LossFamily::Gaussian, &opts, rep).unwrap();
        let g = true_g(null_dgp, &ds);
        let report = ate(&q, &g, &ds, AteMethod::Tmle, &tmle).unwrap();
        if report.psi_hat.abs() <= 2.0 * report.se {
            within += 1;
        }
    }
    assert!(
        within as f64 >= 0.90 * null_reps as f64,
        "null ATE within 2 se in only {within}/{null_reps} replicates"
    );

    // Constant effect: Q̄₀(1,w) − Q̄₀(0,w) ≡ 0.3 by construction, with
    // mild confounding and step main effects aligned to the quadrature
    // grid so the cached truth is exact.
    let ce = Dgp::new(
        "constant-effect",
        2,
        gbar_ce,
        qbar_ce,
        NoiseKind::Gaussian { sd: 0.4 },
        800,
    )
    .unwrap();
    assert!((ce.ate0() - 0.3).abs() < 1e-12);
    let mut covered = 0usize;
    let ce_reps = 100u64;
    for rep in 0..ce_reps {
        let mut rng = rng_for(6500, rep + 1);
        let ds = ce.sample(300, &mut rng).unwrap();
        let q = fit_q(&ds, LossFamily::Gaussian, &opts, rep).unwrap();
        let g = true_g(&ce, &ds);
        let report = ate(&q, &g, &ds, AteMethod::Tmle, &tmle).unwrap();
        if report.ci.0 <= 0.3 && 0.3 <= report.ci.1 {
            covered += 1;
        }
    }
    let coverage = covered as f64 / ce_reps as f64;
    assert!(
        (0.88..=0.99).contains(&coverage),
        "constant-effect coverage {:.1}% outside [88%, 99%]",
        100.0 * coverage
    );
}

#[test]
fn ctmle_concords_with_plain_tmle_without_positivity_strain() {
    let dgp = dgp_a();
    let opts = mc_options();
    let tmle_opts = TmleOptions::default();
    let reps = 60u64;
    let mut concordant = 0usize;
    for rep in 0..reps {
        let mut rng = rng_for(7200, rep + 1);
        let ds = dgp.sample(300, &mut rng).unwrap();
        let q = fit_q(&ds, LossFamily::Binomial, &opts, rep).unwrap();
        let g = true_g(dgp, &ds);
        let (_, plain): (_, TargetReport) =
            tmle_update_tsm(&q, &g, &ds, &tmle_opts).unwrap();
        let ladder: Vec<PropensityModel> = [(0.05, 0.95), (0.025, 0.975), (0.01, 0.99)]
            .iter()
            .map(|&b| g.with_bounds(b, format!("trunc-{}", b.0)).unwrap())
            .collect();
        let folds = make_folds(ds.n(), 5, rep.wrapping_add(31)).unwrap();
        let copts = CtmleOptions {
            tmle: tmle_opts,
            arm: Arm::Treated,
        };
        let (_, collab) = ctmle_select(&q, &ladder, &ds, &folds, &copts).unwrap();
        if (collab.psi_hat - plain.psi_hat).abs() <= 2.0 * plain.se {
            concordant += 1;
        }
    }
    assert!(
        concordant as f64 >= 0.90 * reps as f64,
        "collaborative estimate within 2 se of plain TMLE in only {concordant}/{reps} replicates"
    );
}
