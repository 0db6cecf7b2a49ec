//! Model-fixed nonparametric bootstrap for plug-in HAL features.
//!
//! Bootstrapping the whole pipeline would re-run basis selection on every
//! resample; instead, replicates keep the originally selected columns and
//! only refit the penalized regression on them, constrained to the original
//! sectional-variation bound. The plateau scan varies that bound *outside*
//! the bootstrap: confidence intervals are computed across a ladder of
//! norms at and beyond the cross-validated choice, and the norm is taken
//! where the interval width stops moving.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate_basis, BasisCatalog, Column};
use crate::data::{resample_indices, Dataset};
use crate::estimands::Arm;
use crate::sim::rng_for;
use crate::solver::{constrained_fit, HalFit, LassoPath, LossFamily, SolverOptions};
use crate::util::{kahan_sum, logit, mean, quantile_sorted, sd};
use crate::{Error, Result};

const Z_975: f64 = 1.959963984540054;

/// Fraction of failed replicates above which a bootstrap run aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// Relative CI-width change under which the plateau scan considers a
/// window flat.
pub const PLATEAU_RTOL: f64 = 0.05;

/// Plug-in feature evaluated on each bootstrap refit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PluginFeature {
    /// Mean of the fitted predictions at the (resampled) observations.
    FittedMean,
    /// Mean prediction with treatment set to the arm everywhere.
    ArmMean(Arm),
    /// Treated minus control arm mean.
    Ate,
}

impl PluginFeature {
    fn needs_treatment(self) -> bool {
        !matches!(self, PluginFeature::FittedMean)
    }

    pub fn label(self) -> &'static str {
        match self {
            PluginFeature::FittedMean => "fitted-mean",
            PluginFeature::ArmMean(Arm::Treated) => "treated-mean",
            PluginFeature::ArmMean(Arm::Control) => "control-mean",
            PluginFeature::Ate => "ate",
        }
    }
}

/// One rung of the plateau scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauPoint {
    pub l1_norm: f64,
    pub lambda: f64,
    pub psi_hat: f64,
    pub ci_percentile: (f64, f64),
    pub ci_wald: (f64, f64),
    pub width: f64,
}

/// Bootstrap distribution of a plug-in feature, with both inference routes
/// and (when produced by the plateau scan) the full per-norm table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub feature: PluginFeature,
    pub b: usize,
    pub seed: u64,
    /// Feature at the original data and fit.
    pub psi_hat: f64,
    /// Successful replicate estimates, in replicate order.
    pub estimates: Vec<f64>,
    /// (replicate index, error) for skipped replicates.
    pub failures: Vec<(usize, String)>,
    pub se_bootstrap: f64,
    /// Primary interval: 2.5%/97.5% quantiles of the estimates.
    pub ci_percentile: (f64, f64),
    /// Normal-theory interval around `psi_hat` with the bootstrap se.
    pub ci_wald: (f64, f64),
    /// Per-norm scan table; a single entry when no scan was run.
    pub scan: Vec<PlateauPoint>,
    pub selected_l1_norm: f64,
    /// Set when the plateau scan never stabilized.
    pub flagged: bool,
    pub notes: Vec<String>,
}

impl BootstrapReport {
    /// Recheck the report's invariants: finite ordered intervals, finite
    /// estimates, and (at B ≥ 500) the bootstrap mean within three
    /// bootstrap standard errors of the original estimate.
    pub fn verify(&self) -> Result<()> {
        if self.estimates.iter().any(|e| !e.is_finite()) {
            return Err(Error::numeric("bootstrap estimates must be finite"));
        }
        for (lo, hi) in [self.ci_percentile, self.ci_wald] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::numeric("bootstrap interval endpoints out of order"));
            }
        }
        if self.b >= 500 {
            let drift = (mean(&self.estimates) - self.psi_hat).abs();
            if drift > 3.0 * self.se_bootstrap.max(1e-12) {
                return Err(Error::numeric(format!(
                    "bootstrap mean drifts {drift:.3e} from the original estimate \
                     (3 se = {:.3e})",
                    3.0 * self.se_bootstrap
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate the plug-in feature for a fit over the given columns, which
/// must be aligned row-for-row with `ds`. Counterfactual rows are
/// evaluated through the original basis definitions, so the feature is
/// exactly the plug-in of the refitted function.
fn evaluate_feature(
    feature: PluginFeature,
    functions: &[&crate::basis::BasisFunction],
    columns: &[Column],
    intercept: f64,
    beta: &[f64],
    loss: LossFamily,
    ds: &Dataset,
) -> Result<f64> {
    let n = ds.n();
    let eta_observed = || -> Vec<f64> {
        let mut eta = vec![intercept; n];
        for (col, &b) in columns.iter().zip(beta) {
            if b == 0.0 {
                continue;
            }
            match col {
                Column::Indicator(idx) => {
                    for &i in idx {
                        eta[i as usize] += b;
                    }
                }
                Column::Hinge(idx, vals) => {
                    for (&i, &v) in idx.iter().zip(vals) {
                        eta[i as usize] += b * v;
                    }
                }
            }
        }
        eta
    };
    let arm_mean = |arm: Arm| -> Result<f64> {
        let a = ds
            .treatment()
            .ok_or_else(|| Error::invalid("arm features need a treatment column"))?;
        let eta_obs = eta_observed();
        let mut x = vec![0.0f64; ds.d() + 1];
        x[0] = arm.level();
        let total = kahan_sum((0..n).map(|i| {
            let eta = if a[i] == arm.level() {
                eta_obs[i]
            } else {
                for j in 0..ds.d() {
                    x[j + 1] = ds.covariate(j)[i];
                }
                let mut e = intercept;
                for (k, f) in functions.iter().enumerate() {
                    if beta[k] != 0.0 {
                        e += beta[k] * evaluate_basis(f, &x);
                    }
                }
                e
            };
            loss.mean_from_eta(eta)
        }));
        Ok(total / n as f64)
    };
    match feature {
        PluginFeature::FittedMean => {
            let eta = eta_observed();
            Ok(mean(
                &eta.iter().map(|&e| loss.mean_from_eta(e)).collect::<Vec<_>>(),
            ))
        }
        PluginFeature::ArmMean(arm) => arm_mean(arm),
        PluginFeature::Ate => Ok(arm_mean(Arm::Treated)? - arm_mean(Arm::Control)?),
    }
}

/// Refit the selected model on (possibly resampled) data: the same active
/// columns, constrained to the original sectional-variation bound. An
/// empty active set is the null model, whose intercept has a closed form.
fn refit_restricted(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    l1_bound: f64,
    solver: &SolverOptions,
) -> Result<(f64, Vec<f64>)> {
    if columns.is_empty() {
        let ybar = mean(y);
        let intercept = match loss {
            LossFamily::Gaussian => ybar,
            LossFamily::Binomial => logit(ybar.clamp(1e-12, 1.0 - 1e-12)),
        };
        return Ok((intercept, Vec::new()));
    }
    let refit = constrained_fit(columns, y, loss, l1_bound, None, solver)?;
    Ok((refit.fit.intercept, refit.fit.beta))
}

/// Nonparametric bootstrap of a plug-in feature with the model held fixed:
/// every replicate resamples rows with replacement, refits the lasso on
/// the originally active columns at the original `l1_norm` bound, and
/// evaluates the feature. Basis selection is never re-run — replicates
/// see exactly the columns of `fit.active` (asserted).
pub fn bootstrap_plugin(
    catalog: &BasisCatalog,
    fit: &HalFit,
    ds: &Dataset,
    feature: PluginFeature,
    b: usize,
    seed: u64,
    solver: &SolverOptions,
) -> Result<BootstrapReport> {
    if b < 2 {
        return Err(Error::invalid("bootstrap needs at least two replicates"));
    }
    if catalog.n() != ds.n() {
        return Err(Error::invalid(format!(
            "catalog covers {} rows but the dataset has {}",
            catalog.n(),
            ds.n()
        )));
    }
    if fit.beta.len() != catalog.p() {
        return Err(Error::invalid("fit and catalog disagree on dimension"));
    }
    if feature.needs_treatment() && ds.treatment().is_none() {
        return Err(Error::invalid("arm features need a treatment column"));
    }
    let n = ds.n();
    let functions: Vec<&crate::basis::BasisFunction> =
        fit.active.iter().map(|&j| &catalog.functions()[j]).collect();
    let beta_active: Vec<f64> = fit.active.iter().map(|&j| fit.beta[j]).collect();

    let identity: Vec<usize> = (0..n).collect();
    let original_columns = catalog.restricted_columns(&fit.active, &identity);
    let psi_hat = evaluate_feature(
        feature,
        &functions,
        &original_columns,
        fit.intercept,
        &beta_active,
        fit.loss,
        ds,
    )?;

    let outcomes: Vec<(usize, Result<f64>)> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<f64> {
                let mut rng = rng_for(seed, rep as u64 + 1);
                let rows = resample_indices(n, &mut rng);
                let ds_star = ds.subset(&rows);
                let cols_star = catalog.restricted_columns(&fit.active, &rows);
                let (intercept, beta) =
                    refit_restricted(&cols_star, ds_star.outcome(), fit.loss, fit.l1_norm, solver)?;
                // The candidate set is structurally the original active set.
                assert_eq!(beta.len(), fit.active.len());
                evaluate_feature(
                    feature,
                    &functions,
                    &cols_star,
                    intercept,
                    &beta,
                    fit.loss,
                    &ds_star,
                )
            };
            (rep, run())
        })
        .collect();

    let mut estimates = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes {
        match outcome {
            Ok(e) if e.is_finite() => estimates.push(e),
            Ok(e) => failures.push((rep, format!("non-finite estimate {e}"))),
            Err(err) => failures.push((rep, err.to_string())),
        }
    }
    if (failures.len() as f64) > MAX_FAILURE_FRACTION * b as f64 {
        return Err(Error::numeric(format!(
            "{} of {} bootstrap replicates failed; first error: {}",
            failures.len(),
            b,
            failures[0].1
        )));
    }

    let mut sorted = estimates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
    let ci_percentile = (
        quantile_sorted(&sorted, 0.025),
        quantile_sorted(&sorted, 0.975),
    );
    let se_bootstrap = sd(&estimates);
    let ci_wald = (psi_hat - Z_975 * se_bootstrap, psi_hat + Z_975 * se_bootstrap);
    let point = PlateauPoint {
        l1_norm: fit.l1_norm,
        lambda: fit.lambda,
        psi_hat,
        ci_percentile,
        ci_wald,
        width: ci_percentile.1 - ci_percentile.0,
    };
    Ok(BootstrapReport {
        feature,
        b,
        seed,
        psi_hat,
        estimates,
        failures,
        se_bootstrap,
        ci_percentile,
        ci_wald,
        scan: vec![point],
        selected_l1_norm: fit.l1_norm,
        flagged: false,
        notes: Vec::new(),
    })
}

/// First index of the width sequence where the plateau rule fires: the
/// earliest three-point window whose two successive relative changes are
/// both under [`PLATEAU_RTOL`]. A scan that is flat from the very first
/// window plateaus at the first norm; otherwise the window's last point is
/// where the width is judged to have settled. `None` when no window
/// qualifies.
fn plateau_index(widths: &[f64]) -> Option<usize> {
    let rel = |a: f64, b: f64| -> f64 {
        if a == 0.0 {
            if b == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            ((b - a) / a).abs()
        }
    };
    for k in 2..widths.len() {
        if rel(widths[k - 2], widths[k - 1]) < PLATEAU_RTOL && rel(widths[k - 1], widths[k]) < PLATEAU_RTOL
        {
            return Some(if k == 2 { 0 } else { k });
        }
    }
    None
}

/// Scan the lasso path from the cross-validated fit toward larger
/// sectional-variation norms, bootstrap the feature at every rung, and
/// select the norm where the percentile-interval width plateaus. When no
/// window ever stabilizes the most extreme norm is returned and the
/// report is flagged.
pub fn plateau_select(
    catalog: &BasisCatalog,
    ds: &Dataset,
    path: &LassoPath,
    cv_index: usize,
    feature: PluginFeature,
    b: usize,
    seed: u64,
    solver: &SolverOptions,
) -> Result<BootstrapReport> {
    if cv_index >= path.fits.len() {
        return Err(Error::invalid(format!(
            "cv index {cv_index} outside the path ({} fits)",
            path.fits.len()
        )));
    }
    // Rungs at and beyond the cv norm, deduplicated: in the saturated tail
    // of the path the norm stops growing and repeated rungs would make any
    // window look flat.
    let mut rungs: Vec<&HalFit> = Vec::new();
    for fit in &path.fits[cv_index..] {
        if let Some(last) = rungs.last() {
            if (fit.l1_norm - last.l1_norm).abs() <= 1e-9 * last.l1_norm.max(1e-12) {
                continue;
            }
        }
        rungs.push(fit);
    }

    let mut scan = Vec::with_capacity(rungs.len());
    let mut reports = Vec::with_capacity(rungs.len());
    for (k, fit) in rungs.iter().enumerate() {
        // Distinct, deterministic seed per rung so replicate streams never
        // collide across the scan.
        let rung_seed = seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let report = bootstrap_plugin(catalog, fit, ds, feature, b, rung_seed, solver)?;
        scan.push(report.scan[0].clone());
        reports.push(report);
    }

    let widths: Vec<f64> = scan.iter().map(|p| p.width).collect();
    let (idx, flagged) = match plateau_index(&widths) {
        Some(i) => (i, false),
        None => (scan.len() - 1, true),
    };
    let mut selected = reports.swap_remove(idx);
    selected.scan = scan;
    selected.selected_l1_norm = selected.scan[idx].l1_norm;
    selected.flagged = flagged;
    if flagged {
        selected.notes.push(format!(
            "interval widths never plateaued across {} norms; reporting the most extreme",
            selected.scan.len()
        ));
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{enumerate_basis, BasisSpec, KnotStrategy};
    use crate::solver::{fit_path, lambda_max, PathOptions};
    use crate::util::variance;

    fn gaussian_noise_dataset(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng_for(seed, 0);
        let w: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.3 + z
            })
            .collect();
        Dataset::new(vec![w], vec!["w1".into()], None, None, y, "y".into()).unwrap()
    }

    fn null_fit(catalog: &BasisCatalog, y: &[f64], loss: LossFamily) -> HalFit {
        let lmax = lambda_max(catalog.columns(), y, loss).unwrap();
        crate::solver::fit_lasso(
            catalog.columns(),
            y,
            loss,
            lmax,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn null_model_bootstrap_matches_the_classical_se_of_the_mean() {
        let n = 200;
        let ds = gaussian_noise_dataset(n, 21);
        let spec = BasisSpec::zero_order(1, KnotStrategy::Quantiles(4));
        let catalog = enumerate_basis(&ds.outcome_design(), &spec).unwrap();
        let fit = null_fit(&catalog, ds.outcome(), LossFamily::Gaussian);
        assert!(fit.active.is_empty(), "lambda_max fit should be null");
        let report = bootstrap_plugin(
            &catalog,
            &fit,
            &ds,
            PluginFeature::FittedMean,
            500,
            7,
            &SolverOptions::default(),
        )
        .unwrap();
        report.verify().unwrap();
        assert_eq!(report.estimates.len(), 500);
        assert!((report.psi_hat - mean(ds.outcome())).abs() < 1e-12);
        let classical = (variance(ds.outcome()) / n as f64).sqrt();
        assert!(
            (report.se_bootstrap - classical).abs() <= 0.15 * classical,
            "bootstrap se {} vs classical {}",
            report.se_bootstrap,
            classical
        );
        let (lo, hi) = report.ci_percentile;
        assert!(lo < report.psi_hat && report.psi_hat < hi);
    }

    #[test]
    fn two_replicates_with_a_fixed_seed_are_deterministic() {
        let ds = gaussian_noise_dataset(60, 4);
        let spec = BasisSpec::zero_order(1, KnotStrategy::Quantiles(4));
        let catalog = enumerate_basis(&ds.outcome_design(), &spec).unwrap();
        let fit = null_fit(&catalog, ds.outcome(), LossFamily::Gaussian);
        let opts = SolverOptions::default();
        let r1 = bootstrap_plugin(&catalog, &fit, &ds, PluginFeature::FittedMean, 2, 11, &opts)
            .unwrap();
        let r2 = bootstrap_plugin(&catalog, &fit, &ds, PluginFeature::FittedMean, 2, 11, &opts)
            .unwrap();
        assert_eq!(r1.estimates.len(), 2);
        assert_eq!(r1.estimates, r2.estimates);
        assert_ne!(
            r1.estimates[0], r1.estimates[1],
            "distinct replicate streams should resample differently"
        );
    }

    #[test]
    fn refits_keep_the_original_columns_and_respect_the_bound() {
        // A fit with a real active set: step truth, gaussian noise.
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};
        let n = 150;
        let mut rng = rng_for(33, 0);
        let w: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<f64> = w
            .iter()
            .map(|&wi| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if wi >= 0.5 {
                    1.0 + 0.3 * z
                } else {
                    0.3 * z
                }
            })
            .collect();
        let ds = Dataset::new(vec![w], vec!["w1".into()], None, None, y, "y".into()).unwrap();
        let spec = BasisSpec::zero_order(1, KnotStrategy::Quantiles(8));
        let catalog = enumerate_basis(&ds.outcome_design(), &spec).unwrap();
        let lmax = lambda_max(catalog.columns(), ds.outcome(), LossFamily::Gaussian).unwrap();
        let fit = crate::solver::fit_lasso(
            catalog.columns(),
            ds.outcome(),
            LossFamily::Gaussian,
            0.05 * lmax,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(!fit.active.is_empty());
        let report = bootstrap_plugin(
            &catalog,
            &fit,
            &ds,
            PluginFeature::FittedMean,
            50,
            9,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.estimates.len(), 50);
        // The bootstrap spread of a fitted mean is of the same order as
        // the iid se of the outcome mean.
        let classical = (variance(ds.outcome()) / n as f64).sqrt();
        assert!(report.se_bootstrap < 3.0 * classical);
        assert!(report.se_bootstrap > classical / 10.0);
    }

    #[test]
    fn plateau_rule_matches_hand_evaluation() {
        // Flat from the start: the plateau began at the first norm.
        assert_eq!(plateau_index(&[1.0, 1.0, 1.0, 1.0]), Some(0));
        assert_eq!(plateau_index(&[1.0, 1.04, 1.02]), Some(0));
        // Hand-checked sequence: changes 20%, 4.2%, 0.8%, 0.16% — the
        // first window with both changes under 5% ends at the 4th point.
        assert_eq!(plateau_index(&[1.0, 1.2, 1.25, 1.26, 1.262]), Some(3));
        // Never stabilizes.
        assert_eq!(plateau_index(&[1.0, 1.2, 1.45, 1.8, 2.3]), None);
        // Too short to host a window.
        assert_eq!(plateau_index(&[1.0, 1.01]), None);
    }

    #[test]
    fn plateau_scan_selects_a_norm_and_keeps_the_table() {
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};
        let n = 120;
        let mut rng = rng_for(55, 0);
        let w: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<f64> = w
            .iter()
            .map(|&wi| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.8 * wi + 0.2 * z
            })
            .collect();
        let ds = Dataset::new(vec![w], vec!["w1".into()], None, None, y, "y".into()).unwrap();
        let spec = BasisSpec::zero_order(1, KnotStrategy::Quantiles(6));
        let catalog = enumerate_basis(&ds.outcome_design(), &spec).unwrap();
        let path = fit_path(
            catalog.columns(),
            ds.outcome(),
            LossFamily::Gaussian,
            &PathOptions {
                grid_size: 8,
                min_ratio: 0.05,
                lambdas: None,
            },
            &SolverOptions::default(),
        )
        .unwrap();
        let report = plateau_select(
            &catalog,
            &ds,
            &path,
            2,
            PluginFeature::FittedMean,
            60,
            17,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(!report.scan.is_empty());
        assert!(report
            .scan
            .windows(2)
            .all(|w| w[1].l1_norm > w[0].l1_norm));
        assert!(report
            .scan
            .iter()
            .any(|p| (p.l1_norm - report.selected_l1_norm).abs() < 1e-12));
        // Either a plateau fired or the report says it never did.
        if report.flagged {
            assert!(!report.notes.is_empty());
            assert!(
                (report.selected_l1_norm - report.scan.last().unwrap().l1_norm).abs() < 1e-12
            );
        }
        // Selecting from the scan reproduces that rung's interval.
        let chosen = report
            .scan
            .iter()
            .find(|p| (p.l1_norm - report.selected_l1_norm).abs() < 1e-12)
            .unwrap();
        assert_eq!(chosen.ci_percentile, report.ci_percentile);
    }

    #[test]
    fn arm_feature_bootstraps_a_treatment_mean() {
        use crate::estimands::test_support::simulated_binary;
        let ds = simulated_binary(150, 77);
        let spec = BasisSpec::zero_order(2, KnotStrategy::Quantiles(4));
        let catalog = enumerate_basis(&ds.outcome_design(), &spec).unwrap();
        let lmax = lambda_max(catalog.columns(), ds.outcome(), LossFamily::Binomial).unwrap();
        let fit = crate::solver::fit_lasso(
            catalog.columns(),
            ds.outcome(),
            LossFamily::Binomial,
            0.1 * lmax,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        let report = bootstrap_plugin(
            &catalog,
            &fit,
            &ds,
            PluginFeature::ArmMean(Arm::Treated),
            80,
            3,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert!(report.psi_hat > 0.0 && report.psi_hat < 1.0);
        assert!(report.ci_percentile.0 <= report.ci_percentile.1);
        // Bootstrapping without a treatment column is rejected for arm
        // features.
        let ds_no_a = gaussian_noise_dataset(60, 5);
        let cat2 = enumerate_basis(
            &ds_no_a.outcome_design(),
            &BasisSpec::zero_order(1, KnotStrategy::Quantiles(4)),
        )
        .unwrap();
        let fit2 = null_fit(&cat2, ds_no_a.outcome(), LossFamily::Gaussian);
        assert!(bootstrap_plugin(
            &cat2,
            &fit2,
            &ds_no_a,
            PluginFeature::ArmMean(Arm::Treated),
            10,
            1,
            &SolverOptions::default(),
        )
        .is_err());
    }

    #[test]
    fn replicate_count_and_dimension_mismatches_are_rejected() {
        let ds = gaussian_noise_dataset(40, 2);
        let spec = BasisSpec::zero_order(1, KnotStrategy::Quantiles(4));
        let catalog = enumerate_basis(&ds.outcome_design(), &spec).unwrap();
        let fit = null_fit(&catalog, ds.outcome(), LossFamily::Gaussian);
        let opts = SolverOptions::default();
        assert!(
            bootstrap_plugin(&catalog, &fit, &ds, PluginFeature::FittedMean, 1, 1, &opts).is_err()
        );
        let other = gaussian_noise_dataset(41, 3);
        assert!(
            bootstrap_plugin(&catalog, &fit, &other, PluginFeature::FittedMean, 5, 1, &opts)
                .is_err()
        );
    }
}
