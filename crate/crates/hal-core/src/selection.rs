//! Model selection: V-fold cross-validation over the lambda path, a
//! complexity-ordered discrete super learner over basis specifications, and
//! undersmoothing selectors that relax the penalty until targeted score
//! equations are solved.

use serde::{Deserialize, Serialize};

use crate::basis::{enumerate_basis, BasisCatalog, BasisSpec, Column, KnotStrategy};
use crate::data::FoldPlan;
use crate::solver::{
    fit_lasso, fit_path, HalFit, LassoPath, LossFamily, PathOptions, SolverOptions,
};
use crate::util::kahan_sum;
use crate::{Error, Result};

/// Cross-validation audit trail: per-candidate, per-fold held-out risks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    /// Human-readable candidate identifiers (lambda values or ladder rungs).
    pub candidate_labels: Vec<String>,
    /// Held-out validation risk per candidate per fold:
    /// `fold_risks[candidate][fold]`.
    pub fold_risks: Vec<Vec<f64>>,
    /// Equal-weight mean of the per-fold risks.
    pub mean_risks: Vec<f64>,
    /// Index of the selected candidate.
    pub selected: usize,
    /// Seed of the fold plan, for provenance.
    pub seed: u64,
}

impl CvReport {
    /// Recheck the selection invariant: the winner attains the minimum mean
    /// risk (ties broken upstream toward simpler fits never raise the risk).
    pub fn verify(&self) -> Result<()> {
        let best = self
            .mean_risks
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if self.mean_risks[self.selected] > best + 1e-12 * (1.0 + best.abs()) {
            return Err(Error::numeric(format!(
                "selected candidate {} has risk {} above the minimum {}",
                self.selected, self.mean_risks[self.selected], best
            )));
        }
        Ok(())
    }

    /// Flat CSV table `candidate,fold,risk`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("candidate,fold,risk\n");
        for (c, row) in self.fold_risks.iter().enumerate() {
            for (v, risk) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", self.candidate_labels[c], v, risk));
            }
        }
        out
    }
}

fn all_columns_restricted(catalog: &BasisCatalog, rows: &[usize]) -> Vec<Column> {
    let cols: Vec<usize> = (0..catalog.p()).collect();
    catalog.restricted_columns(&cols, rows)
}

fn subset_values(xs: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| xs[i]).collect()
}

/// Held-out validation risk of every path fit for one fold.
fn fold_validation_risks(
    catalog: &BasisCatalog,
    path: &LassoPath,
    y: &[f64],
    val_rows: &[usize],
) -> Vec<f64> {
    let val_cols = all_columns_restricted(catalog, val_rows);
    let y_val = subset_values(y, val_rows);
    path.fits
        .iter()
        .map(|fit| {
            let mut eta = vec![fit.intercept; val_rows.len()];
            for (col, &b) in val_cols.iter().zip(&fit.beta) {
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
            let preds: Vec<f64> = eta.iter().map(|&e| fit.loss.mean_from_eta(e)).collect();
            fit.loss.mean_report_loss(&y_val, &preds)
        })
        .collect()
}

/// V-fold cross-validated selection of lambda for one basis specification.
///
/// Every fold is fit on the same descending lambda grid, derived from the
/// full data, so a candidate means the same sieve element in every fold.
/// The winner (minimum mean held-out risk; ties toward the smaller l1 norm,
/// then the lower index) is refit on the full data.
pub fn cv_select_lambda(
    design: &[&[f64]],
    y: &[f64],
    spec: &BasisSpec,
    loss: LossFamily,
    folds: &FoldPlan,
    path_opts: &PathOptions,
    solver_opts: &SolverOptions,
) -> Result<(CvReport, HalFit, LassoPath)> {
    let catalog = enumerate_basis(design, spec)?;
    cv_select_lambda_on_catalog(&catalog, y, loss, folds, path_opts, solver_opts)
}

/// As [`cv_select_lambda`] but on a prebuilt catalog, so callers can reuse
/// the enumeration or restrict it beforehand.
pub fn cv_select_lambda_on_catalog(
    catalog: &BasisCatalog,
    y: &[f64],
    loss: LossFamily,
    folds: &FoldPlan,
    path_opts: &PathOptions,
    solver_opts: &SolverOptions,
) -> Result<(CvReport, HalFit, LassoPath)> {
    if folds.n() != y.len() {
        return Err(Error::invalid(format!(
            "fold plan covers {} rows but n = {}",
            folds.n(),
            y.len()
        )));
    }

    // Full-data path first: it fixes the shared lambda grid and provides
    // the refits the winner is drawn from.
    let full_path = fit_path(catalog.columns(), y, loss, path_opts, solver_opts)?;
    let grid = full_path.lambdas();
    let shared = PathOptions {
        lambdas: Some(grid.clone()),
        ..path_opts.clone()
    };

    let mut fold_risks_by_fold: Vec<Vec<f64>> = Vec::with_capacity(folds.v());
    for v in 0..folds.v() {
        let train = folds.training_rows(v);
        let val = folds.validation_rows(v);
        let train_cols = all_columns_restricted(catalog, &train);
        let y_train = subset_values(y, &train);
        let path = fit_path(&train_cols, &y_train, loss, &shared, solver_opts)
            .map_err(|e| Error::numeric(format!("fold {v} failed: {e}")))?;
        fold_risks_by_fold.push(fold_validation_risks(catalog, &path, y, &val));
    }

    // Transpose to [candidate][fold] and reduce.
    let n_cand = grid.len();
    let fold_risks: Vec<Vec<f64>> = (0..n_cand)
        .map(|c| fold_risks_by_fold.iter().map(|row| row[c]).collect())
        .collect();
    let mean_risks: Vec<f64> = fold_risks
        .iter()
        .map(|row| kahan_sum(row.iter().copied()) / row.len() as f64)
        .collect();

    let selected = select_min_risk(&mean_risks, |c| full_path.fits[c].l1_norm);
    let report = CvReport {
        candidate_labels: grid.iter().map(|l| format!("{l:.6e}")).collect(),
        fold_risks,
        mean_risks,
        selected,
        seed: folds.seed(),
    };
    report.verify()?;
    let fit = full_path.fits[selected].clone();
    Ok((report, fit, full_path))
}

/// Argmin with ties resolved toward the smaller norm, then the lower index.
fn select_min_risk<F: Fn(usize) -> f64>(mean_risks: &[f64], norm_of: F) -> usize {
    let mut best = 0usize;
    for c in 1..mean_risks.len() {
        let (rb, rc) = (mean_risks[best], mean_risks[c]);
        let tol = 1e-12 * (1.0 + rb.abs());
        if rc < rb - tol {
            best = c;
        } else if (rc - rb).abs() <= tol && norm_of(c) < norm_of(best) {
            best = c;
        }
    }
    best
}

/// A ladder of basis specifications ordered from least to most complex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalSpecLadder {
    pub specs: Vec<BasisSpec>,
    /// Stopping comparison: `false` (default) stops when a candidate is
    /// worse than the best so far; `true` stops when worse than the
    /// immediately previous candidate.
    pub stop_on_worse_than_previous: bool,
}

impl HalSpecLadder {
    pub fn new(specs: Vec<BasisSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("empty specification ladder"));
        }
        let rank = |s: &BasisSpec| -> (usize, usize, usize) {
            let knots = match s.knots {
                KnotStrategy::Quantiles(q) => q,
                KnotStrategy::AllObservations => usize::MAX,
            };
            (s.max_degree, knots, s.order as usize)
        };
        for w in specs.windows(2) {
            if rank(&w[1]) <= rank(&w[0]) {
                return Err(Error::invalid(
                    "ladder must be strictly increasing in complexity (max_degree, then knots, then order)",
                ));
            }
        }
        Ok(HalSpecLadder {
            specs,
            stop_on_worse_than_previous: false,
        })
    }
}

/// Discrete super learner over the ladder: each rung is internally
/// cv-tuned over lambda with the shared fold plan, rungs are visited from
/// least to most complex, and the walk stops early once a rung fails to
/// improve on the comparison risk. Returns the best rung's report row set,
/// its full-data refit, and the winning rung index.
pub fn discrete_super_learner(
    design: &[&[f64]],
    y: &[f64],
    ladder: &HalSpecLadder,
    loss: LossFamily,
    folds: &FoldPlan,
    path_opts: &PathOptions,
    solver_opts: &SolverOptions,
) -> Result<(CvReport, HalFit)> {
    let mut labels = Vec::new();
    let mut fold_risks = Vec::new();
    let mut mean_risks = Vec::new();
    let mut fits: Vec<HalFit> = Vec::new();

    for (k, spec) in ladder.specs.iter().enumerate() {
        let (rung_report, rung_fit, _) =
            cv_select_lambda(design, y, spec, loss, folds, path_opts, solver_opts)?;
        let sel = rung_report.selected;
        labels.push(format!(
            "rung {k}: degree {} knots {:?} lambda {}",
            spec.max_degree, spec.knots, rung_report.candidate_labels[sel]
        ));
        fold_risks.push(rung_report.fold_risks[sel].clone());
        mean_risks.push(rung_report.mean_risks[sel]);
        fits.push(rung_fit);

        let comparison = if ladder.stop_on_worse_than_previous {
            mean_risks[mean_risks.len().saturating_sub(2)]
        } else {
            mean_risks
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        };
        if mean_risks[k] > comparison {
            break; // the ladder stopped paying for its complexity
        }
    }

    let selected = select_min_risk(&mean_risks, |c| fits[c].l1_norm);
    let report = CvReport {
        candidate_labels: labels,
        fold_risks,
        mean_risks,
        selected,
        seed: folds.seed(),
    };
    report.verify()?;
    let fit = fits.swap_remove(selected);
    Ok((report, fit))
}

/// Outcome of an undersmoothing walk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UndersmoothReport {
    /// (l1 norm, criterion value) at every fit the walk evaluated.
    pub trace: Vec<(f64, f64)>,
    pub threshold: f64,
    pub selected_l1_norm: f64,
    pub selected_lambda: f64,
    /// The walk ran past the path grid into the halving extension.
    pub extended: bool,
    /// No evaluated fit met the criterion; the most extreme fit was
    /// returned anyway.
    pub criterion_unmet: bool,
    /// The criterion family was empty, so the cv fit was kept as-is.
    pub vacuous: bool,
}

/// Controls for the undersmoothing walk.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UndersmoothConfig {
    /// Multiplier on the sigma_n / (sqrt(n) log n) threshold.
    pub tol_const: f64,
    /// Stop extending once the l1 norm exceeds this multiple of the cv
    /// fit's norm.
    pub max_norm_factor: f64,
}

impl Default for UndersmoothConfig {
    fn default() -> Self {
        UndersmoothConfig {
            tol_const: 1.0,
            max_norm_factor: 10.0,
        }
    }
}

/// Walk the path from the cv-selected fit toward larger l1 norms until the
/// score criterion falls to `tol_const * sigma_n / (sqrt(n) ln n)`; extend
/// the path by halving lambda when the grid runs out. Never returns a fit
/// with l1 norm below the cv fit's.
pub fn undersmooth_select<F>(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    path: &LassoPath,
    cv_index: usize,
    mut criterion: F,
    sigma_n: f64,
    config: &UndersmoothConfig,
    solver_opts: &SolverOptions,
) -> Result<(HalFit, UndersmoothReport)>
where
    F: FnMut(&HalFit) -> Result<f64>,
{
    if cv_index >= path.fits.len() {
        return Err(Error::invalid(format!(
            "cv index {cv_index} outside path of {} fits",
            path.fits.len()
        )));
    }
    let n = y.len() as f64;
    let threshold = config.tol_const * sigma_n / (n.sqrt() * n.ln());
    let cv_norm = path.fits[cv_index].l1_norm;
    let norm_cap = (config.max_norm_factor * cv_norm).max(cv_norm);

    let mut trace: Vec<(f64, f64)> = Vec::new();
    let finish = |fit: &HalFit, trace: Vec<(f64, f64)>, extended: bool, unmet: bool| {
        let report = UndersmoothReport {
            threshold,
            selected_l1_norm: fit.l1_norm,
            selected_lambda: fit.lambda,
            trace,
            extended,
            criterion_unmet: unmet,
            vacuous: false,
        };
        (fit.clone(), report)
    };

    // Grid phase: path fits at or above the cv norm.
    for fit in &path.fits[cv_index..] {
        let value = criterion(fit)?;
        trace.push((fit.l1_norm, value));
        if value <= threshold {
            return Ok(finish(fit, trace, false, false));
        }
    }

    // Extension phase: halve lambda with warm starts until the criterion
    // is met or the norm cap is reached.
    let mut last = path.fits.last().expect("paths are nonempty").clone();
    loop {
        let next_lambda = last.lambda * 0.5;
        if next_lambda < f64::MIN_POSITIVE {
            return Ok(finish(&last, trace, true, true));
        }
        let fit = fit_lasso(
            columns,
            y,
            loss,
            next_lambda,
            None,
            Some(&last),
            solver_opts,
        )?;
        let value = criterion(&fit)?;
        trace.push((fit.l1_norm, value));
        if value <= threshold {
            return Ok(finish(&fit, trace, true, false));
        }
        if fit.l1_norm > norm_cap {
            return Ok(finish(&fit, trace, true, true));
        }
        last = fit;
    }
}

/// Undersmoothing against a family of criteria: the walk must drive the
/// supremum over the family below the threshold. An empty family keeps the
/// cv fit, flagged vacuous.
#[allow(clippy::type_complexity)]
pub fn global_undersmooth_select(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    path: &LassoPath,
    cv_index: usize,
    criteria: &mut [Box<dyn FnMut(&HalFit) -> Result<f64> + '_>],
    sigma_n: f64,
    config: &UndersmoothConfig,
    solver_opts: &SolverOptions,
) -> Result<(HalFit, UndersmoothReport)> {
    if criteria.is_empty() {
        let fit = path.fits[cv_index].clone();
        let report = UndersmoothReport {
            trace: Vec::new(),
            threshold: f64::INFINITY,
            selected_l1_norm: fit.l1_norm,
            selected_lambda: fit.lambda,
            extended: false,
            criterion_unmet: false,
            vacuous: true,
        };
        return Ok((fit, report));
    }
    let mut cells = criteria;
    let sup = |fit: &HalFit, cells: &mut [Box<dyn FnMut(&HalFit) -> Result<f64> + '_>]| {
        let mut worst = 0.0f64;
        for c in cells.iter_mut() {
            worst = worst.max(c(fit)?.abs());
        }
        Ok(worst)
    };
    undersmooth_select(
        columns,
        y,
        loss,
        path,
        cv_index,
        move |fit| sup(fit, &mut cells),
        sigma_n,
        config,
        solver_opts,
    )
}
