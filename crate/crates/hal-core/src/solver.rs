//! Pathwise coordinate-descent lasso over sparse spline bases.
//!
//! The penalized problem, for an unpenalized intercept b0 and slopes beta:
//!
//! ```text
//! minimize  P_n l(b0 + X beta) + lambda * ||beta||_1
//! ```
//!
//! with working loss l = (y - eta)^2 / 2 for squared error and the negative
//! Bernoulli log-likelihood (eta on the logit scale) for binomial outcomes.
//! The 1/2 factor makes the textbook soft-threshold update exact:
//! a single standardized column has solution
//! `soft(P_n(x * y_centered), lambda) / P_n(x^2)`.
//!
//! Every returned fit is KKT-verified against that convention:
//! active j satisfies grad_j = -lambda * sign(beta_j), inactive j satisfies
//! |grad_j| <= lambda, and the intercept gradient vanishes, where
//! grad_j = P_n d l / d beta_j. Binomial fits run iteratively reweighted
//! least squares with an inner weighted coordinate descent, weights floored
//! for stability, and a step-halving guard that keeps the true penalized
//! objective nonincreasing.
//!
//! `constrained_fit` bridges to the bound form (minimize empirical loss
//! subject to ||beta||_1 within a budget) by bisecting lambda until the
//! fitted sectional variation norm matches the requested bound.

use serde::{Deserialize, Serialize};

use crate::basis::{sectional_variation_norm, Column, SignConstraint};
use crate::util::{expit, logit, mean};
use crate::{Error, Result};

/// Loss family for the regression of an outcome on the basis expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFamily {
    /// Squared error; predictions live on the identity scale.
    Gaussian,
    /// Bernoulli log-loss; the linear predictor is a logit.
    Binomial,
}

impl LossFamily {
    /// Mean prediction from a linear predictor.
    pub fn mean_from_eta(self, eta: f64) -> f64 {
        match self {
            LossFamily::Gaussian => eta,
            LossFamily::Binomial => expit(eta),
        }
    }

    /// Reported per-observation loss at a mean-scale prediction: squared
    /// error (unhalved) or negative log-likelihood.
    pub fn report_loss(self, y: f64, pred: f64) -> f64 {
        match self {
            LossFamily::Gaussian => (y - pred) * (y - pred),
            LossFamily::Binomial => {
                let p = pred.clamp(1e-12, 1.0 - 1e-12);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
        }
    }

    /// Mean reported loss over a sample.
    pub fn mean_report_loss(self, y: &[f64], pred: &[f64]) -> f64 {
        assert_eq!(y.len(), pred.len());
        crate::util::kahan_sum(
            y.iter().zip(pred).map(|(&yi, &pi)| self.report_loss(yi, pi)),
        ) / y.len() as f64
    }
}

/// Solver tolerances. The defaults are the contract the rest of the crate
/// is tested against; loosen them only for exploratory fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop sweeping when the largest relative coefficient change in a full
    /// sweep falls below this.
    pub coef_tol: f64,
    /// Hard cap on coordinate-descent sweeps per fit.
    pub max_sweeps: usize,
    /// Target for the max KKT violation; sweeping continues while it is
    /// exceeded and the sweep budget remains.
    pub kkt_tol: f64,
    /// Floor for IRLS weights mu(1 - mu).
    pub weight_floor: f64,
    /// Cap on IRLS outer iterations for binomial fits.
    pub max_irls: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            coef_tol: 1e-7,
            max_sweeps: 10_000,
            kkt_tol: 1e-8,
            weight_floor: 1e-8,
            max_irls: 200,
        }
    }
}

/// A single penalized fit: coefficients plus the diagnostics that make it
/// auditable without refitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalFit {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub loss: LossFamily,
    /// Sectional variation norm of the fit: |intercept| + sum_j |beta_j|.
    /// The intercept is unpenalized in the optimization but counts toward
    /// the reported norm of the fitted function.
    pub l1_norm: f64,
    /// Mean reported loss on the training data (squared error unhalved).
    pub train_risk: f64,
    /// Largest KKT violation at return.
    pub kkt_residual: f64,
    /// Whether both the coefficient and KKT tolerances were met.
    pub converged: bool,
    /// Coordinate-descent sweeps spent (all IRLS rounds included).
    pub sweeps: usize,
    /// Indices of nonzero slopes, ascending.
    pub active: Vec<usize>,
}

impl HalFit {
    /// Slope l1-norm (the penalized part; excludes the intercept).
    pub fn slope_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }

    fn from_state(
        state: &FitState,
        columns: &[Column],
        y: &[f64],
        loss: LossFamily,
        lambda: f64,
        constraints: Option<&[SignConstraint2]>,
        opts: &SolverOptions,
        sweeps: usize,
        coef_converged: bool,
    ) -> HalFit {
        let eta = linear_predictor(columns, y.len(), state.intercept, &state.beta);
        let preds: Vec<f64> = eta.iter().map(|&e| loss.mean_from_eta(e)).collect();
        let kkt = kkt_residual_from_eta(columns, y, loss, constraints, &state.beta, &eta, lambda);
        HalFit {
            intercept: state.intercept,
            beta: state.beta.clone(),
            lambda,
            loss,
            l1_norm: sectional_variation_norm(state.intercept, &state.beta),
            train_risk: loss.mean_report_loss(y, &preds),
            kkt_residual: kkt,
            converged: coef_converged && kkt <= opts.kkt_tol,
            sweeps,
            active: state
                .beta
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0.0)
                .map(|(j, _)| j)
                .collect(),
        }
    }
}

/// A decreasing-lambda sequence of warm-started fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoPath {
    pub fits: Vec<HalFit>,
}

impl LassoPath {
    pub fn lambdas(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.lambda).collect()
    }

    /// Index of the path fit with the given lambda, if present.
    pub fn position(&self, lambda: f64) -> Option<usize> {
        self.fits.iter().position(|f| f.lambda == lambda)
    }
}

/// Grid controls for [`fit_path`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathOptions {
    /// Number of grid points when the grid is derived from lambda_max.
    pub grid_size: usize,
    /// Smallest lambda as a fraction of lambda_max.
    pub min_ratio: f64,
    /// Explicit grid (descending); overrides the derived grid when set.
    pub lambdas: Option<Vec<f64>>,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            grid_size: 30,
            min_ratio: 1e-3,
            lambdas: None,
        }
    }
}

// Internal compact constraint representation: None boxed away.
type SignConstraint2 = Option<SignConstraint>;

struct FitState {
    intercept: f64,
    beta: Vec<f64>,
}

/// Smallest lambda at which the null model (intercept only) is optimal:
/// the largest absolute working-loss gradient at the null fit.
pub fn lambda_max(columns: &[Column], y: &[f64], loss: LossFamily) -> Result<f64> {
    validate_inputs(columns, y, loss)?;
    let n = y.len();
    let ybar = mean(y);
    let null_resid: Vec<f64> = y.iter().map(|&yi| yi - ybar).collect();
    let mut lmax: f64 = 0.0;
    for col in columns {
        let g = dot_column(col, &null_resid) / n as f64;
        lmax = lmax.max(g.abs());
    }
    Ok(lmax)
}

/// Fit the penalized problem at a single lambda.
///
/// `constraints`, when given, must have one entry per column; constrained
/// coordinates are honored exactly (never cross zero). `warm_start` seeds
/// the coefficients, typically from a neighboring path fit.
pub fn fit_lasso(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    lambda: f64,
    constraints: Option<&[SignConstraint2]>,
    warm_start: Option<&HalFit>,
    opts: &SolverOptions,
) -> Result<HalFit> {
    validate_inputs(columns, y, loss)?;
    if let Some(c) = constraints {
        if c.len() != columns.len() {
            return Err(Error::invalid(format!(
                "{} sign constraints for {} columns",
                c.len(),
                columns.len()
            )));
        }
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut state = FitState {
        intercept: match (warm_start, loss) {
            (Some(w), _) => w.intercept,
            (None, LossFamily::Gaussian) => mean(y),
            (None, LossFamily::Binomial) => logit(mean(y).clamp(1e-12, 1.0 - 1e-12)),
        },
        beta: warm_start
            .map(|w| w.beta.clone())
            .unwrap_or_else(|| vec![0.0; columns.len()]),
    };
    if state.beta.len() != columns.len() {
        return Err(Error::invalid("warm start has wrong coefficient length"));
    }

    match loss {
        LossFamily::Gaussian => {
            let (sweeps, coef_ok) =
                fit_gaussian(columns, y, lambda, constraints, &mut state, opts)?;
            Ok(HalFit::from_state(
                &state, columns, y, loss, lambda, constraints, opts, sweeps, coef_ok,
            ))
        }
        LossFamily::Binomial => {
            let (sweeps, coef_ok) =
                fit_binomial(columns, y, lambda, constraints, &mut state, opts)?;
            Ok(HalFit::from_state(
                &state, columns, y, loss, lambda, constraints, opts, sweeps, coef_ok,
            ))
        }
    }
}

/// Fit a warm-started path on a descending lambda grid.
///
/// The derived grid is log-spaced from lambda_max down to
/// `lambda_max * min_ratio`, inclusive on both ends, so the first fit is
/// always the null model.
pub fn fit_path(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    path_opts: &PathOptions,
    opts: &SolverOptions,
) -> Result<LassoPath> {
    validate_inputs(columns, y, loss)?;
    let lambdas = match &path_opts.lambdas {
        Some(explicit) => {
            if explicit.is_empty() {
                return Err(Error::invalid("explicit lambda grid is empty"));
            }
            if explicit.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::invalid("explicit lambda grid must be strictly descending"));
            }
            explicit.clone()
        }
        None => {
            let lmax = lambda_max(columns, y, loss)?;
            if lmax <= f64::MIN_POSITIVE {
                // Degenerate outcome: the null model is optimal everywhere.
                vec![0.0]
            } else {
                derive_grid(lmax, path_opts.grid_size, path_opts.min_ratio)?
            }
        }
    };

    let mut fits: Vec<HalFit> = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let warm = fits.last();
        let fit = fit_lasso(columns, y, loss, lambda, None, warm, opts)?;
        fits.push(fit);
    }
    Ok(LassoPath { fits })
}

fn derive_grid(lmax: f64, grid_size: usize, min_ratio: f64) -> Result<Vec<f64>> {
    if grid_size == 0 {
        return Err(Error::invalid("grid_size must be at least 1"));
    }
    if !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::invalid("min_ratio must lie in (0, 1)"));
    }
    if grid_size == 1 {
        return Ok(vec![lmax]);
    }
    let log_max = lmax.ln();
    let log_min = (lmax * min_ratio).ln();
    Ok((0..grid_size)
        .map(|k| {
            let t = k as f64 / (grid_size - 1) as f64;
            (log_max + t * (log_min - log_max)).exp()
        })
        .collect())
}

/// How a requested l1 bound was resolved by [`constrained_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundStatus {
    /// Fitted norm matches the bound within the bisection tolerance.
    Matched,
    /// The bound exceeds the norm of the (effectively) unpenalized fit:
    /// the constraint is slack and the interior optimum is returned.
    Slack,
    /// The bound is below the null model's norm (|intercept| alone);
    /// the null model is returned.
    BelowNull,
}

/// Result of the penalized-to-constrained bridge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstrainedFit {
    pub fit: HalFit,
    pub status: BoundStatus,
}

/// Relative tolerance for matching the l1 bound by bisection on lambda.
pub const BOUND_MATCH_RTOL: f64 = 0.005;

/// Solve the constrained form `min P_n l subject to l1_norm <= bound` by
/// bisecting lambda in the penalized form until the fitted [`HalFit::l1_norm`]
/// matches the bound from below within 0.5%.
pub fn constrained_fit(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    l1_bound: f64,
    constraints: Option<&[SignConstraint2]>,
    opts: &SolverOptions,
) -> Result<ConstrainedFit> {
    validate_inputs(columns, y, loss)?;
    if !(l1_bound.is_finite() && l1_bound >= 0.0) && l1_bound != f64::INFINITY {
        return Err(Error::invalid(format!("l1 bound must be >= 0, got {l1_bound}")));
    }
    let lmax = lambda_max(columns, y, loss)?.max(f64::MIN_POSITIVE);
    let null = fit_lasso(columns, y, loss, lmax, constraints, None, opts)?;
    if l1_bound <= null.l1_norm || l1_bound == 0.0 {
        let status = if (null.l1_norm - l1_bound).abs() <= BOUND_MATCH_RTOL * l1_bound.max(1e-12) {
            BoundStatus::Matched
        } else {
            BoundStatus::BelowNull
        };
        return Ok(ConstrainedFit { fit: null, status });
    }

    // Effectively-unpenalized endpoint; if even this norm is below the
    // bound, the constraint never binds.
    let lambda_floor = lmax * 1e-8;
    let mut lo_fit = fit_lasso(columns, y, loss, lambda_floor, constraints, Some(&null), opts)?;
    if lo_fit.l1_norm <= l1_bound {
        return Ok(ConstrainedFit {
            fit: lo_fit,
            status: BoundStatus::Slack,
        });
    }

    // Bisect on log-lambda: norm decreases (weakly) in lambda.
    let mut hi = lmax; // norm(hi) = null norm < bound
    let mut lo = lambda_floor; // norm(lo) > bound
    let mut best_below = null.clone();
    for _ in 0..100 {
        let mid = (hi.ln() + lo.ln()).mul_add(0.5, 0.0).exp();
        let warm = if (mid / lo).ln().abs() < (hi / mid).ln().abs() {
            &lo_fit
        } else {
            &best_below
        };
        let fit = fit_lasso(columns, y, loss, mid, constraints, Some(warm), opts)?;
        if fit.l1_norm <= l1_bound {
            if (l1_bound - fit.l1_norm) <= BOUND_MATCH_RTOL * l1_bound {
                return Ok(ConstrainedFit {
                    fit,
                    status: BoundStatus::Matched,
                });
            }
            best_below = fit;
            hi = mid;
        } else {
            lo_fit = fit;
            lo = mid;
        }
        if (hi / lo).ln() < 1e-13 {
            break;
        }
    }
    // Norm is continuous in lambda, so the bracket collapsing without a
    // match means the remaining gap is float noise; return the best
    // from-below fit.
    Ok(ConstrainedFit {
        fit: best_below,
        status: BoundStatus::Matched,
    })
}

/// Penalized objective P_n l + lambda * ||slopes||_1 under the solver's
/// working-loss convention (gaussian loss halved).
pub fn penalized_objective(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    intercept: f64,
    beta: &[f64],
    lambda: f64,
) -> f64 {
    let eta = linear_predictor(columns, y.len(), intercept, beta);
    empirical_working_loss(y, &eta, loss) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Working-loss coefficient gradients `P_n d l / d beta_j` at the given
/// coefficients, plus the intercept gradient. Scores and diagnostics build
/// on this exact convention.
pub fn coefficient_gradients(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    intercept: f64,
    beta: &[f64],
) -> (f64, Vec<f64>) {
    let n = y.len();
    let eta = linear_predictor(columns, n, intercept, beta);
    let resid: Vec<f64> = y
        .iter()
        .zip(&eta)
        .map(|(&yi, &e)| yi - loss.mean_from_eta(e))
        .collect();
    gradients_from_residual(columns, &resid)
}

/// Max KKT violation of (intercept, beta) at the given lambda.
pub fn kkt_residual(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    constraints: Option<&[SignConstraint2]>,
    intercept: f64,
    beta: &[f64],
    lambda: f64,
) -> f64 {
    let eta = linear_predictor(columns, y.len(), intercept, beta);
    kkt_residual_from_eta(columns, y, loss, constraints, beta, &eta, lambda)
}

// ---------------------------------------------------------------------------
// internals
// ---------------------------------------------------------------------------

fn validate_inputs(columns: &[Column], y: &[f64], loss: LossFamily) -> Result<()> {
    let n = y.len();
    if n == 0 {
        return Err(Error::invalid("empty outcome"));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite outcome value {bad}")));
    }
    if loss == LossFamily::Binomial {
        if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!(
                "binomial loss needs a 0/1 outcome, found {bad}"
            )));
        }
        let ybar = mean(y);
        if ybar == 0.0 || ybar == 1.0 {
            return Err(Error::invalid("binomial outcome is constant"));
        }
    }
    for (j, col) in columns.iter().enumerate() {
        let max_idx = match col {
            Column::Indicator(idx) => idx.last().copied(),
            Column::Hinge(idx, _) => idx.last().copied(),
        };
        if let Some(m) = max_idx {
            if m as usize >= n {
                return Err(Error::invalid(format!(
                    "column {j} indexes row {m} but n = {n}"
                )));
            }
        }
    }
    Ok(())
}

fn linear_predictor(columns: &[Column], n: usize, intercept: f64, beta: &[f64]) -> Vec<f64> {
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
}

fn dot_column(col: &Column, xs: &[f64]) -> f64 {
    match col {
        Column::Indicator(idx) => idx.iter().map(|&i| xs[i as usize]).sum(),
        Column::Hinge(idx, vals) => idx
            .iter()
            .zip(vals)
            .map(|(&i, &v)| v * xs[i as usize])
            .sum(),
    }
}

fn gradients_from_residual(columns: &[Column], resid: &[f64]) -> (f64, Vec<f64>) {
    let n = resid.len() as f64;
    let g0 = -crate::util::kahan_sum(resid.iter().copied()) / n;
    let grads = columns
        .iter()
        .map(|col| -dot_column(col, resid) / n)
        .collect();
    (g0, grads)
}

fn kkt_residual_from_eta(
    columns: &[Column],
    y: &[f64],
    loss: LossFamily,
    constraints: Option<&[SignConstraint2]>,
    beta: &[f64],
    eta: &[f64],
    lambda: f64,
) -> f64 {
    let resid: Vec<f64> = y
        .iter()
        .zip(eta)
        .map(|(&yi, &e)| yi - loss.mean_from_eta(e))
        .collect();
    let (g0, grads) = gradients_from_residual(columns, &resid);
    let mut worst = g0.abs();
    for (j, (&g, &b)) in grads.iter().zip(beta).enumerate() {
        let c = constraints.and_then(|cs| cs[j]);
        let v = if b > 0.0 {
            (g + lambda).abs()
        } else if b < 0.0 {
            (g - lambda).abs()
        } else {
            match c {
                None => (g.abs() - lambda).max(0.0),
                Some(SignConstraint::Nonnegative) => (-(g + lambda)).max(0.0),
                Some(SignConstraint::Nonpositive) => (g - lambda).max(0.0),
            }
        };
        worst = worst.max(v);
    }
    worst
}

fn empirical_working_loss(y: &[f64], eta: &[f64], loss: LossFamily) -> f64 {
    let n = y.len() as f64;
    match loss {
        LossFamily::Gaussian => {
            crate::util::kahan_sum(y.iter().zip(eta).map(|(&yi, &e)| {
                let r = yi - e;
                0.5 * r * r
            })) / n
        }
        LossFamily::Binomial => {
            crate::util::kahan_sum(y.iter().zip(eta).map(|(&yi, &e)| {
                // -log-likelihood written to stay finite for |eta| large:
                // log(1 + exp(eta)) - y * eta.
                let log1p_exp = if e > 0.0 {
                    e + (-e).exp().ln_1p()
                } else {
                    e.exp().ln_1p()
                };
                log1p_exp - yi * e
            })) / n
        }
    }
}

/// One coordinate-descent pass over the given coordinate list on the
/// weighted least-squares problem with residual `r` (working response minus
/// current eta). Returns the largest relative coefficient change.
#[allow(clippy::too_many_arguments)]
fn cd_sweep(
    columns: &[Column],
    coords: &[usize],
    weights: Option<&[f64]>,
    col_wsq: &[f64],
    lambda: f64,
    constraints: Option<&[SignConstraint2]>,
    state: &mut FitState,
    r: &mut [f64],
    wsum: f64,
) -> f64 {
    let n = r.len() as f64;
    let mut max_rel: f64 = 0.0;

    // Unpenalized intercept first: keeps the mean residual centered so the
    // slope thresholds see clean partial correlations.
    let num0 = match weights {
        None => r.iter().sum::<f64>(),
        Some(w) => r.iter().zip(w).map(|(&ri, &wi)| ri * wi).sum::<f64>(),
    };
    let d0 = num0 / wsum;
    if d0 != 0.0 {
        state.intercept += d0;
        for ri in r.iter_mut() {
            *ri -= d0;
        }
        max_rel = max_rel.max(d0.abs() / (1.0 + state.intercept.abs()));
    }

    for &j in coords {
        let dj = col_wsq[j];
        if dj <= 0.0 {
            continue;
        }
        let b_old = state.beta[j];
        let g = match weights {
            None => dot_column(&columns[j], r) / n,
            Some(w) => weighted_dot_column(&columns[j], r, w) / n,
        };
        let z = dj * b_old + g;
        let b_new = match constraints.and_then(|cs| cs[j]) {
            None => {
                let s = z.abs() - lambda;
                if s <= 0.0 {
                    0.0
                } else {
                    z.signum() * s / dj
                }
            }
            Some(SignConstraint::Nonnegative) => ((z - lambda) / dj).max(0.0),
            Some(SignConstraint::Nonpositive) => ((z + lambda) / dj).min(0.0),
        };
        let delta = b_new - b_old;
        if delta != 0.0 {
            state.beta[j] = b_new;
            match &columns[j] {
                Column::Indicator(idx) => {
                    for &i in idx {
                        r[i as usize] -= delta;
                    }
                }
                Column::Hinge(idx, vals) => {
                    for (&i, &v) in idx.iter().zip(vals) {
                        r[i as usize] -= delta * v;
                    }
                }
            }
            max_rel = max_rel.max(delta.abs() / (1.0 + b_new.abs()));
        }
    }
    max_rel
}

fn weighted_dot_column(col: &Column, r: &[f64], w: &[f64]) -> f64 {
    match col {
        Column::Indicator(idx) => idx
            .iter()
            .map(|&i| {
                let i = i as usize;
                r[i] * w[i]
            })
            .sum(),
        Column::Hinge(idx, vals) => idx
            .iter()
            .zip(vals)
            .map(|(&i, &v)| {
                let i = i as usize;
                v * r[i] * w[i]
            })
            .sum(),
    }
}

fn column_wsq(columns: &[Column], weights: Option<&[f64]>, n: usize) -> Vec<f64> {
    let nf = n as f64;
    columns
        .iter()
        .map(|col| match (col, weights) {
            (Column::Indicator(idx), None) => idx.len() as f64 / nf,
            (Column::Indicator(idx), Some(w)) => {
                idx.iter().map(|&i| w[i as usize]).sum::<f64>() / nf
            }
            (Column::Hinge(_, vals), None) => vals.iter().map(|v| v * v).sum::<f64>() / nf,
            (Column::Hinge(idx, vals), Some(w)) => {
                idx.iter()
                    .zip(vals)
                    .map(|(&i, &v)| v * v * w[i as usize])
                    .sum::<f64>()
                    / nf
            }
        })
        .collect()
}

/// Run weighted coordinate descent to the coefficient tolerance using
/// active-set cycling: full sweeps discover violators, cheap active-set
/// sweeps polish. Returns (sweeps used, converged).
#[allow(clippy::too_many_arguments)]
fn cd_solve(
    columns: &[Column],
    weights: Option<&[f64]>,
    lambda: f64,
    constraints: Option<&[SignConstraint2]>,
    state: &mut FitState,
    r: &mut [f64],
    opts: &SolverOptions,
    sweep_budget: usize,
    check_objective: Option<(&[f64], LossFamily)>,
) -> Result<(usize, bool)> {
    let n = r.len();
    let p = columns.len();
    let col_wsq = column_wsq(columns, weights, n);
    let wsum = match weights {
        None => n as f64,
        Some(w) => w.iter().sum(),
    };
    if wsum <= 0.0 {
        return Err(Error::numeric("all IRLS weights vanished"));
    }
    let all: Vec<usize> = (0..p).collect();
    let mut sweeps = 0usize;
    let mut prev_obj = f64::INFINITY;

    loop {
        // Full sweep: may grow the active set.
        let rel_full = cd_sweep(
            columns, &all, weights, &col_wsq, lambda, constraints, state, r, wsum,
        );
        sweeps += 1;
        if let Some((y, loss)) = check_objective {
            // Exact-arithmetic coordinate descent is monotone; allow only
            // accumulation noise.
            let eta: Vec<f64> = y.iter().zip(r.iter()).map(|(&yi, &ri)| yi - ri).collect();
            let obj = empirical_working_loss(y, &eta, loss)
                + lambda * state.beta.iter().map(|b| b.abs()).sum::<f64>();
            if obj > prev_obj + 1e-9 * (1.0 + prev_obj.abs()) {
                return Err(Error::numeric(format!(
                    "coordinate descent objective rose from {prev_obj} to {obj}"
                )));
            }
            prev_obj = obj;
        }
        if rel_full < opts.coef_tol {
            return Ok((sweeps, true));
        }
        if sweeps >= sweep_budget {
            return Ok((sweeps, false));
        }

        // Polish the current active set.
        let active: Vec<usize> = (0..p).filter(|&j| state.beta[j] != 0.0).collect();
        loop {
            let rel = cd_sweep(
                columns, &active, weights, &col_wsq, lambda, constraints, state, r, wsum,
            );
            sweeps += 1;
            if rel < opts.coef_tol || sweeps >= sweep_budget {
                break;
            }
        }
        if sweeps >= sweep_budget {
            return Ok((sweeps, false));
        }
    }
}

fn fit_gaussian(
    columns: &[Column],
    y: &[f64],
    lambda: f64,
    constraints: Option<&[SignConstraint2]>,
    state: &mut FitState,
    opts: &SolverOptions,
) -> Result<(usize, bool)> {
    let n = y.len();
    let eta = linear_predictor(columns, n, state.intercept, &state.beta);
    let mut r: Vec<f64> = y.iter().zip(&eta).map(|(&yi, &e)| yi - e).collect();
    let mut sweeps_total = 0usize;
    let mut round_opts = *opts;

    // Convergence is judged on the exact-gradient KKT conditions. Rounds of
    // coordinate descent run to a coefficient tolerance that tightens
    // whenever a settled round still fails the KKT check, since near the
    // optimum the remaining violation scales with per-sweep movement.
    loop {
        let remaining = opts.max_sweeps.saturating_sub(sweeps_total);
        if remaining == 0 {
            break;
        }
        let round_budget = remaining.min(1_000);
        let (sweeps, settled) = cd_solve(
            columns,
            None,
            lambda,
            constraints,
            state,
            &mut r,
            &round_opts,
            round_budget,
            Some((y, LossFamily::Gaussian)),
        )?;
        sweeps_total += sweeps;
        let eta = linear_predictor(columns, n, state.intercept, &state.beta);
        let kkt = kkt_residual_from_eta(
            columns,
            y,
            LossFamily::Gaussian,
            constraints,
            &state.beta,
            &eta,
            lambda,
        );
        if kkt <= opts.kkt_tol {
            return Ok((sweeps_total, true));
        }
        if settled {
            if round_opts.coef_tol <= 1e-16 {
                break;
            }
            round_opts.coef_tol = (round_opts.coef_tol * 1e-2).max(1e-16);
        }
        // Re-derive the residual from exact predictions so incremental
        // drift never caps the attainable precision.
        r = y.iter().zip(&eta).map(|(&yi, &e)| yi - e).collect();
    }
    Ok((sweeps_total, false))
}

fn fit_binomial(
    columns: &[Column],
    y: &[f64],
    lambda: f64,
    constraints: Option<&[SignConstraint2]>,
    state: &mut FitState,
    opts: &SolverOptions,
) -> Result<(usize, bool)> {
    let n = y.len();
    let mut sweeps_total = 0usize;
    let mut eta = linear_predictor(columns, n, state.intercept, &state.beta);
    let objective = |eta: &[f64], beta: &[f64]| {
        empirical_working_loss(y, eta, LossFamily::Binomial)
            + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut obj_prev = objective(&eta, &state.beta);
    let mut round_opts = *opts;
    let mut stalled_outers = 0usize;
    // Reserve half the sweep budget for the proximal-gradient fallback so
    // a crawling relinearization cannot starve it.
    let irls_cap = (opts.max_sweeps / 2).max(1);

    for _outer in 0..opts.max_irls {
        // Quadratic surrogate at the current fit.
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let w: Vec<f64> = mu
            .iter()
            .map(|&m| (m * (1.0 - m)).max(opts.weight_floor))
            .collect();
        // Working residual of the response z = eta + (y - mu)/w:
        // r = z - eta = (y - mu)/w.
        let mut r: Vec<f64> = y
            .iter()
            .zip(&mu)
            .zip(&w)
            .map(|((&yi, &mi), &wi)| (yi - mi) / wi)
            .collect();

        let old_intercept = state.intercept;
        let old_beta = state.beta.clone();

        let remaining = irls_cap.saturating_sub(sweeps_total);
        if remaining == 0 {
            break;
        }
        // Inner solves need only modest precision: the relinearization is
        // the convergence driver and will be repeated anyway.
        let (sweeps, _) = cd_solve(
            columns,
            Some(&w),
            lambda,
            constraints,
            state,
            &mut r,
            &round_opts,
            remaining.min(200),
            None,
        )?;
        sweeps_total += sweeps;

        // Step-halving guard: the surrogate solution can overshoot the true
        // objective; back off toward the previous iterate until it does not
        // increase.
        eta = linear_predictor(columns, n, state.intercept, &state.beta);
        let mut obj = objective(&eta, &state.beta);
        let mut halvings = 0;
        while obj > obj_prev + 1e-12 * (1.0 + obj_prev.abs()) {
            halvings += 1;
            if halvings > 40 {
                return Err(Error::numeric(
                    "IRLS step could not restore a nonincreasing objective after 40 halvings",
                ));
            }
            state.intercept = 0.5 * (state.intercept + old_intercept);
            for (b, &ob) in state.beta.iter_mut().zip(&old_beta) {
                *b = 0.5 * (*b + ob);
            }
            eta = linear_predictor(columns, n, state.intercept, &state.beta);
            obj = objective(&eta, &state.beta);
        }
        if obj_prev - obj <= 1e-13 * (1.0 + obj.abs()) {
            stalled_outers += 1;
        } else {
            stalled_outers = 0;
        }

        let max_change = state
            .beta
            .iter()
            .zip(&old_beta)
            .map(|(&b, &ob)| (b - ob).abs() / (1.0 + b.abs()))
            .fold(
                (state.intercept - old_intercept).abs() / (1.0 + state.intercept.abs()),
                f64::max,
            );
        obj_prev = obj;

        // Convergence is judged on the true (not surrogate) gradients.
        let kkt = kkt_residual_from_eta(
            columns,
            y,
            LossFamily::Binomial,
            constraints,
            &state.beta,
            &eta,
            lambda,
        );
        if kkt <= opts.kkt_tol {
            return Ok((sweeps_total, true));
        }
        if max_change < round_opts.coef_tol && round_opts.coef_tol > 1e-12 {
            // Outer steps settled but exact-gradient KKT still fails:
            // ask a little more of the inner weighted solves. The floor
            // respects what float arithmetic can deliver on working
            // responses scaled by 1/w.
            round_opts.coef_tol = (round_opts.coef_tol * 1e-2).max(1e-12);
        }
        if stalled_outers >= 2 || sweeps_total >= irls_cap {
            break;
        }
    }

    // Relinearization can crawl when the fit nearly separates the classes
    // (weights collapse, the quadratic surrogate misjudges curvature).
    // Spend whatever budget is left on accelerated proximal-gradient steps
    // against the true objective, which converge unconditionally.
    let remaining = opts.max_sweeps.saturating_sub(sweeps_total);
    if remaining > 0 {
        let (passes, ok) = prox_polish_binomial(columns, y, lambda, constraints, state, opts, remaining);
        sweeps_total += passes;
        if ok {
            return Ok((sweeps_total, true));
        }
    }
    Ok((sweeps_total, false))
}

/// Accelerated proximal-gradient (FISTA with backtracking and objective
/// restarts) on the binomial penalized objective. Polishes a warm start to
/// the exact-gradient KKT tolerance; each O(nnz) pass counts against the
/// budget. Returns (passes used, KKT met).
fn prox_polish_binomial(
    columns: &[Column],
    y: &[f64],
    lambda: f64,
    constraints: Option<&[SignConstraint2]>,
    state: &mut FitState,
    opts: &SolverOptions,
    budget: usize,
) -> (usize, bool) {
    let n = y.len();
    let nf = n as f64;
    let mut passes = 0usize;

    let prox = |z: f64, step: f64, c: SignConstraint2| -> f64 {
        match c {
            None => {
                let s = z.abs() - step * lambda;
                if s <= 0.0 {
                    0.0
                } else {
                    z.signum() * s
                }
            }
            Some(SignConstraint::Nonnegative) => (z - step * lambda).max(0.0),
            Some(SignConstraint::Nonpositive) => (z + step * lambda).min(0.0),
        }
    };
    let penalty = |beta: &[f64]| lambda * beta.iter().map(|b| b.abs()).sum::<f64>();

    // Accepted point x, previous accepted point, and their linear
    // predictors; the momentum point's eta is a linear combination.
    let mut x0 = state.intercept;
    let mut xb = state.beta.clone();
    let mut eta_x = linear_predictor(columns, n, x0, &xb);
    passes += 1;
    let mut f_x = empirical_working_loss(y, &eta_x, LossFamily::Binomial);
    let mut obj_x = f_x + penalty(&xb);
    let mut prev0 = x0;
    let mut prevb = xb.clone();
    let mut eta_prev = eta_x.clone();
    let mut theta = 1.0f64;
    let mut mom = 0.0f64;
    let mut t = 1.0f64;
    let mut since_check = 0usize;

    while passes < budget {
        // Momentum point v and its gradient.
        let v0 = x0 + mom * (x0 - prev0);
        let vb: Vec<f64> = xb
            .iter()
            .zip(&prevb)
            .map(|(&a, &b)| a + mom * (a - b))
            .collect();
        let eta_v: Vec<f64> = eta_x
            .iter()
            .zip(&eta_prev)
            .map(|(&a, &b)| a + mom * (a - b))
            .collect();
        let resid_v: Vec<f64> = y
            .iter()
            .zip(&eta_v)
            .map(|(&yi, &e)| yi - expit(e))
            .collect();
        let f_v = empirical_working_loss(y, &eta_v, LossFamily::Binomial);
        let g0 = -crate::util::kahan_sum(resid_v.iter().copied()) / nf;
        let gb: Vec<f64> = columns.iter().map(|c| -dot_column(c, &resid_v) / nf).collect();
        passes += 1;

        // Backtracking on the majorization at v.
        let (mut n0, mut nb, mut eta_n, mut f_n);
        loop {
            n0 = v0 - t * g0;
            nb = vb
                .iter()
                .zip(&gb)
                .enumerate()
                .map(|(j, (&b, &g))| prox(b - t * g, t, constraints.and_then(|cs| cs[j])))
                .collect::<Vec<f64>>();
            eta_n = linear_predictor(columns, n, n0, &nb);
            f_n = empirical_working_loss(y, &eta_n, LossFamily::Binomial);
            passes += 1;
            let mut lin = (n0 - v0) * g0;
            let mut sq = (n0 - v0) * (n0 - v0);
            for ((&a, &b), &g) in nb.iter().zip(&vb).zip(&gb) {
                lin += (a - b) * g;
                sq += (a - b) * (a - b);
            }
            if f_n <= f_v + lin + sq / (2.0 * t) + 1e-15 || t < 1e-18 || passes >= budget {
                break;
            }
            t *= 0.5;
        }

        let obj_n = f_n + penalty(&nb);
        if obj_n > obj_x {
            // Restart momentum from the last accepted point.
            if mom == 0.0 {
                // Already unaccelerated and still not descending: the step
                // size safeguards are exhausted; stop honestly.
                if t < 1e-18 {
                    break;
                }
            }
            theta = 1.0;
            mom = 0.0;
            prev0 = x0;
            prevb.clone_from(&xb);
            eta_prev.clone_from(&eta_x);
            continue;
        }

        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        mom = (theta - 1.0) / theta_next;
        theta = theta_next;
        prev0 = x0;
        std::mem::swap(&mut prevb, &mut xb);
        std::mem::swap(&mut eta_prev, &mut eta_x);
        x0 = n0;
        xb = nb;
        eta_x = eta_n;
        f_x = f_n;
        let _ = f_x;
        obj_x = obj_n;

        since_check += 1;
        if since_check >= 8 || passes >= budget {
            since_check = 0;
            let kkt = kkt_residual_from_eta(
                columns,
                y,
                LossFamily::Binomial,
                constraints,
                &xb,
                &eta_x,
                lambda,
            );
            passes += 1;
            if kkt <= opts.kkt_tol {
                state.intercept = x0;
                state.beta = xb;
                return (passes, true);
            }
        }
    }

    // Keep the polish result if it improved the objective.
    let eta_state = linear_predictor(columns, n, state.intercept, &state.beta);
    let obj_state =
        empirical_working_loss(y, &eta_state, LossFamily::Binomial) + penalty(&state.beta);
    if obj_x < obj_state {
        state.intercept = x0;
        state.beta = xb;
    }
    let eta_final = linear_predictor(columns, n, state.intercept, &state.beta);
    let kkt = kkt_residual_from_eta(
        columns,
        y,
        LossFamily::Binomial,
        constraints,
        &state.beta,
        &eta_final,
        lambda,
    );
    (passes, kkt <= opts.kkt_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{enumerate_basis, BasisSpec, KnotStrategy};
    use rand::Rng;

    fn toy_columns() -> (Vec<Column>, Vec<f64>) {
        // Deterministic pseudo-data: two covariates, 40 rows.
        let mut rng = crate::sim::rng_for(11, 0);
        let n = 40;
        let x0: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let x1: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = x0
            .iter()
            .zip(&x1)
            .map(|(&a, &b)| {
                let step = if a >= 0.5 { 1.0 } else { 0.0 };
                step + 0.5 * b + 0.3 * (rng.gen::<f64>() - 0.5)
            })
            .collect();
        let design = vec![x0.as_slice(), x1.as_slice()];
        let cat = enumerate_basis(&design, &BasisSpec::zero_order(2, KnotStrategy::AllObservations))
            .unwrap();
        (cat.columns().to_vec(), y)
    }

    #[test]
    fn single_standardized_column_matches_soft_threshold_closed_form() {
        // Hand-built column with mean 0 and P_n(x^2) = 1, y centered: the
        // optimum is soft(P_n(x y), lambda) / P_n(x^2) with zero intercept.
        let n = 8usize;
        let raw = [1.5, -0.5, 0.25, -1.25, 0.75, -0.75, 1.0, -1.0];
        let m = mean(&raw);
        let centered: Vec<f64> = raw.iter().map(|v| v - m).collect();
        let scale = (centered.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let x: Vec<f64> = centered.iter().map(|v| v / scale).collect();
        let y_raw = [2.0, -1.0, 0.5, -2.5, 1.0, -1.5, 2.0, -2.0];
        let ybar = mean(&y_raw);
        let y: Vec<f64> = y_raw.iter().map(|v| v - ybar).collect();

        let col = Column::Hinge((0..n as u32).collect(), x.clone());
        let pn_xy = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let tight = SolverOptions {
            kkt_tol: 1e-13,
            ..SolverOptions::default()
        };
        for lambda in [0.05, 0.5 * pn_xy.abs(), 2.0 * pn_xy.abs()] {
            let fit = fit_lasso(
                &[col.clone()],
                &y,
                LossFamily::Gaussian,
                lambda,
                None,
                None,
                &tight,
            )
            .unwrap();
            let expect = {
                let s = pn_xy.abs() - lambda;
                if s <= 0.0 {
                    0.0
                } else {
                    pn_xy.signum() * s
                }
            };
            assert!(
                (fit.beta[0] - expect).abs() < 1e-9,
                "lambda={lambda}: got {}, want {expect}",
                fit.beta[0]
            );
            assert!(fit.intercept.abs() < 1e-9);
            assert!(fit.kkt_residual <= 1e-7);
        }
    }

    #[test]
    fn binary_column_matches_centered_closed_form() {
        // One indicator column with unpenalized intercept: profiling the
        // intercept out gives beta = soft(P_n(xc * y), lambda) / P_n(xc^2)
        // with xc the centered column.
        let y = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let col = Column::Indicator(vec![0, 2, 4, 5]);
        let n = 6.0;
        let xbar = 4.0 / n;
        let xc: Vec<f64> = (0..6)
            .map(|i| col.value_at(i as u32) - xbar)
            .collect();
        let ybar = mean(&y);
        let num = xc.iter().zip(&y).map(|(a, b)| a * (b - ybar)).sum::<f64>() / n;
        let den = xc.iter().map(|a| a * a).sum::<f64>() / n;
        let lambda = 0.1;
        let expect = {
            let s = num.abs() - lambda;
            if s <= 0.0 {
                0.0
            } else {
                num.signum() * s / den
            }
        };
        let fit = fit_lasso(
            &[col],
            &y,
            LossFamily::Gaussian,
            lambda,
            None,
            None,
            &SolverOptions {
                kkt_tol: 1e-13,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        assert!((fit.beta[0] - expect).abs() < 1e-9, "{} vs {expect}", fit.beta[0]);
        assert!(fit.kkt_residual <= 1e-7);
    }

    #[test]
    fn lambda_max_yields_null_model_with_mean_intercept() {
        let (cols, y) = toy_columns();
        let lmax = lambda_max(&cols, &y, LossFamily::Gaussian).unwrap();
        let fit = fit_lasso(
            &cols,
            &y,
            LossFamily::Gaussian,
            lmax,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        assert!((fit.intercept - mean(&y)).abs() < 1e-10);
        // Just below lambda_max, something activates.
        let fit2 = fit_lasso(
            &cols,
            &y,
            LossFamily::Gaussian,
            lmax * 0.99,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit2.active.len() >= 1);
    }

    #[test]
    fn path_risk_and_norm_move_monotonically() {
        let (cols, y) = toy_columns();
        let path = fit_path(
            &cols,
            &y,
            LossFamily::Gaussian,
            &PathOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(path.fits.len(), 30);
        for pair in path.fits.windows(2) {
            assert!(pair[1].lambda < pair[0].lambda);
            assert!(
                pair[1].train_risk <= pair[0].train_risk + 1e-10,
                "training risk must not rise as lambda falls"
            );
            assert!(
                pair[1].l1_norm >= pair[0].l1_norm - 1e-8,
                "l1 norm must not shrink as lambda falls: {} -> {}",
                pair[0].l1_norm,
                pair[1].l1_norm
            );
        }
        for fit in &path.fits {
            assert!(fit.converged, "lambda={} kkt={}", fit.lambda, fit.kkt_residual);
            assert!(fit.kkt_residual <= 1e-6);
        }
    }

    #[test]
    fn binomial_fit_satisfies_true_gradient_kkt() {
        let (cols, y_cont) = toy_columns();
        let y: Vec<f64> = y_cont.iter().map(|&v| if v > 0.8 { 1.0 } else { 0.0 }).collect();
        let path = fit_path(
            &cols,
            &y,
            LossFamily::Binomial,
            &PathOptions {
                grid_size: 12,
                ..PathOptions::default()
            },
            &SolverOptions::default(),
        )
        .unwrap();
        for fit in &path.fits {
            assert!(fit.converged, "lambda={}", fit.lambda);
            let kkt = kkt_residual(
                &cols,
                &y,
                LossFamily::Binomial,
                None,
                fit.intercept,
                &fit.beta,
                fit.lambda,
            );
            assert!(kkt <= 1e-6, "lambda={} kkt={kkt}", fit.lambda);
        }
    }

    #[test]
    fn sign_constraints_are_honored_exactly() {
        let (cols, y) = toy_columns();
        // Flip the outcome so unconstrained fits want negative slopes, then
        // force nonnegativity everywhere.
        let y_neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let constraints: Vec<Option<SignConstraint>> =
            vec![Some(SignConstraint::Nonnegative); cols.len()];
        let lmax = lambda_max(&cols, &y_neg, LossFamily::Gaussian).unwrap();
        let fit = fit_lasso(
            &cols,
            &y_neg,
            LossFamily::Gaussian,
            lmax * 0.05,
            Some(&constraints),
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.beta.iter().all(|&b| b >= 0.0));
        assert!(fit.kkt_residual <= 1e-7, "kkt={}", fit.kkt_residual);

        let nonpos: Vec<Option<SignConstraint>> =
            vec![Some(SignConstraint::Nonpositive); cols.len()];
        let fit2 = fit_lasso(
            &cols,
            &y_neg,
            LossFamily::Gaussian,
            lmax * 0.05,
            Some(&nonpos),
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit2.beta.iter().all(|&b| b <= 0.0));
        assert!(fit2.active.len() >= 1, "negative slopes should activate");
    }

    #[test]
    fn constrained_fit_recovers_a_path_fit_by_norm() {
        let (cols, y) = toy_columns();
        let path = fit_path(
            &cols,
            &y,
            LossFamily::Gaussian,
            &PathOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        let target = &path.fits[17];
        let res = constrained_fit(
            &cols,
            &y,
            LossFamily::Gaussian,
            target.l1_norm,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, BoundStatus::Matched);
        assert!(
            (res.fit.l1_norm - target.l1_norm).abs() <= BOUND_MATCH_RTOL * target.l1_norm,
            "norm {} vs bound {}",
            res.fit.l1_norm,
            target.l1_norm
        );
        // Duality: equal norms means equal penalized objectives.
        let obj_target = penalized_objective(
            &cols,
            &y,
            LossFamily::Gaussian,
            target.intercept,
            &target.beta,
            res.fit.lambda,
        );
        let obj_res = penalized_objective(
            &cols,
            &y,
            LossFamily::Gaussian,
            res.fit.intercept,
            &res.fit.beta,
            res.fit.lambda,
        );
        assert!((obj_target - obj_res).abs() < 1e-6, "{obj_target} vs {obj_res}");
    }

    #[test]
    fn constrained_fit_edge_bounds() {
        let (cols, y) = toy_columns();
        // Zero bound: the null model (intercept only).
        let null = constrained_fit(&cols, &y, LossFamily::Gaussian, 0.0, None, &SolverOptions::default())
            .unwrap();
        assert_eq!(null.status, BoundStatus::BelowNull);
        assert!(null.fit.beta.iter().all(|&b| b == 0.0));
        // Huge bound: constraint is slack.
        let slack = constrained_fit(
            &cols,
            &y,
            LossFamily::Gaussian,
            1e6,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(slack.status, BoundStatus::Slack);
    }

    #[test]
    fn binomial_rejects_bad_outcomes() {
        let cols = vec![Column::Indicator(vec![0, 1])];
        let err = fit_lasso(
            &cols,
            &[0.0, 0.5, 1.0],
            LossFamily::Binomial,
            0.1,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        let err2 = fit_lasso(
            &cols,
            &[1.0, 1.0, 1.0],
            LossFamily::Binomial,
            0.1,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err2, Error::Invalid(_)));
    }

    #[test]
    fn constant_outcome_gives_degenerate_null_path() {
        let cols = vec![Column::Indicator(vec![0, 2])];
        let y = [2.5, 2.5, 2.5, 2.5];
        let path = fit_path(
            &cols,
            &y,
            LossFamily::Gaussian,
            &PathOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(path.fits.len(), 1);
        assert!(path.fits[0].beta.iter().all(|&b| b == 0.0));
        assert!((path.fits[0].intercept - 2.5).abs() < 1e-12);
    }

    #[test]
    fn warm_start_reaches_the_same_optimum() {
        let (cols, y) = toy_columns();
        let lmax = lambda_max(&cols, &y, LossFamily::Gaussian).unwrap();
        let cold = fit_lasso(
            &cols,
            &y,
            LossFamily::Gaussian,
            lmax * 0.1,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        let near = fit_lasso(
            &cols,
            &y,
            LossFamily::Gaussian,
            lmax * 0.12,
            None,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        let warm = fit_lasso(
            &cols,
            &y,
            LossFamily::Gaussian,
            lmax * 0.1,
            None,
            Some(&near),
            &SolverOptions::default(),
        )
        .unwrap();
        let obj_cold =
            penalized_objective(&cols, &y, LossFamily::Gaussian, cold.intercept, &cold.beta, lmax * 0.1);
        let obj_warm =
            penalized_objective(&cols, &y, LossFamily::Gaussian, warm.intercept, &warm.beta, lmax * 0.1);
        assert!((obj_cold - obj_warm).abs() < 1e-8);
    }
}
