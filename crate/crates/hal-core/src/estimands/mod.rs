//! Inference for treatment means on top of fitted outcome and propensity
//! models: the canonical gradient of the treatment-specific mean, plug-in
//! and inverse-probability-weighted estimators, TMLE updates (plain and
//! score-preserving), a collaborative propensity ladder, and the exact
//! second-order remainder for simulation audits.
//!
//! Conventions shared by every estimator here:
//!
//! * The outcome regression works on a unit scale: binary outcomes as-is,
//!   continuous outcomes min-max rescaled to [0, 1] so the targeting step
//!   can fluctuate on the logit scale. Point estimates and intervals are
//!   reported back on the raw outcome scale.
//! * Propensities are truncated into `[g_lo, g_hi]` before entering any
//!   weight; the number of affected rows is reported.
//! * A [`TargetReport`] always carries the full vector of influence-curve
//!   values, so `se`, the CI, and the `|P_n D*|` diagnostic can be audited
//!   from the report alone.

mod ctmle;
mod ortho;
mod tmle;

pub use ctmle::{ctmle_select, CtmleOptions, CtmleStep, CtmleTrace};
pub use ortho::{orthogonalized_tmle_arm, orthogonalized_tmle_update, OrthoOutcome, OrthoTmleOptions};
pub use tmle::{battery_preservation, tmle_update_arm, tmle_update_tsm, TmleOptions, TmleOutcome};

use serde::{Deserialize, Serialize};

use crate::basis::{evaluate_basis, BasisCatalog};
use crate::data::Dataset;
use crate::solver::{HalFit, LossFamily};
use crate::util::{expit, mean, variance};
use crate::{Error, Result};

/// Two-sided 95% normal quantile used for Wald intervals.
const Z_975: f64 = 1.959963984540054;

/// Unit-scale predictions are clamped into `[PREDICTION_CLAMP, 1 - PREDICTION_CLAMP]`
/// so logits stay finite and fluctuation weights stay bounded.
pub const PREDICTION_CLAMP: f64 = 1e-4;

/// Default propensity truncation bounds.
pub const DEFAULT_TRUNCATION: (f64, f64) = (0.01, 0.99);

/// Treatment arm of a counterfactual mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Treated,
    Control,
}

impl Arm {
    /// Treatment value defining the arm.
    pub fn level(self) -> f64 {
        match self {
            Arm::Treated => 1.0,
            Arm::Control => 0.0,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Arm::Treated => "treated",
            Arm::Control => "control",
        }
    }
}

/// How raw outcomes map to the unit interval used by the logistic
/// fluctuation, and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutcomeScale {
    /// Binary outcome; the unit scale is the raw scale.
    Binary,
    /// Continuous outcome min-max rescaled to [0, 1].
    Rescaled { y_min: f64, y_max: f64 },
}

impl OutcomeScale {
    /// Scale implied by the loss family of the outcome fit: binomial fits
    /// keep the raw 0/1 scale, gaussian fits are min-max rescaled.
    pub fn for_fit(loss: LossFamily, y: &[f64]) -> Result<OutcomeScale> {
        match loss {
            LossFamily::Binomial => {
                if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid(format!(
                        "binomial outcome model needs 0/1 outcomes; found {} at row {}",
                        y[i],
                        i + 1
                    )));
                }
                Ok(OutcomeScale::Binary)
            }
            LossFamily::Gaussian => {
                let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
                let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(y_max > y_min) {
                    return Err(Error::invalid(
                        "constant outcome cannot be min-max rescaled for targeting",
                    ));
                }
                Ok(OutcomeScale::Rescaled { y_min, y_max })
            }
        }
    }

    /// Raw outcome -> unit scale.
    pub fn to_unit(&self, y: f64) -> f64 {
        match *self {
            OutcomeScale::Binary => y,
            OutcomeScale::Rescaled { y_min, y_max } => (y - y_min) / (y_max - y_min),
        }
    }

    /// Unit scale -> raw outcome.
    pub fn from_unit(&self, p: f64) -> f64 {
        match *self {
            OutcomeScale::Binary => p,
            OutcomeScale::Rescaled { y_min, y_max } => y_min + (y_max - y_min) * p,
        }
    }

    /// Width of the raw scale (1 for binary outcomes).
    pub fn range(&self) -> f64 {
        match *self {
            OutcomeScale::Binary => 1.0,
            OutcomeScale::Rescaled { y_min, y_max } => y_max - y_min,
        }
    }
}

/// A fitted outcome regression Q̄(A, W) over the joint (treatment,
/// covariates) design, with the scale information needed to report on the
/// raw outcome scale.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    catalog: BasisCatalog,
    fit: HalFit,
    scale: OutcomeScale,
    design_dim: usize,
}

impl OutcomeModel {
    /// Wrap a fit over the dataset's outcome design (treatment first, then
    /// covariates). The dataset must carry a treatment column, and the
    /// outcome scale is derived from the fit's loss family.
    pub fn from_fit(catalog: BasisCatalog, fit: HalFit, ds: &Dataset) -> Result<OutcomeModel> {
        if ds.treatment().is_none() {
            return Err(Error::invalid(
                "outcome model for a treatment mean needs a treatment column in the design",
            ));
        }
        if fit.beta.len() != catalog.p() {
            return Err(Error::invalid(format!(
                "fit has {} coefficients but the catalog has {} columns",
                fit.beta.len(),
                catalog.p()
            )));
        }
        let scale = OutcomeScale::for_fit(fit.loss, ds.outcome())?;
        Ok(OutcomeModel {
            catalog,
            fit,
            scale,
            design_dim: ds.d() + 1,
        })
    }

    pub fn fit(&self) -> &HalFit {
        &self.fit
    }

    pub fn catalog(&self) -> &BasisCatalog {
        &self.catalog
    }

    pub fn scale(&self) -> &OutcomeScale {
        &self.scale
    }

    fn check_design(&self, ds: &Dataset) -> Result<()> {
        if ds.treatment().is_none() {
            return Err(Error::invalid("dataset has no treatment column"));
        }
        if ds.d() + 1 != self.design_dim {
            return Err(Error::invalid(format!(
                "outcome model was fitted on {} design columns, dataset provides {}",
                self.design_dim,
                ds.d() + 1
            )));
        }
        Ok(())
    }

    /// Linear predictor at a joint design point `x = [a, w_1, .., w_d]`,
    /// summed over the active set only.
    fn eta_at(&self, x: &[f64]) -> f64 {
        let funcs = self.catalog.functions();
        let mut eta = self.fit.intercept;
        for &j in &self.fit.active {
            eta += self.fit.beta[j] * evaluate_basis(&funcs[j], x);
        }
        eta
    }

    fn unit_from_eta(&self, eta: f64) -> f64 {
        let p = match self.scale {
            OutcomeScale::Binary => expit(eta),
            OutcomeScale::Rescaled { .. } => self.scale.to_unit(eta),
        };
        p.clamp(PREDICTION_CLAMP, 1.0 - PREDICTION_CLAMP)
    }

    /// Unit-scale prediction at one joint design point.
    pub fn predict_unit(&self, x: &[f64]) -> f64 {
        self.unit_from_eta(self.eta_at(x))
    }

    /// Unit-scale Q̄(A_i, W_i) at the observed treatments.
    pub fn qbar_obs(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.check_design(ds)?;
        let a = ds.treatment().expect("checked");
        let mut x = vec![0.0f64; self.design_dim];
        let mut out = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            x[0] = a[i];
            for j in 0..ds.d() {
                x[j + 1] = ds.covariate(j)[i];
            }
            out.push(self.unit_from_eta(self.eta_at(&x)));
        }
        Ok(out)
    }

    /// Unit-scale Q̄(a, W_i) with treatment pinned at the arm's level.
    pub fn qbar_arm(&self, ds: &Dataset, arm: Arm) -> Result<Vec<f64>> {
        self.check_design(ds)?;
        let mut x = vec![0.0f64; self.design_dim];
        x[0] = arm.level();
        let mut out = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            for j in 0..ds.d() {
                x[j + 1] = ds.covariate(j)[i];
            }
            out.push(self.unit_from_eta(self.eta_at(&x)));
        }
        Ok(out)
    }
}

/// Where a propensity model's values came from.
#[derive(Debug, Clone)]
pub enum PropensitySource {
    /// Values supplied directly (known design or simulation truth).
    Known,
    /// HAL fit over the covariate design, kept for prediction and audit.
    Hal { catalog: BasisCatalog, fit: HalFit },
}

/// Fitted (or known) treatment mechanism Ḡ(W) = E(A | W) with truncation
/// bounds. Weights always use the truncated values.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    values: Vec<f64>,
    g_lo: f64,
    g_hi: f64,
    label: String,
    source: PropensitySource,
}

impl PropensityModel {
    fn validate(values: &[f64], g_lo: f64, g_hi: f64) -> Result<()> {
        if values.is_empty() {
            return Err(Error::invalid("propensity model has no rows"));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::invalid(format!(
                "propensity value {} at row {} is outside [0, 1]",
                values[i],
                i + 1
            )));
        }
        // The upper bound may sit at 1.0 (no upper truncation); control-arm
        // weighting separately requires it below 1.
        if !(g_lo > 0.0 && g_lo <= g_hi && g_hi <= 1.0) {
            return Err(Error::invalid(format!(
                "truncation bounds [{g_lo}, {g_hi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }

    /// Propensity model from externally supplied values.
    pub fn known(
        values: Vec<f64>,
        bounds: (f64, f64),
        label: impl Into<String>,
    ) -> Result<PropensityModel> {
        Self::validate(&values, bounds.0, bounds.1)?;
        Ok(PropensityModel {
            values,
            g_lo: bounds.0,
            g_hi: bounds.1,
            label: label.into(),
            source: PropensitySource::Known,
        })
    }

    /// Propensity model from a binomial HAL fit over the covariate design;
    /// values are the fit's own training-row predictions.
    pub fn from_hal(
        catalog: BasisCatalog,
        fit: HalFit,
        bounds: (f64, f64),
        label: impl Into<String>,
    ) -> Result<PropensityModel> {
        if fit.loss != LossFamily::Binomial {
            return Err(Error::invalid("propensity fits must use the binomial loss"));
        }
        if fit.beta.len() != catalog.p() {
            return Err(Error::invalid(format!(
                "fit has {} coefficients but the catalog has {} columns",
                fit.beta.len(),
                catalog.p()
            )));
        }
        let values: Vec<f64> = catalog
            .linear_predictor(fit.intercept, &fit.beta)
            .into_iter()
            .map(expit)
            .collect();
        Self::validate(&values, bounds.0, bounds.1)?;
        Ok(PropensityModel {
            values,
            g_lo: bounds.0,
            g_hi: bounds.1,
            label: label.into(),
            source: PropensitySource::Hal { catalog, fit },
        })
    }

    /// Same values under different truncation bounds (a ladder variant).
    pub fn with_bounds(&self, bounds: (f64, f64), label: impl Into<String>) -> Result<PropensityModel> {
        Self::validate(&self.values, bounds.0, bounds.1)?;
        Ok(PropensityModel {
            values: self.values.clone(),
            g_lo: bounds.0,
            g_hi: bounds.1,
            label: label.into(),
            source: self.source.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Untruncated value at a row.
    pub fn raw(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Truncated value at a row; this is what every weight uses.
    pub fn truncated(&self, i: usize) -> f64 {
        self.values[i].clamp(self.g_lo, self.g_hi)
    }

    pub fn truncated_values(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.truncated(i)).collect()
    }

    /// Rows whose raw value falls outside the truncation bounds.
    pub fn truncation_hits(&self) -> usize {
        self.values
            .iter()
            .filter(|&&v| v < self.g_lo || v > self.g_hi)
            .count()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.g_lo, self.g_hi)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn source(&self) -> &PropensitySource {
        &self.source
    }

    /// Untruncated prediction at new covariates, when the model carries a
    /// fit to predict with.
    pub fn predict_at(&self, w: &[f64]) -> Option<f64> {
        match &self.source {
            PropensitySource::Known => None,
            PropensitySource::Hal { catalog, fit } => {
                let funcs = catalog.functions();
                let mut eta = fit.intercept;
                for &j in &fit.active {
                    eta += fit.beta[j] * evaluate_basis(&funcs[j], w);
                }
                Some(expit(eta))
            }
        }
    }
}

/// What a [`TargetReport`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimandKind {
    TreatedMean,
    ControlMean,
    Ate,
}

/// Distribution of the inverse-probability weights actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    /// Rows at the targeted arm (nonzero weight).
    pub n_weighted: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Estimator-level diagnostics carried by every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetDiagnostics {
    /// |P_n D*| at the reported state; equals |mean(ic_values)|.
    pub pn_dstar_abs: f64,
    /// Accepted fluctuation steps (0 for untargeted estimators).
    pub tmle_steps: usize,
    /// Mean log-likelihood gain of the targeting step (0 when untargeted).
    pub loglik_gain: f64,
    /// Rows whose propensity was moved by truncation.
    pub truncation_hits: usize,
    /// Score-equation tolerance the update aimed for, when one applied.
    pub tol: Option<f64>,
    /// Whether |P_n D*| <= tol at return (true when no tol applied).
    pub tol_met: bool,
    /// Any condition that makes the report unreliable (tolerance unmet,
    /// ridge fallback, ...). Details go to `notes`.
    pub flagged: bool,
    pub notes: Vec<String>,
    /// Weight distribution, for weighted estimators.
    pub weights: Option<WeightSummary>,
    /// Post-update max |path score| over the preserved battery, when the
    /// update tracks score preservation.
    pub battery_max_abs: Option<f64>,
    /// |P_n D̃*| of the orthogonalized gradient, when one is defined.
    pub orthogonal_score_abs: Option<f64>,
    /// (treated, control) means behind an ATE report.
    pub arm_estimates: Option<(f64, f64)>,
}

impl Default for TargetDiagnostics {
    fn default() -> Self {
        TargetDiagnostics {
            pn_dstar_abs: 0.0,
            tmle_steps: 0,
            loglik_gain: 0.0,
            truncation_hits: 0,
            tol: None,
            tol_met: true,
            flagged: false,
            notes: Vec::new(),
            weights: None,
            battery_max_abs: None,
            orthogonal_score_abs: None,
            arm_estimates: None,
        }
    }
}

/// A point estimate with its influence-curve-based uncertainty and the
/// diagnostics needed to audit it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetReport {
    pub estimand: EstimandKind,
    pub psi_hat: f64,
    /// Influence-curve standard error: sqrt(var(ic) / n), population
    /// variance convention.
    pub se: f64,
    /// 95% Wald interval.
    pub ci: (f64, f64),
    /// Influence-curve value per observation.
    pub ic_values: Vec<f64>,
    pub diagnostics: TargetDiagnostics,
}

impl TargetReport {
    pub(crate) fn from_parts(
        estimand: EstimandKind,
        psi_hat: f64,
        ic_values: Vec<f64>,
        mut diagnostics: TargetDiagnostics,
    ) -> TargetReport {
        let n = ic_values.len() as f64;
        diagnostics.pn_dstar_abs = mean(&ic_values).abs();
        let se = (variance(&ic_values) / n).sqrt();
        TargetReport {
            estimand,
            psi_hat,
            se,
            ci: (psi_hat - Z_975 * se, psi_hat + Z_975 * se),
            ic_values,
            diagnostics,
        }
    }

    /// Internal consistency: the |P_n D*| diagnostic is the mean of the
    /// stored influence-curve values, the se is nonnegative and finite, and
    /// the interval is ordered around the estimate.
    pub fn verify(&self) -> Result<()> {
        if !self.psi_hat.is_finite() {
            return Err(Error::numeric("estimate is not finite"));
        }
        let pn = mean(&self.ic_values);
        if (pn.abs() - self.diagnostics.pn_dstar_abs).abs() > 1e-12 {
            return Err(Error::numeric(format!(
                "|P_n D*| diagnostic {} does not match mean(ic) {}",
                self.diagnostics.pn_dstar_abs,
                pn.abs()
            )));
        }
        if !(self.se >= 0.0 && self.se.is_finite()) {
            return Err(Error::numeric(format!("bad standard error {}", self.se)));
        }
        if !(self.ci.0 <= self.psi_hat && self.psi_hat <= self.ci.1) {
            return Err(Error::numeric("confidence interval does not cover the estimate"));
        }
        Ok(())
    }
}

/// Canonical gradient (efficient influence curve) of the treated mean
/// E[Y_1] at one observation:
/// `D*(O) = 1{A=1}/Ḡ(W) (Y - Q̄(1,W)) + Q̄(1,W) - ψ`.
pub fn canonical_gradient_tsm(a: f64, y: f64, qbar1: f64, gbar: f64, psi: f64) -> Result<f64> {
    if !(gbar > 0.0 && gbar < 1.0) {
        return Err(Error::invalid(format!(
            "propensity {gbar} outside (0, 1); truncate before weighting"
        )));
    }
    let residual = if a == 1.0 { (y - qbar1) / gbar } else { 0.0 };
    Ok(residual + qbar1 - psi)
}

/// Arm-generic gradient with the truncated denominator supplied directly.
pub(crate) fn gradient_arm(arm: Arm, a: f64, y: f64, qbar_a: f64, denom: f64, psi: f64) -> f64 {
    let residual = if a == arm.level() {
        (y - qbar_a) / denom
    } else {
        0.0
    };
    residual + qbar_a - psi
}

/// Truncated weight denominators for an arm: Ḡ for the treated arm,
/// 1 - Ḡ for the control arm. Errors when the bounds cannot keep the
/// denominator positive.
pub(crate) fn arm_denominators(arm: Arm, g: &PropensityModel) -> Result<Vec<f64>> {
    if arm == Arm::Control && g.bounds().1 >= 1.0 {
        return Err(Error::invalid(
            "control-arm weights need an upper truncation bound below 1",
        ));
    }
    Ok((0..g.n())
        .map(|i| match arm {
            Arm::Treated => g.truncated(i),
            Arm::Control => 1.0 - g.truncated(i),
        })
        .collect())
}

/// Raw-scale arm mean and influence-curve values at given unit-scale
/// counterfactual predictions.
pub(crate) fn arm_estimate(
    scale: &OutcomeScale,
    arm: Arm,
    a: &[f64],
    y_raw: &[f64],
    qbar_arm_unit: &[f64],
    g: &PropensityModel,
) -> Result<(f64, Vec<f64>)> {
    let denom = arm_denominators(arm, g)?;
    let qa_raw: Vec<f64> = qbar_arm_unit.iter().map(|&p| scale.from_unit(p)).collect();
    let psi = mean(&qa_raw);
    let ic: Vec<f64> = (0..y_raw.len())
        .map(|i| gradient_arm(arm, a[i], y_raw[i], qa_raw[i], denom[i], psi))
        .collect();
    Ok((psi, ic))
}

fn common_inputs<'d>(
    g: &PropensityModel,
    ds: &'d Dataset,
) -> Result<(&'d [f64], &'d [f64])> {
    let a = ds
        .treatment()
        .ok_or_else(|| Error::invalid("dataset has no treatment column"))?;
    if g.n() != ds.n() {
        return Err(Error::invalid(format!(
            "propensity model has {} rows, dataset has {}",
            g.n(),
            ds.n()
        )));
    }
    Ok((a, ds.outcome()))
}

fn arm_kind(arm: Arm) -> EstimandKind {
    match arm {
        Arm::Treated => EstimandKind::TreatedMean,
        Arm::Control => EstimandKind::ControlMean,
    }
}

pub(crate) fn plugin_arm(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    arm: Arm,
) -> Result<TargetReport> {
    let (a, y) = common_inputs(g, ds)?;
    let qa_unit = q.qbar_arm(ds, arm)?;
    let (psi, ic) = arm_estimate(q.scale(), arm, a, y, &qa_unit, g)?;
    let diag = TargetDiagnostics {
        truncation_hits: g.truncation_hits(),
        ..TargetDiagnostics::default()
    };
    Ok(TargetReport::from_parts(arm_kind(arm), psi, ic, diag))
}

/// Plug-in estimator of the treated mean: `ψ̂ = P_n Q̄(1, W)`. The influence
/// curve and interval are evaluated at the supplied propensity model.
pub fn plugin_tsm(q: &OutcomeModel, g: &PropensityModel, ds: &Dataset) -> Result<TargetReport> {
    plugin_arm(q, g, ds, Arm::Treated)
}

/// Residual of influence-curve values after their `P_n`-projection onto the
/// realized score span of a fitted treatment mechanism: the intercept score
/// `A - Ḡ(W)` together with `φ_j(W) (A - Ḡ(W))` for every active column of
/// the fit. When the weights come from a maximum-likelihood fit rather than
/// a known mechanism, the crude weighted-outcome curve overstates the
/// variance and the estimator's influence curve is exactly this residual.
/// Returns `None` (keep the crude curve) for known mechanisms or when the
/// score system is singular.
fn project_off_propensity_scores(
    ic: &[f64],
    a: &[f64],
    g: &PropensityModel,
) -> Option<(Vec<f64>, usize)> {
    let PropensitySource::Hal { catalog, fit } = g.source() else {
        return None;
    };
    let n = ic.len();
    let score_resid: Vec<f64> = (0..n).map(|i| a[i] - g.raw(i)).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(1 + fit.active.len());
    dirs.push(score_resid.clone());
    for &j in &fit.active {
        let col = catalog.column(j);
        dirs.push(
            (0..n)
                .map(|i| col.value_at(i as u32) * score_resid[i])
                .collect(),
        );
    }
    let k = dirs.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for r in 0..k {
        for c in r..k {
            let v: f64 = dirs[r].iter().zip(&dirs[c]).map(|(u, w)| u * w).sum();
            gram[r * k + c] = v;
            gram[c * k + r] = v;
        }
        rhs[r] = dirs[r].iter().zip(ic).map(|(u, w)| u * w).sum();
    }
    let (alpha, _) = ortho::solve_spd(&mut gram, &rhs, k, 1e-10).ok()?;
    let mut out = ic.to_vec();
    for (dir, &weight) in dirs.iter().zip(&alpha) {
        for i in 0..n {
            out[i] -= weight * dir[i];
        }
    }
    Some((out, k))
}

pub(crate) fn ipw_arm(g: &PropensityModel, ds: &Dataset, arm: Arm) -> Result<TargetReport> {
    let (a, y) = common_inputs(g, ds)?;
    let denom = arm_denominators(arm, g)?;
    let n = ds.n();
    let mut weighted = Vec::with_capacity(n);
    let mut applied = Vec::new();
    for i in 0..n {
        if a[i] == arm.level() {
            let w = 1.0 / denom[i];
            weighted.push(w * y[i]);
            applied.push(w);
        } else {
            weighted.push(0.0);
        }
    }
    let psi = mean(&weighted);
    let crude: Vec<f64> = weighted.iter().map(|&wy| wy - psi).collect();
    let projected = project_off_propensity_scores(&crude, a, g);
    let weights = if applied.is_empty() {
        None
    } else {
        Some(WeightSummary {
            n_weighted: applied.len(),
            min: applied.iter().copied().fold(f64::INFINITY, f64::min),
            max: applied.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: mean(&applied),
        })
    };
    let mut diag = TargetDiagnostics {
        truncation_hits: g.truncation_hits(),
        weights,
        ..TargetDiagnostics::default()
    };
    if applied.is_empty() {
        diag.flagged = true;
        diag.notes.push(format!("no rows at the {} arm", arm.label()));
    }
    let ic = match projected {
        Some((resid, k)) => {
            diag.notes.push(format!(
                "influence curve projected off {k} propensity-score directions"
            ));
            resid
        }
        None => crude,
    };
    Ok(TargetReport::from_parts(arm_kind(arm), psi, ic, diag))
}

/// Inverse-probability-weighted estimator of the treated mean:
/// `ψ̂ = P_n [1{A=1} Y / Ḡ(W)]` with truncated weights.
pub fn ipw_tsm(g: &PropensityModel, ds: &Dataset) -> Result<TargetReport> {
    ipw_arm(g, ds, Arm::Treated)
}

/// Tensor-product midpoint quadrature of `density * f` over the unit cube
/// [0, 1]^d. The density is taken with respect to Lebesgue measure and is
/// the caller's responsibility to normalize.
pub fn integrate_unit_cube<D, F>(d: usize, points_per_axis: usize, density: D, f: F) -> Result<f64>
where
    D: Fn(&[f64]) -> f64,
    F: Fn(&[f64]) -> f64,
{
    if d == 0 || points_per_axis == 0 {
        return Err(Error::invalid(
            "quadrature needs at least one axis and one point per axis",
        ));
    }
    let m = points_per_axis;
    let cell = 1.0 / m as f64;
    let mut idx = vec![0usize; d];
    let mut w = vec![0.0f64; d];
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    loop {
        for j in 0..d {
            w[j] = (idx[j] as f64 + 0.5) * cell;
        }
        let v = density(&w) * f(&w);
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "quadrature integrand is {v} at {w:?}"
            )));
        }
        let yv = v - comp;
        let t = sum + yv;
        comp = (t - sum) - yv;
        sum = t;
        let mut j = 0;
        loop {
            idx[j] += 1;
            if idx[j] < m {
                break;
            }
            idx[j] = 0;
            j += 1;
            if j == d {
                return Ok(sum * cell.powi(d as i32));
            }
        }
    }
}

/// Exact second-order remainder with its quadrature-error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Remainder {
    pub value: f64,
    /// |value at m points - value at 2m points| per axis: a concrete
    /// grid-coarseness estimate.
    pub quadrature_error: f64,
}

/// Exact remainder of the treated mean,
/// `R_0 = E_W [ (Q̄ - Q̄_0)(Ḡ - Ḡ_0) / Ḡ ]`,
/// integrated against the known covariate density on [0, 1]^d. Only
/// meaningful in simulations where the true functions are available.
pub fn exact_remainder_tsm<FQ, FG, FQ0, FG0, FD>(
    qbar1: FQ,
    gbar: FG,
    qbar1_true: FQ0,
    gbar_true: FG0,
    density: FD,
    d: usize,
    points_per_axis: usize,
) -> Result<Remainder>
where
    FQ: Fn(&[f64]) -> f64,
    FG: Fn(&[f64]) -> f64,
    FQ0: Fn(&[f64]) -> f64,
    FG0: Fn(&[f64]) -> f64,
    FD: Fn(&[f64]) -> f64,
{
    if points_per_axis < 2 {
        return Err(Error::invalid(
            "remainder quadrature needs at least two points per axis",
        ));
    }
    let integrand = |w: &[f64]| {
        let g = gbar(w);
        (qbar1(w) - qbar1_true(w)) * (g - gbar_true(w)) / g
    };
    let coarse = integrate_unit_cube(d, points_per_axis, &density, &integrand)?;
    let fine = integrate_unit_cube(d, 2 * points_per_axis, &density, &integrand)?;
    Ok(Remainder {
        value: fine,
        quadrature_error: (fine - coarse).abs(),
    })
}

/// Estimator choice for [`ate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AteMethod {
    Plugin,
    Ipw,
    Tmle,
    /// Orthogonalized (score-preserving) TMLE per arm.
    TmlePreserving,
}

/// Average treatment effect as the difference of the two arm means, with
/// the influence curve differenced accordingly.
pub fn ate(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    method: AteMethod,
    opts: &TmleOptions,
) -> Result<TargetReport> {
    let (r1, r0) = match method {
        AteMethod::Plugin => (plugin_arm(q, g, ds, Arm::Treated)?, plugin_arm(q, g, ds, Arm::Control)?),
        AteMethod::Ipw => (ipw_arm(g, ds, Arm::Treated)?, ipw_arm(g, ds, Arm::Control)?),
        AteMethod::Tmle => (
            tmle_update_arm(q, g, ds, Arm::Treated, opts)?.1,
            tmle_update_arm(q, g, ds, Arm::Control, opts)?.1,
        ),
        AteMethod::TmlePreserving => {
            let ortho = OrthoTmleOptions {
                tmle: *opts,
                ..OrthoTmleOptions::default()
            };
            (
                orthogonalized_tmle_arm(q, g, ds, Arm::Treated, &ortho)?.1,
                orthogonalized_tmle_arm(q, g, ds, Arm::Control, &ortho)?.1,
            )
        }
    };
    combine_ate(r1, r0)
}

fn combine_ate(r1: TargetReport, r0: TargetReport) -> Result<TargetReport> {
    if r1.ic_values.len() != r0.ic_values.len() {
        return Err(Error::invalid("arm reports cover different sample sizes"));
    }
    let psi = r1.psi_hat - r0.psi_hat;
    let ic: Vec<f64> = r1
        .ic_values
        .iter()
        .zip(&r0.ic_values)
        .map(|(&d1, &d0)| d1 - d0)
        .collect();
    let d1 = &r1.diagnostics;
    let d0 = &r0.diagnostics;
    let mut notes: Vec<String> = Vec::new();
    notes.extend(d1.notes.iter().map(|s| format!("treated: {s}")));
    notes.extend(d0.notes.iter().map(|s| format!("control: {s}")));
    let max_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, y) => x.or(y),
    };
    let diag = TargetDiagnostics {
        pn_dstar_abs: 0.0, // set by from_parts
        tmle_steps: d1.tmle_steps + d0.tmle_steps,
        loglik_gain: d1.loglik_gain + d0.loglik_gain,
        truncation_hits: d1.truncation_hits.max(d0.truncation_hits),
        tol: max_opt(d1.tol, d0.tol),
        tol_met: d1.tol_met && d0.tol_met,
        flagged: d1.flagged || d0.flagged,
        notes,
        weights: d1.weights,
        battery_max_abs: max_opt(d1.battery_max_abs, d0.battery_max_abs),
        orthogonal_score_abs: max_opt(d1.orthogonal_score_abs, d0.orthogonal_score_abs),
        arm_estimates: Some((r1.psi_hat, r0.psi_hat)),
    };
    Ok(TargetReport::from_parts(EstimandKind::Ate, psi, ic, diag))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn treated_gradient_matches_hand_arithmetic() {
        // Control rows lose the residual term entirely.
        let d = canonical_gradient_tsm(0.0, 3.0, 0.7, 0.2, 0.4).unwrap();
        assert!((d - (0.7 - 0.4)).abs() < 1e-15);
        // Fully consistent treated row scores zero.
        let d = canonical_gradient_tsm(1.0, 0.5, 0.5, 0.3, 0.5).unwrap();
        assert_eq!(d, 0.0);
        // 1/0.25 * (1 - 0.5) + 0.5 - 0.4 = 2.1.
        let d = canonical_gradient_tsm(1.0, 1.0, 0.5, 0.25, 0.4).unwrap();
        assert!((d - 2.1).abs() < 1e-15);
        assert!(canonical_gradient_tsm(1.0, 1.0, 0.5, 0.0, 0.4).is_err());
        assert!(canonical_gradient_tsm(1.0, 1.0, 0.5, 1.0, 0.4).is_err());
    }

    #[test]
    fn control_gradient_mirrors_treated_under_relabeling() {
        // Relabel a' = 1 - a, g' = 1 - g: the control gradient must equal
        // the treated gradient of the relabeled problem.
        let (a, y, q, g, psi) = (0.0, 2.0, 0.8, 0.7, 0.5);
        let control = gradient_arm(Arm::Control, a, y, q, 1.0 - g, psi);
        let treated = gradient_arm(Arm::Treated, 1.0 - a, y, q, 1.0 - g, psi);
        assert!((control - treated).abs() < 1e-15);
    }

    #[test]
    fn outcome_scale_roundtrip_and_validation() {
        assert!(OutcomeScale::for_fit(LossFamily::Binomial, &[0.0, 0.5]).is_err());
        assert!(OutcomeScale::for_fit(LossFamily::Gaussian, &[2.0, 2.0]).is_err());
        let s = OutcomeScale::for_fit(LossFamily::Gaussian, &[-1.0, 3.0]).unwrap();
        assert_eq!(s.range(), 4.0);
        for &y in &[-1.0, 0.0, 1.7, 3.0] {
            assert!((s.from_unit(s.to_unit(y)) - y).abs() < 1e-12);
        }
        assert_eq!(s.to_unit(-1.0), 0.0);
        assert_eq!(s.to_unit(3.0), 1.0);
    }

    #[test]
    fn plugin_on_a_null_model_returns_the_outcome_mean() {
        use crate::basis::{enumerate_basis, BasisSpec, KnotStrategy};
        use crate::solver::{fit_lasso, lambda_max, SolverOptions};

        let ds = simulated_binary(50, 11);
        let design = ds.outcome_design();
        let spec = BasisSpec::zero_order(1, KnotStrategy::AllObservations);
        let cat = enumerate_basis(&design, &spec).unwrap();
        let lmax = lambda_max(cat.columns(), ds.outcome(), LossFamily::Binomial).unwrap();
        let opts = SolverOptions {
            kkt_tol: 1e-12,
            coef_tol: 1e-12,
            ..SolverOptions::default()
        };
        let fit = fit_lasso(
            cat.columns(),
            ds.outcome(),
            LossFamily::Binomial,
            lmax * 1.05,
            None,
            None,
            &opts,
        )
        .unwrap();
        assert!(fit.active.is_empty());
        let q = OutcomeModel::from_fit(cat, fit, &ds).unwrap();
        let g = true_g(&ds);
        let report = plugin_tsm(&q, &g, &ds).unwrap();
        report.verify().unwrap();
        // A constant Q̄ plugs in as that constant: here the outcome mean.
        let ybar = mean(ds.outcome());
        assert!(
            (report.psi_hat - ybar).abs() < 1e-9,
            "psi {} vs mean {}",
            report.psi_hat,
            ybar
        );
        assert_eq!(report.diagnostics.tmle_steps, 0);
    }

    #[test]
    fn ipw_with_known_constant_propensity_is_the_weighted_mean() {
        let ds = simulated_binary(40, 3);
        let g = PropensityModel::known(vec![0.5; 40], DEFAULT_TRUNCATION, "half").unwrap();
        let report = ipw_tsm(&g, &ds).unwrap();
        report.verify().unwrap();
        let a = ds.treatment().unwrap();
        let manual = 2.0
            * mean(
                &(0..40)
                    .map(|i| a[i] * ds.outcome()[i])
                    .collect::<Vec<f64>>(),
            );
        assert!((report.psi_hat - manual).abs() < 1e-12);
        let w = report.diagnostics.weights.unwrap();
        assert_eq!(w.min, 2.0);
        assert_eq!(w.max, 2.0);
    }

    #[test]
    fn ipw_with_everyone_treated_at_unit_propensity_is_the_plain_mean() {
        let n = 12;
        let y: Vec<f64> = (0..n).map(|i| (i as f64) / 3.0).collect();
        let ds = Dataset::new(
            vec![vec![0.5; n]],
            vec!["w".into()],
            Some(vec![1.0; n]),
            Some("a".into()),
            y.clone(),
            "y".into(),
        )
        .unwrap();
        // Upper truncation at exactly 1 is allowed; only control-arm
        // weighting forbids it.
        let g = PropensityModel::known(vec![1.0; n], (0.01, 1.0), "all-treated").unwrap();
        let report = ipw_tsm(&g, &ds).unwrap();
        assert!((report.psi_hat - mean(&y)).abs() < 1e-12);
        assert!(ipw_arm(&g, &ds, Arm::Control).is_err());
    }

    #[test]
    fn ipw_se_shrinks_under_a_fitted_mechanism_via_score_projection() {
        let ds = simulated_binary(400, 11);
        let g_fit = hal_g(&ds, 0.05);
        let PropensitySource::Hal { fit, .. } = g_fit.source() else {
            panic!("hal_g must carry its fit");
        };
        assert!(!fit.active.is_empty(), "fit should keep some columns");
        // The same values rebranded as known give the identical point
        // estimate and the crude influence curve.
        let values: Vec<f64> = (0..ds.n()).map(|i| g_fit.raw(i)).collect();
        let g_known = PropensityModel::known(values, g_fit.bounds(), "frozen").unwrap();
        let fitted = ipw_tsm(&g_fit, &ds).unwrap();
        let known = ipw_tsm(&g_known, &ds).unwrap();
        fitted.verify().unwrap();
        known.verify().unwrap();
        assert!((fitted.psi_hat - known.psi_hat).abs() < 1e-12);
        // Projection can only remove variance, and with active score
        // directions it genuinely should.
        assert!(
            fitted.se < known.se,
            "projected se {} should sit below crude se {}",
            fitted.se,
            known.se
        );
        assert!(fitted.se > 0.0);
        assert!(fitted
            .diagnostics
            .notes
            .iter()
            .any(|note| note.contains("projected off")));
        assert!(known
            .diagnostics
            .notes
            .iter()
            .all(|note| !note.contains("projected off")));
    }

    #[test]
    fn remainder_constant_case_and_double_robustness_zeroes() {
        // Constant offsets: (0.1)(0.5 - 0.4)/0.5 = 0.02.
        let r = exact_remainder_tsm(
            |_: &[f64]| 0.6,
            |_: &[f64]| 0.5,
            |_: &[f64]| 0.5,
            |_: &[f64]| 0.4,
            |_: &[f64]| 1.0,
            2,
            64,
        )
        .unwrap();
        assert!((r.value - 0.02).abs() < 1e-12, "value {}", r.value);
        assert!(r.quadrature_error < 1e-12);

        // Q = Q0 kills the first factor everywhere.
        let r = exact_remainder_tsm(
            |w: &[f64]| 0.3 + 0.2 * w[0],
            |_: &[f64]| 0.5,
            |w: &[f64]| 0.3 + 0.2 * w[0],
            |_: &[f64]| 0.4,
            |_: &[f64]| 1.0,
            1,
            64,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);

        // G = G0 likewise (double robustness at the true mechanism).
        let r = exact_remainder_tsm(
            |_: &[f64]| 0.6,
            |w: &[f64]| expit(w[0] - 0.3),
            |_: &[f64]| 0.5,
            |w: &[f64]| expit(w[0] - 0.3),
            |_: &[f64]| 1.0,
            1,
            64,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn quadrature_integrates_a_known_polynomial() {
        // The midpoint rule is exact for per-axis-linear integrands:
        // E[w1 w2] over U(0,1)^2 = 1/4 at any grid.
        let exact = integrate_unit_cube(2, 3, |_| 1.0, |w| w[0] * w[1]).unwrap();
        assert!((exact - 0.25).abs() < 1e-14);
        // A curved integrand converges at m^-2: E[w1^2 w2] = 1/6.
        let coarse = integrate_unit_cube(2, 10, |_| 1.0, |w| w[0] * w[0] * w[1]).unwrap();
        let fine = integrate_unit_cube(2, 80, |_| 1.0, |w| w[0] * w[0] * w[1]).unwrap();
        let target = 1.0 / 6.0;
        assert!((fine - target).abs() < 1e-4);
        assert!((fine - target).abs() < (coarse - target).abs());
        // Non-finite integrands are reported, not propagated.
        assert!(integrate_unit_cube(1, 8, |_| 1.0, |w| 1.0 / (w[0] - w[0])).is_err());
    }

    #[test]
    fn ate_differences_the_arm_gradients() {
        let ds = saturated_toy();
        let q = saturated_outcome(&ds);
        let g = PropensityModel::known(vec![0.5; 8], DEFAULT_TRUNCATION, "half").unwrap();
        let r1 = plugin_arm(&q, &g, &ds, Arm::Treated).unwrap();
        let r0 = plugin_arm(&q, &g, &ds, Arm::Control).unwrap();
        let rd = ate(&q, &g, &ds, AteMethod::Plugin, &TmleOptions::default()).unwrap();
        rd.verify().unwrap();
        assert!((rd.psi_hat - (r1.psi_hat - r0.psi_hat)).abs() < 1e-15);
        for i in 0..8 {
            assert!((rd.ic_values[i] - (r1.ic_values[i] - r0.ic_values[i])).abs() < 1e-15);
        }
        let (p1, p0) = rd.diagnostics.arm_estimates.unwrap();
        assert_eq!(p1, r1.psi_hat);
        assert_eq!(p0, r0.psi_hat);
    }

    #[test]
    fn report_verification_catches_tampering() {
        let ds = simulated_binary(30, 5);
        let g = true_g(&ds);
        let mut report = ipw_tsm(&g, &ds).unwrap();
        report.verify().unwrap();
        report.diagnostics.pn_dstar_abs += 1e-6;
        assert!(report.verify().is_err());
    }

    #[test]
    fn propensity_model_truncates_and_counts_hits() {
        let g = PropensityModel::known(vec![0.001, 0.5, 0.999], (0.01, 0.99), "t").unwrap();
        assert_eq!(g.truncated(0), 0.01);
        assert_eq!(g.truncated(1), 0.5);
        assert_eq!(g.truncated(2), 0.99);
        assert_eq!(g.truncation_hits(), 2);
        let loose = g.with_bounds((0.0005, 0.9995), "loose").unwrap();
        assert_eq!(loose.truncation_hits(), 0);
        assert!(PropensityModel::known(vec![0.5], (0.0, 0.99), "bad").is_err());
        assert!(PropensityModel::known(vec![1.5], (0.01, 0.99), "bad").is_err());
    }
}
