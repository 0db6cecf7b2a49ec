//! Targeted maximum likelihood update of a fitted outcome model toward a
//! treatment-arm mean.
//!
//! The update fluctuates the outcome regression on the logit scale along
//! the clever covariate `H(A, W) = 1{A = a} / denom(W)` (denominator Ḡ for
//! the treated arm, 1 - Ḡ for control), taking fixed-size ε steps that are
//! only accepted when the binomial log-likelihood does not decrease. The
//! empirical mean of the canonical gradient equals `range * dloglik/dε / n`
//! identically — the plug-in mean term cancels because ψ is recomputed at
//! every state — so driving the likelihood score to a tolerance drives
//! `|P_n D*|` to the same tolerance.

use serde::{Deserialize, Serialize};

use super::{
    arm_denominators, arm_estimate, arm_kind, common_inputs, Arm, OutcomeModel, OutcomeScale,
    PropensityModel, TargetDiagnostics, TargetReport,
};
use crate::data::Dataset;
use crate::scores::{battery_directions, path_score_with_residual};
use crate::util::{expit, kahan_sum, logit, sd};
use crate::{Error, Result};

/// Controls for the ε-stepping targeting loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TmleOptions {
    /// Stop once |P_n D*| falls to this value. `None` derives the standard
    /// `σ_n / (√n ln n)` tolerance from the influence curve at the initial
    /// fit (with a 1e-12 floor).
    pub tol: Option<f64>,
    /// Base ε step size.
    pub delta_eps: f64,
    /// Cap on accepted steps; hitting it flags the report instead of
    /// erroring.
    pub max_steps: usize,
    /// Step halvings allowed while searching for a non-decreasing
    /// log-likelihood before the update gives up.
    pub max_halvings: usize,
}

impl Default for TmleOptions {
    fn default() -> Self {
        TmleOptions {
            tol: None,
            delta_eps: 1e-3,
            max_steps: 10_000,
            max_halvings: 40,
        }
    }
}

/// Score-equation tolerance for a sample of size `n`, from the influence
/// curve at the initial fit when none was requested.
pub(super) fn resolve_tol(ic0: &[f64], n: usize, opts: &TmleOptions) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("targeting needs at least two observations"));
    }
    match opts.tol {
        Some(t) => {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("tolerance {t} must be positive")));
            }
            Ok(t)
        }
        None => {
            let nf = n as f64;
            let derived = sd(ic0) / (nf.sqrt() * nf.ln());
            Ok(derived.max(1e-12))
        }
    }
}

/// Binomial log-likelihood of unit-scale outcomes against predictions,
/// with the predictions clamped away from 0 and 1.
pub(super) fn binomial_loglik(y_unit: &[f64], q: &[f64]) -> f64 {
    kahan_sum(y_unit.iter().zip(q).map(|(&y, &p)| {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        y * p.ln() + (1.0 - y) * (1.0 - p).ln()
    }))
}

/// Result of the ε-stepping loop, on the unit scale. Whether the tolerance
/// was met is recomputed by callers from the reported influence curve.
pub(super) struct Fluctuation {
    pub eps: f64,
    pub steps: usize,
    pub q_arm: Vec<f64>,
    pub q_obs: Vec<f64>,
    /// Mean log-likelihood gain over the initial state.
    pub loglik_gain: f64,
}

/// Fluctuate the logits `l_arm` (counterfactual) and `l_obs` (observed
/// treatment) along the clever covariate until `|P_n D*| <= tol`.
/// Predictions are always recomputed fresh from the accumulated ε, so the
/// walk cannot drift numerically.
pub(super) fn fluctuate_arm(
    y_unit: &[f64],
    l_arm: &[f64],
    l_obs: &[f64],
    h_arm: &[f64],
    ind: &[f64],
    range: f64,
    tol: f64,
    opts: &TmleOptions,
) -> Result<Fluctuation> {
    let n = y_unit.len();
    let nf = n as f64;
    let preds = |eps: f64| -> (Vec<f64>, Vec<f64>) {
        let qa = (0..n).map(|i| expit(l_arm[i] + eps * h_arm[i])).collect();
        let qo = (0..n)
            .map(|i| expit(l_obs[i] + eps * ind[i] * h_arm[i]))
            .collect();
        (qa, qo)
    };
    // dloglik/dε; |P_n D*| on the raw outcome scale is |range * score / n|.
    let score_of = |qo: &[f64]| -> f64 {
        kahan_sum((0..n).map(|i| ind[i] * h_arm[i] * (y_unit[i] - qo[i])))
    };

    let (mut q_arm, mut q_obs) = preds(0.0);
    let ll0 = binomial_loglik(y_unit, &q_obs);
    let mut ll = ll0;
    let mut eps = 0.0f64;
    let mut steps = 0usize;
    let mut delta = opts.delta_eps;
    let mut score = score_of(&q_obs);
    let mut tol_met = (range * score / nf).abs() <= tol;
    while !tol_met && steps < opts.max_steps {
        let dir = if score > 0.0 { 1.0 } else { -1.0 };
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand_eps = eps + dir * delta;
            let (qa, qo) = preds(cand_eps);
            let cand_ll = binomial_loglik(y_unit, &qo);
            if cand_ll >= ll {
                eps = cand_eps;
                q_arm = qa;
                q_obs = qo;
                ll = cand_ll;
                accepted = true;
                break;
            }
            delta *= 0.5;
        }
        if !accepted {
            return Err(Error::numeric(format!(
                "targeting stalled at |P_n D*| = {:.3e} (tolerance {:.3e}): no step improves the likelihood",
                (range * score / nf).abs(),
                tol
            )));
        }
        steps += 1;
        score = score_of(&q_obs);
        tol_met = (range * score / nf).abs() <= tol;
    }
    Ok(Fluctuation {
        eps,
        steps,
        q_arm,
        q_obs,
        loglik_gain: (ll - ll0) / nf,
    })
}

/// Updated outcome state produced by a targeting step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TmleOutcome {
    pub arm: Arm,
    /// Net ε the clever covariate was scaled by.
    pub eps_total: f64,
    pub steps: usize,
    /// Unit-scale counterfactual predictions Q̄*(a, W_i).
    pub qbar_arm_star: Vec<f64>,
    /// Unit-scale observed-treatment predictions Q̄*(A_i, W_i).
    pub qbar_obs_star: Vec<f64>,
    pub tol: f64,
    pub tol_met: bool,
}

/// TMLE of an arm-specific mean: fluctuate the outcome model along the
/// arm's clever covariate, then report the plug-in of the updated model
/// with its canonical-gradient influence curve.
pub fn tmle_update_arm(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    arm: Arm,
    opts: &TmleOptions,
) -> Result<(TmleOutcome, TargetReport)> {
    let (a, y_raw) = common_inputs(g, ds)?;
    let scale = *q.scale();
    let y_unit: Vec<f64> = y_raw.iter().map(|&v| scale.to_unit(v)).collect();
    let q_arm0 = q.qbar_arm(ds, arm)?;
    let q_obs0 = q.qbar_obs(ds)?;
    let denom = arm_denominators(arm, g)?;
    let h_arm: Vec<f64> = denom.iter().map(|&d| 1.0 / d).collect();
    let ind: Vec<f64> = a
        .iter()
        .map(|&ai| if ai == arm.level() { 1.0 } else { 0.0 })
        .collect();

    let (_, ic0) = arm_estimate(&scale, arm, a, y_raw, &q_arm0, g)?;
    let tol = resolve_tol(&ic0, ds.n(), opts)?;

    let l_arm: Vec<f64> = q_arm0.iter().map(|&p| logit(p)).collect();
    let l_obs: Vec<f64> = q_obs0.iter().map(|&p| logit(p)).collect();
    let fl = fluctuate_arm(&y_unit, &l_arm, &l_obs, &h_arm, &ind, scale.range(), tol, opts)?;

    let (psi, ic) = arm_estimate(&scale, arm, a, y_raw, &fl.q_arm, g)?;
    let diag = TargetDiagnostics {
        tmle_steps: fl.steps,
        loglik_gain: fl.loglik_gain,
        truncation_hits: g.truncation_hits(),
        tol: Some(tol),
        ..TargetDiagnostics::default()
    };
    let mut report = TargetReport::from_parts(arm_kind(arm), psi, ic, diag);
    let tol_met = report.diagnostics.pn_dstar_abs <= tol;
    report.diagnostics.tol_met = tol_met;
    if !tol_met {
        report.diagnostics.flagged = true;
        report.diagnostics.notes.push(format!(
            "score equation unsolved: |P_n D*| = {:.3e} > tolerance {:.3e} after {} steps",
            report.diagnostics.pn_dstar_abs, tol, fl.steps
        ));
    }
    let outcome = TmleOutcome {
        arm,
        eps_total: fl.eps,
        steps: fl.steps,
        qbar_arm_star: fl.q_arm,
        qbar_obs_star: fl.q_obs,
        tol,
        tol_met,
    };
    Ok((outcome, report))
}

/// TMLE of the treated mean E[Y_1].
pub fn tmle_update_tsm(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    opts: &TmleOptions,
) -> Result<(TmleOutcome, TargetReport)> {
    tmle_update_arm(q, g, ds, Arm::Treated, opts)
}

/// Maximum |path score| over a random battery of score directions of the
/// original lasso fit, evaluated at post-update predictions `q_obs_unit`.
/// Returns `None` when the active set is too small to span any direction.
pub fn battery_preservation(
    q: &OutcomeModel,
    ds: &Dataset,
    q_obs_unit: &[f64],
    battery_size: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if ds.n() != q.catalog().n() {
        return Err(Error::invalid(
            "battery evaluation needs the fitting dataset",
        ));
    }
    if q_obs_unit.len() != ds.n() {
        return Err(Error::invalid("prediction vector does not match the dataset"));
    }
    let dirs = battery_directions(q.fit(), battery_size, seed);
    if dirs.is_empty() {
        return Ok(None);
    }
    // Mean-scale residuals on whichever scale the fit's working loss used.
    let scale = q.scale();
    let resid: Vec<f64> = match scale {
        OutcomeScale::Binary => ds
            .outcome()
            .iter()
            .zip(q_obs_unit)
            .map(|(&y, &p)| y - p)
            .collect(),
        OutcomeScale::Rescaled { .. } => ds
            .outcome()
            .iter()
            .zip(q_obs_unit)
            .map(|(&y, &p)| y - scale.from_unit(p))
            .collect(),
    };
    let fit = q.fit();
    let max_abs = dirs
        .iter()
        .map(|h| path_score_with_residual(h, fit.intercept, &fit.beta, q.catalog().columns(), &resid).abs())
        .fold(0.0f64, f64::max);
    Ok(Some(max_abs))
}
