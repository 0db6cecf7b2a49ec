//! Score-preserving (orthogonalized) targeting update.
//!
//! A plain TMLE step solves the score equation for the target parameter but
//! breaks the score equations the lasso itself solved: after the update the
//! empirical scores along directions that hold the penalty norm fixed are
//! no longer zero, so the updated model is no longer the penalized MLE it
//! was selected to be. This update targets within the model instead.
//!
//! With active set `a_1, .., a_k` and signs `s_m = sign(β_{a_m})`, the
//! fit's zero-score directions are spanned by the `k - 1` pattern contrasts
//! `U_m = φ_{a_m} - s_m s_1 φ_{a_1}`: the lasso stationarity conditions
//! make each `P_n U_m (Y - Q̄)` vanish at the initial fit. The update runs
//! a joint offset-logistic maximum likelihood over the patterns together
//! with the residualized clever covariate `H̃ = H - Π(H | span U)` (the
//! projection taken in the empirical inner product weighted by the initial
//! residuals). Because `H` lies in the span of the maximized directions,
//! the solved system zeroes both the target score `P_n D*` and every
//! pattern score; zero pattern scores force `P_n φ_j (Y - Q̄*) = γ s_j`
//! across the active set, which makes every penalty-preserving path score
//! `-γ Σ_j h_j |β_j| = 0` up to the solver tolerance.

use serde::{Deserialize, Serialize};

use super::tmle::{binomial_loglik, resolve_tol, tmle_update_arm, TmleOutcome};
use super::{
    arm_denominators, arm_estimate, arm_kind, battery_preservation, common_inputs, Arm,
    OutcomeModel, PropensityModel, TargetDiagnostics, TargetReport, TmleOptions,
};
use crate::basis::evaluate_basis;
use crate::data::Dataset;
use crate::util::{expit, kahan_sum, logit};
use crate::{Error, Result};

/// Controls for the score-preserving update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrthoTmleOptions {
    /// Tolerance and stepping controls shared with the plain update.
    pub tmle: TmleOptions,
    /// Random score directions checked before and after the update.
    pub battery_size: usize,
    pub battery_seed: u64,
    /// Newton iteration cap for the joint likelihood solve.
    pub max_newton: usize,
    /// Convergence criterion: max |gradient| / n over the maximized
    /// directions.
    pub newton_tol: f64,
    /// Diagonal loading applied when the Gram or Hessian factorization
    /// fails.
    pub ridge: f64,
}

impl Default for OrthoTmleOptions {
    fn default() -> Self {
        OrthoTmleOptions {
            tmle: TmleOptions::default(),
            battery_size: 50,
            battery_seed: 1,
            max_newton: 200,
            newton_tol: 1e-12,
            ridge: 1e-10,
        }
    }
}

/// State produced by the score-preserving update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthoOutcome {
    pub arm: Arm,
    /// Coefficients of the maximized directions: the `k - 1` pattern
    /// contrasts, then the residualized clever covariate.
    pub theta: Vec<f64>,
    /// Unit-scale counterfactual predictions after the update.
    pub qbar_arm_star: Vec<f64>,
    /// Unit-scale observed-treatment predictions after the update.
    pub qbar_obs_star: Vec<f64>,
    pub newton_iters: usize,
    /// True when the active set had fewer than two members, so the
    /// preserved score space is trivial and the plain update was used.
    pub delegated_plain: bool,
    /// True when a factorization needed diagonal loading.
    pub ridged: bool,
    /// Largest |P_n U_m (Y - Q̄*)| over the pattern contrasts.
    pub pattern_score_max_abs: f64,
    /// |P_n D̃*| of the orthogonalized gradient at the updated fit.
    pub orthogonal_score_abs: f64,
    /// Max |battery path score| at the initial fit, when defined.
    pub battery_max_abs_initial: Option<f64>,
    /// Max |battery path score| after the update, when defined.
    pub battery_max_abs_final: Option<f64>,
    /// Projection coefficients of the clever covariate onto the pattern
    /// contrasts.
    pub projection: Vec<f64>,
}

/// Solve `a x = b` for a symmetric positive-definite `a` (row-major,
/// `k x k`) by Cholesky factorization. Returns `None` when a pivot is not
/// strictly positive.
fn cholesky_solve(a: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), k * k);
    debug_assert_eq!(b.len(), k);
    let mut l = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for t in 0..j {
                s -= l[i * k + t] * l[j * k + t];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    // Forward then back substitution.
    let mut x = b.to_vec();
    for i in 0..k {
        for t in 0..i {
            x[i] -= l[i * k + t] * x[t];
        }
        x[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for t in (i + 1)..k {
            x[i] -= l[t * k + i] * x[t];
        }
        x[i] /= l[i * k + i];
    }
    Some(x)
}

/// Cholesky solve with one diagonal-loading retry. Returns the solution
/// and whether loading was needed.
pub(super) fn solve_spd(a: &mut [f64], b: &[f64], k: usize, ridge: f64) -> Result<(Vec<f64>, bool)> {
    if let Some(x) = cholesky_solve(a, b, k) {
        return Ok((x, false));
    }
    let max_diag = (0..k).map(|i| a[i * k + i]).fold(0.0f64, f64::max);
    let load = ridge * max_diag.max(1.0);
    for i in 0..k {
        a[i * k + i] += load;
    }
    match cholesky_solve(a, b, k) {
        Some(x) => Ok((x, true)),
        None => Err(Error::numeric(
            "pattern system is singular even with diagonal loading",
        )),
    }
}

/// Score-preserving update of the treated mean.
pub fn orthogonalized_tmle_update(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    opts: &OrthoTmleOptions,
) -> Result<(OrthoOutcome, TargetReport)> {
    orthogonalized_tmle_arm(q, g, ds, Arm::Treated, opts)
}

fn delegated(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    arm: Arm,
    opts: &OrthoTmleOptions,
) -> Result<(OrthoOutcome, TargetReport)> {
    let (plain, mut report) = tmle_update_arm(q, g, ds, arm, &opts.tmle)?;
    report.diagnostics.orthogonal_score_abs = Some(report.diagnostics.pn_dstar_abs);
    report
        .diagnostics
        .notes
        .push("preserved score space is trivial; plain targeting applied".into());
    let TmleOutcome {
        qbar_arm_star,
        qbar_obs_star,
        ..
    } = plain;
    let outcome = OrthoOutcome {
        arm,
        theta: Vec::new(),
        qbar_arm_star,
        qbar_obs_star,
        newton_iters: 0,
        delegated_plain: true,
        ridged: false,
        pattern_score_max_abs: 0.0,
        orthogonal_score_abs: report.diagnostics.pn_dstar_abs,
        battery_max_abs_initial: None,
        battery_max_abs_final: None,
        projection: Vec::new(),
    };
    Ok((outcome, report))
}

/// Score-preserving update of an arm-specific mean. Requires the dataset
/// the outcome model was fitted on, so the fit's score equations are the
/// ones being preserved.
pub fn orthogonalized_tmle_arm(
    q: &OutcomeModel,
    g: &PropensityModel,
    ds: &Dataset,
    arm: Arm,
    opts: &OrthoTmleOptions,
) -> Result<(OrthoOutcome, TargetReport)> {
    if q.catalog().n() != ds.n() {
        return Err(Error::invalid(
            "score-preserving update needs the dataset the outcome model was fitted on",
        ));
    }
    let fit = q.fit();
    let k = fit.active.len();
    if k <= 1 {
        return delegated(q, g, ds, arm, opts);
    }

    let (a, y_raw) = common_inputs(g, ds)?;
    let n = ds.n();
    let nf = n as f64;
    let scale = *q.scale();
    let range = scale.range();
    let y_unit: Vec<f64> = y_raw.iter().map(|&v| scale.to_unit(v)).collect();
    let q_arm0 = q.qbar_arm(ds, arm)?;
    let q_obs0 = q.qbar_obs(ds)?;
    let denom = arm_denominators(arm, g)?;
    let ind: Vec<f64> = a
        .iter()
        .map(|&ai| if ai == arm.level() { 1.0 } else { 0.0 })
        .collect();
    let h_obs: Vec<f64> = (0..n).map(|i| ind[i] / denom[i]).collect();
    let h_arm: Vec<f64> = denom.iter().map(|&d| 1.0 / d).collect();

    let (_, ic0) = arm_estimate(&scale, arm, a, y_raw, &q_arm0, g)?;
    let tol = resolve_tol(&ic0, n, &opts.tmle)?;

    // Active-column values at the observed design (exact solver columns)
    // and at the pinned arm; rows already at the arm reuse the observed
    // value.
    let funcs = q.catalog().functions();
    let active = &fit.active;
    let mut phi_obs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut phi_arm: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut x = vec![0.0f64; ds.d() + 1];
    for &j in active {
        let col = q.catalog().column(j);
        let obs: Vec<f64> = (0..n).map(|i| col.value_at(i as u32)).collect();
        let mut cf = Vec::with_capacity(n);
        for i in 0..n {
            if a[i] == arm.level() {
                cf.push(obs[i]);
            } else {
                x[0] = arm.level();
                for c in 0..ds.d() {
                    x[c + 1] = ds.covariate(c)[i];
                }
                cf.push(evaluate_basis(&funcs[j], &x));
            }
        }
        phi_obs.push(obs);
        phi_arm.push(cf);
    }

    // Pattern contrasts against the first active column as pivot.
    let signs: Vec<f64> = active.iter().map(|&j| fit.beta[j].signum()).collect();
    let m_pat = k - 1;
    let mut u_obs: Vec<Vec<f64>> = Vec::with_capacity(m_pat);
    let mut u_arm: Vec<Vec<f64>> = Vec::with_capacity(m_pat);
    for m in 1..k {
        let c = signs[m] * signs[0];
        u_obs.push((0..n).map(|i| phi_obs[m][i] - c * phi_obs[0][i]).collect());
        u_arm.push((0..n).map(|i| phi_arm[m][i] - c * phi_arm[0][i]).collect());
    }

    // Projection of the clever covariate onto the pattern span, in the
    // empirical inner product weighted by squared initial residuals.
    let r0: Vec<f64> = (0..n).map(|i| y_unit[i] - q_obs0[i]).collect();
    let mut gram = vec![0.0f64; m_pat * m_pat];
    let mut rhs = vec![0.0f64; m_pat];
    for m in 0..m_pat {
        for l in 0..=m {
            let v = kahan_sum((0..n).map(|i| u_obs[m][i] * u_obs[l][i] * r0[i] * r0[i]));
            gram[m * m_pat + l] = v;
            gram[l * m_pat + m] = v;
        }
        rhs[m] = kahan_sum((0..n).map(|i| u_obs[m][i] * h_obs[i] * r0[i] * r0[i]));
    }
    let (alpha, mut ridged) = solve_spd(&mut gram, &rhs, m_pat, opts.ridge)?;

    // Residualized clever covariate, observed and counterfactual.
    let mut ht_obs = h_obs.clone();
    let mut ht_arm = h_arm.clone();
    for m in 0..m_pat {
        let am = alpha[m];
        for i in 0..n {
            ht_obs[i] -= am * u_obs[m][i];
            ht_arm[i] -= am * u_arm[m][i];
        }
    }

    // Joint damped-Newton offset-logistic MLE over the patterns and the
    // residualized covariate. H itself lies in their span, so at the
    // optimum both the pattern scores and the target score vanish.
    let dim = m_pat + 1;
    let z_obs: Vec<&[f64]> = u_obs
        .iter()
        .map(|u| u.as_slice())
        .chain(std::iter::once(ht_obs.as_slice()))
        .collect();
    let l_obs0: Vec<f64> = q_obs0.iter().map(|&p| logit(p)).collect();
    let l_arm0: Vec<f64> = q_arm0.iter().map(|&p| logit(p)).collect();
    let mut theta = vec![0.0f64; dim];
    let q_of = |theta: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut l = l_obs0[i];
                for (z, t) in z_obs.iter().zip(theta) {
                    l += t * z[i];
                }
                expit(l)
            })
            .collect()
    };
    let mut q_cur = q_of(&theta);
    let mut ll = binomial_loglik(&y_unit, &q_cur);
    let mut iters = 0usize;
    let mut converged = false;
    let mut stalled = false;
    while iters < opts.max_newton {
        let grad: Vec<f64> = z_obs
            .iter()
            .map(|z| kahan_sum((0..n).map(|i| z[i] * (y_unit[i] - q_cur[i]))))
            .collect();
        if grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs())) / nf <= opts.newton_tol {
            converged = true;
            break;
        }
        let mut hess = vec![0.0f64; dim * dim];
        for r in 0..dim {
            for c in 0..=r {
                let mut s = 0.0;
                for i in 0..n {
                    s += z_obs[r][i] * z_obs[c][i] * q_cur[i] * (1.0 - q_cur[i]);
                }
                hess[r * dim + c] = s;
                hess[c * dim + r] = s;
            }
        }
        let (dir, loaded) = solve_spd(&mut hess, &grad, dim, opts.ridge)?;
        ridged |= loaded;
        let mut t = 1.0f64;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(&th, &d)| th + t * d).collect();
            let qc = q_of(&cand);
            let cand_ll = binomial_loglik(&y_unit, &qc);
            if cand_ll >= ll {
                theta = cand;
                q_cur = qc;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iters += 1;
        if !accepted {
            stalled = true;
            break;
        }
    }
    if !converged {
        // One final check: the last accepted state may already satisfy the
        // criterion even if the loop exited by iteration cap or stall.
        let grad_max = z_obs
            .iter()
            .map(|z| kahan_sum((0..n).map(|i| z[i] * (y_unit[i] - q_cur[i]))).abs())
            .fold(0.0f64, f64::max);
        converged = grad_max / nf <= opts.newton_tol;
    }

    // Counterfactual predictions under the fitted directions.
    let q_arm_star: Vec<f64> = (0..n)
        .map(|i| {
            let mut l = l_arm0[i];
            for m in 0..m_pat {
                l += theta[m] * u_arm[m][i];
            }
            l += theta[m_pat] * ht_arm[i];
            expit(l)
        })
        .collect();
    let q_obs_star = q_cur;

    let (psi, ic) = arm_estimate(&scale, arm, a, y_raw, &q_arm_star, g)?;

    let pattern_score_max_abs = (0..m_pat)
        .map(|m| kahan_sum((0..n).map(|i| u_obs[m][i] * (y_unit[i] - q_obs_star[i]))).abs() / nf)
        .fold(0.0f64, f64::max);
    let proj_score = kahan_sum((0..n).map(|i| {
        let proj: f64 = (0..m_pat).map(|m| alpha[m] * u_obs[m][i]).sum();
        proj * (y_unit[i] - q_obs_star[i])
    })) / nf;

    let battery_initial = battery_preservation(q, ds, &q_obs0, opts.battery_size, opts.battery_seed)?;
    let battery_final =
        battery_preservation(q, ds, &q_obs_star, opts.battery_size, opts.battery_seed)?;

    let ll0 = binomial_loglik(&y_unit, &q_of(&vec![0.0; dim]));
    let diag = TargetDiagnostics {
        tmle_steps: iters,
        loglik_gain: (ll - ll0) / nf,
        truncation_hits: g.truncation_hits(),
        tol: Some(tol),
        battery_max_abs: battery_final,
        ..TargetDiagnostics::default()
    };
    let mut report = TargetReport::from_parts(arm_kind(arm), psi, ic, diag);
    let pn_dstar = report.diagnostics.pn_dstar_abs;
    let orthogonal_score_abs = (pn_dstar - range * proj_score).abs();
    report.diagnostics.orthogonal_score_abs = Some(orthogonal_score_abs);
    let tol_met = pn_dstar <= tol;
    report.diagnostics.tol_met = tol_met;
    if !tol_met {
        report.diagnostics.flagged = true;
        report.diagnostics.notes.push(format!(
            "score equation unsolved: |P_n D*| = {pn_dstar:.3e} > tolerance {tol:.3e}"
        ));
    }
    if !converged {
        report.diagnostics.flagged = true;
        report.diagnostics.notes.push(format!(
            "joint likelihood solve did not converge in {iters} iterations{}",
            if stalled { " (stalled)" } else { "" }
        ));
    }
    if ridged {
        report.diagnostics.flagged = true;
        report
            .diagnostics
            .notes
            .push("a factorization needed diagonal loading".into());
    }

    let outcome = OrthoOutcome {
        arm,
        theta,
        qbar_arm_star: q_arm_star,
        qbar_obs_star: q_obs_star,
        newton_iters: iters,
        delegated_plain: false,
        ridged,
        pattern_score_max_abs,
        orthogonal_score_abs,
        battery_max_abs_initial: battery_initial,
        battery_max_abs_final: battery_final,
        projection: alpha,
    };
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::tmle_update_tsm;
    use super::*;
    use crate::basis::{enumerate_basis, BasisSpec, KnotStrategy};
    use crate::solver::{fit_lasso, lambda_max, LossFamily, SolverOptions};

    #[test]
    fn cholesky_solves_a_known_system_and_rejects_indefinite_input() {
        // [[4, 2], [2, 3]] x = [8, 7] has solution [1.25, 1.5].
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[8.0, 7.0], 2).unwrap();
        assert!((x[0] - 1.25).abs() < 1e-12);
        assert!((x[1] - 1.5).abs() < 1e-12);
        // Indefinite matrix has a negative pivot.
        let bad = vec![1.0, 2.0, 2.0, 1.0];
        assert!(cholesky_solve(&bad, &[1.0, 1.0], 2).is_none());
    }

    fn outcome_with_active_count(ds: &crate::data::Dataset, want: usize) -> Option<OutcomeModel> {
        let design = ds.outcome_design();
        let spec = BasisSpec::zero_order(2, KnotStrategy::Quantiles(4));
        let cat = enumerate_basis(&design, &spec).unwrap();
        let lmax = lambda_max(cat.columns(), ds.outcome(), LossFamily::Binomial).unwrap();
        for ratio in [1.05, 0.995, 0.98, 0.95, 0.9, 0.8, 0.6, 0.4] {
            let fit = fit_lasso(
                cat.columns(),
                ds.outcome(),
                LossFamily::Binomial,
                lmax * ratio,
                None,
                None,
                &SolverOptions::default(),
            )
            .unwrap();
            if fit.active.len() == want {
                return Some(OutcomeModel::from_fit(cat.clone(), fit, ds).unwrap());
            }
        }
        None
    }

    #[test]
    fn trivial_active_sets_delegate_to_the_plain_update() {
        let ds = simulated_binary(60, 17);
        let g = true_g(&ds);
        let opts = OrthoTmleOptions::default();
        for want in [0usize, 1usize] {
            let q = outcome_with_active_count(&ds, want)
                .unwrap_or_else(|| panic!("no fit with {want} active columns on the ladder"));
            let (outcome, report) =
                orthogonalized_tmle_arm(&q, &g, &ds, Arm::Treated, &opts).unwrap();
            assert!(outcome.delegated_plain);
            let (_, plain) = tmle_update_tsm(&q, &g, &ds, &opts.tmle).unwrap();
            assert!(
                (report.psi_hat - plain.psi_hat).abs() < 1e-12,
                "delegated update must match the plain one: {} vs {}",
                report.psi_hat,
                plain.psi_hat
            );
            assert_eq!(
                report.diagnostics.orthogonal_score_abs,
                Some(report.diagnostics.pn_dstar_abs)
            );
        }
    }

    #[test]
    fn joint_update_zeroes_target_and_pattern_scores_together() {
        let ds = simulated_binary(150, 29);
        let q = hal_outcome(&ds, 0.1);
        assert!(
            q.fit().active.len() >= 2,
            "need a nontrivial active set, got {}",
            q.fit().active.len()
        );
        let g = true_g(&ds);
        let opts = OrthoTmleOptions::default();
        let (outcome, report) =
            orthogonalized_tmle_arm(&q, &g, &ds, Arm::Treated, &opts).unwrap();
        report.verify().unwrap();
        assert!(!outcome.delegated_plain);
        assert!(
            report.diagnostics.tol_met,
            "target score unmet: {:?}",
            report.diagnostics
        );
        assert!(
            outcome.pattern_score_max_abs <= 1e-9,
            "pattern scores not preserved: {}",
            outcome.pattern_score_max_abs
        );
        let battery = outcome
            .battery_max_abs_final
            .expect("active set is large enough for a battery");
        assert!(battery <= 1e-9, "battery degraded to {battery}");
        assert!(report.diagnostics.loglik_gain >= 0.0);
        assert!(!report.diagnostics.flagged, "{:?}", report.diagnostics.notes);
    }

    #[test]
    fn plain_update_breaks_scores_the_preserving_update_keeps() {
        // Deliberately coarse fit so the plain update must move a lot.
        let ds = simulated_binary(150, 31);
        let q = hal_outcome(&ds, 0.6);
        assert!(q.fit().active.len() >= 2);
        let g = true_g(&ds);
        let opts = OrthoTmleOptions::default();

        let (plain_out, plain_rep) = tmle_update_tsm(&q, &g, &ds, &opts.tmle).unwrap();
        assert!(plain_rep.diagnostics.tol_met);
        let plain_battery =
            battery_preservation(&q, &ds, &plain_out.qbar_obs_star, opts.battery_size, opts.battery_seed)
                .unwrap()
                .expect("battery defined");

        let (ortho_out, ortho_rep) =
            orthogonalized_tmle_arm(&q, &g, &ds, Arm::Treated, &opts).unwrap();
        assert!(ortho_rep.diagnostics.tol_met);
        let ortho_battery = ortho_out.battery_max_abs_final.unwrap();

        assert!(
            ortho_battery < plain_battery,
            "preserving update should beat the plain one: {ortho_battery} vs {plain_battery}"
        );
        assert!(ortho_battery <= 1e-9);
    }
}
