//! Score-path diagnostics for penalized fits.
//!
//! A direction h deforms the coefficients multiplicatively,
//! `beta_delta(j) = (1 + delta * h_j) * beta_j`, tracing a path through the
//! fit. Its empirical score is
//!
//! ```text
//! path_score(h) = P_n d/d delta L(Q_{beta_delta}) |_{delta=0}
//!               = sum_j h_j beta_j P_n dL/dbeta_j
//! ```
//!
//! and the l1 norm moves at rate `r(h, beta) = h_0 |beta_0| +
//! sum_j h_j |beta_j|`. At a KKT point of the penalized problem, active
//! slopes satisfy `P_n dL/dbeta_j = -lambda sign(beta_j)`, so every
//! norm-preserving slope direction (r = 0, no intercept component) has an
//! exactly vanishing path score: the lasso is an MLE along all paths that
//! respect its constraint. The diagnostics here recompute those identities
//! from data so downstream targeting steps can prove they preserved them.
//!
//! Directions that perturb the intercept are representable, but the
//! identity `path_score = -lambda * r` concerns slope directions: the
//! intercept is unpenalized in the optimization, so its score term vanishes
//! on its own rather than against the penalty.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::Column;
use crate::solver::{coefficient_gradients, HalFit};
use crate::{Error, Result};

/// Sparse direction over {intercept} ∪ slope indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub intercept: f64,
    /// (slope index, weight), strictly ascending indices.
    pub entries: Vec<(usize, f64)>,
}

impl Direction {
    pub fn zero() -> Self {
        Direction {
            intercept: 0.0,
            entries: Vec::new(),
        }
    }

    pub fn new(intercept: f64, entries: Vec<(usize, f64)>) -> Result<Self> {
        if !intercept.is_finite() {
            return Err(Error::invalid("direction intercept weight is not finite"));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(
                    "direction entries must have strictly ascending indices",
                ));
            }
        }
        if let Some((j, v)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "direction entry {j} is not finite: {v}"
            )));
        }
        Ok(Direction { intercept, entries })
    }
}

/// The constraint functional r(h, beta): the first-order rate of change of
/// the sectional variation norm along the multiplicative path in direction
/// h. Computed exactly as the weighted sum
/// `h(0) |beta(0)| + sum_j h_j |beta_j|`.
pub fn constraint_r(h: &Direction, intercept: f64, beta: &[f64]) -> f64 {
    let mut r = h.intercept * intercept.abs();
    for &(j, hj) in &h.entries {
        r += hj * beta[j].abs();
    }
    r
}

/// Empirical score of the multiplicative path in direction h at the fit:
/// `sum_j h_j beta_j P_n dL/dbeta_j` (intercept term included when h moves
/// it). Gradients use the fit's working-loss convention.
pub fn path_score(fit: &HalFit, h: &Direction, columns: &[Column], y: &[f64]) -> f64 {
    let (g0, grads) = coefficient_gradients(columns, y, fit.loss, fit.intercept, &fit.beta);
    path_score_from_gradients(h, fit.intercept, &fit.beta, g0, &grads)
}

/// Same as [`path_score`] but with the mean-scale residuals `y_i - mu_i`
/// supplied directly, so the battery can be re-evaluated after a targeting
/// update has moved the predictions away from the original fit.
pub fn path_score_with_residual(
    h: &Direction,
    intercept: f64,
    beta: &[f64],
    columns: &[Column],
    resid: &[f64],
) -> f64 {
    let n = resid.len() as f64;
    let mut score = 0.0;
    if h.intercept != 0.0 {
        let g0 = -crate::util::kahan_sum(resid.iter().copied()) / n;
        score += h.intercept * intercept * g0;
    }
    for &(j, hj) in &h.entries {
        if hj == 0.0 || beta[j] == 0.0 {
            continue;
        }
        let gj = -match &columns[j] {
            Column::Indicator(idx) => idx.iter().map(|&i| resid[i as usize]).sum::<f64>(),
            Column::Hinge(idx, vals) => idx
                .iter()
                .zip(vals)
                .map(|(&i, &v)| v * resid[i as usize])
                .sum::<f64>(),
        } / n;
        score += hj * beta[j] * gj;
    }
    score
}

fn path_score_from_gradients(
    h: &Direction,
    intercept: f64,
    beta: &[f64],
    g0: f64,
    grads: &[f64],
) -> f64 {
    let mut score = h.intercept * intercept * g0;
    for &(j, hj) in &h.entries {
        score += hj * beta[j] * grads[j];
    }
    score
}

/// Battery of norm-preserving random directions on the fit's active slopes.
///
/// Each direction starts standard normal on the active set, is projected to
/// r(h, beta) = 0 by absorbing its r-component into the first active
/// coordinate, and is normalized to `sum_j |h_j beta_j| = 1` so path-score
/// thresholds are scale-free. Needs at least two active slopes; otherwise
/// the battery is empty (a null or single-knot fit has no nontrivial
/// norm-preserving slope direction).
pub fn battery_directions(fit: &HalFit, battery_size: usize, seed: u64) -> Vec<Direction> {
    let active = &fit.active;
    if active.len() < 2 {
        return Vec::new();
    }
    let pivot = active[0];
    let mut rng = crate::sim::rng_for(seed, 0);
    let mut battery = Vec::with_capacity(battery_size);
    while battery.len() < battery_size {
        let mut entries: Vec<(usize, f64)> = active
            .iter()
            .map(|&j| (j, rng.sample::<f64, _>(StandardNormal)))
            .collect();
        // Project: r(h) = sum h_j |beta_j| -> 0 via the pivot coordinate.
        let r: f64 = entries.iter().map(|&(j, hj)| hj * fit.beta[j].abs()).sum();
        entries[0].1 -= r / fit.beta[pivot].abs();
        // Normalize the path-speed so thresholds mean the same thing at
        // every scale of beta.
        let speed: f64 = entries
            .iter()
            .map(|&(j, hj)| (hj * fit.beta[j]).abs())
            .sum();
        if speed < 1e-12 {
            continue; // degenerate draw; try again
        }
        for e in entries.iter_mut() {
            e.1 /= speed;
        }
        battery.push(Direction {
            intercept: 0.0,
            entries,
        });
    }
    battery
}

/// Score diagnostics recomputable from (fit, data): exact active-coordinate
/// residuals plus path scores over a norm-preserving battery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    pub lambda: f64,
    /// Active slope indices, ascending (mirrors `HalFit::active`).
    pub active: Vec<usize>,
    /// P_n dL/dbeta_j for each active j, in `active` order.
    pub active_score_residuals: Vec<f64>,
    pub max_abs_active_residual: f64,
    /// |P_n dL/db0|: unpenalized stationarity of the intercept.
    pub intercept_residual: f64,
    /// Path scores over the battery (all directions have r(h, beta) = 0
    /// and unit path speed).
    pub constrained_path_residuals: Vec<f64>,
    pub max_abs_path_residual: f64,
    /// |P_n D*| for a supplied influence function, when one applies.
    pub eif_residual: Option<f64>,
    /// True when fewer than two active slopes made the battery empty.
    pub battery_flagged: bool,
}

/// Recompute score diagnostics for a fit: exact gradients on the active
/// set and a seeded battery of norm-preserving directions.
pub fn score_diagnostics(
    fit: &HalFit,
    columns: &[Column],
    y: &[f64],
    battery_size: usize,
    seed: u64,
) -> ScoreDiagnostics {
    let (g0, grads) = coefficient_gradients(columns, y, fit.loss, fit.intercept, &fit.beta);
    let active = fit.active.clone();
    let active_score_residuals: Vec<f64> = active.iter().map(|&j| grads[j]).collect();
    let max_abs_active_residual = active_score_residuals
        .iter()
        .fold(0.0f64, |a, g| a.max(g.abs()));
    let battery = battery_directions(fit, battery_size, seed);
    let battery_flagged = battery.is_empty();
    let constrained_path_residuals: Vec<f64> = battery
        .iter()
        .map(|h| path_score_from_gradients(h, fit.intercept, &fit.beta, g0, &grads))
        .collect();
    let max_abs_path_residual = constrained_path_residuals
        .iter()
        .fold(0.0f64, |a, s| a.max(s.abs()));
    ScoreDiagnostics {
        lambda: fit.lambda,
        active,
        active_score_residuals,
        max_abs_active_residual,
        intercept_residual: g0.abs(),
        constrained_path_residuals,
        max_abs_path_residual,
        eif_residual: None,
        battery_flagged,
    }
}

/// Mean of an observation-level function over the sample:
/// `(1/n) sum_i f(i)`. Errors if any evaluation is non-finite, reporting
/// the offending row.
pub fn empirical_score_mean<F: Fn(usize) -> f64>(n: usize, f: F) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("empty sample"));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..n {
        let v = f(i);
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "score function returned {v} at row {i}"
            )));
        }
        let t = sum + (v - comp);
        comp = (t - sum) - (v - comp);
        sum = t;
    }
    Ok(sum / n as f64)
}
