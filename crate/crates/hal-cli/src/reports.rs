//! Report envelopes and emission. Every JSON document carries a
//! `schema_version` and is written deterministically: field order is fixed
//! by the structs, and nothing volatile (timestamps, durations, absolute
//! paths) is recorded.

use std::path::{Path, PathBuf};

use hal_core::basis::KnotStrategy;
use hal_core::bootstrap::{BootstrapReport, PlateauPoint};
use hal_core::estimands::CtmleTrace;
use hal_core::scores::ScoreDiagnostics;
use hal_core::selection::{CvReport, UndersmoothReport};
use hal_core::sim::{RateReport, SimResult};
use hal_core::solver::{HalFit, LossFamily};
use serde::Serialize;

use crate::config::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

pub fn loss_label(loss: LossFamily) -> &'static str {
    match loss {
        LossFamily::Gaussian => "gaussian",
        LossFamily::Binomial => "binomial",
    }
}

pub fn knots_label(k: KnotStrategy) -> String {
    match k {
        KnotStrategy::AllObservations => "all".into(),
        KnotStrategy::Quantiles(q) => format!("quantiles:{q}"),
    }
}

/// Compact view of one lasso fit: everything needed to audit or reproduce
/// the selection, without the dense coefficient vector.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub lambda: f64,
    pub l1_norm: f64,
    pub intercept: f64,
    /// Active column indices into the enumerated basis, ascending.
    pub active: Vec<usize>,
    /// Coefficients in `active` order.
    pub beta_active: Vec<f64>,
    pub train_risk: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub sweeps: usize,
}

impl FitSummary {
    pub fn from_fit(fit: &HalFit) -> FitSummary {
        FitSummary {
            lambda: fit.lambda,
            l1_norm: fit.l1_norm,
            intercept: fit.intercept,
            active: fit.active.clone(),
            beta_active: fit.active.iter().map(|&j| fit.beta[j]).collect(),
            train_risk: fit.train_risk,
            kkt_residual: fit.kkt_residual,
            converged: fit.converged,
            sweeps: fit.sweeps,
        }
    }
}

/// Cross-validation outcome without the per-fold table.
#[derive(Debug, Clone, Serialize)]
pub struct CvSummary {
    pub candidates: Vec<String>,
    pub mean_risks: Vec<f64>,
    pub selected: usize,
}

impl CvSummary {
    pub fn from_report(cv: &CvReport) -> CvSummary {
        CvSummary {
            candidates: cv.candidate_labels.clone(),
            mean_risks: cv.mean_risks.clone(),
            selected: cv.selected,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub loss: &'static str,
    pub knots: String,
    pub max_degree: usize,
    pub pre_dedup_basis: usize,
    pub p: usize,
    pub cv: CvSummary,
    pub fit: FitSummary,
    pub scores: ScoreDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undersmooth: Option<UndersmoothReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvCommandReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub loss: &'static str,
    pub p: usize,
    pub cv: CvReport,
    pub fit: FitSummary,
}

/// Fitted-mechanism summary attached to estimate reports.
#[derive(Debug, Clone, Serialize)]
pub struct MechanismSummary {
    pub label: String,
    pub bounds: (f64, f64),
    pub truncation_hits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub method: &'static str,
    pub seed: u64,
    pub n: usize,
    pub estimand: String,
    pub psi_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub pn_dstar_abs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    pub tol_met: bool,
    pub tmle_steps: usize,
    pub loglik_gain: f64,
    pub flagged: bool,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub battery_max_abs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctmle_selected: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctmle_trace: Option<CtmleTrace>,
    pub g: MechanismSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<FitSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undersmooth: Option<UndersmoothReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapCommandReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub n: usize,
    pub feature: String,
    pub b: usize,
    pub psi_hat: f64,
    pub se_bootstrap: f64,
    pub ci_percentile: (f64, f64),
    pub ci_wald: (f64, f64),
    pub failures: usize,
    pub selected_l1_norm: f64,
    pub flagged: bool,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan: Option<Vec<PlateauPoint>>,
}

impl BootstrapCommandReport {
    pub fn from_report(rep: &BootstrapReport, n: usize, seed: u64) -> BootstrapCommandReport {
        BootstrapCommandReport {
            schema_version: SCHEMA_VERSION,
            command: "bootstrap",
            seed,
            n,
            feature: rep.feature.label().to_string(),
            b: rep.b,
            psi_hat: rep.psi_hat,
            se_bootstrap: rep.se_bootstrap,
            ci_percentile: rep.ci_percentile,
            ci_wald: rep.ci_wald,
            failures: rep.failures.len(),
            selected_l1_norm: rep.selected_l1_norm,
            flagged: rep.flagged,
            notes: rep.notes.clone(),
            scan: if rep.scan.is_empty() {
                None
            } else {
                Some(rep.scan.clone())
            },
        }
    }
}

/// Monte Carlo aggregates without the per-replicate rows (those go to CSV).
#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub dgp: String,
    pub estimator: String,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub truth: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
    pub mean_se: f64,
    pub mean_ic_variance: f64,
    pub mean_abs_pn_dstar: f64,
    pub score_solved_fraction: f64,
    pub failures: usize,
}

impl SimulateReport {
    pub fn from_result(r: &SimResult) -> SimulateReport {
        SimulateReport {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            dgp: r.dgp_id.clone(),
            estimator: r.estimator.clone(),
            n: r.n,
            replicates: r.replicates,
            seed: r.seed,
            truth: r.truth,
            bias: r.bias,
            variance: r.variance,
            mse: r.mse,
            coverage: r.coverage,
            mean_ci_width: r.mean_ci_width,
            mean_se: r.mean_se,
            mean_ic_variance: r.mean_ic_variance,
            mean_abs_pn_dstar: r.mean_abs_pn_dstar,
            score_solved_fraction: r.score_solved_fraction,
            failures: r.failures.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RateCommandReport {
    pub schema_version: u32,
    pub command: &'static str,
    #[serde(flatten)]
    pub rate: RateReport,
}

/// Write a JSON document (pretty, trailing newline) under `out_dir`.
/// Returns the path written.
pub fn write_json<T: Serialize>(out_dir: &Path, name: &str, doc: &T) -> CliResult<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| {
        CliError::config(format!("out-dir {}: {e}", out_dir.display()))
    })?;
    let path = out_dir.join(name);
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::Numeric(format!("serializing {name}: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| CliError::config(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

/// Write plain text (CSV tables) under `out_dir`. Returns the path written.
pub fn write_text(out_dir: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| {
        CliError::config(format!("out-dir {}: {e}", out_dir.display()))
    })?;
    let path = out_dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| CliError::config(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}
