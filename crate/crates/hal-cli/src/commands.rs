//! The seven subcommands. Each takes the merged [`RunConfig`], does its
//! work, writes reports under `out-dir`, prints a short summary, and
//! returns the process exit code (0, or 4 when a score criterion was left
//! unmet but the report was still written).
//!
//! Seed discipline: every stage derives its stream from `[run] seed` with a
//! fixed offset, so one seed pins the whole run — outcome-model folds use
//! the seed itself, mechanism folds `seed + 500_009`, collaborative
//! selection folds `seed + 900_007`, bootstrap resampling `seed + 700_003`,
//! and the rate experiment's per-job folds `seed + 1_000 + job`.

use std::io::BufRead;
use std::path::Path;

use hal_core::basis::{enumerate_basis, evaluate_basis, BasisCatalog, BasisSpec, KnotStrategy};
use hal_core::bootstrap::{bootstrap_plugin, plateau_select, PluginFeature};
use hal_core::data::{load_csv_path, make_folds, Dataset, Roles};
use hal_core::estimands::{
    ate, ctmle_select, ipw_tsm, orthogonalized_tmle_update, plugin_tsm, tmle_update_tsm, Arm,
    AteMethod, CtmleOptions, CtmleTrace, EstimandKind, OrthoTmleOptions, OutcomeModel,
    PropensityModel, TargetReport, TmleOptions,
};
use hal_core::scores::score_diagnostics;
use hal_core::selection::{
    cv_select_lambda_on_catalog, undersmooth_select, CvReport, UndersmoothConfig,
    UndersmoothReport,
};
use hal_core::sim::{
    dgp_by_id, oracle_estimator, pipeline_estimator, rate_experiment, run_mc,
    treated_mean_estimator, EstimatorKind, PipelineOptions,
};
use hal_core::solver::{HalFit, LassoPath, LossFamily, PathOptions, SolverOptions};

use crate::config::{CliError, CliResult, Estimand, Feature, Method, RunConfig};
use crate::reports::{
    knots_label, loss_label, write_json, write_text, BootstrapCommandReport, CvCommandReport,
    CvSummary, EstimateReport, FitReport, FitSummary, MechanismSummary, RateCommandReport,
    SimulateReport, SCHEMA_VERSION,
};

/// Directions in the seeded score battery attached to fit reports.
const SCORE_BATTERY: usize = 32;

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn path_options(cfg: &RunConfig) -> PathOptions {
    PathOptions {
        grid_size: cfg.grid_size,
        min_ratio: cfg.min_ratio,
        lambdas: None,
    }
}

fn undersmooth_config(cfg: &RunConfig) -> UndersmoothConfig {
    UndersmoothConfig {
        tol_const: cfg.tol_const,
        ..UndersmoothConfig::default()
    }
}

/// Binomial when every outcome value is 0/1, gaussian otherwise.
fn choose_loss(y: &[f64]) -> LossFamily {
    if y.iter().all(|&v| v == 0.0 || v == 1.0) {
        LossFamily::Binomial
    } else {
        LossFamily::Gaussian
    }
}

/// Roles for the run: an explicit declaration wins; otherwise the outcome
/// must be a column named `y`, and a column named `a` (when present)
/// doubles as the treatment.
fn resolve_roles(cfg: &RunConfig, data: &Path) -> CliResult<Roles> {
    if let Some(spec) = &cfg.roles {
        return crate::config::parse_roles(spec);
    }
    let file = std::fs::File::open(data)
        .map_err(|e| CliError::config(format!("data file {}: {e}", data.display())))?;
    let mut header = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| CliError::config(format!("data file {}: {e}", data.display())))?;
    let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if !names.contains(&"y") {
        return Err(CliError::config(format!(
            "data file {}: no column named 'y'; declare the outcome role with --roles y:<column>",
            data.display()
        )));
    }
    Ok(Roles {
        outcome: "y".into(),
        treatment: names.contains(&"a").then(|| "a".into()),
        covariates: None,
    })
}

fn load_dataset(cfg: &RunConfig, need_treatment: bool) -> CliResult<Dataset> {
    let data = cfg.data.as_ref().ok_or_else(|| {
        CliError::config("data: no dataset given; pass --data or set [data] path")
    })?;
    let roles = resolve_roles(cfg, data)?;
    let ds = load_csv_path(data, &roles)?;
    if need_treatment && ds.treatment().is_none() {
        return Err(CliError::config(
            "this command needs a treatment column; declare it with --roles a:<column>",
        ));
    }
    Ok(ds)
}

/// Cross-validated lasso fit of the outcome regression on the full
/// outcome design (covariates plus treatment when present).
struct OutcomeCv {
    catalog: BasisCatalog,
    cv: CvReport,
    fit: HalFit,
    path: LassoPath,
    loss: LossFamily,
}

fn cv_fit_outcome(cfg: &RunConfig, ds: &Dataset) -> CliResult<OutcomeCv> {
    let design = ds.outcome_design();
    let spec = BasisSpec::zero_order(cfg.max_degree.min(design.len()), cfg.knots);
    let catalog = enumerate_basis(&design, &spec)?;
    let folds = make_folds(ds.n(), cfg.folds, cfg.seed)?;
    let loss = choose_loss(ds.outcome());
    let (cv, fit, path) = cv_select_lambda_on_catalog(
        &catalog,
        ds.outcome(),
        loss,
        &folds,
        &path_options(cfg),
        &SolverOptions::default(),
    )?;
    Ok(OutcomeCv {
        catalog,
        cv,
        fit,
        path,
        loss,
    })
}

/// Exit code for a run whose reports are written: 4 when any score
/// criterion was left unmet, 0 otherwise.
fn exit_for(unmet: bool) -> i32 {
    if unmet {
        4
    } else {
        0
    }
}

// ---------------------------------------------------------------- fit / cv

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<i32> {
    let ds = load_dataset(cfg, false)?;
    let of = cv_fit_outcome(cfg, &ds)?;
    let y = ds.outcome();

    // Optional global undersmoothing: walk the path past the cv pick until
    // the worst absolute empirical score over the whole enumerated basis
    // drops below the efficiency threshold.
    let (fit, us) = if cfg.undersmooth {
        let eta0 = of.catalog.linear_predictor(of.fit.intercept, &of.fit.beta);
        let resid0: Vec<f64> = eta0
            .iter()
            .zip(y)
            .map(|(&e, &yi)| of.loss.mean_from_eta(e) - yi)
            .collect();
        let sigma_n = sd(&resid0);
        let criterion = |fit: &HalFit| -> hal_core::Result<f64> {
            let eta = of.catalog.linear_predictor(fit.intercept, &fit.beta);
            let resid: Vec<f64> = eta
                .iter()
                .zip(y)
                .map(|(&e, &yi)| of.loss.mean_from_eta(e) - yi)
                .collect();
            let n = resid.len() as f64;
            let mut worst = 0.0f64;
            for j in 0..of.catalog.p() {
                let col = of.catalog.column(j);
                let score: f64 = (0..resid.len())
                    .map(|i| col.value_at(i as u32) * resid[i])
                    .sum::<f64>()
                    / n;
                worst = worst.max(score.abs());
            }
            Ok(worst)
        };
        let (fit, report) = undersmooth_select(
            of.catalog.columns(),
            y,
            of.loss,
            &of.path,
            of.cv.selected,
            criterion,
            sigma_n,
            &undersmooth_config(cfg),
            &SolverOptions::default(),
        )?;
        (fit, Some(report))
    } else {
        (of.fit, None)
    };

    let scores = score_diagnostics(&fit, of.catalog.columns(), y, SCORE_BATTERY, cfg.seed);
    let unmet = us.as_ref().is_some_and(|r| r.criterion_unmet);
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        command: "fit",
        seed: cfg.seed,
        n: ds.n(),
        loss: loss_label(of.loss),
        knots: knots_label(cfg.knots),
        max_degree: cfg.max_degree,
        pre_dedup_basis: of.catalog.pre_dedup_count(),
        p: of.catalog.p(),
        cv: CvSummary::from_report(&of.cv),
        fit: FitSummary::from_fit(&fit),
        scores,
        undersmooth: us,
    };
    let path = write_json(&cfg.out_dir, "fit.json", &report)?;
    println!(
        "fit: n={} p={} (pre-dedup {}) lambda={:.6} l1_norm={:.4} cv_risk={:.6} -> {}",
        report.n,
        report.p,
        report.pre_dedup_basis,
        report.fit.lambda,
        report.fit.l1_norm,
        report.cv.mean_risks[report.cv.selected],
        path.display()
    );
    Ok(exit_for(unmet))
}

pub fn cmd_cv(cfg: &RunConfig) -> CliResult<i32> {
    let ds = load_dataset(cfg, false)?;
    let of = cv_fit_outcome(cfg, &ds)?;
    let report = CvCommandReport {
        schema_version: SCHEMA_VERSION,
        command: "cv",
        seed: cfg.seed,
        n: ds.n(),
        loss: loss_label(of.loss),
        p: of.catalog.p(),
        cv: of.cv,
        fit: FitSummary::from_fit(&of.fit),
    };
    let json = write_json(&cfg.out_dir, "cv.json", &report)?;
    write_text(&cfg.out_dir, "cv.csv", &report.cv.to_csv_string())?;
    println!(
        "cv: n={} p={} candidates={} selected={} risk={:.6} -> {}",
        report.n,
        report.p,
        report.cv.candidate_labels.len(),
        report.cv.selected,
        report.cv.mean_risks[report.cv.selected],
        json.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------- estimate

/// A fitted treatment mechanism plus the pieces the report needs.
struct MechanismFit {
    model: PropensityModel,
    summary: FitSummary,
    undersmooth: Option<UndersmoothReport>,
}

/// Binomial HAL for the propensity on the covariate design. When
/// `calibrate` is set (the IPW route under `[selection] undersmooth`),
/// walk the path until the truncated weights calibrate:
/// max over the needed arms of |P_n[1{A=a} / Ḡ_a − 1]| under the threshold.
fn fit_mechanism(
    cfg: &RunConfig,
    ds: &Dataset,
    calibrate: Option<Estimand>,
) -> CliResult<MechanismFit> {
    let a = ds
        .treatment()
        .expect("callers check the treatment role")
        .to_vec();
    let design = ds.covariate_design();
    let spec = BasisSpec::zero_order(cfg.max_degree.min(design.len()), cfg.knots);
    let catalog = enumerate_basis(&design, &spec)?;
    let folds = make_folds(ds.n(), cfg.folds, cfg.seed.wrapping_add(500_009))?;
    let (cv, cv_fit, path) = cv_select_lambda_on_catalog(
        &catalog,
        &a,
        LossFamily::Binomial,
        &folds,
        &path_options(cfg),
        &SolverOptions::default(),
    )?;
    let (lo, hi) = cfg.truncate;
    let (fit, us) = if let Some(estimand) = calibrate {
        let both = estimand == Estimand::Ate;
        let calib_terms = |fit: &HalFit| -> Vec<f64> {
            let eta = catalog.linear_predictor(fit.intercept, &fit.beta);
            let mut terms: Vec<f64> = (0..a.len())
                .map(|i| a[i] / expit(eta[i]).clamp(lo, hi) - 1.0)
                .collect();
            if both {
                terms.extend(
                    (0..a.len()).map(|i| (1.0 - a[i]) / (1.0 - expit(eta[i]).clamp(lo, hi)) - 1.0),
                );
            }
            terms
        };
        let base = calib_terms(&cv_fit);
        let sigma_n = sd(&base);
        let criterion = |fit: &HalFit| -> hal_core::Result<f64> {
            let terms = calib_terms(fit);
            let half = if both { terms.len() / 2 } else { terms.len() };
            let m1 = mean(&terms[..half]).abs();
            let m0 = if both { mean(&terms[half..]).abs() } else { 0.0 };
            Ok(m1.max(m0))
        };
        let (fit, report) = undersmooth_select(
            catalog.columns(),
            &a,
            LossFamily::Binomial,
            &path,
            cv.selected,
            criterion,
            sigma_n,
            &undersmooth_config(cfg),
            &SolverOptions::default(),
        )?;
        (fit, Some(report))
    } else {
        (cv_fit, None)
    };
    let summary = FitSummary::from_fit(&fit);
    let model = PropensityModel::from_hal(catalog, fit, cfg.truncate, "hal")?;
    Ok(MechanismFit {
        model,
        summary,
        undersmooth: us,
    })
}

/// Outcome HAL for estimation. Under `[selection] undersmooth`, walk the
/// path until the plug-in's |P_n D*| for the configured estimand meets the
/// efficiency threshold.
fn fit_outcome_for_estimation(
    cfg: &RunConfig,
    ds: &Dataset,
    g: &PropensityModel,
    topts: &TmleOptions,
) -> CliResult<(OutcomeModel, FitSummary, Option<UndersmoothReport>)> {
    let of = cv_fit_outcome(cfg, ds)?;
    let plugin_at = |fit: &HalFit| -> hal_core::Result<TargetReport> {
        let q = OutcomeModel::from_fit(of.catalog.clone(), fit.clone(), ds)?;
        match cfg.estimand {
            Estimand::Treated => plugin_tsm(&q, g, ds),
            Estimand::Ate => ate(&q, g, ds, AteMethod::Plugin, topts),
        }
    };
    let (fit, us) = if cfg.undersmooth {
        let base = plugin_at(&of.fit)?;
        let sigma_n = sd(&base.ic_values);
        let criterion = |fit: &HalFit| -> hal_core::Result<f64> {
            Ok(plugin_at(fit)?.diagnostics.pn_dstar_abs)
        };
        let (fit, report) = undersmooth_select(
            of.catalog.columns(),
            ds.outcome(),
            of.loss,
            &of.path,
            of.cv.selected,
            criterion,
            sigma_n,
            &undersmooth_config(cfg),
            &SolverOptions::default(),
        )?;
        (fit, Some(report))
    } else {
        (of.fit, None)
    };
    let summary = FitSummary::from_fit(&fit);
    let q = OutcomeModel::from_fit(of.catalog, fit, ds)?;
    Ok((q, summary, us))
}

fn estimand_label(kind: EstimandKind) -> &'static str {
    match kind {
        EstimandKind::TreatedMean => "treated-mean",
        EstimandKind::ControlMean => "control-mean",
        EstimandKind::Ate => "ate",
    }
}

fn format_estimate_table(r: &EstimateReport) -> String {
    let mut t = String::new();
    t.push_str(&format!("estimand    {}\n", r.estimand));
    t.push_str(&format!("method      {}\n", r.method));
    t.push_str(&format!("n           {}\n", r.n));
    t.push_str(&format!("psi_hat     {:.6}\n", r.psi_hat));
    t.push_str(&format!("se          {:.6}\n", r.se));
    t.push_str(&format!("ci95        [{:.6}, {:.6}]\n", r.ci.0, r.ci.1));
    t.push_str(&format!("|Pn D*|     {:.3e}\n", r.pn_dstar_abs));
    match r.tol {
        Some(tol) => t.push_str(&format!(
            "tol         {:.3e} ({})\n",
            tol,
            if r.tol_met { "met" } else { "UNMET" }
        )),
        None => t.push_str("tol         none\n"),
    }
    t.push_str(&format!("tmle_steps  {}\n", r.tmle_steps));
    if let Some(b) = r.battery_max_abs {
        t.push_str(&format!("battery     {:.3e}\n", b));
    }
    if let Some(sel) = &r.ctmle_selected {
        t.push_str(&format!("ctmle       candidates {:?}\n", sel));
    }
    t.push_str(&format!(
        "flagged     {}\n",
        if r.flagged { "yes" } else { "no" }
    ));
    for note in &r.notes {
        t.push_str(&format!("note        {note}\n"));
    }
    t
}

pub fn cmd_estimate(cfg: &RunConfig) -> CliResult<i32> {
    estimate_impl(cfg, cfg.method, "estimate")
}

pub fn cmd_ctmle(cfg: &RunConfig) -> CliResult<i32> {
    estimate_impl(cfg, Method::Ctmle, "ctmle")
}

fn estimate_impl(cfg: &RunConfig, method: Method, command: &'static str) -> CliResult<i32> {
    if method == Method::Ctmle && cfg.estimand == Estimand::Ate {
        return Err(CliError::config(
            "estimand: ate is not available under ctmle (its greedy selection targets one arm)",
        ));
    }
    let ds = load_dataset(cfg, true)?;
    let topts = TmleOptions {
        tol: cfg.tol,
        ..TmleOptions::default()
    };

    // Mechanism. The IPW route calibrates weights when undersmoothing is
    // on; every other route undersmooths the outcome model instead.
    let calibrate = (method == Method::Ipw && cfg.undersmooth).then_some(cfg.estimand);
    let mech = fit_mechanism(cfg, &ds, calibrate)?;
    let g = &mech.model;

    // Outcome model (IPW never uses one).
    let mut q_summary: Option<FitSummary> = None;
    let mut q_us: Option<UndersmoothReport> = None;
    let q_model: Option<OutcomeModel> = if method == Method::Ipw {
        None
    } else {
        let (q, summary, us) = fit_outcome_for_estimation(cfg, &ds, g, &topts)?;
        q_summary = Some(summary);
        q_us = us;
        Some(q)
    };

    let mut ctmle_selected: Option<Vec<usize>> = None;
    let mut ctmle_trace: Option<CtmleTrace> = None;
    let report: TargetReport = match method {
        Method::Plugin => {
            let q = q_model.as_ref().expect("plugin fits an outcome model");
            match cfg.estimand {
                Estimand::Treated => plugin_tsm(q, g, &ds)?,
                Estimand::Ate => ate(q, g, &ds, AteMethod::Plugin, &topts)?,
            }
        }
        Method::Ipw => match cfg.estimand {
            Estimand::Treated => ipw_tsm(g, &ds)?,
            Estimand::Ate => {
                // The IPW arms never read the outcome model, but the `ate`
                // signature wants one; the plain cv fit is the cheapest.
                let of = cv_fit_outcome(cfg, &ds)?;
                let q = OutcomeModel::from_fit(of.catalog, of.fit, &ds)?;
                ate(&q, g, &ds, AteMethod::Ipw, &topts)?
            }
        },
        Method::Tmle => {
            let q = q_model.as_ref().expect("tmle fits an outcome model");
            match cfg.estimand {
                Estimand::Treated => tmle_update_tsm(q, g, &ds, &topts)?.1,
                Estimand::Ate => ate(q, g, &ds, AteMethod::Tmle, &topts)?,
            }
        }
        Method::TmlePreserving => {
            let q = q_model.as_ref().expect("tmle fits an outcome model");
            match cfg.estimand {
                Estimand::Treated => {
                    let ortho = OrthoTmleOptions {
                        tmle: topts,
                        battery_seed: cfg.seed,
                        ..OrthoTmleOptions::default()
                    };
                    orthogonalized_tmle_update(q, g, &ds, &ortho)?.1
                }
                Estimand::Ate => ate(q, g, &ds, AteMethod::TmlePreserving, &topts)?,
            }
        }
        Method::Ctmle => {
            let q = q_model.as_ref().expect("ctmle fits an outcome model");
            let ladder: Vec<PropensityModel> = cfg
                .ctmle_ladder
                .iter()
                .map(|&b| g.with_bounds(b, format!("trunc-{}-{}", b.0, b.1)))
                .collect::<hal_core::Result<_>>()?;
            let folds = make_folds(ds.n(), cfg.folds, cfg.seed.wrapping_add(900_007))?;
            let copts = CtmleOptions {
                tmle: topts,
                arm: Arm::Treated,
            };
            let (trace, report) = ctmle_select(q, &ladder, &ds, &folds, &copts)?;
            ctmle_selected = Some(trace.selected_candidates());
            ctmle_trace = Some(trace);
            report
        }
    };

    let d = &report.diagnostics;
    let unmet = !d.tol_met
        || q_us.as_ref().is_some_and(|r| r.criterion_unmet)
        || mech
            .undersmooth
            .as_ref()
            .is_some_and(|r| r.criterion_unmet);
    let us_report = q_us.or(mech.undersmooth);
    let out = EstimateReport {
        schema_version: SCHEMA_VERSION,
        command,
        method: method.label(),
        seed: cfg.seed,
        n: ds.n(),
        estimand: estimand_label(report.estimand).to_string(),
        psi_hat: report.psi_hat,
        se: report.se,
        ci: report.ci,
        pn_dstar_abs: d.pn_dstar_abs,
        tol: d.tol,
        tol_met: d.tol_met,
        tmle_steps: d.tmle_steps,
        loglik_gain: d.loglik_gain,
        flagged: d.flagged,
        notes: d.notes.clone(),
        battery_max_abs: d.battery_max_abs,
        ctmle_selected,
        ctmle_trace,
        g: MechanismSummary {
            label: g.label().to_string(),
            bounds: g.bounds(),
            truncation_hits: g.truncation_hits(),
            fit: Some(mech.summary),
        },
        q: q_summary,
        undersmooth: us_report,
    };
    let json = write_json(&cfg.out_dir, &format!("{command}.json"), &out)?;
    let table = format_estimate_table(&out);
    write_text(&cfg.out_dir, &format!("{command}.txt"), &table)?;
    print!("{table}");
    println!("report      {}", json.display());
    Ok(exit_for(unmet))
}

// --------------------------------------------------------------- bootstrap

pub fn cmd_bootstrap(cfg: &RunConfig) -> CliResult<i32> {
    let ds = load_dataset(cfg, false)?;
    // Default feature: the treated-arm mean when a treatment role exists,
    // the fitted mean otherwise.
    let feature = cfg.feature.unwrap_or(if ds.treatment().is_some() {
        Feature::Treated
    } else {
        Feature::Mean
    });
    let plugin_feature = match feature {
        Feature::Mean => PluginFeature::FittedMean,
        Feature::Treated => PluginFeature::ArmMean(Arm::Treated),
        Feature::Control => PluginFeature::ArmMean(Arm::Control),
        Feature::Ate => PluginFeature::Ate,
    };
    if feature != Feature::Mean && ds.treatment().is_none() {
        return Err(CliError::config(format!(
            "feature '{}' needs a treatment column; declare it with --roles a:<column>",
            feature.label()
        )));
    }
    // The bootstrap works off the cv fit (or the plateau scan past it);
    // `[selection] undersmooth` does not apply here.
    let of = cv_fit_outcome(cfg, &ds)?;
    let seed_boot = cfg.seed.wrapping_add(700_003);
    let solver = SolverOptions::default();
    let rep = if cfg.plateau {
        plateau_select(
            &of.catalog,
            &ds,
            &of.path,
            of.cv.selected,
            plugin_feature,
            cfg.b,
            seed_boot,
            &solver,
        )?
    } else {
        bootstrap_plugin(
            &of.catalog,
            &of.fit,
            &ds,
            plugin_feature,
            cfg.b,
            seed_boot,
            &solver,
        )?
    };
    rep.verify()?;
    let out = BootstrapCommandReport::from_report(&rep, ds.n(), cfg.seed);
    let json = write_json(&cfg.out_dir, "bootstrap.json", &out)?;
    println!(
        "bootstrap: feature={} B={} psi_hat={:.6} se={:.6} ci95=[{:.6}, {:.6}]{} -> {}",
        out.feature,
        out.b,
        out.psi_hat,
        out.se_bootstrap,
        out.ci_percentile.0,
        out.ci_percentile.1,
        if out.flagged { " FLAGGED" } else { "" },
        json.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------- simulate

enum SimEstimator {
    Kind(EstimatorKind),
    Oracle,
    TreatedMean,
}

fn parse_estimator(s: &str) -> CliResult<(SimEstimator, &'static str)> {
    match s.trim().to_ascii_lowercase().as_str() {
        "plugin" => Ok((SimEstimator::Kind(EstimatorKind::Plugin), "plugin")),
        "ipw" => Ok((SimEstimator::Kind(EstimatorKind::Ipw), "ipw")),
        "tmle" => Ok((SimEstimator::Kind(EstimatorKind::Tmle), "tmle")),
        "tmle_preserving" | "tmle-preserving" => Ok((
            SimEstimator::Kind(EstimatorKind::TmlePreserving),
            "tmle-preserving",
        )),
        "ctmle" => Ok((SimEstimator::Kind(EstimatorKind::Ctmle), "ctmle")),
        "oracle" => Ok((SimEstimator::Oracle, "oracle")),
        "treated-mean" | "treated_mean" => Ok((SimEstimator::TreatedMean, "treated-mean")),
        other => Err(CliError::config(format!(
            "estimator: unknown value '{other}' \
             (want plugin|ipw|tmle|tmle_preserving|ctmle|oracle|treated-mean)"
        ))),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<i32> {
    let dgp = dgp_by_id(&cfg.sim_dgp)?;
    let (estimator, label) = parse_estimator(&cfg.estimator)?;
    let truth = dgp.psi0(Arm::Treated);
    let result = match estimator {
        SimEstimator::Oracle => run_mc(
            dgp,
            label,
            truth,
            cfg.n,
            cfg.replicates,
            cfg.seed,
            oracle_estimator(truth),
        )?,
        SimEstimator::TreatedMean => run_mc(
            dgp,
            label,
            truth,
            cfg.n,
            cfg.replicates,
            cfg.seed,
            treated_mean_estimator(),
        )?,
        SimEstimator::Kind(kind) => {
            let opts = PipelineOptions {
                folds: cfg.folds,
                path: path_options(cfg),
                knots: cfg.knots,
                max_degree: cfg.max_degree,
                truncation: cfg.truncate,
                use_true_g: cfg.use_true_g,
                undersmooth_q: cfg.undersmooth && kind != EstimatorKind::Ipw,
                undersmooth_g: cfg.undersmooth && kind == EstimatorKind::Ipw,
                undersmooth: undersmooth_config(cfg),
                tmle: TmleOptions {
                    tol: cfg.tol,
                    ..TmleOptions::default()
                },
                ctmle_truncations: cfg.ctmle_ladder.clone(),
                ..PipelineOptions::default()
            };
            run_mc(
                dgp,
                label,
                truth,
                cfg.n,
                cfg.replicates,
                cfg.seed,
                pipeline_estimator(dgp, kind, opts),
            )?
        }
    };
    let out = SimulateReport::from_result(&result);
    let json = write_json(&cfg.out_dir, "simulate.json", &out)?;
    write_text(&cfg.out_dir, "simulate.csv", &result.to_csv_string())?;
    println!(
        "simulate: dgp={} estimator={} n={} replicates={} bias={:.4e} coverage={:.3} failures={} -> {}",
        out.dgp, out.estimator, out.n, out.replicates, out.bias, out.coverage, out.failures,
        json.display()
    );
    Ok(0)
}

// -------------------------------------------------------------------- rate

pub fn cmd_rate(cfg: &RunConfig) -> CliResult<i32> {
    let dgp = dgp_by_id(&cfg.rate_dgp)?;
    let folds = cfg.folds;
    let max_degree = cfg.max_degree;
    let path = path_options(cfg);
    let seed = cfg.seed;
    let rate = rate_experiment(
        dgp,
        &cfg.n_grid,
        cfg.rate_replicates,
        cfg.seed,
        cfg.quadrature,
        move |ds, job| {
            // The knot budget must grow with n for the sieve to keep
            // refining, so this command sizes it as ceil(2 n^(1/3))
            // rather than taking `[model] knots`.
            let n = ds.n();
            let k = (2.0 * (n as f64).powf(1.0 / 3.0)).ceil() as usize;
            let design = ds.covariate_design();
            let spec = BasisSpec::zero_order(max_degree.min(design.len()), KnotStrategy::Quantiles(k));
            let catalog = enumerate_basis(&design, &spec)?;
            let plan = make_folds(n, folds, seed.wrapping_add(1_000).wrapping_add(job))?;
            let loss = choose_loss(ds.outcome());
            let (_, fit, _) = cv_select_lambda_on_catalog(
                &catalog,
                ds.outcome(),
                loss,
                &plan,
                &path,
                &SolverOptions::default(),
            )?;
            let functions = catalog.functions().to_vec();
            let (intercept, beta, active) = (fit.intercept, fit.beta, fit.active);
            Ok(move |w: &[f64]| {
                let eta = active
                    .iter()
                    .fold(intercept, |acc, &j| acc + beta[j] * evaluate_basis(&functions[j], w));
                loss.mean_from_eta(eta)
            })
        },
    )?;
    let out = RateCommandReport {
        schema_version: SCHEMA_VERSION,
        command: "rate",
        rate,
    };
    let json = write_json(&cfg.out_dir, "rate.json", &out)?;
    write_text(&cfg.out_dir, "rate.csv", &out.rate.to_csv_string())?;
    let errs: Vec<String> = out
        .rate
        .points
        .iter()
        .map(|p| format!("{}:{:.4}", p.n, p.mean_l2_error))
        .collect();
    println!(
        "rate: dgp={} errors [{}] loglog_slope={:.3} -> {}",
        out.rate.dgp_id,
        errs.join(", "),
        out.rate.loglog_slope,
        json.display()
    );
    Ok(0)
}
