//! Seeded simulation harness: built-in data-generating processes with
//! quadrature-computed truths, a Monte Carlo driver for the estimators, and
//! the rate-of-convergence experiment.
//!
//! Every process lives on the unit cube: `W ~ Uniform(0,1)^d`,
//! `A | W ~ Bernoulli(Ḡ₀(W))`, and `Y` drawn around `Q̄₀(A, W)` per the
//! noise law. Truths are computed by tensor midpoint quadrature when a
//! process is assembled, so every Monte Carlo claim is checked against an
//! oracle that exists before any estimator runs. All randomness flows from
//! one explicit seed through per-replicate streams, so results do not
//! depend on thread scheduling.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{enumerate_basis, BasisSpec, KnotStrategy};
use crate::data::{make_folds, Dataset};
use crate::estimands::{
    ctmle_select, integrate_unit_cube, ipw_tsm, orthogonalized_tmle_update, plugin_tsm,
    tmle_update_tsm, Arm, CtmleOptions, OrthoTmleOptions, OutcomeModel, PropensityModel,
    TargetReport, TmleOptions, DEFAULT_TRUNCATION,
};
use crate::selection::{
    cv_select_lambda_on_catalog, undersmooth_select, UndersmoothConfig,
};
use crate::solver::{LossFamily, PathOptions, SolverOptions};
use crate::util::{expit, kahan_sum, mean, sd, variance};
use crate::{Error, Result};

/// Deterministic RNG for (seed, stream): replicate k of a run seeded with s
/// always sees the same stream, independent of thread scheduling.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Outcome noise attached to the regression truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// `Y ~ Bernoulli(Q̄₀(A, W))`.
    Bernoulli,
    /// `Y = Q̄₀(A, W) + Normal(0, sd)`.
    Gaussian { sd: f64 },
}

/// A data-generating process on the unit cube with analytically accessible
/// truths. The arm means are cached at construction by tensor midpoint
/// quadrature; the propensity range comes from a grid scan that includes
/// the cube's corners.
#[derive(Debug, Clone)]
pub struct Dgp {
    id: String,
    d: usize,
    gbar: fn(&[f64]) -> f64,
    qbar: fn(f64, &[f64]) -> f64,
    noise: NoiseKind,
    quadrature_points: usize,
    psi_treated: f64,
    psi_control: f64,
    gbar_min: f64,
    gbar_max: f64,
}

impl Dgp {
    /// Assemble a process: compute and cache both arm means at
    /// `points_per_axis` midpoints per axis, and scan the propensity over
    /// the same grid plus the cube's corners. Errors when the propensity
    /// leaves (0, 1) or a mean does not integrate finitely.
    pub fn new(
        id: impl Into<String>,
        d: usize,
        gbar: fn(&[f64]) -> f64,
        qbar: fn(f64, &[f64]) -> f64,
        noise: NoiseKind,
        points_per_axis: usize,
    ) -> Result<Dgp> {
        if d == 0 {
            return Err(Error::invalid("a process needs at least one covariate"));
        }
        if points_per_axis < 2 {
            return Err(Error::invalid("quadrature needs at least two points per axis"));
        }
        if let NoiseKind::Gaussian { sd } = noise {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::invalid(format!("noise sd {sd} must be positive")));
            }
        }
        let psi_treated =
            integrate_unit_cube(d, points_per_axis, |_| 1.0, |w| qbar(1.0, w))?;
        let psi_control =
            integrate_unit_cube(d, points_per_axis, |_| 1.0, |w| qbar(0.0, w))?;

        // Propensity range by grid minimization; corners are included
        // because monotone mechanisms attain their extremes there.
        let scan = points_per_axis.min(200);
        let mut gmin = f64::INFINITY;
        let mut gmax = f64::NEG_INFINITY;
        let mut visit = |w: &[f64]| -> Result<()> {
            let g = gbar(w);
            if !(g.is_finite() && g > 0.0 && g < 1.0) {
                return Err(Error::invalid(format!(
                    "propensity {g} at {w:?} leaves (0, 1)"
                )));
            }
            gmin = gmin.min(g);
            gmax = gmax.max(g);
            Ok(())
        };
        let mut idx = vec![0usize; d];
        let mut w = vec![0.0f64; d];
        'grid: loop {
            for j in 0..d {
                w[j] = (idx[j] as f64 + 0.5) / scan as f64;
            }
            visit(&w)?;
            let mut j = 0;
            loop {
                idx[j] += 1;
                if idx[j] < scan {
                    break;
                }
                idx[j] = 0;
                j += 1;
                if j == d {
                    break 'grid;
                }
            }
        }
        for corner in 0..(1usize << d) {
            for j in 0..d {
                w[j] = if corner >> j & 1 == 1 { 1.0 } else { 0.0 };
            }
            visit(&w)?;
        }

        Ok(Dgp {
            id: id.into(),
            d,
            gbar,
            qbar,
            noise,
            quadrature_points: points_per_axis,
            psi_treated,
            psi_control,
            gbar_min: gmin,
            gbar_max: gmax,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    pub fn gbar_at(&self, w: &[f64]) -> f64 {
        (self.gbar)(w)
    }

    pub fn qbar_at(&self, a: f64, w: &[f64]) -> f64 {
        (self.qbar)(a, w)
    }

    /// True marginal regression `E[Y | W = w]`, marginalized over the
    /// treatment mechanism.
    pub fn marginal_regression(&self, w: &[f64]) -> f64 {
        let g = (self.gbar)(w);
        g * (self.qbar)(1.0, w) + (1.0 - g) * (self.qbar)(0.0, w)
    }

    /// Cached true arm mean.
    pub fn psi0(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Treated => self.psi_treated,
            Arm::Control => self.psi_control,
        }
    }

    /// Cached true average treatment effect.
    pub fn ate0(&self) -> f64 {
        self.psi_treated - self.psi_control
    }

    /// (min, max) of the propensity over the scanned grid and corners.
    pub fn gbar_range(&self) -> (f64, f64) {
        (self.gbar_min, self.gbar_max)
    }

    /// Recompute an arm mean at the construction grid and its doubling and
    /// return both; the difference certifies quadrature stability. Checked
    /// once per built-in process by the test suite (doubling a 3-D grid is
    /// too heavy to pay on every construction).
    pub fn psi0_stability(&self, arm: Arm) -> Result<(f64, f64)> {
        let level = arm.level();
        let coarse =
            integrate_unit_cube(self.d, self.quadrature_points, |_| 1.0, |w| (self.qbar)(level, w))?;
        let fine = integrate_unit_cube(self.d, 2 * self.quadrature_points, |_| 1.0, |w| {
            (self.qbar)(level, w)
        })?;
        Ok((coarse, fine))
    }

    /// True propensity at each row of a dataset, for known-mechanism
    /// estimation.
    pub fn true_propensities(&self, ds: &Dataset) -> Result<Vec<f64>> {
        if ds.d() != self.d {
            return Err(Error::invalid(format!(
                "dataset has {} covariates, process has {}",
                ds.d(),
                self.d
            )));
        }
        let mut w = vec![0.0f64; self.d];
        Ok((0..ds.n())
            .map(|i| {
                for j in 0..self.d {
                    w[j] = ds.covariate(j)[i];
                }
                (self.gbar)(&w)
            })
            .collect())
    }

    /// Draw a dataset of `n` observations.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::invalid("cannot sample zero observations"));
        }
        let mut covs: Vec<Vec<f64>> = (0..self.d).map(|_| Vec::with_capacity(n)).collect();
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut w = vec![0.0f64; self.d];
        for _ in 0..n {
            for j in 0..self.d {
                w[j] = rng.gen::<f64>();
                covs[j].push(w[j]);
            }
            let ai = if rng.gen::<f64>() < (self.gbar)(&w) {
                1.0
            } else {
                0.0
            };
            a.push(ai);
            let q = (self.qbar)(ai, &w);
            let yi = match self.noise {
                NoiseKind::Bernoulli => {
                    if rng.gen::<f64>() < q {
                        1.0
                    } else {
                        0.0
                    }
                }
                NoiseKind::Gaussian { sd } => {
                    let z: f64 = StandardNormal.sample(rng);
                    q + sd * z
                }
            };
            y.push(yi);
        }
        Dataset::new(
            covs,
            (1..=self.d).map(|j| format!("w{j}")).collect(),
            Some(a),
            Some("a".into()),
            y,
            "y".into(),
        )
    }
}

fn gbar_a(w: &[f64]) -> f64 {
    expit(0.4 * w[0] - 0.5 * w[1] + 0.2)
}

fn qbar_a(a: f64, w: &[f64]) -> f64 {
    expit(a + w[0] * w[1] - 0.5)
}

fn gbar_b(w: &[f64]) -> f64 {
    expit(0.4 * w[0] - 0.5 * w[1] + 3.0 * w[2] - 2.5)
}

fn gbar_half(_: &[f64]) -> f64 {
    0.5
}

fn qbar_c(_a: f64, w: &[f64]) -> f64 {
    let mut q = 0.5;
    if w[0] >= 0.3 {
        q += 1.0;
    }
    if w[1] >= 0.6 {
        q += 0.8;
    }
    if w[0] >= 0.6 && w[1] >= 0.3 {
        q -= 1.2;
    }
    q
}

static DGP_A: OnceLock<Dgp> = OnceLock::new();
static DGP_B: OnceLock<Dgp> = OnceLock::new();
static DGP_C: OnceLock<Dgp> = OnceLock::new();

/// DGP-A: two smooth confounders, binary outcome, comfortable positivity.
pub fn dgp_a() -> &'static Dgp {
    DGP_A.get_or_init(|| {
        Dgp::new("DGP-A", 2, gbar_a, qbar_a, NoiseKind::Bernoulli, 800).expect("DGP-A")
    })
}

/// DGP-B: DGP-A plus an instrument `w3` that drives treatment hard (the
/// propensity dips below 0.05) but never enters the outcome.
pub fn dgp_b() -> &'static Dgp {
    DGP_B.get_or_init(|| {
        Dgp::new("DGP-B", 3, gbar_b, qbar_a, NoiseKind::Bernoulli, 500).expect("DGP-B")
    })
}

/// DGP-C: randomized treatment, continuous outcome around a two-dimensional
/// step function (finite sectional variation, nowhere smooth).
pub fn dgp_c() -> &'static Dgp {
    DGP_C.get_or_init(|| {
        Dgp::new(
            "DGP-C",
            2,
            gbar_half,
            qbar_c,
            NoiseKind::Gaussian { sd: 0.5 },
            800,
        )
        .expect("DGP-C")
    })
}

/// The built-in processes, in id order.
pub fn builtin_dgps() -> Vec<&'static Dgp> {
    vec![dgp_a(), dgp_b(), dgp_c()]
}

/// Look up a built-in process by id (case-insensitive).
pub fn dgp_by_id(id: &str) -> Result<&'static Dgp> {
    match id.to_ascii_uppercase().as_str() {
        "DGP-A" | "A" => Ok(dgp_a()),
        "DGP-B" | "B" => Ok(dgp_b()),
        "DGP-C" | "C" => Ok(dgp_c()),
        other => Err(Error::invalid(format!(
            "unknown process '{other}'; built-ins are DGP-A, DGP-B, DGP-C"
        ))),
    }
}

/// What one replicate's estimator hands back to the harness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub psi_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub pn_dstar_abs: f64,
    /// The estimator's own score-tolerance verdict (true when no tolerance
    /// applies).
    pub tol_met: bool,
    pub flagged: bool,
}

impl From<&TargetReport> for McEstimate {
    fn from(r: &TargetReport) -> McEstimate {
        McEstimate {
            psi_hat: r.psi_hat,
            se: r.se,
            ci: r.ci,
            pn_dstar_abs: r.diagnostics.pn_dstar_abs,
            tol_met: r.diagnostics.tol_met,
            flagged: r.diagnostics.flagged,
        }
    }
}

/// One replicate as recorded by [`run_mc`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub rep: usize,
    pub psi_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub pn_dstar_abs: f64,
    pub tol_met: bool,
    pub flagged: bool,
    /// Wall-clock seconds for this replicate. Kept in memory for profiling
    /// but excluded from serialized reports so identical runs produce
    /// identical bytes.
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Aggregated Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub dgp_id: String,
    pub estimator: String,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub truth: f64,
    pub bias: f64,
    /// Population variance of the estimates across replicates.
    pub variance: f64,
    pub mse: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
    pub mean_se: f64,
    /// Mean of the per-replicate influence-curve variance estimates
    /// (se², i.e. var(IC)/n), for variance-agreement checks.
    pub mean_ic_variance: f64,
    pub mean_abs_pn_dstar: f64,
    /// Fraction of successful replicates whose score tolerance was met.
    pub score_solved_fraction: f64,
    pub rows: Vec<ReplicateRow>,
    /// (replicate index, error message) for replicates that failed.
    pub failures: Vec<(usize, String)>,
}

impl SimResult {
    fn from_rows(
        dgp_id: &str,
        estimator: &str,
        n: usize,
        replicates: usize,
        seed: u64,
        truth: f64,
        rows: Vec<ReplicateRow>,
        failures: Vec<(usize, String)>,
    ) -> Result<SimResult> {
        if rows.is_empty() {
            return Err(Error::numeric(format!(
                "all {replicates} replicates failed; first error: {}",
                failures
                    .first()
                    .map(|(_, m)| m.as_str())
                    .unwrap_or("none recorded")
            )));
        }
        let psi: Vec<f64> = rows.iter().map(|r| r.psi_hat).collect();
        let widths: Vec<f64> = rows.iter().map(|r| r.ci_hi - r.ci_lo).collect();
        let ses: Vec<f64> = rows.iter().map(|r| r.se).collect();
        let ic_vars: Vec<f64> = rows.iter().map(|r| r.se * r.se).collect();
        let sq_err: Vec<f64> = rows.iter().map(|r| (r.psi_hat - truth).powi(2)).collect();
        let pn: Vec<f64> = rows.iter().map(|r| r.pn_dstar_abs).collect();
        let covered: Vec<f64> = rows
            .iter()
            .map(|r| if r.covered { 1.0 } else { 0.0 })
            .collect();
        let solved: Vec<f64> = rows
            .iter()
            .map(|r| if r.tol_met { 1.0 } else { 0.0 })
            .collect();
        Ok(SimResult {
            dgp_id: dgp_id.into(),
            estimator: estimator.into(),
            n,
            replicates,
            seed,
            truth,
            bias: mean(&psi) - truth,
            variance: variance(&psi),
            mse: mean(&sq_err),
            coverage: mean(&covered),
            mean_ci_width: mean(&widths),
            mean_se: mean(&ses),
            mean_ic_variance: mean(&ic_vars),
            mean_abs_pn_dstar: mean(&pn),
            score_solved_fraction: mean(&solved),
            rows,
            failures,
        })
    }

    /// Fraction of replicates that failed outright.
    pub fn failure_fraction(&self) -> f64 {
        self.failures.len() as f64 / self.replicates as f64
    }

    /// Recheck the aggregate invariants from the stored rows.
    pub fn verify(&self) -> Result<()> {
        if self.rows.len() + self.failures.len() != self.replicates {
            return Err(Error::numeric("replicate accounting does not add up"));
        }
        let covered: Vec<f64> = self
            .rows
            .iter()
            .map(|r| if r.covered { 1.0 } else { 0.0 })
            .collect();
        if (self.coverage - mean(&covered)).abs() > 1e-12 {
            return Err(Error::numeric("coverage is not the mean of the covered flags"));
        }
        let psi: Vec<f64> = self.rows.iter().map(|r| r.psi_hat).collect();
        if (self.bias - (mean(&psi) - self.truth)).abs() > 1e-12 {
            return Err(Error::numeric("bias does not match the stored estimates"));
        }
        Ok(())
    }

    /// One CSV row per successful replicate. Runtime is deliberately not a
    /// column: reports must be identical across identical runs.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "rep,psi_hat,se,ci_lo,ci_hi,covered,pn_dstar_abs,tol_met,flagged\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.rep,
                r.psi_hat,
                r.se,
                r.ci_lo,
                r.ci_hi,
                r.covered,
                r.pn_dstar_abs,
                r.tol_met,
                r.flagged
            ));
        }
        out
    }
}

/// Run `replicates` seeded draws of size `n` from the process and apply the
/// estimator to each. The estimator receives the dataset and the replicate
/// index (for deriving any internal seeds). Per-replicate failures are
/// recorded rather than fatal; the run errors only when every replicate
/// fails.
pub fn run_mc<F>(
    dgp: &Dgp,
    estimator_label: &str,
    truth: f64,
    n: usize,
    replicates: usize,
    seed: u64,
    estimator: F,
) -> Result<SimResult>
where
    F: Fn(&Dataset, u64) -> Result<McEstimate> + Sync,
{
    if replicates == 0 {
        return Err(Error::invalid("a Monte Carlo run needs at least one replicate"));
    }
    if n < 2 {
        return Err(Error::invalid("replicate sample size must be at least 2"));
    }
    let outcomes: Vec<(usize, Result<ReplicateRow>)> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<ReplicateRow> {
                let mut rng = rng_for(seed, rep as u64 + 1);
                let ds = dgp.sample(n, &mut rng)?;
                let start = Instant::now();
                let est = estimator(&ds, rep as u64)?;
                let runtime_secs = start.elapsed().as_secs_f64();
                if !est.psi_hat.is_finite() {
                    return Err(Error::numeric("estimator returned a non-finite estimate"));
                }
                Ok(ReplicateRow {
                    rep,
                    psi_hat: est.psi_hat,
                    se: est.se,
                    ci_lo: est.ci.0,
                    ci_hi: est.ci.1,
                    covered: est.ci.0 <= truth && truth <= est.ci.1,
                    pn_dstar_abs: est.pn_dstar_abs,
                    tol_met: est.tol_met,
                    flagged: est.flagged,
                    runtime_secs,
                })
            };
            (rep, run())
        })
        .collect();
    let mut rows = Vec::with_capacity(replicates);
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    SimResult::from_rows(dgp.id(), estimator_label, n, replicates, seed, truth, rows, failures)
}

/// ψ₀-returning stub: checks the harness plumbing end to end.
pub fn oracle_estimator(truth: f64) -> impl Fn(&Dataset, u64) -> Result<McEstimate> + Sync {
    move |_, _| {
        Ok(McEstimate {
            psi_hat: truth,
            se: 0.0,
            ci: (truth, truth),
            pn_dstar_abs: 0.0,
            tol_met: true,
            flagged: false,
        })
    }
}

/// Mean outcome among treated rows with its iid standard error — the
/// confounding-blind benchmark.
pub fn treated_mean_estimator() -> impl Fn(&Dataset, u64) -> Result<McEstimate> + Sync {
    |ds: &Dataset, _| {
        let a = ds
            .treatment()
            .ok_or_else(|| Error::invalid("dataset has no treatment column"))?;
        let y1: Vec<f64> = (0..ds.n())
            .filter(|&i| a[i] == 1.0)
            .map(|i| ds.outcome()[i])
            .collect();
        if y1.len() < 2 {
            return Err(Error::invalid("fewer than two treated observations"));
        }
        let psi = mean(&y1);
        let se = (variance(&y1) / y1.len() as f64).sqrt();
        let z = 1.959963984540054;
        Ok(McEstimate {
            psi_hat: psi,
            se,
            ci: (psi - z * se, psi + z * se),
            pn_dstar_abs: 0.0,
            tol_met: true,
            flagged: false,
        })
    }
}

/// Which pipeline estimator a replicate runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Plugin,
    Ipw,
    Tmle,
    TmlePreserving,
    Ctmle,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::TmlePreserving => "tmle-preserving",
            EstimatorKind::Ctmle => "ctmle",
        }
    }
}

/// Tuning for the per-replicate fitting pipeline. The defaults are sized
/// for n around 500 on a couple of covariates.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub folds: usize,
    pub path: PathOptions,
    pub solver: SolverOptions,
    /// Knot strategy for every HAL fit in the pipeline.
    pub knots: KnotStrategy,
    pub max_degree: usize,
    pub truncation: (f64, f64),
    /// Use the process's true mechanism instead of fitting one.
    pub use_true_g: bool,
    /// Undersmooth the outcome fit past the cv choice until |P_n D*| meets
    /// the efficiency threshold.
    pub undersmooth_q: bool,
    /// Undersmooth the propensity fit until the weights calibrate:
    /// |P_n[A/Ḡ − 1]| below threshold.
    pub undersmooth_g: bool,
    pub undersmooth: UndersmoothConfig,
    pub tmle: TmleOptions,
    /// Truncation ladder for the collaborative estimator.
    pub ctmle_truncations: Vec<(f64, f64)>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            folds: 5,
            path: PathOptions {
                grid_size: 20,
                min_ratio: 1e-2,
                lambdas: None,
            },
            solver: SolverOptions::default(),
            knots: KnotStrategy::Quantiles(8),
            max_degree: 2,
            truncation: DEFAULT_TRUNCATION,
            use_true_g: true,
            undersmooth_q: false,
            undersmooth_g: false,
            undersmooth: UndersmoothConfig::default(),
            tmle: TmleOptions::default(),
            ctmle_truncations: vec![(0.05, 0.95), (0.025, 0.975), (0.01, 0.99)],
        }
    }
}

fn outcome_loss(noise: NoiseKind) -> LossFamily {
    match noise {
        NoiseKind::Bernoulli => LossFamily::Binomial,
        NoiseKind::Gaussian { .. } => LossFamily::Gaussian,
    }
}

fn fit_outcome_model(
    ds: &Dataset,
    loss: LossFamily,
    g: &PropensityModel,
    opts: &PipelineOptions,
    rep: u64,
) -> Result<OutcomeModel> {
    let design = ds.outcome_design();
    let spec = BasisSpec::zero_order(opts.max_degree.min(design.len()), opts.knots);
    let catalog = enumerate_basis(&design, &spec)?;
    let folds = make_folds(ds.n(), opts.folds, rep)?;
    let (cv, cv_fit, path) =
        cv_select_lambda_on_catalog(&catalog, ds.outcome(), loss, &folds, &opts.path, &opts.solver)?;
    let fit = if opts.undersmooth_q {
        // Score criterion: |P_n D*| of the plug-in at this fit.
        let q0 = OutcomeModel::from_fit(catalog.clone(), cv_fit.clone(), ds)?;
        let base = plugin_tsm(&q0, g, ds)?;
        let sigma_n = sd(&base.ic_values);
        let criterion = |fit: &HalFitRef| -> Result<f64> {
            let q = OutcomeModel::from_fit(catalog.clone(), fit.clone(), ds)?;
            let report = plugin_tsm(&q, g, ds)?;
            Ok(report.diagnostics.pn_dstar_abs)
        };
        let (fit_us, _) = undersmooth_select(
            catalog.columns(),
            ds.outcome(),
            loss,
            &path,
            cv.selected,
            criterion,
            sigma_n,
            &opts.undersmooth,
            &opts.solver,
        )?;
        fit_us
    } else {
        cv_fit
    };
    OutcomeModel::from_fit(catalog, fit, ds)
}

type HalFitRef = crate::solver::HalFit;

fn fit_propensity_model(
    dgp: &Dgp,
    ds: &Dataset,
    opts: &PipelineOptions,
    rep: u64,
) -> Result<PropensityModel> {
    if opts.use_true_g {
        return PropensityModel::known(dgp.true_propensities(ds)?, opts.truncation, "true");
    }
    let a = ds
        .treatment()
        .ok_or_else(|| Error::invalid("dataset has no treatment column"))?
        .to_vec();
    let design = ds.covariate_design();
    let spec = BasisSpec::zero_order(opts.max_degree.min(design.len()), opts.knots);
    let catalog = enumerate_basis(&design, &spec)?;
    let folds = make_folds(ds.n(), opts.folds, rep.wrapping_add(500_009))?;
    let (cv, cv_fit, path) = cv_select_lambda_on_catalog(
        &catalog,
        &a,
        LossFamily::Binomial,
        &folds,
        &opts.path,
        &opts.solver,
    )?;
    let (lo, hi) = opts.truncation;
    let fit = if opts.undersmooth_g {
        // Weight-calibration criterion: |P_n[A/Ḡ − 1]| with truncated Ḡ.
        let calib = |fit: &HalFitRef| -> Result<f64> {
            let eta = catalog.linear_predictor(fit.intercept, &fit.beta);
            let terms: Vec<f64> = (0..ds.n())
                .map(|i| a[i] / expit(eta[i]).clamp(lo, hi) - 1.0)
                .collect();
            Ok(mean(&terms).abs())
        };
        let eta0 = catalog.linear_predictor(cv_fit.intercept, &cv_fit.beta);
        let base_terms: Vec<f64> = (0..ds.n())
            .map(|i| a[i] / expit(eta0[i]).clamp(lo, hi) - 1.0)
            .collect();
        let sigma_n = sd(&base_terms);
        let (fit_us, _) = undersmooth_select(
            catalog.columns(),
            &a,
            LossFamily::Binomial,
            &path,
            cv.selected,
            calib,
            sigma_n,
            &opts.undersmooth,
            &opts.solver,
        )?;
        fit_us
    } else {
        cv_fit
    };
    PropensityModel::from_hal(catalog, fit, opts.truncation, "hal")
}

/// Standard per-replicate pipeline: fit (or take) the mechanism, fit the
/// outcome model, apply the chosen estimator, and distill the report.
pub fn pipeline_estimator(
    dgp: &Dgp,
    kind: EstimatorKind,
    opts: PipelineOptions,
) -> impl Fn(&Dataset, u64) -> Result<McEstimate> + Sync {
    let dgp = dgp.clone();
    move |ds: &Dataset, rep: u64| {
        let loss = outcome_loss(dgp.noise());
        let g = fit_propensity_model(&dgp, ds, &opts, rep)?;
        if kind == EstimatorKind::Ipw {
            let report = ipw_tsm(&g, ds)?;
            return Ok(McEstimate::from(&report));
        }
        let q = fit_outcome_model(ds, loss, &g, &opts, rep)?;
        let report = match kind {
            EstimatorKind::Plugin => plugin_tsm(&q, &g, ds)?,
            EstimatorKind::Ipw => unreachable!("handled above"),
            EstimatorKind::Tmle => tmle_update_tsm(&q, &g, ds, &opts.tmle)?.1,
            EstimatorKind::TmlePreserving => {
                let ortho = OrthoTmleOptions {
                    tmle: opts.tmle,
                    battery_seed: rep,
                    ..OrthoTmleOptions::default()
                };
                orthogonalized_tmle_update(&q, &g, ds, &ortho)?.1
            }
            EstimatorKind::Ctmle => {
                let ladder: Vec<PropensityModel> = opts
                    .ctmle_truncations
                    .iter()
                    .map(|&b| g.with_bounds(b, format!("trunc-{}", b.0)))
                    .collect::<Result<_>>()?;
                let folds = make_folds(ds.n(), opts.folds, rep.wrapping_add(900_007))?;
                let copts = CtmleOptions {
                    tmle: opts.tmle,
                    arm: Arm::Treated,
                };
                ctmle_select(&q, &ladder, ds, &folds, &copts)?.1
            }
        };
        Ok(McEstimate::from(&report))
    }
}

/// One grid point of the rate experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub replicates: usize,
    /// Mean (over replicates) L²(P₀) distance between the fitted and true
    /// regression.
    pub mean_l2_error: f64,
}

/// Rate experiment summary: per-n errors and the fitted log-log slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub dgp_id: String,
    pub seed: u64,
    pub points: Vec<RatePoint>,
    pub loglog_slope: f64,
}

impl RateReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("n,replicates,mean_l2_error\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.n, p.replicates, p.mean_l2_error));
        }
        out
    }

    /// Errors strictly decrease along the grid.
    pub fn strictly_decreasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].mean_l2_error < w[0].mean_l2_error)
    }
}

/// Fit the regression at each sample size and measure the L²(P₀) error of
/// the returned predictor against the process's marginal regression by
/// quadrature. The `fit` closure receives a dataset and a job index and
/// returns a predictor over the covariates.
pub fn rate_experiment<F, P>(
    dgp: &Dgp,
    n_grid: &[usize],
    replicates: usize,
    seed: u64,
    quadrature_points: usize,
    fit: F,
) -> Result<RateReport>
where
    F: Fn(&Dataset, u64) -> Result<P> + Sync,
    P: Fn(&[f64]) -> f64,
{
    if n_grid.len() < 3 {
        return Err(Error::invalid("rate experiment needs at least three sample sizes"));
    }
    if !n_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid("sample sizes must be strictly increasing"));
    }
    if replicates == 0 {
        return Err(Error::invalid("rate experiment needs at least one replicate"));
    }
    let jobs: Vec<(usize, usize)> = (0..n_grid.len())
        .flat_map(|i| (0..replicates).map(move |r| (i, r)))
        .collect();
    let errors: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|&(i, r)| -> Result<(usize, f64)> {
            let job = (i * replicates + r) as u64;
            let mut rng = rng_for(seed, job + 1);
            let ds = dgp.sample(n_grid[i], &mut rng)?;
            let predictor = fit(&ds, job)?;
            let sq = integrate_unit_cube(dgp.d(), quadrature_points, |_| 1.0, |w| {
                let diff = predictor(w) - dgp.marginal_regression(w);
                diff * diff
            })?;
            Ok((i, sq.max(0.0).sqrt()))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(n_grid.len());
    for (i, &n) in n_grid.iter().enumerate() {
        let errs: Vec<f64> = errors
            .iter()
            .filter(|(j, _)| *j == i)
            .map(|&(_, e)| e)
            .collect();
        points.push(RatePoint {
            n,
            replicates,
            mean_l2_error: mean(&errs),
        });
    }
    // Least-squares slope of ln(error) on ln(n).
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_l2_error.ln()).collect();
    if let Some(i) = ys.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "mean error at n = {} is not usable on the log scale",
            points[i].n
        )));
    }
    let xm = mean(&xs);
    let ym = mean(&ys);
    let sxy = kahan_sum(xs.iter().zip(&ys).map(|(&x, &y)| (x - xm) * (y - ym)));
    let sxx = kahan_sum(xs.iter().map(|&x| (x - xm) * (x - xm)));
    Ok(RateReport {
        dgp_id: dgp.id().into(),
        seed,
        points,
        loglog_slope: sxy / sxx,
    })
}
