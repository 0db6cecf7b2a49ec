//! Run configuration: documented defaults, a plain-text config file with
//! `[section]` headers and `key = value` lines, and command-line overrides
//! applied on top (flags win over the file, the file wins over defaults).

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use hal_core::basis::KnotStrategy;
use hal_core::data::Roles;

/// CLI failure, split by exit code: configuration problems exit 2,
/// numeric failures exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl From<hal_core::Error> for CliError {
    fn from(e: hal_core::Error) -> Self {
        match e {
            hal_core::Error::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Estimation method for the `estimate` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Plugin,
    Ipw,
    Tmle,
    TmlePreserving,
    Ctmle,
}

impl Method {
    pub fn parse(s: &str) -> CliResult<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plugin" => Ok(Method::Plugin),
            "ipw" => Ok(Method::Ipw),
            "tmle" => Ok(Method::Tmle),
            "tmle_preserving" | "tmle-preserving" => Ok(Method::TmlePreserving),
            "ctmle" => Ok(Method::Ctmle),
            other => Err(CliError::config(format!(
                "method: unknown value '{other}' (want plugin|ipw|tmle|tmle_preserving|ctmle)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Plugin => "plugin",
            Method::Ipw => "ipw",
            Method::Tmle => "tmle",
            Method::TmlePreserving => "tmle_preserving",
            Method::Ctmle => "ctmle",
        }
    }
}

/// Target parameter for the `estimate` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimand {
    /// Treated-arm mean E[Y(1)].
    Treated,
    /// Average treatment effect E[Y(1)] - E[Y(0)].
    Ate,
}

impl Estimand {
    pub fn parse(s: &str) -> CliResult<Estimand> {
        match s.trim().to_ascii_lowercase().as_str() {
            "treated" | "treated-mean" => Ok(Estimand::Treated),
            "ate" => Ok(Estimand::Ate),
            other => Err(CliError::config(format!(
                "estimand: unknown value '{other}' (want treated|ate)"
            ))),
        }
    }
}

/// Plug-in feature for the `bootstrap` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Mean,
    Treated,
    Control,
    Ate,
}

impl Feature {
    pub fn parse(s: &str) -> CliResult<Feature> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Feature::Mean),
            "treated" | "treated-mean" => Ok(Feature::Treated),
            "control" | "control-mean" => Ok(Feature::Control),
            "ate" => Ok(Feature::Ate),
            other => Err(CliError::config(format!(
                "feature: unknown value '{other}' (want mean|treated|control|ate)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Feature::Mean => "mean",
            Feature::Treated => "treated",
            Feature::Control => "control",
            Feature::Ate => "ate",
        }
    }
}

/// Merged settings for one run. Defaults are documented on
/// [`RunConfig::default`]; a config file and then command-line flags
/// override them field by field.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// `[data] path` — dataset CSV; required by data-driven commands.
    pub data: Option<PathBuf>,
    /// `[data] roles` — e.g. `y:y,a:a,w:w1+w2`; when absent, the outcome
    /// column must be named `y`, a column named `a` (if present) is the
    /// treatment, and everything else is a covariate.
    pub roles: Option<String>,
    /// `[model] knots` — `quantiles:<k>` or `all`.
    pub knots: KnotStrategy,
    /// `[model] max-degree` — highest covariate-interaction order.
    pub max_degree: usize,
    /// `[model] lambda-grid` — path grid size.
    pub grid_size: usize,
    /// `[model] lambda-min-ratio` — smallest lambda relative to lambda_max.
    pub min_ratio: f64,
    /// `[selection] folds` — V for V-fold cross-validation.
    pub folds: usize,
    /// `[selection] undersmooth` — walk past the cv choice until the
    /// score criterion is met.
    pub undersmooth: bool,
    /// `[selection] tol-const` — multiplier on the undersmoothing threshold.
    pub tol_const: f64,
    /// `[estimate] method`.
    pub method: Method,
    /// `[estimate] estimand` — `treated` (default) or `ate`; `ate` is not
    /// available under `ctmle`, whose greedy selection targets one arm.
    pub estimand: Estimand,
    /// `[estimate] truncate` — propensity truncation bounds `lo,hi`.
    pub truncate: (f64, f64),
    /// `[estimate] tol` — absolute score tolerance for targeted updates
    /// (`inf` allowed); empty means the data-driven default.
    pub tol: Option<f64>,
    /// `[estimate] ctmle-ladder` — truncation ladder `lo:hi,lo:hi,...`.
    pub ctmle_ladder: Vec<(f64, f64)>,
    /// `[bootstrap] b` — bootstrap replicates.
    pub b: usize,
    /// `[bootstrap] feature` — defaults to `treated` when a treatment role
    /// exists, else `mean`.
    pub feature: Option<Feature>,
    /// `[bootstrap] plateau` — scan the path past the cv pick and select
    /// by the CI-width plateau rule.
    pub plateau: bool,
    /// `[simulate] dgp`.
    pub sim_dgp: String,
    /// `[simulate] n` — per-replicate sample size.
    pub n: usize,
    /// `[simulate] replicates`.
    pub replicates: usize,
    /// `[simulate] estimator` — plugin|ipw|tmle|tmle_preserving|ctmle|
    /// oracle|treated-mean.
    pub estimator: String,
    /// `[simulate] use-true-g` — hand the estimator the process's true
    /// mechanism instead of fitting one.
    pub use_true_g: bool,
    /// `[rate] dgp`.
    pub rate_dgp: String,
    /// `[rate] n-grid` — increasing sample sizes, `n1,n2,...`.
    pub n_grid: Vec<usize>,
    /// `[rate] replicates`.
    pub rate_replicates: usize,
    /// `[rate] quadrature` — points per axis for the error integral.
    pub quadrature: usize,
    /// `[run] seed`.
    pub seed: u64,
    /// `[run] threads` — worker cap; unset falls back to the
    /// `HAL_THREADS` environment variable, then to all cores.
    pub threads: Option<usize>,
    /// `[run] out-dir` — where reports are written.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            roles: None,
            knots: KnotStrategy::Quantiles(8),
            max_degree: 2,
            grid_size: 20,
            min_ratio: 1e-2,
            folds: 5,
            undersmooth: false,
            tol_const: 1.0,
            method: Method::Tmle,
            estimand: Estimand::Treated,
            truncate: (0.01, 0.99),
            tol: None,
            ctmle_ladder: vec![(0.05, 0.95), (0.025, 0.975), (0.01, 0.99)],
            b: 500,
            feature: None,
            plateau: false,
            sim_dgp: "DGP-A".into(),
            n: 500,
            replicates: 200,
            estimator: "tmle".into(),
            use_true_g: false,
            rate_dgp: "DGP-C".into(),
            n_grid: vec![200, 500, 1250, 3000],
            rate_replicates: 20,
            quadrature: 200,
            seed: 17,
            threads: None,
            out_dir: PathBuf::from("."),
        }
    }
}

/// Command-line values gathered by the argument parser; `None` means the
/// flag was not given and the file/default value stands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub roles: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub method: Option<String>,
    pub estimand: Option<String>,
    pub b: Option<usize>,
    pub folds: Option<usize>,
    pub max_degree: Option<usize>,
    pub knots: Option<String>,
    pub truncate: Option<String>,
    pub undersmooth: Option<bool>,
    pub tol_const: Option<f64>,
    pub feature: Option<String>,
    pub plateau: Option<bool>,
    pub dgp: Option<String>,
    pub n: Option<usize>,
    pub replicates: Option<usize>,
    pub estimator: Option<String>,
    pub use_true_g: Option<bool>,
    pub n_grid: Option<String>,
    pub tol: Option<String>,
}

const KNOWN_KEYS: &[&str] = &[
    "data.path",
    "data.roles",
    "model.knots",
    "model.max-degree",
    "model.lambda-grid",
    "model.lambda-min-ratio",
    "selection.folds",
    "selection.undersmooth",
    "selection.tol-const",
    "estimate.method",
    "estimate.estimand",
    "estimate.truncate",
    "estimate.tol",
    "estimate.ctmle-ladder",
    "bootstrap.b",
    "bootstrap.feature",
    "bootstrap.plateau",
    "simulate.dgp",
    "simulate.n",
    "simulate.replicates",
    "simulate.estimator",
    "simulate.use-true-g",
    "rate.dgp",
    "rate.n-grid",
    "rate.replicates",
    "rate.quadrature",
    "run.seed",
    "run.threads",
    "run.out-dir",
];

/// Parse the config-file text into `section.key -> value`. Strict about
/// structure and key names so typos surface as exit-2 errors.
pub fn parse_config_text(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| {
                    CliError::config(format!("config line {}: unterminated [section]", lineno + 1))
                })?
                .trim();
            section = name.to_ascii_lowercase();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::config(format!(
                "config line {}: expected `key = value`, got '{line}'",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_ascii_lowercase();
        if section.is_empty() {
            return Err(CliError::config(format!(
                "config line {}: key '{key}' appears before any [section]",
                lineno + 1
            )));
        }
        let full = format!("{section}.{key}");
        if !KNOWN_KEYS.contains(&full.as_str()) {
            return Err(CliError::config(format!(
                "config line {}: unknown key '{full}'",
                lineno + 1
            )));
        }
        out.insert(full, value.trim().to_string());
    }
    Ok(out)
}

fn parse_usize(field: &str, v: &str) -> CliResult<usize> {
    v.parse()
        .map_err(|_| CliError::config(format!("{field}: '{v}' is not a whole number")))
}

fn parse_u64(field: &str, v: &str) -> CliResult<u64> {
    v.parse()
        .map_err(|_| CliError::config(format!("{field}: '{v}' is not a whole number")))
}

fn parse_f64(field: &str, v: &str) -> CliResult<f64> {
    v.parse()
        .map_err(|_| CliError::config(format!("{field}: '{v}' is not a number")))
}

fn parse_bool(field: &str, v: &str) -> CliResult<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::config(format!(
            "{field}: '{v}' is not a boolean (true/false)"
        ))),
    }
}

pub fn parse_knots(v: &str) -> CliResult<KnotStrategy> {
    let v = v.trim().to_ascii_lowercase();
    if v == "all" {
        return Ok(KnotStrategy::AllObservations);
    }
    if let Some(k) = v.strip_prefix("quantiles:") {
        let k = parse_usize("knots", k)?;
        if k == 0 {
            return Err(CliError::config("knots: quantile count must be positive"));
        }
        return Ok(KnotStrategy::Quantiles(k));
    }
    Err(CliError::config(format!(
        "knots: '{v}' is not `all` or `quantiles:<k>`"
    )))
}

pub fn parse_truncate(v: &str) -> CliResult<(f64, f64)> {
    let (lo, hi) = v
        .split_once(',')
        .ok_or_else(|| CliError::config(format!("truncate: '{v}' is not `lo,hi`")))?;
    let lo = parse_f64("truncate", lo.trim())?;
    let hi = parse_f64("truncate", hi.trim())?;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(CliError::config(format!(
            "truncate: bounds [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
        )));
    }
    Ok((lo, hi))
}

fn parse_ladder(v: &str) -> CliResult<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for part in v.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (lo, hi) = part.split_once(':').ok_or_else(|| {
            CliError::config(format!("ctmle-ladder: '{part}' is not `lo:hi`"))
        })?;
        let lo = parse_f64("ctmle-ladder", lo.trim())?;
        let hi = parse_f64("ctmle-ladder", hi.trim())?;
        out.push((lo, hi));
    }
    if out.is_empty() {
        return Err(CliError::config("ctmle-ladder: no rungs given"));
    }
    Ok(out)
}

pub fn parse_n_grid(v: &str) -> CliResult<Vec<usize>> {
    let grid: Vec<usize> = v
        .split(',')
        .map(|p| parse_usize("n-grid", p.trim()))
        .collect::<CliResult<_>>()?;
    if grid.len() < 3 {
        return Err(CliError::config("n-grid: need at least three sample sizes"));
    }
    Ok(grid)
}

fn parse_tol(v: &str) -> CliResult<Option<f64>> {
    let v = v.trim().to_ascii_lowercase();
    if v.is_empty() || v == "auto" {
        return Ok(None);
    }
    if v == "inf" || v == "infinity" {
        return Ok(Some(f64::INFINITY));
    }
    let t = parse_f64("tol", &v)?;
    if t < 0.0 {
        return Err(CliError::config("tol: must be nonnegative"));
    }
    Ok(Some(t))
}

/// Parse a roles declaration like `y:y,a:a,w:w1+w2`. The outcome role is
/// required; treatment and covariates are optional (missing covariates
/// means: every remaining column).
pub fn parse_roles(s: &str) -> CliResult<Roles> {
    let mut outcome: Option<String> = None;
    let mut treatment: Option<String> = None;
    let mut covariates: Option<Vec<String>> = None;
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (k, v) = part.split_once(':').ok_or_else(|| {
            CliError::config(format!("roles: '{part}' is not `role:column`"))
        })?;
        let v = v.trim();
        match k.trim() {
            "y" => outcome = Some(v.to_string()),
            "a" => treatment = Some(v.to_string()),
            "w" => {
                covariates = Some(
                    v.split('+')
                        .map(str::trim)
                        .filter(|c| !c.is_empty())
                        .map(String::from)
                        .collect(),
                )
            }
            other => {
                return Err(CliError::config(format!(
                    "roles: unknown role '{other}' (want y, a, or w)"
                )))
            }
        }
    }
    let outcome = outcome.ok_or_else(|| {
        CliError::config("roles: missing the outcome role (`y:<column>`)")
    })?;
    Ok(Roles {
        outcome,
        treatment,
        covariates,
    })
}

impl RunConfig {
    /// Apply a parsed config file.
    pub fn apply_file(&mut self, kv: &BTreeMap<String, String>) -> CliResult<()> {
        for (key, v) in kv {
            match key.as_str() {
                "data.path" => self.data = Some(PathBuf::from(v)),
                "data.roles" => self.roles = Some(v.clone()),
                "model.knots" => self.knots = parse_knots(v)?,
                "model.max-degree" => self.max_degree = parse_usize(key, v)?,
                "model.lambda-grid" => self.grid_size = parse_usize(key, v)?,
                "model.lambda-min-ratio" => self.min_ratio = parse_f64(key, v)?,
                "selection.folds" => self.folds = parse_usize(key, v)?,
                "selection.undersmooth" => self.undersmooth = parse_bool(key, v)?,
                "selection.tol-const" => self.tol_const = parse_f64(key, v)?,
                "estimate.method" => self.method = Method::parse(v)?,
                "estimate.estimand" => self.estimand = Estimand::parse(v)?,
                "estimate.truncate" => self.truncate = parse_truncate(v)?,
                "estimate.tol" => self.tol = parse_tol(v)?,
                "estimate.ctmle-ladder" => self.ctmle_ladder = parse_ladder(v)?,
                "bootstrap.b" => self.b = parse_usize(key, v)?,
                "bootstrap.feature" => self.feature = Some(Feature::parse(v)?),
                "bootstrap.plateau" => self.plateau = parse_bool(key, v)?,
                "simulate.dgp" => self.sim_dgp = v.clone(),
                "simulate.n" => self.n = parse_usize(key, v)?,
                "simulate.replicates" => self.replicates = parse_usize(key, v)?,
                "simulate.estimator" => self.estimator = v.clone(),
                "simulate.use-true-g" => self.use_true_g = parse_bool(key, v)?,
                "rate.dgp" => self.rate_dgp = v.clone(),
                "rate.n-grid" => self.n_grid = parse_n_grid(v)?,
                "rate.replicates" => self.rate_replicates = parse_usize(key, v)?,
                "rate.quadrature" => self.quadrature = parse_usize(key, v)?,
                "run.seed" => self.seed = parse_u64(key, v)?,
                "run.threads" => self.threads = Some(parse_usize(key, v)?),
                "run.out-dir" => self.out_dir = PathBuf::from(v),
                _ => unreachable!("unknown keys are rejected at parse time"),
            }
        }
        Ok(())
    }

    /// Apply command-line flags (they win over the file).
    pub fn apply_overrides(&mut self, ov: &Overrides) -> CliResult<()> {
        if let Some(v) = &ov.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &ov.roles {
            self.roles = Some(v.clone());
        }
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.threads {
            self.threads = Some(v);
        }
        if let Some(v) = &ov.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = &ov.method {
            self.method = Method::parse(v)?;
        }
        if let Some(v) = &ov.estimand {
            self.estimand = Estimand::parse(v)?;
        }
        if let Some(v) = ov.b {
            self.b = v;
        }
        if let Some(v) = ov.folds {
            self.folds = v;
        }
        if let Some(v) = ov.max_degree {
            self.max_degree = v;
        }
        if let Some(v) = &ov.knots {
            self.knots = parse_knots(v)?;
        }
        if let Some(v) = &ov.truncate {
            self.truncate = parse_truncate(v)?;
        }
        if let Some(v) = ov.undersmooth {
            self.undersmooth = v;
        }
        if let Some(v) = ov.tol_const {
            self.tol_const = v;
        }
        if let Some(v) = &ov.feature {
            self.feature = Some(Feature::parse(v)?);
        }
        if let Some(v) = ov.plateau {
            self.plateau = v;
        }
        if let Some(v) = &ov.dgp {
            self.sim_dgp = v.clone();
            self.rate_dgp = v.clone();
        }
        if let Some(v) = ov.n {
            self.n = v;
        }
        if let Some(v) = ov.replicates {
            self.replicates = v;
            self.rate_replicates = v;
        }
        if let Some(v) = &ov.estimator {
            self.estimator = v.clone();
        }
        if let Some(v) = ov.use_true_g {
            self.use_true_g = v;
        }
        if let Some(v) = &ov.n_grid {
            self.n_grid = parse_n_grid(v)?;
        }
        if let Some(v) = &ov.tol {
            self.tol = parse_tol(v)?;
        }
        Ok(())
    }

    /// Common numeric sanity checks shared by every command.
    pub fn validate(&self) -> CliResult<()> {
        if self.folds < 2 {
            return Err(CliError::config("folds: need at least 2"));
        }
        if self.max_degree == 0 {
            return Err(CliError::config("max-degree: must be positive"));
        }
        if self.grid_size == 0 {
            return Err(CliError::config("lambda-grid: must be positive"));
        }
        if !(self.min_ratio > 0.0 && self.min_ratio < 1.0) {
            return Err(CliError::config("lambda-min-ratio: must be in (0, 1)"));
        }
        if self.tol_const <= 0.0 {
            return Err(CliError::config("tol-const: must be positive"));
        }
        Ok(())
    }
}

/// Load and merge: defaults <- optional config file <- flags.
pub fn resolve(path: Option<&std::path::Path>, ov: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| {
            CliError::config(format!("config file {}: {e}", p.display()))
        })?;
        let kv = parse_config_text(&text)?;
        cfg.apply_file(&kv)?;
    }
    cfg.apply_overrides(ov)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_precedence() {
        let text = "\n[run]\nseed = 5\nout-dir = reports\n\n[model]\nknots = quantiles:4\n";
        let kv = parse_config_text(text).unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&kv).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.out_dir, PathBuf::from("reports"));
        assert_eq!(cfg.knots, KnotStrategy::Quantiles(4));
        let ov = Overrides {
            seed: Some(11),
            ..Overrides::default()
        };
        cfg.apply_overrides(&ov).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.out_dir, PathBuf::from("reports"));
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        assert!(parse_config_text("[run]\nseeed = 3\n").is_err());
        assert!(parse_config_text("seed = 3\n").is_err());
        assert!(parse_config_text("[run\nseed = 3\n").is_err());
        assert!(parse_config_text("[run]\nseed\n").is_err());
    }

    #[test]
    fn roles_parsing_covers_the_grammar() {
        let r = parse_roles("y:out,a:treat,w:x1+x2").unwrap();
        assert_eq!(r.outcome, "out");
        assert_eq!(r.treatment.as_deref(), Some("treat"));
        assert_eq!(
            r.covariates,
            Some(vec!["x1".to_string(), "x2".to_string()])
        );
        let r = parse_roles("y:y").unwrap();
        assert!(r.treatment.is_none());
        assert!(r.covariates.is_none());
        let err = parse_roles("a:a,w:x").unwrap_err();
        assert!(err.to_string().contains("outcome"));
        assert!(parse_roles("z:q").is_err());
    }

    #[test]
    fn scalar_parsers_reject_garbage() {
        assert!(parse_knots("quantiles:0").is_err());
        assert!(parse_knots("spline").is_err());
        assert_eq!(parse_knots("all").unwrap(), KnotStrategy::AllObservations);
        assert!(parse_truncate("0.5").is_err());
        assert!(parse_truncate("0,0.5").is_err());
        assert_eq!(parse_truncate("0.05, 0.95").unwrap(), (0.05, 0.95));
        assert!(parse_n_grid("100,200").is_err());
        assert!(parse_tol("inf").unwrap().unwrap().is_infinite());
        assert!(parse_tol("auto").unwrap().is_none());
    }
}
