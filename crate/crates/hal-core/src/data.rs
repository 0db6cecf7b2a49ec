//! Typed tabular data: outcome/treatment/covariate roles, strict CSV
//! ingest and export, cross-validation fold plans, and row resampling.
//!
//! A [`Dataset`] holds covariates W (column-major), an optional binary
//! treatment A, and an outcome Y. Regressions of Y on (A, W) treat the
//! treatment as one more coordinate of x, ordered first; regressions of A
//! on W use the covariate columns alone.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Column-role assignment used when reading delimited files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    /// Outcome column name (required, exactly one).
    pub outcome: String,
    /// Treatment column name; must contain only 0/1 when present.
    pub treatment: Option<String>,
    /// Covariate column names. `None` means: every remaining column,
    /// in file order.
    pub covariates: Option<Vec<String>>,
}

/// In-memory dataset with named roles.
///
/// Invariants (enforced at construction): all columns share one length n >= 1,
/// every value is finite, and the treatment column contains only 0.0/1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: Vec<Vec<f64>>,
    covariate_names: Vec<String>,
    treatment: Option<Vec<f64>>,
    treatment_name: Option<String>,
    outcome: Vec<f64>,
    outcome_name: String,
}

impl Dataset {
    /// Build a dataset from parts, validating shapes and value ranges.
    pub fn new(
        covariates: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
        treatment: Option<Vec<f64>>,
        treatment_name: Option<String>,
        outcome: Vec<f64>,
        outcome_name: String,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if covariates.is_empty() {
            return Err(Error::invalid("dataset has no covariate columns"));
        }
        if covariates.len() != covariate_names.len() {
            return Err(Error::invalid(format!(
                "{} covariate columns but {} names",
                covariates.len(),
                covariate_names.len()
            )));
        }
        for (name, col) in covariate_names.iter().zip(&covariates) {
            if col.len() != n {
                return Err(Error::invalid(format!(
                    "column '{name}' has {} rows, outcome has {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "column '{name}' has a non-finite value at row {}",
                    i + 1
                )));
            }
        }
        if treatment.is_some() != treatment_name.is_some() {
            return Err(Error::invalid("treatment column and name must come together"));
        }
        if let Some(a) = &treatment {
            if a.len() != n {
                return Err(Error::invalid(format!(
                    "treatment column has {} rows, outcome has {n}",
                    a.len()
                )));
            }
            if let Some(i) = a.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!(
                    "treatment column '{}' has value {} at row {}; only 0/1 allowed",
                    treatment_name.as_deref().unwrap_or(""),
                    a[i],
                    i + 1
                )));
            }
        }
        if let Some(i) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "outcome column '{outcome_name}' has a non-finite value at row {}",
                i + 1
            )));
        }
        Ok(Dataset {
            covariates,
            covariate_names,
            treatment,
            treatment_name,
            outcome,
            outcome_name,
        })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of covariate columns (treatment not counted).
    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.covariates[j]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn treatment(&self) -> Option<&[f64]> {
        self.treatment.as_deref()
    }

    pub fn treatment_name(&self) -> Option<&str> {
        self.treatment_name.as_deref()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// Design columns for the outcome regression: treatment first (when
    /// present), then covariates in order.
    pub fn outcome_design(&self) -> Vec<&[f64]> {
        let mut cols = Vec::with_capacity(self.d() + 1);
        if let Some(a) = &self.treatment {
            cols.push(a.as_slice());
        }
        cols.extend(self.covariates.iter().map(|c| c.as_slice()));
        cols
    }

    /// Design columns for the propensity regression: covariates only.
    pub fn covariate_design(&self) -> Vec<&[f64]> {
        self.covariates.iter().map(|c| c.as_slice()).collect()
    }

    /// Row subset (or multiset, for bootstrap resamples) by index.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let take = |col: &Vec<f64>| rows.iter().map(|&i| col[i]).collect::<Vec<f64>>();
        Dataset {
            covariates: self.covariates.iter().map(take).collect(),
            covariate_names: self.covariate_names.clone(),
            treatment: self.treatment.as_ref().map(take),
            treatment_name: self.treatment_name.clone(),
            outcome: take(&self.outcome),
            outcome_name: self.outcome_name.clone(),
        }
    }

    /// Write the dataset as CSV: covariates, then treatment, then outcome.
    /// Values print in shortest-round-trip form, so `load_csv` recovers
    /// them bit-exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.covariate_names.iter().map(|s| s.as_str()).collect();
        if let Some(name) = &self.treatment_name {
            header.push(name);
        }
        header.push(&self.outcome_name);
        wtr.write_record(&header)
            .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            for col in &self.covariates {
                record.push(col[i].to_string());
            }
            if let Some(a) = &self.treatment {
                record.push(a[i].to_string());
            }
            record.push(self.outcome[i].to_string());
            wtr.write_record(&record)
                .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }
}

/// Read a headered CSV into a [`Dataset`] under the given roles.
///
/// Parsing is strict: every mapped cell must be a finite float, and errors
/// name the offending 1-based data row and column.
pub fn load_csv<R: Read>(reader: R, roles: &Roles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("column '{name}' not found in header")))
    };

    let y_idx = find(&roles.outcome)?;
    let a_idx = match &roles.treatment {
        Some(name) => Some(find(name)?),
        None => None,
    };
    let w_idx: Vec<usize> = match &roles.covariates {
        Some(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                let i = find(name)?;
                if i == y_idx || Some(i) == a_idx {
                    return Err(Error::invalid(format!(
                        "column '{name}' given two roles"
                    )));
                }
                idx.push(i);
            }
            idx
        }
        None => (0..headers.len())
            .filter(|&i| i != y_idx && Some(i) != a_idx)
            .collect(),
    };
    if w_idx.is_empty() {
        return Err(Error::invalid("no covariate columns after role assignment"));
    }

    let mut covariates: Vec<Vec<f64>> = vec![Vec::new(); w_idx.len()];
    let mut treatment: Vec<f64> = Vec::new();
    let mut outcome: Vec<f64> = Vec::new();

    let parse = |field: &str, row: usize, column: &str| -> Result<f64> {
        let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
            row,
            column: column.to_string(),
            message: format!("'{field}' is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row,
                column: column.to_string(),
                message: format!("'{field}' is not finite"),
            });
        }
        Ok(v)
    };

    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (k, &ci) in w_idx.iter().enumerate() {
            covariates[k].push(parse(&record[ci], row, &headers[ci])?);
        }
        if let Some(ai) = a_idx {
            let v = parse(&record[ai], row, &headers[ai])?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Parse {
                    row,
                    column: headers[ai].clone(),
                    message: format!("treatment value {v} is not 0/1"),
                });
            }
            treatment.push(v);
        }
        outcome.push(parse(&record[y_idx], row, &headers[y_idx])?);
    }

    Dataset::new(
        covariates,
        w_idx.iter().map(|&i| headers[i].clone()).collect(),
        a_idx.map(|_| treatment),
        a_idx.map(|i| headers[i].clone()),
        outcome,
        headers[y_idx].clone(),
    )
}

pub fn load_csv_path(path: impl AsRef<Path>, roles: &Roles) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    load_csv(file, roles)
}

/// Assignment of rows to V cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    v: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPlan {
    pub fn v(&self) -> usize {
        self.v
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Seed the plan was dealt from, for report provenance.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fold id of each row, in row order.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Rows held out in fold `fold`.
    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rows trained on in fold `fold` (the complement).
    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Seeded V-fold split: rows are shuffled, then dealt round-robin, so fold
/// sizes differ by at most one and the plan is a function of (n, v, seed).
pub fn make_folds(n: usize, v: usize, seed: u64) -> Result<FoldPlan> {
    if v < 2 {
        return Err(Error::invalid(format!("V={v} folds; need at least 2")));
    }
    if v > n {
        return Err(Error::invalid(format!("V={v} folds exceeds n={n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut crate::sim::rng_for(seed, 0));
    let mut assignment = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % v;
    }
    Ok(FoldPlan { v, assignment, seed })
}

/// Stratified V-fold split for a binary outcome: each stratum is shuffled
/// and dealt separately, so outcome prevalence is balanced across folds.
pub fn make_folds_stratified(y: &[f64], v: usize, seed: u64) -> Result<FoldPlan> {
    let n = y.len();
    if v < 2 {
        return Err(Error::invalid(format!("V={v} folds; need at least 2")));
    }
    if y.iter().any(|&yi| yi != 0.0 && yi != 1.0) {
        return Err(Error::invalid("stratified folds need a binary outcome"));
    }
    let mut rng = crate::sim::rng_for(seed, 0);
    let mut assignment = vec![0usize; n];
    let mut offset = 0usize;
    for level in [0.0, 1.0] {
        let mut rows: Vec<usize> = (0..n).filter(|&i| y[i] == level).collect();
        if rows.is_empty() {
            continue;
        }
        shuffle(&mut rows, &mut rng);
        for (pos, &row) in rows.iter().enumerate() {
            assignment[row] = (pos + offset) % v;
        }
        // Continue dealing where the previous stratum stopped, keeping
        // overall fold sizes within one of each other.
        offset = (offset + rows.len()) % v;
    }
    if v > n {
        return Err(Error::invalid(format!("V={v} folds exceeds n={n} rows")));
    }
    Ok(FoldPlan { v, assignment, seed })
}

/// Multinomial bootstrap resample: n row indices drawn with replacement.
pub fn resample_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Fisher-Yates shuffle driven by the supplied RNG (kept local so fold
/// plans depend only on our seeding scheme, not on rand's shuffle details).
fn shuffle(xs: &mut [usize], rng: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_csv() -> &'static str {
        "w1,w2,a,y\n0.1,0.9,1,1\n0.2,0.8,0,0\n0.3,0.7,1,1\n0.4,0.6,0,1\n0.5,0.5,1,0\n0.6,0.4,0,0\n"
    }

    fn roles_aw() -> Roles {
        Roles {
            outcome: "y".into(),
            treatment: Some("a".into()),
            covariates: None,
        }
    }

    #[test]
    fn loads_six_row_csv_with_roles() {
        let ds = load_csv(toy_csv().as_bytes(), &roles_aw()).unwrap();
        assert_eq!(ds.n(), 6);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.covariate_names(), &["w1".to_string(), "w2".to_string()]);
        assert_eq!(ds.treatment().unwrap(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.outcome(), &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        // Outcome design puts treatment first.
        let design = ds.outcome_design();
        assert_eq!(design.len(), 3);
        assert_eq!(design[0][0], 1.0);
        assert_eq!(design[1][0], 0.1);
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let bad = "w1,y\n0.1,1\n0.2,oops\n";
        let err = load_csv(bad.as_bytes(), &Roles {
            outcome: "y".into(),
            treatment: None,
            covariates: None,
        })
        .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn non_binary_treatment_rejected_with_row() {
        let bad = "w1,a,y\n0.1,1,1\n0.2,2,0\n";
        let err = load_csv(bad.as_bytes(), &roles_aw()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_role_column_is_invalid() {
        let err = load_csv(toy_csv().as_bytes(), &Roles {
            outcome: "nope".into(),
            treatment: None,
            covariates: None,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn folds_partition_with_balanced_sizes() {
        let plan = make_folds(10, 3, 7).unwrap();
        let mut seen = vec![false; 10];
        let mut sizes = vec![0usize; 3];
        for fold in 0..3 {
            for row in plan.validation_rows(fold) {
                assert!(!seen[row], "row {row} in two folds");
                seen[row] = true;
                sizes[fold] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s));
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        // Same seed, same plan; different seed, (almost surely) different plan.
        assert_eq!(plan, make_folds(10, 3, 7).unwrap());
        assert_ne!(plan, make_folds(10, 3, 8).unwrap());
    }

    #[test]
    fn leave_one_out_allowed_and_oversized_v_rejected() {
        let plan = make_folds(5, 5, 1).unwrap();
        for fold in 0..5 {
            assert_eq!(plan.validation_rows(fold).len(), 1);
        }
        assert!(make_folds(5, 6, 1).is_err());
        assert!(make_folds(5, 1, 1).is_err());
    }

    #[test]
    fn stratified_folds_balance_outcome_prevalence() {
        // 12 ones, 28 zeros over V=4: every fold must get exactly 3 ones.
        let y: Vec<f64> = (0..40).map(|i| if i < 12 { 1.0 } else { 0.0 }).collect();
        let plan = make_folds_stratified(&y, 4, 9).unwrap();
        for fold in 0..4 {
            let ones: usize = plan
                .validation_rows(fold)
                .iter()
                .filter(|&&i| y[i] == 1.0)
                .count();
            assert_eq!(ones, 3, "fold {fold}");
        }
    }

    #[test]
    fn resample_draws_n_indices_with_replacement() {
        let mut rng = crate::sim::rng_for(42, 0);
        let idx = resample_indices(5, &mut rng);
        assert_eq!(idx.len(), 5);
        assert!(idx.iter().all(|&i| i < 5));
        // With 5 draws from 5 rows, a repeat is overwhelmingly likely across
        // a few seeds; check at least one seed shows multiplicity.
        let any_repeat = (0..20).any(|s| {
            let mut r = crate::sim::rng_for(s, 0);
            let ix = resample_indices(5, &mut r);
            let mut counts = [0u32; 5];
            ix.iter().for_each(|&i| counts[i] += 1);
            counts.iter().any(|&c| c > 1)
        });
        assert!(any_repeat);
    }

    #[test]
    fn subset_copies_rows_in_index_order() {
        let ds = load_csv(toy_csv().as_bytes(), &roles_aw()).unwrap();
        let sub = ds.subset(&[3, 3, 0]);
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.outcome(), &[1.0, 1.0, 1.0]);
        assert_eq!(sub.covariate(0), &[0.4, 0.4, 0.1]);
        assert_eq!(sub.treatment().unwrap(), &[0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn csv_roundtrip_recovers_values(
            vals in proptest::collection::vec(
                (any::<i16>(), any::<i16>(), 0u8..2, any::<i16>()),
                1..40,
            )
        ) {
            // Use awkward scales to exercise float formatting.
            let w1: Vec<f64> = vals.iter().map(|v| v.0 as f64 * 1.0e-7).collect();
            let w2: Vec<f64> = vals.iter().map(|v| v.1 as f64 * 3.7e11).collect();
            let a: Vec<f64> = vals.iter().map(|v| v.2 as f64).collect();
            let y: Vec<f64> = vals.iter().map(|v| v.3 as f64 / 255.0).collect();
            let ds = Dataset::new(
                vec![w1, w2],
                vec!["w1".into(), "w2".into()],
                Some(a),
                Some("a".into()),
                y,
                "y".into(),
            ).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            let back = load_csv(buf.as_slice(), &Roles {
                outcome: "y".into(),
                treatment: Some("a".into()),
                covariates: Some(vec!["w1".into(), "w2".into()]),
            }).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn fold_plan_is_a_partition(n in 2usize..60, v in 2usize..8, seed in any::<u64>()) {
            prop_assume!(v <= n);
            let plan = make_folds(n, v, seed).unwrap();
            let mut count = vec![0usize; n];
            for fold in 0..v {
                for row in plan.validation_rows(fold) {
                    count[row] += 1;
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
            let sizes: Vec<usize> = (0..v).map(|f| plan.validation_rows(f).len()).collect();
            let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(max - min <= 1);
        }
    }
}
