//! Tensor-product spline bases with knots at observed values.
//!
//! For covariates x in R^d, every nonempty coordinate subset s with
//! |s| <= max_degree contributes basis functions
//!
//! ```text
//! order 0:  phi_{s,u}(x) = prod_{j in s} 1{u_j <= x_j}
//! order 1:  phi_{s,u}(x) = prod_{j in s} (x_j - u_j)_+
//! ```
//!
//! with knot vectors u taken from the data: either every observed point
//! projected onto s (so the pre-dedup column count is n * (2^d - 1) when
//! max_degree = d), or a tensor product of per-coordinate empirical
//! quantiles. A linear combination of the order-0 functions is a cadlag
//! step function whose sectional variation norm is |intercept| + sum|beta|,
//! which is exactly the quantity the lasso penalizes.
//!
//! Columns that are identical on the data are merged (provenance retained);
//! the intercept is never part of the catalog — the solver keeps it
//! unpenalized and separate.

use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Spline order of the basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplineOrder {
    /// Indicator steps `1{u <= x}` componentwise.
    Zero,
    /// Hinge functions `(x - u)_+` componentwise.
    One,
}

/// Where knots come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnotStrategy {
    /// One knot vector per observation and subset: the observation's own
    /// coordinates projected onto the subset.
    AllObservations,
    /// Per-coordinate empirical quantiles (nearest observed value), tensored
    /// across the subset. The payload is the number of quantile levels.
    Quantiles(usize),
}

/// Optional sign restriction on the coefficients of a basis group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignConstraint {
    Nonnegative,
    Nonpositive,
}

/// Everything needed to enumerate a basis over a design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Largest interaction size (subset cardinality) to include; clamped
    /// to the number of design columns.
    pub max_degree: usize,
    pub knots: KnotStrategy,
    pub order: SplineOrder,
    /// Optional cap on the post-dedup column count; the densest columns
    /// (by [`rank_by_sparsity`]) are kept.
    pub max_basis: Option<usize>,
    /// Sign constraints keyed by coordinate subset (sorted ids).
    pub sign_constraints: Vec<(Vec<usize>, SignConstraint)>,
    /// Guard against runaway enumerations: error out if the pre-dedup
    /// column count would exceed this.
    pub column_budget: usize,
}

pub const DEFAULT_COLUMN_BUDGET: usize = 4_000_000;

impl BasisSpec {
    /// Order-0 spec with no cap and no constraints.
    pub fn zero_order(max_degree: usize, knots: KnotStrategy) -> Self {
        BasisSpec {
            max_degree,
            knots,
            order: SplineOrder::Zero,
            max_basis: None,
            sign_constraints: Vec::new(),
            column_budget: DEFAULT_COLUMN_BUDGET,
        }
    }

    /// First-order (hinge) variant of [`BasisSpec::zero_order`].
    pub fn first_order(max_degree: usize, knots: KnotStrategy) -> Self {
        BasisSpec {
            order: SplineOrder::One,
            ..BasisSpec::zero_order(max_degree, knots)
        }
    }
}

/// A single tensor-product basis function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    /// Sorted design-column ids the function depends on.
    pub subset: Vec<usize>,
    /// Knot vector, aligned with `subset`.
    pub knot: Vec<f64>,
    pub order: SplineOrder,
}

/// Evaluate one basis function at a point (x indexed by design column).
pub fn evaluate_basis(f: &BasisFunction, x: &[f64]) -> f64 {
    match f.order {
        SplineOrder::Zero => {
            for (&j, &u) in f.subset.iter().zip(&f.knot) {
                if x[j] < u {
                    return 0.0;
                }
            }
            1.0
        }
        SplineOrder::One => {
            let mut v = 1.0;
            for (&j, &u) in f.subset.iter().zip(&f.knot) {
                let h = x[j] - u;
                if h <= 0.0 {
                    return 0.0;
                }
                v *= h;
            }
            v
        }
    }
}

/// Sparse design column over the enumeration data.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    /// Sorted row indices where the indicator equals 1.
    Indicator(Vec<u32>),
    /// Sorted row indices with their (positive) hinge values.
    Hinge(Vec<u32>, Vec<f64>),
}

impl Column {
    pub fn support(&self) -> usize {
        match self {
            Column::Indicator(idx) => idx.len(),
            Column::Hinge(idx, _) => idx.len(),
        }
    }

    /// Dense value of the column at a training row.
    pub fn value_at(&self, row: u32) -> f64 {
        match self {
            Column::Indicator(idx) => {
                if idx.binary_search(&row).is_ok() {
                    1.0
                } else {
                    0.0
                }
            }
            Column::Hinge(idx, vals) => match idx.binary_search(&row) {
                Ok(k) => vals[k],
                Err(_) => 0.0,
            },
        }
    }

    /// Restrict to a row multiset given in new-row order; `rows[i]` is the
    /// original index of new row i. Handles repeated rows (bootstrap).
    pub fn restrict(&self, rows: &[usize], n_original: usize) -> Column {
        match self {
            Column::Indicator(idx) => {
                let mut mask = vec![false; n_original];
                for &i in idx {
                    mask[i as usize] = true;
                }
                let out: Vec<u32> = rows
                    .iter()
                    .enumerate()
                    .filter(|(_, &orig)| mask[orig])
                    .map(|(new, _)| new as u32)
                    .collect();
                Column::Indicator(out)
            }
            Column::Hinge(idx, vals) => {
                let mut dense = vec![0.0f64; n_original];
                for (&i, &v) in idx.iter().zip(vals) {
                    dense[i as usize] = v;
                }
                let mut oi = Vec::new();
                let mut ov = Vec::new();
                for (new, &orig) in rows.iter().enumerate() {
                    let v = dense[orig];
                    if v != 0.0 {
                        oi.push(new as u32);
                        ov.push(v);
                    }
                }
                Column::Hinge(oi, ov)
            }
        }
    }
}

/// Enumerated basis over a fixed design: functions, their sparse columns,
/// dedup provenance, and per-column sign constraints.
#[derive(Debug, Clone)]
pub struct BasisCatalog {
    functions: Vec<BasisFunction>,
    columns: Vec<Column>,
    /// Pre-dedup enumeration indices merged into each kept column; the first
    /// entry generated the representative function.
    provenance: Vec<Vec<u32>>,
    constraints: Vec<Option<SignConstraint>>,
    n_rows: usize,
    pre_dedup_count: usize,
    spec: BasisSpec,
}

impl BasisCatalog {
    /// Number of (post-dedup, post-cap) columns.
    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn n(&self) -> usize {
        self.n_rows
    }

    /// Column count before duplicates were merged and any cap applied.
    pub fn pre_dedup_count(&self) -> usize {
        self.pre_dedup_count
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn provenance(&self) -> &[Vec<u32>] {
        &self.provenance
    }

    pub fn constraints(&self) -> &[Option<SignConstraint>] {
        &self.constraints
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    /// Support fraction (proportion of nonzero rows) per column.
    pub fn support_fractions(&self) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c.support() as f64 / self.n_rows as f64)
            .collect()
    }

    /// Evaluate every basis function at a new point.
    pub fn evaluate_row(&self, x: &[f64]) -> Vec<f64> {
        self.functions.iter().map(|f| evaluate_basis(f, x)).collect()
    }

    /// Linear predictor on training rows via the stored sparse columns.
    pub fn linear_predictor(&self, intercept: f64, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.p());
        let mut eta = vec![intercept; self.n_rows];
        for (j, col) in self.columns.iter().enumerate() {
            let b = beta[j];
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

    /// Restrict selected columns to a row multiset (bootstrap / CV folds).
    /// Column identity and order follow `cols`.
    pub fn restricted_columns(&self, cols: &[usize], rows: &[usize]) -> Vec<Column> {
        cols.iter()
            .map(|&j| self.columns[j].restrict(rows, self.n_rows))
            .collect()
    }

    /// JSON-ready summary: shape counts plus per-column descriptors
    /// (no raw column data).
    pub fn summary(&self) -> CatalogSummary {
        CatalogSummary {
            n: self.n_rows,
            p: self.p(),
            pre_dedup_count: self.pre_dedup_count,
            order: self.spec.order,
            knots: self.spec.knots,
            max_degree: self.spec.max_degree,
            columns: self
                .functions
                .iter()
                .zip(&self.columns)
                .zip(&self.provenance)
                .map(|((f, c), prov)| ColumnSummary {
                    subset: f.subset.clone(),
                    knot: f.knot.clone(),
                    support: c.support(),
                    merged: prov.len(),
                })
                .collect(),
        }
    }
}

/// Serializable catalog description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub n: usize,
    pub p: usize,
    pub pre_dedup_count: usize,
    pub order: SplineOrder,
    pub knots: KnotStrategy,
    pub max_degree: usize,
    pub columns: Vec<ColumnSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub subset: Vec<usize>,
    pub knot: Vec<f64>,
    pub support: usize,
    pub merged: usize,
}

/// Sectional variation norm of a fitted combination: |intercept| plus the
/// l1 norm of the slopes.
pub fn sectional_variation_norm(intercept: f64, beta: &[f64]) -> f64 {
    intercept.abs() + beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Column ranking by support size, densest first; ties broken by column
/// index (stable). Used for `max_basis` truncation.
pub fn rank_by_sparsity(columns: &[Column]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..columns.len()).collect();
    order.sort_by(|&a, &b| {
        columns[b]
            .support()
            .cmp(&columns[a].support())
            .then(a.cmp(&b))
    });
    order
}

/// Enumerate the basis catalog over design columns (each of length n).
///
/// Deterministic: subsets ascend by (size, lexicographic ids); knots follow
/// row order (all-observations) or sorted per-coordinate quantile order
/// tensored with the last coordinate fastest. Duplicate columns merge into
/// their first occurrence.
pub fn enumerate_basis(design: &[&[f64]], spec: &BasisSpec) -> Result<BasisCatalog> {
    let d = design.len();
    if d == 0 {
        return Err(Error::invalid("basis enumeration needs at least one design column"));
    }
    let n = design[0].len();
    if n == 0 {
        return Err(Error::invalid("basis enumeration needs at least one row"));
    }
    if design.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("design columns have unequal lengths"));
    }
    if spec.max_degree == 0 {
        return Err(Error::invalid("max_degree must be at least 1"));
    }
    if let KnotStrategy::Quantiles(q) = spec.knots {
        if q == 0 {
            return Err(Error::invalid("quantile knot count must be at least 1"));
        }
    }
    let max_degree = spec.max_degree.min(d);

    // Knot lists per coordinate for the quantile strategy: nearest observed
    // values at levels k/(q+1), k = 1..q, deduplicated, sorted.
    let quantile_knots: Option<Vec<Vec<f64>>> = match spec.knots {
        KnotStrategy::AllObservations => None,
        KnotStrategy::Quantiles(q) => Some(
            design
                .iter()
                .map(|col| {
                    let mut sorted: Vec<f64> = col.to_vec();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let mut knots: Vec<f64> = Vec::with_capacity(q);
                    for k in 1..=q {
                        let p = k as f64 / (q as f64 + 1.0);
                        let pos = (p * (n - 1) as f64).round() as usize;
                        let v = sorted[pos.min(n - 1)];
                        if knots.last() != Some(&v) {
                            knots.push(v);
                        }
                    }
                    knots
                })
                .collect(),
        ),
    };

    let subsets = enumerate_subsets(d, max_degree);

    // Budget check before any column is materialized.
    let pre_dedup_count: usize = subsets
        .iter()
        .map(|s| match &quantile_knots {
            None => n,
            Some(lists) => s.iter().map(|&j| lists[j].len()).product(),
        })
        .sum();
    if pre_dedup_count > spec.column_budget {
        return Err(Error::invalid(format!(
            "basis would enumerate {pre_dedup_count} columns before dedup, over the budget of {}",
            spec.column_budget
        )));
    }

    let mut functions: Vec<BasisFunction> = Vec::new();
    let mut columns: Vec<Column> = Vec::new();
    let mut provenance: Vec<Vec<u32>> = Vec::new();
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut enum_id: u32 = 0;

    let push_column = |f: BasisFunction,
                           col: Column,
                           functions: &mut Vec<BasisFunction>,
                           columns: &mut Vec<Column>,
                           provenance: &mut Vec<Vec<u32>>,
                           seen: &mut HashMap<u64, Vec<usize>>,
                           enum_id: u32| {
        let key = column_hash(&col);
        match seen.entry(key) {
            Entry::Occupied(mut e) => {
                for &existing in e.get() {
                    if columns[existing] == col {
                        provenance[existing].push(enum_id);
                        return;
                    }
                }
                e.get_mut().push(columns.len());
                functions.push(f);
                columns.push(col);
                provenance.push(vec![enum_id]);
            }
            Entry::Vacant(e) => {
                e.insert(vec![columns.len()]);
                functions.push(f);
                columns.push(col);
                provenance.push(vec![enum_id]);
            }
        }
    };

    for subset in &subsets {
        match &quantile_knots {
            None => {
                for i in 0..n {
                    let knot: Vec<f64> = subset.iter().map(|&j| design[j][i]).collect();
                    let f = BasisFunction {
                        subset: subset.clone(),
                        knot,
                        order: spec.order,
                    };
                    let col = build_column(design, &f, n);
                    push_column(
                        f,
                        col,
                        &mut functions,
                        &mut columns,
                        &mut provenance,
                        &mut seen,
                        enum_id,
                    );
                    enum_id += 1;
                }
            }
            Some(lists) => {
                let dims: Vec<usize> = subset.iter().map(|&j| lists[j].len()).collect();
                let mut odometer = vec![0usize; subset.len()];
                loop {
                    let knot: Vec<f64> = subset
                        .iter()
                        .zip(&odometer)
                        .map(|(&j, &k)| lists[j][k])
                        .collect();
                    let f = BasisFunction {
                        subset: subset.clone(),
                        knot,
                        order: spec.order,
                    };
                    let col = build_column(design, &f, n);
                    push_column(
                        f,
                        col,
                        &mut functions,
                        &mut columns,
                        &mut provenance,
                        &mut seen,
                        enum_id,
                    );
                    enum_id += 1;
                    // Advance, last coordinate fastest.
                    let mut pos = subset.len();
                    loop {
                        if pos == 0 {
                            break;
                        }
                        pos -= 1;
                        odometer[pos] += 1;
                        if odometer[pos] < dims[pos] {
                            break;
                        }
                        odometer[pos] = 0;
                        if pos == 0 {
                            pos = usize::MAX;
                            break;
                        }
                    }
                    if pos == usize::MAX {
                        break;
                    }
                }
            }
        }
    }
    debug_assert_eq!(enum_id as usize, pre_dedup_count);

    // Optional cap: keep the densest max_basis columns, preserving
    // enumeration order among the kept.
    if let Some(cap) = spec.max_basis {
        if columns.len() > cap {
            let ranking = rank_by_sparsity(&columns);
            let mut keep = vec![false; columns.len()];
            for &j in ranking.iter().take(cap) {
                keep[j] = true;
            }
            let mut kf = Vec::with_capacity(cap);
            let mut kc = Vec::with_capacity(cap);
            let mut kp = Vec::with_capacity(cap);
            for j in 0..columns.len() {
                if keep[j] {
                    kf.push(functions[j].clone());
                    kc.push(columns[j].clone());
                    kp.push(provenance[j].clone());
                }
            }
            functions = kf;
            columns = kc;
            provenance = kp;
        }
    }

    let constraints: Vec<Option<SignConstraint>> = functions
        .iter()
        .map(|f| {
            spec.sign_constraints
                .iter()
                .find(|(s, _)| s == &f.subset)
                .map(|&(_, c)| c)
        })
        .collect();

    Ok(BasisCatalog {
        functions,
        columns,
        provenance,
        constraints,
        n_rows: n,
        pre_dedup_count,
        spec: spec.clone(),
    })
}

/// Nonempty subsets of {0..d-1} up to the given size, ordered by
/// (size, lexicographic).
fn enumerate_subsets(d: usize, max_degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 1..=max_degree.min(d) {
        let mut current: Vec<usize> = (0..size).collect();
        'emit: loop {
            out.push(current.clone());
            // Advance to the next lexicographic combination: bump the
            // rightmost index that still has room, reset the tail.
            for i in (0..size).rev() {
                if current[i] < d - (size - i) {
                    current[i] += 1;
                    for k in i + 1..size {
                        current[k] = current[k - 1] + 1;
                    }
                    continue 'emit;
                }
            }
            break;
        }
    }
    out
}

fn build_column(design: &[&[f64]], f: &BasisFunction, n: usize) -> Column {
    match f.order {
        SplineOrder::Zero => {
            let mut idx = Vec::new();
            'rows: for i in 0..n {
                for (&j, &u) in f.subset.iter().zip(&f.knot) {
                    if design[j][i] < u {
                        continue 'rows;
                    }
                }
                idx.push(i as u32);
            }
            Column::Indicator(idx)
        }
        SplineOrder::One => {
            let mut idx = Vec::new();
            let mut vals = Vec::new();
            'rows1: for i in 0..n {
                let mut v = 1.0;
                for (&j, &u) in f.subset.iter().zip(&f.knot) {
                    let h = design[j][i] - u;
                    if h <= 0.0 {
                        continue 'rows1;
                    }
                    v *= h;
                }
                idx.push(i as u32);
                vals.push(v);
            }
            Column::Hinge(idx, vals)
        }
    }
}

fn column_hash(col: &Column) -> u64 {
    let mut h = DefaultHasher::new();
    match col {
        Column::Indicator(idx) => {
            0u8.hash(&mut h);
            idx.hash(&mut h);
        }
        Column::Hinge(idx, vals) => {
            1u8.hash(&mut h);
            idx.hash(&mut h);
            for v in vals {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}
