//! Dataset representation, CSV ingestion, fold planning and trimming.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense column-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Matrix {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let ncols = columns.len();
        let nrows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != nrows) {
            return Err(Error::Argument("columns of unequal length".into()));
        }
        let mut data = Vec::with_capacity(nrows * ncols);
        for c in columns {
            data.extend_from_slice(&c);
        }
        Ok(Matrix { nrows, ncols, data })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nrows + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.nrows + i] = v;
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.ncols).map(|j| self.get(i, j)).collect()
    }

    /// Select a subset of rows, preserving order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.ncols);
        for j in 0..self.ncols {
            let src = self.col(j);
            let dst = out.col_mut(j);
            for (k, &i) in rows.iter().enumerate() {
                dst[k] = src[i];
            }
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.nrows != other.nrows {
            return Err(Error::Argument("hcat: row count mismatch".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            nrows: self.nrows,
            ncols: self.ncols + other.ncols,
            data,
        })
    }
}

/// Observed sample of (Y, D, M, X) columns.
///
/// Treatment values are recoded to contiguous integers `0..L-1` at
/// construction; the original labels are kept in `treatment_coding`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub d: Vec<i64>,
    pub m: Matrix,
    pub x: Matrix,
    pub column_names: ColumnNames,
    /// Original treatment label for each recoded level.
    pub treatment_coding: Vec<i64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ColumnNames {
    pub outcome: String,
    pub treatment: String,
    pub mediators: Vec<String>,
    pub covariates: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, d: Vec<i64>, m: Matrix, x: Matrix, names: ColumnNames) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::Validation("need at least 2 observations".into()));
        }
        if d.len() != n || m.nrows() != n || x.nrows() != n {
            return Err(Error::Validation("column length mismatch".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite outcome value".into()));
        }
        let (d, coding) = recode_treatment(&d)?;
        Ok(Dataset {
            y,
            d,
            m,
            x,
            column_names: names,
            treatment_coding: coding,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of treatment levels.
    pub fn n_levels(&self) -> usize {
        self.treatment_coding.len()
    }

    pub fn is_binary_treatment(&self) -> bool {
        self.n_levels() == 2
    }

    /// Features `[M | X]` used by the outcome and propensity models.
    pub fn mx_features(&self) -> Result<Matrix> {
        self.m.hcat(&self.x)
    }
}

fn recode_treatment(d: &[i64]) -> Result<(Vec<i64>, Vec<i64>)> {
    let mut labels: Vec<i64> = d.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Validation(
            "treatment takes fewer than 2 distinct values".into(),
        ));
    }
    let map: BTreeMap<i64, i64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as i64))
        .collect();
    let recoded = d.iter().map(|v| map[v]).collect();
    Ok((recoded, labels))
}

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub mediators: Vec<String>,
    /// Explicit covariate list, or `AllRemaining` for every column not
    /// otherwise assigned a role.
    pub covariates: CovariateSpec,
}

#[derive(Debug, Clone)]
pub enum CovariateSpec {
    Columns(Vec<String>),
    AllRemaining,
}

pub fn load_csv<P: AsRef<Path>>(path: P, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("missing header row: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };

    let y_idx = col_index(&schema.outcome)?;
    let d_idx = col_index(&schema.treatment)?;
    let m_idx: Vec<usize> = schema
        .mediators
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let x_names: Vec<String> = match &schema.covariates {
        CovariateSpec::Columns(cols) => {
            for c in cols {
                col_index(c)?;
            }
            cols.clone()
        }
        CovariateSpec::AllRemaining => headers
            .iter()
            .enumerate()
            .filter(|(i, h)| {
                *i != y_idx && *i != d_idx && !schema.mediators.contains(h)
            })
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let x_idx: Vec<usize> = x_names.iter().map(|c| col_index(c)).collect::<Result<_>>()?;

    let parse_cell = |row: usize, col: &str, raw: &str| -> Result<f64> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(Error::Validation(format!(
                "missing value at row {row}, column '{col}'"
            )));
        }
        trimmed.parse::<f64>().map_err(|_| Error::Parse {
            row,
            column: col.to_string(),
            message: format!("non-numeric cell '{trimmed}'"),
        })
    };

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut m_cols: Vec<Vec<f64>> = vec![Vec::new(); m_idx.len()];
    let mut x_cols: Vec<Vec<f64>> = vec![Vec::new(); x_idx.len()];

    for (row_i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: row_i + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        // 1-based data row numbers in messages, header is row 0.
        let rownum = row_i + 1;
        y.push(parse_cell(rownum, &schema.outcome, &record[y_idx])?);
        let d_raw = parse_cell(rownum, &schema.treatment, &record[d_idx])?;
        if d_raw.fract() != 0.0 {
            return Err(Error::Parse {
                row: rownum,
                column: schema.treatment.clone(),
                message: format!("treatment value {d_raw} is not integer-coded"),
            });
        }
        d.push(d_raw as i64);
        for (k, &idx) in m_idx.iter().enumerate() {
            m_cols[k].push(parse_cell(rownum, &schema.mediators[k], &record[idx])?);
        }
        for (k, &idx) in x_idx.iter().enumerate() {
            x_cols[k].push(parse_cell(rownum, &x_names[k], &record[idx])?);
        }
    }

    let n = y.len();
    let m = if m_cols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(m_cols)?
    };
    let x = if x_cols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(x_cols)?
    };
    let names = ColumnNames {
        outcome: schema.outcome.clone(),
        treatment: schema.treatment.clone(),
        mediators: schema.mediators.clone(),
        covariates: x_names,
    };
    Dataset::new(y, d, m, x, names)
}

/// Balanced random partition of `0..n` into `K` folds, reproducible from
/// `(n, K, seed)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub n: usize,
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn out_of_fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Argument("fold count must be at least 2".into()));
    }
    if k > n {
        return Err(Error::Argument(format!("fold count {k} exceeds n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x666f6c64));
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan {
        n,
        k,
        assignment,
        seed,
    })
}

/// Propensity trimming bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimRule {
    pub lower: f64,
    pub upper: f64,
}

impl Default for TrimRule {
    fn default() -> Self {
        TrimRule {
            lower: 0.05,
            upper: 0.95,
        }
    }
}

impl TrimRule {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0 < lower && lower < 0.5 && 0.5 < upper && upper < 1.0) {
            return Err(Error::Argument(format!(
                "trim bounds ({lower}, {upper}) outside (0, 0.5) x (0.5, 1)"
            )));
        }
        Ok(TrimRule { lower, upper })
    }

    pub fn keeps(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrimDiagnostics {
    pub kept: usize,
    pub discarded: usize,
}

/// Indices with `lower <= p_hat <= upper`, plus kept/discarded counts.
pub fn apply_trim(p_hat: &[f64], rule: &TrimRule) -> Result<(Vec<usize>, TrimDiagnostics)> {
    if p_hat.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Argument("probabilities outside [0, 1]".into()));
    }
    let kept: Vec<usize> = (0..p_hat.len()).filter(|&i| rule.keeps(p_hat[i])).collect();
    let diag = TrimDiagnostics {
        kept: kept.len(),
        discarded: p_hat.len() - kept.len(),
    };
    Ok((kept, diag))
}

/// Deterministic sub-seed derivation (splitmix64 over seed and stream tag).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempdir::TmpCsv {
        tempdir::TmpCsv::new(contents)
    }

    // Minimal temp-file helper to avoid a dev-dependency.
    mod tempdir {
        use std::path::PathBuf;

        pub struct TmpCsv {
            pub path: PathBuf,
        }

        impl TmpCsv {
            pub fn new(contents: &str) -> Self {
                let path = std::env::temp_dir().join(format!(
                    "fullmed_test_{}_{}.csv",
                    std::process::id(),
                    crate::data::mix_seed(contents.len() as u64, contents.as_bytes()[0] as u64)
                ));
                std::fs::write(&path, contents).unwrap();
                TmpCsv { path }
            }
        }

        impl Drop for TmpCsv {
            fn drop(&mut self) {
                let _ = std::fs::remove_file(&self.path);
            }
        }
    }

    fn schema() -> Schema {
        Schema {
            outcome: "y".into(),
            treatment: "d".into(),
            mediators: vec!["m".into()],
            covariates: CovariateSpec::AllRemaining,
        }
    }

    #[test]
    fn load_csv_smallest_input() {
        let f = write_tmp("y,d,m,x1\n1.0,0,0.5,0.1\n2.0,1,0.6,0.2\n3.0,0,0.7,0.3\n4.0,1,0.8,0.4\n");
        let ds = load_csv(&f.path, &schema()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.n_levels(), 2);
        assert_eq!(ds.column_names.covariates, vec!["x1".to_string()]);
    }

    #[test]
    fn load_csv_recodes_noncontiguous_treatment() {
        let f = write_tmp("y,d,m,x1\n1.0,1,0.5,0.1\n2.0,3,0.6,0.2\n3.0,1,0.7,0.3\n");
        let ds = load_csv(&f.path, &schema()).unwrap();
        assert_eq!(ds.d, vec![0, 1, 0]);
        assert_eq!(ds.treatment_coding, vec![1, 3]);
    }

    #[test]
    fn load_csv_missing_cell_is_validation_error() {
        let f = write_tmp("y,d,m,x1\n1.0,0,,0.1\n2.0,1,0.6,0.2\n");
        let err = load_csv(&f.path, &schema()).unwrap_err();
        match err {
            Error::Validation(msg) => {
                assert!(msg.contains("row 1"), "{msg}");
                assert!(msg.contains("'m'"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_missing_column_is_schema_error() {
        let f = write_tmp("y,m,x1\n1.0,0.5,0.1\n");
        let err = load_csv(&f.path, &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn load_csv_nonnumeric_cell_names_row_and_column() {
        let f = write_tmp("y,d,m,x1\n1.0,0,0.5,0.1\nfoo,1,0.6,0.2\n");
        let err = load_csv(&f.path, &schema()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn folds_balanced_10_by_5() {
        let plan = make_folds(10, 5, 7).unwrap();
        for fold in 0..5 {
            assert_eq!(plan.fold_indices(fold).len(), 2);
        }
    }

    #[test]
    fn folds_balanced_within_one_11_by_5() {
        let plan = make_folds(11, 5, 7).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|f| plan.fold_indices(f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_deterministic() {
        assert_eq!(make_folds(100, 5, 42).unwrap(), make_folds(100, 5, 42).unwrap());
    }

    #[test]
    fn folds_reject_k_above_n() {
        assert!(matches!(make_folds(4, 5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn trim_basic() {
        let rule = TrimRule::default();
        let (kept, diag) = apply_trim(&[0.5, 0.04, 0.96], &rule).unwrap();
        assert_eq!(kept, vec![0]);
        assert_eq!(diag.discarded, 2);
    }

    #[test]
    fn trim_keeps_all_at_half() {
        let rule = TrimRule::default();
        let (kept, diag) = apply_trim(&[0.5; 8], &rule).unwrap();
        assert_eq!(kept.len(), 8);
        assert_eq!(diag.discarded, 0);
    }

    #[test]
    fn trim_idempotent() {
        let rule = TrimRule::default();
        let p = [0.5, 0.04, 0.96, 0.2, 0.9];
        let (kept, _) = apply_trim(&p, &rule).unwrap();
        let p_kept: Vec<f64> = kept.iter().map(|&i| p[i]).collect();
        let (kept2, diag2) = apply_trim(&p_kept, &rule).unwrap();
        assert_eq!(kept2.len(), p_kept.len());
        assert_eq!(diag2.discarded, 0);
    }
}
