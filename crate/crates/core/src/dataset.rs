//! Trial data ingestion and representation.
//!
//! Missing cells are carried as `None` all the way through, so a stored
//! placeholder can never leak into a computation. Two views exist on top of
//! the raw [`TrialDataset`]: [`BinaryTrial`] (treatment encoded to 0/1, cells
//! may still be missing) and [`CompleteTrial`] (no missing cells, dense
//! matrices ready for estimation).

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Tokens that mark a cell as unobserved. Anything else must parse as a number.
pub const MISSING_TOKENS: [&str; 2] = ["", "NA"];

fn is_missing_token(s: &str) -> bool {
    MISSING_TOKENS.contains(&s)
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateColumn(name.clone()));
        }
    }
    Ok(())
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

/// Raw trial data: arm labels, outcome, and covariates with explicit missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    treatment_name: String,
    outcome_name: String,
    treatment: Vec<String>,
    outcome: Vec<Option<f64>>,
    /// Column-major: `covariates[j][i]` is row `i` of covariate `j`.
    covariates: Vec<Vec<Option<f64>>>,
    covariate_names: Vec<String>,
}

impl TrialDataset {
    pub fn new(
        treatment_name: impl Into<String>,
        outcome_name: impl Into<String>,
        treatment: Vec<String>,
        outcome: Vec<Option<f64>>,
        covariate_names: Vec<String>,
        covariates: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let n = treatment.len();
        if outcome.len() != n {
            return Err(Error::DimensionMismatch { context: "outcome column", expected: n, found: outcome.len() });
        }
        if covariates.len() != covariate_names.len() {
            return Err(Error::DimensionMismatch {
                context: "covariate names",
                expected: covariates.len(),
                found: covariate_names.len(),
            });
        }
        for col in &covariates {
            if col.len() != n {
                return Err(Error::DimensionMismatch { context: "covariate column", expected: n, found: col.len() });
            }
        }
        let treatment_name = treatment_name.into();
        let outcome_name = outcome_name.into();
        let mut all = vec![treatment_name.clone(), outcome_name.clone()];
        all.extend(covariate_names.iter().cloned());
        check_unique(&all)?;
        Ok(Self { treatment_name, outcome_name, treatment, outcome, covariates, covariate_names })
    }

    pub fn n_rows(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn treatment(&self) -> &[String] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn covariate(&self, j: usize) -> &[Option<f64>] {
        &self.covariates[j]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// Column order of the written file: treatment, outcome, covariates.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.treatment_name.clone(), self.outcome_name.clone()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.treatment[i].clone(), fmt_cell(self.outcome[i])];
            rec.extend(self.covariates.iter().map(|c| fmt_cell(c[i])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

/// Reads a header-first CSV file. Every column other than the outcome and
/// treatment columns becomes a covariate.
pub fn load_csv(path: impl AsRef<Path>, outcome_col: &str, treatment_col: &str) -> Result<TrialDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    read_csv(file, outcome_col, treatment_col)
}

pub fn read_csv<R: Read>(reader: R, outcome_col: &str, treatment_col: &str) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    check_unique(&header)?;
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let y_idx = find(outcome_col)?;
    let a_idx = find(treatment_col)?;
    let cov_idx: Vec<usize> = (0..header.len()).filter(|&j| j != y_idx && j != a_idx).collect();

    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut covariates = vec![Vec::new(); cov_idx.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<Option<f64>> {
            let raw = rec.get(j).unwrap_or("");
            if is_missing_token(raw) {
                return Ok(None);
            }
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some).ok_or_else(|| Error::ParseCell {
                row: row + 1,
                column: header[j].clone(),
                value: raw.to_string(),
            })
        };
        treatment.push(rec.get(a_idx).unwrap_or("").to_string());
        outcome.push(parse(y_idx)?);
        for (slot, &j) in covariates.iter_mut().zip(&cov_idx) {
            slot.push(parse(j)?);
        }
    }
    let names = cov_idx.iter().map(|&j| header[j].clone()).collect();
    TrialDataset::new(treatment_col, outcome_col, treatment, outcome, names, covariates)
}

/// Per-column missing counts and the number of fully observed rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingnessSummary {
    pub n_rows: usize,
    pub outcome_missing: usize,
    pub covariate_missing: Vec<(String, usize)>,
    pub complete_rows: usize,
}

pub fn missingness_summary(ds: &TrialDataset) -> MissingnessSummary {
    let n = ds.n_rows();
    let complete_rows =
        (0..n).filter(|&i| ds.outcome[i].is_some() && ds.covariates.iter().all(|c| c[i].is_some())).count();
    MissingnessSummary {
        n_rows: n,
        outcome_missing: ds.outcome.iter().filter(|v| v.is_none()).count(),
        covariate_missing: ds
            .covariate_names
            .iter()
            .zip(&ds.covariates)
            .map(|(name, col)| (name.clone(), col.iter().filter(|v| v.is_none()).count()))
            .collect(),
        complete_rows,
    }
}

/// Maps arm labels to a 0/1 indicator. Both arms must be non-empty.
pub fn encode_treatment(ds: &TrialDataset, trt_name: &str, ctrl_name: &str) -> Result<BinaryTrial> {
    if trt_name == ctrl_name {
        return Err(Error::InvalidParameter("treatment and control labels must differ".into()));
    }
    let treatment = ds
        .treatment
        .iter()
        .map(|label| match label.as_str() {
            l if l == trt_name => Ok(1u8),
            l if l == ctrl_name => Ok(0u8),
            other => Err(Error::UnknownTreatment {
                label: other.to_string(),
                trt: trt_name.to_string(),
                ctrl: ctrl_name.to_string(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    for (arm, name) in [(1u8, trt_name), (0u8, ctrl_name)] {
        if !treatment.contains(&arm) {
            return Err(Error::EmptyArm(name.to_string()));
        }
    }
    Ok(BinaryTrial {
        treatment,
        outcome: ds.outcome.clone(),
        covariates: ds.covariates.clone(),
        covariate_names: ds.covariate_names.clone(),
        labels: ArmLabels {
            treatment_col: ds.treatment_name.clone(),
            outcome_col: ds.outcome_name.clone(),
            control: ctrl_name.to_string(),
            treated: trt_name.to_string(),
        },
    })
}

/// Column names and arm labels carried along so a processed trial can be
/// written back out in its original vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmLabels {
    pub treatment_col: String,
    pub outcome_col: String,
    pub control: String,
    pub treated: String,
}

impl ArmLabels {
    pub fn generic() -> Self {
        Self { treatment_col: "A".into(), outcome_col: "Y".into(), control: "0".into(), treated: "1".into() }
    }
}

/// Trial with a binary treatment indicator; cells may still be unobserved.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTrial {
    pub(crate) treatment: Vec<u8>,
    pub(crate) outcome: Vec<Option<f64>>,
    pub(crate) covariates: Vec<Vec<Option<f64>>>,
    pub(crate) covariate_names: Vec<String>,
    pub(crate) labels: ArmLabels,
}

impl BinaryTrial {
    pub fn new(
        treatment: Vec<u8>,
        outcome: Vec<Option<f64>>,
        covariate_names: Vec<String>,
        covariates: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let n = treatment.len();
        if treatment.iter().any(|&a| a > 1) {
            return Err(Error::InvalidParameter("treatment must be 0 or 1".into()));
        }
        for arm in [0u8, 1] {
            if !treatment.contains(&arm) {
                return Err(Error::EmptyArm(arm.to_string()));
            }
        }
        if outcome.len() != n {
            return Err(Error::DimensionMismatch { context: "outcome column", expected: n, found: outcome.len() });
        }
        if covariates.len() != covariate_names.len() {
            return Err(Error::DimensionMismatch {
                context: "covariate names",
                expected: covariates.len(),
                found: covariate_names.len(),
            });
        }
        if let Some(c) = covariates.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch { context: "covariate column", expected: n, found: c.len() });
        }
        check_unique(&covariate_names)?;
        Ok(Self { treatment, outcome, covariates, covariate_names, labels: ArmLabels::generic() })
    }

    pub fn with_labels(mut self, labels: ArmLabels) -> Self {
        self.labels = labels;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn covariate(&self, j: usize) -> &[Option<f64>] {
        &self.covariates[j]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn labels(&self) -> &ArmLabels {
        &self.labels
    }

    /// `(N0, N1)`
    pub fn arm_sizes(&self) -> (usize, usize) {
        let n1 = self.treatment.iter().filter(|&&a| a == 1).count();
        (self.n_rows() - n1, n1)
    }

    pub fn row_complete(&self, i: usize) -> bool {
        self.outcome[i].is_some() && self.covariates.iter().all(|c| c[i].is_some())
    }

    pub fn is_complete(&self) -> bool {
        (0..self.n_rows()).all(|i| self.row_complete(i))
    }

    pub fn count_missing(&self) -> usize {
        self.outcome.iter().filter(|v| v.is_none()).count()
            + self.covariates.iter().map(|c| c.iter().filter(|v| v.is_none()).count()).sum::<usize>()
    }

    /// Keeps the listed rows, in order. Arms may become empty here; callers
    /// that need both arms check afterwards.
    pub fn subset_rows(&self, rows: &[usize]) -> BinaryTrial {
        BinaryTrial {
            treatment: rows.iter().map(|&i| self.treatment[i]).collect(),
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            covariates: self.covariates.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect(),
            covariate_names: self.covariate_names.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn to_complete(&self) -> Result<CompleteTrial> {
        if !self.is_complete() {
            return Err(Error::Incomplete);
        }
        let n = self.n_rows();
        let p = self.n_covariates();
        let outcome = DVector::from_iterator(n, self.outcome.iter().map(|v| v.unwrap()));
        let covariates = DMatrix::from_fn(n, p, |i, j| self.covariates[j][i].unwrap());
        CompleteTrial::new(self.treatment.clone(), outcome, covariates, self.covariate_names.clone())
            .map(|t| t.with_labels(self.labels.clone()))
    }
}

/// Fully observed trial with dense storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteTrial {
    treatment: Vec<u8>,
    outcome: DVector<f64>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    labels: ArmLabels,
}

impl CompleteTrial {
    pub fn new(
        treatment: Vec<u8>,
        outcome: DVector<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = treatment.len();
        if treatment.iter().any(|&a| a > 1) {
            return Err(Error::InvalidParameter("treatment must be 0 or 1".into()));
        }
        if outcome.len() != n {
            return Err(Error::DimensionMismatch { context: "outcome", expected: n, found: outcome.len() });
        }
        if covariates.nrows() != n {
            return Err(Error::DimensionMismatch { context: "covariate rows", expected: n, found: covariates.nrows() });
        }
        if covariates.ncols() != covariate_names.len() {
            return Err(Error::DimensionMismatch {
                context: "covariate names",
                expected: covariates.ncols(),
                found: covariate_names.len(),
            });
        }
        check_unique(&covariate_names)?;
        Ok(Self { treatment, outcome, covariates, covariate_names, labels: ArmLabels::generic() })
    }

    pub fn with_labels(mut self, labels: ArmLabels) -> Self {
        self.labels = labels;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.outcome
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn labels(&self) -> &ArmLabels {
        &self.labels
    }

    pub fn arm_rows(&self, arm: u8) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.treatment[i] == arm).collect()
    }

    /// Covariate columns `cols`, all rows.
    pub fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        self.covariates.select_columns(cols)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.labels.treatment_col.clone(), self.labels.outcome_col.clone()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let arm = if self.treatment[i] == 1 { self.labels.treated.clone() } else { self.labels.control.clone() };
            let mut rec = vec![arm, format!("{}", self.outcome[i])];
            rec.extend((0..self.n_covariates()).map(|j| format!("{}", self.covariates[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
        Ok(())
    }

    /// Same trial restricted to covariate columns `cols`.
    pub fn restrict_covariates(&self, cols: &[usize]) -> CompleteTrial {
        CompleteTrial {
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            covariates: self.columns(cols),
            covariate_names: cols.iter().map(|&j| self.covariate_names[j].clone()).collect(),
            labels: self.labels.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TrialDataset> {
        read_csv(text.as_bytes(), "y", "a")
    }

    #[test]
    fn fully_observed_file() {
        let ds = parse("a,y,x1,x2\nT,1.0,2,3\nC,2.5,4,5\nT,3,6,7\n").unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.covariate_names(), ["x1", "x2"]);
        assert!(ds.outcome().iter().all(Option::is_some));
        assert!((0..2).all(|j| ds.covariate(j).iter().all(Option::is_some)));
    }

    #[test]
    fn na_marks_single_cell() {
        let ds = parse("a,y,x1,x2\nT,1,2,3\nC,2,NA,5\nT,3,6,\n").unwrap();
        assert_eq!(ds.covariate(0)[1], None);
        assert_eq!(ds.covariate(1)[2], None);
        assert_eq!(ds.covariate(0)[0], Some(2.0));
        let s = missingness_summary(&ds);
        assert_eq!(s.covariate_missing, vec![("x1".into(), 1), ("x2".into(), 1)]);
        assert_eq!(s.complete_rows, 1);
    }

    #[test]
    fn missing_outcome_column() {
        let err = read_csv("a,z,x1\nT,1,2\n".as_bytes(), "y", "a").unwrap_err();
        assert!(err.to_string().contains("missing column"));
    }

    #[test]
    fn bad_token_and_duplicate_header() {
        assert!(matches!(parse("a,y,x1\nT,1,abc\n"), Err(Error::ParseCell { .. })));
        assert!(matches!(parse("a,y,x1\nT,1,.\n"), Err(Error::ParseCell { .. })));
        assert!(matches!(parse("a,y,x1,x1\nT,1,2,3\n"), Err(Error::DuplicateColumn(_))));
    }

    #[test]
    fn encode_letters_and_numerals() {
        let ds = parse("a,y\nT,1\nC,2\nT,3\n").unwrap();
        let bt = encode_treatment(&ds, "T", "C").unwrap();
        assert_eq!(bt.treatment(), [1, 0, 1]);
        assert_eq!(bt.outcome(), ds.outcome());

        let ds = parse("a,y\n1,1\n0,2\n").unwrap();
        assert_eq!(encode_treatment(&ds, "1", "0").unwrap().treatment(), [1, 0]);
    }

    #[test]
    fn encode_rejects_empty_arm_and_unknown_label() {
        let ds = parse("a,y\nT,1\nT,2\n").unwrap();
        let err = encode_treatment(&ds, "T", "C").unwrap_err();
        assert!(err.to_string().contains("empty arm"));
        let ds = parse("a,y\nT,1\nC,2\nX,3\n").unwrap();
        assert!(matches!(encode_treatment(&ds, "T", "C"), Err(Error::UnknownTreatment { .. })));
    }

    #[test]
    fn summary_counts() {
        let mut text = String::from("a,y,x1,x2,x3\n");
        for i in 0..10 {
            text.push_str(&format!("{},{},{},{},{}\n", i % 2, i, i, 2 * i, 3 * i));
        }
        let ds = parse(&text).unwrap();
        let s = missingness_summary(&ds);
        assert_eq!(s.outcome_missing, 0);
        assert!(s.covariate_missing.iter().all(|(_, c)| *c == 0));
        assert_eq!(s.complete_rows, 10);

        let text = text.replacen("\n1,1,", "\n1,NA,", 1);
        let s = missingness_summary(&parse(&text).unwrap());
        assert_eq!(s.outcome_missing, 1);
        assert_eq!(s.complete_rows, 9);
    }

    #[test]
    fn every_row_incomplete() {
        // Rows miss cells in rotating columns; no row survives.
        let ds = parse("a,y,x1,x2\n1,NA,1,2\n0,1,NA,2\n1,1,2,NA\n0,NA,NA,NA\n").unwrap();
        let expected = (0..ds.n_rows())
            .filter(|&i| ds.outcome()[i].is_some() && (0..2).all(|j| ds.covariate(j)[i].is_some()))
            .count();
        assert_eq!(expected, 0);
        assert_eq!(missingness_summary(&ds).complete_rows, 0);
    }

    #[test]
    fn to_complete_requires_observed_cells() {
        let ds = parse("a,y,x1\n1,1,NA\n0,2,3\n").unwrap();
        let bt = encode_treatment(&ds, "1", "0").unwrap();
        assert!(matches!(bt.to_complete(), Err(Error::Incomplete)));
        let ct = bt.subset_rows(&[1]).to_complete().unwrap();
        assert_eq!(ct.n_rows(), 1);
    }
}
