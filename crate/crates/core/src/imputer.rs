//! Missing-data handling ahead of selection and estimation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dataset::{BinaryTrial, CompleteTrial};
use crate::error::{Error, Result};
use crate::glm::{irls_fit, ols_fit, predict_mean, LinkFamily, DEFAULT_MAX_ITER, DEFAULT_TOL};

pub const DEFAULT_CYCLES: usize = 10;
pub const IPW_MAX_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ImputationMethod {
    CompleteCase,
    Chained { n_cycles: usize },
    Ipw,
    MissInd { fill: f64 },
}

impl ImputationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CompleteCase => "cc",
            Self::Chained { .. } => "mice",
            Self::Ipw => "ipw",
            Self::MissInd { .. } => "missInd",
        }
    }
}

impl fmt::Display for ImputationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImputationMethod {
    type Err = Error;

    /// Parses with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(Self::CompleteCase),
            "mice" | "chained" => Ok(Self::Chained { n_cycles: DEFAULT_CYCLES }),
            "ipw" => Ok(Self::Ipw),
            "missind" | "miss_ind" => Ok(Self::MissInd { fill: 0.0 }),
            "missforest" => Err(Error::UnsupportedMissingness(
                "missForest (random-forest imputation) is not implemented; use mice (chained equations) instead".into(),
            )),
            _ => Err(Error::InvalidParameter(format!("unknown imputation method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedTrial {
    /// Fully observed.
    pub trial: BinaryTrial,
    /// One positive weight per row; all 1 except under IPW.
    pub row_weights: Vec<f64>,
    /// Original row indices removed.
    pub dropped_rows: Vec<usize>,
    /// Indicator columns appended by the missingness-indicator method.
    pub added_columns: Vec<String>,
    pub notes: Vec<String>,
}

impl ImputedTrial {
    fn unweighted(trial: BinaryTrial) -> Self {
        let n = trial.n_rows();
        Self {
            trial,
            row_weights: vec![1.0; n],
            dropped_rows: Vec::new(),
            added_columns: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn complete(&self) -> Result<CompleteTrial> {
        self.trial.to_complete()
    }

    /// `None` when every weight is 1.
    pub fn weights(&self) -> Option<DVector<f64>> {
        self.row_weights.iter().any(|&w| w != 1.0).then(|| DVector::from_column_slice(&self.row_weights))
    }
}

pub fn impute(trial: &BinaryTrial, method: ImputationMethod, seed: u64) -> Result<ImputedTrial> {
    let out = match method {
        ImputationMethod::CompleteCase => impute_cc(trial),
        ImputationMethod::Chained { n_cycles } => impute_chained(trial, n_cycles, seed),
        ImputationMethod::Ipw => ipw_missing_outcome(trial),
        ImputationMethod::MissInd { fill } => impute_miss_ind(trial, fill),
    }?;
    debug_assert!(out.trial.is_complete());
    Ok(out)
}

fn check_arms(trial: &BinaryTrial, rows: &[usize]) -> Result<()> {
    for arm in [0u8, 1] {
        if rows.iter().filter(|&&i| trial.treatment[i] == arm).count() < 2 {
            return Err(Error::ArmExhausted(arm));
        }
    }
    Ok(())
}

/// Drops every row with an unobserved cell.
pub fn impute_cc(trial: &BinaryTrial) -> Result<ImputedTrial> {
    let (keep, dropped): (Vec<usize>, Vec<usize>) = (0..trial.n_rows()).partition(|&i| trial.row_complete(i));
    check_arms(trial, &keep)?;
    let mut out = ImputedTrial::unweighted(trial.subset_rows(&keep));
    if !dropped.is_empty() {
        out.notes.push(format!("complete-case analysis dropped {} of {} rows", dropped.len(), trial.n_rows()));
    }
    out.dropped_rows = dropped;
    Ok(out)
}

/// Column being imputed: its values, missing mask and type.
struct Target {
    values: Vec<f64>,
    missing: Vec<bool>,
    /// `(low, high)` for two-valued columns, imputed by logistic regression.
    binary: Option<(f64, f64)>,
}

impl Target {
    fn new(col: &[Option<f64>], name: &str) -> Result<Self> {
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        if observed.len() < 2 {
            return Err(Error::UnsupportedMissingness(format!(
                "column {name} has fewer than 2 observed values; chained imputation cannot model it"
            )));
        }
        let mut distinct = observed.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let binary = (distinct.len() == 2).then(|| (distinct[0], distinct[1]));
        let fill = match binary {
            Some((lo, hi)) => {
                let n_hi = observed.iter().filter(|&&v| v == hi).count();
                if 2 * n_hi > observed.len() {
                    hi
                } else {
                    lo
                }
            }
            None => observed.iter().sum::<f64>() / observed.len() as f64,
        };
        Ok(Self {
            values: col.iter().map(|v| v.unwrap_or(fill)).collect(),
            missing: col.iter().map(Option::is_none).collect(),
            binary,
        })
    }

    fn refill_default(&mut self) {
        let obs: Vec<f64> = self.values.iter().zip(&self.missing).filter(|(_, m)| !**m).map(|(v, _)| *v).collect();
        let fill = match self.binary {
            Some((lo, hi)) => {
                if 2 * obs.iter().filter(|&&v| v == hi).count() > obs.len() {
                    hi
                } else {
                    lo
                }
            }
            None => obs.iter().sum::<f64>() / obs.len() as f64,
        };
        for (v, m) in self.values.iter_mut().zip(&self.missing) {
            if *m {
                *v = fill;
            }
        }
    }
}

/// Chained-equations imputation producing one completed dataset. Missing
/// cells start at the column mean (mode for two-valued columns); each cycle
/// then regresses every incomplete column on the treatment and all other
/// columns and redraws its missing cells from the fitted predictive
/// distribution. The outcome takes part as the last column.
pub fn impute_chained(trial: &BinaryTrial, n_cycles: usize, seed: u64) -> Result<ImputedTrial> {
    if n_cycles == 0 {
        return Err(Error::InvalidParameter("n_cycles must be >= 1".into()));
    }
    if trial.count_missing() == 0 {
        return Ok(ImputedTrial::unweighted(trial.clone()));
    }
    let n = trial.n_rows();
    let p = trial.n_covariates();
    let names: Vec<String> = trial.covariate_names.iter().cloned().chain([trial.labels.outcome_col.clone()]).collect();
    let mut cols: Vec<Target> =
        (0..=p)
            .map(|j| {
                if j < p {
                    Target::new(&trial.covariates[j], &names[j])
                } else {
                    Target::new(&trial.outcome, &names[j])
                }
            })
            .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut notes = Vec::new();
    let incomplete: Vec<usize> = (0..=p).filter(|&j| cols[j].missing.iter().any(|&m| m)).collect();

    for cycle in 0..n_cycles {
        for &j in &incomplete {
            // Design: intercept, treatment, every other column as currently completed.
            let others: Vec<usize> = (0..=p).filter(|&k| k != j).collect();
            let design = DMatrix::from_fn(n, 2 + others.len(), |i, c| match c {
                0 => 1.0,
                1 => f64::from(trial.treatment[i]),
                _ => cols[others[c - 2]].values[i],
            });
            let obs: Vec<usize> = (0..n).filter(|&i| !cols[j].missing[i]).collect();
            let mis: Vec<usize> = (0..n).filter(|&i| cols[j].missing[i]).collect();
            let xo = design.select_rows(&obs);
            let xm = design.select_rows(&mis);
            let target = &cols[j];
            let draws: Option<Vec<f64>> = match target.binary {
                None => {
                    let yo = DVector::from_iterator(obs.len(), obs.iter().map(|&i| target.values[i]));
                    let fit = ols_fit(&xo, &yo, None)?;
                    let dof = obs.len() as f64 - xo.ncols() as f64;
                    if fit.rank_deficient || dof < 1.0 {
                        None
                    } else {
                        let sd = (fit.residuals.norm_squared() / dof).sqrt();
                        let mean = &xm * &fit.beta;
                        let noise =
                            Normal::new(0.0, sd.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                        Some(mean.iter().map(|m| m + noise.sample(&mut rng)).collect())
                    }
                }
                Some((lo, hi)) => {
                    let yo = DVector::from_iterator(obs.len(), obs.iter().map(|&i| f64::from(target.values[i] == hi)));
                    let fit = irls_fit(&xo, &yo, LinkFamily::Logit, None, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
                    if fit.rank_deficient {
                        None
                    } else {
                        let prob = predict_mean(&fit, &xm)?;
                        Some(prob.iter().map(|&q| if rng.random::<f64>() < q { hi } else { lo }).collect())
                    }
                }
            };
            let col = &mut cols[j];
            match draws {
                Some(d) => {
                    for (&i, v) in mis.iter().zip(d) {
                        col.values[i] = v;
                    }
                }
                None => {
                    col.refill_default();
                    notes.push(format!(
                        "cycle {}: regression for {} is rank deficient; refilled with mean/mode",
                        cycle + 1,
                        names[j]
                    ));
                }
            }
        }
    }

    let mut out = trial.clone();
    for j in 0..p {
        out.covariates[j] = cols[j].values.iter().map(|&v| Some(v)).collect();
    }
    out.outcome = cols[p].values.iter().map(|&v| Some(v)).collect();
    let mut result = ImputedTrial::unweighted(out);
    result.notes = notes;
    result.notes.push(format!("single chained-equations draw after {n_cycles} cycles"));
    Ok(result)
}

/// Inverse-probability weighting for a missing outcome: a logistic model of
/// the observation indicator on `(1, A, X, A X)` gives each observed row the
/// weight `1 / P(observed)`, clamped to `[1, 100]`.
pub fn ipw_missing_outcome(trial: &BinaryTrial) -> Result<ImputedTrial> {
    let p = trial.n_covariates();
    if let Some(j) = (0..p).find(|&j| trial.covariates[j].iter().any(Option::is_none)) {
        return Err(Error::UnsupportedMissingness(format!(
            "ipw handles a missing outcome only, but covariate {} has missing cells; use cc, mice or missInd",
            trial.covariate_names[j]
        )));
    }
    let n = trial.n_rows();
    let observed: Vec<usize> = (0..n).filter(|&i| trial.outcome[i].is_some()).collect();
    check_arms(trial, &observed)?;
    if observed.len() == n {
        return Ok(ImputedTrial::unweighted(trial.clone()));
    }
    let design = DMatrix::from_fn(n, 2 + 2 * p, |i, c| {
        let a = f64::from(trial.treatment[i]);
        match c {
            0 => 1.0,
            1 => a,
            c if c < 2 + p => trial.covariates[c - 2][i].unwrap(),
            c => a * trial.covariates[c - 2 - p][i].unwrap(),
        }
    });
    let r = DVector::from_fn(n, |i, _| f64::from(trial.outcome[i].is_some()));
    let fit = irls_fit(&design, &r, LinkFamily::Logit, None, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mut notes = Vec::new();
    if !fit.converged {
        notes.push("observation model did not converge; weights use the last iterate".to_string());
    }
    if fit.rank_deficient {
        notes.push("observation model design is rank deficient".to_string());
    }
    let mut clamped = 0;
    let weights: Vec<f64> = observed
        .iter()
        .map(|&i| {
            let w = 1.0 / fit.fitted[i];
            if !(w <= IPW_MAX_WEIGHT) {
                clamped += 1;
            }
            if w.is_finite() {
                w.clamp(1.0, IPW_MAX_WEIGHT)
            } else {
                IPW_MAX_WEIGHT
            }
        })
        .collect();
    if clamped > 0 {
        notes.push(format!("{clamped} weights clamped at {IPW_MAX_WEIGHT}"));
    }
    let dropped: Vec<usize> = (0..n).filter(|&i| trial.outcome[i].is_none()).collect();
    notes.push(format!("{} rows with a missing outcome removed and reweighted", dropped.len()));
    Ok(ImputedTrial {
        trial: trial.subset_rows(&observed),
        row_weights: weights,
        dropped_rows: dropped,
        added_columns: Vec::new(),
        notes,
    })
}

/// Fills missing covariate cells with `fill` and appends a `<name>__miss`
/// indicator for every covariate that had any.
pub fn impute_miss_ind(trial: &BinaryTrial, fill: f64) -> Result<ImputedTrial> {
    if trial.outcome.iter().any(Option::is_none) {
        return Err(Error::UnsupportedMissingness(
            "missInd handles missing covariates only, but the outcome has missing cells; use cc, mice or ipw".into(),
        ));
    }
    if !fill.is_finite() {
        return Err(Error::InvalidParameter("fill value must be finite".into()));
    }
    let mut covariates = trial.covariates.clone();
    let mut names = trial.covariate_names.clone();
    let mut added = Vec::new();
    for j in 0..trial.n_covariates() {
        let col = &trial.covariates[j];
        if col.iter().all(Option::is_some) {
            continue;
        }
        let name = format!("{}__miss", trial.covariate_names[j]);
        covariates.push(col.iter().map(|v| Some(if v.is_none() { 1.0 } else { 0.0 })).collect());
        covariates[j] = col.iter().map(|v| Some(v.unwrap_or(fill))).collect();
        names.push(name.clone());
        added.push(name);
    }
    let out = BinaryTrial::new(trial.treatment.clone(), trial.outcome.clone(), names, covariates)?
        .with_labels(trial.labels.clone());
    let mut result = ImputedTrial::unweighted(out);
    result.added_columns = added;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn z(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn trial_from(a: Vec<u8>, y: Vec<Option<f64>>, cols: Vec<Vec<Option<f64>>>) -> BinaryTrial {
        let names = (0..cols.len()).map(|j| format!("x{}", j + 1)).collect();
        BinaryTrial::new(a, y, names, cols).unwrap()
    }

    fn full(seed: u64, n: usize, p: usize) -> BinaryTrial {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let cols: Vec<Vec<Option<f64>>> = (0..p).map(|_| (0..n).map(|_| Some(z(&mut rng))).collect()).collect();
        let y = (0..n).map(|i| Some(cols.iter().map(|c| c[i].unwrap()).sum::<f64>() + z(&mut rng))).collect();
        trial_from(a, y, cols)
    }

    #[test]
    fn cc_identity_and_single_drop() {
        let t = full(1, 10, 3);
        let out = impute_cc(&t).unwrap();
        assert_eq!(out.trial, t);
        assert!(out.dropped_rows.is_empty());
        let mut t2 = t.clone();
        t2.covariates[1][4] = None;
        let out = impute_cc(&t2).unwrap();
        assert_eq!(out.trial.n_rows(), 9);
        assert_eq!(out.dropped_rows, vec![4]);
        assert!(out.row_weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn cc_is_idempotent() {
        let mut t = full(2, 20, 2);
        t.outcome[3] = None;
        t.covariates[0][7] = None;
        let once = impute_cc(&t).unwrap();
        let twice = impute_cc(&once.trial).unwrap();
        assert_eq!(once.trial, twice.trial);
        assert!(twice.dropped_rows.is_empty());
    }

    #[test]
    fn cc_reports_exhausted_arm() {
        let mut t = full(3, 10, 1);
        for i in (1..10).step_by(2) {
            t.outcome[i] = None;
        }
        let err = impute_cc(&t).unwrap_err();
        assert!(matches!(err, Error::ArmExhausted(1)));
        assert_eq!(err.to_string(), "arm exhausted: 1");
    }

    #[test]
    fn chained_noop_without_missing() {
        let t = full(4, 30, 3);
        assert_eq!(impute_chained(&t, 5, 1).unwrap().trial, t);
        assert_eq!(impute_chained(&t, 5, 99).unwrap().trial, t);
    }

    #[test]
    fn chained_recovers_exact_collinearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let x2: Vec<f64> = (0..n).map(|_| z(&mut rng)).collect();
        let mut x1: Vec<Option<f64>> = x2.iter().map(|&v| Some(v)).collect();
        x1[17] = None;
        let y = (0..n).map(|_| Some(z(&mut rng))).collect();
        let a = (0..n).map(|i| (i % 2) as u8).collect();
        let t = trial_from(a, y, vec![x1, x2.iter().map(|&v| Some(v)).collect()]);
        let out = impute_chained(&t, 10, 5).unwrap();
        assert!((out.trial.covariates[0][17].unwrap() - x2[17]).abs() <= 1e-6);
    }

    #[test]
    fn chained_keeps_observed_cells_and_is_deterministic() {
        let mut t = full(6, 80, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for j in 0..3 {
            for i in 0..80 {
                if rng.random::<f64>() < 0.15 {
                    t.covariates[j][i] = None;
                }
            }
        }
        t.outcome[5] = None;
        // A two-valued column goes through the logistic branch.
        t.covariates.push((0..80).map(|i| if i % 9 == 0 { None } else { Some(f64::from(i % 3 == 0)) }).collect());
        t.covariate_names.push("flag".into());
        let a = impute_chained(&t, 4, 7).unwrap();
        let b = impute_chained(&t, 4, 7).unwrap();
        assert_eq!(a.trial, b.trial);
        assert!(a.trial.is_complete());
        for j in 0..4 {
            for i in 0..80 {
                if let Some(v) = t.covariates[j][i] {
                    assert_eq!(a.trial.covariates[j][i], Some(v));
                }
            }
        }
        assert!(a.trial.covariates[3].iter().all(|v| matches!(v, Some(x) if *x == 0.0 || *x == 1.0)));
    }

    #[test]
    fn chained_needs_observed_values() {
        let mut t = full(8, 10, 2);
        for i in 0..9 {
            t.covariates[0][i] = None;
        }
        assert!(matches!(impute_chained(&t, 3, 1), Err(Error::UnsupportedMissingness(_))));
    }

    #[test]
    fn ipw_degenerate_and_covariate_error() {
        let t = full(9, 30, 2);
        let out = ipw_missing_outcome(&t).unwrap();
        assert!(out.row_weights.iter().all(|&w| w == 1.0));
        assert!(out.dropped_rows.is_empty());
        let mut t2 = t.clone();
        t2.covariates[1][0] = None;
        assert!(matches!(ipw_missing_outcome(&t2), Err(Error::UnsupportedMissingness(_))));
    }

    #[test]
    fn ipw_mcar_weights_near_two() {
        let mut t = full(10, 2000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for i in 0..2000 {
            if rng.random::<f64>() < 0.5 {
                t.outcome[i] = None;
            }
        }
        let out = ipw_missing_outcome(&t).unwrap();
        let mean = out.row_weights.iter().sum::<f64>() / out.row_weights.len() as f64;
        assert!((1.8..=2.2).contains(&mean), "mean weight {mean}");
        assert!(out.row_weights.iter().all(|&w| (1.0..=IPW_MAX_WEIGHT).contains(&w)));
        assert!(out.trial.is_complete());
    }

    #[test]
    fn miss_ind_builds_indicators() {
        let mut t = full(11, 8, 2);
        t.covariates[0][2] = None;
        t.covariates[0][5] = None;
        let out = impute_miss_ind(&t, 0.0).unwrap();
        assert_eq!(out.added_columns, vec!["x1__miss".to_string()]);
        let ind = &out.trial.covariates[2];
        for i in 0..8 {
            let expect = if i == 2 || i == 5 { 1.0 } else { 0.0 };
            assert_eq!(ind[i], Some(expect));
        }
        assert_eq!(out.trial.covariates[0][2], Some(0.0));
        assert_eq!(out.trial.covariates[0][5], Some(0.0));
        assert_eq!(out.trial.covariates[0][0], t.covariates[0][0]);

        let clean = full(12, 8, 2);
        let same = impute_miss_ind(&clean, 0.0).unwrap();
        assert_eq!(same.trial, clean);
        assert!(same.added_columns.is_empty());

        let mut bad = clean.clone();
        bad.outcome[0] = None;
        assert!(matches!(impute_miss_ind(&bad, 0.0), Err(Error::UnsupportedMissingness(_))));
    }

    #[test]
    fn method_names() {
        assert_eq!("cc".parse::<ImputationMethod>().unwrap(), ImputationMethod::CompleteCase);
        assert!(matches!("mice".parse::<ImputationMethod>().unwrap(), ImputationMethod::Chained { n_cycles: 10 }));
        assert!(matches!("missInd".parse::<ImputationMethod>().unwrap(), ImputationMethod::MissInd { .. }));
        assert!(matches!("missForest".parse::<ImputationMethod>(), Err(Error::UnsupportedMissingness(_))));
    }
}
