//! Covariate selection over a fully observed trial, pooled and per arm.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::dataset::CompleteTrial;
use crate::error::{Error, Result};
use crate::lasso::{self, Family};
use crate::stats::{pearson_corr, welch_t_test};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMethod {
    None,
    Lasso,
    AdaptiveLasso,
    CorrK { k: usize },
    CorrXi { xi: f64 },
    PreTest { alpha: f64 },
}

impl SelectionMethod {
    /// Short name as accepted on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "No",
            Self::Lasso => "Lasso",
            Self::AdaptiveLasso => "A.Lasso",
            Self::CorrK { .. } => "Corr.k",
            Self::CorrXi { .. } => "Corr.xi",
            Self::PreTest { .. } => "Pre.test",
        }
    }

    /// Builds a method from its name; parameters not used by it are ignored.
    pub fn from_name(name: &str, k: usize, xi: f64, alpha: f64) -> Result<Self> {
        let m = match name.to_ascii_lowercase().replace(['_', '-'], ".").as_str() {
            "no" | "none" => Self::None,
            "lasso" => Self::Lasso,
            "a.lasso" | "adaptive.lasso" | "alasso" => Self::AdaptiveLasso,
            "corr.k" => Self::CorrK { k },
            "corr.xi" => Self::CorrXi { xi },
            "pre.test" | "pretest" => Self::PreTest { alpha },
            _ => return Err(Error::InvalidParameter(format!("unknown selection method {name:?}"))),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::CorrK { k } if k == 0 => Err(Error::InvalidParameter("k must be >= 1".into())),
            Self::CorrXi { xi } if !(xi > 0.0 && xi < 1.0) => {
                Err(Error::InvalidParameter(format!("xi must lie in (0, 1), got {xi}")))
            }
            Self::PreTest { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::InvalidParameter(format!("pre-test alpha must lie in (0, 1], got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CorrK { k } => write!(f, "Corr.k(k={k})"),
            Self::CorrXi { xi } => write!(f, "Corr.xi(xi={xi})"),
            Self::PreTest { alpha } => write!(f, "Pre.test(alpha={alpha})"),
            other => f.write_str(other.name()),
        }
    }
}

impl Serialize for SelectionMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSpec {
    pub method: SelectionMethod,
    /// Lasso family; inferred from the outcome when absent.
    pub family: Option<Family>,
    pub n_folds: usize,
    pub seed: u64,
}

impl SelectionSpec {
    pub fn new(method: SelectionMethod, seed: u64) -> Self {
        Self { method, family: None, n_folds: lasso::DEFAULT_FOLDS, seed }
    }
}

/// Per-covariate statistic behind a selection: `|corr|`, a p-value, or a
/// lasso coefficient at the chosen penalty. `None` marks an untestable column.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SelectionDiagnostics {
    pub statistic: Option<&'static str>,
    pub pooled: Vec<Option<f64>>,
    pub per_arm: [Vec<Option<f64>>; 2],
    /// Chosen penalty for pooled, arm 0 and arm 1 fits.
    pub lambda_min: Option<[Option<f64>; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    /// Sorted covariate indices used by ANCOVA and ANHECOVA.
    pub pooled: Vec<usize>,
    /// Sorted covariate indices for the arm 0 and arm 1 outcome models.
    pub per_arm: [Vec<usize>; 2],
    pub diagnostics: SelectionDiagnostics,
    pub warnings: Vec<String>,
}

/// Selection with covariate names in place of indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedSelection {
    pub method: String,
    pub pooled: Vec<String>,
    pub arm0: Vec<String>,
    pub arm1: Vec<String>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    pub fn named(&self, names: &[String]) -> NamedSelection {
        let pick = |set: &[usize]| set.iter().map(|&j| names[j].clone()).collect();
        NamedSelection {
            method: self.method.to_string(),
            pooled: pick(&self.pooled),
            arm0: pick(&self.per_arm[0]),
            arm1: pick(&self.per_arm[1]),
            warnings: self.warnings.clone(),
        }
    }

    /// Union of every set, sorted.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.pooled.iter().chain(&self.per_arm[0]).chain(&self.per_arm[1]).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Binomial when the outcome takes exactly two distinct values.
pub fn infer_family(y: &DVector<f64>) -> Family {
    let mut vals: Vec<f64> = y.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    if vals.len() == 2 {
        Family::Binomial
    } else {
        Family::Gaussian
    }
}

fn column_slices(x: &DMatrix<f64>) -> Vec<&[f64]> {
    (0..x.ncols()).map(|j| &x.as_slice()[j * x.nrows()..(j + 1) * x.nrows()]).collect()
}

fn abs_correlations(x: &DMatrix<f64>, y: &DVector<f64>) -> Vec<Option<f64>> {
    column_slices(x).into_iter().map(|col| pearson_corr(col, y.as_slice()).ok().map(f64::abs)).collect()
}

fn ranked(corr: &[Option<f64>]) -> Vec<(usize, f64)> {
    let mut valid: Vec<(usize, f64)> = corr.iter().enumerate().filter_map(|(j, c)| c.map(|c| (j, c))).collect();
    valid.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    valid
}

/// Top `k` covariates by absolute correlation with `y`. Ties go to the lower
/// column index. Returns the set and any warnings.
pub fn select_corr_k(x: &DMatrix<f64>, y: &DVector<f64>, k: usize) -> Result<(Vec<usize>, Vec<String>)> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let (set, warnings, _) = corr_k_inner(x, y, k);
    Ok((set, warnings))
}

fn corr_k_inner(x: &DMatrix<f64>, y: &DVector<f64>, k: usize) -> (Vec<usize>, Vec<String>, Vec<Option<f64>>) {
    let corr = abs_correlations(x, y);
    let order = ranked(&corr);
    let mut warnings = Vec::new();
    if order.is_empty() {
        warnings.push("every covariate has zero variance or the outcome is constant; nothing selected".into());
    } else if k > order.len() {
        warnings.push(format!("k = {k} exceeds the {} usable covariates; clamped", order.len()));
    }
    let mut set: Vec<usize> = order.iter().take(k).map(|&(j, _)| j).collect();
    set.sort_unstable();
    (set, warnings, corr)
}

/// Covariates whose absolute correlation with `y` is strictly above `xi`.
pub fn select_corr_xi(x: &DMatrix<f64>, y: &DVector<f64>, xi: f64) -> Result<Vec<usize>> {
    SelectionMethod::CorrXi { xi }.validate()?;
    Ok(corr_xi_inner(x, y, xi).0)
}

fn corr_xi_inner(x: &DMatrix<f64>, y: &DVector<f64>, xi: f64) -> (Vec<usize>, Vec<Option<f64>>) {
    let corr = abs_correlations(x, y);
    let set = corr.iter().enumerate().filter(|(_, c)| c.is_some_and(|c| c > xi)).map(|(j, _)| j).collect();
    (set, corr)
}

/// Covariates whose Welch test between arms rejects at level `alpha`.
pub fn select_pretest(x: &DMatrix<f64>, treatment: &[u8], alpha: f64) -> Result<(Vec<usize>, Vec<String>)> {
    SelectionMethod::PreTest { alpha }.validate()?;
    let (set, warnings, _) = pretest_inner(x, treatment, alpha)?;
    Ok((set, warnings))
}

#[allow(clippy::type_complexity)]
fn pretest_inner(
    x: &DMatrix<f64>,
    treatment: &[u8],
    alpha: f64,
) -> Result<(Vec<usize>, Vec<String>, Vec<Option<f64>>)> {
    if treatment.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "treatment length",
            expected: x.nrows(),
            found: treatment.len(),
        });
    }
    let arm = |a: u8| -> Vec<usize> { (0..treatment.len()).filter(|&i| treatment[i] == a).collect() };
    let (r1, r0) = (arm(1), arm(0));
    if r1.len() < 2 || r0.len() < 2 {
        return Err(Error::GroupTooSmall("pre-test needs at least 2 rows per arm"));
    }
    let mut warnings = Vec::new();
    let mut pvals = Vec::with_capacity(x.ncols());
    for (j, col) in column_slices(x).into_iter().enumerate() {
        let g1: Vec<f64> = r1.iter().map(|&i| col[i]).collect();
        let g0: Vec<f64> = r0.iter().map(|&i| col[i]).collect();
        match welch_t_test(&g1, &g0) {
            Ok(t) => pvals.push(Some(t.p_value)),
            Err(Error::ZeroVariance(_)) => {
                warnings.push(format!("covariate {j} is constant within both arms; not tested"));
                pvals.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let set = pvals.iter().enumerate().filter(|(_, p)| p.is_some_and(|p| p <= alpha)).map(|(j, _)| j).collect();
    Ok((set, warnings, pvals))
}

/// Lasso-family selection on one block of rows. Degenerate binomial data
/// selects nothing rather than failing.
fn lasso_select(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    adaptive: bool,
    n_folds: usize,
    seed: u64,
    label: &str,
    warnings: &mut Vec<String>,
) -> Result<(Vec<usize>, Vec<Option<f64>>, Option<f64>)> {
    let p = x.ncols();
    if p == 0 {
        return Ok((Vec::new(), Vec::new(), None));
    }
    let n = x.nrows();
    let folds = n_folds.min(n);
    let y = match family {
        Family::Binomial => binarize(y)?,
        Family::Gaussian => y.clone(),
    };
    let fit = if adaptive {
        lasso::adaptive_lasso(x, &y, family, folds, seed).map(|f| f.fit)
    } else {
        lasso::cv_lasso(x, &y, family, folds, lasso::DEFAULT_N_LAMBDA, seed)
    };
    match fit {
        Ok(fit) => {
            warnings.extend(fit.warnings.iter().map(|w| format!("{label}: {w}")));
            let coef = fit.coef_min();
            let diag = (0..p).map(|j| Some(coef[j + 1])).collect();
            Ok((fit.active_set.clone(), diag, Some(fit.lambda_min)))
        }
        Err(Error::AllFoldsDegenerate) => {
            warnings.push(format!("{label}: outcome has a single class in every fold; nothing selected"));
            Ok((Vec::new(), vec![None; p], None))
        }
        Err(e) => Err(e),
    }
}

/// Maps a two-valued outcome to 0/1, lower value to 0.
fn binarize(y: &DVector<f64>) -> Result<DVector<f64>> {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if y.iter().any(|&v| v != lo && v != hi) {
        return Err(Error::InvalidParameter("binomial lasso needs a two-valued outcome".into()));
    }
    Ok(y.map(|v| if v == hi && hi != lo { 1.0 } else { 0.0 }))
}

/// Runs one selection strategy. Pooled sets use all rows; per-arm sets use
/// each arm's rows alone, except for the pre-test, which contrasts the arms
/// and so reuses the pooled set.
pub fn select(spec: &SelectionSpec, trial: &CompleteTrial) -> Result<SelectionResult> {
    spec.method.validate()?;
    let x = trial.covariates();
    let y = trial.outcome();
    let p = x.ncols();
    let rows = [trial.arm_rows(0), trial.arm_rows(1)];
    if rows.iter().any(|r| r.len() < 2) {
        return Err(Error::GroupTooSmall("each arm needs at least 2 rows for selection"));
    }
    let arm_data: Vec<(DMatrix<f64>, DVector<f64>)> =
        rows.iter().map(|r| (x.select_rows(r), y.select_rows(r))).collect();

    let mut warnings = Vec::new();
    let mut diagnostics = SelectionDiagnostics::default();
    let (pooled, per_arm) = match spec.method {
        SelectionMethod::None => {
            let all: Vec<usize> = (0..p).collect();
            (all.clone(), [all.clone(), all])
        }
        SelectionMethod::Lasso | SelectionMethod::AdaptiveLasso => {
            let adaptive = spec.method == SelectionMethod::AdaptiveLasso;
            let family = spec.family.unwrap_or_else(|| infer_family(y));
            diagnostics.statistic = Some("coefficient");
            let (pooled, dp, lp) =
                lasso_select(x, y, family, adaptive, spec.n_folds, spec.seed, "pooled", &mut warnings)?;
            let mut sets = [Vec::new(), Vec::new()];
            let mut lams = [None, None];
            for a in 0..2 {
                let (xa, ya) = &arm_data[a];
                let label = format!("arm {a}");
                let (s, d, l) = lasso_select(xa, ya, family, adaptive, spec.n_folds, spec.seed, &label, &mut warnings)?;
                sets[a] = s;
                diagnostics.per_arm[a] = d;
                lams[a] = l;
            }
            diagnostics.pooled = dp;
            diagnostics.lambda_min = Some([lp, lams[0], lams[1]]);
            (pooled, sets)
        }
        SelectionMethod::CorrK { k } => {
            diagnostics.statistic = Some("abs_corr");
            let (pooled, w, c) = corr_k_inner(x, y, k);
            warnings.extend(w.into_iter().map(|w| format!("pooled: {w}")));
            diagnostics.pooled = c;
            let mut sets = [Vec::new(), Vec::new()];
            for a in 0..2 {
                let (s, w, c) = corr_k_inner(&arm_data[a].0, &arm_data[a].1, k);
                warnings.extend(w.into_iter().map(|w| format!("arm {a}: {w}")));
                sets[a] = s;
                diagnostics.per_arm[a] = c;
            }
            (pooled, sets)
        }
        SelectionMethod::CorrXi { xi } => {
            diagnostics.statistic = Some("abs_corr");
            let (pooled, c) = corr_xi_inner(x, y, xi);
            diagnostics.pooled = c;
            let mut sets = [Vec::new(), Vec::new()];
            for a in 0..2 {
                let (s, c) = corr_xi_inner(&arm_data[a].0, &arm_data[a].1, xi);
                sets[a] = s;
                diagnostics.per_arm[a] = c;
            }
            (pooled, sets)
        }
        SelectionMethod::PreTest { alpha } => {
            diagnostics.statistic = Some("p_value");
            let (pooled, w, pv) = pretest_inner(x, trial.treatment(), alpha)?;
            warnings.extend(w);
            diagnostics.pooled = pv.clone();
            diagnostics.per_arm = [pv.clone(), pv];
            (pooled.clone(), [pooled.clone(), pooled])
        }
    };
    Ok(SelectionResult { method: spec.method, pooled, per_arm, diagnostics, warnings })
}
