//! Average treatment effect estimators: simple difference in means, ANCOVA,
//! ANHECOVA and AIPW, with robust variances and Wald intervals.
//!
//! Numerical trouble never raises an error here. The estimate is still
//! reported and the standard error becomes unavailable, with a diagnostic
//! flag saying why.

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glm::{irls_fit, predict_mean, LinkFamily, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::linalg::weighted_least_squares;
use crate::stats::{normal_quantile, normal_two_sided_p, Moments};

pub const DEFAULT_CONF_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    Simple,
    #[serde(rename = "ANCOVA")]
    Ancova,
    #[serde(rename = "ANHECOVA")]
    Anhecova,
    #[serde(rename = "AIPW")]
    Aipw,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Simple, Method::Ancova, Method::Anhecova, Method::Aipw];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simple => "Simple",
            Self::Ancova => "ANCOVA",
            Self::Anhecova => "ANHECOVA",
            Self::Aipw => "AIPW",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub rank_deficient: bool,
    pub negative_variance: bool,
    pub glm_nonconverged: bool,
    /// An arm had too few rows for its variance or model.
    pub small_arm: bool,
}

impl Diagnostics {
    pub fn any(&self) -> bool {
        self.rank_deficient || self.negative_variance || self.glm_nonconverged || self.small_arm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteEstimate {
    pub method: Method,
    pub tau_hat: f64,
    pub se: Option<f64>,
    /// `(lower, upper)`.
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    pub conf_level: f64,
    pub diagnostics: Diagnostics,
}

impl AteEstimate {
    /// Wald summary from a point estimate and an optional standard error.
    pub fn from_se(method: Method, tau_hat: f64, se: Option<f64>, conf_level: f64, diagnostics: Diagnostics) -> Self {
        let se = se.filter(|s| s.is_finite() && *s >= 0.0);
        let (ci, p_value) = match se {
            Some(se) => {
                let z = normal_quantile(0.5 + conf_level / 2.0);
                let p = if se > 0.0 {
                    normal_two_sided_p(tau_hat / se)
                } else if tau_hat == 0.0 {
                    1.0
                } else {
                    0.0
                };
                (Some((tau_hat - z * se, tau_hat + z * se)), Some(p))
            }
            None => (None, None),
        };
        Self { method, tau_hat, se, ci, p_value, conf_level, diagnostics }
    }

    pub fn covers(&self, tau: f64) -> Option<bool> {
        self.ci.map(|(lo, hi)| lo <= tau && tau <= hi)
    }

    /// Rejects `tau = 0` at level `alpha`.
    pub fn rejects_null(&self, alpha: f64) -> Option<bool> {
        self.p_value.map(|p| p < alpha)
    }
}

fn check_conf(conf_level: f64) -> Result<()> {
    if conf_level > 0.0 && conf_level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("confidence level must lie in (0, 1), got {conf_level}")))
    }
}

fn check_common(a: &[u8], y: &DVector<f64>, w: Option<&DVector<f64>>) -> Result<()> {
    let n = a.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "outcome length", expected: n, found: y.len() });
    }
    if a.iter().any(|&v| v > 1) {
        return Err(Error::InvalidParameter("treatment must be coded 0/1".into()));
    }
    if let Some(w) = w {
        if w.len() != n {
            return Err(Error::DimensionMismatch { context: "row weights", expected: n, found: w.len() });
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("row weights must be finite and positive".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outcome"));
    }
    for arm in 0..2u8 {
        if !a.contains(&arm) {
            return Err(Error::GroupTooSmall(if arm == 1 { "treated arm is empty" } else { "control arm is empty" }));
        }
    }
    Ok(())
}

fn check_design(x: &DMatrix<f64>, n: usize) -> Result<()> {
    if x.nrows() != n {
        return Err(Error::DimensionMismatch { context: "covariate rows", expected: n, found: x.nrows() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariates"));
    }
    Ok(())
}

fn weights_vec(n: usize, w: Option<&DVector<f64>>) -> Vec<f64> {
    w.map_or_else(|| vec![1.0; n], |w| w.iter().copied().collect())
}

fn arm_split(a: &[u8], arm: u8, v: &[f64]) -> Vec<f64> {
    a.iter().zip(v).filter(|(ai, _)| **ai == arm).map(|(_, x)| *x).collect()
}

/// Difference in (weighted) arm means with the Neyman variance
/// `S1^2/N1 + S0^2/N0`. Weighted arms use effective sample sizes.
pub fn simple_estimator(a: &[u8], y: &DVector<f64>, w: Option<&DVector<f64>>, conf_level: f64) -> Result<AteEstimate> {
    check_common(a, y, w)?;
    check_conf(conf_level)?;
    let wv = weights_vec(a.len(), w);
    let ys = y.as_slice();
    let mut diagnostics = Diagnostics::default();
    let mut means = [0.0; 2];
    let mut var = 0.0;
    for arm in 0..2u8 {
        let ya = arm_split(a, arm, ys);
        let wa = arm_split(a, arm, &wv);
        let m = Moments::new(&wa);
        means[arm as usize] = m.mean(&wa, &ya);
        if ya.len() < 2 {
            diagnostics.small_arm = true;
        } else {
            var += m.cov(&wa, &ya, &ya) / m.effective_n();
        }
    }
    let tau = means[1] - means[0];
    let se = (!diagnostics.small_arm).then(|| var.max(0.0).sqrt());
    Ok(AteEstimate::from_se(Method::Simple, tau, se, conf_level, diagnostics))
}

/// HC0 sandwich `B (V' diag(w^2 e^2) V) B` with `B = (V'WV)^{-1}`; `None`
/// when the weighted design is rank deficient.
fn sandwich(v: &DMatrix<f64>, y: &DVector<f64>, w: Option<&DVector<f64>>) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let ls = weighted_least_squares(v, y, w);
    let resid = y - v * &ls.beta;
    let cov = ls.bread().map(|bread| {
        let mut scaled = v.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= resid[i] * w.map_or(1.0, |w| w[i]);
        }
        let meat = scaled.tr_mul(&scaled);
        &bread * meat * &bread
    });
    (ls.beta, cov)
}

fn regression_design(a: &[u8], x: &DMatrix<f64>, extra: usize) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut v = DMatrix::zeros(n, 2 + p + extra);
    for i in 0..n {
        v[(i, 0)] = 1.0;
        v[(i, 1)] = f64::from(a[i]);
    }
    v.view_mut((0, 2), (n, p)).copy_from(x);
    v
}

/// Coefficient on `A` in `Y ~ 1 + A + X` with its HC0 sandwich variance.
pub fn ancova(
    a: &[u8],
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: Option<&DVector<f64>>,
    conf_level: f64,
) -> Result<AteEstimate> {
    check_common(a, y, w)?;
    check_design(x, a.len())?;
    check_conf(conf_level)?;
    let v = regression_design(a, x, 0);
    let (beta, cov) = sandwich(&v, y, w);
    let mut diagnostics = Diagnostics::default();
    let se = match cov {
        Some(c) => Some(c[(1, 1)].max(0.0).sqrt()),
        None => {
            diagnostics.rank_deficient = true;
            None
        }
    };
    Ok(AteEstimate::from_se(Method::Ancova, beta[1], se, conf_level, diagnostics))
}

fn weighted_col_means(x: &DMatrix<f64>, wv: &[f64]) -> DVector<f64> {
    let m = Moments::new(wv);
    DVector::from_fn(x.ncols(), |j, _| m.mean(wv, x.column(j).as_slice()))
}

/// Coefficient on `A` in `Y ~ 1 + A + X + A (X - Xbar)` with the HC0
/// sandwich plus the covariate-sampling correction
/// `(a1 - a0)' S_X (a1 - a0) / N`, where `a_k` are per-arm OLS slopes.
pub fn anhecova(
    a: &[u8],
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: Option<&DVector<f64>>,
    conf_level: f64,
) -> Result<AteEstimate> {
    check_common(a, y, w)?;
    check_design(x, a.len())?;
    check_conf(conf_level)?;
    let (n, p) = x.shape();
    let wv = weights_vec(n, w);
    let xbar = weighted_col_means(x, &wv);
    let mut v = regression_design(a, x, p);
    for i in 0..n {
        if a[i] == 1 {
            for j in 0..p {
                v[(i, 2 + p + j)] = x[(i, j)] - xbar[j];
            }
        }
    }
    let (beta, cov) = sandwich(&v, y, w);
    let tau = beta[1];
    let mut diagnostics = Diagnostics::default();
    let Some(cov) = cov else {
        diagnostics.rank_deficient = true;
        return Ok(AteEstimate::from_se(Method::Anhecova, tau, None, conf_level, diagnostics));
    };

    let mut slopes = [DVector::zeros(p), DVector::zeros(p)];
    for arm in 0..2u8 {
        let rows: Vec<usize> = (0..n).filter(|&i| a[i] == arm).collect();
        if rows.len() < 2 {
            diagnostics.small_arm = true;
            continue;
        }
        let xa = x.select_rows(&rows).insert_column(0, 1.0);
        let ya = y.select_rows(&rows);
        let wa = w.map(|w| w.select_rows(&rows));
        let ls = weighted_least_squares(&xa, &ya, wa.as_ref());
        if !ls.full_rank() {
            diagnostics.rank_deficient = true;
        }
        slopes[arm as usize] = ls.beta.rows(1, p).clone_owned();
    }
    if diagnostics.any() {
        return Ok(AteEstimate::from_se(Method::Anhecova, tau, None, conf_level, diagnostics));
    }
    let d = &slopes[1] - &slopes[0];
    let m = Moments::new(&wv);
    let cols: Vec<&[f64]> = (0..p).map(|j| &x.as_slice()[j * n..(j + 1) * n]).collect();
    let mut correction = 0.0;
    for j in 0..p {
        for k in 0..p {
            if d[j] != 0.0 && d[k] != 0.0 {
                correction += d[j] * d[k] * m.cov(&wv, cols[j], cols[k]);
            }
        }
    }
    let var = cov[(1, 1)] + correction / m.total();
    Ok(AteEstimate::from_se(Method::Anhecova, tau, Some(var.max(0.0).sqrt()), conf_level, diagnostics))
}

/// Per-arm mean outcome estimates and the estimated asymptotic covariance
/// of `sqrt(N) (theta_hat - theta)`, divided by `N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialMeans {
    pub theta: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

impl PotentialMeans {
    pub fn n_arms(&self) -> usize {
        self.theta.len()
    }

    /// `theta_a - theta_b` and its variance.
    pub fn contrast(&self, a: usize, b: usize) -> (f64, f64) {
        if a == b {
            return (0.0, 0.0);
        }
        let s = &self.sigma;
        (self.theta[a] - self.theta[b], s[a][a] - 2.0 * s[a][b] + s[b][b])
    }
}

/// AIPW arm means from outcome-model predictions `mu[a]` over all rows:
///
/// `theta_a = sum_{A=a} w (Y - mu_a) / N_a + sum w mu_a / N`
///
/// with `N_a` and `N` the weight totals. Entries of the covariance are
///
/// `v_aa = (N/N_a) s2_a(Y - mu_a) + 2 cov_a(Y, mu_a) - s2(mu_a)`
/// `v_ab = cov_a(Y, mu_b) + cov_b(Y, mu_a) - cov(mu_a, mu_b)`
///
/// where subscripted moments use the rows of that arm. `sigma = V / N`.
pub fn potential_means_from_predictions(
    arm_of: &[usize],
    n_arms: usize,
    y: &DVector<f64>,
    mu: &[DVector<f64>],
    w: Option<&DVector<f64>>,
) -> Result<PotentialMeans> {
    let n = arm_of.len();
    if mu.len() != n_arms || mu.iter().any(|m| m.len() != n) || y.len() != n {
        return Err(Error::DimensionMismatch { context: "arm predictions", expected: n, found: y.len() });
    }
    let wv = weights_vec(n, w);
    let all = Moments::new(&wv);
    let big_n = all.total();
    let ys = y.as_slice();
    let mus: Vec<&[f64]> = mu.iter().map(|m| m.as_slice()).collect();

    struct Arm {
        w: Vec<f64>,
        y: Vec<f64>,
        mom: Moments,
        rows: Vec<usize>,
    }
    let arms: Vec<Arm> = (0..n_arms)
        .map(|a| {
            let rows: Vec<usize> = (0..n).filter(|&i| arm_of[i] == a).collect();
            let w: Vec<f64> = rows.iter().map(|&i| wv[i]).collect();
            let y = rows.iter().map(|&i| ys[i]).collect();
            Arm { mom: Moments::new(&w), w, y, rows }
        })
        .collect();
    if let Some(a) = arms.iter().position(|arm| arm.rows.is_empty()) {
        return Err(Error::EmptyArm(a.to_string()));
    }
    let on_arm = |arm: &Arm, v: &[f64]| -> Vec<f64> { arm.rows.iter().map(|&i| v[i]).collect() };

    let theta: Vec<f64> = (0..n_arms)
        .map(|a| {
            let arm = &arms[a];
            let resid: Vec<f64> = arm.y.iter().zip(on_arm(arm, mus[a])).map(|(yi, m)| yi - m).collect();
            arm.mom.mean(&arm.w, &resid) + all.mean(&wv, mus[a])
        })
        .collect();

    let mut v = vec![vec![0.0; n_arms]; n_arms];
    for a in 0..n_arms {
        let arm = &arms[a];
        let mu_a = on_arm(arm, mus[a]);
        let resid: Vec<f64> = arm.y.iter().zip(&mu_a).map(|(yi, m)| yi - m).collect();
        v[a][a] = big_n / arm.mom.total() * arm.mom.cov(&arm.w, &resid, &resid)
            + 2.0 * arm.mom.cov(&arm.w, &arm.y, &mu_a)
            - all.cov(&wv, mus[a], mus[a]);
        for b in (a + 1)..n_arms {
            let other = &arms[b];
            let vab = arm.mom.cov(&arm.w, &arm.y, &on_arm(arm, mus[b]))
                + other.mom.cov(&other.w, &other.y, &on_arm(other, mus[a]))
                - all.cov(&wv, mus[a], mus[b]);
            v[a][b] = vab;
            v[b][a] = vab;
        }
    }
    let sigma = v.iter().map(|row| row.iter().map(|x| x / big_n).collect()).collect();
    Ok(PotentialMeans { theta, sigma })
}

/// Outcome model for one arm of a multi-arm AIPW fit.
#[derive(Debug, Clone)]
pub struct ArmSpec {
    /// Covariates for this arm's model, all rows.
    pub x: DMatrix<f64>,
    pub link: LinkFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contrast {
    pub arm: usize,
    pub reference: usize,
    pub estimate: AteEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiArmFit {
    pub means: PotentialMeans,
    /// Every ordered pair `(a, b)` with `a > b`.
    pub contrasts: Vec<Contrast>,
    pub diagnostics: Diagnostics,
}

impl MultiArmFit {
    pub fn contrast(&self, a: usize, b: usize, conf_level: f64) -> AteEstimate {
        let (tau, var) = self.means.contrast(a, b);
        let mut diag = self.diagnostics;
        let se = if a == b { Some(0.0) } else { aipw_se(var, &mut diag) };
        AteEstimate::from_se(Method::Aipw, tau, se, conf_level, diag)
    }
}

fn aipw_se(var: f64, diagnostics: &mut Diagnostics) -> Option<f64> {
    if diagnostics.glm_nonconverged {
        return None;
    }
    if var > 0.0 && var.is_finite() {
        Some(var.sqrt())
    } else {
        diagnostics.negative_variance = true;
        None
    }
}

/// AIPW over `K >= 2` arms. Each arm's model is fitted by IRLS on that arm's
/// rows with an intercept, then predicted on every row.
pub fn potential_means_multiarm(
    arm_of: &[usize],
    y: &DVector<f64>,
    arms: &[ArmSpec],
    w: Option<&DVector<f64>>,
    conf_level: f64,
) -> Result<MultiArmFit> {
    check_conf(conf_level)?;
    let n = arm_of.len();
    let k = arms.len();
    if k < 2 {
        return Err(Error::InvalidParameter("need at least two arms".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "outcome length", expected: n, found: y.len() });
    }
    if let Some(&bad) = arm_of.iter().find(|&&a| a >= k) {
        return Err(Error::InvalidParameter(format!("arm label {bad} out of range for {k} arms")));
    }
    if let Some(w) = w {
        if w.len() != n {
            return Err(Error::DimensionMismatch { context: "row weights", expected: n, found: w.len() });
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("row weights must be finite and positive".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outcome"));
    }
    let mut diagnostics = Diagnostics::default();
    let mut mu = Vec::with_capacity(k);
    for (a, spec) in arms.iter().enumerate() {
        check_design(&spec.x, n)?;
        let rows: Vec<usize> = (0..n).filter(|&i| arm_of[i] == a).collect();
        if rows.is_empty() {
            return Err(Error::EmptyArm(a.to_string()));
        }
        if rows.len() < spec.x.ncols() + 1 {
            diagnostics.small_arm = true;
        }
        let design = spec.x.clone().insert_column(0, 1.0);
        let xa = design.select_rows(&rows);
        let ya = y.select_rows(&rows);
        let wa = w.map(|w| w.select_rows(&rows));
        let fit = irls_fit(&xa, &ya, spec.link, wa.as_ref(), DEFAULT_MAX_ITER, DEFAULT_TOL)?;
        diagnostics.rank_deficient |= fit.rank_deficient;
        diagnostics.glm_nonconverged |= !fit.converged;
        mu.push(predict_mean(&fit, &design)?);
    }
    let means = potential_means_from_predictions(arm_of, k, y, &mu, w)?;
    let mut contrasts = Vec::new();
    for a in 0..k {
        for b in 0..a {
            let (tau, var) = means.contrast(a, b);
            let mut diag = diagnostics;
            let se = aipw_se(var, &mut diag);
            contrasts.push(Contrast {
                arm: a,
                reference: b,
                estimate: AteEstimate::from_se(Method::Aipw, tau, se, conf_level, diag),
            });
        }
    }
    Ok(MultiArmFit { means, contrasts, diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AipwFit {
    pub estimate: AteEstimate,
    pub means: PotentialMeans,
}

/// Two-arm AIPW; `x1` and `x0` hold the covariates of each arm's model.
#[allow(clippy::too_many_arguments)]
pub fn aipw(
    a: &[u8],
    y: &DVector<f64>,
    x1: &DMatrix<f64>,
    x0: &DMatrix<f64>,
    link1: LinkFamily,
    link0: LinkFamily,
    w: Option<&DVector<f64>>,
    conf_level: f64,
) -> Result<AipwFit> {
    check_common(a, y, w)?;
    check_design(x1, a.len())?;
    check_design(x0, a.len())?;
    let arm_of: Vec<usize> = a.iter().map(|&v| v as usize).collect();
    let arms = [ArmSpec { x: x0.clone(), link: link0 }, ArmSpec { x: x1.clone(), link: link1 }];
    let fit = potential_means_multiarm(&arm_of, y, &arms, w, conf_level)?;
    let estimate = fit.contrasts[0].estimate.clone();
    Ok(AipwFit { estimate, means: fit.means })
}

fn fmt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Aligned text table with columns `method tau se ci.lwr ci.upr p`.
pub fn render_table(rows: &[AteEstimate]) -> String {
    let header = ["method", "tau", "se", "ci.lwr", "ci.upr", "p"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.method.to_string(),
                fmt_num(Some(r.tau_hat)),
                fmt_num(r.se),
                fmt_num(r.ci.map(|c| c.0)),
                fmt_num(r.ci.map(|c| c.1)),
                fmt_num(r.p_value),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..6).map(|c| cells.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap()).collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    for r in &cells {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// CSV with the same columns as [`render_table`], `NA` for unavailable cells.
pub fn render_csv(rows: &[AteEstimate]) -> String {
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
    let mut out = String::from("method,tau,se,ci.lwr,ci.upr,p\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.tau_hat,
            na(r.se),
            na(r.ci.map(|c| c.0)),
            na(r.ci.map(|c| c.1)),
            na(r.p_value)
        );
    }
    out
}
