//! Lasso by cyclic coordinate descent, with cross-validated penalty choice
//! and adaptive reweighting.
//!
//! Covariates are centered and scaled to unit population variance before
//! fitting, and penalties act on the standardized coefficients. Returned
//! coefficients are on the caller's scale, intercept first.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_N_LAMBDA: usize = 100;
pub const LAMBDA_RATIO: f64 = 1e-3;
const TOL: f64 = 1e-7;
const MAX_PASSES: usize = 100_000;
const MAX_OUTER: usize = 100;
const PROB_CLAMP: f64 = 1e-10;
/// Binomial working weights are floored here so the quadratic model stays
/// well posed near fitted probabilities of 0 or 1.
const MIN_WORKING_WEIGHT: f64 = 1e-5;
/// Fraction of null deviance explained at which a binomial path stops refitting.
const SATURATION: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Self::Gaussian),
            "binomial" => Ok(Self::Binomial),
            "poisson" | "multinomial" => {
                Err(Error::InvalidParameter(format!("lasso family {s:?} is not supported (gaussian or binomial)")))
            }
            _ => Err(Error::InvalidParameter(format!("unknown lasso family {s:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Binomial => "binomial",
        })
    }
}

/// Coefficients from a single penalized fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoCoef {
    /// Intercept first, caller's scale.
    pub coef: DVector<f64>,
    pub converged: bool,
}

impl LassoCoef {
    pub fn active_set(&self) -> Vec<usize> {
        active_of(&self.coef)
    }
}

fn active_of(coef: &DVector<f64>) -> Vec<usize> {
    (1..coef.len()).filter(|&j| coef[j] != 0.0).map(|j| j - 1).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LassoFit {
    pub family: Family,
    /// Decreasing.
    pub lambda_grid: Vec<f64>,
    /// One coefficient vector per grid value, intercept first.
    #[serde(skip)]
    pub coef_path: Vec<DVector<f64>>,
    pub cv_error: Vec<f64>,
    pub lambda_min: f64,
    pub index_min: usize,
    pub active_set: Vec<usize>,
    pub warnings: Vec<String>,
}

impl LassoFit {
    pub fn coef_min(&self) -> &DVector<f64> {
        &self.coef_path[self.index_min]
    }
}

fn soft(z: f64, t: f64) -> f64 {
    // The tiny slack keeps the first grid point exactly sparse despite rounding.
    let t = t * (1.0 + 1e-12);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Standardized problem shared by every penalty level on one data set.
struct Problem {
    family: Family,
    n: usize,
    /// Column-major standardized covariates.
    xs: DMatrix<f64>,
    y: DVector<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Per-column penalty weight; `None` marks an excluded column.
    weight: Vec<Option<f64>>,
    y_mean: f64,
    y_scale: f64,
    /// Gaussian only: `X'X / n` and `X'(y - ybar) / n`.
    gram: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl Problem {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>, family: Family, weights: Option<&[f64]>) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch { context: "lasso response", expected: n, found: y.len() });
        }
        if let Some(w) = weights {
            if w.len() != p {
                return Err(Error::DimensionMismatch { context: "penalty weights", expected: p, found: w.len() });
            }
            if w.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::InvalidParameter("penalty weights must be >= 0".into()));
            }
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lasso input"));
        }
        if family == Family::Binomial && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidParameter("binomial lasso needs a 0/1 response".into()));
        }

        let nf = n as f64;
        let mut xs = x.clone();
        let mut center = vec![0.0; p];
        let mut scale = vec![0.0; p];
        let mut weight = vec![None; p];
        for j in 0..p {
            let mut col = xs.column_mut(j);
            let m = col.sum() / nf;
            col.add_scalar_mut(-m);
            let sd = (col.norm_squared() / nf).sqrt();
            center[j] = m;
            scale[j] = sd;
            let constant = !(sd > 1e-12 * m.abs().max(1.0));
            if constant {
                col.fill(0.0);
                continue;
            }
            col /= sd;
            let w = weights.map_or(1.0, |w| w[j]);
            if w.is_finite() {
                weight[j] = Some(w);
            }
        }
        let y_mean = y.mean();
        let y_scale = match family {
            Family::Gaussian => {
                let s = (y.map(|v| (v - y_mean).powi(2)).sum() / nf).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            }
            Family::Binomial => 1.0,
        };
        let gram = (family == Family::Gaussian).then(|| {
            let yc = y.add_scalar(-y_mean);
            (xs.tr_mul(&xs) / nf, xs.tr_mul(&yc) / nf)
        });
        Ok(Self { family, n, xs, y: y.clone(), center, scale, weight, y_mean, y_scale, gram })
    }

    fn p(&self) -> usize {
        self.center.len()
    }

    /// Gradient of the smooth loss at the null model, per standardized column.
    fn null_gradient(&self) -> DVector<f64> {
        let yc = self.y.add_scalar(-self.y_mean);
        self.xs.tr_mul(&yc) / self.n as f64
    }

    fn lambda_max(&self) -> f64 {
        let g = self.null_gradient();
        (0..self.p())
            .filter_map(|j| match self.weight[j] {
                Some(w) if w > 0.0 => Some(g[j].abs() / w),
                _ => None,
            })
            .fold(0.0, f64::max)
    }

    /// Solves at one penalty level. `beta` holds standardized coefficients
    /// (warm start in, solution out); returns the intercept on the
    /// standardized scale and whether the iteration converged.
    fn solve(&self, lambda: f64, beta: &mut DVector<f64>, b0: &mut f64) -> bool {
        match self.family {
            Family::Gaussian => self.solve_gaussian(lambda, beta, b0),
            Family::Binomial => self.solve_binomial(lambda, beta, b0),
        }
    }

    fn solve_gaussian(&self, lambda: f64, beta: &mut DVector<f64>, b0: &mut f64) -> bool {
        let (g, c) = self.gram.as_ref().unwrap();
        let p = self.p();
        let tol = TOL * self.y_scale;
        let mut grad = c - g * &*beta;
        let mut converged = false;
        let mut full = true;
        for _ in 0..MAX_PASSES {
            let mut max_delta: f64 = 0.0;
            for j in 0..p {
                let Some(w) = self.weight[j] else { continue };
                if !full && beta[j] == 0.0 {
                    continue;
                }
                let gjj = g[(j, j)];
                let old = beta[j];
                let new = soft(grad[j] + gjj * old, lambda * w) / gjj;
                let d = new - old;
                if d != 0.0 {
                    beta[j] = new;
                    grad.axpy(-d, &g.column(j), 1.0);
                    max_delta = max_delta.max(d.abs());
                }
            }
            if max_delta <= tol {
                if full {
                    converged = true;
                    break;
                }
                full = true;
            } else {
                full = false;
            }
        }
        *b0 = self.y_mean;
        converged
    }

    fn solve_binomial(&self, lambda: f64, beta: &mut DVector<f64>, b0: &mut f64) -> bool {
        let (n, p) = (self.n, self.p());
        let nf = n as f64;
        // Convergence is judged on weighted squared steps, scaled by the null
        // deviance, so large coefficients near separation do not stall.
        let m = self.y_mean.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let shr = TOL * -2.0 * (m * m.ln() + (1.0 - m) * (1.0 - m).ln());
        let mut outer_converged = false;
        for _ in 0..MAX_OUTER {
            let eta = &self.xs * &*beta;
            let mut w = vec![0.0; n];
            let mut r = vec![0.0; n];
            for i in 0..n {
                let e = eta[i] + *b0;
                let mu = (1.0 / (1.0 + (-e).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                w[i] = (mu * (1.0 - mu)).max(MIN_WORKING_WEIGHT);
                r[i] = (self.y[i] - mu) / w[i];
            }
            let v: Vec<f64> =
                (0..p).map(|j| self.xs.column(j).iter().zip(&w).map(|(x, wi)| wi * x * x).sum::<f64>() / nf).collect();
            let sum_w: f64 = w.iter().sum();
            let start_beta = beta.clone();
            let start_b0 = *b0;
            let w0 = sum_w / nf;

            let mut full = true;
            for _ in 0..MAX_PASSES {
                let mut max_delta: f64 = 0.0;
                let d0 = r.iter().zip(&w).map(|(ri, wi)| ri * wi).sum::<f64>() / sum_w;
                if d0 != 0.0 {
                    *b0 += d0;
                    r.iter_mut().for_each(|ri| *ri -= d0);
                    max_delta = max_delta.max(w0 * d0 * d0);
                }
                for j in 0..p {
                    let Some(pw) = self.weight[j] else { continue };
                    if !full && beta[j] == 0.0 {
                        continue;
                    }
                    let col = self.xs.column(j);
                    let gj = col.iter().zip(w.iter().zip(&r)).map(|(x, (wi, ri))| x * wi * ri).sum::<f64>() / nf;
                    let old = beta[j];
                    let new = soft(gj + v[j] * old, lambda * pw) / v[j];
                    let d = new - old;
                    if d != 0.0 {
                        beta[j] = new;
                        for (ri, x) in r.iter_mut().zip(col.iter()) {
                            *ri -= d * x;
                        }
                        max_delta = max_delta.max(v[j] * d * d);
                    }
                }
                if max_delta <= shr {
                    if full {
                        break;
                    }
                    full = true;
                } else {
                    full = false;
                }
            }
            let change =
                (0..p).map(|j| v[j] * (beta[j] - start_beta[j]).powi(2)).fold(w0 * (*b0 - start_b0).powi(2), f64::max);
            if !beta.iter().all(|v| v.is_finite()) || !b0.is_finite() {
                break;
            }
            if change <= shr {
                outer_converged = true;
                break;
            }
        }
        outer_converged
    }

    /// Maps standardized coefficients back to the caller's scale.
    fn unstandardize(&self, beta: &DVector<f64>, b0: f64) -> DVector<f64> {
        let p = self.p();
        let mut out = DVector::zeros(p + 1);
        let mut intercept = b0;
        for j in 0..p {
            if beta[j] != 0.0 {
                let b = beta[j] / self.scale[j];
                out[j + 1] = b;
                intercept -= b * self.center[j];
            }
        }
        out[0] = intercept;
        out
    }

    fn standardize(&self, coef: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        if coef.len() != self.p() + 1 {
            return Err(Error::DimensionMismatch { context: "warm start", expected: self.p() + 1, found: coef.len() });
        }
        let mut beta = DVector::zeros(self.p());
        let mut b0 = coef[0];
        for j in 0..self.p() {
            b0 += coef[j + 1] * self.center[j];
            if self.weight[j].is_some() {
                beta[j] = coef[j + 1] * self.scale[j];
            }
        }
        if self.family == Family::Gaussian {
            b0 = self.y_mean;
        }
        Ok((beta, b0))
    }

    fn path(&self, grid: &[f64]) -> (Vec<DVector<f64>>, bool) {
        let mut beta = DVector::zeros(self.p());
        let mut b0 = match self.family {
            Family::Gaussian => self.y_mean,
            Family::Binomial => {
                let m = self.y_mean.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (m / (1.0 - m)).ln()
            }
        };
        let mut all_converged = true;
        let null_dev = self.binomial_deviance(&beta, b0);
        let mut saturated = false;
        let path = grid
            .iter()
            .map(|&lambda| {
                if !saturated {
                    all_converged &= self.solve(lambda, &mut beta, &mut b0);
                    // Near-separable data: once the fit explains nearly all of the
                    // null deviance, smaller penalties only inflate coefficients.
                    saturated = self.family == Family::Binomial
                        && null_dev > 0.0
                        && 1.0 - self.binomial_deviance(&beta, b0) / null_dev >= SATURATION;
                }
                self.unstandardize(&beta, b0)
            })
            .collect();
        (path, all_converged)
    }

    /// Mean binomial deviance on the standardized scale.
    fn binomial_deviance(&self, beta: &DVector<f64>, b0: f64) -> f64 {
        if self.family != Family::Binomial {
            return 0.0;
        }
        let eta = &self.xs * beta;
        let total: f64 = (0..self.n)
            .map(|i| {
                let mu = (1.0 / (1.0 + (-(eta[i] + b0)).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if self.y[i] == 1.0 {
                    -2.0 * mu.ln()
                } else {
                    -2.0 * (1.0 - mu).ln()
                }
            })
            .sum();
        total / self.n as f64
    }
}

/// Minimizes `(1/n) loss + lambda * sum_j w_j |beta_j|` over standardized
/// coefficients, where the gaussian loss is half the residual sum of
/// squares and the binomial loss is the negative log-likelihood.
/// Infinite weights and constant columns keep a zero coefficient.
pub fn lasso_cd(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    penalty_weights: Option<&[f64]>,
) -> Result<LassoCoef> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let prob = Problem::new(x, y, family, penalty_weights)?;
    let (mut beta, mut b0) = match warm_start {
        Some(c) => prob.standardize(c)?,
        None => (DVector::zeros(prob.p()), if family == Family::Gaussian { prob.y_mean } else { 0.0 }),
    };
    let converged = prob.solve(lambda, &mut beta, &mut b0);
    Ok(LassoCoef { coef: prob.unstandardize(&beta, b0), converged })
}

/// Largest penalty at which some penalized coefficient can be nonzero.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>, family: Family, penalty_weights: Option<&[f64]>) -> Result<f64> {
    Ok(Problem::new(x, y, family, penalty_weights)?.lambda_max())
}

pub fn lambda_grid(lambda_max: f64, n_lambda: usize) -> Vec<f64> {
    if n_lambda == 1 {
        return vec![lambda_max];
    }
    let lo = (lambda_max * LAMBDA_RATIO).ln();
    let hi = lambda_max.ln();
    (0..n_lambda).map(|k| (hi + (lo - hi) * k as f64 / (n_lambda - 1) as f64).exp()).collect()
}

/// Assigns each row to one of `k` folds after a seeded shuffle.
pub fn fold_ids(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        folds[row] = pos % k;
    }
    folds
}

fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = w.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    if mean > 0.0 {
        w.iter().map(|v| v / mean).collect()
    } else {
        w.to_vec()
    }
}

fn rows(x: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    (x.select_rows(idx), y.select_rows(idx))
}

fn loss(family: Family, y: f64, pred: f64) -> f64 {
    match family {
        Family::Gaussian => (y - pred).powi(2),
        Family::Binomial => {
            let m = (1.0 / (1.0 + (-pred).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -2.0 * (y * m.ln() + (1.0 - y) * (1.0 - m).ln())
        }
    }
}

fn single_class(y: &DVector<f64>) -> bool {
    y.iter().all(|&v| v == y[0])
}

/// K-fold cross-validated lasso path. Penalty weights are rescaled to mean
/// one over their finite entries before the grid is built.
pub fn cv_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    n_folds: usize,
    n_lambda: usize,
    seed: u64,
) -> Result<LassoFit> {
    cv_lasso_weighted(x, y, family, n_folds, n_lambda, seed, None)
}

pub fn cv_lasso_weighted(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    n_folds: usize,
    n_lambda: usize,
    seed: u64,
    penalty_weights: Option<&[f64]>,
) -> Result<LassoFit> {
    let n = x.nrows();
    if n_folds < 2 || n_folds > n {
        return Err(Error::InvalidParameter(format!("n_folds must lie in [2, {n}], got {n_folds}")));
    }
    if n_lambda == 0 {
        return Err(Error::InvalidParameter("n_lambda must be >= 1".into()));
    }
    let weights = penalty_weights.map(normalize_weights);
    let full = Problem::new(x, y, family, weights.as_deref())?;
    let mut warnings = Vec::new();

    let lmax = full.lambda_max();
    let lmax = if lmax > 0.0 && lmax.is_finite() {
        lmax
    } else {
        warnings.push("no penalized covariate can enter; grid anchored at 1".to_string());
        1.0
    };
    let grid = lambda_grid(lmax, n_lambda);
    let (coef_path, converged) = full.path(&grid);
    if !converged {
        warnings.push("coordinate descent hit its iteration cap on the full data".to_string());
    }

    let folds = fold_ids(n, n_folds, seed);
    let mut sum_loss = vec![0.0; grid.len()];
    let mut n_used = 0usize;
    for k in 0..n_folds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
        let (xt, yt) = rows(x, y, &train);
        let (xv, yv) = rows(x, y, &test);
        if family == Family::Binomial && single_class(&yt) {
            warnings.push(format!("fold {k} trains on a single outcome class; skipped"));
            continue;
        }
        let prob = Problem::new(&xt, &yt, family, weights.as_deref())?;
        let (path, _) = prob.path(&grid);
        for (l, coef) in path.iter().enumerate() {
            let pred = &xv * coef.rows(1, coef.len() - 1) + DVector::from_element(xv.nrows(), coef[0]);
            sum_loss[l] += (0..yv.len()).map(|i| loss(family, yv[i], pred[i])).sum::<f64>();
        }
        n_used += test.len();
    }
    if n_used == 0 {
        return Err(Error::AllFoldsDegenerate);
    }
    let cv_error: Vec<f64> = sum_loss.iter().map(|s| s / n_used as f64).collect();

    // Scanning from the largest penalty with a strict comparison keeps the
    // sparser model on ties.
    let mut index_min = 0;
    for (l, e) in cv_error.iter().enumerate() {
        if *e < cv_error[index_min] {
            index_min = l;
        }
    }
    let active_set = active_of(&coef_path[index_min]);
    Ok(LassoFit {
        family,
        lambda_min: grid[index_min],
        lambda_grid: grid,
        coef_path,
        cv_error,
        index_min,
        active_set,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveLassoFit {
    pub fit: LassoFit,
    /// Per-covariate weights before rescaling; infinite entries were excluded.
    pub penalty_weights: Vec<f64>,
    /// Set when the initial fit was ridge because least squares was singular.
    pub ridge_init: bool,
}

/// Initial least-squares coefficients on the standardized scale, with a
/// small ridge when the centered design is rank deficient.
fn initial_coefficients(x: &DMatrix<f64>, y: &DVector<f64>) -> (Vec<f64>, bool) {
    let (n, p) = x.shape();
    let nf = n as f64;
    let mut xc = x.clone();
    let mut sd = vec![0.0; p];
    for j in 0..p {
        let mut col = xc.column_mut(j);
        let m = col.sum() / nf;
        col.add_scalar_mut(-m);
        sd[j] = (col.norm_squared() / nf).sqrt();
    }
    let yc = y.add_scalar(-y.mean());
    let ls = weighted_least_squares(&xc, &yc, None);
    let (beta, ridge) = if ls.full_rank() {
        (ls.beta, false)
    } else {
        let gram = xc.tr_mul(&xc);
        let pen = 1e-3 * gram.trace() / p as f64;
        let pen = if pen > 0.0 { pen } else { 1e-3 };
        let a = gram + DMatrix::identity(p, p) * pen;
        let b = xc.tr_mul(&yc);
        let sol = a.cholesky().map(|c| c.solve(&b)).unwrap_or_else(|| DVector::zeros(p));
        (sol, true)
    };
    ((0..p).map(|j| beta[j] * sd[j]).collect(), ridge)
}

/// Adaptive lasso with weights `1 / |b_j|`, where `b` holds the initial
/// least-squares coefficients on the standardized scale.
pub fn adaptive_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    n_folds: usize,
    seed: u64,
) -> Result<AdaptiveLassoFit> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { context: "lasso response", expected: x.nrows(), found: y.len() });
    }
    let (init, ridge_init) = initial_coefficients(x, y);
    let penalty_weights: Vec<f64> =
        init.iter().map(|b| if *b == 0.0 || !b.is_finite() { f64::INFINITY } else { 1.0 / b.abs() }).collect();
    adaptive_lasso_with_weights(x, y, family, n_folds, seed, penalty_weights, ridge_init)
}

pub(crate) fn adaptive_lasso_with_weights(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    n_folds: usize,
    seed: u64,
    penalty_weights: Vec<f64>,
    ridge_init: bool,
) -> Result<AdaptiveLassoFit> {
    let mut fit = cv_lasso_weighted(x, y, family, n_folds, DEFAULT_N_LAMBDA, seed, Some(&penalty_weights))?;
    if ridge_init {
        fit.warnings.push("initial fit was rank deficient; ridge initialization used".to_string());
    }
    Ok(AdaptiveLassoFit { fit, penalty_weights, ridge_init })
}
