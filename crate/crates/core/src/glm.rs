//! Least squares and IRLS for generalized linear models.
//!
//! Design matrices passed in here already carry the intercept as column 0.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;
use crate::stats::normal_cdf;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Fitted means are kept this far from 0 and 1 when forming binomial weights.
const PROB_CLAMP: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFamily {
    /// Also spelled `linear`.
    Identity,
    Logit,
    Probit,
    Log,
    Cloglog,
}

impl FromStr for LinkFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Self::Identity),
            "logit" => Ok(Self::Logit),
            "probit" => Ok(Self::Probit),
            "log" => Ok(Self::Log),
            "cloglog" => Ok(Self::Cloglog),
            other => Err(Error::InvalidParameter(format!("unknown link {other:?}"))),
        }
    }
}

impl fmt::Display for LinkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Identity => "identity",
            Self::Logit => "logit",
            Self::Probit => "probit",
            Self::Log => "log",
            Self::Cloglog => "cloglog",
        };
        f.write_str(s)
    }
}

impl LinkFamily {
    /// Inverse link: linear predictor to mean.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Self::Identity => eta,
            Self::Logit => 1.0 / (1.0 + (-eta).exp()),
            Self::Probit => normal_cdf(eta),
            Self::Log => eta.exp(),
            Self::Cloglog => -(-eta.exp()).exp_m1(),
        }
    }

    /// d mean / d eta.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Logit => {
                let e = (-eta.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Self::Probit => (-0.5 * eta * eta).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Self::Log => eta.exp(),
            Self::Cloglog => (eta - eta.exp()).exp(),
        }
    }

    /// Variance function of the paired family (gaussian, binomial, poisson).
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Logit | Self::Probit | Self::Cloglog => {
                let m = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                m * (1.0 - m)
            }
            Self::Log => mu.max(PROB_CLAMP),
        }
    }

    pub fn is_binomial(self) -> bool {
        matches!(self, Self::Logit | Self::Probit | Self::Cloglog)
    }

    fn check_response(self, y: &DVector<f64>) -> Result<()> {
        let ok = match self {
            Self::Identity => y.iter().all(|v| v.is_finite()),
            Self::Log => y.iter().all(|&v| v.is_finite() && v >= 0.0),
            _ => y.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("response outside the support of the {self} link")))
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
        match self {
            Self::Identity => (y - mu).powi(2),
            Self::Log => {
                let m = mu.max(PROB_CLAMP);
                2.0 * (xlogy(y, m) - (y - m))
            }
            _ => {
                let m = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                2.0 * (xlogy(y, m) + xlogy(1.0 - y, 1.0 - m))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmFit {
    pub link: LinkFamily,
    /// Intercept first.
    #[serde(serialize_with = "ser_vec")]
    pub beta: DVector<f64>,
    pub converged: bool,
    pub n_iter: usize,
    #[serde(skip)]
    pub fitted: DVector<f64>,
    #[serde(skip)]
    pub residuals: DVector<f64>,
    pub rank_deficient: bool,
    pub deviance: f64,
    /// Deviance after each accepted iteration.
    #[serde(skip)]
    pub deviance_trace: Vec<f64>,
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

impl GlmFit {
    pub fn n_coef(&self) -> usize {
        self.beta.len()
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &DVector<f64>, weights: Option<&DVector<f64>>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { context: "response length", expected: x.nrows(), found: y.len() });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design or response"));
    }
    if let Some(w) = weights {
        if w.len() != x.nrows() {
            return Err(Error::DimensionMismatch { context: "weights length", expected: x.nrows(), found: w.len() });
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidParameter("weights must be finite, nonnegative, and not all zero".into()));
        }
    }
    Ok(())
}

/// Weighted (or ordinary) least squares. Rank-deficient designs get the
/// minimum-norm solution with `rank_deficient` set.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>, weights: Option<&DVector<f64>>) -> Result<GlmFit> {
    check_inputs(x, y, weights)?;
    let ls = weighted_least_squares(x, y, weights);
    let fitted = x * &ls.beta;
    let residuals = y - &fitted;
    let deviance = match weights {
        Some(w) => residuals.component_mul(&residuals).dot(w),
        None => residuals.norm_squared(),
    };
    Ok(GlmFit {
        link: LinkFamily::Identity,
        rank_deficient: !ls.full_rank(),
        beta: ls.beta,
        converged: true,
        n_iter: 1,
        fitted,
        residuals,
        deviance,
        deviance_trace: vec![deviance],
    })
}

fn total_deviance(link: LinkFamily, y: &DVector<f64>, mu: &DVector<f64>, w: Option<&DVector<f64>>) -> f64 {
    (0..y.len()).map(|i| w.map_or(1.0, |w| w[i]) * link.unit_deviance(y[i], mu[i])).sum()
}

/// Fisher scoring from `beta = 0` with step halving whenever the deviance
/// rises. Divergence is reported through `converged = false`, never as an
/// error.
pub fn irls_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    link: LinkFamily,
    weights: Option<&DVector<f64>>,
    max_iter: usize,
    tol: f64,
) -> Result<GlmFit> {
    check_inputs(x, y, weights)?;
    if max_iter == 0 || !(tol > 0.0) {
        return Err(Error::InvalidParameter("max_iter >= 1 and tol > 0 required".into()));
    }
    link.check_response(y)?;
    if link == LinkFamily::Identity {
        return ols_fit(x, y, weights);
    }

    let n = x.nrows();
    let prior = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut beta = DVector::zeros(x.ncols());
    let mut eta = x * &beta;
    let mut mu = eta.map(|e| link.mean(e));
    let mut dev = total_deviance(link, y, &mu, weights);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut rank_deficient = false;
    let mut n_iter = 0;

    while n_iter < max_iter {
        n_iter += 1;
        let mut w = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let d = link.mean_derivative(eta[i]);
            let var = link.variance(mu[i]);
            if d > 0.0 && d.is_finite() && prior(i) > 0.0 {
                w[i] = prior(i) * d * d / var;
                z[i] = eta[i] + (y[i] - mu[i]) / d;
            } else {
                z[i] = eta[i];
            }
        }
        if w.iter().any(|v: &f64| !v.is_finite())
            || z.iter().any(|v: &f64| !v.is_finite())
            || w.iter().all(|&v| v == 0.0)
        {
            break;
        }
        let ls = weighted_least_squares(x, &z, Some(&w));
        rank_deficient = !ls.full_rank();
        let proposal = ls.beta;
        if proposal.iter().any(|v| !v.is_finite()) {
            break;
        }

        let mut step = &proposal - &beta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step;
            let cand_eta = x * &cand;
            let cand_mu = cand_eta.map(|e| link.mean(e));
            let cand_dev = total_deviance(link, y, &cand_mu, weights);
            if cand_dev.is_finite() && cand_dev <= dev * (1.0 + 1e-12) + 1e-12 {
                accepted = Some((cand, cand_eta, cand_mu, cand_dev));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cand_eta, cand_mu, cand_dev)) = accepted else {
            // No descent direction left; the previous iterate stands.
            converged = step.amax() <= tol;
            break;
        };
        let change = (&cand - &beta).amax();
        beta = cand;
        eta = cand_eta;
        mu = cand_mu;
        dev = cand_dev;
        trace.push(dev);
        if change <= tol {
            converged = true;
            break;
        }
    }

    let residuals = y - &mu;
    Ok(GlmFit {
        link,
        beta,
        converged,
        n_iter,
        fitted: mu,
        residuals,
        rank_deficient,
        deviance: dev,
        deviance_trace: trace,
    })
}

pub fn predict_mean(fit: &GlmFit, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != fit.beta.len() {
        return Err(Error::DimensionMismatch {
            context: "predict_mean columns",
            expected: fit.beta.len(),
            found: x.ncols(),
        });
    }
    Ok((x * &fit.beta).map(|e| fit.link.mean(e)))
}

/// Prepends a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}
