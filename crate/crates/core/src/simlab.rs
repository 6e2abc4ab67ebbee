//! Monte Carlo laboratory: the two-arm simulation design, a super-population
//! oracle for the true ATE, replication harness and efficiency diagnostics.
//!
//! Randomness: replication `r` draws from `ChaCha8Rng::seed_from_u64(master)`
//! on stream `r`; oracle repetition `k` uses `seed_from_u64(spec.seed)` on
//! stream `ORACLE_STREAM + k`. Results never depend on thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::CompleteTrial;
use crate::error::{Error, Result};
use crate::estimators::{AteEstimate, Method, DEFAULT_CONF_LEVEL};
use crate::glm::LinkFamily;
use crate::pipeline::estimate;
use crate::selector::{select, SelectionMethod, SelectionResult, SelectionSpec};

pub const BETA0: [f64; 5] = [1.0, 1.0, 1.0, 1.0, 1.0];
pub const BETA1: [f64; 5] = [2.0, 2.0, 3.0, 3.0, 3.0];
pub const N_SIGNAL: usize = 5;
pub const N_NOISE: usize = 50;
pub const N_COVARIATES: usize = N_SIGNAL + N_NOISE;
pub const DEFAULT_ORACLE_N_BIG: usize = 1_000_000;
pub const DEFAULT_ORACLE_REPS: usize = 20;
/// Level of the Power% test.
pub const POWER_ALPHA: f64 = 0.05;
const ORACLE_STREAM: u64 = 1 << 63;
const CHOLESKY_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Delta {
    Linear,
    Nonlinear,
    /// No treatment effect at all; used for null checks.
    Zero,
}

/// How the linear effect modifier combines `c1` with `X'beta1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearDeltaReading {
    /// `c1 * X'beta1`
    #[default]
    AsWritten,
    /// `c1 + X'beta1`
    Additive,
}

macro_rules! parse_enum {
    ($t:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('-', "_").as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::InvalidParameter(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

parse_enum!(Outcome, "outcome type", "continuous" => Outcome::Continuous, "binary" => Outcome::Binary);
parse_enum!(Delta, "delta form", "linear" => Delta::Linear, "nonlinear" => Delta::Nonlinear, "zero" => Delta::Zero);
parse_enum!(LinearDeltaReading, "linear delta reading",
    "as_written" => LinearDeltaReading::AsWritten, "additive" => LinearDeltaReading::Additive);

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Continuous => "continuous",
            Self::Binary => "binary",
        })
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Nonlinear => "nonlinear",
            Self::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DgpSpec {
    pub outcome: Outcome,
    pub delta: Delta,
    /// Rows per simulated trial.
    pub n: usize,
    /// Seed of the true-ATE oracle.
    pub seed: u64,
    pub linear_delta_reading: LinearDeltaReading,
}

impl DgpSpec {
    pub fn new(outcome: Outcome, delta: Delta, n: usize, seed: u64) -> Self {
        Self { outcome, delta, n, seed, linear_delta_reading: LinearDeltaReading::AsWritten }
    }

    pub fn with_reading(mut self, reading: LinearDeltaReading) -> Self {
        self.linear_delta_reading = reading;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidParameter(format!("sample size must be >= 4, got {}", self.n)));
        }
        Ok(())
    }

    /// `(c1, c2)`.
    pub fn constants(&self) -> (f64, f64) {
        match self.outcome {
            Outcome::Continuous => (8.15, 1.0),
            Outcome::Binary => (10.0, 1.0),
        }
    }

    /// Published true ATE for this outcome type.
    pub fn published_tau(&self) -> f64 {
        match self.outcome {
            Outcome::Continuous => 8.15,
            Outcome::Binary => 0.11,
        }
    }

    /// Effect modifier `delta(x)` for the five signal covariates.
    pub fn delta(&self, x: &[f64]) -> f64 {
        let (c1, c2) = self.constants();
        match self.delta {
            Delta::Zero => 0.0,
            Delta::Linear => {
                let lin = dot5(x, &BETA1);
                match self.linear_delta_reading {
                    LinearDeltaReading::AsWritten => c1 * lin,
                    LinearDeltaReading::Additive => c1 + lin,
                }
            }
            Delta::Nonlinear => {
                let w = [x[0] * x[0], (x[1] * x[1]).sin(), x[2] * x[3], x[3] * x[4], x[4] * x[4]];
                c2 * dot5(&w, &BETA1)
            }
        }
    }

    /// `E[Y(a) | X = x]`.
    pub fn conditional_mean(&self, x: &[f64], arm: u8) -> f64 {
        let base = 20.0 * dot5(x, &BETA0);
        let a = f64::from(arm);
        match self.outcome {
            Outcome::Continuous => 50.0 + base + a * self.delta(x),
            Outcome::Binary => logistic(base + a * (3.0 + self.delta(x))),
        }
    }

    /// `(Y(0), Y(1))` for one row. The continuous noise and the binary
    /// uniform are shared by both potential outcomes.
    fn draw_potential<R: Rng>(&self, x: &[f64], rng: &mut R) -> (f64, f64) {
        match self.outcome {
            Outcome::Continuous => {
                let eps: f64 = StandardNormal.sample(rng);
                (self.conditional_mean(x, 0) + eps, self.conditional_mean(x, 1) + eps)
            }
            Outcome::Binary => {
                let u: f64 = rng.random();
                let draw = |p: f64| if u < p { 1.0 } else { 0.0 };
                (draw(self.conditional_mean(x, 0)), draw(self.conditional_mean(x, 1)))
            }
        }
    }
}

fn dot5(x: &[f64], b: &[f64; 5]) -> f64 {
    x[..5].iter().zip(b).map(|(u, v)| u * v).sum()
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Correlation matrix of the columns of `B = ramp + 2 I`, where row `i` of the
/// ramp is the constant `0.10 + 0.01 i`.
pub fn sigma_v() -> DMatrix<f64> {
    let k = N_NOISE;
    let b = DMatrix::from_fn(k, k, |i, j| 0.10 + 0.01 * i as f64 + if i == j { 2.0 } else { 0.0 });
    let means: Vec<f64> = (0..k).map(|j| b.column(j).mean()).collect();
    let c = DMatrix::from_fn(k, k, |i, j| b[(i, j)] - means[j]);
    let cov = c.transpose() * &c;
    let mut corr = DMatrix::from_fn(k, k, |i, j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt());
    for i in 0..k {
        corr[(i, i)] = 1.0;
    }
    corr
}

/// Draws covariate rows `(X1..X5, V1..V50)`.
#[derive(Debug, Clone)]
pub struct CovariateSampler {
    chol_v: DMatrix<f64>,
    t10: StudentT<f64>,
    bin: Binomial,
}

impl Default for CovariateSampler {
    fn default() -> Self {
        Self::new()
    }
}

impl CovariateSampler {
    pub fn new() -> Self {
        let sigma = sigma_v();
        let mut jitter = CHOLESKY_JITTER;
        let chol_v = loop {
            let m = &sigma + DMatrix::identity(N_NOISE, N_NOISE) * jitter;
            if let Some(ch) = Cholesky::new(m) {
                break ch.l();
            }
            jitter *= 10.0;
        };
        Self { chol_v, t10: StudentT::new(10.0).expect("df > 0"), bin: Binomial::new(10, 0.2).expect("valid p") }
    }

    pub fn signal<R: Rng>(&self, rng: &mut R) -> [f64; 5] {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let x3: f64 = StandardNormal.sample(rng);
        let x4 = self.t10.sample(rng);
        let x5 = self.bin.sample(rng) as f64 - 2.0;
        [z1, 0.8 * z1 + 0.6 * z2, x3, x4, x5]
    }

    pub fn noise<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let z: Vec<f64> = (0..N_NOISE).map(|_| StandardNormal.sample(rng)).collect();
        for (i, o) in out.iter_mut().enumerate().take(N_NOISE) {
            let row = self.chol_v.row(i);
            *o = 1.0 + (0..=i).map(|j| row[j] * z[j]).sum::<f64>();
        }
    }

    /// `(X: n x 5, V: n x 50)`.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut x = DMatrix::zeros(n, N_SIGNAL);
        let mut v = DMatrix::zeros(n, N_NOISE);
        let mut buf = [0.0; N_NOISE];
        for i in 0..n {
            let s = self.signal(rng);
            for j in 0..N_SIGNAL {
                x[(i, j)] = s[j];
            }
            self.noise(rng, &mut buf);
            for j in 0..N_NOISE {
                v[(i, j)] = buf[j];
            }
        }
        (x, v)
    }
}

pub fn gen_covariates<R: Rng>(n: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    CovariateSampler::new().sample(n, rng)
}

/// `(Y(0), Y(1))` for each row of `x` (n x 5).
pub fn gen_potential_outcomes<R: Rng>(
    x: &DMatrix<f64>,
    spec: &DgpSpec,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.ncols() != N_SIGNAL {
        return Err(Error::DimensionMismatch { context: "signal covariates", expected: N_SIGNAL, found: x.ncols() });
    }
    let n = x.nrows();
    let mut y0 = DVector::zeros(n);
    let mut y1 = DVector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        (y0[i], y1[i]) = spec.draw_potential(&row, rng);
    }
    Ok((y0, y1))
}

pub fn covariate_names() -> Vec<String> {
    (1..=N_SIGNAL).map(|j| format!("X{j}")).chain((1..=N_NOISE).map(|j| format!("V{j}"))).collect()
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Err(Error::InvalidParameter("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleTau {
    pub tau: f64,
    pub mc_se: f64,
    pub n_big: usize,
    pub reps: usize,
    pub per_rep: Vec<f64>,
}

impl OracleTau {
    /// Message when the oracle and the published value differ by more than `tol`.
    pub fn discrepancy(&self, published: f64, tol: f64) -> Option<String> {
        let gap = self.tau - published;
        (gap.abs() > tol).then(|| {
            format!(
                "oracle tau {:.4} (MC SE {:.4}) differs from the published {published} by {gap:+.4}",
                self.tau, self.mc_se
            )
        })
    }
}

/// Mean of `Y(1) - Y(0)` over `reps` independent super-populations of size
/// `n_big`; the MC SE is the SD of the repetition means over `sqrt(reps)`.
pub fn true_ate_oracle(spec: &DgpSpec, n_big: usize, reps: usize, workers: usize) -> Result<OracleTau> {
    if n_big == 0 || reps == 0 {
        return Err(Error::InvalidParameter("oracle needs n_big >= 1 and reps >= 1".into()));
    }
    let sampler = CovariateSampler::new();
    let per_rep: Vec<f64> = with_workers(workers, || {
        (0..reps)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(ORACLE_STREAM + k as u64);
                let mut total = 0.0;
                for _ in 0..n_big {
                    let x = sampler.signal(&mut rng);
                    let (y0, y1) = spec.draw_potential(&x, &mut rng);
                    total += y1 - y0;
                }
                total / n_big as f64
            })
            .collect()
    })?;
    let tau = per_rep.iter().sum::<f64>() / reps as f64;
    let mc_se = if reps > 1 {
        let ss: f64 = per_rep.iter().map(|v| (v - tau).powi(2)).sum();
        (ss / (reps - 1) as f64 / reps as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(OracleTau { tau, mc_se, n_big, reps, per_rep })
}

/// Which simulated covariates a method may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariatePool {
    /// X1..X5 and V1..V50.
    #[default]
    All,
    /// X1..X5 only.
    SignalOnly,
}

impl CovariatePool {
    fn columns(self) -> std::ops::Range<usize> {
        match self {
            Self::All => 0..N_COVARIATES,
            Self::SignalOnly => 0..N_SIGNAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimMethod {
    pub selection: SelectionMethod,
    pub estimator: Method,
    pub link1: LinkFamily,
    pub link0: LinkFamily,
    pub pool: CovariatePool,
}

impl SimMethod {
    pub fn new(selection: SelectionMethod, estimator: Method, link: LinkFamily) -> Self {
        Self { selection, estimator, link1: link, link0: link, pool: CovariatePool::All }
    }

    pub fn simple() -> Self {
        Self::new(SelectionMethod::None, Method::Simple, LinkFamily::Identity)
    }

    pub fn with_pool(mut self, pool: CovariatePool) -> Self {
        self.pool = pool;
        self
    }

    /// Parses a label such as `Simple`, `Lasso+AIPW` or `No+AIPW[X]`; the
    /// `[X]` suffix restricts the method to the signal covariates. Selection
    /// parameters take their defaults.
    pub fn parse(label: &str, link: LinkFamily) -> Result<Self> {
        let label = label.trim();
        if label.eq_ignore_ascii_case("simple") {
            return Ok(Self::simple());
        }
        let (body, pool) = match label.strip_suffix("[X]") {
            Some(b) => (b, CovariatePool::SignalOnly),
            None => (label, CovariatePool::All),
        };
        let (sel, est) = body.split_once('+').ok_or_else(|| {
            Error::InvalidParameter(format!("method label {label:?} is not of the form Selection+Estimator"))
        })?;
        let estimator = match est.to_ascii_uppercase().as_str() {
            "SIMPLE" => Method::Simple,
            "ANCOVA" => Method::Ancova,
            "ANHECOVA" => Method::Anhecova,
            "AIPW" => Method::Aipw,
            _ => return Err(Error::InvalidParameter(format!("unknown estimator {est:?} in {label:?}"))),
        };
        let selection = SelectionMethod::from_name(sel, 1, 0.25, 0.05)?;
        Ok(Self { selection, estimator, link1: link, link0: link, pool })
    }

    pub fn label(&self) -> String {
        let mut s = match self.estimator {
            Method::Simple => "Simple".to_string(),
            est => format!("{}+{est}", self.selection.name()),
        };
        if self.pool == CovariatePool::SignalOnly && self.estimator != Method::Simple {
            s.push_str("[X]");
        }
        s
    }
}

/// The simple estimator plus every selection method crossed with ANCOVA,
/// ANHECOVA and AIPW (logit AIPW links for binary outcomes).
pub fn default_methods(outcome: Outcome) -> Vec<SimMethod> {
    let link = match outcome {
        Outcome::Continuous => LinkFamily::Identity,
        Outcome::Binary => LinkFamily::Logit,
    };
    let selections = [
        SelectionMethod::None,
        SelectionMethod::Lasso,
        SelectionMethod::AdaptiveLasso,
        SelectionMethod::CorrK { k: 1 },
        SelectionMethod::CorrXi { xi: 0.25 },
        SelectionMethod::PreTest { alpha: 0.05 },
    ];
    let mut out = vec![SimMethod::simple()];
    for sel in selections {
        for est in [Method::Ancova, Method::Anhecova, Method::Aipw] {
            out.push(SimMethod::new(sel, est, link));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepResult {
    pub tau_hat: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub rejected: Option<bool>,
}

impl RepResult {
    const FAILED: Self = Self { tau_hat: None, se: None, covered: None, rejected: None };

    fn from_estimate(est: &AteEstimate, tau: f64) -> Self {
        Self {
            tau_hat: Some(est.tau_hat).filter(|t| t.is_finite()),
            se: est.se,
            covered: est.covers(tau),
            rejected: est.p_value.map(|p| p <= POWER_ALPHA),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub label: String,
    pub method: SimMethod,
    /// `tau_hat - tau` per replication; `None` when the estimator failed.
    pub bias: Vec<Option<f64>>,
    pub bias_mean: Option<f64>,
    pub bias_median: Option<f64>,
    pub empirical_sd: Option<f64>,
    pub empirical_var: Option<f64>,
    /// Percent of available confidence intervals covering tau.
    pub cp: Option<f64>,
    /// Percent of all replications with `p <= 0.05`; unavailable p-values count as non-rejections.
    pub power: f64,
    /// Percent of replications without a standard error.
    pub na_rate: f64,
    #[serde(skip)]
    pub reps: Vec<RepResult>,
}

impl MethodSummary {
    fn new(method: SimMethod, reps: Vec<RepResult>, tau: f64) -> Self {
        let m = reps.len() as f64;
        let bias: Vec<Option<f64>> = reps.iter().map(|r| r.tau_hat.map(|t| t - tau)).collect();
        let vals: Vec<f64> = bias.iter().flatten().copied().collect();
        let k = vals.len();
        let bias_mean = (k > 0).then(|| vals.iter().sum::<f64>() / k as f64);
        let bias_median = (k > 0).then(|| {
            let mut s = vals.clone();
            s.sort_by(f64::total_cmp);
            if k % 2 == 1 {
                s[k / 2]
            } else {
                0.5 * (s[k / 2 - 1] + s[k / 2])
            }
        });
        let empirical_var =
            bias_mean.filter(|_| k > 1).map(|mu| vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1) as f64);
        let with_ci: Vec<bool> = reps.iter().filter_map(|r| r.covered).collect();
        let cp =
            (!with_ci.is_empty()).then(|| 100.0 * with_ci.iter().filter(|&&c| c).count() as f64 / with_ci.len() as f64);
        let power = 100.0 * reps.iter().filter(|r| r.rejected == Some(true)).count() as f64 / m;
        let na_rate = 100.0 * reps.iter().filter(|r| r.se.is_none()).count() as f64 / m;
        Self {
            label: method.label(),
            method,
            bias,
            bias_mean,
            bias_median,
            empirical_sd: empirical_var.map(f64::sqrt),
            empirical_var,
            cp,
            power,
            na_rate,
            reps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub spec: DgpSpec,
    pub oracle_tau: f64,
    pub m: usize,
    pub master_seed: u64,
    pub conf_level: f64,
    pub methods: Vec<MethodSummary>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

impl SimulationReport {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }

    /// One row per method.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,bias_mean,bias_median,emp_sd,cp,power,na_rate\n");
        for s in &self.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6}\n",
                s.label,
                fmt_opt(s.bias_mean),
                fmt_opt(s.bias_median),
                fmt_opt(s.empirical_sd),
                fmt_opt(s.cp),
                s.power,
                s.na_rate
            ));
        }
        out
    }

    /// One row per (replication, method).
    pub fn replications_csv(&self) -> String {
        let mut out = String::from("rep,method,tau_hat,se,covered,rejected\n");
        let b = |v: Option<bool>| v.map_or("NA".to_string(), |x| u8::from(x).to_string());
        for r in 0..self.m {
            for s in &self.methods {
                let rep = &s.reps[r];
                out.push_str(&format!(
                    "{r},{},{},{},{},{}\n",
                    s.label,
                    fmt_opt(rep.tau_hat),
                    fmt_opt(rep.se),
                    b(rep.covered),
                    b(rep.rejected)
                ));
            }
        }
        out
    }

    /// `N (Var_a - Var_b)` of the replication estimates, with a MC SE from the
    /// per-replication squared deviations. Replications where either failed
    /// are dropped.
    pub fn scaled_variance_gap(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        let (sa, sb) = (self.method(a)?, self.method(b)?);
        let pairs: Vec<(f64, f64)> = sa.bias.iter().zip(&sb.bias).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
        let k = pairs.len();
        if k < 3 {
            return None;
        }
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / k as f64;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / k as f64;
        let c = k as f64 / (k - 1) as f64;
        let d: Vec<f64> = pairs.iter().map(|(x, y)| c * ((x - ma).powi(2) - (y - mb).powi(2))).collect();
        let mean = d.iter().sum::<f64>() / k as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
        let n = self.spec.n as f64;
        Some((n * mean, n * sd / (k as f64).sqrt()))
    }
}

/// One simulated trial: all 55 covariates, treatment and observed outcome.
pub fn simulate_trial<R: Rng>(spec: &DgpSpec, sampler: &CovariateSampler, rng: &mut R) -> Result<CompleteTrial> {
    let n = spec.n;
    let mut x = DMatrix::zeros(n, N_COVARIATES);
    let mut a = Vec::with_capacity(n);
    let mut y = DVector::zeros(n);
    let mut buf = [0.0; N_NOISE];
    for i in 0..n {
        let s = sampler.signal(rng);
        sampler.noise(rng, &mut buf);
        for j in 0..N_SIGNAL {
            x[(i, j)] = s[j];
        }
        for j in 0..N_NOISE {
            x[(i, N_SIGNAL + j)] = buf[j];
        }
        let (y0, y1) = spec.draw_potential(&s, rng);
        let arm = u8::from(rng.random::<f64>() < 0.5);
        a.push(arm);
        y[i] = if arm == 1 { y1 } else { y0 };
    }
    CompleteTrial::new(a, y, x, covariate_names())
}

fn replicate(
    spec: &DgpSpec,
    sampler: &CovariateSampler,
    methods: &[SimMethod],
    master_seed: u64,
    r: usize,
    tau: f64,
    conf_level: f64,
) -> Vec<RepResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(r as u64);
    let Ok(trial) = simulate_trial(spec, sampler, &mut rng) else {
        return vec![RepResult::FAILED; methods.len()];
    };
    let sel_seed: u64 = rng.random();
    let pools = [CovariatePool::All, CovariatePool::SignalOnly];
    let restricted: Vec<CompleteTrial> =
        pools.iter().map(|p| trial.restrict_covariates(&p.columns().collect::<Vec<_>>())).collect();
    let mut cache: Vec<((SelectionMethod, CovariatePool), Option<SelectionResult>)> = Vec::new();
    methods
        .iter()
        .map(|m| {
            let t = &restricted[usize::from(m.pool == CovariatePool::SignalOnly)];
            let sel = if m.estimator == Method::Simple {
                SelectionResult {
                    method: SelectionMethod::None,
                    pooled: Vec::new(),
                    per_arm: [Vec::new(), Vec::new()],
                    diagnostics: Default::default(),
                    warnings: Vec::new(),
                }
            } else {
                let key = (m.selection, m.pool);
                match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, s)) => match s {
                        Some(s) => s.clone(),
                        None => return RepResult::FAILED,
                    },
                    None => {
                        let s = select(&SelectionSpec::new(m.selection, sel_seed), t).ok();
                        cache.push((key, s.clone()));
                        match s {
                            Some(s) => s,
                            None => return RepResult::FAILED,
                        }
                    }
                }
            };
            match estimate(t, &sel, m.estimator, m.link1, m.link0, None, conf_level) {
                Ok((est, _)) => RepResult::from_estimate(&est, tau),
                Err(_) => RepResult::FAILED,
            }
        })
        .collect()
}

/// Runs `m` replications of every method against a precomputed oracle `tau`.
/// Estimator failures are recorded as missing, never propagated.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    methods: &[SimMethod],
    m: usize,
    master_seed: u64,
    tau: f64,
    workers: usize,
) -> Result<SimulationReport> {
    run_monte_carlo_with_level(spec, methods, m, master_seed, tau, DEFAULT_CONF_LEVEL, workers)
}

pub fn run_monte_carlo_with_level(
    spec: &DgpSpec,
    methods: &[SimMethod],
    m: usize,
    master_seed: u64,
    tau: f64,
    conf_level: f64,
    workers: usize,
) -> Result<SimulationReport> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter("number of replications must be >= 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods to simulate".into()));
    }
    if !(conf_level > 0.0 && conf_level < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence level must lie in (0, 1), got {conf_level}")));
    }
    for meth in methods {
        meth.selection.validate()?;
    }
    let sampler = CovariateSampler::new();
    let per_rep: Vec<Vec<RepResult>> = with_workers(workers, || {
        (0..m).into_par_iter().map(|r| replicate(spec, &sampler, methods, master_seed, r, tau, conf_level)).collect()
    })?;
    let summaries = methods
        .iter()
        .enumerate()
        .map(|(j, meth)| MethodSummary::new(*meth, per_rep.iter().map(|row| row[j]).collect(), tau))
        .collect();
    Ok(SimulationReport { spec: *spec, oracle_tau: tau, m, master_seed, conf_level, methods: summaries })
}

/// Fractions of rows where (a) `sign(g) == sign(m)`, zero matching zero,
/// and (b) `|g| <= 2 |m|`.
pub fn check_glm_gain_condition(fit_means: &[f64], true_means: &[f64]) -> Result<(f64, f64)> {
    if fit_means.len() != true_means.len() {
        return Err(Error::DimensionMismatch {
            context: "true means",
            expected: fit_means.len(),
            found: true_means.len(),
        });
    }
    if fit_means.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sgn = |v: f64| if v == 0.0 { 0.0 } else { v.signum() };
    let n = fit_means.len() as f64;
    let (mut sign, mut mag) = (0usize, 0usize);
    for (&g, &m) in fit_means.iter().zip(true_means) {
        sign += usize::from(sgn(g) == sgn(m));
        mag += usize::from(g.abs() <= 2.0 * m.abs());
    }
    Ok((sign as f64 / n, mag as f64 / n))
}

/// `g (1 - g) / |1 - 2 g|`; infinite at `g = 0.5`.
pub fn logistic_bias_bound(g: f64) -> Result<f64> {
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::InvalidParameter(format!("g must lie in (0, 1), got {g}")));
    }
    if g == 0.5 {
        return Ok(f64::INFINITY);
    }
    Ok(g * (1.0 - g) / (1.0 - 2.0 * g).abs())
}

/// A fitted working model applied to a full covariate row.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    /// Indices into `(X1..X5, V1..V50)`.
    pub columns: Vec<usize>,
    pub link: LinkFamily,
    /// Intercept first.
    pub beta: DVector<f64>,
}

impl ArmModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let eta = self.beta[0] + self.columns.iter().enumerate().map(|(k, &j)| self.beta[k + 1] * row[j]).sum::<f64>();
        self.link.mean(eta)
    }
}

/// Fits each arm's working model on one large simulated trial, approximating
/// the limiting coefficients.
pub fn fit_arm_models(
    spec: &DgpSpec,
    columns: &[usize],
    link: LinkFamily,
    n_fit: usize,
    seed: u64,
) -> Result<[ArmModel; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big = simulate_trial(&DgpSpec { n: n_fit, ..*spec }, &CovariateSampler::new(), &mut rng)?;
    let fit = |arm: u8| -> Result<ArmModel> {
        let rows = big.arm_rows(arm);
        let x = crate::glm::with_intercept(&big.columns(columns).select_rows(&rows));
        let y = big.outcome().select_rows(&rows);
        let f = crate::glm::irls_fit(&x, &y, link, None, crate::glm::DEFAULT_MAX_ITER, crate::glm::DEFAULT_TOL)?;
        Ok(ArmModel { columns: columns.to_vec(), link, beta: f.beta })
    };
    Ok([fit(0)?, fit(1)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceGap {
    /// `N (V_simple - V_aipw)` in the limit.
    pub gap: f64,
    pub mc_se: f64,
    /// `(1 - pi)/pi E{g1 (2 m1 - g1)}`
    pub i1: f64,
    /// `pi/(1 - pi) E{g0 (2 m0 - g0)}`
    pub i0: f64,
    /// `2 E{m1 g0 + m0 g1 - g1 g0}`
    pub cross: f64,
}

/// Monte Carlo value of the limiting variance difference between the simple
/// and AIPW estimators for working models `g0`, `g1` at `pi = 1/2`. All
/// functions are centred at their sample means before the integrands are
/// formed. `cross` is the covariance term linking the two arms, which vanishes
/// only when the arm means are uncorrelated.
pub fn variance_gap_oracle<G0, G1>(spec: &DgpSpec, g0: G0, g1: G1, n_mc: usize, seed: u64) -> Result<VarianceGap>
where
    G0: Fn(&[f64]) -> f64,
    G1: Fn(&[f64]) -> f64,
{
    if n_mc < 2 {
        return Err(Error::InvalidParameter("n_mc must be >= 2".into()));
    }
    let sampler = CovariateSampler::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut row = [0.0; N_COVARIATES];
    for _ in 0..n_mc {
        let s = sampler.signal(&mut rng);
        row[..N_SIGNAL].copy_from_slice(&s);
        sampler.noise(&mut rng, &mut row[N_SIGNAL..]);
        cols[0].push(spec.conditional_mean(&s, 0));
        cols[1].push(spec.conditional_mean(&s, 1));
        cols[2].push(g0(&row));
        cols[3].push(g1(&row));
    }
    for c in cols.iter_mut() {
        let mu = c.iter().sum::<f64>() / n_mc as f64;
        c.iter_mut().for_each(|v| *v -= mu);
    }
    let pi = 0.5;
    let (w1, w0) = ((1.0 - pi) / pi, pi / (1.0 - pi));
    let [m0, m1, g0v, g1v] = &cols;
    let mut parts = [Vec::with_capacity(n_mc), Vec::with_capacity(n_mc), Vec::with_capacity(n_mc)];
    for i in 0..n_mc {
        parts[0].push(w1 * g1v[i] * (2.0 * m1[i] - g1v[i]));
        parts[1].push(w0 * g0v[i] * (2.0 * m0[i] - g0v[i]));
        parts[2].push(2.0 * (m1[i] * g0v[i] + m0[i] * g1v[i] - g1v[i] * g0v[i]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let h: Vec<f64> = (0..n_mc).map(|i| parts[0][i] + parts[1][i] + parts[2][i]).collect();
    let gap = mean(&h);
    let sd = (h.iter().map(|v| (v - gap).powi(2)).sum::<f64>() / (n_mc - 1) as f64).sqrt();
    Ok(VarianceGap {
        gap,
        mc_se: sd / (n_mc as f64).sqrt(),
        i1: mean(&parts[0]),
        i0: mean(&parts[1]),
        cross: mean(&parts[2]),
    })
}
