//! Scalar statistics: normal/t tails, Pearson correlation, Welch's test, and
//! the (optionally weighted) moment helpers shared by the estimators.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided normal p-value for a z statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { context: "pearson_corr", expected: x.len(), found: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::GroupTooSmall("correlation needs at least 2 pairs"));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance("correlation undefined"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchTest {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

pub fn welch_t_test(x1: &[f64], x0: &[f64]) -> Result<WelchTest> {
    if x1.len() < 2 || x0.len() < 2 {
        return Err(Error::GroupTooSmall("each group needs at least 2 observations"));
    }
    if x1.iter().chain(x0).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("welch_t_test"));
    }
    let (n1, n0) = (x1.len() as f64, x0.len() as f64);
    let (v1, v0) = (sample_variance(x1), sample_variance(x0));
    if v1 <= 0.0 && v0 <= 0.0 {
        return Err(Error::ZeroVariance("both groups are constant"));
    }
    let (q1, q0) = (v1 / n1, v0 / n0);
    let se2 = q1 + q0;
    let t = (mean(x1) - mean(x0)) / se2.sqrt();
    let df = se2 * se2 / (q1 * q1 / (n1 - 1.0) + q0 * q0 / (n0 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchTest { t, df, p_value })
}

/// Weighted sample moments with reliability-weight normalization: for unit
/// weights these reduce to the usual `n - 1` estimators.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Moments {
    sum_w: f64,
    sum_w2: f64,
}

impl Moments {
    pub fn new(w: &[f64]) -> Self {
        Self { sum_w: w.iter().sum(), sum_w2: w.iter().map(|v| v * v).sum() }
    }

    pub fn total(&self) -> f64 {
        self.sum_w
    }

    /// `(sum w)^2 / sum w^2`
    pub fn effective_n(&self) -> f64 {
        self.sum_w * self.sum_w / self.sum_w2
    }

    pub fn mean(&self, w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / self.sum_w
    }

    pub fn cov(&self, w: &[f64], x: &[f64], y: &[f64]) -> f64 {
        let (mx, my) = (self.mean(w, x), self.mean(w, y));
        let s: f64 = w.iter().zip(x.iter().zip(y)).map(|(wi, (a, b))| wi * (a - mx) * (b - my)).sum();
        s / (self.sum_w - self.sum_w2 / self.sum_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_corr(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_corr(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        // Hand moments: sxy = 3, sxx = 2, syy = 14/3 -> 3 / sqrt(28/3).
        let r = pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (28.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((r - 0.981_980_506).abs() < 1e-9);
    }

    #[test]
    fn correlation_zero_variance_is_error() {
        assert!(matches!(pearson_corr(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn welch_identical_groups() {
        let g = [1.0, 2.0, 4.0, 7.0];
        let w = welch_t_test(&g, &g).unwrap();
        assert_eq!(w.t, 0.0);
        assert!((w.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn welch_two_df_closed_form() {
        // Two obs per group with equal variances gives df = 2, where the t
        // tail has the closed form P(|T| > t) = 1 - t / sqrt(t^2 + 2).
        let w = welch_t_test(&[0.0, 1.0], &[10.0, 11.0]).unwrap();
        assert!((w.df - 2.0).abs() < 1e-12);
        let t = w.t.abs();
        let oracle = 1.0 - t / (t * t + 2.0).sqrt();
        assert!((w.p_value - oracle).abs() < 1e-10);
        assert!(w.p_value < 0.01);
    }

    #[test]
    fn welch_errors() {
        assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(Error::GroupTooSmall(_))));
        assert!(matches!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn normal_helpers() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
        let p = normal_two_sided_p(1.959_963_984_540_054);
        assert!((p - 0.05).abs() < 1e-10, "{p:e}");
    }

    #[test]
    fn unit_weight_moments_match_plain() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let w = [1.0; 5];
        let m = Moments::new(&w);
        assert!((m.cov(&w, &x, &x) - sample_variance(&x)).abs() < 1e-12);
        assert!((m.effective_n() - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn corr_affine_invariant(
            xs in prop::collection::vec(-10.0..10.0f64, 5..30),
            a in 0.1..5.0f64, b in -5.0..5.0f64, seed in 0u64..1000,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate()
                .map(|(i, v)| v * 0.3 + ((i as u64 * 7919 + seed) % 13) as f64)
                .collect();
            if let Ok(r) = pearson_corr(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
                let r2 = pearson_corr(&xt, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn welch_symmetric_in_groups(
            g1 in prop::collection::vec(-10.0..10.0f64, 2..20),
            g0 in prop::collection::vec(-10.0..10.0f64, 2..20),
        ) {
            if let (Ok(a), Ok(b)) = (welch_t_test(&g1, &g0), welch_t_test(&g0, &g1)) {
                prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
                prop_assert!((a.t + b.t).abs() < 1e-12);
            }
        }
    }
}
