//! Acceptance criteria: one PASS/FAIL line each. Exits non-zero if any fails.

use std::process::Command;
use std::time::Instant;

use covadj::dataset::BinaryTrial;
use covadj::estimators::{aipw, anhecova, Method};
use covadj::glm::{irls_fit, ols_fit, LinkFamily, DEFAULT_MAX_ITER, DEFAULT_TOL};
use covadj::imputer::ImputationMethod;
use covadj::lasso::{lasso_cd, Family};
use covadj::pipeline::{analyze, PipelineConfig};
use covadj::selector::{SelectionMethod, SelectionSpec};
use covadj::simlab::{
    fit_arm_models, run_monte_carlo, true_ate_oracle, variance_gap_oracle, CovariatePool, Delta, DgpSpec,
    LinearDeltaReading, Outcome, SimMethod, SimulationReport, N_SIGNAL,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 4399;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn z(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn c1_aipw_equals_anhecova() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..200 {
        let n = rng.random_range(50..=400);
        let p = rng.random_range(1..=10);
        let x = DMatrix::from_fn(n, p, |_, _| z(&mut rng) * 2.0 + 1.0);
        let mut a: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        a[0] = 0;
        a[1] = 1;
        let y = DVector::from_fn(n, |i, _| {
            let lin: f64 = (0..p).map(|j| x[(i, j)] * (j as f64 - 2.0)).sum();
            1.0 + 2.0 * f64::from(a[i]) + lin + f64::from(a[i]) * x[(i, 0)] + z(&mut rng)
        });
        let lin = LinkFamily::Identity;
        match (anhecova(&a, &y, &x, None, 0.95), aipw(&a, &y, &x, &x, lin, lin, None, 0.95)) {
            (Ok(h), Ok(w)) => worst = worst.max((h.tau_hat - w.estimate.tau_hat).abs()),
            _ => failures += 1,
        }
    }
    verdict(
        failures == 0 && worst <= 1e-8,
        format!("max |tau_AIPW - tau_ANHECOVA| = {worst:.2e} over 200 datasets (tol 1e-8), {failures} fit errors"),
    )
}

fn c2_oracle_targets() -> Verdict {
    let cases = [
        ("binary linear", Outcome::Binary, Delta::Linear, LinearDeltaReading::AsWritten, 0.11, 0.01, true),
        ("binary nonlinear", Outcome::Binary, Delta::Nonlinear, LinearDeltaReading::AsWritten, 0.11, 0.01, true),
        ("continuous nonlinear", Outcome::Continuous, Delta::Nonlinear, LinearDeltaReading::AsWritten, 8.15, 0.1, true),
        (
            "continuous linear additive",
            Outcome::Continuous,
            Delta::Linear,
            LinearDeltaReading::Additive,
            8.15,
            0.1,
            true,
        ),
        (
            "continuous linear as-written",
            Outcome::Continuous,
            Delta::Linear,
            LinearDeltaReading::AsWritten,
            8.15,
            0.1,
            false,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, outcome, delta, reading, target, tol, required) in cases {
        let spec = DgpSpec::new(outcome, delta, 500, SEED).with_reading(reading);
        let o = match true_ate_oracle(&spec, 1_000_000, 20, 1) {
            Ok(o) => o,
            Err(e) => return verdict(false, format!("{name}: {e}")),
        };
        let ok = (o.tau - target).abs() <= tol;
        if required {
            pass &= ok;
            parts.push(format!(
                "{name} {:.4} (MC SE {:.4}) vs {target}±{tol} {}",
                o.tau,
                o.mc_se,
                if ok { "ok" } else { "off" }
            ));
        } else {
            parts.push(format!("{name} {:.4} (MC SE {:.4}) recorded", o.tau, o.mc_se));
        }
    }
    verdict(pass, parts.join("; "))
}

fn linear_run(reading: LinearDeltaReading) -> Result<(SimulationReport, f64), String> {
    let spec = DgpSpec::new(Outcome::Continuous, Delta::Linear, 500, SEED).with_reading(reading);
    let tau = true_ate_oracle(&spec, 1_000_000, 20, 1).map_err(|e| e.to_string())?.tau;
    let methods = [
        SimMethod::simple(),
        SimMethod::new(SelectionMethod::Lasso, Method::Anhecova, LinkFamily::Identity),
        SimMethod::new(SelectionMethod::Lasso, Method::Aipw, LinkFamily::Identity),
    ];
    let report = run_monte_carlo(&spec, &methods, 500, SEED, tau, 1).map_err(|e| e.to_string())?;
    Ok((report, tau))
}

const LABELS: [&str; 3] = ["Simple", "Lasso+ANHECOVA", "Lasso+AIPW"];

fn c3_coverage(report: &SimulationReport, tag: &str) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for label in LABELS {
        let cp = report.method(label).and_then(|m| m.cp);
        let ok = cp.is_some_and(|c| (93.0..=97.0).contains(&c));
        pass &= ok;
        parts.push(format!("{label} {}", cp.map_or("NA".into(), |c| format!("{c:.1}"))));
    }
    (pass, format!("{tag}: CP% {} (band [93, 97])", parts.join(", ")))
}

fn c4_efficiency(report: &SimulationReport, tag: &str) -> (bool, String) {
    let sd = |l: &str| report.method(l).and_then(|m| m.empirical_sd);
    let power = |l: &str| report.method(l).map(|m| m.power);
    let (Some(s0), Some(s1), Some(s2)) = (sd(LABELS[0]), sd(LABELS[1]), sd(LABELS[2])) else {
        return (false, format!("{tag}: empirical SD unavailable"));
    };
    let (p0, p2) = (power(LABELS[0]).unwrap_or(0.0), power(LABELS[2]).unwrap_or(0.0));
    let pass = s1 <= 0.9 * s0 && s2 <= 0.9 * s0 && p2 >= p0;
    (
        pass,
        format!(
            "{tag}: SD ratio ANHECOVA {:.3}, AIPW {:.3} (<= 0.9); Power% AIPW {p2:.1} vs Simple {p0:.1}",
            s1 / s0,
            s2 / s0
        ),
    )
}

fn c5_high_dimensional() -> Verdict {
    let (n, p) = (169, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let a: Vec<u8> = (0..n).map(|i| u8::from(i < 83)).collect();
    let cols: Vec<Vec<Option<f64>>> = (0..p).map(|_| (0..n).map(|_| Some(z(&mut rng))).collect()).collect();
    let y = (0..n).map(|i| Some(f64::from(a[i]) + cols[0][i].unwrap() + z(&mut rng))).collect();
    let names = (0..p).map(|j| format!("x{j}")).collect();
    let trial = match BinaryTrial::new(a, y, names, cols) {
        Ok(t) => t,
        Err(e) => return verdict(false, e.to_string()),
    };
    let cfg = PipelineConfig {
        selection: SelectionSpec::new(SelectionMethod::None, SEED),
        imputation: ImputationMethod::CompleteCase,
        link1: LinkFamily::Identity,
        link0: LinkFamily::Identity,
        conf_level: 0.95,
        seed: SEED,
    };
    let out = match analyze(&trial, &cfg) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("analysis failed: {e}")),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [Method::Ancova, Method::Anhecova] {
        let e = out.estimates.iter().find(|e| e.method == m).expect("estimate row");
        let ok = e.tau_hat.is_finite() && e.se.is_none() && e.diagnostics.rank_deficient;
        pass &= ok;
        parts.push(format!(
            "{m}: tau {:.3}, se {}, rank_deficient {}",
            e.tau_hat,
            e.se.map_or("NA".into(), |s| format!("{s:.3}")),
            e.diagnostics.rank_deficient
        ));
    }
    verdict(pass, parts.join("; "))
}

fn c6_variance_gap() -> Verdict {
    let spec = DgpSpec::new(Outcome::Continuous, Delta::Linear, 500, SEED);
    let columns: Vec<usize> = (0..N_SIGNAL).collect();
    let [g0, g1] = match fit_arm_models(&spec, &columns, LinkFamily::Identity, 1_000_000, SEED + 1) {
        Ok(m) => m,
        Err(e) => return verdict(false, e.to_string()),
    };
    let oracle = match variance_gap_oracle(&spec, |r| g0.predict(r), |r| g1.predict(r), 1_000_000, SEED + 2) {
        Ok(v) => v,
        Err(e) => return verdict(false, e.to_string()),
    };
    let tau = match true_ate_oracle(&spec, 1_000_000, 20, 1) {
        Ok(o) => o.tau,
        Err(e) => return verdict(false, e.to_string()),
    };
    let aipw_x =
        SimMethod::new(SelectionMethod::None, Method::Aipw, LinkFamily::Identity).with_pool(CovariatePool::SignalOnly);
    let report = match run_monte_carlo(&spec, &[SimMethod::simple(), aipw_x], 1000, SEED, tau, 1) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let Some((emp, emp_se)) = report.scaled_variance_gap("Simple", &aipw_x.label()) else {
        return verdict(false, "empirical gap unavailable");
    };
    let combined = (emp_se.powi(2) + oracle.mc_se.powi(2)).sqrt();
    let diff = (oracle.gap - emp).abs();
    verdict(
        diff <= 3.0 * combined,
        format!(
            "oracle {:.1} (MC SE {:.1}; arm terms {:.1}, cross {:.1}) vs empirical {emp:.1} (MC SE {emp_se:.1}); |diff| {diff:.1} <= {:.1}",
            oracle.gap,
            oracle.mc_se,
            oracle.i1 + oracle.i0,
            oracle.cross,
            3.0 * combined
        ),
    )
}

fn c7_closed_form() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;

    let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
    let y = DVector::from_vec(vec![1.0, 3.0, 5.0]);
    let ols = ols_fit(&x, &y, None).map(|f| ((f.beta[0] - 1.0).abs()).max((f.beta[1] - 2.0).abs()));
    let ok = ols.as_ref().is_ok_and(|&e| e <= 1e-10);
    pass &= ok;
    parts.push(format!("OLS normal equations err {:.1e}", ols.unwrap_or(f64::NAN)));

    let y = DVector::from_fn(100, |i, _| f64::from(i < 30));
    let ones = DMatrix::from_element(100, 1, 1.0);
    let target = (0.3f64 / 0.7).ln();
    let logit =
        irls_fit(&ones, &y, LinkFamily::Logit, None, DEFAULT_MAX_ITER, DEFAULT_TOL).map(|f| (f.beta[0] - target).abs());
    let ok = logit.as_ref().is_ok_and(|&e| e <= 1e-8);
    pass &= ok;
    parts.push(format!("logit intercept MLE err {:.1e}", logit.unwrap_or(f64::NAN)));

    // Centred orthogonal +-1 columns: x'x / n = I.
    let n = 8;
    let x = DMatrix::from_fn(n, 3, |i, j| if (i >> j) & 1 == 0 { 1.0 } else { -1.0 });
    let y = DVector::from_vec(vec![3.0, -1.0, 2.5, 0.2, -0.7, 1.1, 4.0, -2.0]);
    let yc = y.add_scalar(-y.mean());
    let mut err = 0.0f64;
    for lambda in [0.05, 0.4, 1.0] {
        match lasso_cd(&x, &y, Family::Gaussian, lambda, None, None) {
            Ok(fit) => {
                for j in 0..3 {
                    let zj = x.column(j).dot(&yc) / n as f64;
                    let soft = zj.signum() * (zj.abs() - lambda).max(0.0);
                    err = err.max((fit.coef[j + 1] - soft).abs());
                }
            }
            Err(_) => err = f64::INFINITY,
        }
    }
    let ok = err <= 1e-7;
    pass &= ok;
    parts.push(format!("orthonormal soft-threshold err {err:.1e}"));
    verdict(pass, parts.join("; "))
}

fn c8_determinism() -> Verdict {
    let run = |workers: &str| {
        Command::new(env!("CARGO_BIN_EXE_covadj"))
            .args([
                "simulate",
                "--outcome",
                "continuous",
                "--delta",
                "nonlinear",
                "--n",
                "100",
                "--m",
                "20",
                "--seed",
                "1",
                "--methods",
                "Simple,Lasso+ANCOVA,A.Lasso+ANHECOVA,Corr.xi+AIPW",
                "--oracle-n-big",
                "50000",
                "--oracle-reps",
                "4",
                "--format",
                "json",
                "--workers",
                workers,
            ])
            .output()
    };
    let (a, b, c) = match (run("1"), run("1"), run("8")) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        _ => return verdict(false, "could not run the covadj binary"),
    };
    let ok = a.status.success() && b.status.success() && c.status.success();
    let repeat = a.stdout == b.stdout;
    let parallel = a.stdout == c.stdout;
    verdict(
        ok && repeat && parallel && !a.stdout.is_empty(),
        format!(
            "exit ok {ok}; repeat identical {repeat}; --workers 1 vs 8 identical {parallel}; {} bytes",
            a.stdout.len()
        ),
    )
}

fn main() {
    let mut all = true;
    let mut report = |id: &str, start: Instant, o: Verdict| {
        all &= o.pass;
        println!(
            "{} criterion {id} [{:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    };

    let t = Instant::now();
    report("1", t, c1_aipw_equals_anhecova());
    let t = Instant::now();
    report("2", t, c2_oracle_targets());

    let t = Instant::now();
    match (linear_run(LinearDeltaReading::AsWritten), linear_run(LinearDeltaReading::Additive)) {
        (Ok((written, tau_w)), Ok((additive, tau_a))) => {
            let (p3, d3) = c3_coverage(&written, &format!("as-written, oracle tau {tau_w:.4}"));
            let (_, d3a) = c3_coverage(&additive, &format!("additive, oracle tau {tau_a:.4}"));
            report("3", t, verdict(p3, format!("{d3} | {d3a}")));
            let t = Instant::now();
            let (p4, d4) = c4_efficiency(&written, "as-written");
            let (_, d4a) = c4_efficiency(&additive, "additive");
            report("4", t, verdict(p4, format!("{d4} | {d4a}")));
        }
        (a, b) => {
            let msg = a.err().or(b.err()).unwrap_or_default();
            report("3", t, verdict(false, msg.clone()));
            report("4", t, verdict(false, msg));
        }
    }

    let t = Instant::now();
    report("5", t, c5_high_dimensional());
    let t = Instant::now();
    report("6", t, c6_variance_gap());
    let t = Instant::now();
    report("7", t, c7_closed_form());
    let t = Instant::now();
    report("8", t, c8_determinism());
    println!("EXCLUDED criterion 9: case-study table values and figure readings are not reproducible at desk scale");

    if !all {
        std::process::exit(1);
    }
}
