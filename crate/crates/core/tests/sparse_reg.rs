use covadj::lasso::{cv_lasso, Family, DEFAULT_FOLDS, DEFAULT_N_LAMBDA};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn draw(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
}

#[test]
fn pure_noise_selects_few_covariates() {
    let mut sparse = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = draw(&mut rng, 200, 20);
        let y = DVector::from_fn(200, |_, _| StandardNormal.sample(&mut rng));
        let fit = cv_lasso(&x, &y, Family::Gaussian, DEFAULT_FOLDS, DEFAULT_N_LAMBDA, seed).unwrap();
        if fit.active_set.len() <= 3 {
            sparse += 1;
        }
    }
    assert!(sparse >= 90, "only {sparse}/100 runs kept at most 3 covariates");
}

#[test]
fn strong_signal_always_selected() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = draw(&mut rng, 200, 20);
        let y = DVector::from_fn(200, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            5.0 * x[(i, 0)] + 0.1 * e
        });
        let fit = cv_lasso(&x, &y, Family::Gaussian, DEFAULT_FOLDS, DEFAULT_N_LAMBDA, seed).unwrap();
        assert!(fit.active_set.contains(&0), "seed {seed}");
    }
}
