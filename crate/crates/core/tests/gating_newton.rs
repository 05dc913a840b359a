use mople::gating::{gating_q, newton_update, GatingMode};
use mople::rng::task_rng;
use mople::GatingParams;
use nalgebra::DMatrix;
use rand::Rng;

/// Covariates and one-hot labels from `P(first) = logistic(a + b x)`.
fn logistic_sample(n: usize, a: f64, b: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = task_rng(seed, &[]);
    let mut x = DMatrix::zeros(n, 1);
    let mut z = DMatrix::zeros(n, 2);
    for i in 0..n {
        let xi: f64 = rng.random();
        x[(i, 0)] = xi;
        let p = 1.0 / (1.0 + (-(a + b * xi)).exp());
        let k = if rng.random::<f64>() < p { 0 } else { 1 };
        z[(i, k)] = 1.0;
    }
    (x, z)
}

fn newton_fit(x: &DMatrix<f64>, z: &DMatrix<f64>) -> (f64, f64) {
    let mut g = GatingParams::zeros(2, 1);
    for _ in 0..100 {
        let (next, _) = newton_update(&g, x, z, GatingMode::Full).unwrap();
        let moved = (next.alpha0[0] - g.alpha0[0]).abs() + (next.alpha[(0, 0)] - g.alpha[(0, 0)]).abs();
        g = next;
        if moved < 1e-13 {
            break;
        }
    }
    (g.alpha0[0], g.alpha[(0, 0)])
}

/// Binary log-likelihood written out directly.
fn loglik(x: &DMatrix<f64>, z: &DMatrix<f64>, a: f64, b: f64) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let eta = a + b * x[(i, 0)];
            let log1p = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            z[(i, 0)] * eta - log1p
        })
        .sum()
}

/// Golden-section search for the maximum of a concave function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > 1e-10 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Maximizes the slope's profile likelihood, the intercept profiled out.
fn profile_search(x: &DMatrix<f64>, z: &DMatrix<f64>) -> (f64, f64) {
    let best_a = |b: f64| golden_max(|a| loglik(x, z, a, b), -20.0, 20.0);
    let b = golden_max(|b| loglik(x, z, best_a(b), b), -20.0, 20.0);
    (best_a(b), b)
}

#[test]
fn newton_matches_independent_maximizer() {
    for seed in [1u64, 2, 3] {
        let (x, z) = logistic_sample(200, -0.5, 2.0, seed);
        let (na, nb) = newton_fit(&x, &z);
        let (ga, gb) = profile_search(&x, &z);
        assert!((na - ga).abs() < 1e-5, "seed {seed}: {na} vs {ga}");
        assert!((nb - gb).abs() < 1e-5, "seed {seed}: {nb} vs {gb}");
        let mut g = GatingParams::zeros(2, 1);
        g.alpha0[0] = na;
        g.alpha[(0, 0)] = nb;
        assert!((gating_q(&g, &x, &z) - loglik(&x, &z, na, nb)).abs() < 1e-9);
    }
}

#[test]
fn newton_recovers_generating_coefficients() {
    let (x, z) = logistic_sample(20_000, -0.5, 2.0, 7);
    let (a, b) = newton_fit(&x, &z);
    assert!((a + 0.5).abs() < 0.15, "intercept {a}");
    assert!((b - 2.0).abs() < 0.15, "slope {b}");
}

#[test]
fn soft_targets_equal_to_the_model_are_stationary() {
    let (x, _) = logistic_sample(50, 0.0, 0.0, 4);
    let mut g = GatingParams::zeros(2, 1);
    g.alpha0[0] = 0.3;
    g.alpha[(0, 0)] = -1.2;
    let z = DMatrix::from_fn(50, 2, |i, k| {
        let p = 1.0 / (1.0 + (-(0.3 - 1.2 * x[(i, 0)])).exp());
        if k == 0 {
            p
        } else {
            1.0 - p
        }
    });
    let (next, _) = newton_update(&g, &x, &z, GatingMode::Full).unwrap();
    assert!((next.alpha0[0] - 0.3).abs() < 1e-12);
    assert!((next.alpha[(0, 0)] + 1.2).abs() < 1e-12);
}
