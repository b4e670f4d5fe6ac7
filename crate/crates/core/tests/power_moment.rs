//! Closed-form discounted power moment against an exponential-time sampler:
//! `E int_0^inf e^{-delta s} f(X_s) ds = E f(X_T) / delta` with
//! `T ~ Exp(delta)` independent of `X`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use fuel_core::profit::discounted_power_moment;
use fuel_core::FuelError;

fn sampled(x: f64, alpha: f64, mu: f64, sigma: f64, delta: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(delta).unwrap();
    let b = mu - 0.5 * sigma * sigma;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let t: f64 = exp.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = (x * (b * t + sigma * t.sqrt() * z).exp()).powf(alpha) / delta;
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn closed_form_matches_exponential_time_sampler() {
    let cases = [
        (1.0, 0.5, 0.0, 0.3, 1.0),
        (2.0, 0.3, 0.05, 0.2, 0.5),
        (0.5, 0.7, -0.1, 0.4, 2.0),
        (1.5, 0.5, 0.1, 0.1, 0.3),
        (1.0, 0.9, 0.2, 0.5, 1.5),
    ];
    for (i, &(x, alpha, mu, sigma, delta)) in cases.iter().enumerate() {
        let exact = discounted_power_moment(x, alpha, mu, sigma, delta).unwrap();
        let (mean, se) = sampled(x, alpha, mu, sigma, delta, 200_000, i as u64 + 1);
        assert!((mean - exact).abs() <= 4.0 * se, "case {i}: {mean} ± {se} vs {exact}");
    }
}

#[test]
fn explosive_drift_is_rejected() {
    // D = 0.1 - 0.5 * 1.0 + 0.045 * 0.25 < 0.
    let err = discounted_power_moment(1.0, 0.5, 1.0, 0.3, 0.1).unwrap_err();
    assert!(matches!(err, FuelError::IntegrabilityViolation { d } if d < 0.0));
}
