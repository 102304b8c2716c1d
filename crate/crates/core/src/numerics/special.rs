//! Special functions and numerically stable elementwise maps.
//!
//! Digamma, trigamma and log-gamma shift the argument upward with the
//! recurrence until it reaches [`ASYMPTOTIC_START`], then sum the
//! Bernoulli-number asymptotic series.

use crate::error::{Error, Result};

const ASYMPTOTIC_START: f64 = 6.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// B_2, B_4, ..., B_14.
const BERNOULLI: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

fn check_positive(function: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { function, x })
    }
}

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(psi(x))
}

/// ln Γ(x) for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive("log_gamma", x)?;
    Ok(ln_gamma(x))
}

/// ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(psi1(x))
}

pub(crate) fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_START {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut pow = inv2;
    let mut series = 0.0;
    for (n, b) in BERNOULLI.iter().enumerate() {
        series += b / (2.0 * (n as f64 + 1.0)) * pow;
        pow *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

pub(crate) fn psi1(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_START {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv2 * inv;
    let mut series = inv + 0.5 * inv2;
    for b in BERNOULLI {
        series += b * pow;
        pow *= inv2;
    }
    acc + series
}

pub(crate) fn ln_gamma(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_START {
        shift += x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv;
    let mut series = 0.0;
    for (n, b) in BERNOULLI.iter().enumerate() {
        let k = 2.0 * (n as f64 + 1.0);
        series += b / (k * (k - 1.0)) * pow;
        pow *= inv2;
    }
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series - shift
}

/// Softmax with the maximum subtracted first; never overflows for finite input.
pub fn stable_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// ln(1 + eˣ) without overflow or cancellation.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `clip(softplus(v), 0, cap)` elementwise.
pub fn softplus_clipped(v: &[f64], cap: f64) -> Vec<f64> {
    v.iter().map(|&z| softplus(z).clamp(0.0, cap)).collect()
}

/// Subgradient of [`softplus_clipped`]: σ(z) below the cap, zero at or above it.
pub fn softplus_clipped_grad(z: f64, cap: f64) -> f64 {
    if softplus(z) < cap {
        sigmoid(z)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() <= 1e-10);
        assert!((digamma(2.0).unwrap() - digamma(1.0).unwrap() - 1.0).abs() <= 1e-12);
        // -γ + H_4
        let expected = -EULER_GAMMA + 25.0 / 12.0;
        assert!((digamma(5.0).unwrap() - expected).abs() <= 1e-10);
        assert!((digamma(5.0).unwrap() - 1.506_117_668_4).abs() <= 1e-10);
        // ψ(1/2) = -γ - 2 ln 2
        let half = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - half).abs() <= 1e-10);
    }

    #[test]
    fn log_gamma_reference_values() {
        assert!(log_gamma(1.0).unwrap().abs() <= 1e-10);
        assert!(log_gamma(2.0).unwrap().abs() <= 1e-10);
        assert!((log_gamma(5.0).unwrap() - 24f64.ln()).abs() <= 1e-10);
        let ln_sqrt_pi = 0.5 * std::f64::consts::PI.ln();
        assert!((log_gamma(0.5).unwrap() - ln_sqrt_pi).abs() <= 1e-10);
        // ln(100!) from a direct sum of logs
        let ln_fact: f64 = (1..=100).map(|k| (k as f64).ln()).sum();
        assert!((log_gamma(101.0).unwrap() - ln_fact).abs() <= 1e-9);
    }

    #[test]
    fn trigamma_reference_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - pi2_6).abs() <= 1e-10);
        assert!((trigamma(0.5).unwrap() - 3.0 * pi2_6).abs() <= 1e-10);
    }

    #[test]
    fn trigamma_matches_digamma_derivative() {
        for &x in &[0.3, 1.0, 2.7, 5.9, 6.1, 17.0] {
            let h = 1e-5;
            let fd = (psi(x + h) - psi(x - h)) / (2.0 * h);
            assert!((fd - psi1(x)).abs() < 1e-6 * psi1(x).max(1.0), "x = {x}");
        }
    }

    #[test]
    fn domain_errors() {
        for x in [0.0, -1.0, -0.5, f64::NAN] {
            assert!(matches!(digamma(x), Err(Error::Domain { .. })));
            assert!(matches!(log_gamma(x), Err(Error::Domain { .. })));
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0; 4]), vec![0.25; 4]);
        assert_eq!(stable_softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = stable_softmax(&[1.0, 0.0]);
        assert!((p[0] - 0.731_058_578_6).abs() < 1e-10);
        assert!((p[1] - 0.268_941_421_4).abs() < 1e-10);
    }

    #[test]
    fn softplus_clipped_examples() {
        let out = softplus_clipped(&[0.0, 100.0, -100.0], 5.0);
        assert!((out[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out[1], 5.0);
        assert!(out[2] >= 0.0 && out[2] < 1e-40);
    }

    #[test]
    fn clipped_subgradient() {
        assert_eq!(softplus_clipped_grad(10.0, 5.0), 0.0);
        assert!((softplus_clipped_grad(0.0, 5.0) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn digamma_recurrence(x in 0.1f64..50.0) {
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            prop_assert!((lhs - 1.0 / x).abs() <= 1e-9);
        }

        #[test]
        fn log_gamma_recurrence(x in 0.1f64..50.0) {
            let lhs = log_gamma(x + 1.0).unwrap() - log_gamma(x).unwrap();
            prop_assert!((lhs - x.ln()).abs() <= 1e-9);
        }

        #[test]
        fn softmax_shift_invariance(
            v in proptest::collection::vec(-50.0f64..50.0, 1..10),
            c in -500.0f64..500.0,
        ) {
            let a = stable_softmax(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted);
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softplus_clipped_in_range(z in -1e6f64..1e6, cap in 0.01f64..100.0) {
            let e = softplus_clipped(&[z], cap)[0];
            prop_assert!((0.0..=cap).contains(&e));
        }

        #[test]
        fn softplus_clipped_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let out = softplus_clipped(&[lo, hi], 5.0);
            prop_assert!(out[0] <= out[1]);
        }
    }
}
