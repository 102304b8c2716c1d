use serde::{Deserialize, Serialize};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so that gradients that are zero on
/// both sides do not divide by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Central finite differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
///
/// Evaluation failures of `f` are returned unchanged.
pub fn finite_difference_gradient<F, E>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub num_points_checked: usize,
    pub points_skipped_near_nonsmoothness: usize,
}

impl GradientCheckReport {
    /// Folds one point's analytic/numeric pair into the running maxima.
    pub fn record(&mut self, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR);
            self.max_abs_error = self.max_abs_error.max(abs);
            self.max_rel_error = self.max_rel_error.max(rel);
        }
        self.num_points_checked += 1;
    }

    pub fn skip(&mut self) {
        self.points_skipped_near_nonsmoothness += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn quadratic() {
        let g = finite_difference_gradient(
            |x: &[f64]| Ok::<_, Infallible>(x.iter().map(|v| v * v).sum()),
            &[1.0, 2.0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant() {
        let g = finite_difference_gradient(|_: &[f64]| Ok::<_, Infallible>(3.5), &[0.3, -7.0, 2.0], DEFAULT_STEP).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn sine() {
        let g = finite_difference_gradient(
            |x: &[f64]| Ok::<_, Infallible>(x.iter().map(|v| v.sin()).sum()),
            &[0.0, std::f64::consts::FRAC_PI_2],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && g[1].abs() < 1e-6);
    }

    #[test]
    fn evaluation_failure_propagates() {
        let r = finite_difference_gradient(|_: &[f64]| Err::<f64, _>("boom"), &[1.0], DEFAULT_STEP);
        assert_eq!(r, Err("boom"));
    }

    #[test]
    fn report_tracks_maxima() {
        let mut r = GradientCheckReport::default();
        r.record(&[1.0, 0.0], &[1.1, 0.0]);
        r.skip();
        assert!((r.max_abs_error - 0.1).abs() < 1e-12);
        assert!((r.max_rel_error - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!((r.num_points_checked, r.points_skipped_near_nonsmoothness), (1, 1));
    }
}
