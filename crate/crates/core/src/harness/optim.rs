//! Adam with bias-corrected moments and no weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators, one buffer per parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

pub fn optimizer_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    settings: &AdamSettings,
) -> Result<()> {
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.m.len()
        && params.iter().zip(grads).zip(&state.m).all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(Error::ShapeMismatch {
            op: "optimizer_step",
            left: params.iter().map(|p| p.len()).collect(),
            right: grads.iter().map(|g| g.len()).collect(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamSettings { beta1, beta2, epsilon } = *settings;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::new([3]);
        for _ in 0..5 {
            optimizer_step(&mut [&mut p], &[&[0.0; 3]], &mut state, 0.1, &AdamSettings::default()).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut p = vec![0.0];
            let mut state = AdamState::new([1]);
            optimizer_step(&mut [&mut p], &[&[g]], &mut state, 1e-3, &AdamSettings::default()).unwrap();
            // |g| / (|g| + ε) ≈ 1
            assert!((p[0].abs() - 1e-3).abs() < 1e-8, "{g}: {}", p[0]);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let mut p = vec![0.0];
        let mut state = AdamState::new([1]);
        for _ in 0..50 {
            optimizer_step(&mut [&mut p], &[&[2.0]], &mut state, 0.01, &AdamSettings::default()).unwrap();
        }
        assert!((p[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut state = AdamState::new([2]);
        let err = optimizer_step(&mut [&mut p], &[&[1.0]], &mut state, 0.1, &AdamSettings::default());
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        assert_eq!(state.step, 0);
    }
}
