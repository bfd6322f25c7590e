//! Adam optimizer with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::error::{MassegError, Result};
use crate::tensor::Scalar;

/// Adam accumulator state. Moment buffers are allocated lazily per parameter
/// name on first use and always kept in `f64` so that training precision does
/// not degrade the optimizer statistics.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// Creates a state with the optimizer's default hyperparameters
    /// (alpha 1e-3, beta1 0.9, beta2 0.999, epsilon 1e-8).
    pub fn new(alpha: f64) -> Self {
        AdamState {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one bias-corrected update to every named parameter buffer.
    /// The step counter advances exactly once per call regardless of how many
    /// parameters are touched.
    pub fn step_named<T: Scalar>(
        &mut self,
        mut params: impl FnMut(&mut dyn FnMut(&str, &mut [T])),
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let mut failure: Option<MassegError> = None;
        params(&mut |name, data| {
            if failure.is_some() {
                return;
            }
            let grad = match grads.get(name) {
                Some(g) => g,
                None => {
                    failure = Some(MassegError::State(format!(
                        "adam_step: no gradient for parameter {name}"
                    )));
                    return;
                }
            };
            if grad.len() != data.len() {
                failure = Some(MassegError::ShapeMismatch(format!(
                    "adam_step: parameter {name} has {} entries but gradient has {}",
                    data.len(),
                    grad.len()
                )));
                return;
            }
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; data.len()]);
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; data.len()]);
            for i in 0..data.len() {
                let g = grad[i].to_real();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let w = data[i].to_real() - self.alpha * m_hat / (v_hat.sqrt() + self.epsilon);
                data[i] = T::from_real(w);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Single-buffer convenience wrapper used by scalar simulations and tests.
    pub fn step_slice<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), grads.to_vec());
        self.step_named(
            |visit| visit("w", params),
            &map,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_alpha_sign() {
        let mut state = AdamState::new(1e-3);
        let mut w = [1.0f64];
        state.step_slice(&mut w, &[2.0]).unwrap();
        assert!((w[0] - 0.999).abs() < 1e-6, "w {}", w[0]);
    }

    #[test]
    fn first_step_direction_is_negative_sign_of_gradient() {
        let mut state = AdamState::new(1e-3);
        let mut w = vec![0.0f64; 6];
        let g = vec![2.0, -0.5, 1e-2, -1e-2, 3.0, -7.0];
        state.step_slice(&mut w, &g).unwrap();
        for (wi, gi) in w.iter().zip(g.iter()) {
            if gi.abs() > 1e-3 {
                assert!((wi + 1e-3 * gi.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut state = AdamState::new(1e-3);
        let mut w = [0.25f32, -1.5];
        for _ in 0..50 {
            state.step_slice(&mut w, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(w, [0.25, -1.5]);
        assert_eq!(state.step, 50);
    }

    #[test]
    fn quadratic_descends_below_threshold() {
        let mut state = AdamState::new(1e-3);
        let mut w = [1.0f64];
        let mut envelope = w[0].abs();
        for _ in 0..200 {
            let g = [2.0 * w[0]];
            state.step_slice(&mut w, &g).unwrap();
            let mag = w[0].abs();
            assert!(mag <= envelope + 1e-12, "magnitude rose: {mag} > {envelope}");
            envelope = mag;
        }
        assert!(w[0].abs() < 0.9, "w {}", w[0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut state = AdamState::new(1e-3);
        let mut w = [1.0f64];
        let grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let err = state.step_named(|visit| visit("w", &mut w), &grads);
        assert!(matches!(err, Err(MassegError::State(_))));
    }
}
