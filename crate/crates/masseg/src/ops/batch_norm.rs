//! Batch normalization over (batch, spatial) per channel.
//!
//! Running statistics store the biased batch variance so that copying them
//! verbatim makes infer mode reproduce train mode exactly.

use crate::error::{MassegError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_real(1e-5),
            momentum: T::from_real(0.9),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check<U: Scalar>(&self, input: &Tensor<U>) -> Result<()> {
        if input.channels() != self.channels() {
            return Err(MassegError::ShapeMismatch(format!(
                "batch_norm: input channels {} != state channels {}",
                input.channels(),
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Cache needed by the adjoint.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn channel_moments<T: Scalar>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let n = input.batch();
    let c = input.channels();
    let plane = input.spatial_len();
    let count = T::from_real((n * plane) as f64);
    let data = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..n {
            let base = (bi * c + ch) * plane;
            for &v in &data[base..base + plane] {
                s += v;
            }
        }
        mean[ch] = s / count;
        let mut sq = T::zero();
        for bi in 0..n {
            let base = (bi * c + ch) * plane;
            for &v in &data[base..base + plane] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / count;
    }
    (mean, var)
}

/// Train mode: normalize with batch statistics and update the running ones.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    state.check(input)?;
    let (mean, var) = channel_moments(input);
    let c = state.channels();
    for ch in 0..c {
        state.running_mean[ch] =
            state.momentum * state.running_mean[ch] + (T::one() - state.momentum) * mean[ch];
        state.running_var[ch] =
            state.momentum * state.running_var[ch] + (T::one() - state.momentum) * var[ch];
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + state.epsilon).sqrt())
        .collect();
    let (out, normalized) = apply(input, state, &mean, &inv_std);
    Ok((out, BatchNormCache { normalized, inv_std }))
}

/// Infer mode: normalize with the running statistics.
pub fn batch_norm_infer<T: Scalar>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<Tensor<T>> {
    state.check(input)?;
    let inv_std: Vec<T> = state
        .running_var
        .iter()
        .map(|&v| T::one() / (v + state.epsilon).sqrt())
        .collect();
    let (out, _) = apply(input, state, &state.running_mean, &inv_std);
    Ok(out)
}

fn apply<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let n = input.batch();
    let c = input.channels();
    let plane = input.spatial_len();
    let mut out = Tensor::zeros(input.shape());
    let mut normalized = Tensor::zeros(input.shape());
    let data = input.data();
    {
        let o = out.data_mut();
        let xn = normalized.data_mut();
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (state.gamma[ch], state.beta[ch]);
                for i in base..base + plane {
                    let z = (data[i] - m) * is;
                    xn[i] = z;
                    o[i] = g * z + b;
                }
            }
        }
    }
    (out, normalized)
}

/// Adjoint covering input, gamma, and beta (train-mode statistics).
pub fn batch_norm_backward<T: Scalar>(
    state: &BatchNormState<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(MassegError::ShapeMismatch(format!(
            "batch_norm_backward: grad shape {:?} != cached shape {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let n = grad_out.batch();
    let c = grad_out.channels();
    let plane = grad_out.spatial_len();
    let count = T::from_real((n * plane) as f64);
    let go = grad_out.data();
    let xn = cache.normalized.data();

    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_in = Tensor::zeros(grad_out.shape());
    let gi = grad_in.data_mut();
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for bi in 0..n {
            let base = (bi * c + ch) * plane;
            for i in base..base + plane {
                sum_g += go[i];
                sum_gx += go[i] * xn[i];
            }
        }
        grad_beta[ch] = sum_g;
        grad_gamma[ch] = sum_gx;
        let mean_g = sum_g / count;
        let mean_gx = sum_gx / count;
        let scale = state.gamma[ch] * cache.inv_std[ch];
        for bi in 0..n {
            let base = (bi * c + ch) * plane;
            for i in base..base + plane {
                gi[i] = scale * (go[i] - mean_g - xn[i] * mean_gx);
            }
        }
    }
    Ok((grad_in, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    #[test]
    fn zero_mean_unit_variance_is_fixed_point() {
        // channel values chosen with exact zero mean, unit (biased) variance
        let data = vec![1.0f32, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let input = Tensor::from_vec(&[1, 2, 1, 2, 2], data.clone()).unwrap();
        let mut state = BatchNormState::<f32>::new(2);
        let (out, _) = batch_norm_train(&input, &mut state).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let input = Tensor::from_vec(
            &[2, 2, 2, 2, 2],
            (0..32).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap();
        let mut state = BatchNormState::<f32>::new(2);
        state.gamma = vec![0.0, 0.0];
        state.beta = vec![0.25, -0.75];
        let (out, _) = batch_norm_train(&input, &mut state).unwrap();
        let plane = 8;
        for bi in 0..2 {
            for ch in 0..2 {
                let base = (bi * 2 + ch) * plane;
                for &v in &out.data()[base..base + plane] {
                    assert_eq!(v, state.beta[ch]);
                }
            }
        }
    }

    #[test]
    fn train_mode_moments_normalized() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let input = Tensor::from_vec(
            &[2, 3, 4, 4, 4],
            (0..2 * 3 * 64).map(|_| rng.gen::<f64>() * 5.0 - 1.0).collect(),
        )
        .unwrap();
        let mut state = BatchNormState::<f64>::new(3);
        let (out, _) = batch_norm_train(&input, &mut state).unwrap();
        let (mean, var) = channel_moments(&out);
        for ch in 0..3 {
            assert!(mean[ch].abs() < 1e-5, "mean {}", mean[ch]);
            assert!((var[ch] - 1.0).abs() < 1e-4, "var {}", var[ch]);
        }
    }

    #[test]
    fn infer_with_copied_batch_stats_matches_train() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let input = Tensor::from_vec(
            &[2, 2, 2, 4, 4],
            (0..128).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap();
        let mut state = BatchNormState::<f32>::new(2);
        let (mean, var) = channel_moments(&input);
        let (train_out, _) = batch_norm_train(&input, &mut state).unwrap();
        state.running_mean = mean;
        state.running_var = var;
        let infer_out = batch_norm_infer(&input, &state).unwrap();
        assert_eq!(train_out.data(), infer_out.data());
    }
}
