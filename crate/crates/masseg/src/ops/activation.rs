//! ReLU and the channel softmax that turns final logits into per-voxel
//! class probabilities.

use crate::error::{MassegError, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive
/// (subgradient 0 at exactly 0).
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(MassegError::ShapeMismatch(format!(
            "relu_backward: {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let mut out = Tensor::zeros(input.shape());
    let o = out.data_mut();
    for (i, (&x, &g)) in input.data().iter().zip(grad_out.data()).enumerate() {
        if x > T::zero() {
            o[i] = g;
        }
    }
    Ok(out)
}

/// Per-voxel softmax over the channel axis, computed with max-subtraction.
pub fn softmax_over_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let c = input.channels();
    if c < 2 {
        return Err(MassegError::ShapeMismatch(format!(
            "softmax requires channel extent >= 2, got {c}"
        )));
    }
    let n = input.batch();
    let plane = input.spatial_len();
    let mut out = Tensor::zeros(input.shape());
    let data = input.data();
    let o = out.data_mut();
    for bi in 0..n {
        let base = bi * c * plane;
        for v in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(data[base + ch * plane + v]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * plane + v] - m).exp();
                o[base + ch * plane + v] = e;
                sum += e;
            }
            for ch in 0..c {
                o[base + ch * plane + v] = o[base + ch * plane + v] / sum;
            }
        }
    }
    Ok(out)
}

/// Adjoint of the channel softmax; `probs` is the forward output.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != grad_out.shape() {
        return Err(MassegError::ShapeMismatch(format!(
            "softmax_backward: {:?} vs {:?}",
            probs.shape(),
            grad_out.shape()
        )));
    }
    let n = probs.batch();
    let c = probs.channels();
    let plane = probs.spatial_len();
    let mut out = Tensor::zeros(probs.shape());
    let p = probs.data();
    let g = grad_out.data();
    let o = out.data_mut();
    for bi in 0..n {
        let base = bi * c * plane;
        for v in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + v;
                dot += p[i] * g[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + v;
                o[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5f32, 1.0, 3.0, 7.25]).unwrap();
        assert_eq!(relu(&input).data(), input.data());
    }

    #[test]
    fn softmax_equal_logits() {
        let input = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![0.7f32, 0.7]).unwrap();
        let p = softmax_over_channels(&input).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-7);
        assert!((p.data()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let input = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![1000.0f32, 0.0]).unwrap();
        let p = softmax_over_channels(&input).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(p.data()[1], 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(21);
        let input = Tensor::from_vec(
            &[2, 3, 2, 3, 3],
            (0..2 * 3 * 18).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect(),
        )
        .unwrap();
        let p = softmax_over_channels(&input).unwrap();
        let plane = 18;
        for bi in 0..2 {
            for v in 0..plane {
                let s: f64 = (0..3).map(|ch| p.data()[(bi * 3 + ch) * plane + v]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_single_channel_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(softmax_over_channels(&input).is_err());
    }
}
