//! Soft Dice loss over foreground probabilities.

use crate::error::{MassegError, Result};
use crate::tensor::{Scalar, Tensor};

/// Computes the smoothed soft Dice loss between foreground probabilities and a
/// binary target, returning the loss and the analytic gradient with respect to
/// the probabilities.
///
/// The loss is `1 - (2*sum(p*t) + sigma) / (sum(p) + sum(t) + sigma)`. The
/// smoothing term `sigma` keeps the loss finite on empty masks.
pub fn soft_dice_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    sigma: f64,
) -> Result<(f64, Tensor<T>)> {
    if probs.shape() != target.shape() {
        return Err(MassegError::ShapeMismatch(format!(
            "soft_dice_loss: probs {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    if sigma <= 0.0 {
        return Err(MassegError::Config(
            "soft_dice_loss: smoothing term must be positive".into(),
        ));
    }
    let mut intersect = 0.0f64;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    for (p, t) in probs.data().iter().zip(target.data().iter()) {
        let p = p.to_real();
        let t = t.to_real();
        intersect += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = 2.0 * intersect + sigma;
    let den = sum_p + sum_t + sigma;
    let loss = 1.0 - num / den;

    let den_sq = den * den;
    let grad_data = target
        .data()
        .iter()
        .map(|t| T::from_real((num - 2.0 * t.to_real() * den) / den_sq))
        .collect();
    let grad = Tensor::from_vec(probs.shape(), grad_data)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(shape: &[usize], ones: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for &i in ones {
            data[i] = 1.0;
        }
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn perfect_overlap_is_near_zero() {
        let t = binary(&[1, 1, 4, 4, 4], &[0, 5, 9, 33]);
        let (loss, _) = soft_dice_loss(&t, &t, 1.0).unwrap();
        assert!(loss.abs() < 0.2, "loss {loss}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn disjoint_is_near_one() {
        let t = binary(&[1, 1, 4, 4, 4], &(0..32).collect::<Vec<_>>());
        let p = t.map(|v| 1.0 - v);
        let (loss, _) = soft_dice_loss(&p, &t, 1.0).unwrap();
        assert!(loss > 0.95, "loss {loss}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 1, 2, 2, 4]);
        assert!(matches!(
            soft_dice_loss(&a, &b, 1.0),
            Err(MassegError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let shape = [1, 1, 3, 4, 5];
        let n: usize = shape.iter().product();
        let probs = Tensor::from_vec(
            &shape,
            (0..n).map(|_| rng.gen_range(0.01..0.99)).collect(),
        )
        .unwrap();
        let target = Tensor::from_vec(
            &shape,
            (0..n)
                .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let (_, grad) = soft_dice_loss(&probs, &target, 1.0).unwrap();
        let step = 1e-4;
        for i in 0..n {
            let mut up = probs.clone();
            up.data_mut()[i] += step;
            let mut dn = probs.clone();
            dn.data_mut()[i] -= step;
            let (lu, _) = soft_dice_loss(&up, &target, 1.0).unwrap();
            let (ld, _) = soft_dice_loss(&dn, &target, 1.0).unwrap();
            let fd = (lu - ld) / (2.0 * step);
            let an = grad.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-12);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "coord {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn monotone_in_intersection() {
        // Moving probability mass from a background voxel to a foreground
        // voxel (sum(p) fixed) must not increase the loss.
        let target = binary(&[1, 1, 2, 2, 2], &[0, 1]);
        let mut probs = Tensor::filled(&[1, 1, 2, 2, 2], 0.5);
        let (l0, _) = soft_dice_loss(&probs, &target, 1.0).unwrap();
        probs.data_mut()[0] += 0.3;
        probs.data_mut()[7] -= 0.3;
        let (l1, _) = soft_dice_loss(&probs, &target, 1.0).unwrap();
        assert!(l1 < l0);
    }
}
