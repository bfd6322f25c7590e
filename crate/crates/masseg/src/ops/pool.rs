//! 2x2(x2) max pooling with stride 2. The argmax map records, per output
//! voxel, the linear index of the winning input voxel; ties break toward
//! the lowest linear index so results are deterministic.

use crate::error::{MassegError, Result};
use crate::tensor::{check_rank, Scalar, Tensor};

pub fn max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    check_rank(input, "max_pool input")?;
    let n = input.batch();
    let c = input.channels();
    let (d, h, w) = input.spatial();
    let pool_d = input.rank() == 5;
    if (pool_d && d % 2 != 0) || h % 2 != 0 || w % 2 != 0 {
        return Err(MassegError::ShapeMismatch(format!(
            "max_pool requires even spatial extents, got {:?}",
            input.shape()
        )));
    }
    let (od, oh, ow) = (if pool_d { d / 2 } else { d }, h / 2, w / 2);
    let out_shape = input.shape_like(n, c, od, oh, ow);
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0usize; out.len()];
    let kd = if pool_d { 2 } else { 1 };

    let in_data = input.data();
    let out_data = out.data_mut();
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    for bi in 0..n {
        for ch in 0..c {
            let ibase = (bi * c + ch) * in_plane;
            let obase = (bi * c + ch) * out_plane;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for dz in 0..kd {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let iz = z * kd + dz;
                                    let iy = y * 2 + dy;
                                    let ix = x * 2 + dx;
                                    let idx = ibase + (iz * h + iy) * w + ix;
                                    let v = in_data[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let oi = obase + (z * oh + y) * ow + x;
                        out_data[oi] = best;
                        argmax[oi] = best_idx;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient entirely to its recorded argmax position.
pub fn max_pool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(MassegError::ShapeMismatch(format!(
            "argmax length {} != grad_out length {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        gi[src] += g;
    }
    Ok(grad_in)
}
