//! Tensor-space trilinear resize and center crop, used by the dual-path
//! fusion to bring the coarse path's output onto the fine path's grid.
//! Both are linear maps with exact scatter adjoints.

use crate::error::{MassegError, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps and weights for one output index along one axis.
fn axis_taps(in_extent: usize, out_extent: usize) -> Vec<(usize, usize, f64)> {
    // center-aligned mapping; identity when extents match
    (0..out_extent)
        .map(|i| {
            let src = (i as f64 + 0.5) * in_extent as f64 / out_extent as f64 - 0.5;
            let src = src.max(0.0).min(in_extent as f64 - 1.0);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_extent - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Trilinear (bilinear in 2-D mode) resize of the spatial axes to the given
/// extents.
pub fn trilinear_resize<T: Scalar>(input: &Tensor<T>, target: (usize, usize, usize)) -> Result<Tensor<T>> {
    let (d, h, w) = input.spatial();
    let (od, oh, ow) = target;
    if od == 0 || oh == 0 || ow == 0 {
        return Err(MassegError::ShapeMismatch("resize target extent < 1".into()));
    }
    if input.rank() == 4 && od != 1 {
        return Err(MassegError::ShapeMismatch(
            "rank-4 tensor cannot gain a depth extent".into(),
        ));
    }
    let n = input.batch();
    let c = input.channels();
    let tz = axis_taps(d, od);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Tensor::zeros(&input.shape_like(n, c, od, oh, ow));
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let data = input.data();
    let o = out.data_mut();
    for bc in 0..n * c {
        let ibase = bc * in_plane;
        let obase = bc * out_plane;
        for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let at = |zz: usize, yy: usize, xx: usize| {
                        data[ibase + (zz * h + yy) * w + xx].to_real()
                    };
                    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    o[obase + (z * oh + y) * ow + x] = T::from_real(c0 * (1.0 - fz) + c1 * fz);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `trilinear_resize`: scatters each output gradient back with
/// the interpolation weights.
pub fn trilinear_resize_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut grad_in = Tensor::<T>::zeros(input_shape);
    let (d, h, w) = grad_in.spatial();
    let (od, oh, ow) = grad_out.spatial();
    let n = grad_out.batch();
    let c = grad_out.channels();
    if grad_in.batch() != n || grad_in.channels() != c {
        return Err(MassegError::ShapeMismatch(format!(
            "resize adjoint: {:?} vs {:?}",
            input_shape,
            grad_out.shape()
        )));
    }
    let tz = axis_taps(d, od);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let go = grad_out.data();
    let gi = grad_in.data_mut();
    for bc in 0..n * c {
        let ibase = bc * in_plane;
        let obase = bc * out_plane;
        for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = go[obase + (z * oh + y) * ow + x].to_real();
                    let mut add = |zz: usize, yy: usize, xx: usize, wt: f64| {
                        let i = ibase + (zz * h + yy) * w + xx;
                        gi[i] += T::from_real(g * wt);
                    };
                    add(z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                    add(z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx);
                    add(z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx));
                    add(z0, y1, x1, (1.0 - fz) * fy * fx);
                    add(z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx));
                    add(z1, y0, x1, fz * (1.0 - fy) * fx);
                    add(z1, y1, x0, fz * fy * (1.0 - fx));
                    add(z1, y1, x1, fz * fy * fx);
                }
            }
        }
    }
    Ok(grad_in)
}

/// Extracts the centered spatial sub-region with the given extents.
pub fn center_crop<T: Scalar>(input: &Tensor<T>, target: (usize, usize, usize)) -> Result<Tensor<T>> {
    let (d, h, w) = input.spatial();
    let (cd, ch_, cw) = target;
    if cd > d || ch_ > h || cw > w || cd == 0 || ch_ == 0 || cw == 0 {
        return Err(MassegError::ShapeMismatch(format!(
            "center_crop target ({cd},{ch_},{cw}) outside input ({d},{h},{w})"
        )));
    }
    let (z0, y0, x0) = ((d - cd) / 2, (h - ch_) / 2, (w - cw) / 2);
    let n = input.batch();
    let c = input.channels();
    let mut out = Tensor::zeros(&input.shape_like(n, c, cd, ch_, cw));
    let in_plane = d * h * w;
    let out_plane = cd * ch_ * cw;
    let data = input.data();
    let o = out.data_mut();
    for bc in 0..n * c {
        for z in 0..cd {
            for y in 0..ch_ {
                let src = bc * in_plane + ((z + z0) * h + y + y0) * w + x0;
                let dst = bc * out_plane + (z * ch_ + y) * cw;
                o[dst..dst + cw].copy_from_slice(&data[src..src + cw]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of `center_crop`: embeds the gradient back, zero elsewhere.
pub fn center_crop_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut grad_in = Tensor::<T>::zeros(input_shape);
    let (d, h, w) = grad_in.spatial();
    let (cd, ch_, cw) = grad_out.spatial();
    if cd > d || ch_ > h || cw > w {
        return Err(MassegError::ShapeMismatch("crop adjoint larger than input".into()));
    }
    let (z0, y0, x0) = ((d - cd) / 2, (h - ch_) / 2, (w - cw) / 2);
    let n = grad_out.batch();
    let c = grad_out.channels();
    let in_plane = d * h * w;
    let out_plane = cd * ch_ * cw;
    let go = grad_out.data();
    let gi = grad_in.data_mut();
    for bc in 0..n * c {
        for z in 0..cd {
            for y in 0..ch_ {
                let dst = bc * in_plane + ((z + z0) * h + y + y0) * w + x0;
                let src = bc * out_plane + (z * ch_ + y) * cw;
                gi[dst..dst + cw].copy_from_slice(&go[src..src + cw]);
            }
        }
    }
    Ok(grad_in)
}
