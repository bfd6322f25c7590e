//! Channel concatenation for skip connections, with the split adjoint.

use crate::error::{MassegError, Result};
use crate::tensor::{Scalar, Tensor};

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != b.rank() || a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(MassegError::ShapeMismatch(format!(
            "concat_channels: non-channel extents differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.batch();
    let (ca, cb) = (a.channels(), b.channels());
    let (d, h, w) = a.spatial();
    let plane = a.spatial_len();
    let out_shape = a.shape_like(n, ca + cb, d, h, w);
    let mut out = Tensor::zeros(&out_shape);
    let o = out.data_mut();
    for bi in 0..n {
        let dst = bi * (ca + cb) * plane;
        let sa = bi * ca * plane;
        let sb = bi * cb * plane;
        o[dst..dst + ca * plane].copy_from_slice(&a.data()[sa..sa + ca * plane]);
        o[dst + ca * plane..dst + (ca + cb) * plane].copy_from_slice(&b.data()[sb..sb + cb * plane]);
    }
    Ok(out)
}

/// Adjoint of `concat_channels`: splits a tensor back into the first
/// `channels_a` channels and the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, channels_a: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = t.channels();
    if channels_a == 0 || channels_a >= c {
        return Err(MassegError::ShapeMismatch(format!(
            "split_channels: cannot split {c} channels at {channels_a}"
        )));
    }
    let cb = c - channels_a;
    let n = t.batch();
    let (d, h, w) = t.spatial();
    let plane = t.spatial_len();
    let mut a = Tensor::zeros(&t.shape_like(n, channels_a, d, h, w));
    let mut b = Tensor::zeros(&t.shape_like(n, cb, d, h, w));
    for bi in 0..n {
        let src = bi * c * plane;
        let da = bi * channels_a * plane;
        let db = bi * cb * plane;
        a.data_mut()[da..da + channels_a * plane]
            .copy_from_slice(&t.data()[src..src + channels_a * plane]);
        b.data_mut()[db..db + cb * plane]
            .copy_from_slice(&t.data()[src + channels_a * plane..src + c * plane]);
    }
    Ok((a, b))
}
