//! Cross-correlation and transposed (up-) convolution with hand-written
//! adjoints.
//!
//! Tensors are normalized to an internal 5-D view (batch, channel, depth,
//! height, width); 2-D mode is depth 1 with a depth-1 kernel. The stride-1
//! path keeps the innermost loop contiguous over the width axis so it
//! vectorizes.

use crate::error::{MassegError, Result};
use crate::tensor::{check_rank, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so stride-1 output extents equal input extents.
    Same,
    Valid,
}

/// Weights of one convolution layer. Kernel shape is
/// (out-channels, in-channels, k, ..., k) with spatial rank 2 or 3.
#[derive(Debug, Clone)]
pub struct ConvWeights<T> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: Vec<usize>,
    pub padding: Padding,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Vec<T>, stride: usize, padding: Padding) -> Result<Self> {
        check_rank(&kernel, "conv kernel")?;
        if kernel.shape()[0] != bias.len() {
            return Err(MassegError::ShapeMismatch(format!(
                "bias length {} != out-channels {}",
                bias.len(),
                kernel.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(MassegError::Config("stride must be >= 1".into()));
        }
        let spatial_rank = kernel.rank() - 2;
        Ok(ConvWeights {
            kernel,
            bias,
            stride: vec![stride; spatial_rank],
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// Kernel spatial extents as (kd, kh, kw), depth 1 in 2-D mode.
    pub fn kernel_spatial(&self) -> (usize, usize, usize) {
        let s = self.kernel.shape();
        match s.len() {
            4 => (1, s[2], s[3]),
            _ => (s[2], s[3], s[4]),
        }
    }

    fn stride3(&self) -> (usize, usize, usize) {
        match self.stride.len() {
            2 => (1, self.stride[0], self.stride[1]),
            _ => (self.stride[0], self.stride[1], self.stride[2]),
        }
    }

    /// Zero padding per spatial axis (lower side; symmetric).
    fn pad3(&self) -> Result<(usize, usize, usize)> {
        match self.padding {
            Padding::Valid => Ok((0, 0, 0)),
            Padding::Same => {
                let (kd, kh, kw) = self.kernel_spatial();
                if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
                    return Err(MassegError::Config(
                        "same padding requires odd kernel extents".into(),
                    ));
                }
                Ok(((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2))
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<()> {
    check_rank(input, "conv input")?;
    if input.rank() != w.kernel.rank() {
        return Err(MassegError::ShapeMismatch(format!(
            "input rank {} does not match kernel rank {} (shapes {:?} vs {:?})",
            input.rank(),
            w.kernel.rank(),
            input.shape(),
            w.kernel.shape()
        )));
    }
    if input.channels() != w.in_channels() {
        return Err(MassegError::ShapeMismatch(format!(
            "input channels {} != kernel in-channels {} (shapes {:?} vs {:?})",
            input.channels(),
            w.in_channels(),
            input.shape(),
            w.kernel.shape()
        )));
    }
    Ok(())
}

fn conv_out_extent(inp: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return Err(MassegError::ShapeMismatch(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation with bias added per output channel.
pub fn convolve<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    check_conv_shapes(input, w)?;
    let (n, _cin) = (input.batch(), input.channels());
    let (d, h, wd) = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (sd, sh, sw) = w.stride3();
    let (pd, ph, pw) = w.pad3()?;
    let od = conv_out_extent(d, kd, pd, sd)?;
    let oh = conv_out_extent(h, kh, ph, sh)?;
    let ow = conv_out_extent(wd, kw, pw, sw)?;
    let cout = w.out_channels();

    let out_shape = input.shape_like(n, cout, od, oh, ow);
    let mut out = Tensor::zeros(&out_shape);
    for (oc, &b) in w.bias.iter().enumerate() {
        let plane = od * oh * ow;
        for bi in 0..n {
            let base = (bi * cout + oc) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v = b;
            }
        }
    }

    if (sd, sh, sw) == (1, 1, 1) {
        conv_stride1(input, w, (pd, ph, pw), &mut out);
    } else {
        conv_general(input, w, (pd, ph, pw), (sd, sh, sw), &mut out);
    }
    Ok(out)
}

/// Zero-padded scratch copy of all channel planes of one batch element.
/// Removes every boundary test from the stride-1 inner loops.
struct PaddedPlanes<T> {
    data: Vec<T>,
    pd_: usize,
    ph_: usize,
    pw_: usize,
    plane: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> PaddedPlanes<T> {
    fn new(channels: usize, (d, h, w): (usize, usize, usize), (pd, ph, pw): (usize, usize, usize)) -> Self {
        let (ph_, pw_) = (h + 2 * ph, w + 2 * pw);
        let pd_ = d + 2 * pd;
        PaddedPlanes {
            data: vec![T::zero(); channels * pd_ * ph_ * pw_],
            pd_,
            ph_,
            pw_,
            plane: pd_ * ph_ * pw_,
            h,
            w,
        }
    }

    /// Copies `channels` contiguous planes starting at `src_base` into the
    /// padded interior.
    fn fill(&mut self, src: &[T], src_base: usize, channels: usize, (pd, ph, pw): (usize, usize, usize)) {
        let d = self.pd_ - 2 * pd;
        for c in 0..channels {
            let sbase = src_base + c * d * self.h * self.w;
            let dbase = c * self.plane;
            for z in 0..d {
                for y in 0..self.h {
                    let srow = sbase + (z * self.h + y) * self.w;
                    let drow = dbase + ((z + pd) * self.ph_ + y + ph) * self.pw_ + pw;
                    self.data[drow..drow + self.w].copy_from_slice(&src[srow..srow + self.w]);
                }
            }
        }
    }

    fn row(&self, c: usize, z: usize, y: usize) -> &[T] {
        let start = c * self.plane + (z * self.ph_ + y) * self.pw_;
        &self.data[start..start + self.pw_]
    }
}

/// `acc[x] += w0*row[x] + w1*row[x+1] + w2*row[x+2]`: the three width taps of
/// one kernel row fused into a single pass.
#[inline]
fn axpy3<T: Scalar>(acc: &mut [T], row: &[T], w0: T, w1: T, w2: T) {
    let n = acc.len();
    let r0 = &row[..n];
    let r1 = &row[1..n + 1];
    let r2 = &row[2..n + 2];
    for i in 0..n {
        acc[i] += w0 * r0[i] + w1 * r1[i] + w2 * r2[i];
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], row: &[T], wt: T) {
    for (a, &r) in acc.iter_mut().zip(row) {
        *a += wt * r;
    }
}

/// Stride-1 path: per batch element the input is copied once into a padded
/// scratch buffer, then every output row is accumulated in a stack buffer and
/// written exactly once.
fn conv_stride1<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    (pd, ph, pw): (usize, usize, usize),
    out: &mut Tensor<T>,
) {
    let n = input.batch();
    let cin = input.channels();
    let cout = w.out_channels();
    let spatial = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (od, oh, ow) = out.spatial();
    let in_plane = spatial.0 * spatial.1 * spatial.2;
    let out_plane = od * oh * ow;
    let kvol = kd * kh * kw;
    let in_data = input.data();
    let kdata = w.kernel.data();
    let out_data = out.data_mut();

    let mut padded = PaddedPlanes::new(cin, spatial, (pd, ph, pw));
    let mut buf = vec![T::zero(); ow];
    for bi in 0..n {
        padded.fill(in_data, bi * cin * in_plane, cin, (pd, ph, pw));
        for oc in 0..cout {
            let obase = (bi * cout + oc) * out_plane;
            for z in 0..od {
                for y in 0..oh {
                    let orow = obase + (z * oh + y) * ow;
                    buf.copy_from_slice(&out_data[orow..orow + ow]);
                    for ic in 0..cin {
                        let kbase = (oc * cin + ic) * kvol;
                        for kz in 0..kd {
                            for ky in 0..kh {
                                let prow = padded.row(ic, z + kz, y + ky);
                                let krow = kbase + (kz * kh + ky) * kw;
                                if kw == 3 {
                                    axpy3(&mut buf, prow, kdata[krow], kdata[krow + 1], kdata[krow + 2]);
                                } else {
                                    for kx in 0..kw {
                                        axpy(&mut buf, &prow[kx..kx + ow], kdata[krow + kx]);
                                    }
                                }
                            }
                        }
                    }
                    out_data[orow..orow + ow].copy_from_slice(&buf);
                }
            }
        }
    }
}

fn conv_general<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    (pd, ph, pw): (usize, usize, usize),
    (sd, sh, sw): (usize, usize, usize),
    out: &mut Tensor<T>,
) {
    let n = input.batch();
    let cin = input.channels();
    let cout = w.out_channels();
    let (d, h, wd) = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (od, oh, ow) = out.spatial();
    let in_plane = d * h * wd;
    let out_plane = od * oh * ow;
    let kvol = kd * kh * kw;
    let in_data = input.data();
    let kdata = w.kernel.data();
    let out_data = out.data_mut();

    for bi in 0..n {
        for oc in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = T::zero();
                        for ic in 0..cin {
                            let ibase = (bi * cin + ic) * in_plane;
                            let kbase = (oc * cin + ic) * kvol;
                            for kz in 0..kd {
                                let iz = (z * sd + kz) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (y * sh + ky) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (x * sw + kx) as isize - pw as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += kdata[kbase + (kz * kh + ky) * kw + kx]
                                            * in_data[ibase
                                                + (iz as usize * h + iy as usize) * wd
                                                + ix as usize];
                                    }
                                }
                            }
                        }
                        out_data[(bi * cout + oc) * out_plane + (z * oh + y) * ow + x] += acc;
                    }
                }
            }
        }
    }
}

/// `[sum g[x]*p[x], sum g[x]*p[x+1], sum g[x]*p[x+2]]` with four accumulator
/// lanes per tap: the three width taps of one kernel row in a single pass.
#[inline]
fn dot3_lanes<T: Scalar>(g: &[T], p: &[T]) -> [T; 3] {
    let n = g.len();
    let (p0, p1, p2) = (&p[..n], &p[1..n + 1], &p[2..n + 2]);
    let mut lanes = [[T::zero(); 4]; 3];
    let mut cg = g.chunks_exact(4);
    let mut c0 = p0.chunks_exact(4);
    let mut c1 = p1.chunks_exact(4);
    let mut c2 = p2.chunks_exact(4);
    for (((a, b0), b1), b2) in cg.by_ref().zip(c0.by_ref()).zip(c1.by_ref()).zip(c2.by_ref()) {
        for l in 0..4 {
            lanes[0][l] += a[l] * b0[l];
            lanes[1][l] += a[l] * b1[l];
            lanes[2][l] += a[l] * b2[l];
        }
    }
    let mut out = [T::zero(); 3];
    for k in 0..3 {
        out[k] = (lanes[k][0] + lanes[k][1]) + (lanes[k][2] + lanes[k][3]);
    }
    for (i, &gv) in cg.remainder().iter().enumerate() {
        out[0] += gv * c0.remainder()[i];
        out[1] += gv * c1.remainder()[i];
        out[2] += gv * c2.remainder()[i];
    }
    out
}

/// Dot product with four accumulator lanes so the compiler can vectorize the
/// reduction without reassociating a single serial chain.
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in chunks_a.by_ref().zip(chunks_b.by_ref()) {
        for l in 0..4 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        acc += x * y;
    }
    acc
}

/// Adjoint of `convolve`: gradients w.r.t. input, kernel, and bias.
pub fn convolve_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    check_conv_shapes(input, w)?;
    let n = input.batch();
    let cin = input.channels();
    let cout = w.out_channels();
    let (d, h, wd) = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (sd, sh, sw) = w.stride3();
    let (pd, ph, pw) = w.pad3()?;
    let (od, oh, ow) = grad_out.spatial();
    if grad_out.batch() != n || grad_out.channels() != cout {
        return Err(MassegError::ShapeMismatch(format!(
            "grad_out shape {:?} inconsistent with conv output",
            grad_out.shape()
        )));
    }

    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(w.kernel.shape());
    let mut grad_b = vec![T::zero(); cout];

    let in_plane = d * h * wd;
    let out_plane = od * oh * ow;
    let kvol = kd * kh * kw;
    let go = grad_out.data();

    for bi in 0..n {
        for oc in 0..cout {
            let obase = (bi * cout + oc) * out_plane;
            let mut acc = T::zero();
            for &g in &go[obase..obase + out_plane] {
                acc += g;
            }
            grad_b[oc] += acc;
        }
    }

    if (sd, sh, sw) == (1, 1, 1) {
        let in_data = input.data();
        let kdata = w.kernel.data();
        let gi = grad_in.data_mut();
        let gk = grad_k.data_mut();
        // The input gradient is a full correlation of grad_out with the
        // flipped kernel, so padding grad_out by (k-1-p) removes every
        // boundary test; the kernel gradient reuses a padded input copy.
        let margins = (kd - 1 - pd, kh - 1 - ph, kw - 1 - pw);
        let mut gpad = PaddedPlanes::new(cout, (od, oh, ow), margins);
        let mut ipad = PaddedPlanes::new(cin, (d, h, wd), (pd, ph, pw));
        let mut buf = vec![T::zero(); wd];
        for bi in 0..n {
            gpad.fill(go, bi * cout * out_plane, cout, margins);
            ipad.fill(in_data, bi * cin * in_plane, cin, (pd, ph, pw));

            for ic in 0..cin {
                let ibase = (bi * cin + ic) * in_plane;
                for z in 0..d {
                    for y in 0..h {
                        buf.fill(T::zero());
                        for oc in 0..cout {
                            let kbase = (oc * cin + ic) * kvol;
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    let prow = gpad.row(oc, z + kd - 1 - kz, y + kh - 1 - ky);
                                    let krow = kbase + (kz * kh + ky) * kw;
                                    if kw == 3 {
                                        axpy3(&mut buf, prow, kdata[krow + 2], kdata[krow + 1], kdata[krow]);
                                    } else {
                                        for kx in 0..kw {
                                            axpy(&mut buf, &prow[kw - 1 - kx..kw - 1 - kx + wd], kdata[krow + kx]);
                                        }
                                    }
                                }
                            }
                        }
                        let girow = ibase + (z * h + y) * wd;
                        gi[girow..girow + wd].copy_from_slice(&buf);
                    }
                }
            }

            for oc in 0..cout {
                let obase = (bi * cout + oc) * out_plane;
                for ic in 0..cin {
                    let kbase = (oc * cin + ic) * kvol;
                    for kz in 0..kd {
                        for ky in 0..kh {
                            let krow = kbase + (kz * kh + ky) * kw;
                            if kw == 3 {
                                let mut acc = [T::zero(); 3];
                                for z in 0..od {
                                    for y in 0..oh {
                                        let orow = obase + (z * oh + y) * ow;
                                        let taps = dot3_lanes(
                                            &go[orow..orow + ow],
                                            ipad.row(ic, z + kz, y + ky),
                                        );
                                        for k in 0..3 {
                                            acc[k] += taps[k];
                                        }
                                    }
                                }
                                for k in 0..3 {
                                    gk[krow + k] += acc[k];
                                }
                            } else {
                                for kx in 0..kw {
                                    let mut acc = T::zero();
                                    for z in 0..od {
                                        for y in 0..oh {
                                            let orow = obase + (z * oh + y) * ow;
                                            let prow = ipad.row(ic, z + kz, y + ky);
                                            acc += dot_lanes(&go[orow..orow + ow], &prow[kx..kx + ow]);
                                        }
                                    }
                                    gk[krow + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let in_data = input.data();
        let kdata = w.kernel.data();
        let gi = grad_in.data_mut();
        let gk = grad_k.data_mut();
        for bi in 0..n {
            for oc in 0..cout {
                let obase = (bi * cout + oc) * out_plane;
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let g = go[obase + (z * oh + y) * ow + x];
                            if g == T::zero() {
                                continue;
                            }
                            for ic in 0..cin {
                                let ibase = (bi * cin + ic) * in_plane;
                                let kbase = (oc * cin + ic) * kvol;
                                for kz in 0..kd {
                                    let iz = (z * sd + kz) as isize - pd as isize;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let iy = (y * sh + ky) as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (x * sw + kx) as isize - pw as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let ii = ibase
                                                + (iz as usize * h + iy as usize) * wd
                                                + ix as usize;
                                            let ki = kbase + (kz * kh + ky) * kw + kx;
                                            gi[ii] += kdata[ki] * g;
                                            gk[ki] += in_data[ii] * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k, grad_b))
}

fn check_tconv_shapes<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<()> {
    check_conv_shapes(input, w)?;
    let (kd, kh, kw) = w.kernel_spatial();
    let (sd, sh, sw) = w.stride3();
    if kd < sd || kh < sh || kw < sw {
        return Err(MassegError::ShapeMismatch(format!(
            "transposed convolution kernel extents ({kd},{kh},{kw}) smaller than strides \
             ({sd},{sh},{sw}) leave uncovered output voxels"
        )));
    }
    Ok(())
}

fn tconv_out_shape<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Vec<usize> {
    let (d, h, wd) = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (sd, sh, sw) = w.stride3();
    let od = (d - 1) * sd + kd;
    let oh = (h - 1) * sh + kh;
    let ow = (wd - 1) * sw + kw;
    input.shape_like(input.batch(), w.out_channels(), od, oh, ow)
}

/// Transposed convolution (scatter form). With kernel extent 2 and stride 2
/// the output spatial extents are exactly doubled.
pub fn transposed_convolve<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    check_tconv_shapes(input, w)?;
    let n = input.batch();
    let cin = input.channels();
    let cout = w.out_channels();
    let (d, h, wd) = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (sd, sh, sw) = w.stride3();
    let out_shape = tconv_out_shape(input, w);
    let mut out = Tensor::zeros(&out_shape);
    let (od, oh, ow) = out.spatial();
    let in_plane = d * h * wd;
    let out_plane = od * oh * ow;
    let kvol = kd * kh * kw;

    {
        let out_data = out.data_mut();
        for (oc, &b) in w.bias.iter().enumerate() {
            for bi in 0..n {
                let base = (bi * cout + oc) * out_plane;
                for v in &mut out_data[base..base + out_plane] {
                    *v = b;
                }
            }
        }
        let in_data = input.data();
        let kdata = w.kernel.data();
        for bi in 0..n {
            for oc in 0..cout {
                let obase = (bi * cout + oc) * out_plane;
                for ic in 0..cin {
                    let ibase = (bi * cin + ic) * in_plane;
                    let kbase = (oc * cin + ic) * kvol;
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..wd {
                                let v = in_data[ibase + (z * h + y) * wd + x];
                                if v == T::zero() {
                                    continue;
                                }
                                for kz in 0..kd {
                                    let oz = z * sd + kz;
                                    for ky in 0..kh {
                                        let oy = y * sh + ky;
                                        let orow = obase + (oz * oh + oy) * ow + x * sw;
                                        let krow = kbase + (kz * kh + ky) * kw;
                                        for kx in 0..kw {
                                            out_data[orow + kx] += kdata[krow + kx] * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `transposed_convolve`.
pub fn transposed_convolve_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    check_tconv_shapes(input, w)?;
    let expected = tconv_out_shape(input, w);
    if grad_out.shape() != expected.as_slice() {
        return Err(MassegError::ShapeMismatch(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let n = input.batch();
    let cin = input.channels();
    let cout = w.out_channels();
    let (d, h, wd) = input.spatial();
    let (kd, kh, kw) = w.kernel_spatial();
    let (sd, sh, sw) = w.stride3();
    let (od, oh, ow) = grad_out.spatial();
    let in_plane = d * h * wd;
    let out_plane = od * oh * ow;
    let kvol = kd * kh * kw;

    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(w.kernel.shape());
    let mut grad_b = vec![T::zero(); cout];

    let go = grad_out.data();
    for bi in 0..n {
        for oc in 0..cout {
            let obase = (bi * cout + oc) * out_plane;
            let mut acc = T::zero();
            for &g in &go[obase..obase + out_plane] {
                acc += g;
            }
            grad_b[oc] += acc;
        }
    }

    let in_data = input.data();
    let kdata = w.kernel.data();
    let gi = grad_in.data_mut();
    let gk = grad_k.data_mut();
    for bi in 0..n {
        for oc in 0..cout {
            let obase = (bi * cout + oc) * out_plane;
            for ic in 0..cin {
                let ibase = (bi * cin + ic) * in_plane;
                let kbase = (oc * cin + ic) * kvol;
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..wd {
                            let ii = ibase + (z * h + y) * wd + x;
                            let v = in_data[ii];
                            let mut acc = T::zero();
                            for kz in 0..kd {
                                let oz = z * sd + kz;
                                for ky in 0..kh {
                                    let oy = y * sh + ky;
                                    let orow = obase + (oz * oh + oy) * ow + x * sw;
                                    let krow = kbase + (kz * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let g = go[orow + kx];
                                        acc += kdata[krow + kx] * g;
                                        gk[krow + kx] += v * g;
                                    }
                                }
                            }
                            gi[ii] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w3d(kernel: Tensor<f32>, bias: Vec<f32>, stride: usize, padding: Padding) -> ConvWeights<f32> {
        ConvWeights::new(kernel, bias, stride, padding).unwrap()
    }

    #[test]
    fn sum_of_ones_valid() {
        let input = Tensor::filled(&[1, 1, 2, 2, 2], 1.0f32);
        let kernel = Tensor::filled(&[1, 1, 2, 2, 2], 1.0f32);
        let out = convolve(&input, &w3d(kernel, vec![0.0], 1, Padding::Valid)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(out.data()[0], 8.0);
    }

    #[test]
    fn identity_kernel() {
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let input = Tensor::from_vec(&[1, 1, 2, 3, 4], data.clone()).unwrap();
        let kernel = Tensor::filled(&[1, 1, 1, 1, 1], 1.0f32);
        let out = convolve(&input, &w3d(kernel, vec![0.0], 1, Padding::Same)).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
        let kernel = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]);
        let err = convolve(&input, &w3d(kernel, vec![0.0], 1, Padding::Same)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4, 4]") && msg.contains("[1, 3, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn tconv_single_voxel_broadcast() {
        let input = Tensor::filled(&[1, 1, 1, 1, 1], 1.0f32);
        let kernel = Tensor::filled(&[1, 1, 2, 2, 2], 1.0f32);
        let out = transposed_convolve(&input, &w3d(kernel, vec![0.0], 2, Padding::Valid)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tconv_doubles_extents_and_zero_maps_to_zero() {
        let input = Tensor::<f32>::zeros(&[1, 2, 3, 4, 5]);
        let kernel = Tensor::filled(&[3, 2, 2, 2, 2], 0.5f32);
        let out = transposed_convolve(&input, &w3d(kernel, vec![0.0; 3], 2, Padding::Valid)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 6, 8, 10]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tconv_rejects_stride_exceeding_kernel() {
        let input = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        let kernel = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
        assert!(transposed_convolve(&input, &w3d(kernel, vec![0.0], 3, Padding::Valid)).is_err());
    }
}
