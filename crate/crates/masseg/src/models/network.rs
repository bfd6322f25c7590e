//! Model storage, initialization, forward/backward orchestration.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{MassegError, Result};
use crate::ops::*;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: ConvWeights<T>,
    bn: Option<BatchNormState<T>>,
}

#[derive(Debug, Clone)]
struct EncoderLevel<T> {
    block1: ConvBlock<T>,
    block2: ConvBlock<T>,
}

#[derive(Debug, Clone)]
struct DecoderLevel<T> {
    up: ConvWeights<T>,
    conv1: ConvWeights<T>,
    conv2: ConvWeights<T>,
}

#[derive(Debug, Clone)]
struct UNetPath<T> {
    enc: Vec<EncoderLevel<T>>,
    bottom: EncoderLevel<T>,
    dec: Vec<DecoderLevel<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    conv_in: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
    pre_relu: Tensor<T>,
}

#[derive(Debug, Clone)]
struct EncLevelCache<T> {
    b1: BlockCache<T>,
    b2: BlockCache<T>,
    pre_pool_shape: Vec<usize>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
struct DecLevelCache<T> {
    up_in: Tensor<T>,
    skip_channels: usize,
    b1: BlockCache<T>,
    b2: BlockCache<T>,
}

#[derive(Debug, Clone)]
struct PathCache<T> {
    input_shape: Vec<usize>,
    enc: Vec<EncLevelCache<T>>,
    bottom_b1: BlockCache<T>,
    bottom_b2: BlockCache<T>,
    dec: Vec<DecLevelCache<T>>,
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    paths: Vec<PathCache<T>>,
    /// Input to the head convolution (fused map for dual path).
    head_in: Tensor<T>,
    /// Dual path only: shape of the context output before the center crop,
    /// and the cropped extents, needed by the fusion adjoint.
    fusion: Option<FusionCache>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    p2_shape: Vec<usize>,
    crop_extents: (usize, usize, usize),
}

/// Parameter and input gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: BTreeMap<String, Vec<T>>,
    pub inputs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    paths: Vec<UNetPath<T>>,
    head: ConvWeights<T>,
    cache: Option<ForwardCache<T>>,
}

fn kernel_shape(dims: u8, out_c: usize, in_c: usize, k: usize) -> Vec<usize> {
    if dims == 2 {
        vec![out_c, in_c, k, k]
    } else {
        vec![out_c, in_c, k, k, k]
    }
}

fn glorot_kernel<T: Scalar>(
    rng: &mut ChaCha8Rng,
    dims: u8,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> Tensor<T> {
    let shape = kernel_shape(dims, out_c, in_c, k);
    let kvol: usize = shape[2..].iter().product();
    let bound = (6.0 / ((in_c * kvol + out_c * kvol) as f64)).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_real(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&shape, data).unwrap()
}

fn conv3<T: Scalar>(rng: &mut ChaCha8Rng, dims: u8, in_c: usize, out_c: usize) -> ConvWeights<T> {
    ConvWeights::new(
        glorot_kernel(rng, dims, out_c, in_c, 3),
        vec![T::zero(); out_c],
        1,
        Padding::Same,
    )
    .unwrap()
}

fn build_path<T: Scalar>(rng: &mut ChaCha8Rng, config: &ModelConfig) -> UNetPath<T> {
    let dims = config.dims;
    let mut enc = Vec::new();
    for level in 0..config.depth {
        let in_c = if level == 0 {
            config.in_channels
        } else {
            config.channels_at(level - 1)
        };
        let c = config.channels_at(level);
        enc.push(EncoderLevel {
            block1: ConvBlock { conv: conv3(rng, dims, in_c, c), bn: Some(BatchNormState::new(c)) },
            block2: ConvBlock { conv: conv3(rng, dims, c, c), bn: Some(BatchNormState::new(c)) },
        });
    }
    let cb = config.channels_at(config.depth);
    let bottom = EncoderLevel {
        block1: ConvBlock {
            conv: conv3(rng, dims, config.channels_at(config.depth - 1), cb),
            bn: Some(BatchNormState::new(cb)),
        },
        block2: ConvBlock { conv: conv3(rng, dims, cb, cb), bn: Some(BatchNormState::new(cb)) },
    };
    let mut dec = Vec::new();
    for level in 0..config.depth {
        let c = config.channels_at(level);
        let c_above = config.channels_at(level + 1);
        dec.push(DecoderLevel {
            up: ConvWeights::new(
                glorot_kernel(rng, dims, c, c_above, 2),
                vec![T::zero(); c],
                2,
                Padding::Valid,
            )
            .unwrap(),
            conv1: conv3(rng, dims, 2 * c, c),
            conv2: conv3(rng, dims, c, c),
        });
    }
    UNetPath { enc, bottom, dec }
}

impl<T: Scalar> Model<T> {
    /// Builds a single-path U-net.
    pub fn build_unet(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.dual_path {
            return Err(MassegError::Config(
                "build_unet requires dual_path = false".into(),
            ));
        }
        Self::build(config, seed)
    }

    /// Builds the dual-path variant: two independent U-nets plus a fusion
    /// head.
    pub fn build_dual_path_unet(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !config.dual_path {
            return Err(MassegError::Config(
                "build_dual_path_unet requires dual_path = true".into(),
            ));
        }
        Self::build(config, seed)
    }

    /// Builds whichever architecture the config selects.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_paths = if config.dual_path { 2 } else { 1 };
        let paths: Vec<UNetPath<T>> = (0..n_paths).map(|_| build_path(&mut rng, config)).collect();
        let head_in = config.base_channels * n_paths;
        let head = ConvWeights::new(
            glorot_kernel(&mut rng, config.dims, config.num_labels, head_in, 1),
            vec![T::zero(); config.num_labels],
            1,
            Padding::Same,
        )
        .unwrap();
        Ok(Model { config: config.clone(), paths, head, cache: None })
    }

    pub fn path_count(&self) -> usize {
        self.paths.len()
    }

    /// Visits every trainable parameter as (name, shape, data).
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let mut m = self.clone();
        m.visit_params_mut(&mut |name, shape, data| f(name, shape, data));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (pi, path) in self.paths.iter_mut().enumerate() {
            let p = format!("path{pi}");
            for (li, level) in path.enc.iter_mut().enumerate() {
                visit_block(f, &format!("{p}.enc{li}.b1"), &mut level.block1);
                visit_block(f, &format!("{p}.enc{li}.b2"), &mut level.block2);
            }
            visit_block(f, &format!("{p}.bottom.b1"), &mut path.bottom.block1);
            visit_block(f, &format!("{p}.bottom.b2"), &mut path.bottom.block2);
            for (li, level) in path.dec.iter_mut().enumerate() {
                visit_conv(f, &format!("{p}.dec{li}.up"), &mut level.up);
                visit_conv(f, &format!("{p}.dec{li}.c1"), &mut level.conv1);
                visit_conv(f, &format!("{p}.dec{li}.c2"), &mut level.conv2);
            }
        }
        visit_conv(f, "head", &mut self.head);
    }

    /// Visits the non-trainable batch-norm running statistics.
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (pi, path) in self.paths.iter_mut().enumerate() {
            let p = format!("path{pi}");
            for (li, level) in path.enc.iter_mut().enumerate() {
                visit_bn_buffers(f, &format!("{p}.enc{li}.b1"), &mut level.block1);
                visit_bn_buffers(f, &format!("{p}.enc{li}.b2"), &mut level.block2);
            }
            visit_bn_buffers(f, &format!("{p}.bottom.b1"), &mut path.bottom.block1);
            visit_bn_buffers(f, &format!("{p}.bottom.b2"), &mut path.bottom.block2);
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, data| n += data.len());
        n
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut target = Model::<U>::build(&self.config, 0).unwrap();
        let mut values: BTreeMap<String, Vec<U>> = BTreeMap::new();
        let mut buffers: BTreeMap<String, Vec<U>> = BTreeMap::new();
        {
            let mut m = self.clone();
            m.visit_params_mut(&mut |name, _, data| {
                values.insert(name.to_string(), data.iter().map(|&v| U::from_real(v.to_real())).collect());
            });
            m.visit_buffers_mut(&mut |name, data| {
                buffers.insert(name.to_string(), data.iter().map(|&v| U::from_real(v.to_real())).collect());
            });
        }
        target.visit_params_mut(&mut |name, _, data| {
            data.copy_from_slice(&values[name]);
        });
        target.visit_buffers_mut(&mut |name, data| {
            data.copy_from_slice(&buffers[name]);
        });
        target
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.rank() != self.config.rank() {
            return Err(MassegError::ShapeMismatch(format!(
                "input rank {} does not match {}-D model",
                input.rank(),
                self.config.dims
            )));
        }
        if input.channels() != self.config.in_channels {
            return Err(MassegError::ShapeMismatch(format!(
                "input channels {} != configured {}",
                input.channels(),
                self.config.in_channels
            )));
        }
        let div = self.config.extent_divisor();
        for &e in &input.shape()[2..] {
            if e % div != 0 {
                return Err(MassegError::ShapeMismatch(format!(
                    "spatial extent {e} not divisible by 2^depth = {div}"
                )));
            }
        }
        Ok(())
    }

    /// Runs the model. `inputs` carries one tensor per path.
    pub fn forward(&mut self, inputs: &[Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        if inputs.len() != self.paths.len() {
            return Err(MassegError::ShapeMismatch(format!(
                "model has {} path(s), got {} input(s)",
                self.paths.len(),
                inputs.len()
            )));
        }
        for input in inputs {
            self.check_input(input)?;
        }
        let mut path_caches = Vec::new();
        let mut outputs = Vec::new();
        for (pi, input) in inputs.iter().enumerate() {
            let (out, cache) = forward_path(&mut self.paths[pi], input, mode)?;
            outputs.push(out);
            if let Some(c) = cache {
                path_caches.push(c);
            }
        }

        let (head_in, fusion) = if self.paths.len() == 2 {
            let p1 = &outputs[0];
            let p2 = &outputs[1];
            let (d, h, w) = p1.spatial();
            let s = self.config.second_path_scale;
            let crop = |e: usize| ((e as f64 * s).round() as usize).max(1);
            let crop_extents = if self.config.dims == 2 {
                (1, crop(h), crop(w))
            } else {
                (crop(d), crop(h), crop(w))
            };
            let cropped = center_crop(p2, crop_extents)?;
            let lifted = trilinear_resize(&cropped, (d, h, w))?;
            let fused = concat_channels(p1, &lifted)?;
            (
                fused,
                Some(FusionCache { p2_shape: p2.shape().to_vec(), crop_extents }),
            )
        } else {
            (outputs.pop().unwrap(), None)
        };

        let logits = convolve(&head_in, &self.head)?;
        self.cache = match mode {
            Mode::Train => Some(ForwardCache { paths: path_caches, head_in, fusion }),
            Mode::Infer => None,
        };
        Ok(logits)
    }

    /// Backward pass over the cached train-mode forward. Returns parameter
    /// gradients plus per-path input gradients.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            MassegError::State("backward called without a cached train-mode forward".into())
        })?;
        let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let (g_head_in, gk, gb) = convolve_backward(&cache.head_in, &self.head, grad_logits)?;
        grads.insert("head.kernel".into(), gk.into_data());
        grads.insert("head.bias".into(), gb);

        let path_grads: Vec<Tensor<T>> = if self.paths.len() == 2 {
            let fusion = cache.fusion.as_ref().expect("dual-path cache");
            let c0 = self.config.base_channels;
            let (g1, g_lifted) = split_channels(&g_head_in, c0)?;
            let cropped_shape = {
                let mut s = fusion.p2_shape.clone();
                let (cd, ch_, cw) = fusion.crop_extents;
                let r = s.len();
                if r == 4 {
                    s[2] = ch_;
                    s[3] = cw;
                } else {
                    s[2] = cd;
                    s[3] = ch_;
                    s[4] = cw;
                }
                s
            };
            let g_cropped = trilinear_resize_backward(&cropped_shape, &g_lifted)?;
            let g2 = center_crop_backward(&fusion.p2_shape, &g_cropped)?;
            vec![g1, g2]
        } else {
            vec![g_head_in]
        };

        let mut input_grads = Vec::new();
        for (pi, g_out) in path_grads.into_iter().enumerate() {
            let g_in = backward_path(
                &self.paths[pi],
                &cache.paths[pi],
                &g_out,
                &format!("path{pi}"),
                &mut grads,
            )?;
            input_grads.push(g_in);
        }
        Ok(Gradients { params: grads, inputs: input_grads })
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

fn visit_conv<T: Scalar>(
    f: &mut dyn FnMut(&str, &[usize], &mut [T]),
    name: &str,
    conv: &mut ConvWeights<T>,
) {
    let shape = conv.kernel.shape().to_vec();
    f(&format!("{name}.kernel"), &shape, conv.kernel.data_mut());
    let blen = conv.bias.len();
    f(&format!("{name}.bias"), &[blen], &mut conv.bias);
}

fn visit_block<T: Scalar>(
    f: &mut dyn FnMut(&str, &[usize], &mut [T]),
    name: &str,
    block: &mut ConvBlock<T>,
) {
    visit_conv(f, name, &mut block.conv);
    if let Some(bn) = &mut block.bn {
        let c = bn.gamma.len();
        f(&format!("{name}.gamma"), &[c], &mut bn.gamma);
        f(&format!("{name}.beta"), &[c], &mut bn.beta);
    }
}

fn visit_bn_buffers<T: Scalar>(
    f: &mut dyn FnMut(&str, &mut [T]),
    name: &str,
    block: &mut ConvBlock<T>,
) {
    if let Some(bn) = &mut block.bn {
        f(&format!("{name}.running_mean"), &mut bn.running_mean);
        f(&format!("{name}.running_var"), &mut bn.running_var);
    }
}

fn forward_block<T: Scalar>(
    block: &mut ConvBlock<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
    let conv_out = convolve(input, &block.conv)?;
    let (pre_relu, bn_cache) = match (&mut block.bn, mode) {
        (Some(bn), Mode::Train) => {
            let (out, cache) = batch_norm_train(&conv_out, bn)?;
            (out, Some(cache))
        }
        (Some(bn), Mode::Infer) => (batch_norm_infer(&conv_out, bn)?, None),
        (None, _) => (conv_out.clone(), None),
    };
    let out = relu(&pre_relu);
    let cache = match mode {
        Mode::Train => Some(BlockCache { conv_in: input.clone(), bn: bn_cache, pre_relu }),
        Mode::Infer => None,
    };
    Ok((out, cache))
}

fn backward_block<T: Scalar>(
    block: &ConvBlock<T>,
    cache: &BlockCache<T>,
    grad_out: &Tensor<T>,
    name: &str,
    grads: &mut BTreeMap<String, Vec<T>>,
) -> Result<Tensor<T>> {
    let g_pre = relu_backward(&cache.pre_relu, grad_out)?;
    let g_conv_out = match (&block.bn, &cache.bn) {
        (Some(bn), Some(bn_cache)) => {
            let (gi, gg, gb) = batch_norm_backward(bn, bn_cache, &g_pre)?;
            grads.insert(format!("{name}.gamma"), gg);
            grads.insert(format!("{name}.beta"), gb);
            gi
        }
        _ => g_pre,
    };
    let (g_in, gk, gb) = convolve_backward(&cache.conv_in, &block.conv, &g_conv_out)?;
    grads.insert(format!("{name}.kernel"), gk.into_data());
    grads.insert(format!("{name}.bias"), gb);
    Ok(g_in)
}

fn forward_path<T: Scalar>(
    path: &mut UNetPath<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<PathCache<T>>)> {
    let depth = path.enc.len();
    let mut enc_caches = Vec::new();
    let mut skips = Vec::new();
    let mut x = input.clone();
    for level in path.enc.iter_mut() {
        let (a, c1) = forward_block(&mut level.block1, &x, mode)?;
        let (skip, c2) = forward_block(&mut level.block2, &a, mode)?;
        let pre_pool_shape = skip.shape().to_vec();
        let (pooled, argmax) = max_pool(&skip)?;
        if mode == Mode::Train {
            enc_caches.push(EncLevelCache {
                b1: c1.unwrap(),
                b2: c2.unwrap(),
                pre_pool_shape,
                argmax,
            });
        }
        skips.push(skip);
        x = pooled;
    }
    let (a, cb1) = forward_block(&mut path.bottom.block1, &x, mode)?;
    let (mut x, cb2) = forward_block(&mut path.bottom.block2, &a, mode)?;

    let mut dec_caches = Vec::new();
    for level_idx in (0..depth).rev() {
        let level = &mut path.dec[level_idx];
        let up_in = x;
        let up_out = transposed_convolve(&up_in, &level.up)?;
        let skip = &skips[level_idx];
        let cat = concat_channels(skip, &up_out)?;
        let skip_channels = skip.channels();
        let (a, c1) = forward_block_plain(&level.conv1, &cat, mode)?;
        let (out, c2) = forward_block_plain(&level.conv2, &a, mode)?;
        if mode == Mode::Train {
            dec_caches.push(DecLevelCache {
                up_in,
                skip_channels,
                b1: c1.unwrap(),
                b2: c2.unwrap(),
            });
        }
        x = out;
    }
    // dec_caches were pushed bottom-up (level depth-1 first)
    let cache = if mode == Mode::Train {
        Some(PathCache {
            input_shape: input.shape().to_vec(),
            enc: enc_caches,
            bottom_b1: cb1.unwrap(),
            bottom_b2: cb2.unwrap(),
            dec: dec_caches,
        })
    } else {
        None
    };
    Ok((x, cache))
}

/// Decoder conv blocks carry no batch norm; this avoids materializing a
/// `ConvBlock` wrapper around plain weights.
fn forward_block_plain<T: Scalar>(
    conv: &ConvWeights<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
    let pre_relu = convolve(input, conv)?;
    let out = relu(&pre_relu);
    let cache = match mode {
        Mode::Train => Some(BlockCache { conv_in: input.clone(), bn: None, pre_relu }),
        Mode::Infer => None,
    };
    Ok((out, cache))
}

fn backward_block_plain<T: Scalar>(
    conv: &ConvWeights<T>,
    cache: &BlockCache<T>,
    grad_out: &Tensor<T>,
    name: &str,
    grads: &mut BTreeMap<String, Vec<T>>,
) -> Result<Tensor<T>> {
    let g_pre = relu_backward(&cache.pre_relu, grad_out)?;
    let (g_in, gk, gb) = convolve_backward(&cache.conv_in, conv, &g_pre)?;
    grads.insert(format!("{name}.kernel"), gk.into_data());
    grads.insert(format!("{name}.bias"), gb);
    Ok(g_in)
}

fn backward_path<T: Scalar>(
    path: &UNetPath<T>,
    cache: &PathCache<T>,
    grad_output: &Tensor<T>,
    prefix: &str,
    grads: &mut BTreeMap<String, Vec<T>>,
) -> Result<Tensor<T>> {
    let depth = path.enc.len();
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
    let mut g = grad_output.clone();
    // decoder levels were executed (and cached) from level depth-1 down to 0,
    // so the backward sweep visits level 0 first and takes caches from the
    // back of the list
    for level_idx in 0..depth {
        let level = &path.dec[level_idx];
        let c = &cache.dec[depth - 1 - level_idx];
        let name = format!("{prefix}.dec{level_idx}");
        let g_a = backward_block_plain(&level.conv2, &c.b2, &g, &format!("{name}.c2"), grads)?;
        let g_cat = backward_block_plain(&level.conv1, &c.b1, &g_a, &format!("{name}.c1"), grads)?;
        let (g_skip, g_up_out) = split_channels(&g_cat, c.skip_channels)?;
        skip_grads[level_idx] = Some(g_skip);
        let (g_up_in, gk, gb) = transposed_convolve_backward(&c.up_in, &level.up, &g_up_out)?;
        grads.insert(format!("{name}.up.kernel"), gk.into_data());
        grads.insert(format!("{name}.up.bias"), gb);
        g = g_up_in;
    }

    let name = format!("{prefix}.bottom");
    let g_a = backward_block(&path.bottom.block2, &cache.bottom_b2, &g, &format!("{name}.b2"), grads)?;
    g = backward_block(&path.bottom.block1, &cache.bottom_b1, &g_a, &format!("{name}.b1"), grads)?;

    for level_idx in (0..depth).rev() {
        let level = &path.enc[level_idx];
        let c = &cache.enc[level_idx];
        let g_pool_in = max_pool_backward(&c.pre_pool_shape, &c.argmax, &g)?;
        let g_skip_total = g_pool_in.add(skip_grads[level_idx].as_ref().unwrap())?;
        let name = format!("{prefix}.enc{level_idx}");
        let g_a = backward_block(&level.block2, &c.b2, &g_skip_total, &format!("{name}.b2"), grads)?;
        g = backward_block(&level.block1, &c.b1, &g_a, &format!("{name}.b1"), grads)?;
    }
    debug_assert_eq!(g.shape(), cache.input_shape.as_slice());
    Ok(g)
}
