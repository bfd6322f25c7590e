//! Whole-case segmentation: the recursive-downsampling post-processing loop
//! for 3-D patches and the per-slice 2-D path.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MassegError, Result};
use crate::models::{Mode, Model};
use crate::ops::softmax_over_channels;
use crate::tensor::Tensor;
use crate::volumes::{crop_patch, min_intensity, resample_image, Interp, Rescale, Volume};

/// Ordered down-sampling factors, strictly decreasing, all in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub factors: Vec<f64>,
}

impl ScaleSchedule {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        for pair in factors.windows(2) {
            if !(pair[1] < pair[0]) {
                return Err(MassegError::Config(format!(
                    "scale schedule must be strictly decreasing, got {factors:?}"
                )));
            }
        }
        if factors.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(MassegError::Config(format!(
                "scale factors must lie in (0, 1), got {factors:?}"
            )));
        }
        Ok(ScaleSchedule { factors })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

impl FromStr for ScaleSchedule {
    type Err = MassegError;

    fn from_str(s: &str) -> Result<Self> {
        let factors = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| MassegError::Config(format!("bad scale factor `{p}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        ScaleSchedule::new(factors)
    }
}

/// One attempt of the rescaling loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// Down-sampling factor applied to the source volume (1.0 at iteration 0).
    pub scale: f64,
    /// Positive labels on the patch boundary after this attempt.
    pub boundary_positive: usize,
    pub accepted: bool,
}

/// Segmentation output: a binary mask on the original grid, the per-attempt
/// trace, and any warnings.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub mask: Volume<u8>,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
}

/// Anything that can label a patch. Implemented by trained models and by the
/// constant stubs used for pipeline tests.
pub trait PatchSegmenter {
    fn dims(&self) -> u8;
    /// Patch extents must be divisible by this (2^L for a U-net of depth L).
    fn extent_divisor(&self) -> usize;
    fn path_count(&self) -> usize;
    fn second_path_scale(&self) -> f64;
    /// Returns a binary label map with the same spatial extents as path 1.
    fn segment_patch(&mut self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>>;
}

impl PatchSegmenter for Model<f32> {
    fn dims(&self) -> u8 {
        self.config.dims
    }

    fn extent_divisor(&self) -> usize {
        self.config.extent_divisor()
    }

    fn path_count(&self) -> usize {
        Model::path_count(self)
    }

    fn second_path_scale(&self) -> f64 {
        self.config.second_path_scale
    }

    fn segment_patch(&mut self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let logits = self.forward(inputs, Mode::Infer)?;
        let probs = softmax_over_channels(&logits)?;
        let channels = probs.channels();
        let sp = probs.spatial_len();
        let mut shape = probs.shape().to_vec();
        shape[1] = 1;
        let mut out = Tensor::zeros(&shape);
        for i in 0..sp {
            let mut best = 0usize;
            let mut best_p = probs.data()[i];
            for c in 1..channels {
                let p = probs.data()[c * sp + i];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            // Foreground is the last channel.
            out.data_mut()[i] = if best == channels - 1 { 1.0 } else { 0.0 };
        }
        Ok(out)
    }
}

/// Counts positive labels on the outermost voxel shell of a patch. For 2-D
/// patches (depth 1) only the in-plane border counts.
pub fn boundary_positive_count(labels: &Tensor<f32>) -> usize {
    let (d, h, w) = labels.spatial();
    let mut n = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let on_shell = (d > 1 && (z == 0 || z == d - 1))
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1;
                if on_shell && labels.data()[(z * h + y) * w + x] > 0.5 {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Builds the model inputs for a patch centred at `center` in `volume`.
/// Path 1 is a native crop; path 2 (dual-path models) crops the same voxel
/// extents from the volume resampled by the second-path scale, covering a
/// wider physical field of view.
fn build_inputs(
    seg: &dyn PatchSegmenter,
    volume: &Volume<f32>,
    center: [i64; 3],
    extents: [usize; 3],
    pad: f32,
) -> Result<Vec<Tensor<f32>>> {
    let mut inputs = Vec::with_capacity(seg.path_count());
    let p1 = crop_patch(volume, center, extents, pad)?;
    inputs.push(patch_to_tensor(&p1, seg.dims()));
    if seg.path_count() > 1 {
        let s = seg.second_path_scale();
        let coarse = resample_image(volume, Rescale::Factor(s), Interp::Trilinear)?;
        let c2 = rederive_center(volume, center, &coarse);
        let p2 = crop_patch(&coarse, c2, extents, pad)?;
        inputs.push(patch_to_tensor(&p2, seg.dims()));
    }
    Ok(inputs)
}

/// Wraps a patch as a batch-1, single-channel tensor of the given
/// dimensionality (rank 4 for 2-D models, rank 5 for 3-D).
pub fn patch_to_tensor(patch: &Volume<f32>, dims: u8) -> Tensor<f32> {
    let [d, h, w] = patch.extents;
    let shape: Vec<usize> = if dims == 2 {
        vec![1, 1, h, w]
    } else {
        vec![1, 1, d, h, w]
    };
    Tensor::from_vec(&shape, patch.data.clone()).expect("patch data matches extents")
}

/// Maps a voxel coordinate from one grid to the nearest voxel of another via
/// physical coordinates.
pub(crate) fn rederive_center(src: &Volume<f32>, center: [i64; 3], dst: &Volume<f32>) -> [i64; 3] {
    let mm = src.voxel_to_mm([center[0] as f64, center[1] as f64, center[2] as f64]);
    [
        ((mm[0] - dst.origin[0]) / dst.spacing[0]).round() as i64,
        ((mm[1] - dst.origin[1]) / dst.spacing[1]).round() as i64,
        ((mm[2] - dst.origin[2]) / dst.spacing[2]).round() as i64,
    ]
}

/// Scatters patch labels back onto the original grid: every original voxel
/// inside the patch's physical box takes the label of its nearest patch voxel.
fn place_labels(
    mask: &mut Volume<u8>,
    labels: &Tensor<f32>,
    patch: &Volume<f32>,
    original: &Volume<f32>,
) {
    let [pd, ph, pw] = patch.extents;
    for a in 0..3 {
        debug_assert!(patch.spacing[a] > 0.0);
    }
    // Original-grid bounding box of the patch.
    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    for a in 0..3 {
        let start_mm = patch.origin[a] - 0.5 * patch.spacing[a];
        let end_mm = patch.origin[a] + (patch.extents[a] as f64 - 0.5) * patch.spacing[a];
        lo[a] = ((start_mm - original.origin[a]) / original.spacing[a]).ceil() as i64;
        hi[a] = ((end_mm - original.origin[a]) / original.spacing[a]).floor() as i64;
        lo[a] = lo[a].max(0);
        hi[a] = hi[a].min(original.extents[a] as i64 - 1);
    }
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let mm = original.voxel_to_mm([z as f64, y as f64, x as f64]);
                let pz = ((mm[0] - patch.origin[0]) / patch.spacing[0]).round() as i64;
                let py = ((mm[1] - patch.origin[1]) / patch.spacing[1]).round() as i64;
                let px = ((mm[2] - patch.origin[2]) / patch.spacing[2]).round() as i64;
                if pz < 0
                    || py < 0
                    || px < 0
                    || pz as usize >= pd
                    || py as usize >= ph
                    || px as usize >= pw
                {
                    continue;
                }
                let li = (pz as usize * ph + py as usize) * pw + px as usize;
                if labels.data()[li] > 0.5 {
                    mask.set(z as usize, y as usize, x as usize, 1);
                }
            }
        }
    }
}

/// Runs the recursive-downsampling segmentation loop.
///
/// Iteration 0 segments a native-resolution patch. While positive labels
/// touch the patch boundary, the source volume is resampled by the next
/// schedule factor (the fixed patch extents then cover a wider physical
/// field) and the model is re-run. On acceptance the labels are mapped back
/// to the original grid by nearest neighbour; an exhausted schedule returns
/// the last attempt with a warning.
pub fn segment_with_rescaling(
    seg: &mut dyn PatchSegmenter,
    volume: &Volume<f32>,
    center: [i64; 3],
    patch_extents: [usize; 3],
    schedule: &ScaleSchedule,
) -> Result<SegmentationResult> {
    if seg.dims() != 3 {
        return Err(MassegError::Config(
            "segment_with_rescaling requires a 3-D model".into(),
        ));
    }
    let div = seg.extent_divisor();
    if patch_extents.iter().any(|&e| e % div != 0) {
        return Err(MassegError::ShapeMismatch(format!(
            "patch extents {patch_extents:?} must be divisible by {div}"
        )));
    }
    let pad = min_intensity(volume);
    let mut mask = Volume::new(volume.extents, volume.spacing, 0u8)?;
    mask.origin = volume.origin;
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut last: Option<(Tensor<f32>, Volume<f32>)> = None;

    for k in 0..=schedule.len() {
        let (vol_k, scale);
        let owned;
        if k == 0 {
            vol_k = volume;
            scale = 1.0;
        } else {
            scale = schedule.factors[k - 1];
            owned = resample_image(volume, Rescale::Factor(scale), Interp::Trilinear)?;
            vol_k = &owned;
        }
        let center_k = if k == 0 {
            center
        } else {
            rederive_center(volume, center, vol_k)
        };
        let patch = crop_patch(vol_k, center_k, patch_extents, pad)?;
        let inputs = build_inputs(seg, vol_k, center_k, patch_extents, pad)?;
        let labels = seg.segment_patch(&inputs)?;
        let n = boundary_positive_count(&labels);
        let accepted = n == 0;
        trace.push(TraceEntry {
            scale,
            boundary_positive: n,
            accepted,
        });
        if accepted {
            place_labels(&mut mask, &labels, &patch, volume);
            return Ok(SegmentationResult {
                mask,
                trace,
                warnings,
            });
        }
        last = Some((labels, patch));
    }

    let (labels, patch) = last.expect("at least one attempt ran");
    place_labels(&mut mask, &labels, &patch, volume);
    warnings.push(format!(
        "scale schedule exhausted with {} boundary-positive labels; returning the last attempt",
        trace.last().map(|t| t.boundary_positive).unwrap_or(0)
    ));
    Ok(SegmentationResult {
        mask,
        trace,
        warnings,
    })
}

/// Segments the listed depth slices with a 2-D model and stacks the results
/// into a 3-D mask; slices not listed stay background. Exactly one model call
/// per listed slice.
pub fn segment_2d(
    seg: &mut dyn PatchSegmenter,
    volume: &Volume<f32>,
    slice_indices: &[usize],
    center_yx: [i64; 2],
    patch_extents: [usize; 2],
) -> Result<SegmentationResult> {
    if seg.dims() != 2 {
        return Err(MassegError::Config("segment_2d requires a 2-D model".into()));
    }
    if slice_indices.is_empty() {
        return Err(MassegError::Config(
            "segment_2d: empty lesion-slice list (the slice prior is required)".into(),
        ));
    }
    let div = seg.extent_divisor();
    if patch_extents.iter().any(|&e| e % div != 0) {
        return Err(MassegError::ShapeMismatch(format!(
            "patch extents {patch_extents:?} must be divisible by {div}"
        )));
    }
    let pad = min_intensity(volume);
    let mut mask = Volume::new(volume.extents, volume.spacing, 0u8)?;
    mask.origin = volume.origin;
    let [ph, pw] = patch_extents;
    let start = [center_yx[0] - (ph / 2) as i64, center_yx[1] - (pw / 2) as i64];
    for &z in slice_indices {
        if z >= volume.extents[0] {
            return Err(MassegError::Config(format!(
                "slice index {z} outside depth extent {}",
                volume.extents[0]
            )));
        }
        let patch = crop_patch(volume, [z as i64, center_yx[0], center_yx[1]], [1, ph, pw], pad)?;
        let input = Tensor::from_vec(&[1, 1, ph, pw], patch.data.clone())
            .expect("patch data matches extents");
        let labels = seg.segment_patch(&[input])?;
        for y in 0..ph {
            for x in 0..pw {
                if labels.data()[y * pw + x] > 0.5 {
                    let vy = start[0] + y as i64;
                    let vx = start[1] + x as i64;
                    if vy >= 0
                        && vx >= 0
                        && (vy as usize) < volume.extents[1]
                        && (vx as usize) < volume.extents[2]
                    {
                        mask.set(z, vy as usize, vx as usize, 1);
                    }
                }
            }
        }
    }
    Ok(SegmentationResult {
        mask,
        trace: Vec::new(),
        warnings: Vec::new(),
    })
}

pub mod stubs {
    //! Constant and rule-based stub segmenters for pipeline tests and the
    //! CLI's stub mode.

    use super::*;

    /// Emits a constant label everywhere and counts calls.
    pub struct ConstantStub {
        pub dims: u8,
        pub value: f32,
        pub calls: usize,
    }

    impl PatchSegmenter for ConstantStub {
        fn dims(&self) -> u8 {
            self.dims
        }
        fn extent_divisor(&self) -> usize {
            1
        }
        fn path_count(&self) -> usize {
            1
        }
        fn second_path_scale(&self) -> f64 {
            0.5
        }
        fn segment_patch(&mut self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
            self.calls += 1;
            Ok(Tensor::filled(inputs[0].shape(), self.value))
        }
    }

    /// Emits a centred ball of the given voxel radius.
    pub struct BallStub {
        pub radius: f64,
        pub calls: usize,
    }

    impl PatchSegmenter for BallStub {
        fn dims(&self) -> u8 {
            3
        }
        fn extent_divisor(&self) -> usize {
            1
        }
        fn path_count(&self) -> usize {
            1
        }
        fn second_path_scale(&self) -> f64 {
            0.5
        }
        fn segment_patch(&mut self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
            self.calls += 1;
            let (d, h, w) = inputs[0].spatial();
            let mut out = Tensor::zeros(inputs[0].shape());
            let c = [(d / 2) as f64, (h / 2) as f64, (w / 2) as f64];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let r = ((z as f64 - c[0]).powi(2)
                            + (y as f64 - c[1]).powi(2)
                            + (x as f64 - c[2]).powi(2))
                        .sqrt();
                        if r <= self.radius {
                            out.data_mut()[(z * h + y) * w + x] = 1.0;
                        }
                    }
                }
            }
            Ok(out)
        }
    }

    /// Thresholds the input patch at a fixed level.
    pub struct ThresholdStub {
        pub dims: u8,
        pub level: f32,
        pub calls: usize,
    }

    impl PatchSegmenter for ThresholdStub {
        fn dims(&self) -> u8 {
            self.dims
        }
        fn extent_divisor(&self) -> usize {
            1
        }
        fn path_count(&self) -> usize {
            1
        }
        fn second_path_scale(&self) -> f64 {
            0.5
        }
        fn segment_patch(&mut self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
            self.calls += 1;
            Ok(inputs[0].map(|v| if v > self.level { 1.0 } else { 0.0 }))
        }
    }
}
