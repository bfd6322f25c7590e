//! Volume data model, file I/O, resampling, patch extraction, and the
//! synthetic phantom generator.

mod io;
mod phantom;

pub use io::{read_manifest, read_volume_r32, read_volume_u8, write_manifest, write_volume,
    CaseEntry, Manifest, VoxelScalar};
pub use phantom::{generate_phantom, LesionShape, PhantomSpec};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{MassegError, Result};

/// A regular 3-D grid with physical metadata. Extents and coordinates are
/// ordered depth-first (z, y, x); spacing and origin are in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], fill: T) -> Result<Self> {
        Self::from_data(
            extents,
            spacing,
            [0.0; 3],
            vec![fill; extents.iter().product()],
        )
    }

    pub fn from_data(
        extents: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<T>,
    ) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(MassegError::ShapeMismatch(format!(
                "volume extents must be positive, got {extents:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(MassegError::Config(format!(
                "volume spacing must be positive, got {spacing:?}"
            )));
        }
        let n: usize = extents.iter().product();
        if data.len() != n {
            return Err(MassegError::ShapeMismatch(format!(
                "volume data has {} entries but extents {extents:?} require {n}",
                data.len()
            )));
        }
        Ok(Volume {
            extents,
            spacing,
            origin,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.index(z, y, x);
        self.data[i] = value;
    }

    /// Physical position of a (possibly fractional or out-of-range) voxel
    /// coordinate.
    pub fn voxel_to_mm(&self, voxel: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + voxel[0] * self.spacing[0],
            self.origin[1] + voxel[1] * self.spacing[1],
            self.origin[2] + voxel[2] * self.spacing[2],
        ]
    }

    /// Physical edge lengths in millimetres.
    pub fn physical_extent(&self) -> [f64; 3] {
        [
            self.extents[0] as f64 * self.spacing[0],
            self.extents[1] as f64 * self.spacing[1],
            self.extents[2] as f64 * self.spacing[2],
        ]
    }
}

/// Lesion metadata attached to a phantom case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub case_id: String,
    /// Voxel coordinates (z, y, x) of the mask centroid, rounded.
    pub center: [usize; 3],
    pub diameter_mm: f64,
    pub label: LesionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionLabel {
    Benign,
    Malignant,
}

/// Interpolation scheme for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Target grid for resampling: a uniform scale factor on voxel counts, or an
/// explicit target spacing per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rescale {
    Factor(f64),
    Spacing([f64; 3]),
}

fn resampled_extents(v_extents: [usize; 3], spacing: [f64; 3], rescale: Rescale) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let target = match rescale {
            Rescale::Factor(f) => {
                if !(f > 0.0) {
                    return Err(MassegError::Config(format!(
                        "resample scale must be positive, got {f}"
                    )));
                }
                (v_extents[a] as f64 * f).round()
            }
            Rescale::Spacing(sp) => {
                if !(sp[a] > 0.0) {
                    return Err(MassegError::Config(format!(
                        "target spacing must be positive, got {sp:?}"
                    )));
                }
                (v_extents[a] as f64 * spacing[a] / sp[a]).round()
            }
        };
        if target < 1.0 {
            return Err(MassegError::ShapeMismatch(format!(
                "resample: axis {a} extent collapses below one voxel"
            )));
        }
        out[a] = target as usize;
    }
    Ok(out)
}

/// Axis mapping shared by both interpolation schemes: output voxel centres are
/// placed over the source grid so the physical extent is preserved.
#[inline]
fn source_coord(i: usize, out_e: usize, in_e: usize) -> f64 {
    (i as f64 + 0.5) * in_e as f64 / out_e as f64 - 0.5
}

fn resample_metadata<T: Copy>(v: &Volume<T>, new_extents: [usize; 3]) -> ([f64; 3], [f64; 3]) {
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        spacing[a] = v.spacing[a] * v.extents[a] as f64 / new_extents[a] as f64;
        // Shift the origin so the first new voxel centre sits at the physical
        // position implied by the centre-aligned mapping.
        origin[a] = v.origin[a] + (source_coord(0, new_extents[a], v.extents[a])) * v.spacing[a];
    }
    (spacing, origin)
}

/// Resamples an image volume. Spacing and origin metadata are updated so the
/// physical extent is preserved exactly.
pub fn resample_image(v: &Volume<f32>, rescale: Rescale, interp: Interp) -> Result<Volume<f32>> {
    let ne = resampled_extents(v.extents, v.spacing, rescale)?;
    match interp {
        Interp::Nearest => resample_nearest(v, ne),
        Interp::Trilinear => resample_trilinear(v, ne),
    }
}

/// Resamples a mask volume. Masks always use nearest-neighbour interpolation
/// so they stay binary.
pub fn resample_mask(v: &Volume<u8>, rescale: Rescale) -> Result<Volume<u8>> {
    let ne = resampled_extents(v.extents, v.spacing, rescale)?;
    resample_nearest(v, ne)
}

fn resample_nearest<T: Copy>(v: &Volume<T>, ne: [usize; 3]) -> Result<Volume<T>> {
    let (spacing, origin) = resample_metadata(v, ne);
    let mut data = Vec::with_capacity(ne.iter().product());
    let map_axis = |i: usize, a: usize| -> usize {
        let s = source_coord(i, ne[a], v.extents[a]).round();
        s.clamp(0.0, (v.extents[a] - 1) as f64) as usize
    };
    for z in 0..ne[0] {
        let sz = map_axis(z, 0);
        for y in 0..ne[1] {
            let sy = map_axis(y, 1);
            for x in 0..ne[2] {
                data.push(v.get(sz, sy, map_axis(x, 2)));
            }
        }
    }
    Volume::from_data(ne, spacing, origin, data)
}

fn resample_trilinear(v: &Volume<f32>, ne: [usize; 3]) -> Result<Volume<f32>> {
    let (spacing, origin) = resample_metadata(v, ne);
    let taps = |i: usize, a: usize| -> (usize, usize, f64) {
        let s = source_coord(i, ne[a], v.extents[a]).clamp(0.0, (v.extents[a] - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(v.extents[a] - 1);
        (lo, hi, s - lo as f64)
    };
    let mut data = Vec::with_capacity(ne.iter().product());
    for z in 0..ne[0] {
        let (z0, z1, fz) = taps(z, 0);
        for y in 0..ne[1] {
            let (y0, y1, fy) = taps(y, 1);
            for x in 0..ne[2] {
                let (x0, x1, fx) = taps(x, 2);
                let mut acc = 0.0f64;
                for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            acc += wz * wy * wx * v.get(zi, yi, xi) as f64;
                        }
                    }
                }
                data.push(acc as f32);
            }
        }
    }
    Volume::from_data(ne, spacing, origin, data)
}

/// Extracts a patch of the given extents centred on a voxel coordinate.
///
/// The patch start is `center - floor(extents / 2)` per axis, so even extents
/// break the tie toward the lower index. Out-of-bounds voxels are filled with
/// `pad`; the origin records the patch's physical position, so crops compose.
pub fn crop_patch<T: Copy>(
    v: &Volume<T>,
    center: [i64; 3],
    extents: [usize; 3],
    pad: T,
) -> Result<Volume<T>> {
    if extents.iter().any(|&e| e == 0) {
        return Err(MassegError::Config(format!(
            "crop_patch: extents must be positive, got {extents:?}"
        )));
    }
    let start = [
        center[0] - (extents[0] / 2) as i64,
        center[1] - (extents[1] / 2) as i64,
        center[2] - (extents[2] / 2) as i64,
    ];
    let origin = [
        v.origin[0] + start[0] as f64 * v.spacing[0],
        v.origin[1] + start[1] as f64 * v.spacing[1],
        v.origin[2] + start[2] as f64 * v.spacing[2],
    ];
    let mut data = Vec::with_capacity(extents.iter().product());
    for z in 0..extents[0] as i64 {
        let sz = start[0] + z;
        for y in 0..extents[1] as i64 {
            let sy = start[1] + y;
            for x in 0..extents[2] as i64 {
                let sx = start[2] + x;
                let inside = sz >= 0
                    && sy >= 0
                    && sx >= 0
                    && (sz as usize) < v.extents[0]
                    && (sy as usize) < v.extents[1]
                    && (sx as usize) < v.extents[2];
                data.push(if inside {
                    v.get(sz as usize, sy as usize, sx as usize)
                } else {
                    pad
                });
            }
        }
    }
    Volume::from_data(extents, v.spacing, origin, data)
}

/// Minimum intensity of an image volume, used as the default pad value.
pub fn min_intensity(v: &Volume<f32>) -> f32 {
    v.data.iter().copied().fold(f32::INFINITY, f32::min)
}

/// Counts lesion and non-lesion voxels over the union of patches cropped at
/// every lesion center. Out-of-bounds voxels count as non-lesion. With no
/// centers the counts are `(0, patch volume)` and the ratio is 0.
pub fn balance_ratio(
    mask: &Volume<u8>,
    centers: &[[i64; 3]],
    patch_extents: [usize; 3],
) -> (usize, usize, f64) {
    let patch_volume: usize = patch_extents.iter().product();
    if centers.is_empty() {
        return (0, patch_volume, 0.0);
    }
    let mut union: HashSet<[i64; 3]> = HashSet::new();
    for &c in centers {
        let start = [
            c[0] - (patch_extents[0] / 2) as i64,
            c[1] - (patch_extents[1] / 2) as i64,
            c[2] - (patch_extents[2] / 2) as i64,
        ];
        for z in 0..patch_extents[0] as i64 {
            for y in 0..patch_extents[1] as i64 {
                for x in 0..patch_extents[2] as i64 {
                    union.insert([start[0] + z, start[1] + y, start[2] + x]);
                }
            }
        }
    }
    let mut lesion = 0usize;
    for &[z, y, x] in &union {
        let inside = z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < mask.extents[0]
            && (y as usize) < mask.extents[1]
            && (x as usize) < mask.extents[2];
        if inside && mask.get(z as usize, y as usize, x as usize) != 0 {
            lesion += 1;
        }
    }
    let non_lesion = union.len() - lesion;
    let ratio = if non_lesion == 0 {
        f64::INFINITY
    } else {
        lesion as f64 / non_lesion as f64
    };
    (lesion, non_lesion, ratio)
}

/// Ascending indices of depth slices that contain at least one lesion voxel.
pub fn lesion_slice_indices(mask: &Volume<u8>) -> Vec<usize> {
    let slice_len = mask.extents[1] * mask.extents[2];
    (0..mask.extents[0])
        .filter(|&z| mask.data[z * slice_len..(z + 1) * slice_len].iter().any(|&v| v != 0))
        .collect()
}
