//! Turns a dataset manifest into in-memory training samples: one sample per
//! annotated lesion, cropped around the annotation centre.

use std::path::Path;

use crate::error::{MassegError, Result};
use crate::inference::{patch_to_tensor, rederive_center};
use crate::models::ModelConfig;
use crate::tensor::Tensor;
use crate::training::{Dataset, Sample};
use crate::volumes::{
    crop_patch, min_intensity, read_manifest, read_volume_r32, read_volume_u8, resample_image,
    CaseEntry, Interp, Manifest, Rescale, Volume,
};

/// A case with its volumes loaded from disk. Paths in the manifest are
/// resolved relative to the manifest's directory.
pub struct LoadedCase {
    pub entry: CaseEntry,
    pub image: Volume<f32>,
    pub mask: Volume<u8>,
}

pub fn load_case(manifest_dir: &Path, entry: &CaseEntry) -> Result<LoadedCase> {
    let image = read_volume_r32(&manifest_dir.join(&entry.image))?;
    let mask = read_volume_u8(&manifest_dir.join(&entry.mask))?;
    if image.extents != mask.extents {
        return Err(MassegError::ShapeMismatch(format!(
            "case {}: image extents {:?} but mask extents {:?}",
            entry.id, image.extents, mask.extents
        )));
    }
    Ok(LoadedCase {
        entry: entry.clone(),
        image,
        mask,
    })
}

pub fn read_manifest_cases(manifest_path: &Path) -> Result<(Manifest, Vec<LoadedCase>)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for entry in &manifest.cases {
        cases.push(load_case(dir, entry)?);
    }
    Ok((manifest, cases))
}

/// Patch extents as (z, y, x), forcing a single slice for 2-D models.
fn patch_extents_for(model: &ModelConfig, configured: &[usize]) -> Result<[usize; 3]> {
    if configured.len() != 3 {
        return Err(MassegError::Config(format!(
            "patch_extents must have 3 entries (z, y, x), got {}",
            configured.len()
        )));
    }
    let mut e = [configured[0], configured[1], configured[2]];
    if model.dims == 2 {
        e[0] = 1;
    }
    let div = model.extent_divisor();
    let spatial = if model.dims == 2 { &e[1..] } else { &e[..] };
    for &x in spatial {
        if x == 0 || x % div != 0 {
            return Err(MassegError::Config(format!(
                "patch extent {x} is not a positive multiple of {div}"
            )));
        }
    }
    Ok(e)
}

/// Builds one training sample per lesion of `case`: the native image patch
/// (plus a wider coarse patch for dual-path models) and the mask patch.
pub fn samples_for_case(
    case: &LoadedCase,
    model: &ModelConfig,
    patch_extents: &[usize],
) -> Result<Vec<Sample<f32>>> {
    let extents = patch_extents_for(model, patch_extents)?;
    let pad = min_intensity(&case.image);
    let coarse = if model.dual_path {
        Some(resample_image(
            &case.image,
            Rescale::Factor(model.second_path_scale),
            Interp::Trilinear,
        )?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(case.entry.lesions.len());
    for lesion in &case.entry.lesions {
        let center = [
            lesion.center[0] as i64,
            lesion.center[1] as i64,
            lesion.center[2] as i64,
        ];
        let p1 = crop_patch(&case.image, center, extents, pad)?;
        let mut inputs = vec![patch_to_tensor(&p1, model.dims)];
        if let Some(coarse) = &coarse {
            let c2 = rederive_center(&case.image, center, coarse);
            let p2 = crop_patch(coarse, c2, extents, pad)?;
            inputs.push(patch_to_tensor(&p2, model.dims));
        }
        let m = crop_patch(&case.mask, center, extents, 0u8)?;
        let data: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        let mut shape = inputs[0].shape().to_vec();
        shape[1] = 1;
        let target = Tensor::from_vec(&shape, data)?;
        samples.push(Sample {
            case_id: case.entry.id.clone(),
            inputs,
            target,
        });
    }
    Ok(samples)
}

/// Loads every case listed in a manifest and assembles a lesion-level dataset.
pub fn dataset_from_manifest(
    manifest_path: &Path,
    model: &ModelConfig,
    patch_extents: &[usize],
) -> Result<Dataset<f32>> {
    let (_, cases) = read_manifest_cases(manifest_path)?;
    let mut samples = Vec::new();
    for case in &cases {
        samples.extend(samples_for_case(case, model, patch_extents)?);
    }
    Ok(Dataset { samples })
}
