//! Synthetic phantom generation: dark lesions on a speckled background with
//! population statistics matched to published lesion-diameter facts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use super::{LesionAnnotation, LesionLabel, Volume};
use crate::error::{MassegError, Result};

/// Lesion shape family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LesionShape {
    /// Random ellipsoid; axis ratios drawn up to `max_axis_ratio`, normalized
    /// so the equivalent diameter stays at the sampled value.
    Ellipsoid { max_axis_ratio: f64 },
    /// Ellipsoid with a random radial cosine perturbation of the given
    /// relative amplitude, producing lobulated margins.
    Lobulated { max_axis_ratio: f64, amplitude: f64 },
}

/// Generator parameters for one phantom volume.
///
/// Diameters are drawn from a lognormal in millimetres. The defaults
/// (`mu = ln 7`, `sigma = 0.906`) put the population median at 7 mm and
/// roughly 80% of diameters below 15 mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion_count: usize,
    pub diameter_mu: f64,
    pub diameter_sigma: f64,
    pub shape: LesionShape,
    /// Relative darkening of lesions: lesion level = background * (1 - contrast).
    pub contrast: f64,
    /// Shape parameter of the multiplicative gamma speckle (mean held at 1).
    pub speckle_shape: f64,
    /// Probability that a lesion is labelled malignant (metadata only).
    pub malignant_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [64, 96, 96],
            spacing: [0.6; 3],
            lesion_count: 2,
            diameter_mu: 7.0f64.ln(),
            diameter_sigma: 0.906,
            shape: LesionShape::Ellipsoid { max_axis_ratio: 1.3 },
            contrast: 0.8,
            speckle_shape: 4.0,
            malignant_fraction: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e == 0) {
            return Err(MassegError::Config("phantom extents must be positive".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(MassegError::Config("phantom spacing must be positive".into()));
        }
        if !(self.diameter_sigma > 0.0) {
            return Err(MassegError::Config("diameter sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(MassegError::Config("contrast must lie in [0, 1]".into()));
        }
        if !(self.speckle_shape > 0.0) {
            return Err(MassegError::Config("speckle shape must be positive".into()));
        }
        let ratio_ok = match self.shape {
            LesionShape::Ellipsoid { max_axis_ratio } => max_axis_ratio >= 1.0,
            LesionShape::Lobulated { max_axis_ratio, amplitude } => {
                max_axis_ratio >= 1.0 && (0.0..0.5).contains(&amplitude)
            }
        };
        if !ratio_ok {
            return Err(MassegError::Config(
                "axis ratio must be >= 1 and lobulation amplitude in [0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

const BACKGROUND_LEVEL: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 200;

struct Lesion {
    center_mm: [f64; 3],
    semi_axes_mm: [f64; 3],
    diameter_mm: f64,
    // Radial perturbation modes: (frequency vector, phase, coefficient).
    modes: Vec<([f64; 3], f64, f64)>,
    label: LesionLabel,
}

impl Lesion {
    /// Signed ellipsoidal radius fraction: < 1 inside the lesion.
    fn radius_fraction(&self, p_mm: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p_mm[a] - self.center_mm[a]) / self.semi_axes_mm[a];
            q += d * d;
        }
        let r = q.sqrt();
        if self.modes.is_empty() || r < 1e-9 {
            return r;
        }
        // Perturb the boundary radius as a function of direction.
        let u = [
            (p_mm[0] - self.center_mm[0]) / r,
            (p_mm[1] - self.center_mm[1]) / r,
            (p_mm[2] - self.center_mm[2]) / r,
        ];
        let mut factor = 1.0;
        for (k, phase, c) in &self.modes {
            let dot = k[0] * u[0] + k[1] * u[1] + k[2] * u[2];
            factor += c * (dot + phase).cos();
        }
        r / factor.max(0.5)
    }
}

fn sample_lesion(
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
    placed: &[Lesion],
    case_extent_mm: [f64; 3],
    diameters: &LogNormal<f64>,
) -> Result<Lesion> {
    for _ in 0..PLACEMENT_RETRIES {
        let d: f64 = diameters.sample(rng).max(2.0 * spec.spacing.iter().cloned().fold(f64::MAX, f64::min));
        // Margin of one diameter between the lesion centre and every face.
        if case_extent_mm.iter().any(|&e| e <= 2.0 * d) {
            continue;
        }
        let center_mm = [
            rng.gen_range(d..case_extent_mm[0] - d),
            rng.gen_range(d..case_extent_mm[1] - d),
            rng.gen_range(d..case_extent_mm[2] - d),
        ];
        let overlaps = placed.iter().any(|l| {
            let dist: f64 = (0..3)
                .map(|a| (l.center_mm[a] - center_mm[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            dist < 0.75 * (l.diameter_mm + d)
        });
        if overlaps {
            continue;
        }
        let (max_ratio, amplitude) = match spec.shape {
            LesionShape::Ellipsoid { max_axis_ratio } => (max_axis_ratio, 0.0),
            LesionShape::Lobulated { max_axis_ratio, amplitude } => (max_axis_ratio, amplitude),
        };
        // Axis ratios normalized to geometric mean 1, preserving volume.
        let raw = [
            rng.gen_range(1.0..=max_ratio),
            rng.gen_range(1.0..=max_ratio),
            rng.gen_range(1.0..=max_ratio),
        ];
        let gm = (raw[0] * raw[1] * raw[2]).cbrt();
        let semi_axes_mm = [
            0.5 * d * raw[0] / gm,
            0.5 * d * raw[1] / gm,
            0.5 * d * raw[2] / gm,
        ];
        let mut modes = Vec::new();
        if amplitude > 0.0 {
            let n = rng.gen_range(2..=4);
            for _ in 0..n {
                let k = [
                    rng.gen_range(2.0..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    rng.gen_range(2.0..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    rng.gen_range(2.0..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                ];
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                modes.push((k, phase, amplitude / n as f64));
            }
        }
        let label = if rng.gen_bool(spec.malignant_fraction.clamp(0.0, 1.0)) {
            LesionLabel::Malignant
        } else {
            LesionLabel::Benign
        };
        return Ok(Lesion {
            center_mm,
            semi_axes_mm,
            diameter_mm: d,
            modes,
            label,
        });
    }
    Err(MassegError::Generation(format!(
        "could not place a lesion with margin >= 1 diameter inside {case_extent_mm:?} mm \
         after {PLACEMENT_RETRIES} attempts"
    )))
}

/// Generates one phantom: a speckled image volume, the exact voxelization of
/// the lesion geometry as a binary mask, and per-lesion annotations. Output is
/// deterministic for a fixed spec and seed.
pub fn generate_phantom(
    spec: &PhantomSpec,
    case_id: &str,
    seed: u64,
) -> Result<(Volume<f32>, Volume<u8>, Vec<LesionAnnotation>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent_mm = [
        spec.extents[0] as f64 * spec.spacing[0],
        spec.extents[1] as f64 * spec.spacing[1],
        spec.extents[2] as f64 * spec.spacing[2],
    ];
    let diameters = LogNormal::new(spec.diameter_mu, spec.diameter_sigma)
        .map_err(|e| MassegError::Config(format!("bad diameter distribution: {e}")))?;

    let mut lesions: Vec<Lesion> = Vec::with_capacity(spec.lesion_count);
    for _ in 0..spec.lesion_count {
        let lesion = sample_lesion(spec, &mut rng, &lesions, extent_mm, &diameters)?;
        lesions.push(lesion);
    }

    let mut mask = Volume::new(spec.extents, spec.spacing, 0u8)?;
    let mut centroids = vec![([0.0f64; 3], 0usize); lesions.len()];
    for (li, lesion) in lesions.iter().enumerate() {
        // Voxelize over the lesion's bounding box only.
        let max_semi = lesion
            .semi_axes_mm
            .iter()
            .cloned()
            .fold(0.0, f64::max)
            * 1.6;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = (((lesion.center_mm[a] - max_semi) / spec.spacing[a]).floor().max(0.0)) as usize;
            hi[a] = (((lesion.center_mm[a] + max_semi) / spec.spacing[a]).ceil() as usize)
                .min(spec.extents[a] - 1);
        }
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [
                        (z as f64 + 0.5) * spec.spacing[0],
                        (y as f64 + 0.5) * spec.spacing[1],
                        (x as f64 + 0.5) * spec.spacing[2],
                    ];
                    if lesion.radius_fraction(p) <= 1.0 {
                        mask.set(z, y, x, 1);
                        let (c, n) = &mut centroids[li];
                        for a in 0..3 {
                            c[a] += [z, y, x][a] as f64;
                        }
                        *n += 1;
                    }
                }
            }
        }
        // Guarantee at least the centre voxel for sub-voxel lesions.
        if centroids[li].1 == 0 {
            let z = ((lesion.center_mm[0] / spec.spacing[0]) as usize).min(spec.extents[0] - 1);
            let y = ((lesion.center_mm[1] / spec.spacing[1]) as usize).min(spec.extents[1] - 1);
            let x = ((lesion.center_mm[2] / spec.spacing[2]) as usize).min(spec.extents[2] - 1);
            mask.set(z, y, x, 1);
            centroids[li] = ([z as f64, y as f64, x as f64], 1);
        }
    }

    let lesion_level = BACKGROUND_LEVEL * (1.0 - spec.contrast);
    let speckle = Gamma::new(spec.speckle_shape, 1.0 / spec.speckle_shape)
        .map_err(|e| MassegError::Config(format!("bad speckle distribution: {e}")))?;
    let mut image = Volume::new(spec.extents, spec.spacing, 0.0f32)?;
    for i in 0..image.data.len() {
        let level = if mask.data[i] != 0 {
            lesion_level
        } else {
            BACKGROUND_LEVEL
        };
        image.data[i] = (level * speckle.sample(&mut rng)) as f32;
    }

    let annotations = lesions
        .iter()
        .zip(centroids.iter())
        .map(|(lesion, (c, n))| {
            let n = (*n).max(1) as f64;
            LesionAnnotation {
                case_id: case_id.to_string(),
                center: [
                    (c[0] / n).round() as usize,
                    (c[1] / n).round() as usize,
                    (c[2] / n).round() as usize,
                ],
                diameter_mm: lesion.diameter_mm,
                label: lesion.label,
            }
        })
        .collect();
    Ok((image, mask, annotations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lesions_gives_empty_mask() {
        let spec = PhantomSpec {
            lesion_count: 0,
            extents: [16, 16, 16],
            ..PhantomSpec::default()
        };
        let (_, mask, anns) = generate_phantom(&spec, "c0", 1).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0));
        assert!(anns.is_empty());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, "c0", 77).unwrap();
        let b = generate_phantom(&spec, "c0", 77).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let c = generate_phantom(&spec, "c0", 78).unwrap();
        assert_ne!(a.0.data, c.0.data);
    }

    #[test]
    fn spherical_lesion_volume_matches_ball() {
        // Near-degenerate diameter distribution pinned at 12 mm (radius 10
        // voxels at 0.6 mm spacing), forced spherical.
        let spec = PhantomSpec {
            extents: [64, 64, 64],
            lesion_count: 1,
            diameter_mu: 12.0f64.ln(),
            diameter_sigma: 1e-6,
            shape: LesionShape::Ellipsoid { max_axis_ratio: 1.0 },
            ..PhantomSpec::default()
        };
        let (_, mask, anns) = generate_phantom(&spec, "c0", 5).unwrap();
        let count = mask.data.iter().filter(|&&v| v != 0).count() as f64;
        let r: f64 = 0.5 * 12.0 / 0.6;
        let ball = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!(
            (count - ball).abs() / ball < 0.05,
            "count {count} vs ball {ball}"
        );
        assert_eq!(anns.len(), 1);
        assert!((anns[0].diameter_mm - 12.0).abs() < 0.01);
    }

    #[test]
    fn annotation_centers_lie_inside_lesions() {
        let spec = PhantomSpec {
            lesion_count: 3,
            ..PhantomSpec::default()
        };
        let (_, mask, anns) = generate_phantom(&spec, "c0", 9).unwrap();
        assert_eq!(anns.len(), 3);
        for ann in &anns {
            let [z, y, x] = ann.center;
            assert!(z < mask.extents[0] && y < mask.extents[1] && x < mask.extents[2]);
            assert_eq!(mask.get(z, y, x), 1, "centroid voxel not in mask");
        }
    }

    #[test]
    fn infeasible_placement_errors() {
        let spec = PhantomSpec {
            extents: [8, 8, 8],
            lesion_count: 1,
            diameter_mu: 40.0f64.ln(),
            diameter_sigma: 1e-6,
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom(&spec, "c0", 1),
            Err(MassegError::Generation(_))
        ));
    }

    #[test]
    fn lesions_are_darker_than_background() {
        let spec = PhantomSpec {
            lesion_count: 1,
            diameter_mu: 12.0f64.ln(),
            diameter_sigma: 0.05,
            ..PhantomSpec::default()
        };
        let (image, mask, _) = generate_phantom(&spec, "c0", 3).unwrap();
        let mean = |pred: &dyn Fn(usize) -> bool| {
            let vals: Vec<f64> = (0..image.data.len())
                .filter(|&i| pred(i))
                .map(|i| image.data[i] as f64)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let lesion_mean = mean(&|i| mask.data[i] != 0);
        let bg_mean = mean(&|i| mask.data[i] == 0);
        assert!(lesion_mean < 0.5 * bg_mean, "{lesion_mean} vs {bg_mean}");
    }
}
