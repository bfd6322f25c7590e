//! Evaluation metrics: Dice similarity, surface area, compactness,
//! equivalent diameter, cumulative diameter histograms, and DSC-vs-property
//! tables.

use serde::{Deserialize, Serialize};

use crate::error::{MassegError, Result};
use crate::volumes::{LesionAnnotation, Volume};

/// Average surface-area bias of the face-counting estimator: a digitized ball
/// exposes about 1.5x the analytic sphere area, so raw compactness of a ball
/// is about 1.5^3 = 3.375 instead of 1.
pub const FACE_COUNT_BIAS: f64 = 1.5;

/// Per-case evaluation record feeding the DSC-vs-property analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub dsc: f64,
    pub gt_compactness: f64,
    pub predicted_compactness: f64,
    pub gt_diameter_mm: f64,
    pub gt_volume_mm3: f64,
}

fn check_grids(a: &Volume<u8>, b: &Volume<u8>) -> Result<()> {
    if a.extents != b.extents {
        return Err(MassegError::ShapeMismatch(format!(
            "dice: grids differ: {:?} vs {:?}",
            a.extents, b.extents
        )));
    }
    Ok(())
}

/// Dice similarity coefficient `2|a n b| / (|a| + |b|)`, with
/// `dice(empty, empty) = 1` by convention.
pub fn dice(a: &Volume<u8>, b: &Volume<u8>) -> Result<f64> {
    check_grids(a, b)?;
    let mut intersect = 0usize;
    let mut total = 0usize;
    for (&va, &vb) in a.data.iter().zip(b.data.iter()) {
        let (va, vb) = ((va != 0) as usize, (vb != 0) as usize);
        intersect += va & vb;
        total += va + vb;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * intersect as f64 / total as f64
    })
}

/// Face-counting surface area in mm^2: the summed area of voxel faces
/// adjacent to background (or to the volume border).
pub fn surface_area(mask: &Volume<u8>) -> f64 {
    let [nz, ny, nx] = mask.extents;
    let [sz, sy, sx] = mask.spacing;
    // Face area per axis: the face normal to axis a has the area of the other
    // two spacings.
    let face = [sy * sx, sz * sx, sz * sy];
    let mut area = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(z, y, x) == 0 {
                    continue;
                }
                let neighbors = [
                    (z.checked_sub(1).map(|z| (z, y, x)), 0),
                    ((z + 1 < nz).then_some((z + 1, y, x)), 0),
                    (y.checked_sub(1).map(|y| (z, y, x)), 1),
                    ((y + 1 < ny).then_some((z, y + 1, x)), 1),
                    (x.checked_sub(1).map(|x| (z, y, x)), 2),
                    ((x + 1 < nx).then_some((z, y, x + 1)), 2),
                ];
                for (coord, axis) in neighbors {
                    let exposed = match coord {
                        Some((az, ay, ax)) => mask.get(az, ay, ax) == 0,
                        None => true,
                    };
                    if exposed {
                        area += face[axis];
                    }
                }
            }
        }
    }
    area
}

/// Voxel-count volume in mm^3.
pub fn mask_volume_mm3(mask: &Volume<u8>) -> f64 {
    let count = mask.data.iter().filter(|&&v| v != 0).count() as f64;
    count * mask.spacing[0] * mask.spacing[1] * mask.spacing[2]
}

/// Compactness `A^3 / (36 pi V^2)` from the face-counting surface area.
///
/// The raw estimator is biased: a digitized ball scores about 3.375 rather
/// than the analytic 1. With `bias_corrected` the area is divided by
/// [`FACE_COUNT_BIAS`] before cubing.
pub fn compactness(mask: &Volume<u8>, bias_corrected: bool) -> Result<f64> {
    let v = mask_volume_mm3(mask);
    if v == 0.0 {
        return Err(MassegError::Config(
            "compactness is undefined for an empty mask".into(),
        ));
    }
    let mut a = surface_area(mask);
    if bias_corrected {
        a /= FACE_COUNT_BIAS;
    }
    Ok(a.powi(3) / (36.0 * std::f64::consts::PI * v * v))
}

/// Diameter of the sphere whose volume equals the mask volume:
/// `d = 2 (3V / 4pi)^(1/3)`.
pub fn equivalent_diameter(mask: &Volume<u8>) -> Result<f64> {
    let v = mask_volume_mm3(mask);
    if v == 0.0 {
        return Err(MassegError::Config(
            "equivalent diameter is undefined for an empty mask".into(),
        ));
    }
    Ok(2.0 * (3.0 * v / (4.0 * std::f64::consts::PI)).cbrt())
}

/// Empirical CDF of annotation diameters: sorted diameters paired with the
/// cumulative fraction at (and including) each diameter.
pub fn cumulative_diameter_histogram(
    annotations: &[LesionAnnotation],
) -> Result<Vec<(f64, f64)>> {
    if annotations.is_empty() {
        return Err(MassegError::Config(
            "cumulative histogram needs at least one annotation".into(),
        ));
    }
    let mut diameters: Vec<f64> = annotations.iter().map(|a| a.diameter_mm).collect();
    diameters.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = diameters.len() as f64;
    Ok(diameters
        .iter()
        .enumerate()
        .map(|(i, &d)| (d, (i + 1) as f64 / n))
        .collect())
}

/// Property on the x axis of a DSC scatter table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterProperty {
    Compactness,
    Size,
}

/// One plot-ready scatter row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub case_id: String,
    pub x: f64,
    pub dsc: f64,
    pub gt_compactness: f64,
    pub predicted_compactness: f64,
}

/// Emits (property, DSC) pairs, sorted by case id, plus ground-truth vs
/// predicted compactness for the boundary-simplicity analysis.
pub fn dsc_vs_property(records: &[EvalRecord], property: ScatterProperty) -> Vec<ScatterRow> {
    let mut rows: Vec<ScatterRow> = records
        .iter()
        .map(|r| ScatterRow {
            case_id: r.case_id.clone(),
            x: match property {
                ScatterProperty::Compactness => r.gt_compactness,
                ScatterProperty::Size => r.gt_volume_mm3,
            },
            dsc: r.dsc,
            gt_compactness: r.gt_compactness,
            predicted_compactness: r.predicted_compactness,
        })
        .collect();
    rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    rows
}

/// CSV serialization of an evaluation table.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut out = String::from(
        "case_id,dsc,gt_compactness,predicted_compactness,gt_diameter_mm,gt_volume_mm3\n",
    );
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.case_id,
            r.dsc,
            r.gt_compactness,
            r.predicted_compactness,
            r.gt_diameter_mm,
            r.gt_volume_mm3
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::LesionLabel;

    fn ball_mask(extent: usize, r: f64, spacing: f64) -> Volume<u8> {
        let mut m = Volume::new([extent; 3], [spacing; 3], 0u8).unwrap();
        let c = (extent / 2) as f64;
        for z in 0..extent {
            for y in 0..extent {
                for x in 0..extent {
                    let d2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                    if d2.sqrt() <= r {
                        m.set(z, y, x, 1);
                    }
                }
            }
        }
        m
    }

    #[test]
    fn dice_basics() {
        let a = ball_mask(16, 5.0, 0.6);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let empty = Volume::new([16; 3], [0.6; 3], 0u8).unwrap();
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        let mut a = Volume::new([4, 4, 4], [1.0; 3], 0u8).unwrap();
        let mut b = Volume::new([4, 4, 4], [1.0; 3], 0u8).unwrap();
        for i in 0..8 {
            a.data[i] = 1;
            b.data[i + 4] = 1;
        }
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn dice_symmetry_and_grid_check() {
        let a = ball_mask(12, 3.0, 0.6);
        let b = ball_mask(12, 4.0, 0.6);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let c = Volume::new([10; 3], [0.6; 3], 0u8).unwrap();
        assert!(dice(&a, &c).is_err());
    }

    #[test]
    fn surface_area_single_voxel_and_bar() {
        let mut m = Volume::new([4, 4, 4], [0.6; 3], 0u8).unwrap();
        m.set(1, 1, 1, 1);
        assert!((surface_area(&m) - 2.16).abs() < 1e-12);
        m.set(1, 1, 2, 1);
        assert!((surface_area(&m) - 10.0 * 0.36).abs() < 1e-12);
        let empty = Volume::new([4, 4, 4], [0.6; 3], 0u8).unwrap();
        assert_eq!(surface_area(&empty), 0.0);
    }

    #[test]
    fn surface_area_additive_for_separated_masks() {
        let mut a = Volume::new([8, 8, 8], [0.5; 3], 0u8).unwrap();
        a.set(1, 1, 1, 1);
        let mut b = Volume::new([8, 8, 8], [0.5; 3], 0u8).unwrap();
        b.set(5, 5, 5, 1);
        let mut both = Volume::new([8, 8, 8], [0.5; 3], 0u8).unwrap();
        both.set(1, 1, 1, 1);
        both.set(5, 5, 5, 1);
        assert!((surface_area(&a) + surface_area(&b) - surface_area(&both)).abs() < 1e-12);
    }

    #[test]
    fn border_faces_count_as_exposed() {
        let m = Volume::new([1, 1, 1], [1.0; 3], 1u8).unwrap();
        assert_eq!(surface_area(&m), 6.0);
    }

    #[test]
    fn analytic_compactness_identities() {
        // These are closed-form checks of the formula itself, not the voxel
        // estimator: sphere -> 1, cube -> 6/pi.
        let pi = std::f64::consts::PI;
        let r = 3.7f64;
        let a_sphere = 4.0 * pi * r * r;
        let v_sphere = 4.0 / 3.0 * pi * r.powi(3);
        let c_sphere = a_sphere.powi(3) / (36.0 * pi * v_sphere * v_sphere);
        assert!((c_sphere - 1.0).abs() < 1e-12);
        let s = 2.9f64;
        let c_cube = (6.0 * s * s).powi(3) / (36.0 * pi * s.powi(6));
        assert!((c_cube - 6.0 / pi).abs() < 1e-12);
    }

    #[test]
    fn digitized_ball_compactness() {
        let m = ball_mask(32, 12.0, 0.6);
        let raw = compactness(&m, false).unwrap();
        let corrected = compactness(&m, true).unwrap();
        // Raw face counting carries the ~1.5^3 bias.
        assert!((raw - 3.375).abs() / 3.375 < 0.15, "raw {raw}");
        assert!((corrected - 1.0).abs() < 0.1, "corrected {corrected}");
    }

    #[test]
    fn compactness_scale_invariant() {
        let m = ball_mask(20, 7.0, 0.6);
        let mut scaled = m.clone();
        scaled.spacing = [1.8; 3];
        let c0 = compactness(&m, true).unwrap();
        let c1 = compactness(&scaled, true).unwrap();
        assert!((c0 - c1).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_errors() {
        let empty = Volume::new([4; 3], [1.0; 3], 0u8).unwrap();
        assert!(compactness(&empty, false).is_err());
        assert!(equivalent_diameter(&empty).is_err());
    }

    #[test]
    fn equivalent_diameter_values() {
        let mut single = Volume::new([4; 3], [0.6; 3], 0u8).unwrap();
        single.set(1, 1, 1, 1);
        let d = equivalent_diameter(&single).unwrap();
        assert!((d - 0.7446).abs() < 1e-3, "{d}");
        let ball = ball_mask(32, 10.0, 0.5);
        let d = equivalent_diameter(&ball).unwrap();
        assert!((d - 2.0 * 10.0 * 0.5).abs() / (2.0 * 10.0 * 0.5) < 0.05, "{d}");
    }

    #[test]
    fn equivalent_diameter_cube_root_homogeneity() {
        let m = ball_mask(16, 5.0, 0.6);
        let mut scaled = m.clone();
        scaled.spacing = [1.2; 3]; // 8x the voxel volume
        let d1 = equivalent_diameter(&m).unwrap();
        let d2 = equivalent_diameter(&scaled).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    fn ann(d: f64) -> LesionAnnotation {
        LesionAnnotation {
            case_id: "c".into(),
            center: [0, 0, 0],
            diameter_mm: d,
            label: LesionLabel::Benign,
        }
    }

    #[test]
    fn cumulative_histogram_counts() {
        let curve = cumulative_diameter_histogram(&[ann(15.0), ann(5.0), ann(10.0)]).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[0], (5.0, 1.0 / 3.0));
        assert_eq!(curve[1], (10.0, 2.0 / 3.0));
        assert_eq!(curve[2], (15.0, 1.0));
        let flat = cumulative_diameter_histogram(&[ann(7.0), ann(7.0)]).unwrap();
        assert_eq!(flat.last().unwrap().1, 1.0);
        assert!(cumulative_diameter_histogram(&[]).is_err());
    }

    #[test]
    fn scatter_rows_sorted_by_case_id() {
        let rec = |id: &str, c: f64| EvalRecord {
            case_id: id.into(),
            dsc: 0.8,
            gt_compactness: c,
            predicted_compactness: c - 0.1,
            gt_diameter_mm: 10.0,
            gt_volume_mm3: 500.0,
        };
        let unsorted = vec![rec("b", 2.0), rec("a", 3.0), rec("c", 1.5)];
        let rows = dsc_vs_property(&unsorted, ScatterProperty::Compactness);
        let ids: Vec<&str> = rows.iter().map(|r| r.case_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(rows[0].x, 3.0);
        let by_size = dsc_vs_property(&unsorted, ScatterProperty::Size);
        assert_eq!(by_size[0].x, 500.0);
    }

    #[test]
    fn smoothed_masks_are_more_compact() {
        // Erode-then-dilate (morphological opening) simplifies boundaries;
        // predicted compactness must not exceed the ground truth's.
        let mut gt = ball_mask(28, 9.0, 0.6);
        // Roughen the ground truth with protrusions.
        for (z, y, x) in [(5usize, 14usize, 14usize), (14, 23, 14), (14, 14, 23), (22, 7, 14)] {
            gt.set(z, y, x, 1);
            gt.set(z.min(26) + 1, y, x, 1);
        }
        let opened = dilate(&erode(&gt));
        let c_gt = compactness(&gt, true).unwrap();
        let c_pred = compactness(&opened, true).unwrap();
        assert!(c_pred <= c_gt, "{c_pred} vs {c_gt}");
    }

    fn erode(m: &Volume<u8>) -> Volume<u8> {
        morph(m, false)
    }

    fn dilate(m: &Volume<u8>) -> Volume<u8> {
        morph(m, true)
    }

    fn morph(m: &Volume<u8>, dilate: bool) -> Volume<u8> {
        let [nz, ny, nx] = m.extents;
        let mut out = m.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut hit = false;
                    for (dz, dy, dx) in
                        [(0i64, 0i64, 0i64), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    {
                        let (az, ay, ax) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        let v = if az < 0
                            || ay < 0
                            || ax < 0
                            || az as usize >= nz
                            || ay as usize >= ny
                            || ax as usize >= nx
                        {
                            0
                        } else {
                            m.get(az as usize, ay as usize, ax as usize)
                        };
                        let active = v != 0;
                        if dilate && active {
                            hit = true;
                        }
                        if !dilate && !active {
                            hit = true;
                        }
                    }
                    out.set(z, y, x, if dilate { hit as u8 } else { !hit as u8 });
                }
            }
        }
        out
    }
}
