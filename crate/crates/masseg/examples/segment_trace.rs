//! Runs the recursive down-sampling segmentation loop with a rule-based stub
//! and prints the per-attempt trace: a mass wider than the patch keeps
//! touching the boundary until a coarser scale fits it.
//!
//!     cargo run --release --example segment_trace

use masseg::inference::{segment_with_rescaling, stubs::ThresholdStub, ScaleSchedule};
use masseg::volumes::Volume;
use std::str::FromStr;

fn main() {
    // Bright ball of radius 11 voxels in a 48-cube; the stub labels
    // everything above the threshold as mass.
    let extents = [48, 48, 48];
    let mut volume = Volume::new(extents, [1.0; 3], 0.1f32).unwrap();
    let c = 24.0;
    for z in 0..48 {
        for y in 0..48 {
            for x in 0..48 {
                let r = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2)
                    + (x as f64 - c).powi(2))
                .sqrt();
                if r <= 11.0 {
                    volume.set(z, y, x, 0.9);
                }
            }
        }
    }

    let schedule = ScaleSchedule::from_str("0.75,0.5,0.4").unwrap();
    let mut stub = ThresholdStub { dims: 3, level: 0.5, calls: 0 };
    let result =
        segment_with_rescaling(&mut stub, &volume, [24, 24, 24], [16, 16, 16], &schedule)
            .expect("segmentation");

    println!("scale   boundary+  accepted");
    for t in &result.trace {
        println!("{:<7} {:<10} {}", t.scale, t.boundary_positive, t.accepted);
    }
    for w in &result.warnings {
        println!("warning: {w}");
    }
    let positives = result.mask.data.iter().filter(|&&v| v != 0).count();
    println!("final mask: {positives} positive voxels on the original grid");
}
