//! Shape metrics on digitized masks: Dice overlap, surface area with the
//! digitization bias correction, compactness, and equivalent diameter.
//!
//!     cargo run --release --example evaluate_masks

use masseg::metrics::{compactness, dice, equivalent_diameter, surface_area};
use masseg::volumes::Volume;

fn ball(extents: [usize; 3], spacing: f64, radius_mm: f64) -> Volume<u8> {
    let mut v = Volume::new(extents, [spacing; 3], 0u8).unwrap();
    let c: Vec<f64> = extents.iter().map(|&e| e as f64 / 2.0).collect();
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                let r = ((z as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (x as f64 - c[2]).powi(2))
                .sqrt()
                    * spacing;
                if r <= radius_mm {
                    v.set(z, y, x, 1);
                }
            }
        }
    }
    v
}

fn main() {
    let gt = ball([64, 64, 64], 0.5, 10.0);
    let shifted = {
        let mut v = ball([64, 64, 64], 0.5, 10.0);
        let src = gt.data.clone();
        // Shift by 2 voxels along x to mimic an imperfect prediction.
        for z in 0..64 {
            for y in 0..64 {
                for x in 2..64 {
                    v.data[(z * 64 + y) * 64 + x] = src[(z * 64 + y) * 64 + x - 2];
                }
            }
        }
        v
    };

    println!("ball radius 10 mm at 0.5 mm spacing");
    println!("equivalent diameter: {:.2} mm", equivalent_diameter(&gt).unwrap());
    println!("face-counted area:   {:.1} mm^2", surface_area(&gt));
    println!(
        "compactness raw {:.3}  corrected {:.3}  (sphere ideal 1.0)",
        compactness(&gt, false).unwrap(),
        compactness(&gt, true).unwrap()
    );
    println!("Dice vs itself:      {:.4}", dice(&gt, &gt).unwrap());
    println!("Dice vs 1 mm shift:  {:.4}", dice(&gt, &shifted).unwrap());
}
