//! Generates a batch of synthetic phantoms and prints the empirical
//! cumulative distribution of lesion equivalent diameters.
//!
//!     cargo run --release --example phantom_stats

use masseg::volumes::{generate_phantom, LesionAnnotation, PhantomSpec};

fn main() {
    let spec = PhantomSpec {
        extents: [96, 96, 96],
        lesion_count: 2,
        ..PhantomSpec::default()
    };
    let volumes = 25;

    let mut lesions: Vec<LesionAnnotation> = Vec::new();
    for seed in 0..volumes {
        let id = format!("case-{seed:03}");
        let (_, mask, annotations) =
            generate_phantom(&spec, &id, seed).expect("phantom generation");
        let foreground = mask.data.iter().filter(|&&v| v != 0).count();
        if seed < 3 {
            println!(
                "{id}: {} lesions, {foreground} foreground voxels",
                annotations.len()
            );
        }
        lesions.extend(annotations);
    }

    let mut diameters: Vec<f64> = lesions.iter().map(|l| l.diameter_mm).collect();
    diameters.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = diameters.len();
    let fraction_below = |d: f64| diameters.iter().filter(|&&x| x <= d).count() as f64 / n as f64;

    println!("\n{n} lesions from {volumes} phantoms");
    println!("median diameter: {:.2} mm", diameters[n / 2]);
    println!("fraction <= 7 mm:  {:.3}", fraction_below(7.0));
    println!("fraction <= 15 mm: {:.3}", fraction_below(15.0));
    println!("range: {:.2} .. {:.2} mm", diameters[0], diameters[n - 1]);
}
