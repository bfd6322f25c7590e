//! Verifies the hand-written backward pass of a small 3-D U-net against
//! central finite differences in f64.
//!
//!     cargo run --release --example gradient_check

use masseg::models::{Mode, Model, ModelConfig};
use masseg::tensor::Tensor;
use rand::prelude::*;

const STEP: f64 = 1e-4;

fn main() {
    let config = ModelConfig::single_3d(1, 2);
    let mut model = Model::<f64>::build(&config, 7).expect("model");
    println!(
        "depth {} base channels {}: {} parameters",
        config.depth,
        config.base_channels,
        model.parameter_count()
    );

    let mut rng = StdRng::seed_from_u64(1234);
    let n = 4 * 4 * 4;
    let input = Tensor::from_vec(
        &[1, 1, 4, 4, 4],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let out = model.forward(&[input.clone()], Mode::Train).expect("forward");
    let cochain = Tensor::from_vec(
        out.shape(),
        (0..out.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    )
    .unwrap();
    let grads = model.backward(&cochain).expect("backward");

    // Sample parameter coordinates, perturb, and compare.
    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |name, _, values| {
        names.push((name.to_string(), values.len()));
    });
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..40 {
        let (name, len) = names[rng.gen_range(0..names.len())].clone();
        let idx = rng.gen_range(0..len);
        let analytic = grads.params[&name][idx];
        let mut losses = [0.0f64; 2];
        for (s, delta) in [(0usize, STEP), (1, -STEP)] {
            model.visit_params_mut(&mut |n, _, values| {
                if n == name {
                    values[idx] += delta;
                }
            });
            let y = model.forward(&[input.clone()], Mode::Train).unwrap();
            losses[s] = y.dot(&cochain);
            model.visit_params_mut(&mut |n, _, values| {
                if n == name {
                    values[idx] -= delta;
                }
            });
        }
        let fd = (losses[0] - losses[1]) / (2.0 * STEP);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    println!("{checked} sampled coordinates, worst relative error {worst:.2e}");
    assert!(worst < 1e-4, "gradient check failed");
    println!("gradient check passed");
}
