//! Overfits a tiny 3-D U-net on a handful of phantom patches and prints the
//! training curve. A healthy pipeline drives the train DSC close to 1.
//!
//!     cargo run --release --example overfit_tiny

use masseg::inference::patch_to_tensor;
use masseg::models::{Model, ModelConfig};
use masseg::tensor::Tensor;
use masseg::training::{train, Dataset, Sample, TrainConfig};
use masseg::volumes::{crop_patch, generate_phantom, min_intensity, PhantomSpec};

fn main() {
    let spec = PhantomSpec {
        extents: [32, 48, 48],
        lesion_count: 1,
        ..PhantomSpec::default()
    };
    let extents = [8, 16, 16];

    let mut samples = Vec::new();
    for seed in 0..4u64 {
        let id = format!("case-{seed}");
        let (image, mask, lesions) = generate_phantom(&spec, &id, seed).expect("phantom");
        let c = lesions[0].center;
        let center = [c[0] as i64, c[1] as i64, c[2] as i64];
        let patch = crop_patch(&image, center, extents, min_intensity(&image)).unwrap();
        let target = crop_patch(&mask, center, extents, 0u8).unwrap();
        let target = Tensor::from_vec(
            &[1, 1, 8, 16, 16],
            target.data.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        samples.push(Sample {
            case_id: id,
            inputs: vec![patch_to_tensor(&patch, 3)],
            target,
        });
    }
    let dataset = Dataset { samples };

    let arch = ModelConfig::single_3d(2, 4);
    let mut model = Model::<f32>::build(&arch, 99).expect("model");
    let config = TrainConfig {
        epochs: 60,
        batch_size: 2,
        patch_extents: extents.to_vec(),
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &dataset, None, &config).expect("training");
    for r in outcome.history.iter().step_by(10) {
        println!(
            "epoch {:3}  loss {:.4}  train DSC {:.4}",
            r.epoch, r.train_loss, r.val_dsc
        );
    }
    println!(
        "best DSC {:.4} at epoch {}",
        outcome.best_val_dsc, outcome.best_epoch
    );
}
