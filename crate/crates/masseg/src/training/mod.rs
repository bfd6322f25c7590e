//! Loss, optimizer, training loop, and cross-validation harness.

mod adam;
mod loss;

pub use adam::AdamState;
pub use loss::soft_dice_loss;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MassegError, Result};
use crate::models::{Mode, Model, ModelConfig};
use crate::ops::{softmax_backward, softmax_over_channels};
use crate::tensor::{Scalar, Tensor};

/// One training example: per-path input patches plus a binary foreground mask.
/// All tensors carry batch extent 1; batches are assembled by the loop.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub case_id: String,
    pub inputs: Vec<Tensor<T>>,
    pub target: Tensor<T>,
}

/// An in-memory patch dataset.
#[derive(Debug, Clone, Default)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new() -> Self {
        Dataset { samples: Vec::new() }
    }

    pub fn push(&mut self, sample: Sample<T>) {
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct case ids in sorted order.
    pub fn case_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.case_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Subset containing only samples whose case id satisfies the predicate.
    pub fn filter<F: Fn(&str) -> bool>(&self, keep: F) -> Dataset<T> {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| keep(&s.case_id))
                .cloned()
                .collect(),
        }
    }
}

/// Training hyperparameters. Patch extents are stored depth-first (z, y, x).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
    pub smoothing: f64,
    pub learning_rate: f64,
    pub patch_extents: Vec<usize>,
    pub scale_augmentation: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            seed: 0,
            folds: 5,
            smoothing: 1.0,
            learning_rate: 1e-3,
            patch_extents: vec![16, 32, 32],
            scale_augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(MassegError::Config("folds must be at least 2".into()));
        }
        if self.batch_size < 1 {
            return Err(MassegError::Config("batch size must be at least 1".into()));
        }
        if self.smoothing <= 0.0 {
            return Err(MassegError::Config("smoothing term must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(MassegError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

/// Result of a training run: the full history plus the parameters that scored
/// best on validation DSC.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub best_model: Model<T>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Comma-separated history rows: `epoch,train_loss,val_dsc` with header.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_dsc\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_dsc));
        }
        out
    }
}

/// Stacks batch-1 tensors along the batch axis.
fn stack_batch<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| MassegError::Config("stack_batch: empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * parts.len());
    let mut batch = 0;
    for p in parts {
        if p.shape()[1..] != first.shape()[1..] {
            return Err(MassegError::ShapeMismatch(format!(
                "stack_batch: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
        batch += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    shape[0] = batch;
    Tensor::from_vec(&shape, data)
}

/// Extracts channel `c` of a softmax output as a single-channel tensor.
fn take_channel<T: Scalar>(probs: &Tensor<T>, c: usize) -> Tensor<T> {
    let batch = probs.batch();
    let channels = probs.channels();
    let sp = probs.spatial_len();
    let mut shape = probs.shape().to_vec();
    shape[1] = 1;
    let mut data = Vec::with_capacity(batch * sp);
    for b in 0..batch {
        let base = (b * channels + c) * sp;
        data.extend_from_slice(&probs.data()[base..base + sp]);
    }
    Tensor::from_vec(&shape, data).expect("channel extraction preserves length")
}

/// Embeds a single-channel gradient back into channel `c` of a zero tensor
/// with `channels` channels.
fn embed_channel<T: Scalar>(grad: &Tensor<T>, c: usize, channels: usize) -> Tensor<T> {
    let batch = grad.batch();
    let sp = grad.spatial_len();
    let mut shape = grad.shape().to_vec();
    shape[1] = channels;
    let mut out = Tensor::zeros(&shape);
    for b in 0..batch {
        let dst = (b * channels + c) * sp;
        let src = b * sp;
        out.data_mut()[dst..dst + sp].copy_from_slice(&grad.data()[src..src + sp]);
    }
    out
}

/// Hard-threshold Dice between a predicted foreground mask (argmax over
/// channels) and a binary target.
fn hard_dice<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let fg = take_channel(probs, probs.channels() - 1);
    let mut intersect = 0.0f64;
    let mut total = 0.0f64;
    for (p, t) in fg.data().iter().zip(target.data().iter()) {
        let p = if p.to_real() > 0.5 { 1.0 } else { 0.0 };
        let t = t.to_real();
        intersect += p * t;
        total += p + t;
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * intersect / total
    }
}

/// Mean hard Dice of a model over a dataset, evaluated in inference mode.
pub fn evaluate_dsc<T: Scalar>(model: &mut Model<T>, dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(MassegError::Config("evaluate_dsc: empty dataset".into()));
    }
    let mut total = 0.0;
    for sample in &dataset.samples {
        let logits = model.forward(&sample.inputs, Mode::Infer)?;
        let probs = softmax_over_channels(&logits)?;
        total += hard_dice(&probs, &sample.target);
    }
    Ok(total / dataset.len() as f64)
}

/// Trains a model in place with Adam and soft Dice loss.
///
/// Flushes subnormal floats to zero on the calling thread. Once activations
/// saturate, gradients decay into the subnormal range and x86 cores execute
/// subnormal arithmetic via microcode assists, slowing epochs several-fold.
/// Flushing is deterministic, so reproducibility is unaffected.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{0}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040; // FTZ | DAZ
        std::arch::asm!("ldmxcsr [{0}]", in(reg) &csr, options(nostack));
    }
}

/// Validation DSC is computed on `val_set`, or on the training set itself when
/// `val_set` is `None`. The run is serial and bitwise reproducible for a fixed
/// seed. Returns the history and a snapshot of the best-validation parameters.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(MassegError::Config("train: empty dataset".into()));
    }
    flush_denormals();
    let fallback;
    let val = match val_set {
        Some(v) if !v.is_empty() => v,
        Some(_) => return Err(MassegError::Config("train: empty validation set".into())),
        None => {
            fallback = train_set;
            fallback
        }
    };
    let n_paths = model.path_count();
    for s in &train_set.samples {
        if s.inputs.len() != n_paths {
            return Err(MassegError::Config(format!(
                "train: sample {} has {} input paths but the model expects {}",
                s.case_id,
                s.inputs.len(),
                n_paths
            )));
        }
    }

    let mut adam = AdamState::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0;
    let mut best_val_dsc = f64::NEG_INFINITY;
    let mut best_model = model.clone();

    let fg = {
        let labels = model.config.num_labels;
        labels - 1
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let mut inputs = Vec::with_capacity(n_paths);
            for p in 0..n_paths {
                let parts: Vec<&Tensor<T>> = batch_idx
                    .iter()
                    .map(|&i| &train_set.samples[i].inputs[p])
                    .collect();
                inputs.push(stack_batch(&parts)?);
            }
            let targets: Vec<&Tensor<T>> =
                batch_idx.iter().map(|&i| &train_set.samples[i].target).collect();
            let target = stack_batch(&targets)?;

            let logits = model.forward(&inputs, Mode::Train)?;
            let probs = softmax_over_channels(&logits)?;
            let fg_probs = take_channel(&probs, fg);
            let (loss, grad_fg) = soft_dice_loss(&fg_probs, &target, config.smoothing)?;
            let grad_probs = embed_channel(&grad_fg, fg, probs.channels());
            let grad_logits = softmax_backward(&probs, &grad_probs)?;
            let grads = model.backward(&grad_logits)?;
            adam.step_named(
                |visit| model.visit_params_mut(&mut |name, _, data| visit(name, data)),
                &grads.params,
            )?;

            epoch_loss += loss * batch_idx.len() as f64;
            seen += batch_idx.len();
        }
        let train_loss = epoch_loss / seen as f64;
        let val_dsc = evaluate_dsc(model, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_dsc,
        });
        if val_dsc > best_val_dsc {
            best_val_dsc = val_dsc;
            best_epoch = epoch;
            best_model = model.clone();
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_dsc,
        best_model,
    })
}

/// Deterministic case-level fold assignment. Case ids are sorted, shuffled
/// with a seeded generator, and split into `folds` near-equal chunks, so the
/// assignment depends only on the set of ids and the seed, never on dataset
/// order.
pub fn assign_folds(case_ids: &[String], folds: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    if folds < 2 {
        return Err(MassegError::Config("folds must be at least 2".into()));
    }
    if ids.len() < folds {
        return Err(MassegError::Config(format!(
            "cannot split {} cases into {} folds",
            ids.len(),
            folds
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let base = n / folds;
    let extra = n % folds;
    let mut map = BTreeMap::new();
    let mut cursor = 0;
    for fold in 0..folds {
        let size = base + usize::from(fold < extra);
        for id in &ids[cursor..cursor + size] {
            map.insert(id.clone(), fold);
        }
        cursor += size;
    }
    Ok(map)
}

/// Outcome for one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome<T: Scalar> {
    pub fold: usize,
    pub val_cases: Vec<String>,
    pub val_dsc: f64,
    pub history: Vec<EpochRecord>,
    pub model: Model<T>,
}

/// Cross-validation report: per-fold results and the mean held-out DSC.
#[derive(Debug, Clone)]
pub struct CrossValReport<T: Scalar> {
    pub folds: Vec<FoldOutcome<T>>,
    pub mean_dsc: f64,
}

/// Runs k-fold cross-validation with case-level splits. Each fold trains a
/// fresh model (seeded per fold) on the other folds and reports the best
/// validation DSC on its held-out cases.
pub fn cross_validate<T: Scalar>(
    dataset: &Dataset<T>,
    config: &TrainConfig,
    architecture: &ModelConfig,
) -> Result<CrossValReport<T>> {
    config.validate()?;
    let ids = dataset.case_ids();
    let assignment = assign_folds(&ids, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(config.folds);
    let mut total = 0.0;
    for fold in 0..config.folds {
        let val_cases: Vec<String> = ids
            .iter()
            .filter(|id| assignment[*id] == fold)
            .cloned()
            .collect();
        let train_set = dataset.filter(|id| assignment[id] != fold);
        let val_set = dataset.filter(|id| assignment[id] == fold);
        let mut model = Model::build(architecture, config.seed.wrapping_add(fold as u64))?;
        let outcome = train(&mut model, &train_set, Some(&val_set), config)?;
        total += outcome.best_val_dsc;
        folds.push(FoldOutcome {
            fold,
            val_cases,
            val_dsc: outcome.best_val_dsc,
            history: outcome.history,
            model: outcome.best_model,
        });
    }
    Ok(CrossValReport {
        mean_dsc: total / config.folds as f64,
        folds,
    })
}
