//! Training loop and checkpoints.
//!
//! One run trains one model on one dataset with one seed. All randomness
//! (initialization, shuffling, augmentation angles, dropout masks) comes from
//! the run seed, so identical configurations produce bit-identical
//! checkpoints.

use crate::data::{augment, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{compute_stats, Pose2D, Pose3D, StandardizationMode};
use crate::models::{poses3d_to_tensor, LifterModel, ModelConfig, ModelKind};
use crate::optim::{adam_step, TrainConfig};
use crate::rng::stream_rng;
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

/// Per-epoch training record. `sample_digest` fingerprints the (augmented)
/// inputs the epoch actually saw, keyed by sample index so it is independent
/// of shuffle order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
    pub sample_digest: u64,
}

impl EpochLog {
    /// Append-only line format: `epoch=… loss=… lr=… wall_ms=… digest=…`.
    pub fn line(&self) -> String {
        format!(
            "epoch={} loss={:.12e} lr={:.12e} wall_ms={} digest={:016x}",
            self.epoch, self.loss, self.lr, self.wall_ms, self.sample_digest
        )
    }
}

/// A trained model with everything needed to resume or audit it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: LifterModel,
    pub train_config: TrainConfig,
    pub augment: bool,
    pub epochs_completed: usize,
    pub optimizer_steps: usize,
    pub seed: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Row label of the regime this checkpoint belongs to, e.g.
    /// `hybrid2+aug` for a first-layer-features hybrid trained with
    /// augmentation.
    pub fn regime_label(&self) -> String {
        regime_label(
            self.model.config.kind,
            self.model.config.hybrid_mode,
            self.augment,
        )
    }
}

pub fn regime_label(
    kind: ModelKind,
    hybrid_mode: crate::models::HybridMode,
    augmented: bool,
) -> String {
    let base = match (kind, hybrid_mode) {
        (ModelKind::Hybrid, crate::models::HybridMode::FirstLayerFeatures) => "hybrid2",
        (k, _) => k.as_str(),
    };
    if augmented {
        format!("{base}+aug")
    } else {
        base.to_string()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| Error::Validation(format!("checkpoint serialization: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ckpt: Checkpoint = serde_json::from_str(&json).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    ckpt.model.after_load();
    Ok(ckpt)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// FNV-1a over the raw input bytes, keyed by sample index.
fn digest_inputs(entries: &[(usize, &Pose2D)]) -> u64 {
    let mut sorted: Vec<&(usize, &Pose2D)> = entries.iter().collect();
    sorted.sort_by_key(|(i, _)| *i);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bits: u64| {
        for b in bits.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (i, pose) in sorted {
        eat(*i as u64);
        for j in pose.joints() {
            eat(j[0].to_bits());
            eat(j[1].to_bits());
        }
    }
    h
}

/// Trains a fresh model of `model_config` on `data` under `cfg`.
///
/// With `augmented` set, every sample gets a fresh θ ~ Uniform[0, 2π) each
/// time it is visited, applied to the input and the target's xy columns.
pub fn train_model(
    model_config: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    augmented: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::invalid_argument(
            "cannot train on an empty dataset".to_string(),
        ));
    }
    if data.meta.joint_count != model_config.joint_count {
        return Err(Error::invalid_argument(format!(
            "model expects {} joints, dataset has {}",
            model_config.joint_count, data.meta.joint_count
        )));
    }
    let mut model = LifterModel::new(model_config.clone(), cfg.seed)?;

    // Dataset-level standardization for the non-equivariant branches,
    // computed once from the un-augmented training inputs.
    let inputs: Vec<Pose2D> = data.samples.iter().map(|s| s.input2d.clone()).collect();
    let mode = if model_config.per_coordinate_stats {
        StandardizationMode::PerCoordinate
    } else {
        StandardizationMode::Isotropic
    };
    model.stats = compute_stats(&inputs, mode)?;

    let mut rng = stream_rng(cfg.seed, 0x7EA1);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut epoch_inputs: Vec<(usize, Sample)> = Vec::with_capacity(order.len());

        for batch_idx in 0..order.len().div_ceil(cfg.batch_size) {
            let lo = batch_idx * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(order.len());
            let mut batch_in: Vec<Pose2D> = Vec::with_capacity(hi - lo);
            let mut batch_tgt: Vec<Pose3D> = Vec::with_capacity(hi - lo);
            for &idx in &order[lo..hi] {
                let sample = if augmented {
                    let theta = rng.random_range(0.0..TAU);
                    augment(&data.samples[idx], theta)?
                } else {
                    data.samples[idx].clone()
                };
                batch_in.push(sample.input2d.clone());
                batch_tgt.push(sample.target3d.clone());
                epoch_inputs.push((idx, sample));
            }

            let mut tape = Tape::new();
            let (out, bindings) = model.forward_train(&mut tape, &batch_in, &mut rng)?;
            let target = tape.constant(poses3d_to_tensor(&batch_tgt)?, "target");
            let loss = tape
                .mse_loss(out, target, "train.mse")
                .map_err(|e| tag_batch(e, epoch, batch_idx))?;
            let loss_value = tape.value(loss).scalar_value()?;
            let grads = tape
                .backward(loss)
                .map_err(|e| tag_batch(e, epoch, batch_idx))?;
            model.zero_grads();
            model.accumulate_gradients(&grads, &bindings);
            step += 1;
            adam_step(model.params_mut(), step, lr)?;
            epoch_loss += loss_value;
            batches += 1;
        }

        let digest_entries: Vec<(usize, &Pose2D)> = epoch_inputs
            .iter()
            .map(|(i, s)| (*i, &s.input2d))
            .collect();
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            lr,
            wall_ms: start.elapsed().as_millis(),
            sample_digest: digest_inputs(&digest_entries),
        });
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            train_config: cfg.clone(),
            augment: augmented,
            epochs_completed: cfg.epochs,
            optimizer_steps: step,
            seed: cfg.seed,
        },
        log,
    })
}

fn tag_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericalFailure { context } => Error::NumericalFailure {
            context: format!("{context} (epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};
    use crate::models::HybridMode;

    fn tiny_config(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke_run() {
        let data = generate_dataset(&GenConfig::new("train", 10, 3)).unwrap();
        let mc = ModelConfig::desk_scale(ModelKind::Vanilla, 17);
        let out = train_model(&mc, &data, &tiny_config(0, 1), false).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].loss.is_finite());
        assert_eq!(out.checkpoint.epochs_completed, 1);
    }

    #[test]
    fn lr_log_follows_decay() {
        let data = generate_dataset(&GenConfig::new("train", 10, 3)).unwrap();
        let mc = ModelConfig::desk_scale(ModelKind::Vanilla, 17);
        let cfg = tiny_config(0, 3);
        let out = train_model(&mc, &data, &cfg, false).unwrap();
        for (e, entry) in out.log.iter().enumerate() {
            let expect = cfg.learning_rate * cfg.gamma.powi(e as i32);
            assert_eq!(entry.lr, expect);
        }
    }

    #[test]
    fn no_augmentation_means_identical_epoch_inputs() {
        let data = generate_dataset(&GenConfig::new("train", 12, 4)).unwrap();
        let mc = ModelConfig::desk_scale(ModelKind::Vanilla, 17);
        let out = train_model(&mc, &data, &tiny_config(1, 3), false).unwrap();
        let d0 = out.log[0].sample_digest;
        assert!(out.log.iter().all(|l| l.sample_digest == d0));

        let aug = train_model(&mc, &data, &tiny_config(1, 3), true).unwrap();
        let digests: std::collections::HashSet<u64> =
            aug.log.iter().map(|l| l.sample_digest).collect();
        assert_eq!(digests.len(), 3, "augmented epochs should differ");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = generate_dataset(&GenConfig::new("train", 16, 5)).unwrap();
        for kind in [ModelKind::Vanilla, ModelKind::FullyEquivariant, ModelKind::Hybrid] {
            let mc = ModelConfig::desk_scale(kind, 17);
            let a = train_model(&mc, &data, &tiny_config(2, 2), true).unwrap();
            let b = train_model(&mc, &data, &tiny_config(2, 2), true).unwrap();
            let ja = serde_json::to_string(&a.checkpoint).unwrap();
            let jb = serde_json::to_string(&b.checkpoint).unwrap();
            assert_eq!(ja, jb, "{kind:?} training not reproducible");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let data = generate_dataset(&GenConfig::new("train", 10, 6)).unwrap();
        let mc = ModelConfig::desk_scale(ModelKind::Hybrid, 17);
        let out = train_model(&mc, &data, &tiny_config(3, 1), false).unwrap();
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&out.checkpoint).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
        // The reloaded model predicts identically.
        let pose = data.samples[0].input2d.clone();
        assert_eq!(
            out.checkpoint.model.lift(&pose).unwrap(),
            back.model.lift(&pose).unwrap()
        );
    }

    #[test]
    fn regime_labels() {
        assert_eq!(
            regime_label(ModelKind::Vanilla, HybridMode::Parallel, false),
            "vanilla"
        );
        assert_eq!(
            regime_label(ModelKind::FullyEquivariant, HybridMode::Parallel, true),
            "equi+aug"
        );
        assert_eq!(
            regime_label(ModelKind::Hybrid, HybridMode::FirstLayerFeatures, true),
            "hybrid2+aug"
        );
    }
}
