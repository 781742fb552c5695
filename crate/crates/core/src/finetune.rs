//! Contrastive fine-tuning of a trainable dual encoder.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Tower, TrainableEncoder};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{contrastive_loss_matrices, LossConfig, LossKind};
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::topk_hits;

/// `initial · decay^index`.
pub fn lr_schedule(initial: f64, decay: f64, index: usize) -> f64 {
    initial * decay.powi(index as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecayTrigger {
    /// Decay once per completed epoch.
    Epoch,
    /// Decay after `patience` validations without improvement.
    Plateau { patience: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_trigger: DecayTrigger,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Validate every this many steps in addition to every epoch end.
    pub eval_every: Option<usize>,
    /// Validation is scored in consecutive, unshuffled batches of this size.
    pub val_batch_size: usize,
    pub seed: u64,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub adam: AdamConfig,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::DhnNce,
            loss_config: LossConfig::default(),
            learning_rate: 1e-6,
            lr_decay: 0.5,
            decay_trigger: DecayTrigger::Epoch,
            batch_size: 64,
            max_epochs: 20,
            max_steps: None,
            eval_every: None,
            val_batch_size: 50,
            seed: 0,
            freeze_image: false,
            freeze_text: false,
            adam: AdamConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.val_batch_size < 2 {
            return Err(Error::BatchTooSmall(self.val_batch_size));
        }
        if self.freeze_image && self.freeze_text {
            return Err(Error::InvalidConfig("both towers are frozen".into()));
        }
        Ok(())
    }

    /// Short hash of the serialized configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub step: usize,
    pub epoch: usize,
    pub metric: f64,
    pub weights: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRecord>,
    pub best_metric: f64,
    pub best_step: usize,
    pub steps: usize,
    pub manifest: Option<CheckpointManifest>,
}

/// Mean in-batch top-1 accuracy (fraction) over both directions, scoring
/// consecutive batches of `batch_size` pairs. A trailing batch of one pair is skipped.
pub fn in_batch_top1(encoder: &dyn DualEncoder, pairs: &[(Image, String)], batch_size: usize) -> Result<f64> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let d = encoder.info().embed_dim;
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in pairs.chunks(batch_size).filter(|c| c.len() >= 2) {
        let mut image = Array2::zeros((chunk.len(), d));
        let mut text = Array2::zeros((chunk.len(), d));
        for (i, (img, caption)) in chunk.iter().enumerate() {
            image.row_mut(i).assign(&encoder.encode_image(img)?);
            text.row_mut(i).assign(&encoder.encode_text(caption)?.vector);
        }
        let sim = image.dot(&text.t());
        for view in [sim.view(), sim.t()] {
            let h = topk_hits(view, 1)?;
            hits += h.iter().filter(|&&x| x).count();
            total += h.len();
        }
    }
    if total == 0 {
        return Err(Error::CorpusTooSmall {
            size: pairs.len(),
            batch_size,
        });
    }
    Ok(hits as f64 / total as f64)
}

fn snapshot(model: &mut dyn TrainableEncoder) -> Vec<Array2<f64>> {
    model.parameters_mut().into_iter().map(|p| p.clone()).collect()
}

fn restore(model: &mut dyn TrainableEncoder, params: &[Array2<f64>]) {
    for (dst, src) in model.parameters_mut().into_iter().zip(params) {
        dst.assign(src);
    }
}

struct Checkpointer {
    dir: PathBuf,
    log: BufWriter<File>,
    config_hash: String,
}

impl Checkpointer {
    fn open(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg).expect("config serializes"))?;
        let log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            config_hash: cfg.hash(),
        })
    }

    fn record(&mut self, rec: &TrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, rec).expect("log record serializes");
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn save_best(&self, model: &dyn TrainableEncoder, step: usize, epoch: usize, metric: f64) -> Result<CheckpointManifest> {
        let weights = self.dir.join("best.json");
        model.save_weights(&weights)?;
        let manifest = CheckpointManifest {
            config_hash: self.config_hash.clone(),
            step,
            epoch,
            metric,
            weights,
        };
        std::fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CheckpointCorrupt(format!("{}: {e}", path.display())))
}

/// Fine-tunes `encoder` in place and leaves it holding the best weights by
/// validation in-batch top-1.
pub fn finetune(
    encoder: &mut dyn DualEncoder,
    train: &[(Image, String)],
    val: &[(Image, String)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let name = encoder.info().name.clone();
    let model = encoder.as_trainable().ok_or(Error::BackendFrozen(name))?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }

    let mut checkpointer = cfg.checkpoint_dir.as_deref().map(|d| Checkpointer::open(d, cfg)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::new();

    let initial = in_batch_top1(model, val, cfg.val_batch_size)?;
    let mut best = (initial, 0usize);
    let mut best_params = snapshot(model);
    let mut manifest = match &checkpointer {
        Some(c) => Some(c.save_best(model, 0, 0, initial)?),
        None => None,
    };
    tracing::info!(val_top1 = initial, "initial validation");

    let mut decay_index = 0usize;
    let mut stale = 0usize;
    let mut step = 0usize;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).filter(|b| b.len() >= 2).collect();
        if batches.is_empty() {
            return Err(Error::BatchTooSmall(train.len()));
        }
        let n_batches = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            let lr = lr_schedule(cfg.learning_rate, cfg.lr_decay, decay_index);
            let images: Vec<Image> = batch.iter().map(|&i| train[i].0.clone()).collect();
            let captions: Vec<&str> = batch.iter().map(|&i| train[i].1.as_str()).collect();

            let forward = model.forward_train(&images, &captions)?;
            let loss = contrastive_loss_matrices(cfg.loss, forward.image.view(), forward.text.view(), &cfg.loss_config, true)?;
            let (d_image, d_text) = (loss.image_grad.expect("requested"), loss.text_grad.expect("requested"));
            let grads = model.backward(&forward, &d_image, &d_text)?;

            adam.begin_step();
            for (slot, (param, grad)) in model.parameters_mut().into_iter().zip(&grads).enumerate() {
                let frozen = match grad.tower {
                    Tower::Image => cfg.freeze_image,
                    Tower::Text => cfg.freeze_text,
                };
                if frozen {
                    continue;
                }
                let g = grad.grad.as_standard_layout();
                let p = param.as_slice_mut().expect("parameters are contiguous");
                adam.update(slot, p, g.as_slice().expect("standard layout"), lr);
            }
            step += 1;

            let end_of_epoch = bi + 1 == n_batches;
            let scheduled = cfg.eval_every.is_some_and(|n| step % n == 0);
            let last_step = step >= max_steps;
            let val_top1 = if end_of_epoch || scheduled || last_step {
                Some(in_batch_top1(model, val, cfg.val_batch_size)?)
            } else {
                None
            };
            let record = TrainLogRecord {
                step,
                epoch,
                loss: loss.value,
                learning_rate: lr,
                val_top1,
            };
            tracing::debug!(step, loss = loss.value, lr, ?val_top1, "train step");
            if let Some(c) = checkpointer.as_mut() {
                c.record(&record)?;
            }
            log.push(record);

            if let Some(metric) = val_top1 {
                if metric > best.0 {
                    best = (metric, step);
                    best_params = snapshot(model);
                    stale = 0;
                    if let Some(c) = &checkpointer {
                        manifest = Some(c.save_best(model, step, epoch, metric)?);
                    }
                } else {
                    stale += 1;
                    if let DecayTrigger::Plateau { patience } = cfg.decay_trigger {
                        if stale >= patience.max(1) {
                            decay_index += 1;
                            stale = 0;
                        }
                    }
                }
            }
            if last_step {
                break 'epochs;
            }
        }
        if cfg.decay_trigger == DecayTrigger::Epoch {
            decay_index += 1;
        }
    }

    restore(model, &best_params);
    if let Some(c) = checkpointer.as_mut() {
        c.log.flush()?;
    }
    Ok(TrainOutcome {
        log,
        best_metric: best.0,
        best_step: best.1,
        steps: step,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(1e-6, 0.5, 0), 1e-6);
        assert_eq!(lr_schedule(1e-6, 0.5, 1), 5e-7);
        assert_eq!(lr_schedule(1e-6, 0.5, 3), 1.25e-7);
        assert_eq!(lr_schedule(1e-6, 1.0, 7), 1e-6);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(matches!(
            TrainConfig { batch_size: 1, ..ok.clone() }.validate(),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(TrainConfig { lr_decay: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig {
            freeze_image: true,
            freeze_text: true,
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn hash_depends_on_config() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
