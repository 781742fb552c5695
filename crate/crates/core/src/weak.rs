//! Weakly supervised refinement: a residual U-Net trained on pseudo-masks
//! and validated against ground truth.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegmentationSet;
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::metrics::{evaluate_mask, iou_dsc, paired_ttest, Summary, TTest};
use crate::optim::{Adam, AdamConfig};
use crate::resunet::{sigmoid, ResUNet, ResUNetSpec};

const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakTrainConfig {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation DSC.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Ignore pixels within `confidence_band` of a pseudo-mask boundary.
    pub confidence_masking: bool,
    pub confidence_band: usize,
    pub adam: AdamConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for WeakTrainConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.5,
            ce_weight: 0.5,
            learning_rate: 1e-3,
            epochs: 50,
            patience: Some(10),
            batch_size: 4,
            seed: 0,
            confidence_masking: false,
            confidence_band: 2,
            adam: AdamConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl WeakTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.dice_weight) || !ok(self.ce_weight) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if self.dice_weight == 0.0 && self.ce_weight == 0.0 {
            return Err(Error::InvalidConfig("dice and cross-entropy weights are both zero".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training or validation item. For training, `target` is the
/// pseudo-mask; for validation it is the ground truth and `pseudo`
/// optionally holds the zero-shot mask it is compared against.
#[derive(Debug, Clone)]
pub struct WeakSample {
    pub id: String,
    pub image: Image,
    pub target: Mask,
    pub pseudo: Option<Mask>,
}

/// Pixels that count towards the loss: everything, or only those further
/// than `band` pixels (Chebyshev) from a label change.
pub fn confidence_weights(mask: &Mask, band: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = mask[[y, x]];
        let (y0, y1) = (y.saturating_sub(band), (y + band).min(h - 1));
        let (x0, x1) = (x.saturating_sub(band), (x + band).min(w - 1));
        (y0..=y1).all(|yy| (x0..=x1).all(|xx| mask[[yy, xx]] == v))
    })
}

/// `dice_weight·soft-dice + ce_weight·mean BCE` on logits, and its gradient
/// with respect to the logits.
pub fn composite_loss(
    logits: &Array2<f64>,
    target: &Mask,
    include: Option<&Array2<bool>>,
    dice_weight: f64,
    ce_weight: f64,
) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != target.dim() || include.is_some_and(|m| m.dim() != target.dim()) {
        return Err(Error::SizeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    let used = |idx: (usize, usize)| include.is_none_or(|m| m[idx]);
    let n = logits.indexed_iter().filter(|(idx, _)| used(*idx)).count();
    let mut grad = Array2::zeros(logits.dim());
    if n == 0 {
        return Ok((0.0, grad));
    }

    let (mut inter, mut psum, mut ysum, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (idx, &z) in logits.indexed_iter() {
        if !used(idx) {
            continue;
        }
        let y = if target[idx] { 1.0 } else { 0.0 };
        let p = sigmoid(z);
        inter += p * y;
        psum += p;
        ysum += y;
        // softplus(z) - y·z, stable for large |z|
        bce += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
    }
    let denom = psum + ysum + DICE_SMOOTH;
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;
    let loss = dice_weight * dice + ce_weight * bce / n as f64;

    for (idx, g) in grad.indexed_iter_mut() {
        if !used(idx) {
            continue;
        }
        let y = if target[idx] { 1.0 } else { 0.0 };
        let p = sigmoid(logits[idx]);
        let d_dice_dp = -(2.0 * y * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
        *g = dice_weight * d_dice_dp * p * (1.0 - p) + ce_weight * (p - y) / n as f64;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub id: String,
    pub pseudo_iou: f64,
    pub pseudo_dsc: f64,
    pub refined_iou: f64,
    pub refined_dsc: f64,
}

/// Pseudo-masks against the refined predictions, both scored on ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementComparison {
    pub rows: Vec<ComparisonRow>,
    pub pseudo_iou: Summary,
    pub pseudo_dsc: Summary,
    pub refined_iou: Summary,
    pub refined_dsc: Summary,
    /// Paired t-test, refined DSC vs pseudo DSC.
    pub dsc_ttest: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakReport {
    pub spec: ResUNetSpec,
    pub config: WeakTrainConfig,
    pub history: Vec<WeakEpoch>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// True when no validation set was given and selection used the training targets.
    pub selected_on_train: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<RefinementComparison>,
}

#[derive(Debug, Clone)]
pub struct WeakOutcome {
    pub model: ResUNet,
    pub report: WeakReport,
}

pub fn predict_mask(model: &ResUNet, image: &Image) -> Mask {
    model.predict(image).mapv(|p| p > 0.5)
}

/// Mean DSC of thresholded predictions against each sample's target.
pub fn mean_dsc(model: &ResUNet, samples: &[WeakSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += evaluate_mask(&s.id, &predict_mask(model, &s.image), &s.target)?.dsc;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Loss over one sample and its gradient accumulated into the model.
pub fn accumulate_gradient(model: &mut ResUNet, sample: &WeakSample, cfg: &WeakTrainConfig, scale: f64) -> Result<f64> {
    if sample.image.size() != sample.target.dim() {
        return Err(Error::SizeMismatch(format!(
            "{}: image {:?} vs mask {:?}",
            sample.id,
            sample.image.size(),
            sample.target.dim()
        )));
    }
    let include = cfg
        .confidence_masking
        .then(|| confidence_weights(&sample.target, cfg.confidence_band));
    let (logits, cache) = model.forward_train(&sample.image);
    let (loss, grad) = composite_loss(&logits, &sample.target, include.as_ref(), cfg.dice_weight, cfg.ce_weight)?;
    model.backward(&(grad * scale), &cache);
    Ok(loss)
}

pub fn compare_refinement(model: &ResUNet, samples: &[WeakSample]) -> Result<Option<RefinementComparison>> {
    let mut rows = Vec::new();
    for s in samples {
        let Some(pseudo) = &s.pseudo else { continue };
        let (pseudo_iou, pseudo_dsc) = iou_dsc(pseudo, &s.target)?;
        let (refined_iou, refined_dsc) = iou_dsc(&predict_mask(model, &s.image), &s.target)?;
        rows.push(ComparisonRow {
            id: s.id.clone(),
            pseudo_iou,
            pseudo_dsc,
            refined_iou,
            refined_dsc,
        });
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let col = |f: fn(&ComparisonRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let summary = |v: Vec<f64>| Summary::of(&v).expect("non-empty");
    Ok(Some(RefinementComparison {
        pseudo_iou: summary(col(|r| r.pseudo_iou)),
        pseudo_dsc: summary(col(|r| r.pseudo_dsc)),
        refined_iou: summary(col(|r| r.refined_iou)),
        refined_dsc: summary(col(|r| r.refined_dsc)),
        dsc_ttest: paired_ttest(&col(|r| r.refined_dsc), &col(|r| r.pseudo_dsc))?,
        rows,
    }))
}

/// Trains on pseudo-labelled samples and keeps the weights with the best
/// validation DSC. Without validation samples the training targets are used.
pub fn train_weak_samples(spec: ResUNetSpec, train: &[WeakSample], val: &[WeakSample], cfg: &WeakTrainConfig) -> Result<WeakOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let selected_on_train = val.is_empty();
    let selection = if selected_on_train { train } else { val };

    let mut model = ResUNet::new(spec, cfg.seed)?;
    model.zero_grads();
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (0usize, mean_dsc(&model, selection)?, model.clone());
    let mut history = Vec::new();
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += accumulate_gradient(&mut model, &train[i], cfg, scale)?;
            }
            adam.begin_step();
            let lr = cfg.learning_rate;
            model.for_each_param(|slot, p, g| adam.update(slot, p, g, lr));
        }
        let val_dsc = mean_dsc(&model, selection)?;
        history.push(WeakEpoch {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_dsc,
        });
        tracing::debug!(epoch, val_dsc, "weak supervision epoch");
        if val_dsc > best.1 {
            best = (epoch, val_dsc, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }

    let (best_epoch, best_val_dsc, mut model) = best;
    model.zero_grads();
    let report = WeakReport {
        spec,
        config: cfg.clone(),
        history,
        best_epoch,
        best_val_dsc,
        selected_on_train,
        comparison: compare_refinement(&model, val)?,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        model.save(&dir.join("best.json"))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        std::fs::write(dir.join("report.json"), json)?;
    }
    Ok(WeakOutcome { model, report })
}

fn load_samples(set: &SegmentationSet, pseudo: Option<&SegmentationSet>) -> Result<Vec<WeakSample>> {
    let mut out = Vec::with_capacity(set.records.len());
    for (i, record) in set.records.iter().enumerate() {
        let (image, mask) = set.load(i)?;
        let target = mask.ok_or_else(|| Error::InvalidConfig(format!("{}: no mask", record.id)))?;
        let pseudo = match pseudo.and_then(|p| p.records.iter().position(|r| r.id == record.id).map(|j| (p, j))) {
            Some((p, j)) => p.load(j)?.1,
            None => None,
        };
        if let Some(pm) = &pseudo {
            if pm.dim() != target.dim() {
                return Err(Error::SizeMismatch(format!("{}: pseudo-mask size", record.id)));
            }
        }
        out.push(WeakSample {
            id: record.id.clone(),
            image,
            target,
            pseudo,
        });
    }
    Ok(out)
}

/// Disk-backed entry point: `train` masks are pseudo-masks, `val` masks are
/// ground truth, and `val_pseudo` (matched by id) feeds the comparison.
pub fn train_weak(
    spec: ResUNetSpec,
    train: &SegmentationSet,
    val: &SegmentationSet,
    val_pseudo: Option<&SegmentationSet>,
    cfg: &WeakTrainConfig,
) -> Result<WeakOutcome> {
    if train.records.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let train = load_samples(train, None)?;
    let val = load_samples(val, val_pseudo)?;
    train_weak_samples(spec, &train, &val, cfg)
}

/// Probability map from a saved checkpoint.
pub fn predict(checkpoint: &Path, image: &Image) -> Result<Array2<f64>> {
    Ok(ResUNet::load(checkpoint)?.predict(image))
}
