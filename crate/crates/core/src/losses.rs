//! Contrastive objectives for dual-encoder fine-tuning.
//!
//! All four losses share one per-anchor form. For anchor `i` with scaled
//! similarities `z_ij = s_ij / τ`:
//!
//! ```text
//! ℓ_i = -z_ii + log( [α·e^{z_ii}] + Σ_{j≠i} W_ij · e^{z_ij} )
//! W_ij = (B-1) · e^{β z_ij} / Σ_{k≠i} e^{β z_ik}
//! ```
//!
//! | loss     | positive term in denominator | hardness β       |
//! |----------|------------------------------|------------------|
//! | InfoNCE  | yes (α = 1)                  | 0                |
//! | DCL      | no                           | 0                |
//! | HN-NCE   | yes (weight α)               | β1 / β2          |
//! | DHN-NCE  | no                           | β1 / β2          |
//!
//! The image→text direction uses `β1`, text→image uses `β2`, and the reported
//! loss is the sum of both directions. Since `W_ij e^{z_ij}` is proportional to
//! `e^{(1+β) z_ij}`, the weighted negative mass is evaluated as
//! `log(B-1) + LSE((1+β) z) - LSE(β z)`, which stays finite for small τ.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{Direction, EmbeddingBatch, SimilarityMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    InfoNce,
    Dcl,
    HnNce,
    DhnNce,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::InfoNce, LossKind::Dcl, LossKind::HnNce, LossKind::DhnNce];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::Dcl => "dcl",
            LossKind::HnNce => "hn_nce",
            LossKind::DhnNce => "dhn_nce",
        }
    }

    fn includes_positive(&self) -> bool {
        matches!(self, LossKind::InfoNce | LossKind::HnNce)
    }

    fn uses_hardness(&self) -> bool {
        matches!(self, LossKind::HnNce | LossKind::DhnNce)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "infonce" | "info_nce" => Ok(LossKind::InfoNce),
            "dcl" => Ok(LossKind::Dcl),
            "hn_nce" | "hnnce" => Ok(LossKind::HnNce),
            "dhn_nce" | "dhnnce" => Ok(LossKind::DhnNce),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

/// The comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    InfoNce,
    Dcl,
    HnNce,
}

impl From<BaselineKind> for LossKind {
    fn from(kind: BaselineKind) -> Self {
        match kind {
            BaselineKind::InfoNce => LossKind::InfoNce,
            BaselineKind::Dcl => LossKind::Dcl,
            BaselineKind::HnNce => LossKind::HnNce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over anchors.
    #[default]
    Sum,
    /// Mean over anchors, per direction.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// Image→text hardness.
    pub beta1: f64,
    /// Text→image hardness.
    pub beta2: f64,
    /// Positive-term weight, only read by HN-NCE.
    pub alpha: f64,
    pub reduction: Reduction,
    /// Treat the hardness weights as constants when differentiating.
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            beta1: 0.15,
            beta2: 0.15,
            alpha: 1.0,
            reduction: Reduction::Sum,
            detach_weights: false,
        }
    }
}

impl LossConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self { temperature, ..Self::default() }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "hardness parameters must be >= 0, got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn beta(&self, direction: Direction) -> f64 {
        match direction {
            Direction::ImageToText => self.beta1,
            Direction::TextToImage => self.beta2,
        }
    }
}

/// Per-anchor negative weights; the diagonal is unused and stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessWeights {
    pub values: Array2<f64>,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    /// d(value)/d(image embeddings), when requested.
    pub image_grad: Option<Array2<f64>>,
    /// d(value)/d(text embeddings), when requested.
    pub text_grad: Option<Array2<f64>>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Hardness weights `(B-1)·softmax_{k≠i}(β s_ik / τ)` for the similarity's direction.
pub fn hardness_weights(sim: &SimilarityMatrix, cfg: &LossConfig) -> HardnessWeights {
    let beta = cfg.beta(sim.direction);
    let b = sim.batch_size();
    let mut values = Array2::zeros((b, b));
    for (i, row) in sim.values.axis_iter(Axis(0)).enumerate() {
        let scaled = |j: usize| beta * row[j] / cfg.temperature;
        let negatives = (0..b).filter(|&j| j != i);
        let lse = log_sum_exp(negatives.clone().map(scaled));
        for j in negatives {
            values[[i, j]] = (b - 1) as f64 * (scaled(j) - lse).exp();
        }
    }
    HardnessWeights {
        values,
        direction: sim.direction,
    }
}

struct Directional {
    value: f64,
    grad: Option<Array2<f64>>,
}

/// One retrieval direction; `scores` holds anchors as rows.
fn directional_loss(
    scores: ArrayView2<'_, f64>,
    kind: LossKind,
    cfg: &LossConfig,
    beta: f64,
    with_grad: bool,
) -> Directional {
    let b = scores.nrows();
    let tau = cfg.temperature;
    let beta = if kind.uses_hardness() { beta } else { 0.0 };
    let log_negatives_count = ((b - 1) as f64).ln();
    let log_alpha = if kind == LossKind::HnNce { cfg.alpha.ln() } else { 0.0 };
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / b as f64,
    };

    let mut value = 0.0;
    let mut grad = with_grad.then(|| Array2::<f64>::zeros((b, b)));
    let mut p = vec![0.0; b];
    let mut q = vec![0.0; b];

    for i in 0..b {
        let z = |j: usize| scores[[i, j]] / tau;
        let negatives = (0..b).filter(|&j| j != i);
        let sharp = log_sum_exp(negatives.clone().map(|j| (1.0 + beta) * z(j)));
        let soft = log_sum_exp(negatives.clone().map(|j| beta * z(j)));
        let log_neg_mass = log_negatives_count + sharp - soft;

        let z_pos = z(i);
        let log_denominator = if kind.includes_positive() {
            let a = log_alpha + z_pos;
            let m = a.max(log_neg_mass);
            m + ((a - m).exp() + (log_neg_mass - m).exp()).ln()
        } else {
            log_neg_mass
        };
        value += -z_pos + log_denominator;

        if let Some(g) = grad.as_mut() {
            let neg_share = (log_neg_mass - log_denominator).exp();
            let pos_share = if kind.includes_positive() {
                (log_alpha + z_pos - log_denominator).exp()
            } else {
                0.0
            };
            for j in negatives {
                p[j] = ((1.0 + beta) * z(j) - sharp).exp();
                q[j] = (beta * z(j) - soft).exp();
            }
            for j in 0..b {
                let dz = if j == i {
                    -1.0 + pos_share
                } else if cfg.detach_weights {
                    neg_share * p[j]
                } else {
                    neg_share * ((1.0 + beta) * p[j] - beta * q[j])
                };
                g[[i, j]] = scale * dz / tau;
            }
        }
    }

    Directional {
        value: scale * value,
        grad,
    }
}

/// Loss over raw embedding matrices, assumed row-normalized by the caller.
///
/// This is the training-path entry point: it skips the unit-norm check that
/// [`EmbeddingBatch`] performs but still rejects batches with fewer than two pairs.
pub fn contrastive_loss_matrices(
    kind: LossKind,
    image: ArrayView2<'_, f64>,
    text: ArrayView2<'_, f64>,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<LossOutput> {
    cfg.validate()?;
    if image.dim() != text.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image embeddings {:?} vs text embeddings {:?}",
            image.dim(),
            text.dim()
        )));
    }
    if image.nrows() < 2 {
        return Err(Error::BatchTooSmall(image.nrows()));
    }

    let sim = image.dot(&text.t());
    let v2t = directional_loss(sim.view(), kind, cfg, cfg.beta1, with_grad);
    let t2v = directional_loss(sim.t(), kind, cfg, cfg.beta2, with_grad);

    let (image_grad, text_grad) = match (v2t.grad, t2v.grad) {
        (Some(g_v2t), Some(g_t2v)) => {
            // d/dS of both directions; the text→image scores are S transposed.
            let d_sim = g_v2t + &g_t2v.t();
            (Some(d_sim.dot(&text)), Some(d_sim.t().dot(&image)))
        }
        _ => (None, None),
    };

    Ok(LossOutput {
        value: v2t.value + t2v.value,
        image_to_text: v2t.value,
        text_to_image: t2v.value,
        image_grad,
        text_grad,
    })
}

/// Value and gradients of the selected loss on a validated batch.
pub fn contrastive_loss(kind: LossKind, batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    contrastive_loss_matrices(kind, batch.image().view(), batch.text().view(), cfg, true)
}

/// Decoupled hard-negative NCE: hardness-weighted negatives, no positive in the denominator.
pub fn dhn_nce_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    contrastive_loss(LossKind::DhnNce, batch, cfg)
}

pub fn baseline_loss(kind: BaselineKind, batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    contrastive_loss(kind.into(), batch, cfg)
}

/// Value-only evaluation from a precomputed similarity matrix (image→text orientation).
pub fn loss_from_similarity(kind: LossKind, sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if sim.batch_size() < 2 {
        return Err(Error::BatchTooSmall(sim.batch_size()));
    }
    let v2t = match sim.direction {
        Direction::ImageToText => sim.values.view(),
        Direction::TextToImage => sim.values.t(),
    };
    let a = directional_loss(v2t, kind, cfg, cfg.beta1, false);
    let b = directional_loss(v2t.t(), kind, cfg, cfg.beta2, false);
    Ok(a.value + b.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::similarity_matrix;
    use ndarray::array;

    fn orthogonal_pair() -> EmbeddingBatch {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        EmbeddingBatch::new(eye.clone(), eye).unwrap()
    }

    #[test]
    fn zero_hardness_gives_uniform_weights() {
        let sim = SimilarityMatrix {
            values: array![[0.9, 0.3, -0.2], [0.1, 0.8, 0.7], [0.5, -0.6, 1.0]],
            direction: Direction::ImageToText,
        };
        let cfg = LossConfig::with_temperature(0.6).with_betas(0.0, 0.0);
        let w = hardness_weights(&sim, &cfg);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 1.0 };
                assert!((w.values[[i, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_pair_batches_have_unit_weights_for_any_beta() {
        let sim = SimilarityMatrix {
            values: array![[0.4, -0.9], [0.7, 0.2]],
            direction: Direction::TextToImage,
        };
        for beta in [0.0, 0.15, 1.0, 10.0] {
            let w = hardness_weights(&sim, &LossConfig::default().with_betas(beta, beta));
            assert!((w.values[[0, 1]] - 1.0).abs() < 1e-12);
            assert!((w.values[[1, 0]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_pair_weights_match_scalar_evaluation() {
        // Row 0: negatives at similarity 0.5 and 0.1, β = 1, τ = 1.
        let sim = SimilarityMatrix {
            values: array![[1.0, 0.5, 0.1], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            direction: Direction::ImageToText,
        };
        let cfg = LossConfig::with_temperature(1.0).with_betas(1.0, 1.0);
        let w = hardness_weights(&sim, &cfg);
        assert!((w.values[[0, 1]] - 1.1974).abs() < 1e-4);
        assert!((w.values[[0, 2]] - 0.8026).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_pairs_closed_forms() {
        let batch = orthogonal_pair();
        let cfg = LossConfig::with_temperature(1.0);
        let dhn = dhn_nce_loss(&batch, &cfg).unwrap();
        assert!((dhn.value + 4.0).abs() < 1e-9);
        let dcl = baseline_loss(BaselineKind::Dcl, &batch, &cfg).unwrap();
        assert!((dcl.value + 4.0).abs() < 1e-9);
        let info = baseline_loss(BaselineKind::InfoNce, &batch, &cfg).unwrap();
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((info.value - expected).abs() < 1e-6);
    }

    #[test]
    fn identical_embeddings_contribute_log_negatives_per_anchor() {
        let rows = array![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        let batch = EmbeddingBatch::new(rows.clone(), rows).unwrap();
        for tau in [0.05, 0.6, 1.0, 3.0] {
            let out = dhn_nce_loss(&batch, &LossConfig::with_temperature(tau)).unwrap();
            // Three anchors per direction, two directions, each log(B-1).
            assert!((out.value - 6.0 * 2f64.ln()).abs() < 1e-6, "tau={tau}: {}", out.value);
        }
    }

    #[test]
    fn mean_reduction_divides_by_batch() {
        let batch = orthogonal_pair();
        let mut cfg = LossConfig::with_temperature(1.0);
        let sum = dhn_nce_loss(&batch, &cfg).unwrap().value;
        cfg.reduction = Reduction::Mean;
        let mean = dhn_nce_loss(&batch, &cfg).unwrap().value;
        assert!((sum / 2.0 - mean).abs() < 1e-12);
    }

    #[test]
    fn small_temperature_stays_finite() {
        let batch = EmbeddingBatch::from_raw(
            array![[1.0, 0.1], [0.2, 1.0], [-1.0, 0.3]].view(),
            array![[1.0, 0.0], [0.0, 1.0], [-1.0, -0.1]].view(),
        )
        .unwrap();
        let cfg = LossConfig::with_temperature(0.01).with_betas(1.0, 1.0);
        for kind in LossKind::ALL {
            let out = contrastive_loss(kind, &batch, &cfg).unwrap();
            assert!(out.value.is_finite(), "{kind}");
            assert!(out.image_grad.unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let batch = orthogonal_pair();
        for cfg in [
            LossConfig::with_temperature(0.0),
            LossConfig::default().with_betas(-0.1, 0.0),
            LossConfig { alpha: 0.0, ..LossConfig::default() },
        ] {
            assert!(matches!(dhn_nce_loss(&batch, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn single_pair_matrices_are_too_small() {
        let one = array![[1.0, 0.0]];
        let err = contrastive_loss_matrices(LossKind::DhnNce, one.view(), one.view(), &LossConfig::default(), false)
            .unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
    }

    #[test]
    fn value_from_similarity_matches_embedding_path() {
        let batch = EmbeddingBatch::from_raw(
            array![[1.0, 0.1, 0.3], [0.2, 1.0, -0.4], [-1.0, 0.3, 0.5]].view(),
            array![[1.0, 0.0, 0.2], [0.1, 1.0, 0.0], [-1.0, -0.1, 0.9]].view(),
        )
        .unwrap();
        let cfg = LossConfig::default().with_betas(0.3, 0.7);
        for kind in LossKind::ALL {
            let a = contrastive_loss(kind, &batch, &cfg).unwrap().value;
            for dir in Direction::BOTH {
                let b = loss_from_similarity(kind, &similarity_matrix(&batch, dir), &cfg).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_kind_parses_common_spellings() {
        assert_eq!("DHN-NCE".parse::<LossKind>().unwrap(), LossKind::DhnNce);
        assert_eq!("infonce".parse::<LossKind>().unwrap(), LossKind::InfoNce);
        assert!("triplet".parse::<LossKind>().is_err());
    }
}
