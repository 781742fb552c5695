//! Pluggable dual encoders.
//!
//! A [`DualEncoder`] maps images and text prompts into one unit-norm embedding
//! space. Backends that expose a spatial target layer also hand out an
//! [`ActivationScore`]: the image-text score as a function of that layer's
//! activations, with its gradient. The saliency methods are written purely
//! against these two traits.

mod synthetic;

use std::any::Any;
use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{standardize, Image};
use crate::warning::Warning;

pub use synthetic::{
    hadamard_pattern, HeadInit, RegionShape, SceneRegion, SyntheticConfig, SyntheticDualEncoder, SyntheticScene,
    SyntheticWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    /// d(score)/d(activations) is available.
    pub gradients_available: bool,
    pub activations_exposed: bool,
    /// Parameters can be updated by the fine-tuning engine.
    pub trainable: bool,
    /// Safe to call from several threads at once.
    pub concurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub channels: usize,
    /// Spatial extent `(h, w)` of the activation grid.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub name: String,
    pub embed_dim: usize,
    /// `(height, width)` expected by [`DualEncoder::encode_image`].
    pub input_size: (usize, usize),
    pub capabilities: Capabilities,
    pub target_layer: Option<LayerInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Array1<f64>,
    pub warnings: Vec<Warning>,
}

/// A scalar image-text score viewed as a function of target-layer activations.
pub trait ActivationScore {
    fn score(&self, activations: &Array3<f64>) -> f64;
    /// Same shape as `activations`.
    fn gradient(&self, activations: &Array3<f64>) -> Array3<f64>;
}

pub trait DualEncoder: Send + Sync {
    fn info(&self) -> &EncoderInfo;

    /// Size check plus CLIP channel standardization; returns 3×H×W.
    fn preprocess(&self, image: &Image) -> Result<Array3<f64>> {
        let expected = self.info().input_size;
        if image.size() != expected {
            return Err(Error::Preprocess(format!(
                "image is {}×{}, backend `{}` expects {}×{}",
                image.height(),
                image.width(),
                self.info().name,
                expected.0,
                expected.1
            )));
        }
        Ok(standardize(image))
    }

    /// Embeds already preprocessed (possibly masked) pixels.
    fn encode_pixels(&self, pixels: &Array3<f64>) -> Result<Array1<f64>>;

    fn encode_image(&self, image: &Image) -> Result<Array1<f64>> {
        self.encode_pixels(&self.preprocess(image)?)
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Target-layer activations (C×h×w) for preprocessed pixels.
    fn target_layer_activations(&self, _pixels: &Array3<f64>) -> Result<Array3<f64>> {
        Err(Error::ActivationsUnavailable(self.info().name.clone()))
    }

    /// Cosine score against `text` as a differentiable function of the activations.
    fn activation_score<'a>(&'a self, _text: &Array1<f64>) -> Result<Box<dyn ActivationScore + 'a>> {
        Err(Error::ActivationsUnavailable(self.info().name.clone()))
    }

    /// Score below which a prompt is treated as absent from a region, if the
    /// backend's similarities are calibrated well enough to say.
    fn presence_threshold(&self) -> Option<f64> {
        None
    }

    fn as_trainable(&mut self) -> Option<&mut dyn TrainableEncoder> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tower {
    Image,
    Text,
}

/// Forward pass of a training batch; `cache` is backend-private.
pub struct TrainForward {
    /// Unit-norm image embeddings, B×D.
    pub image: Array2<f64>,
    /// Unit-norm text embeddings, B×D.
    pub text: Array2<f64>,
    pub cache: Box<dyn Any + Send>,
}

pub struct ParamGrad {
    pub name: String,
    pub tower: Tower,
    pub grad: Array2<f64>,
}

pub trait TrainableEncoder: DualEncoder {
    fn forward_train(&self, images: &[Image], captions: &[&str]) -> Result<TrainForward>;

    /// Pushes embedding gradients back to the parameters.
    fn backward(&self, forward: &TrainForward, d_image: &Array2<f64>, d_text: &Array2<f64>) -> Result<Vec<ParamGrad>>;

    /// Parameters in the same order as [`TrainableEncoder::backward`] returns gradients.
    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn save_weights(&self, path: &std::path::Path) -> Result<()>;

    fn load_weights(&mut self, path: &std::path::Path) -> Result<()>;
}

/// Backend selection as read from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    pub weights_path: Option<PathBuf>,
    pub target_layer: Option<String>,
    pub input_size: Option<(usize, usize)>,
    pub synthetic: SyntheticConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            weights_path: None,
            target_layer: None,
            input_size: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Instantiates the configured encoder.
///
/// Only the synthetic backend ships with this crate. Other names are reserved
/// for pretrained dual encoders and report [`Error::BackendUnavailable`] until a
/// runtime for them is registered.
pub fn build_encoder(cfg: &BackendConfig) -> Result<Box<dyn DualEncoder>> {
    match cfg.name.as_str() {
        "synthetic" => {
            let mut syn = cfg.synthetic.clone();
            if let Some(size) = cfg.input_size {
                syn.input_size = size;
            }
            let mut encoder = SyntheticDualEncoder::new(syn)?;
            if let Some(layer) = &cfg.target_layer {
                if layer != synthetic::TARGET_LAYER {
                    return Err(Error::InvalidConfig(format!(
                        "synthetic backend has no layer `{layer}`, only `{}`",
                        synthetic::TARGET_LAYER
                    )));
                }
            }
            if let Some(path) = &cfg.weights_path {
                encoder.load_weights(path)?;
            }
            Ok(Box::new(encoder))
        }
        other => match &cfg.weights_path {
            None => Err(Error::BackendUnavailable(format!("backend `{other}` needs backend.weights_path"))),
            Some(path) if !path.exists() => Err(Error::BackendUnavailable(format!(
                "weights for `{other}` not found at {}",
                path.display()
            ))),
            Some(_) => Err(Error::BackendUnavailable(format!("no runtime is linked for backend `{other}`"))),
        },
    }
}

/// Cosine similarity of a unit-norm embedding `e` with `t`.
pub(crate) fn cosine(e: &Array1<f64>, t: &Array1<f64>) -> f64 {
    let ne = e.dot(e).sqrt();
    let nt = t.dot(t).sqrt();
    if ne == 0.0 || nt == 0.0 {
        return 0.0;
    }
    e.dot(t) / (ne * nt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_backends_are_unavailable() {
        let cfg = BackendConfig {
            name: "biomedclip".into(),
            ..BackendConfig::default()
        };
        assert!(matches!(build_encoder(&cfg), Err(Error::BackendUnavailable(_))));
        let cfg = BackendConfig {
            name: "biomedclip".into(),
            weights_path: Some("/nonexistent/weights.bin".into()),
            ..BackendConfig::default()
        };
        assert!(matches!(build_encoder(&cfg), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn synthetic_backend_builds_with_overrides() {
        let cfg = BackendConfig {
            input_size: Some((32, 48)),
            ..BackendConfig::default()
        };
        let enc = build_encoder(&cfg).unwrap();
        assert_eq!(enc.info().input_size, (32, 48));
        let bad = BackendConfig {
            target_layer: Some("blocks.11".into()),
            ..BackendConfig::default()
        };
        assert!(matches!(build_encoder(&bad), Err(Error::InvalidConfig(_))));
    }
}
