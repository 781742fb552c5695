//! Text-conditioned class activation maps: GradCAM and gScoreCAM.
//!
//! Both methods work on the target layer of a [`DualEncoder`]. The map-level
//! functions [`gradcam_map`] and [`gscorecam_map`] take activations and
//! gradients directly so they can be driven by hand-built fixtures; [`gradcam`]
//! and [`gscorecam`] wire them to an encoder, an image and a prompt.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::imaging::{min_max_normalize, resize_bilinear, Image};
use crate::warning::Warning;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    #[default]
    GScoreCam,
    GradCam,
}

impl CamMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CamMethod::GScoreCam => "gscorecam",
            CamMethod::GradCam => "gradcam",
        }
    }
}

impl std::fmt::Display for CamMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gscorecam" => Ok(CamMethod::GScoreCam),
            "gradcam" => Ok(CamMethod::GradCam),
            other => Err(Error::InvalidConfig(format!("unknown saliency method `{other}`"))),
        }
    }
}

/// Statistic used to pick the channels gScoreCAM scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRanking {
    #[default]
    MeanAbsGradient,
    /// Signed spatial mean of the gradient (the GradCAM weight).
    MeanGradient,
    MeanActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyOptions {
    pub method: CamMethod,
    pub top_k: usize,
    pub ranking: ChannelRanking,
    /// Softmax temperature over masked-input scores.
    pub score_temperature: f64,
    /// Subtract the score of the fully masked input from every channel score.
    pub baseline_subtraction: bool,
    /// Drop evidence scoring below the backend's presence threshold.
    pub presence_gate: bool,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        Self {
            method: CamMethod::GScoreCam,
            top_k: 60,
            ranking: ChannelRanking::MeanAbsGradient,
            score_temperature: 0.01,
            baseline_subtraction: false,
            presence_gate: true,
        }
    }
}

impl SaliencyOptions {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.score_temperature > 0.0) || !self.score_temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "score_temperature must be positive, got {}",
                self.score_temperature
            )));
        }
        Ok(())
    }
}

/// Per-pixel relevance of a prompt, in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub prompt: String,
    pub method: CamMethod,
    /// Channels actually scored (gScoreCAM only).
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Warning>,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_response(&self) -> bool {
        self.values.iter().any(|&v| v > 0.0)
    }
}

/// ReLU followed by division by the maximum; all-zero when nothing is positive.
pub fn relu_max_normalize(values: &Array2<f64>) -> Array2<f64> {
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    if !(max > 0.0) {
        return Array2::zeros(values.dim());
    }
    values.mapv(|v| v.max(0.0) / max)
}

fn check_same_shape(activations: &Array3<f64>, gradients: &Array3<f64>) -> Result<()> {
    if activations.dim() != gradients.dim() {
        return Err(Error::ShapeMismatch(format!(
            "activations {:?} vs gradients {:?}",
            activations.dim(),
            gradients.dim()
        )));
    }
    Ok(())
}

fn spatial_mean(values: &Array3<f64>) -> Vec<f64> {
    values
        .axis_iter(Axis(0))
        .map(|ch| ch.mean().unwrap_or(0.0))
        .collect()
}

/// GradCAM from activations and gradients (C×h×w), upsampled to `out_size`.
pub fn gradcam_map(activations: &Array3<f64>, gradients: &Array3<f64>, out_size: (usize, usize)) -> Result<Array2<f64>> {
    check_same_shape(activations, gradients)?;
    let (_, h, w) = activations.dim();
    let weights = spatial_mean(gradients);
    let mut cam = Array2::zeros((h, w));
    for (channel, weight) in activations.axis_iter(Axis(0)).zip(&weights) {
        cam.scaled_add(*weight, &channel);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let up = resize_bilinear(cam.view(), out_size.0, out_size.1);
    Ok(relu_max_normalize(&up))
}

/// Channel indices ordered by decreasing ranking statistic, ties by index.
pub fn rank_channels(activations: &Array3<f64>, gradients: &Array3<f64>, ranking: ChannelRanking) -> Vec<usize> {
    let stat: Vec<f64> = match ranking {
        ChannelRanking::MeanAbsGradient => spatial_mean(&gradients.mapv(f64::abs)),
        ChannelRanking::MeanGradient => spatial_mean(gradients),
        ChannelRanking::MeanActivation => spatial_mean(activations),
    };
    let mut order: Vec<usize> = (0..stat.len()).collect();
    order.sort_by(|&a, &b| stat[b].total_cmp(&stat[a]).then(a.cmp(&b)));
    order
}

/// Settings of [`gscorecam_map`] that do not depend on an encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScoring {
    pub top_k: usize,
    pub ranking: ChannelRanking,
    pub temperature: f64,
    /// Channels scoring below this are dropped.
    pub min_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GScoreCamOutput {
    pub values: Array2<f64>,
    /// Number of channels scored after clipping to the channel count.
    pub top_k: usize,
    /// Channel indices that contributed, with their scores.
    pub contributions: Vec<(usize, f64)>,
    pub warnings: Vec<Warning>,
}

/// gScoreCAM over precomputed activations and gradients.
///
/// `score` receives a channel's upsampled, min-max normalized map (of size
/// `mask_size`) and returns the score of the input masked by it, or `None` if
/// the masked input has no defined score. Channel maps that are constant carry
/// no spatial information and are skipped. The combined map is resized to
/// `out_size`.
pub fn gscorecam_map<F>(
    activations: &Array3<f64>,
    gradients: &Array3<f64>,
    mask_size: (usize, usize),
    out_size: (usize, usize),
    scoring: &ChannelScoring,
    score: F,
) -> Result<GScoreCamOutput>
where
    F: Fn(&Array2<f64>) -> Result<Option<f64>> + Sync,
{
    check_same_shape(activations, gradients)?;
    if scoring.top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let channels = activations.dim().0;
    let mut warnings = Vec::new();
    let top_k = if scoring.top_k > channels {
        warnings.push(Warning::TopKClipped {
            requested: scoring.top_k,
            available: channels,
        });
        channels
    } else {
        scoring.top_k
    };
    let kept: Vec<usize> = rank_channels(activations, gradients, scoring.ranking).into_iter().take(top_k).collect();

    let scored: Vec<Option<(usize, Array2<f64>, f64)>> = kept
        .par_iter()
        .map(|&c| {
            let up = resize_bilinear(activations.index_axis(Axis(0), c), mask_size.0, mask_size.1);
            let map = min_max_normalize(up.view());
            if !map.iter().any(|&v| v > 0.0) {
                return Ok(None);
            }
            Ok(score(&map)?.filter(|s| s.is_finite()).map(|s| (c, map, s)))
        })
        .collect::<Result<_>>()?;
    let scored: Vec<(usize, Array2<f64>, f64)> = scored
        .into_iter()
        .flatten()
        .filter(|(_, _, s)| scoring.min_score.is_none_or(|t| *s >= t))
        .collect();

    if scored.is_empty() {
        return Ok(GScoreCamOutput {
            values: Array2::zeros(out_size),
            top_k,
            contributions: Vec::new(),
            warnings,
        });
    }
    let max_score = scored.iter().map(|(_, _, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scored.iter().map(|(_, _, s)| ((s - max_score) / scoring.temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut combined = Array2::zeros(mask_size);
    for ((_, map, _), e) in scored.iter().zip(&exps) {
        combined.scaled_add(e / total, map);
    }
    let resized = resize_bilinear(combined.view(), out_size.0, out_size.1);
    Ok(GScoreCamOutput {
        values: relu_max_normalize(&resized),
        top_k,
        contributions: scored.iter().map(|(c, _, s)| (*c, *s)).collect(),
        warnings,
    })
}

struct Prepared {
    pixels: Array3<f64>,
    activations: Array3<f64>,
    gradients: Array3<f64>,
    text: ndarray::Array1<f64>,
    warnings: Vec<Warning>,
}

fn prepare(encoder: &dyn DualEncoder, image: &Image, prompt: &str) -> Result<Prepared> {
    let info = encoder.info();
    if !info.capabilities.activations_exposed || !info.capabilities.gradients_available {
        return Err(Error::ActivationsUnavailable(info.name.clone()));
    }
    let text = encoder.encode_text(prompt)?;
    let (ih, iw) = info.input_size;
    let pixels = encoder.preprocess(&image.resized(ih, iw))?;
    let activations = encoder.target_layer_activations(&pixels)?;
    let scorer = encoder.activation_score(&text.vector)?;
    let gradients = scorer.gradient(&activations);
    Ok(Prepared {
        pixels,
        activations,
        gradients,
        text: text.vector,
        warnings: text.warnings,
    })
}

fn masked_score(encoder: &dyn DualEncoder, pixels: &Array3<f64>, mask: &Array2<f64>, text: &ndarray::Array1<f64>) -> Result<Option<f64>> {
    let masked = pixels * &mask.view().insert_axis(Axis(0));
    match encoder.encode_pixels(&masked) {
        Ok(e) => Ok(Some(e.dot(text))),
        Err(Error::ZeroVectorRow { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// GradCAM for `prompt` on `image`; the map has the image's size.
pub fn gradcam(encoder: &dyn DualEncoder, image: &Image, prompt: &str, options: &SaliencyOptions) -> Result<SaliencyMap> {
    let prep = prepare(encoder, image, prompt)?;
    let mut values = gradcam_map(&prep.activations, &prep.gradients, image.size())?;
    if options.presence_gate {
        if let Some(threshold) = encoder.presence_threshold() {
            let whole = encoder.encode_pixels(&prep.pixels)?.dot(&prep.text);
            if whole < threshold {
                values.fill(0.0);
            }
        }
    }
    Ok(SaliencyMap {
        values,
        prompt: prompt.to_string(),
        method: CamMethod::GradCam,
        top_k: None,
        warnings: prep.warnings,
    })
}

/// gScoreCAM for `prompt` on `image`; the map has the image's size.
pub fn gscorecam(encoder: &dyn DualEncoder, image: &Image, prompt: &str, options: &SaliencyOptions) -> Result<SaliencyMap> {
    options.validate()?;
    let prep = prepare(encoder, image, prompt)?;
    let (_, ih, iw) = prep.pixels.dim();
    let baseline = if options.baseline_subtraction {
        masked_score(encoder, &prep.pixels, &Array2::zeros((ih, iw)), &prep.text)?.unwrap_or(0.0)
    } else {
        0.0
    };
    let scoring = ChannelScoring {
        top_k: options.top_k,
        ranking: options.ranking,
        temperature: options.score_temperature,
        min_score: if options.presence_gate {
            encoder.presence_threshold().map(|t| t - baseline)
        } else {
            None
        },
    };
    let out = gscorecam_map(&prep.activations, &prep.gradients, (ih, iw), image.size(), &scoring, |mask| {
        Ok(masked_score(encoder, &prep.pixels, mask, &prep.text)?.map(|s| s - baseline))
    })?;
    let mut warnings = prep.warnings;
    warnings.extend(out.warnings);
    Ok(SaliencyMap {
        values: out.values,
        prompt: prompt.to_string(),
        method: CamMethod::GScoreCam,
        top_k: Some(out.top_k),
        warnings,
    })
}

/// Dispatches on `options.method`.
pub fn saliency(encoder: &dyn DualEncoder, image: &Image, prompt: &str, options: &SaliencyOptions) -> Result<SaliencyMap> {
    match options.method {
        CamMethod::GScoreCam => gscorecam(encoder, image, prompt, options),
        CamMethod::GradCam => gradcam(encoder, image, prompt, options),
    }
}
