//! A desk-scale dual encoder with known ground truth.
//!
//! Images are read through a fixed bank of 4×4 Walsh-Hadamard texture
//! detectors: the target layer has one channel per pattern and one spatial
//! cell per aligned 4×4 pixel block. A concept is a texture; rendering concept
//! `c` into a region fills it with pattern `c` around the CLIP mean colour, so
//! the standardized image is zero outside the textured regions and a block of
//! pattern `c` excites channel `c` only.
//!
//! On top of the frozen detectors sit two linear projection heads (image:
//! pooled channel responses, text: bag of tokens). The ideal initialisation
//! places concept `c` on `sqrt(1-ρ)·e_c + sqrt(ρ)·u` for a shared direction
//! `u`, giving matched pairs cosine 1 and mismatched pairs cosine `ρ = 1 - margin`.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ActivationScore, Capabilities, DualEncoder, EncoderInfo, LayerInfo, ParamGrad, TextEmbedding, Tower,
    TrainForward, TrainableEncoder,
};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask, CLIP_MEAN, CLIP_STD};
use crate::warning::Warning;

pub(crate) const TARGET_LAYER: &str = "pattern_bank";
const PATCH: usize = 4;
const CHANNELS: usize = 15;

/// Hadamard rows used as channels, as (row-factor, column-factor) pairs of the
/// 4-point Walsh basis. Patterns orthogonal to linear ramps come first.
const CHANNEL_FACTORS: [(usize, usize); CHANNELS] = [
    (3, 3),
    (1, 3),
    (3, 1),
    (1, 1),
    (3, 2),
    (2, 3),
    (1, 2),
    (2, 1),
    (2, 2),
    (0, 3),
    (3, 0),
    (0, 1),
    (1, 0),
    (0, 2),
    (2, 0),
];

fn walsh(index: usize, t: usize) -> f64 {
    if (index & t).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// The ±1 texture of channel `channel`, row-major over a 4×4 block.
pub fn hadamard_pattern(channel: usize) -> [f64; 16] {
    let (fy, fx) = CHANNEL_FACTORS[channel];
    let mut out = [0.0; 16];
    for dy in 0..PATCH {
        for dx in 0..PATCH {
            out[dy * PATCH + dx] = walsh(fy, dy) * walsh(fx, dx);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Ideal,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub concepts: Vec<String>,
    /// Tokens with their own text-head column that carry no concept in the ideal head.
    pub filler_words: Vec<String>,
    pub embed_dim: usize,
    pub input_size: (usize, usize),
    /// Matched minus mismatched cosine under the ideal head.
    pub margin: f64,
    pub activations_exposed: bool,
    pub trainable: bool,
    pub init: HeadInit,
    /// Defaults to `1 - margin / 2` for the ideal head.
    pub presence_threshold: Option<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|s| s.to_string()).collect();
        Self {
            name: "synthetic".into(),
            concepts: words(&["tumor", "lung", "lesion", "cyst", "nodule", "vessel", "bone", "organ"]),
            filler_words: words(&[
                "a", "an", "the", "of", "in", "on", "with", "and", "showing", "scan", "image", "brain", "breast",
                "chest", "x-ray", "mri", "ultrasound", "region", "left", "right",
            ]),
            embed_dim: 16,
            input_size: (224, 224),
            margin: 0.5,
            activations_exposed: true,
            trainable: true,
            init: HeadInit::Ideal,
            presence_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWeights {
    pub concepts: Vec<String>,
    pub filler_words: Vec<String>,
    /// D × channels.
    pub image_head: Array2<f64>,
    /// D × (concepts + filler words).
    pub text_head: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDualEncoder {
    cfg: SyntheticConfig,
    info: EncoderInfo,
    weights: SyntheticWeights,
}

impl SyntheticDualEncoder {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        let k = cfg.concepts.len();
        if k == 0 || k > CHANNELS {
            return Err(Error::InvalidConfig(format!("synthetic backend supports 1..={CHANNELS} concepts, got {k}")));
        }
        if cfg.embed_dim < k + 1 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be at least concepts + 1 = {}, got {}",
                k + 1,
                cfg.embed_dim
            )));
        }
        if !(0.2..=1.0).contains(&cfg.margin) {
            return Err(Error::InvalidConfig(format!("margin must lie in [0.2, 1], got {}", cfg.margin)));
        }
        let (h, w) = cfg.input_size;
        if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::InvalidConfig(format!("input size must be a positive multiple of {PATCH}, got {h}×{w}")));
        }
        let mut seen = std::collections::HashSet::new();
        for word in cfg.concepts.iter().chain(&cfg.filler_words) {
            if !seen.insert(word.to_lowercase()) {
                return Err(Error::InvalidConfig(format!("vocabulary word `{word}` is listed twice")));
            }
        }

        let d = cfg.embed_dim;
        let vocab = k + cfg.filler_words.len();
        let (image_head, text_head) = match cfg.init {
            HeadInit::Ideal => {
                let rho = 1.0 - cfg.margin;
                let mut image_head = Array2::zeros((d, CHANNELS));
                let mut text_head = Array2::zeros((d, vocab));
                for c in 0..k {
                    for head in [&mut image_head, &mut text_head] {
                        head[[c, c]] = (1.0 - rho).sqrt();
                        head[[k, c]] = rho.sqrt();
                    }
                }
                (image_head, text_head)
            }
            HeadInit::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
                let image_head = Array2::from_shape_simple_fn((d, CHANNELS), || normal.sample(&mut rng));
                let text_head = Array2::from_shape_simple_fn((d, vocab), || normal.sample(&mut rng));
                (image_head, text_head)
            }
        };

        let info = EncoderInfo {
            name: cfg.name.clone(),
            embed_dim: d,
            input_size: cfg.input_size,
            capabilities: Capabilities {
                gradients_available: cfg.activations_exposed,
                activations_exposed: cfg.activations_exposed,
                trainable: cfg.trainable,
                concurrent: true,
            },
            target_layer: cfg.activations_exposed.then(|| LayerInfo {
                name: TARGET_LAYER.into(),
                channels: CHANNELS,
                grid: (h / PATCH, w / PATCH),
            }),
        };
        let weights = SyntheticWeights {
            concepts: cfg.concepts.clone(),
            filler_words: cfg.filler_words.clone(),
            image_head,
            text_head,
        };
        Ok(Self { cfg, info, weights })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &SyntheticWeights {
        &self.weights
    }

    pub fn concepts(&self) -> &[String] {
        &self.cfg.concepts
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        let name = name.to_lowercase();
        self.cfg.concepts.iter().position(|c| c.to_lowercase() == name)
    }

    /// Activation of a fully covered block for a scene rendered at `amplitude`.
    pub fn block_response(amplitude: f64) -> f64 {
        amplitude * CLIP_STD.iter().map(|s| 1.0 / s).sum::<f64>() / 3.0
    }

    fn check_pixels(&self, pixels: &Array3<f64>) -> Result<()> {
        let (c, h, w) = pixels.dim();
        if c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Preprocess(format!(
                "pixels are {c}×{h}×{w}, backend expects 3×{}×{}",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        Ok(())
    }

    /// Texture-detector responses, CHANNELS × h/4 × w/4.
    fn pattern_responses(&self, pixels: &Array3<f64>) -> Array3<f64> {
        let gray = pixels.mean_axis(Axis(0)).expect("three channels");
        let (h, w) = gray.dim();
        let (gh, gw) = (h / PATCH, w / PATCH);
        let patterns: Vec<[f64; 16]> = (0..CHANNELS).map(hadamard_pattern).collect();
        let mut out = Array3::zeros((CHANNELS, gh, gw));
        let mut block = [0.0; 16];
        for by in 0..gh {
            for bx in 0..gw {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        block[dy * PATCH + dx] = gray[[by * PATCH + dy, bx * PATCH + dx]];
                    }
                }
                for (c, pattern) in patterns.iter().enumerate() {
                    let corr: f64 = pattern.iter().zip(&block).map(|(p, v)| p * v).sum();
                    out[[c, by, bx]] = (corr / 16.0).max(0.0);
                }
            }
        }
        out
    }

    fn pooled(&self, pixels: &Array3<f64>) -> Array1<f64> {
        let acts = self.pattern_responses(pixels);
        let (c, gh, gw) = acts.dim();
        acts.into_shape_with_order((c, gh * gw))
            .expect("contiguous activations")
            .mean_axis(Axis(1))
            .expect("non-empty grid")
    }

    fn vocab_index(&self, token: &str) -> Option<usize> {
        let k = self.cfg.concepts.len();
        self.cfg
            .concepts
            .iter()
            .position(|c| c.eq_ignore_ascii_case(token))
            .or_else(|| {
                self.cfg
                    .filler_words
                    .iter()
                    .position(|f| f.eq_ignore_ascii_case(token))
                    .map(|i| k + i)
            })
    }

    fn nearest_concept(&self, token: &str) -> usize {
        self.cfg
            .concepts
            .iter()
            .enumerate()
            .min_by_key(|(i, c)| (strsim::levenshtein(&c.to_lowercase(), token), *i))
            .map(|(i, _)| i)
            .expect("at least one concept")
    }

    /// Bag-of-tokens counts over concepts then filler words.
    fn token_counts(&self, prompt: &str) -> Result<(Array1<f64>, Vec<Warning>)> {
        let tokens: Vec<String> = prompt
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let k = self.cfg.concepts.len();
        let mut counts = Array1::zeros(k + self.cfg.filler_words.len());
        let mut warnings = Vec::new();
        let mut has_concept = false;
        let mut unknown = Vec::new();
        for token in &tokens {
            match self.vocab_index(token) {
                Some(i) => {
                    counts[i] += 1.0;
                    has_concept |= i < k;
                }
                None => unknown.push(token.as_str()),
            }
        }
        // With no recognised concept, every token falls back to its closest concept.
        let fallback: Vec<&str> = if unknown.is_empty() && !has_concept {
            tokens.iter().map(String::as_str).collect()
        } else {
            unknown
        };
        for token in fallback {
            let c = self.nearest_concept(token);
            counts[c] += 1.0;
            warnings.push(Warning::NearestConcept {
                token: token.to_string(),
                concept: self.cfg.concepts[c].clone(),
            });
        }
        Ok((counts, warnings))
    }
}

fn unit(v: Array1<f64>, row: usize) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n >= crate::embedding::ZERO_NORM) {
        return Err(Error::ZeroVectorRow { row });
    }
    Ok(v / n)
}

impl DualEncoder for SyntheticDualEncoder {
    fn info(&self) -> &EncoderInfo {
        &self.info
    }

    fn encode_pixels(&self, pixels: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_pixels(pixels)?;
        unit(self.weights.image_head.dot(&self.pooled(pixels)), 0)
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let (counts, warnings) = self.token_counts(prompt)?;
        let vector = unit(self.weights.text_head.dot(&counts), 0)?;
        Ok(TextEmbedding { vector, warnings })
    }

    fn target_layer_activations(&self, pixels: &Array3<f64>) -> Result<Array3<f64>> {
        if !self.cfg.activations_exposed {
            return Err(Error::ActivationsUnavailable(self.cfg.name.clone()));
        }
        self.check_pixels(pixels)?;
        Ok(self.pattern_responses(pixels))
    }

    fn activation_score<'a>(&'a self, text: &Array1<f64>) -> Result<Box<dyn ActivationScore + 'a>> {
        if !self.cfg.activations_exposed {
            return Err(Error::ActivationsUnavailable(self.cfg.name.clone()));
        }
        let text = unit(text.clone(), 0)?;
        Ok(Box::new(PooledCosineScore {
            head: &self.weights.image_head,
            text,
        }))
    }

    fn presence_threshold(&self) -> Option<f64> {
        match (self.cfg.presence_threshold, self.cfg.init) {
            (Some(t), _) => Some(t),
            (None, HeadInit::Ideal) => Some(1.0 - self.cfg.margin / 2.0),
            (None, HeadInit::Random { .. }) => None,
        }
    }

    fn as_trainable(&mut self) -> Option<&mut dyn TrainableEncoder> {
        if self.cfg.trainable {
            Some(self)
        } else {
            None
        }
    }
}

/// `cos(W · mean_hw(A), t)` with its gradient in `A`.
struct PooledCosineScore<'a> {
    head: &'a Array2<f64>,
    text: Array1<f64>,
}

impl PooledCosineScore<'_> {
    fn pooled(acts: &Array3<f64>) -> Array1<f64> {
        acts.mean_axis(Axis(2)).and_then(|m| m.mean_axis(Axis(1))).expect("non-empty activations")
    }
}

impl ActivationScore for PooledCosineScore<'_> {
    fn score(&self, activations: &Array3<f64>) -> f64 {
        super::cosine(&self.head.dot(&Self::pooled(activations)), &self.text)
    }

    fn gradient(&self, activations: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = activations.dim();
        let e = self.head.dot(&Self::pooled(activations));
        let n = e.dot(&e).sqrt();
        if n == 0.0 {
            return Array3::zeros((c, h, w));
        }
        let e_hat = &e / n;
        let s = e_hat.dot(&self.text);
        let d_e = (&self.text - &(s * &e_hat)) / n;
        let d_pooled = self.head.t().dot(&d_e);
        let cells = (h * w) as f64;
        Array3::from_shape_fn((c, h, w), |(ch, _, _)| d_pooled[ch] / cells)
    }
}

struct SyntheticCache {
    features: Array2<f64>,
    counts: Array2<f64>,
    image_norms: Array1<f64>,
    text_norms: Array1<f64>,
}

/// Gradient through row normalisation: `(g - (g·ê) ê) / |e|`.
fn through_normalisation(d_unit: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = d_unit.clone();
    for ((mut g, u), n) in out.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(norms) {
        let proj = g.dot(&u);
        g.zip_mut_with(&u, |gv, &uv| *gv = (*gv - proj * uv) / n);
    }
    out
}

fn normalise_rows_with_norms(raw: Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(row) = norms.iter().position(|n| !(*n >= crate::embedding::ZERO_NORM)) {
        return Err(Error::ZeroVectorRow { row });
    }
    let unit = &raw / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

impl TrainableEncoder for SyntheticDualEncoder {
    fn forward_train(&self, images: &[Image], captions: &[&str]) -> Result<TrainForward> {
        if images.len() != captions.len() {
            return Err(Error::LengthMismatch {
                left: images.len(),
                right: captions.len(),
            });
        }
        let b = images.len();
        let mut features = Array2::zeros((b, CHANNELS));
        let mut counts = Array2::zeros((b, self.weights.text_head.ncols()));
        for (i, (image, caption)) in images.iter().zip(captions).enumerate() {
            features.row_mut(i).assign(&self.pooled(&self.preprocess(image)?));
            counts.row_mut(i).assign(&self.token_counts(caption)?.0);
        }
        let (image, image_norms) = normalise_rows_with_norms(features.dot(&self.weights.image_head.t()))?;
        let (text, text_norms) = normalise_rows_with_norms(counts.dot(&self.weights.text_head.t()))?;
        Ok(TrainForward {
            image,
            text,
            cache: Box::new(SyntheticCache {
                features,
                counts,
                image_norms,
                text_norms,
            }),
        })
    }

    fn backward(&self, forward: &TrainForward, d_image: &Array2<f64>, d_text: &Array2<f64>) -> Result<Vec<ParamGrad>> {
        let cache = forward
            .cache
            .downcast_ref::<SyntheticCache>()
            .ok_or_else(|| Error::InvalidConfig("forward pass came from a different backend".into()))?;
        let d_image_raw = through_normalisation(d_image, &forward.image, &cache.image_norms);
        let d_text_raw = through_normalisation(d_text, &forward.text, &cache.text_norms);
        Ok(vec![
            ParamGrad {
                name: "image_head".into(),
                tower: Tower::Image,
                grad: d_image_raw.t().dot(&cache.features),
            },
            ParamGrad {
                name: "text_head".into(),
                tower: Tower::Text,
                grad: d_text_raw.t().dot(&cache.counts),
            },
        ])
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weights.image_head, &mut self.weights.text_head]
    }

    fn save_weights(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.weights).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::BackendUnavailable(format!("{}: {e}", path.display())))?;
        let weights: SyntheticWeights =
            serde_json::from_slice(&bytes).map_err(|e| Error::CheckpointCorrupt(format!("{}: {e}", path.display())))?;
        if weights.concepts != self.weights.concepts
            || weights.filler_words != self.weights.filler_words
            || weights.image_head.dim() != self.weights.image_head.dim()
            || weights.text_head.dim() != self.weights.text_head.dim()
        {
            return Err(Error::CheckpointCorrupt(format!(
                "{} does not match the configured vocabulary or embedding size",
                path.display()
            )));
        }
        self.weights = weights;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionShape {
    /// Half-open pixel rectangle `[top, bottom) × [left, right)`.
    Rect { top: usize, left: usize, bottom: usize, right: usize },
    Disk { cy: f64, cx: f64, radius: f64 },
}

impl RegionShape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            RegionShape::Rect { top, left, bottom, right } => (top..bottom).contains(&y) && (left..right).contains(&x),
            RegionShape::Disk { cy, cx, radius } => {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRegion {
    pub concept: usize,
    pub shape: RegionShape,
}

/// A renderable synthetic scene of textured concept regions on a CLIP-mean background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<SceneRegion>,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            regions: Vec::new(),
            amplitude: 0.3,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn with_region(mut self, concept: usize, shape: RegionShape) -> Self {
        self.regions.push(SceneRegion { concept, shape });
        self
    }

    pub fn with_noise(mut self, std: f64, seed: u64) -> Self {
        self.noise_std = std;
        self.seed = seed;
        self
    }

    /// Later regions paint over earlier ones.
    pub fn render(&self) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("valid std");
        let patterns: Vec<[f64; 16]> = (0..CHANNELS).map(hadamard_pattern).collect();
        let mut pixels = Array3::zeros((self.height, self.width, 3));
        for y in 0..self.height {
            for x in 0..self.width {
                let texture = self
                    .regions
                    .iter()
                    .rev()
                    .find(|r| r.shape.contains(y, x))
                    .map(|r| self.amplitude * patterns[r.concept % CHANNELS][(y % PATCH) * PATCH + x % PATCH])
                    .unwrap_or(0.0);
                let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                for c in 0..3 {
                    pixels[[y, x, c]] = (CLIP_MEAN[c] + texture + n).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(pixels).expect("values clamped to [0, 1]")
    }

    /// Pixels where region `index` is visible.
    pub fn region_mask(&self, index: usize) -> Mask {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.regions.iter().enumerate().rev().find(|(_, r)| r.shape.contains(y, x)).map(|(i, _)| i) == Some(index)
        })
    }

    /// Union of all regions showing `concept`.
    pub fn concept_mask(&self, concept: usize) -> Mask {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.regions.iter().rev().find(|r| r.shape.contains(y, x)).map(|r| r.concept) == Some(concept)
        })
    }
}
