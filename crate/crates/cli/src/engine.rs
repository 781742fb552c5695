//! The segmentation code path shared by the CLI and the HTTP service.

use std::sync::{Arc, Mutex, MutexGuard};

use base64::Engine as _;
use ndarray::Array2;
use promptseg_core::crf::CrfParams;
use promptseg_core::encoder::{build_encoder, DualEncoder, EncoderInfo};
use promptseg_core::imaging::{decode_mask, heatmap_png, mask_to_png, Image, Mask};
use promptseg_core::metrics::{auc, evaluate_mask, SegRecord};
use promptseg_core::pipeline::{
    zero_shot_segment, BoxPrompt, PromptableSegmenter, Provenance, PseudoMask, SegmenterInfo, StageTimings,
    SyntheticSegmenter, ZeroShotOptions,
};
use promptseg_core::saliency::{saliency, CamMethod, SaliencyMap};
use promptseg_core::warning::Warning;
use promptseg_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;

/// Per-request overrides of the configured CRF parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfOverrides {
    pub iterations: Option<usize>,
    pub gaussian_weight: Option<f64>,
    pub gaussian_std: Option<f64>,
    pub bilateral_weight: Option<f64>,
    pub bilateral_spatial_std: Option<f64>,
    pub bilateral_color_std: Option<f64>,
}

impl CrfOverrides {
    pub fn apply(&self, base: &CrfParams) -> CrfParams {
        CrfParams {
            iterations: self.iterations.unwrap_or(base.iterations),
            gaussian_weight: self.gaussian_weight.unwrap_or(base.gaussian_weight),
            gaussian_std: self.gaussian_std.unwrap_or(base.gaussian_std),
            bilateral_weight: self.bilateral_weight.unwrap_or(base.bilateral_weight),
            bilateral_spatial_std: self.bilateral_spatial_std.unwrap_or(base.bilateral_spatial_std),
            bilateral_color_std: self.bilateral_color_std.unwrap_or(base.bilateral_color_std),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    pub method: Option<CamMethod>,
    pub top_k: Option<usize>,
    pub crf: CrfOverrides,
    pub multi_box: Option<bool>,
    /// Minimum component area as a fraction of the image.
    pub threshold: Option<f64>,
    /// Include per-stage timings in the response body.
    pub timings: bool,
}

impl SegmentParams {
    pub fn apply(&self, base: &ZeroShotOptions) -> ZeroShotOptions {
        let mut out = base.clone();
        if let Some(m) = self.method {
            out.saliency.method = m;
        }
        if let Some(k) = self.top_k {
            out.saliency.top_k = k;
        }
        out.crf = self.crf.apply(&base.crf);
        if let Some(mb) = self.multi_box {
            out.multi_box = mb;
        }
        if let Some(t) = self.threshold {
            out.min_area_fraction = t;
        }
        out
    }
}

/// Decoded inputs of a segmentation run.
#[derive(Debug, Clone)]
pub struct SegmentInput {
    pub image: Image,
    pub prompt: String,
    pub params: SegmentParams,
    pub gt: Option<Mask>,
}

impl SegmentInput {
    /// Decodes encoded image (and optional mask) bytes.
    pub fn decode(image: &[u8], prompt: &str, params: SegmentParams, gt: Option<&[u8]>) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let image = Image::decode(image)?;
        let gt = gt.map(decode_mask).transpose()?;
        if let Some(g) = &gt {
            if g.dim() != image.size() {
                return Err(Error::SizeMismatch(format!(
                    "image {:?} vs ground truth {:?}",
                    image.size(),
                    g.dim()
                )));
            }
        }
        Ok(Self {
            image,
            prompt: prompt.to_string(),
            params,
            gt,
        })
    }
}

/// Raw float map, little-endian f32, row-major, base64-encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatArray {
    pub height: usize,
    pub width: usize,
    pub f32_le: String,
}

impl FloatArray {
    pub fn encode(values: &Array2<f64>) -> Self {
        let (height, width) = values.dim();
        let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        Self {
            height,
            width,
            f32_le: b64(&bytes),
        }
    }

    pub fn decode(&self) -> Result<Array2<f32>> {
        let bytes = unb64(&self.f32_le)?;
        if bytes.len() != self.height * self.width * 4 {
            return Err(Error::SizeMismatch(format!(
                "{} bytes for a {}×{} float array",
                bytes.len(),
                self.height,
                self.width
            )));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Array2::from_shape_vec((self.height, self.width), values).expect("length checked"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPayload {
    pub method: CamMethod,
    pub top_k: Option<usize>,
    /// Jet-colored PNG, base64.
    pub heatmap_png: String,
    pub values: FloatArray,
}

impl SaliencyPayload {
    pub fn new(map: &SaliencyMap) -> Self {
        Self {
            method: map.method,
            top_k: map.top_k,
            heatmap_png: b64(&heatmap_png(map.values.view())),
            values: FloatArray::encode(&map.values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    /// Binary mask as 8-bit grayscale PNG (foreground 255), base64.
    pub mask_png: String,
    pub boxes: Vec<BoxPrompt>,
    pub saliency: SaliencyPayload,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<SegRecord>,
    pub provenance: Provenance,
    pub config_hash: String,
    pub warnings: Vec<Warning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl SegmentResponse {
    /// Boxes inside the image and non-negative timings.
    pub fn check_invariants(&self) -> Result<()> {
        let (h, w) = self.provenance.image_size;
        for b in &self.boxes {
            b.validate(h, w)?;
        }
        if let Some(t) = &self.timings {
            if [t.saliency_ms, t.crf_ms, t.boxes_ms, t.segment_ms].iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidConfig("negative stage timing".into()));
            }
        }
        Ok(())
    }
}

/// Output of [`Engine::segment`] before encoding.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub pseudo: PseudoMask,
    pub metrics: Option<SegRecord>,
    pub include_timings: bool,
}

impl SegmentOutcome {
    pub fn mask_png(&self) -> Vec<u8> {
        mask_to_png(&self.pseudo.mask)
    }

    pub fn boxes_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.pseudo.boxes).expect("boxes serialize")
    }

    pub fn response(&self) -> SegmentResponse {
        SegmentResponse {
            mask_png: b64(&self.mask_png()),
            boxes: self.pseudo.boxes.clone(),
            saliency: SaliencyPayload::new(&self.pseudo.saliency),
            metrics: self.metrics.clone(),
            provenance: self.pseudo.provenance.clone(),
            config_hash: provenance_hash(&self.pseudo.provenance),
            warnings: self.pseudo.warnings.clone(),
            timings: self.include_timings.then(|| self.pseudo.timings.clone()),
        }
    }
}

/// Short hash of the serialized provenance.
pub fn provenance_hash(p: &Provenance) -> String {
    let json = serde_json::to_vec(p).expect("provenance serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResponse {
    pub prompt: String,
    pub saliency: SaliencyPayload,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendsResponse {
    pub encoders: Vec<EncoderInfo>,
    pub segmenters: Vec<SegmenterInfo>,
}

/// Loaded backends plus the configured pipeline defaults.
pub struct Engine {
    encoder: Arc<dyn DualEncoder>,
    segmenter: Arc<dyn PromptableSegmenter>,
    options: ZeroShotOptions,
    /// Held for the whole run when the encoder is not safe to share.
    lease: Option<Mutex<()>>,
}

impl Engine {
    pub fn from_config(cfg: &AppConfig) -> Result<Self> {
        let encoder: Arc<dyn DualEncoder> = Arc::from(build_encoder(&cfg.backend)?);
        let segmenter: Arc<dyn PromptableSegmenter> = match cfg.segmenter.name.as_str() {
            "synthetic-box" | "synthetic" => Arc::new(SyntheticSegmenter::new(cfg.segmenter.synthetic())?),
            other => return Err(Error::BackendUnavailable(format!("no runtime is linked for segmenter `{other}`"))),
        };
        cfg.pipeline.saliency.validate()?;
        cfg.pipeline.crf.validate()?;
        Ok(Self::new(encoder, segmenter, cfg.pipeline.clone()))
    }

    pub fn new(encoder: Arc<dyn DualEncoder>, segmenter: Arc<dyn PromptableSegmenter>, options: ZeroShotOptions) -> Self {
        let lease = (!encoder.info().capabilities.concurrent).then(|| Mutex::new(()));
        Self {
            encoder,
            segmenter,
            options,
            lease,
        }
    }

    pub fn options(&self) -> &ZeroShotOptions {
        &self.options
    }

    pub fn backends(&self) -> BackendsResponse {
        BackendsResponse {
            encoders: vec![self.encoder.info().clone()],
            segmenters: vec![self.segmenter.info().clone()],
        }
    }

    pub fn backend_names(&self) -> Vec<String> {
        vec![self.encoder.info().name.clone(), self.segmenter.info().name.clone()]
    }

    fn lease(&self) -> Option<MutexGuard<'_, ()>> {
        // A poisoned lease only means an earlier run panicked; the backend holds no request state.
        self.lease.as_ref().map(|m| m.lock().unwrap_or_else(|e| e.into_inner()))
    }

    /// Zero-shot segmentation; metrics are added when ground truth is given.
    ///
    /// IoU and DSC score the final mask, AUC scores the saliency map.
    pub fn segment(&self, input: &SegmentInput) -> Result<SegmentOutcome> {
        if input.prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let options = input.params.apply(&self.options);
        let pseudo = {
            let _lease = self.lease();
            zero_shot_segment(self.encoder.as_ref(), self.segmenter.as_ref(), &input.image, &input.prompt, &options)?
        };
        let metrics = match &input.gt {
            Some(gt) => {
                let mut record = evaluate_mask("prediction", &pseudo.mask, gt)?;
                record.warnings.retain(|w| !matches!(w, Warning::BinaryScoreAuc { .. }));
                record.auc = auc(pseudo.saliency.values.view(), gt).ok();
                Some(record)
            }
            None => None,
        };
        Ok(SegmentOutcome {
            pseudo,
            metrics,
            include_timings: input.params.timings,
        })
    }

    pub fn saliency(&self, image: &Image, prompt: &str, params: &SegmentParams) -> Result<SaliencyMap> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let options = params.apply(&self.options).saliency;
        let _lease = self.lease();
        saliency(self.encoder.as_ref(), image, prompt, &options)
    }
}

pub fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn unb64(text: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD.decode(text.trim()).map_err(|e| Error::Decode {
        path: "<base64>".into(),
        reason: e.to_string(),
    })
}
