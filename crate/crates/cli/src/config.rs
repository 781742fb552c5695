//! TOML configuration shared by every subcommand.
//!
//! All tables are optional; missing keys take their defaults.
//!
//! ```toml
//! [backend]            # dual encoder: name, weights_path, target_layer, input_size, [backend.synthetic]
//! [segmenter]          # box-promptable segmenter: name, context_margin, threshold, background_level
//! [pipeline]           # min_area_fraction, multi_box, [pipeline.saliency], [pipeline.crf]
//! [server]             # bind
//! [data]               # root, fractions, split_seed, rounding, [data.cleaning]
//! [finetune]           # contrastive fine-tuning options
//! [retrieval]          # model, split, out, [retrieval.protocol]
//! [weak]               # train_dir, val_dir, val_pseudo_dir, report, [weak.train], [weak.model]
//! ```
//!
//! `PROMPTSEG_WEIGHTS_PATH` overrides `backend.weights_path`.

use std::path::{Path, PathBuf};

use promptseg_core::data::{CleaningConfig, SplitRounding};
use promptseg_core::encoder::BackendConfig;
use promptseg_core::finetune::TrainConfig;
use promptseg_core::pipeline::{SyntheticSegmenterConfig, ZeroShotOptions};
use promptseg_core::resunet::ResUNetSpec;
use promptseg_core::retrieval::RetrievalProtocol;
use promptseg_core::weak::WeakTrainConfig;
use promptseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const WEIGHTS_ENV: &str = "PROMPTSEG_WEIGHTS_PATH";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub backend: BackendConfig,
    pub segmenter: SegmenterConfig,
    pub pipeline: ZeroShotOptions,
    pub server: ServerConfig,
    pub data: DataConfig,
    pub finetune: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub weak: WeakConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub name: String,
    pub context_margin: usize,
    pub threshold: f64,
    pub background_level: Option<f64>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        let syn = SyntheticSegmenterConfig::default();
        Self {
            name: "synthetic-box".into(),
            context_margin: syn.context_margin,
            threshold: syn.threshold,
            background_level: syn.background_level,
        }
    }
}

impl SegmenterConfig {
    pub fn synthetic(&self) -> SyntheticSegmenterConfig {
        SyntheticSegmenterConfig {
            context_margin: self.context_margin,
            threshold: self.threshold,
            background_level: self.background_level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Largest accepted request body in bytes.
    pub body_limit: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            body_limit: 32 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with `images/`, `masks/`, `captions.csv` and optionally `splits.json`.
    pub root: Option<PathBuf>,
    /// Used when `splits.json` is absent; names are train, val, test in order.
    pub fractions: Vec<f64>,
    pub split_seed: u64,
    pub rounding: SplitRounding,
    pub cleaning: CleaningConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            fractions: vec![0.85, 0.15],
            split_seed: 0,
            rounding: SplitRounding::default(),
            cleaning: CleaningConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Label in the output CSV; the backend name when unset.
    pub model: Option<String>,
    /// Split to evaluate, or "all".
    pub split: String,
    pub out: Option<PathBuf>,
    pub protocol: RetrievalProtocol,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            model: None,
            split: "test".into(),
            out: None,
            protocol: RetrievalProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakConfig {
    /// Images with pseudo-masks as training targets.
    pub train_dir: Option<PathBuf>,
    /// Images with ground-truth masks for model selection.
    pub val_dir: Option<PathBuf>,
    /// Pseudo-masks for the validation images, for the refinement comparison.
    pub val_pseudo_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub train: WeakTrainConfig,
    pub model: ResUNetSpec,
}

impl AppConfig {
    /// Reads `path` (defaults when `None`) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::var_os(WEIGHTS_ENV).map(PathBuf::from));
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }

    pub fn apply_env(&mut self, weights: Option<PathBuf>) {
        if let Some(w) = weights.filter(|w| !w.as_os_str().is_empty()) {
            self.backend.weights_path = Some(w);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
