//! Argument parsing and subcommand dispatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use promptseg_core::data::{clean_captions, split_dataset, CaptionRecord, DatasetLayout};
use promptseg_core::encoder::build_encoder;
use promptseg_core::finetune::finetune;
use promptseg_core::imaging::{heatmap_png, mask_to_png, Image};
use promptseg_core::metrics::{evaluate_dirs, write_summary_csv};
use promptseg_core::retrieval::run_protocol;
use promptseg_core::saliency::CamMethod;
use promptseg_core::weak::{predict, train_weak};
use promptseg_core::{Error, Result};
use serde_json::json;

use crate::api;
use crate::config::AppConfig;
use crate::engine::{Engine, SegmentInput, SegmentParams};

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Text-prompted image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive fine-tuning of the dual encoder on a captioned dataset.
    Finetune {
        #[arg(long)]
        config: PathBuf,
    },
    /// In-batch image-text retrieval accuracy.
    EvalRetrieval {
        #[arg(long)]
        config: PathBuf,
        /// CSV output; overrides `retrieval.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Saliency map of a prompt: writes a float32 .npy and a heatmap PNG.
    Saliency {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        method: Option<CamMethod>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Output .npy path; the heatmap goes next to it with a .png extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Zero-shot segmentation of one image.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Ground-truth mask; adds metrics.json.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        method: Option<CamMethod>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Keep only the largest component.
        #[arg(long)]
        single_box: bool,
        /// Minimum component area as a fraction of the image.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trains the segmentation network on pseudo-masks.
    TrainWeak {
        #[arg(long)]
        config: PathBuf,
    },
    /// Applies a trained segmentation checkpoint to an image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Mask PNG output.
        #[arg(long, default_value = "prediction.png")]
        out: PathBuf,
        /// Optional float32 probability map (.npy).
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Scores a directory of predictions against ground-truth masks.
    EvalSeg {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "prediction")]
        method: String,
        #[arg(long, default_value = "unspecified")]
        modality: String,
    },
    /// Runs the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `server.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let body = api::error_body(e.code(), &e.to_string());
            let _ = writeln!(std::io::stderr(), "{body}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Finetune { config } => cmd_finetune(&AppConfig::load(Some(&config))?),
        Command::EvalRetrieval { config, out } => cmd_eval_retrieval(&AppConfig::load(Some(&config))?, out),
        Command::Saliency {
            image,
            prompt,
            method,
            top_k,
            out,
            config,
        } => {
            let cfg = AppConfig::load(config.as_deref())?;
            let params = SegmentParams {
                method,
                top_k,
                ..SegmentParams::default()
            };
            cmd_saliency(&cfg, &image, &prompt, &params, &out)
        }
        Command::Segment {
            image,
            prompt,
            gt,
            out_dir,
            method,
            top_k,
            single_box,
            threshold,
            config,
        } => {
            let cfg = AppConfig::load(config.as_deref())?;
            let params = SegmentParams {
                method,
                top_k,
                multi_box: single_box.then_some(false),
                threshold,
                ..SegmentParams::default()
            };
            cmd_segment(&cfg, &image, &prompt, gt.as_deref(), params, &out_dir)
        }
        Command::TrainWeak { config } => cmd_train_weak(&AppConfig::load(Some(&config))?),
        Command::Predict { ckpt, image, out, probs } => cmd_predict(&ckpt, &image, &out, probs.as_deref()),
        Command::EvalSeg {
            pred_dir,
            gt_dir,
            out,
            method,
            modality,
        } => {
            let report = evaluate_dirs(&pred_dir, &gt_dir, &method, &modality)?;
            for w in report.warnings() {
                tracing::warn!("{w}");
            }
            let file = std::fs::File::create(&out)?;
            write_summary_csv(std::slice::from_ref(&report), file)
        }
        Command::Serve { config, bind } => {
            let cfg = AppConfig::load(config.as_deref())?;
            let engine = Arc::new(Engine::from_config(&cfg)?);
            let bind = bind.unwrap_or(cfg.server.bind.clone());
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(api::serve(engine, &bind, cfg.server.body_limit))?;
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("value serializes"))?;
    Ok(())
}

fn write_npy_f32(path: &Path, values: &Array2<f64>) -> Result<()> {
    ndarray_npy::write_npy(path, &values.mapv(|v| v as f32)).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn cmd_saliency(cfg: &AppConfig, image: &Path, prompt: &str, params: &SegmentParams, out: &Path) -> Result<()> {
    let engine = Engine::from_config(cfg)?;
    let image = Image::decode(&std::fs::read(image)?)?;
    let map = engine.saliency(&image, prompt, params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_npy_f32(out, &map.values)?;
    std::fs::write(out.with_extension("png"), heatmap_png(map.values.view()))?;
    for w in &map.warnings {
        tracing::warn!("{w}");
    }
    Ok(())
}

/// Writes `mask.png`, `boxes.json`, `saliency.npy`, `saliency.png`,
/// `provenance.json`, `response.json` and, with ground truth, `metrics.json`.
fn cmd_segment(cfg: &AppConfig, image: &Path, prompt: &str, gt: Option<&Path>, params: SegmentParams, out_dir: &Path) -> Result<()> {
    let engine = Engine::from_config(cfg)?;
    let image_bytes = std::fs::read(image)?;
    let gt_bytes = gt.map(std::fs::read).transpose()?;
    let input = SegmentInput::decode(&image_bytes, prompt, params, gt_bytes.as_deref())?;
    std::fs::create_dir_all(out_dir)?;
    let outcome = match engine.segment(&input) {
        Ok(o) => o,
        Err(Error::EmptySegmentation { saliency }) => {
            write_npy_f32(&out_dir.join("saliency.npy"), &saliency.values)?;
            std::fs::write(out_dir.join("saliency.png"), heatmap_png(saliency.values.view()))?;
            return Err(Error::EmptySegmentation { saliency });
        }
        Err(e) => return Err(e),
    };
    std::fs::write(out_dir.join("mask.png"), outcome.mask_png())?;
    std::fs::write(out_dir.join("boxes.json"), outcome.boxes_json())?;
    write_npy_f32(&out_dir.join("saliency.npy"), &outcome.pseudo.saliency.values)?;
    std::fs::write(out_dir.join("saliency.png"), heatmap_png(outcome.pseudo.saliency.values.view()))?;
    write_json(&out_dir.join("provenance.json"), &outcome.pseudo.provenance)?;
    write_json(&out_dir.join("response.json"), &outcome.response())?;
    if let Some(m) = &outcome.metrics {
        write_json(&out_dir.join("metrics.json"), m)?;
    }
    for w in &outcome.pseudo.warnings {
        tracing::warn!("{w}");
    }
    Ok(())
}

fn dataset(cfg: &AppConfig) -> Result<DatasetLayout> {
    let root = cfg.data.root.as_ref().ok_or_else(|| Error::InvalidConfig("data.root is required".into()))?;
    Ok(DatasetLayout::new(root))
}

/// Cleaned caption records grouped by split name.
fn caption_splits(cfg: &AppConfig, layout: &DatasetLayout) -> Result<BTreeMap<String, Vec<CaptionRecord>>> {
    let (set, report) = clean_captions(&layout.read_captions()?, &cfg.data.cleaning);
    tracing::info!(input = report.input, kept = report.kept, dropped = report.dropped, "captions cleaned");
    let mut out = BTreeMap::new();
    if layout.splits_path().is_file() {
        for (name, stems) in layout.read_splits()? {
            let records = set
                .records
                .iter()
                .filter(|r| stems.iter().any(|s| Path::new(&r.image).file_stem().is_some_and(|f| f == s.as_str())))
                .cloned()
                .collect();
            out.insert(name, records);
        }
    } else {
        let parts = split_dataset(&set.records, &cfg.data.fractions, cfg.data.split_seed, cfg.data.rounding)?;
        for (name, part) in ["train", "val", "test"].iter().zip(parts) {
            out.insert(name.to_string(), part);
        }
    }
    out.insert("all".into(), set.records);
    Ok(out)
}

fn load_pairs(layout: &DatasetLayout, records: &[CaptionRecord], size: (usize, usize)) -> Result<Vec<(Image, String)>> {
    records
        .iter()
        .map(|r| {
            let path = layout.image_path(&r.image)?;
            Ok((promptseg_core::data::load_image(&path, Some(size))?, r.caption.clone()))
        })
        .collect()
}

fn split<'a>(splits: &'a BTreeMap<String, Vec<CaptionRecord>>, name: &str) -> Result<&'a [CaptionRecord]> {
    splits.get(name).map(Vec::as_slice).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "no `{name}` split; available: {}",
            splits.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })
}

fn cmd_finetune(cfg: &AppConfig) -> Result<()> {
    let layout = dataset(cfg)?;
    let mut encoder = build_encoder(&cfg.backend)?;
    let size = encoder.info().input_size;
    let splits = caption_splits(cfg, &layout)?;
    let train = load_pairs(&layout, split(&splits, "train")?, size)?;
    let val = load_pairs(&layout, split(&splits, "val")?, size)?;
    let outcome = finetune(encoder.as_mut(), &train, &val, &cfg.finetune)?;
    let summary = json!({
        "config_hash": cfg.finetune.hash(),
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "best_val_top1": outcome.best_metric,
        "manifest": outcome.manifest,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_eval_retrieval(cfg: &AppConfig, out: Option<PathBuf>) -> Result<()> {
    let layout = dataset(cfg)?;
    let encoder = build_encoder(&cfg.backend)?;
    let size = encoder.info().input_size;
    let splits = caption_splits(cfg, &layout)?;
    let corpus = load_pairs(&layout, split(&splits, &cfg.retrieval.split)?, size)?;
    let result = run_protocol(encoder.as_ref(), &corpus, &cfg.retrieval.protocol)?;
    let model = cfg.retrieval.model.clone().unwrap_or_else(|| encoder.info().name.clone());
    match out.or_else(|| cfg.retrieval.out.clone()) {
        Some(path) => result.write_csv(&model, std::fs::File::create(path)?),
        None => result.write_csv(&model, std::io::stdout().lock()),
    }
}

fn cmd_train_weak(cfg: &AppConfig) -> Result<()> {
    let weak = &cfg.weak;
    let required = |p: &Option<PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::InvalidConfig(format!("weak.{key} is required")))
    };
    let train = DatasetLayout::new(required(&weak.train_dir, "train_dir")?).segmentation_set()?;
    let val = match &weak.val_dir {
        Some(dir) => DatasetLayout::new(dir).segmentation_set()?,
        None => Default::default(),
    };
    let val_pseudo = weak.val_pseudo_dir.as_ref().map(|d| DatasetLayout::new(d).segmentation_set()).transpose()?;
    let outcome = train_weak(weak.model, &train, &val, val_pseudo.as_ref(), &weak.train)?;
    let json = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    match &weak.report {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, out: &Path, probs: Option<&Path>) -> Result<()> {
    let image = Image::decode(&std::fs::read(image)?)?;
    let p = predict(ckpt, &image)?;
    std::fs::write(out, mask_to_png(&p.mapv(|v| v > 0.5)))?;
    if let Some(path) = probs {
        write_npy_f32(path, &p)?;
    }
    Ok(())
}
