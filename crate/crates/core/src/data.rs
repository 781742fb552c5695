//! Dataset ingestion: caption cleaning, seeded splits and the on-disk layout.
//!
//! ```text
//! dataset_root/
//!   images/        <stem>.png|jpg|...
//!   masks/         <stem>.png (single channel)
//!   captions.csv   image,caption
//!   splits.json    {"train": [stems], "val": [...], "test": [...]}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{binarize_mask, Image, Mask};
use crate::warning::Warning;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningConfig {
    /// Non-alphanumeric characters that survive cleaning.
    pub keep: String,
    /// Minimum caption length in characters after cleaning.
    pub min_chars: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            keep: " .,-%()".into(),
            min_chars: 20,
        }
    }
}

impl CleaningConfig {
    pub fn is_special(&self, c: char) -> bool {
        !c.is_alphanumeric() && !self.keep.contains(c)
    }

    /// Removes special characters, then surrounding whitespace.
    pub fn clean(&self, caption: &str) -> String {
        let stripped: String = caption.chars().filter(|&c| !self.is_special(c)).collect();
        stripped.trim().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    pub caption: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionedImageSet {
    pub records: Vec<CaptionRecord>,
    pub split: Option<Split>,
}

impl CaptionedImageSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub warnings: Vec<Warning>,
}

pub fn clean_captions(raw: &[CaptionRecord], cfg: &CleaningConfig) -> (CaptionedImageSet, CleaningReport) {
    let records: Vec<CaptionRecord> = raw
        .iter()
        .filter_map(|r| {
            let caption = cfg.clean(&r.caption);
            (caption.chars().count() >= cfg.min_chars).then(|| CaptionRecord {
                image: r.image.clone(),
                caption,
            })
        })
        .collect();
    let mut warnings = Vec::new();
    if records.is_empty() {
        tracing::warn!(input = raw.len(), "no captions survived cleaning");
        warnings.push(Warning::EmptyDataset);
    }
    let report = CleaningReport {
        input: raw.len(),
        kept: records.len(),
        dropped: raw.len() - records.len(),
        warnings,
    };
    (CaptionedImageSet { records, split: None }, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRounding {
    /// Floors every share, then hands leftovers to the largest fractional parts.
    #[default]
    LargestRemainder,
    /// Floors every share; the last split takes the rest.
    Floor,
    /// Rounds every share half-up; the last split takes the rest.
    RoundHalfUp,
}

/// Number of items per split.
pub fn split_sizes(n: usize, fractions: &[f64], rounding: SplitRounding) -> Result<Vec<usize>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fractions.to_vec()));
    }
    let shares: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let last = fractions.len() - 1;
    let mut sizes: Vec<usize> = match rounding {
        SplitRounding::LargestRemainder | SplitRounding::Floor => shares.iter().map(|s| s.floor() as usize).collect(),
        SplitRounding::RoundHalfUp => shares.iter().map(|s| (s + 0.5).floor() as usize).collect(),
    };
    match rounding {
        SplitRounding::LargestRemainder => {
            let assigned: usize = sizes.iter().sum();
            let mut order: Vec<usize> = (0..shares.len()).collect();
            order.sort_by(|&a, &b| {
                let ra = shares[a] - shares[a].floor();
                let rb = shares[b] - shares[b].floor();
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            for &i in order.iter().take(n.saturating_sub(assigned)) {
                sizes[i] += 1;
            }
        }
        SplitRounding::Floor | SplitRounding::RoundHalfUp => {
            let head: usize = sizes[..last].iter().sum::<usize>().min(n);
            sizes[last] = n - head;
            // Half-up rounding can overshoot; trim from the front.
            let mut excess = sizes.iter().sum::<usize>().saturating_sub(n);
            for s in sizes.iter_mut() {
                let cut = excess.min(*s);
                *s -= cut;
                excess -= cut;
            }
        }
    }
    Ok(sizes)
}

/// Shuffles with `seed` and cuts consecutive chunks of the computed sizes.
pub fn split_dataset<T: Clone>(items: &[T], fractions: &[f64], seed: u64, rounding: SplitRounding) -> Result<Vec<Vec<T>>> {
    let sizes = split_sizes(items.len(), fractions, rounding)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        out.push(order[start..start + size].iter().map(|&i| items[i].clone()).collect());
        start += size;
    }
    Ok(out)
}

/// Reads an image, replicating grayscale to RGB, and resizes it to `target_size` (h, w).
pub fn load_image(path: &Path, target_size: Option<(usize, usize)>) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let image = Image::decode(&bytes).map_err(|e| match e {
        Error::Decode { reason, .. } => Error::Decode {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })?;
    Ok(match target_size {
        Some((h, w)) => image.resized(h, w),
        None => image,
    })
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(binarize_mask(&img.to_luma8()))
}

#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "pgm", "ppm"];

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn captions_path(&self) -> PathBuf {
        self.root.join("captions.csv")
    }

    pub fn splits_path(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    /// Image file names in `images/`, sorted.
    pub fn image_files(&self) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(self.images_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        Ok(files)
    }

    pub fn image_path(&self, image: &str) -> Result<PathBuf> {
        let direct = self.images_dir().join(image);
        if direct.is_file() {
            return Ok(direct);
        }
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.images_dir().join(format!("{image}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no image `{image}`"))))
    }

    pub fn read_captions(&self) -> Result<Vec<CaptionRecord>> {
        read_captions_csv(&self.captions_path())
    }

    pub fn read_splits(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let bytes = std::fs::read(self.splits_path())?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
            path: self.splits_path().display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn write_splits(&self, splits: &BTreeMap<String, Vec<String>>) -> Result<()> {
        let json = serde_json::to_vec_pretty(splits).expect("string map serializes");
        std::fs::write(self.splits_path(), json)?;
        Ok(())
    }

    /// Image-mask pairs matched by file stem; masks are optional.
    pub fn segmentation_set(&self) -> Result<SegmentationSet> {
        let masks_dir = self.masks_dir();
        let mut records = Vec::new();
        for image in self.image_files()? {
            let stem = file_stem(&image);
            let mask = masks_dir.join(format!("{stem}.png"));
            records.push(SegmentationRecord {
                id: stem,
                image,
                mask: mask.is_file().then_some(mask),
            });
        }
        Ok(SegmentationSet { records })
    }
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_captions_csv(path: &Path) -> Result<Vec<CaptionRecord>> {
    let decode_err = |e: csv::Error| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(decode_err)?;
    reader.deserialize().map(|r| r.map_err(decode_err)).collect()
}

pub fn write_captions_csv(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut writer = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_path(path)
        .map_err(to_io)?;
    for r in records {
        writer.serialize(r).map_err(to_io)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationSet {
    pub records: Vec<SegmentationRecord>,
}

impl SegmentationSet {
    /// Loads one record at its native size, checking mask dimensions.
    pub fn load(&self, index: usize) -> Result<(Image, Option<Mask>)> {
        let record = &self.records[index];
        let image = load_image(&record.image, None)?;
        let mask = match &record.mask {
            Some(path) => {
                let mask = load_mask(path)?;
                if mask.dim() != image.size() {
                    return Err(Error::SizeMismatch(format!(
                        "{}: image {:?} vs mask {:?}",
                        record.id,
                        image.size(),
                        mask.dim()
                    )));
                }
                Some(mask)
            }
            None => None,
        };
        Ok((image, mask))
    }

    /// Keeps records whose id is in `ids`, in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> SegmentationSet {
        let records = ids
            .iter()
            .filter_map(|id| self.records.iter().find(|r| &r.id == id).cloned())
            .collect();
        SegmentationSet { records }
    }
}
