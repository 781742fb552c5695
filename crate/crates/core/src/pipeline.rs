//! Zero-shot segmentation: saliency, CRF, box prompts, promptable segmenter.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::crf::{crf_refine, CrfParams};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::saliency::{saliency, CamMethod, SaliencyMap, SaliencyOptions};
use crate::warning::Warning;

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl BoxPrompt {
    pub fn new(xmin: usize, ymin: usize, xmax: usize, ymax: usize) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> usize {
        self.xmax - self.xmin + 1
    }

    pub fn height(&self) -> usize {
        self.ymax - self.ymin + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.ymin..=self.ymax).contains(&y) && (self.xmin..=self.xmax).contains(&x)
    }

    /// Checks ordering and that the box lies inside an `h × w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.xmin > self.xmax || self.ymin > self.ymax || self.xmax >= w || self.ymax >= h {
            return Err(Error::InvalidConfig(format!("box {self:?} is invalid for a {h}×{w} image")));
        }
        Ok(())
    }

    /// Grows the box by `margin` pixels, clipped to the image.
    pub fn dilated(&self, margin: usize, h: usize, w: usize) -> BoxPrompt {
        BoxPrompt {
            xmin: self.xmin.saturating_sub(margin),
            ymin: self.ymin.saturating_sub(margin),
            xmax: (self.xmax + margin).min(w - 1),
            ymax: (self.ymax + margin).min(h - 1),
        }
    }
}

/// A connected foreground component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub area: usize,
    pub bbox: BoxPrompt,
    pub pixels: Vec<(usize, usize)>,
}

/// 8-connected components in row-major order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask[[y0, x0]] || seen[[y0, x0]] {
                continue;
            }
            seen[[y0, x0]] = true;
            queue.push_back((y0, x0));
            let mut pixels = Vec::new();
            let mut bbox = BoxPrompt::new(x0, y0, x0, y0);
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                bbox.xmin = bbox.xmin.min(x);
                bbox.xmax = bbox.xmax.max(x);
                bbox.ymin = bbox.ymin.min(y);
                bbox.ymax = bbox.ymax.max(y);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(Component {
                area: pixels.len(),
                bbox,
                pixels,
            });
        }
    }
    out
}

/// Tight boxes around components covering at least `min_area_fraction` of the image,
/// largest first.
pub fn extract_boxes(mask: &Mask, min_area_fraction: f64, multi_box: bool) -> Result<Vec<BoxPrompt>> {
    if !(0.0..=1.0).contains(&min_area_fraction) {
        return Err(Error::InvalidConfig(format!(
            "min_area_fraction must lie in [0, 1], got {min_area_fraction}"
        )));
    }
    let (h, w) = mask.dim();
    let min_area = min_area_fraction * (h * w) as f64;
    let mut components: Vec<Component> = connected_components(mask)
        .into_iter()
        .filter(|c| c.area as f64 >= min_area)
        .collect();
    if components.is_empty() {
        return Err(Error::NoForeground);
    }
    components.sort_by(|a, b| b.area.cmp(&a.area));
    if !multi_box {
        components.truncate(1);
    }
    Ok(components.into_iter().map(|c| c.bbox).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterInfo {
    pub name: String,
    pub accepts_boxes: bool,
    pub deterministic: bool,
    /// Masks never extend more than this many pixels outside their box.
    pub context_margin: usize,
}

/// A model that turns a box prompt into a mask of the image's size.
pub trait PromptableSegmenter: Send + Sync {
    fn info(&self) -> &SegmenterInfo;
    fn segment(&self, image: &Image, prompt: &BoxPrompt) -> Result<Mask>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSegmenterConfig {
    pub context_margin: usize,
    /// Minimum absolute deviation of a pixel's gray level from the background.
    pub threshold: f64,
    /// Background gray level; the image median when unset.
    pub background_level: Option<f64>,
}

impl Default for SyntheticSegmenterConfig {
    fn default() -> Self {
        Self {
            context_margin: 4,
            threshold: 0.1,
            background_level: None,
        }
    }
}

/// Box-promptable segmenter that keeps pixels differing from the background
/// level, restricted to the dilated box and to components touching the box.
#[derive(Debug, Clone)]
pub struct SyntheticSegmenter {
    cfg: SyntheticSegmenterConfig,
    info: SegmenterInfo,
}

impl SyntheticSegmenter {
    pub fn new(cfg: SyntheticSegmenterConfig) -> Result<Self> {
        if !(cfg.threshold >= 0.0) {
            return Err(Error::InvalidConfig(format!("threshold must be non-negative, got {}", cfg.threshold)));
        }
        let info = SegmenterInfo {
            name: "synthetic-box".into(),
            accepts_boxes: true,
            deterministic: true,
            context_margin: cfg.context_margin,
        };
        Ok(Self { cfg, info })
    }
}

impl Default for SyntheticSegmenter {
    fn default() -> Self {
        Self::new(SyntheticSegmenterConfig::default()).expect("valid defaults")
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl PromptableSegmenter for SyntheticSegmenter {
    fn info(&self) -> &SegmenterInfo {
        &self.info
    }

    fn segment(&self, image: &Image, prompt: &BoxPrompt) -> Result<Mask> {
        let (h, w) = image.size();
        prompt.validate(h, w)?;
        let gray = image.gray();
        let background = match self.cfg.background_level {
            Some(level) => level,
            None => median(&mut gray.iter().copied().collect::<Vec<_>>()),
        };
        let window = prompt.dilated(self.cfg.context_margin, h, w);
        let candidate = Array2::from_shape_fn((h, w), |(y, x)| {
            window.contains(y, x) && (gray[[y, x]] - background).abs() > self.cfg.threshold
        });
        let mut mask = Array2::from_elem((h, w), false);
        for component in connected_components(&candidate) {
            if component.pixels.iter().any(|&(y, x)| prompt.contains(y, x)) {
                for (y, x) in component.pixels {
                    mask[[y, x]] = true;
                }
            }
        }
        Ok(mask)
    }
}

/// Union of the segmenter's masks for every box.
pub fn segment_with_boxes(
    segmenter: &dyn PromptableSegmenter,
    image: &Image,
    boxes: &[BoxPrompt],
) -> Result<(Mask, Vec<Warning>)> {
    let info = segmenter.info();
    if !info.accepts_boxes {
        return Err(Error::BackendUnavailable(format!("segmenter `{}` does not accept box prompts", info.name)));
    }
    let (h, w) = image.size();
    let mut union = Array2::from_elem((h, w), false);
    let mut warnings = Vec::new();
    for (index, prompt) in boxes.iter().enumerate() {
        prompt.validate(h, w)?;
        let mask = segmenter.segment(image, prompt)?;
        if mask.dim() != (h, w) {
            return Err(Error::SizeMismatch(format!(
                "segmenter `{}` returned {:?} for a {h}×{w} image",
                info.name,
                mask.dim()
            )));
        }
        if !mask.iter().any(|&m| m) {
            tracing::warn!(index, "box produced an empty mask");
            warnings.push(Warning::EmptyBoxMask { index });
        }
        union.zip_mut_with(&mask, |u, &m| *u |= m);
    }
    Ok((union, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotOptions {
    pub saliency: SaliencyOptions,
    pub crf: CrfParams,
    pub min_area_fraction: f64,
    pub multi_box: bool,
}

impl Default for ZeroShotOptions {
    fn default() -> Self {
        Self {
            saliency: SaliencyOptions::default(),
            crf: CrfParams::default(),
            min_area_fraction: 0.01,
            multi_box: true,
        }
    }
}

/// Everything needed to replay a zero-shot run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    pub encoder: String,
    pub segmenter: String,
    pub method: CamMethod,
    pub top_k: Option<usize>,
    pub image_fingerprint: String,
    pub image_size: (usize, usize),
    pub options: ZeroShotOptions,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub saliency_ms: f64,
    pub crf_ms: f64,
    pub boxes_ms: f64,
    pub segment_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoMask {
    pub mask: Mask,
    pub boxes: Vec<BoxPrompt>,
    pub saliency: SaliencyMap,
    /// CRF output the boxes were extracted from.
    pub refined: Mask,
    pub provenance: Provenance,
    pub warnings: Vec<Warning>,
    #[serde(skip)]
    pub timings: StageTimings,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Saliency → CRF → boxes → segmenter.
///
/// When no component survives the area threshold the error is
/// [`Error::EmptySegmentation`], carrying the saliency map.
pub fn zero_shot_segment(
    encoder: &dyn DualEncoder,
    segmenter: &dyn PromptableSegmenter,
    image: &Image,
    prompt: &str,
    options: &ZeroShotOptions,
) -> Result<PseudoMask> {
    options.crf.validate()?;
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let sal = saliency(encoder, image, prompt, &options.saliency)?;
    timings.saliency_ms = elapsed_ms(start);

    let start = Instant::now();
    let refined = crf_refine(image, sal.values.view(), &options.crf)?;
    timings.crf_ms = elapsed_ms(start);

    let start = Instant::now();
    let boxes = match extract_boxes(&refined, options.min_area_fraction, options.multi_box) {
        Ok(boxes) => boxes,
        Err(Error::NoForeground) => return Err(Error::EmptySegmentation { saliency: Box::new(sal) }),
        Err(e) => return Err(e),
    };
    timings.boxes_ms = elapsed_ms(start);

    let start = Instant::now();
    let (mask, box_warnings) = segment_with_boxes(segmenter, image, &boxes)?;
    timings.segment_ms = elapsed_ms(start);

    let mut warnings = sal.warnings.clone();
    warnings.extend(box_warnings);
    let provenance = Provenance {
        prompt: prompt.to_string(),
        encoder: encoder.info().name.clone(),
        segmenter: segmenter.info().name.clone(),
        method: sal.method,
        top_k: sal.top_k,
        image_fingerprint: image.fingerprint(),
        image_size: image.size(),
        options: options.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(PseudoMask {
        mask,
        boxes,
        saliency: sal,
        refined,
        provenance,
        warnings,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_box_of_a_rectangle() {
        let mut mask = Array2::from_elem((10, 10), false);
        for y in 2..=5 {
            for x in 3..=7 {
                mask[[y, x]] = true;
            }
        }
        assert_eq!(extract_boxes(&mask, 0.01, true).unwrap(), vec![BoxPrompt::new(3, 2, 7, 5)]);
    }

    #[test]
    fn empty_mask_has_no_foreground() {
        let mask = Array2::from_elem((5, 5), false);
        assert!(matches!(extract_boxes(&mask, 0.01, true), Err(Error::NoForeground)));
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mask = ndarray::array![[true, false], [false, true]];
        assert_eq!(connected_components(&mask).len(), 1);
    }

    #[test]
    fn single_box_mode_keeps_the_largest() {
        let mut mask = Array2::from_elem((20, 20), false);
        mask[[0, 0]] = true;
        for y in 10..15 {
            for x in 10..15 {
                mask[[y, x]] = true;
            }
        }
        assert_eq!(extract_boxes(&mask, 0.0, false).unwrap(), vec![BoxPrompt::new(10, 10, 14, 14)]);
        assert_eq!(extract_boxes(&mask, 0.0, true).unwrap().len(), 2);
    }

    #[test]
    fn background_box_gives_empty_mask_with_warning() {
        let mut gray = Array2::from_elem((20, 20), 0.1);
        for y in 2..6 {
            for x in 2..6 {
                gray[[y, x]] = 0.9;
            }
        }
        let image = Image::from_gray(gray.view()).unwrap();
        let seg = SyntheticSegmenter::default();
        let (mask, warnings) = segment_with_boxes(&seg, &image, &[BoxPrompt::new(14, 14, 18, 18)]).unwrap();
        assert!(!mask.iter().any(|&m| m));
        assert_eq!(warnings, vec![Warning::EmptyBoxMask { index: 0 }]);
    }

    #[test]
    fn boxes_outside_the_image_are_rejected() {
        let image = Image::from_gray(Array2::from_elem((8, 8), 0.0).view()).unwrap();
        let seg = SyntheticSegmenter::default();
        assert!(segment_with_boxes(&seg, &image, &[BoxPrompt::new(0, 0, 8, 3)]).is_err());
        assert!(segment_with_boxes(&seg, &image, &[BoxPrompt::new(5, 0, 3, 3)]).is_err());
    }
}
