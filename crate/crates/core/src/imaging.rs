//! Float RGB images, binary masks and the resampling helpers shared by the
//! encoders, saliency and segmentation stages.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel RGB means of the original CLIP preprocessing.
pub const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
/// Per-channel RGB standard deviations of the original CLIP preprocessing.
pub const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

/// Binary segmentation mask, `true` = foreground.
pub type Mask = Array2<bool>;

/// An H×W×3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Preprocess(format!("expected an H×W×3 image, got {h}×{w}×{c}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Preprocess("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Replicates a single-channel image into three channels.
    pub fn from_gray(gray: ArrayView2<'_, f64>) -> Result<Self> {
        let (h, w) = gray.dim();
        let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, _)| gray[[y, x]]);
        Self::new(pixels)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Channel-mean intensity.
    pub fn gray(&self) -> Array2<f64> {
        self.pixels.mean_axis(Axis(2)).expect("three channels")
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self { pixels }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.size();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.pixels[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Decodes an encoded image (PNG, JPEG, BMP, PNM).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn encode_png(&self) -> Vec<u8> {
        encode(DynamicImage::ImageRgb8(self.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png())?;
        Ok(())
    }

    /// Bilinear resize with the image crate's triangle filter (8-bit round trip).
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if self.size() == (height, width) {
            return self.clone();
        }
        let out = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_dynamic(&DynamicImage::ImageRgb8(out))
    }

    /// Short content hash used in provenance records.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.height() as u64).to_le_bytes());
        hasher.update((self.width() as u64).to_le_bytes());
        for v in self.pixels.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// CLIP channel standardization, returned channel-first (3×H×W).
pub fn standardize(image: &Image) -> Array3<f64> {
    let (h, w) = image.size();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| (image.pixels[[y, x, c]] - CLIP_MEAN[c]) / CLIP_STD[c])
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let axis = |out: usize, len_in: usize, len_out: usize| {
        let scale = len_in as f64 / len_out as f64;
        let pos = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(len_in - 1);
        let hi = (lo + 1).min(len_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, in_w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = axis(y, in_h, out_h);
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Maps values to [0, 1] by min-max scaling; a constant input maps to zeros.
pub fn min_max_normalize(values: ArrayView2<'_, f64>) -> Array2<f64> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if !(range > 0.0) {
        return Array2::zeros(values.dim());
    }
    values.mapv(|v| (v - min) / range)
}

fn encode(img: DynamicImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory");
    buf.into_inner()
}

/// Encodes a mask as an 8-bit grayscale PNG with foreground = 255.
pub fn mask_to_png(mask: &Mask) -> Vec<u8> {
    let (h, w) = mask.dim();
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    encode(DynamicImage::ImageLuma8(gray))
}

/// Binarizes an 8-bit single-channel mask.
///
/// Masks whose maximum is 1 are read as 0/1 encodings; otherwise foreground is
/// any value above 127.
pub fn binarize_mask(gray: &GrayImage) -> Mask {
    let (w, h) = gray.dimensions();
    let max = gray.pixels().map(|p| p[0]).max().unwrap_or(0);
    let threshold = if max <= 1 { 0 } else { 127 };
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| gray.get_pixel(x as u32, y as u32)[0] > threshold)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    Ok(binarize_mask(&img.to_luma8()))
}

/// Decodes an 8-bit single-channel image as scores in [0, 1].
pub fn decode_scores(bytes: &[u8]) -> Result<Array2<f64>> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

/// Renders a [0, 1] map with the jet colormap.
pub fn heatmap_png(values: ArrayView2<'_, f64>) -> Vec<u8> {
    let (h, w) = values.dim();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]].clamp(0.0, 1.0);
        let channel = |offset: f64| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([channel(3.0), channel(2.0), channel(1.0)])
    });
    encode(DynamicImage::ImageRgb8(rgb))
}
