//! Fully connected CRF refinement of saliency maps.
//!
//! Mean-field inference with Potts compatibility and two Gaussian edge
//! kernels: a smoothness kernel over pixel position and an appearance kernel
//! over position and colour. Kernels are evaluated on a permutohedral lattice
//! with symmetric normalisation.

mod permutohedral;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{min_max_normalize, Image, Mask};

pub use permutohedral::Lattice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub iterations: usize,
    pub gaussian_weight: f64,
    /// Pixels.
    pub gaussian_std: f64,
    pub bilateral_weight: f64,
    /// Pixels.
    pub bilateral_spatial_std: f64,
    /// On the 0-255 intensity scale.
    pub bilateral_color_std: f64,
    /// Unary probabilities are clamped to `[epsilon, 1 - epsilon]`.
    pub epsilon: f64,
    /// Min-max normalize the saliency before using it as a probability.
    pub normalize_saliency: bool,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            gaussian_weight: 3.0,
            gaussian_std: 3.0,
            bilateral_weight: 4.0,
            bilateral_spatial_std: 49.0,
            bilateral_color_std: 5.0,
            epsilon: 0.01,
            normalize_saliency: true,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let stds = [self.gaussian_std, self.bilateral_spatial_std, self.bilateral_color_std];
        if stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("CRF standard deviations must be positive".into()));
        }
        if !(self.gaussian_weight >= 0.0 && self.bilateral_weight >= 0.0) {
            return Err(Error::InvalidConfig("CRF pairwise weights must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// No pairwise term contributes.
    pub fn is_unary_only(&self) -> bool {
        self.iterations == 0 || (self.gaussian_weight == 0.0 && self.bilateral_weight == 0.0)
    }
}

/// A Gaussian edge kernel with symmetric normalisation `D^-1/2 K D^-1/2`.
pub struct Kernel {
    lattice: Lattice,
    norm: Vec<f64>,
    weight: f64,
}

impl Kernel {
    pub fn new(features: ArrayView2<'_, f64>, weight: f64) -> Self {
        let lattice = Lattice::new(features);
        let ones = Array2::ones((features.nrows(), 1));
        let norm = lattice.filter(&ones).column(0).iter().map(|v| 1.0 / (v + 1e-20).sqrt()).collect();
        Self { lattice, norm, weight }
    }

    /// `weight · D^-1/2 K D^-1/2 q` for every label column of `q` (N × L).
    pub fn apply(&self, q: &Array2<f64>) -> Array2<f64> {
        let mut scaled = q.clone();
        for (mut row, n) in scaled.rows_mut().into_iter().zip(&self.norm) {
            row *= *n;
        }
        let mut out = self.lattice.filter(&scaled);
        for (mut row, n) in out.rows_mut().into_iter().zip(&self.norm) {
            row *= *n * self.weight;
        }
        out
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut q = logits.clone();
    for mut row in q.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    q
}

/// Mean-field inference for a Potts model.
///
/// `unary` holds per-pixel label energies (N × L). Returns the final logits
/// `-unary + Σ weight·K·Q`, whose row-wise argmax is the MAP labelling.
pub fn mean_field(unary: &Array2<f64>, kernels: &[Kernel], iterations: usize) -> Array2<f64> {
    let mut logits = unary.mapv(|u| -u);
    let mut q = softmax_rows(&logits);
    for _ in 0..iterations {
        logits = unary.mapv(|u| -u);
        for kernel in kernels {
            logits += &kernel.apply(&q);
        }
        q = softmax_rows(&logits);
    }
    logits
}

/// Pixel features for the two kernels: `(x/σ, y/σ)` and `(x/σ, y/σ, rgb/σc)`.
fn kernel_features(image: &Image, params: &CrfParams) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = image.size();
    let px = image.pixels();
    let mut spatial = Array2::zeros((h * w, 2));
    let mut bilateral = Array2::zeros((h * w, 5));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            spatial[[i, 0]] = x as f64 / params.gaussian_std;
            spatial[[i, 1]] = y as f64 / params.gaussian_std;
            bilateral[[i, 0]] = x as f64 / params.bilateral_spatial_std;
            bilateral[[i, 1]] = y as f64 / params.bilateral_spatial_std;
            for c in 0..3 {
                bilateral[[i, 2 + c]] = px[[y, x, c]] * 255.0 / params.bilateral_color_std;
            }
        }
    }
    (spatial, bilateral)
}

/// Binary MAP labelling of a saliency map refined by a dense CRF.
///
/// With no active pairwise term the result is exactly `probability > 0.5`.
pub fn crf_refine(image: &Image, saliency: ArrayView2<'_, f64>, params: &CrfParams) -> Result<Mask> {
    params.validate()?;
    if image.size() != saliency.dim() {
        return Err(Error::SizeMismatch(format!(
            "image is {:?} but saliency is {:?}",
            image.size(),
            saliency.dim()
        )));
    }
    if saliency.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("saliency contains non-finite values".into()));
    }
    let prob = if params.normalize_saliency {
        min_max_normalize(saliency)
    } else {
        saliency.mapv(|v| v.clamp(0.0, 1.0))
    };
    if params.is_unary_only() {
        return Ok(prob.mapv(|p| p > 0.5));
    }

    let (h, w) = image.size();
    let eps = params.epsilon;
    let mut unary = Array2::zeros((h * w, 2));
    for (i, p) in prob.iter().enumerate() {
        let p = p.clamp(eps, 1.0 - eps);
        unary[[i, 0]] = -(1.0 - p).ln();
        unary[[i, 1]] = -p.ln();
    }

    let (spatial, bilateral) = kernel_features(image, params);
    let mut kernels = Vec::new();
    if params.gaussian_weight > 0.0 {
        kernels.push(Kernel::new(spatial.view(), params.gaussian_weight));
    }
    if params.bilateral_weight > 0.0 {
        kernels.push(Kernel::new(bilateral.view(), params.bilateral_weight));
    }
    let logits = mean_field(&unary, &kernels, params.iterations);
    let labels: Vec<bool> = logits.rows().into_iter().map(|r| r[1] > r[0]).collect();
    Ok(Array2::from_shape_vec((h, w), labels).expect("h·w labels"))
}
