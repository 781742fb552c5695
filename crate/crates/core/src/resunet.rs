//! A small residual U-Net in plain f64 with hand-written backpropagation.
//!
//! Convolutions are 3×3 (padding 1) or 1×1 and run as im2col followed by a
//! matrix product. Downsampling is 2×2 average pooling, upsampling is
//! nearest-neighbour, and skip connections are channel concatenations.
//! Inputs whose sides are not multiples of `2^depth` are edge-padded and the
//! output is cropped back, so the output always matches the input size.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResUNetSpec {
    /// Number of 2× downsampling steps.
    pub depth: usize,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    /// 3 for RGB, 1 to feed the channel-mean intensity.
    pub in_channels: usize,
}

impl Default for ResUNetSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            blocks_per_stage: 1,
            in_channels: 3,
        }
    }
}

impl ResUNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::InvalidConfig(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig(
                "base_channels and blocks_per_stage must be positive".into(),
            ));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Conv {
    kernel: usize,
    in_channels: usize,
    /// `out × (in·k·k)`, row-major over (channel, ky, kx).
    weight: Array2<f64>,
    bias: Array1<f64>,
    #[serde(skip)]
    grad_weight: Array2<f64>,
    #[serde(skip)]
    grad_bias: Array1<f64>,
}

struct ConvCache {
    cols: Array2<f64>,
    height: usize,
    width: usize,
}

impl Conv {
    fn new(in_channels: usize, out: usize, kernel: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let weight = Array2::from_shape_simple_fn((out, fan_in), || normal.sample(rng));
        Self {
            kernel,
            in_channels,
            weight,
            bias: Array1::zeros(out),
            grad_weight: Array2::zeros((out, fan_in)),
            grad_bias: Array1::zeros(out),
        }
    }

    fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        if self.kernel == 1 {
            return x.to_shape((c, h * w)).expect("contiguous").into_owned();
        }
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut cols = vec![0.0; c * 9 * h * w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ch * 9 + ky * 3 + kx) * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                cols[row + y * w + xx] = plane[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * 9, h * w), cols).expect("sized above")
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let c = self.in_channels;
        if self.kernel == 1 {
            return cols.to_shape((c, h, w)).expect("contiguous").into_owned();
        }
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &mut out[ch * h * w..(ch + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ch * 9 + ky * 3 + kx) * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                plane[sy * w + sx as usize] += src[row + y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), out).expect("sized above")
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let cols = self.im2col(x);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("sized by the product");
        (out, ConvCache { cols, height: h, width: w })
    }

    fn backward(&mut self, grad: &Array3<f64>, cache: &ConvCache) -> Array3<f64> {
        let (o, h, w) = grad.dim();
        let g = grad.to_shape((o, h * w)).expect("contiguous");
        self.grad_weight += &g.dot(&cache.cols.t());
        self.grad_bias += &g.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&g);
        self.col2im(&dcols, cache.height, cache.width)
    }

    fn zero_grads(&mut self) {
        self.grad_weight = Array2::zeros(self.weight.raw_dim());
        self.grad_bias = Array1::zeros(self.bias.raw_dim());
    }
}

fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(grad: &Array3<f64>, pre: &Array3<f64>) -> Array3<f64> {
    let mut g = grad.clone();
    g.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    g
}

/// `relu(conv2(relu(conv1(x))) + skip(x))`, with a 1×1 projection on the
/// skip path when the channel count changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
}

struct BlockCache {
    c1: ConvCache,
    h1: Array3<f64>,
    c2: ConvCache,
    skip: Option<ConvCache>,
    pre: Array3<f64>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv::new(cin, cout, 3, 1.0, rng),
            conv2: Conv::new(cout, cout, 3, 0.5, rng),
            skip: (cin != cout).then(|| Conv::new(cin, cout, 1, 1.0, rng)),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BlockCache) {
        let (h1, c1) = self.conv1.forward(x);
        let (mut pre, c2) = self.conv2.forward(&relu(&h1));
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                pre += &s;
                Some(cache)
            }
            None => {
                pre += x;
                None
            }
        };
        (relu(&pre), BlockCache { c1, h1, c2, skip, pre })
    }

    fn backward(&mut self, grad: &Array3<f64>, cache: &BlockCache) -> Array3<f64> {
        let g = relu_backward(grad, &cache.pre);
        let ga1 = self.conv2.backward(&g, &cache.c2);
        let mut gx = self.conv1.backward(&relu_backward(&ga1, &cache.h1), &cache.c1);
        match (&mut self.skip, &cache.skip) {
            (Some(conv), Some(c)) => gx += &conv.backward(&g, c),
            _ => gx += &g,
        }
        gx
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        [&mut self.conv1, &mut self.conv2].into_iter().chain(self.skip.as_mut())
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        [&self.conv1, &self.conv2].into_iter().chain(self.skip.as_ref())
    }
}

fn stage_forward(blocks: &[ResBlock], x: &Array3<f64>) -> (Array3<f64>, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut cur = x.clone();
    for block in blocks {
        let (next, cache) = block.forward(&cur);
        caches.push(cache);
        cur = next;
    }
    (cur, caches)
}

fn stage_backward(blocks: &mut [ResBlock], grad: Array3<f64>, caches: &[BlockCache]) -> Array3<f64> {
    let mut g = grad;
    for (block, cache) in blocks.iter_mut().zip(caches).rev() {
        g = block.backward(&g, cache);
    }
    g
}

fn avg_pool(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        0.25 * (x[[ch, 2 * y, 2 * xx]] + x[[ch, 2 * y + 1, 2 * xx]] + x[[ch, 2 * y, 2 * xx + 1]] + x[[ch, 2 * y + 1, 2 * xx + 1]])
    })
}

fn avg_pool_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = grad.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, x)| 0.25 * grad[[ch, y / 2, x / 2]])
}

fn upsample(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

fn upsample_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = grad.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, x)| {
        grad[[ch, 2 * y, 2 * x]] + grad[[ch, 2 * y + 1, 2 * x]] + grad[[ch, 2 * y, 2 * x + 1]] + grad[[ch, 2 * y + 1, 2 * x + 1]]
    })
}

/// Saved activations of one training forward pass.
pub struct ForwardCache {
    encoder: Vec<Vec<BlockCache>>,
    decoder: Vec<Vec<BlockCache>>,
    /// Channel count of the upsampled half of each decoder input.
    up_channels: Vec<usize>,
    head: ConvCache,
    padded: (usize, usize),
    size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResUNet {
    spec: ResUNetSpec,
    /// `depth + 1` stages, full resolution first.
    encoder: Vec<Vec<ResBlock>>,
    /// `depth` stages, full resolution first.
    decoder: Vec<Vec<ResBlock>>,
    head: Conv,
}

impl ResUNet {
    pub fn new(spec: ResUNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage = |cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let mut blocks = vec![ResBlock::new(cin, cout, rng)];
            for _ in 1..spec.blocks_per_stage {
                blocks.push(ResBlock::new(cout, cout, rng));
            }
            blocks
        };
        let mut encoder = Vec::with_capacity(spec.depth + 1);
        for level in 0..=spec.depth {
            let cin = if level == 0 { spec.in_channels } else { spec.channels(level - 1) };
            encoder.push(stage(cin, spec.channels(level), &mut rng));
        }
        let mut decoder = Vec::with_capacity(spec.depth);
        for level in 0..spec.depth {
            let cin = spec.channels(level + 1) + spec.channels(level);
            decoder.push(stage(cin, spec.channels(level), &mut rng));
        }
        let head = Conv::new(spec.channels(0), 1, 1, 1.0, &mut rng);
        Ok(Self {
            spec,
            encoder,
            decoder,
            head,
        })
    }

    pub fn spec(&self) -> &ResUNetSpec {
        &self.spec
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flatten()
            .flat_map(ResBlock::convs)
            .chain(std::iter::once(&self.head))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .flatten()
            .flat_map(ResBlock::convs_mut)
            .chain(std::iter::once(&mut self.head))
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// Parameters flattened in a fixed order (weights then bias, layer by layer).
    pub fn flat_params(&self) -> Vec<f64> {
        self.convs()
            .flat_map(|c| c.weight.iter().chain(c.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.parameter_count(),
            });
        }
        let mut it = values.iter();
        for conv in self.convs_mut() {
            for v in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Accumulated gradients, in the order of [`ResUNet::flat_params`].
    pub fn flat_grads(&self) -> Vec<f64> {
        self.convs()
            .flat_map(|c| c.grad_weight.iter().chain(c.grad_bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.convs_mut().for_each(Conv::zero_grads);
    }

    /// Visits each parameter tensor with its gradient; `slot` is stable
    /// across calls.
    pub(crate) fn for_each_param(&mut self, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        for (i, conv) in self.convs_mut().enumerate() {
            let Conv {
                weight,
                bias,
                grad_weight,
                grad_bias,
                ..
            } = conv;
            f(
                2 * i,
                weight.as_slice_mut().expect("owned standard layout"),
                grad_weight.as_slice().expect("owned standard layout"),
            );
            f(
                2 * i + 1,
                bias.as_slice_mut().expect("owned standard layout"),
                grad_bias.as_slice().expect("owned standard layout"),
            );
        }
    }

    /// Channels-first network input: pixels rescaled to [-1, 1].
    pub fn input_tensor(&self, image: &Image) -> Array3<f64> {
        let (h, w) = image.size();
        if self.spec.in_channels == 1 {
            let gray = image.gray();
            Array3::from_shape_fn((1, h, w), |(_, y, x)| 2.0 * gray[[y, x]] - 1.0)
        } else {
            let px = image.pixels();
            Array3::from_shape_fn((3, h, w), |(c, y, x)| 2.0 * px[[y, x, c]] - 1.0)
        }
    }

    fn pad(&self, x: &Array3<f64>) -> Array3<f64> {
        let m = 1usize << self.spec.depth;
        let (c, h, w) = x.dim();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return x.clone();
        }
        Array3::from_shape_fn((c, ph, pw), |(ch, y, xx)| x[[ch, y.min(h - 1), xx.min(w - 1)]])
    }

    /// Logits for one image, keeping what backpropagation needs.
    pub fn forward_train(&self, image: &Image) -> (Array2<f64>, ForwardCache) {
        let input = self.input_tensor(image);
        let (_, h, w) = input.dim();
        let padded = self.pad(&input);
        let (_, ph, pw) = padded.dim();

        let mut skips = Vec::with_capacity(self.spec.depth + 1);
        let mut enc_caches = Vec::with_capacity(self.spec.depth + 1);
        let mut cur = padded;
        for (level, blocks) in self.encoder.iter().enumerate() {
            if level > 0 {
                cur = avg_pool(&cur);
            }
            let (out, caches) = stage_forward(blocks, &cur);
            enc_caches.push(caches);
            skips.push(out.clone());
            cur = out;
        }

        let mut dec_caches: Vec<Vec<BlockCache>> = Vec::with_capacity(self.spec.depth);
        let mut up_channels = vec![0; self.spec.depth];
        for level in (0..self.spec.depth).rev() {
            let up = upsample(&cur);
            up_channels[level] = up.dim().0;
            let cat = ndarray::concatenate(Axis(0), &[up.view(), skips[level].view()]).expect("same spatial size");
            let (out, caches) = stage_forward(&self.decoder[level], &cat);
            dec_caches.push(caches);
            cur = out;
        }
        dec_caches.reverse();

        let (logits, head) = self.head.forward(&cur);
        let logits = logits.slice(s![0, ..h, ..w]).to_owned();
        let cache = ForwardCache {
            encoder: enc_caches,
            decoder: dec_caches,
            up_channels,
            head,
            padded: (ph, pw),
            size: (h, w),
        };
        (logits, cache)
    }

    /// Accumulates parameter gradients given d(loss)/d(logits).
    pub fn backward(&mut self, grad_logits: &Array2<f64>, cache: &ForwardCache) {
        let (h, w) = cache.size;
        let (ph, pw) = cache.padded;
        let mut g = Array3::zeros((1, ph, pw));
        g.slice_mut(s![0, ..h, ..w]).assign(grad_logits);
        let mut grad = self.head.backward(&g, &cache.head);

        let depth = self.spec.depth;
        let mut skip_grads: Vec<Option<Array3<f64>>> = vec![None; depth + 1];
        for level in 0..depth {
            let gcat = stage_backward(&mut self.decoder[level], grad, &cache.decoder[level]);
            let up = cache.up_channels[level];
            skip_grads[level] = Some(gcat.slice(s![up.., .., ..]).to_owned());
            grad = upsample_backward(&gcat.slice(s![..up, .., ..]).to_owned());
        }

        for level in (0..=depth).rev() {
            if let Some(sg) = skip_grads[level].take() {
                grad += &sg;
            }
            let gin = stage_backward(&mut self.encoder[level], grad, &cache.encoder[level]);
            grad = if level > 0 { avg_pool_backward(&gin) } else { gin };
        }
    }

    pub fn logits(&self, image: &Image) -> Array2<f64> {
        self.forward_train(image).0
    }

    /// H×W foreground probabilities.
    pub fn predict(&self, image: &Image) -> Array2<f64> {
        self.logits(image).mapv(sigmoid)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::CheckpointCorrupt(e.to_string()))
    }

    /// Parses a checkpoint and checks every tensor against its spec.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut model: ResUNet = serde_json::from_str(text).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let reference = ResUNet::new(model.spec, 0).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let layout = |m: &ResUNet| -> Vec<(usize, usize, usize, (usize, usize), usize)> {
            m.convs()
                .map(|c| (c.kernel, c.in_channels, c.out_channels(), c.weight.dim(), c.bias.len()))
                .collect()
        };
        if layout(&model) != layout(&reference) {
            return Err(Error::CheckpointCorrupt("tensor shapes do not match the spec".into()));
        }
        if model.convs().any(|c| c.weight.iter().chain(c.bias.iter()).any(|v| !v.is_finite())) {
            return Err(Error::CheckpointCorrupt("non-finite parameter".into()));
        }
        model.zero_grads();
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ResUNetSpec {
        ResUNetSpec {
            depth: 2,
            base_channels: 4,
            blocks_per_stage: 1,
            in_channels: 3,
        }
    }

    #[test]
    fn output_matches_odd_input_sizes() {
        let net = ResUNet::new(tiny(), 0).unwrap();
        for (h, w) in [(8, 8), (13, 7), (1, 1), (17, 32)] {
            let img = Image::new(Array3::from_elem((h, w, 3), 0.3)).unwrap();
            let p = net.predict(&img);
            assert_eq!(p.dim(), (h, w));
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn im2col_round_trip_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv::new(2, 3, 3, 1.0, &mut rng);
        let x = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64 * 0.1);
        let cols = conv.im2col(&x);
        let r = Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        // <im2col(x), r> == <x, col2im(r)>
        let lhs: f64 = (&cols * &r).sum();
        let rhs: f64 = (&x * &conv.col2im(&r, 4, 5)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let net = ResUNet::new(tiny(), 3).unwrap();
        let back = ResUNet::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back.flat_params(), net.flat_params());
        assert!(matches!(ResUNet::from_json("{"), Err(Error::CheckpointCorrupt(_))));
        let mut other = net.clone();
        other.spec.base_channels = 8;
        let text = other.to_json().unwrap();
        assert!(matches!(ResUNet::from_json(&text), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            ResUNetSpec { depth: 0, ..tiny() },
            ResUNetSpec { base_channels: 0, ..tiny() },
            ResUNetSpec { in_channels: 2, ..tiny() },
        ] {
            assert!(ResUNet::new(spec, 0).is_err());
        }
    }
}
