//! Seeded synthetic corpora for the synthetic backend.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{RegionShape, SyntheticScene};
use crate::imaging::{Image, Mask};

const TEMPLATES: [&str; 6] = [
    "{}",
    "a {}",
    "scan showing a {}",
    "the {} region",
    "image of the {}",
    "chest x-ray with a {}",
];

/// One textured region of `concept` at a random position covering roughly
/// a quarter to a half of the image.
pub fn random_scene(concept: usize, size: (usize, usize), noise_std: f64, rng: &mut impl Rng) -> SyntheticScene {
    let (h, w) = size;
    let rh = rng.random_range(h / 2..=(3 * h) / 4);
    let rw = rng.random_range(w / 2..=(3 * w) / 4);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let shape = if rng.random_bool(0.5) {
        RegionShape::Rect {
            top,
            left,
            bottom: top + rh,
            right: left + rw,
        }
    } else {
        RegionShape::Disk {
            cy: top as f64 + rh as f64 / 2.0,
            cx: left as f64 + rw as f64 / 2.0,
            radius: rh.min(rw) as f64 / 2.0,
        }
    };
    SyntheticScene::new(h, w)
        .with_region(concept, shape)
        .with_noise(noise_std, rng.random())
}

/// `n` image-caption pairs; item `i` shows concept `i % concepts.len()`, so
/// consecutive runs of `concepts.len()` items hold distinct concepts.
pub fn captioned_corpus(concepts: &[String], size: (usize, usize), n: usize, seed: u64) -> Vec<(Image, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = i % concepts.len();
            let scene = random_scene(c, size, 0.02, &mut rng);
            let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            (scene.render(), template.replace("{}", &concepts[c]))
        })
        .collect()
}

/// A bright ellipse on a darker noisy background, its exact mask, and a
/// pseudo-mask whose boundary is displaced radially by up to
/// `boundary_noise` times the local radius.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    pub image: Image,
    pub mask: Mask,
    pub pseudo: Mask,
}

pub fn noisy_shapes(n: usize, size: (usize, usize), boundary_noise: f64, seed: u64) -> Vec<ShapeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = size;
    let pixel_noise = Normal::new(0.0, 0.08).expect("finite std");
    (0..n)
        .map(|_| {
            let short = h.min(w) as f64;
            let ry = rng.random_range(short / 6.0..short / 3.0);
            let rx = rng.random_range(short / 6.0..short / 3.0);
            let cy = rng.random_range(ry..h as f64 - ry);
            let cx = rng.random_range(rx..w as f64 - rx);
            let amps: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
            let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
            let norm: f64 = amps.iter().sum();
            let wobble = |theta: f64| {
                (0..3)
                    .map(|k| amps[k] * ((k + 1) as f64 * theta + phases[k]).sin())
                    .sum::<f64>()
                    / norm
            };
            let rho = |y: usize, x: usize| {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                ((dy * dy + dx * dx).sqrt(), dy.atan2(dx))
            };
            let mask = Mask::from_shape_fn((h, w), |(y, x)| rho(y, x).0 <= 1.0);
            let pseudo = Mask::from_shape_fn((h, w), |(y, x)| {
                let (r, theta) = rho(y, x);
                r <= 1.0 + boundary_noise * wobble(theta)
            });
            let gray = Array2::from_shape_fn((h, w), |(y, x)| {
                let base: f64 = if mask[[y, x]] { 0.65 } else { 0.3 };
                (base + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0)
            });
            let image = Image::from_gray(gray.view()).expect("values clamped to [0, 1]");
            ShapeSample { image, mask, pseudo }
        })
        .collect()
}
