use approx::assert_relative_eq;
use ndarray::{Array2, ArrayView2};
use promptseg_core::embedding::{normalize_rows, similarity_matrix, Direction, EmbeddingBatch};
use promptseg_core::losses::{contrastive_loss, contrastive_loss_matrices, hardness_weights, LossConfig, LossKind};
use promptseg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_unit(rows: usize, dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let raw = Array2::from_shape_simple_fn((rows, dim), || rng.sample::<f64, _>(StandardNormal));
    normalize_rows(raw.view()).unwrap()
}

fn random_batch(b: usize, d: usize, rng: &mut impl Rng) -> EmbeddingBatch {
    EmbeddingBatch::new(random_unit(b, d, rng), random_unit(b, d, rng)).unwrap()
}

/// Direct transcription with explicit exponentials and explicit weights.
fn naive_direction(s: ArrayView2<'_, f64>, tau: f64, beta: f64, alpha: Option<f64>) -> f64 {
    let b = s.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let norm: f64 = (0..b).filter(|&k| k != i).map(|k| (beta * s[[i, k]] / tau).exp()).sum();
        let mut denom: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| {
                let w = (b - 1) as f64 * (beta * s[[i, j]] / tau).exp() / norm;
                w * (s[[i, j]] / tau).exp()
            })
            .sum();
        if let Some(a) = alpha {
            denom += a * (s[[i, i]] / tau).exp();
        }
        total += -s[[i, i]] / tau + denom.ln();
    }
    total
}

fn naive_loss(kind: LossKind, image: &Array2<f64>, text: &Array2<f64>, cfg: &LossConfig) -> f64 {
    let s = image.dot(&text.t());
    let (b1, b2, alpha) = match kind {
        LossKind::InfoNce => (0.0, 0.0, Some(1.0)),
        LossKind::Dcl => (0.0, 0.0, None),
        LossKind::HnNce => (cfg.beta1, cfg.beta2, Some(cfg.alpha)),
        LossKind::DhnNce => (cfg.beta1, cfg.beta2, None),
    };
    naive_direction(s.view(), cfg.temperature, b1, alpha) + naive_direction(s.t(), cfg.temperature, b2, alpha)
}

fn value(kind: LossKind, batch: &EmbeddingBatch, cfg: &LossConfig) -> f64 {
    contrastive_loss(kind, batch, cfg).unwrap().value
}

#[test]
fn implementation_matches_the_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let b = rng.random_range(2..12);
        let d = rng.random_range(2..20);
        let batch = random_batch(b, d, &mut rng);
        let cfg = LossConfig {
            temperature: rng.random_range(0.2..2.0),
            beta1: rng.random_range(0.0..1.0),
            beta2: rng.random_range(0.0..1.0),
            alpha: rng.random_range(0.5..2.0),
            ..LossConfig::default()
        };
        for kind in LossKind::ALL {
            let got = value(kind, &batch, &cfg);
            let want = naive_loss(kind, batch.image(), batch.text(), &cfg);
            assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-12);
        }
    }
}

#[test]
fn limiting_cases_hold_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..150 {
        let b = rng.random_range(2..10);
        let d = rng.random_range(2..16);
        let batch = random_batch(b, d, &mut rng);
        let tau = rng.random_range(0.1..1.5);

        let zero_beta = LossConfig::with_temperature(tau).with_betas(0.0, 0.0);
        assert_relative_eq!(
            value(LossKind::DhnNce, &batch, &zero_beta),
            value(LossKind::Dcl, &batch, &zero_beta),
            max_relative = 1e-9
        );
        let unit_alpha = LossConfig { alpha: 1.0, ..zero_beta };
        assert_relative_eq!(
            value(LossKind::HnNce, &batch, &unit_alpha),
            value(LossKind::InfoNce, &batch, &unit_alpha),
            max_relative = 1e-9
        );

        let pair = random_batch(2, d, &mut rng);
        for beta in [0.0, 0.15, 1.0] {
            let cfg = LossConfig::with_temperature(tau).with_betas(beta, beta);
            assert_relative_eq!(
                value(LossKind::DhnNce, &pair, &cfg),
                value(LossKind::Dcl, &pair, &cfg),
                max_relative = 1e-9
            );
        }
    }
}

#[test]
fn orthogonal_pair_fixture() {
    let eye = Array2::eye(2);
    let batch = EmbeddingBatch::new(eye.clone(), eye).unwrap();
    let cfg = LossConfig::with_temperature(1.0);
    assert_relative_eq!(value(LossKind::DhnNce, &batch, &cfg), -4.0, epsilon = 1e-9);
    assert_relative_eq!(value(LossKind::Dcl, &batch, &cfg), -4.0, epsilon = 1e-9);
    let info = 4.0 * (1.0 + (-1.0f64).exp()).ln();
    assert_relative_eq!(value(LossKind::InfoNce, &batch, &cfg), info, epsilon = 1e-6);
}

#[test]
fn identical_embeddings_give_log_two_per_anchor() {
    let row = normalize_rows(Array2::from_elem((1, 4), 1.0).view()).unwrap();
    let same = Array2::from_shape_fn((3, 4), |(_, j)| row[[0, j]]);
    let batch = EmbeddingBatch::new(same.clone(), same).unwrap();
    for tau in [0.3, 0.6, 1.0] {
        let cfg = LossConfig::with_temperature(tau);
        // Three anchors in each of two directions.
        assert_relative_eq!(
            value(LossKind::DhnNce, &batch, &cfg),
            6.0 * 2f64.ln(),
            epsilon = 1e-9
        );
    }
}

fn finite_difference_check(kind: LossKind, b: usize, d: usize, rng: &mut impl Rng) {
    let image = random_unit(b, d, rng);
    let text = random_unit(b, d, rng);
    let cfg = LossConfig {
        temperature: 0.6,
        beta1: 0.15,
        beta2: 0.4,
        alpha: 0.8,
        ..LossConfig::default()
    };
    let out = contrastive_loss_matrices(kind, image.view(), text.view(), &cfg, true).unwrap();
    let f = |im: &Array2<f64>, tx: &Array2<f64>| {
        contrastive_loss_matrices(kind, im.view(), tx.view(), &cfg, false)
            .unwrap()
            .value
    };
    let h = 1e-6;
    for (which, analytic) in [(0, out.image_grad.unwrap()), (1, out.text_grad.unwrap())] {
        let mut numeric = Array2::zeros((b, d));
        for r in 0..b {
            for c in 0..d {
                let (mut ip, mut tp) = (image.clone(), text.clone());
                let (mut im, mut tm) = (image.clone(), text.clone());
                if which == 0 {
                    ip[[r, c]] += h;
                    im[[r, c]] -= h;
                } else {
                    tp[[r, c]] += h;
                    tm[[r, c]] -= h;
                }
                numeric[[r, c]] = (f(&ip, &tp) - f(&im, &tm)) / (2.0 * h);
            }
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
        assert!(
            diff / scale < 1e-4,
            "{kind} B={b} D={d}: relative error {:e}",
            diff / scale
        );
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in LossKind::ALL {
        for b in [2, 4, 8] {
            for d in [3, 16] {
                finite_difference_check(kind, b, d, &mut rng);
            }
        }
    }
}

#[test]
fn joint_permutation_leaves_the_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = random_batch(7, 5, &mut rng);
    let cfg = LossConfig::default();
    let order = [3, 0, 6, 1, 5, 2, 4];
    let permuted = batch.permuted(&order).unwrap();
    for kind in LossKind::ALL {
        assert_relative_eq!(value(kind, &batch, &cfg), value(kind, &permuted, &cfg), max_relative = 1e-12);
    }
}

#[test]
fn small_temperatures_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(16, 8, &mut rng);
    let cfg = LossConfig::with_temperature(1e-4).with_betas(1.0, 1.0);
    for kind in LossKind::ALL {
        let out = contrastive_loss(kind, &batch, &cfg).unwrap();
        assert!(out.value.is_finite());
        assert!(out.image_grad.unwrap().iter().all(|g| g.is_finite()));
    }
}

#[test]
fn rejects_bad_inputs() {
    let one = Array2::eye(1);
    assert!(matches!(
        contrastive_loss_matrices(LossKind::DhnNce, one.view(), one.view(), &LossConfig::default(), false),
        Err(Error::BatchTooSmall(1))
    ));
    let a = Array2::<f64>::eye(3);
    let b = Array2::<f64>::eye(2);
    assert!(matches!(
        contrastive_loss_matrices(LossKind::Dcl, a.view(), b.view(), &LossConfig::default(), false),
        Err(Error::ShapeMismatch(_))
    ));
    let mut zero = Array2::<f64>::eye(2);
    zero.row_mut(1).fill(0.0);
    assert!(matches!(
        EmbeddingBatch::from_raw(zero.view(), Array2::eye(2).view()),
        Err(Error::ZeroVectorRow { row: 1 })
    ));
    assert!(matches!(
        contrastive_loss_matrices(LossKind::Dcl, a.view(), a.view(), &LossConfig::with_temperature(0.0), false),
        Err(Error::InvalidConfig(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hardness_rows_sum_to_b_minus_one_and_are_monotone(
        b in prop::sample::select(vec![2usize, 3, 8, 64]),
        seed in any::<u64>(),
        beta in 0.0f64..2.0,
        tau in 0.1f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(b, 6, &mut rng);
        let cfg = LossConfig::with_temperature(tau).with_betas(beta, beta);
        for direction in [Direction::ImageToText, Direction::TextToImage] {
            let sim = similarity_matrix(&batch, direction);
            let w = hardness_weights(&sim, &cfg);
            for i in 0..b {
                let sum: f64 = (0..b).filter(|&j| j != i).map(|j| w.values[[i, j]]).sum();
                prop_assert!((sum - (b - 1) as f64).abs() <= 1e-9);
                for j in (0..b).filter(|&j| j != i) {
                    for k in (0..b).filter(|&k| k != i) {
                        if sim.values[[i, j]] > sim.values[[i, k]] {
                            prop_assert!(w.values[[i, j]] >= w.values[[i, k]]);
                        }
                    }
                }
            }
        }
    }
}
