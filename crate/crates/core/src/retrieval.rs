//! In-batch cross-modal retrieval accuracy and McNemar's test.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::embedding::{Direction, EmbeddingBatch};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Whether row `i`'s own candidate ranks within the top `k`, ties going to the lower index.
pub fn topk_hits(sim: ArrayView2<'_, f64>, k: usize) -> Result<Vec<bool>> {
    let (b, c) = sim.dim();
    if b != c {
        return Err(Error::ShapeMismatch(format!("similarity matrix is {b}×{c}")));
    }
    if k == 0 || k > b {
        return Err(Error::KTooLarge { k, candidates: b });
    }
    Ok(sim
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > own || (v == own && j < i))
                .count();
            ahead < k
        })
        .collect())
}

/// Fraction of rows whose diagonal entry is among the row's `k` largest.
pub fn topk_retrieval_accuracy(sim: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let hits = topk_hits(sim, k)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialBatch {
    /// Every batch has exactly `batch_size` items.
    #[default]
    Drop,
    /// The leftover items form one smaller batch; `k` is capped at its size.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalProtocol {
    pub batch_size: usize,
    pub runs: usize,
    pub ks: Vec<usize>,
    /// Run `r` shuffles with `seed + r`.
    pub seed: u64,
    pub partial_batch: PartialBatch,
}

impl Default for RetrievalProtocol {
    fn default() -> Self {
        Self {
            batch_size: 50,
            runs: 5,
            ks: vec![1, 2],
            seed: 0,
            partial_batch: PartialBatch::Drop,
        }
    }
}

impl RetrievalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0 || k > self.batch_size) {
            return Err(Error::KTooLarge {
                k,
                candidates: self.batch_size,
            });
        }
        if self.ks.is_empty() {
            return Err(Error::InvalidConfig("ks must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub direction: Direction,
    pub k: usize,
    /// Percent.
    pub mean: f64,
    /// Population standard deviation over runs, percent.
    pub std: f64,
    pub per_run: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rows: Vec<RetrievalRow>,
    /// Per-item hits concatenated over runs, keyed by direction then k.
    pub correctness: BTreeMap<String, BTreeMap<usize, Vec<bool>>>,
    /// Items scored per direction, summed over runs.
    pub evaluated_per_direction: usize,
    pub partial_batch: PartialBatch,
}

impl RetrievalResult {
    pub fn row(&self, direction: Direction, k: usize) -> Option<&RetrievalRow> {
        self.rows.iter().find(|r| r.direction == direction && r.k == k)
    }

    pub fn hits(&self, direction: Direction, k: usize) -> Option<&[bool]> {
        self.correctness.get(direction.as_str())?.get(&k).map(Vec::as_slice)
    }

    /// Items scored over both directions and all runs.
    pub fn evaluated_examples(&self) -> usize {
        2 * self.evaluated_per_direction
    }

    /// CSV with columns model,direction,k,mean,std.
    pub fn write_csv<W: Write>(&self, model: &str, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
        writer.write_record(["model", "direction", "k", "mean", "std"]).map_err(to_io)?;
        for row in &self.rows {
            writer
                .write_record([
                    model.to_string(),
                    row.direction.as_str().to_string(),
                    row.k.to_string(),
                    format!("{:.2}", row.mean),
                    format!("{:.2}", row.std),
                ])
                .map_err(to_io)?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the shuffled in-batch protocol on precomputed unit-norm embeddings.
pub fn run_protocol_on_embeddings(image: &Array2<f64>, text: &Array2<f64>, protocol: &RetrievalProtocol) -> Result<RetrievalResult> {
    protocol.validate()?;
    if image.dim() != text.dim() {
        return Err(Error::ShapeMismatch(format!("image {:?} vs text {:?}", image.dim(), text.dim())));
    }
    let n = image.nrows();
    if n < protocol.batch_size {
        return Err(Error::CorpusTooSmall {
            size: n,
            batch_size: protocol.batch_size,
        });
    }

    let mut correctness: BTreeMap<String, BTreeMap<usize, Vec<bool>>> = BTreeMap::new();
    let mut per_run: BTreeMap<(Direction, usize), Vec<f64>> = BTreeMap::new();
    let mut evaluated = 0;
    for run in 0..protocol.runs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(protocol.seed.wrapping_add(run as u64)));
        let image_run = image.select(Axis(0), &order);
        let text_run = text.select(Axis(0), &order);

        let mut run_hits: BTreeMap<(Direction, usize), Vec<bool>> = BTreeMap::new();
        for start in (0..n).step_by(protocol.batch_size) {
            let end = (start + protocol.batch_size).min(n);
            let size = end - start;
            if size < protocol.batch_size && protocol.partial_batch == PartialBatch::Drop {
                break;
            }
            let sim = image_run.slice(s![start..end, ..]).dot(&text_run.slice(s![start..end, ..]).t());
            for direction in Direction::BOTH {
                let view = match direction {
                    Direction::ImageToText => sim.view(),
                    Direction::TextToImage => sim.t(),
                };
                for &k in &protocol.ks {
                    run_hits.entry((direction, k)).or_default().extend(topk_hits(view, k.min(size))?);
                }
            }
        }
        for ((direction, k), hits) in run_hits {
            if direction == Direction::ImageToText && k == protocol.ks[0] {
                evaluated += hits.len();
            }
            let acc = 100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
            per_run.entry((direction, k)).or_default().push(acc);
            correctness
                .entry(direction.as_str().to_string())
                .or_default()
                .entry(k)
                .or_default()
                .extend(hits);
        }
    }

    let mut rows = Vec::new();
    for direction in Direction::BOTH {
        for &k in &protocol.ks {
            let runs = per_run.remove(&(direction, k)).unwrap_or_default();
            let (mean, std) = mean_std(&runs);
            rows.push(RetrievalRow {
                direction,
                k,
                mean,
                std,
                per_run: runs,
            });
        }
    }
    Ok(RetrievalResult {
        rows,
        correctness,
        evaluated_per_direction: evaluated,
        partial_batch: protocol.partial_batch,
    })
}

/// Embeds every pair once, then runs the protocol.
pub fn run_protocol(encoder: &dyn DualEncoder, corpus: &[(Image, String)], protocol: &RetrievalProtocol) -> Result<RetrievalResult> {
    protocol.validate()?;
    if corpus.len() < protocol.batch_size {
        return Err(Error::CorpusTooSmall {
            size: corpus.len(),
            batch_size: protocol.batch_size,
        });
    }
    let batch = embed_corpus(encoder, corpus)?;
    run_protocol_on_embeddings(batch.image(), batch.text(), protocol)
}

pub fn embed_corpus(encoder: &dyn DualEncoder, corpus: &[(Image, String)]) -> Result<EmbeddingBatch> {
    let d = encoder.info().embed_dim;
    let mut image = Array2::zeros((corpus.len(), d));
    let mut text = Array2::zeros((corpus.len(), d));
    for (i, (img, caption)) in corpus.iter().enumerate() {
        image.row_mut(i).assign(&encoder.encode_image(img)?);
        text.row_mut(i).assign(&encoder.encode_text(caption)?.vector);
    }
    EmbeddingBatch::new(image, text)
}

/// Exact two-sided McNemar test on paired correctness vectors.
pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<f64> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::LengthMismatch {
            left: correct_a.len(),
            right: correct_b.len(),
        });
    }
    let only_a = correct_a.iter().zip(correct_b).filter(|&(&a, &b)| a && !b).count() as u64;
    let only_b = correct_a.iter().zip(correct_b).filter(|&(&a, &b)| !a && b).count() as u64;
    let discordant = only_a + only_b;
    if discordant == 0 {
        return Ok(1.0);
    }
    let binom = Binomial::new(0.5, discordant).expect("valid binomial");
    Ok((2.0 * binom.cdf(only_a.min(only_b))).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_is_perfect() {
        let sim = Array2::eye(4);
        assert_eq!(topk_retrieval_accuracy(sim.view(), 1).unwrap(), 1.0);
    }

    #[test]
    fn anti_diagonal_pair() {
        let sim = array![[0.1, 0.9], [0.9, 0.1]];
        assert_eq!(topk_retrieval_accuracy(sim.view(), 1).unwrap(), 0.0);
        assert_eq!(topk_retrieval_accuracy(sim.view(), 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let sim = Array2::from_elem((3, 3), 0.5);
        assert_eq!(topk_hits(sim.view(), 1).unwrap(), vec![true, false, false]);
        assert_eq!(topk_hits(sim.view(), 2).unwrap(), vec![true, true, false]);
    }

    #[test]
    fn k_out_of_range() {
        let sim = Array2::eye(3);
        assert!(matches!(topk_hits(sim.view(), 0), Err(Error::KTooLarge { .. })));
        assert!(matches!(topk_hits(sim.view(), 4), Err(Error::KTooLarge { k: 4, candidates: 3 })));
    }

    #[test]
    fn mcnemar_examples() {
        let a = vec![true; 10];
        assert_eq!(mcnemar_test(&a, &a).unwrap(), 1.0);
        let b = vec![false; 10];
        assert!((mcnemar_test(&a, &b).unwrap() - 2.0 / 1024.0).abs() < 1e-12);
        assert_eq!(mcnemar_test(&[true, false], &[false, true]).unwrap(), 1.0);
        assert!(matches!(mcnemar_test(&[true], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn partial_batch_counts() {
        let n = 7042;
        let d = 4;
        let image = Array2::from_shape_fn((n, d), |(i, j)| if j == i % d { 1.0 } else { 0.0 });
        let protocol = RetrievalProtocol {
            partial_batch: PartialBatch::Keep,
            ..RetrievalProtocol::default()
        };
        let kept = run_protocol_on_embeddings(&image, &image, &protocol).unwrap();
        assert_eq!(kept.evaluated_examples(), 70_420);
        let dropped = run_protocol_on_embeddings(&image, &image, &RetrievalProtocol::default()).unwrap();
        assert_eq!(dropped.evaluated_examples(), 70_000);
    }

    #[test]
    fn single_run_has_zero_std() {
        let e = Array2::eye(6);
        let protocol = RetrievalProtocol {
            batch_size: 3,
            runs: 1,
            ..RetrievalProtocol::default()
        };
        let result = run_protocol_on_embeddings(&e, &e, &protocol).unwrap();
        assert!(result.rows.iter().all(|r| r.std == 0.0 && r.mean == 100.0));
        let too_small = RetrievalProtocol {
            batch_size: 10,
            ..protocol
        };
        assert!(matches!(
            run_protocol_on_embeddings(&e, &e, &too_small),
            Err(Error::CorpusTooSmall { size: 6, batch_size: 10 })
        ));
    }
}
