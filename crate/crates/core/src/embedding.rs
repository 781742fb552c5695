//! Unit-normalized embedding batches and cross-modal similarity matrices.
//!
//! Every loss and retrieval routine in the crate works on an [`EmbeddingBatch`]:
//! `B` paired rows of image and text embeddings, each row of unit L2 norm, with
//! row `i` of both matrices forming the positive pair.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on row norms accepted by [`EmbeddingBatch::new`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Which modality plays the anchor role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scales every row to unit L2 norm.
pub fn normalize_rows(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if !(norm >= ZERO_NORM) {
            return Err(Error::ZeroVectorRow { row });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Paired, unit-normalized image and text embeddings for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    image: Array2<f64>,
    text: Array2<f64>,
}

impl EmbeddingBatch {
    /// Wraps already-normalized embeddings, checking the batch invariants.
    pub fn new(image: Array2<f64>, text: Array2<f64>) -> Result<Self> {
        if image.dim() != text.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image embeddings {:?} vs text embeddings {:?}",
                image.dim(),
                text.dim()
            )));
        }
        if image.ncols() == 0 {
            return Err(Error::ShapeMismatch("embedding dimension is zero".into()));
        }
        if image.nrows() < 2 {
            return Err(Error::BatchTooSmall(image.nrows()));
        }
        for (side, m) in [("image", &image), ("text", &text)] {
            for (row, r) in m.axis_iter(Axis(0)).enumerate() {
                let norm = r.dot(&r).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::NotNormalized { side, row, norm });
                }
            }
        }
        Ok(Self { image, text })
    }

    /// Normalizes raw encoder outputs and wraps them.
    pub fn from_raw(image: ArrayView2<'_, f64>, text: ArrayView2<'_, f64>) -> Result<Self> {
        Self::new(normalize_rows(image)?, normalize_rows(text)?)
    }

    pub fn batch_size(&self) -> usize {
        self.image.nrows()
    }

    pub fn dim(&self) -> usize {
        self.image.ncols()
    }

    pub fn image(&self) -> &Array2<f64> {
        &self.image
    }

    pub fn text(&self) -> &Array2<f64> {
        &self.text
    }

    /// Applies the same row permutation to both modalities, keeping pairs intact.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.batch_size() {
            return Err(Error::LengthMismatch {
                left: order.len(),
                right: self.batch_size(),
            });
        }
        Ok(Self {
            image: self.image.select(Axis(0), order),
            text: self.text.select(Axis(0), order),
        })
    }
}

/// Cosine similarities between anchors (rows) and candidates (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub direction: Direction,
}

impl SimilarityMatrix {
    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    /// The same similarities viewed from the other modality.
    pub fn transposed(&self) -> SimilarityMatrix {
        let direction = match self.direction {
            Direction::ImageToText => Direction::TextToImage,
            Direction::TextToImage => Direction::ImageToText,
        };
        SimilarityMatrix {
            values: self.values.t().to_owned(),
            direction,
        }
    }
}

/// Entry `(i, j)` is `dot(anchor_i, candidate_j)`; the diagonal holds positive pairs.
pub fn similarity_matrix(batch: &EmbeddingBatch, direction: Direction) -> SimilarityMatrix {
    // One product for both directions so they are exact transposes.
    let image_to_text = batch.image.dot(&batch.text.t());
    let values = match direction {
        Direction::ImageToText => image_to_text,
        Direction::TextToImage => image_to_text.reversed_axes().as_standard_layout().into_owned(),
    };
    SimilarityMatrix { values, direction }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalizes_three_four_five() {
        let out = normalize_rows(array![[3.0, 4.0]].view()).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((out[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn unit_rows_pass_through() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(normalize_rows(eye.view()).unwrap(), eye);
    }

    #[test]
    fn zero_row_is_an_error() {
        let err = normalize_rows(array![[1.0, 0.0], [0.0, 0.0]].view()).unwrap_err();
        assert!(matches!(err, Error::ZeroVectorRow { row: 1 }));
    }

    #[test]
    fn similarity_of_orthonormal_pairs_is_identity() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let batch = EmbeddingBatch::new(eye.clone(), eye.clone()).unwrap();
        assert_eq!(similarity_matrix(&batch, Direction::ImageToText).values, eye);
    }

    #[test]
    fn similarity_of_identical_rows_is_all_ones() {
        let rows = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
        let batch = EmbeddingBatch::new(rows.clone(), rows).unwrap();
        let sim = similarity_matrix(&batch, Direction::TextToImage);
        for v in sim.values.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_direct_dot_products() {
        let image = array![[1.0, 0.0], [0.0, 1.0]];
        let text = array![[0.6, 0.8], [0.8, 0.6]];
        let batch = EmbeddingBatch::new(image, text).unwrap();
        let sim = similarity_matrix(&batch, Direction::ImageToText);
        let expected = array![[0.6, 0.8], [0.8, 0.6]];
        for (a, b) in sim.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rejects_single_pair_and_unnormalized_rows() {
        assert!(matches!(
            EmbeddingBatch::new(array![[1.0, 0.0]], array![[1.0, 0.0]]),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(matches!(
            EmbeddingBatch::new(array![[1.0, 0.0], [2.0, 0.0]], array![[1.0, 0.0], [1.0, 0.0]]),
            Err(Error::NotNormalized { side: "image", row: 1, .. })
        ));
    }

    #[test]
    fn directions_are_transposes() {
        let batch = EmbeddingBatch::from_raw(
            array![[1.0, 2.0, 0.5], [0.3, -1.0, 2.0], [1.0, 1.0, 1.0]].view(),
            array![[0.2, 0.1, 0.9], [1.0, 0.0, 0.0], [-1.0, 2.0, 0.1]].view(),
        )
        .unwrap();
        let v2t = similarity_matrix(&batch, Direction::ImageToText);
        let t2v = similarity_matrix(&batch, Direction::TextToImage);
        assert_eq!(v2t.values, t2v.values.t());
        assert_eq!(v2t.transposed(), t2v);
    }
}
