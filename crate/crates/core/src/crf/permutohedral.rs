//! Permutohedral lattice for fast high-dimensional Gaussian filtering.
//!
//! Points are splatted onto the vertices of the enclosing lattice simplex with
//! barycentric weights, blurred with a [1 2 1]/2 kernel along each of the d+1
//! lattice directions, and sliced back out. The result approximates
//! convolution with a unit-variance Gaussian in feature space.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

pub struct Lattice {
    n_points: usize,
    dim: usize,
    /// Per point and simplex vertex: lattice vertex index.
    offsets: Vec<usize>,
    barycentric: Vec<f64>,
    /// Per blur direction and vertex: the two neighbours, if present.
    neighbours: Vec<(Option<usize>, Option<usize>)>,
    n_vertices: usize,
}

impl Lattice {
    /// Builds the lattice for `features` (N × d).
    pub fn new(features: ArrayView2<'_, f64>) -> Self {
        let (n, d) = features.dim();
        let d1 = d + 1;
        let scale: Vec<f64> = (0..d)
            .map(|i| d1 as f64 * (2.0_f64 / 3.0).sqrt() / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        // canonical[r][i]: coordinate i of the remainder-r vertex of the canonical simplex.
        let canonical: Vec<Vec<i64>> = (0..=d)
            .map(|r| (0..=d).map(|i| if i <= d - r { r as i64 } else { r as i64 - d1 as i64 }).collect())
            .collect();

        let mut table: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut keys: Vec<Vec<i64>> = Vec::new();
        let mut offsets = vec![0; n * d1];
        let mut barycentric = vec![0.0; n * d1];

        let mut elevated = vec![0.0; d1];
        let mut rem0 = vec![0i64; d1];
        let mut rank = vec![0i64; d1];
        let mut bary = vec![0.0; d + 2];
        let down = 1.0 / d1 as f64;

        for (k, f) in features.rows().into_iter().enumerate() {
            let mut sum_cf = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sum_cf - j as f64 * cf;
                sum_cf += cf;
            }
            elevated[0] = sum_cf;

            let mut sum = 0i64;
            for i in 0..=d {
                let rd = (down * elevated[i]).round() as i64;
                rem0[i] = rd * d1 as i64;
                sum += rd;
            }

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..=d {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            for i in 0..=d {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i64;
                    rem0[i] += d1 as i64;
                } else if rank[i] > d as i64 {
                    rank[i] -= d1 as i64;
                    rem0[i] -= d1 as i64;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=d {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for r in 0..=d {
                let key: Vec<i64> = (0..d).map(|i| rem0[i] + canonical[r][rank[i] as usize]).collect();
                let next = keys.len();
                let index = *table.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                offsets[k * d1 + r] = index;
                barycentric[k * d1 + r] = bary[r];
            }
        }

        let m = keys.len();
        let mut neighbours = vec![(None, None); d1 * m];
        let mut n1 = vec![0i64; d];
        let mut n2 = vec![0i64; d];
        for (i, key) in keys.iter().enumerate() {
            for j in 0..=d {
                for c in 0..d {
                    n1[c] = key[c] - 1;
                    n2[c] = key[c] + 1;
                }
                if j < d {
                    n1[j] = key[j] + d as i64;
                    n2[j] = key[j] - d as i64;
                }
                neighbours[j * m + i] = (table.get(&n1).copied(), table.get(&n2).copied());
            }
        }

        Self {
            n_points: n,
            dim: d,
            offsets,
            barycentric,
            neighbours,
            n_vertices: m,
        }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Filters every column of `values` (N × v).
    pub fn filter(&self, values: &Array2<f64>) -> Array2<f64> {
        let (n, v) = values.dim();
        assert_eq!(n, self.n_points, "value rows must match lattice points");
        let d1 = self.dim + 1;
        let m = self.n_vertices;

        let mut grid = vec![0.0; m * v];
        for k in 0..n {
            for r in 0..d1 {
                let o = self.offsets[k * d1 + r];
                let w = self.barycentric[k * d1 + r];
                for c in 0..v {
                    grid[o * v + c] += w * values[[k, c]];
                }
            }
        }

        let mut next = vec![0.0; m * v];
        for j in 0..d1 {
            for i in 0..m {
                let (a, b) = self.neighbours[j * m + i];
                for c in 0..v {
                    let left = a.map_or(0.0, |a| grid[a * v + c]);
                    let right = b.map_or(0.0, |b| grid[b * v + c]);
                    next[i * v + c] = grid[i * v + c] + 0.5 * (left + right);
                }
            }
            std::mem::swap(&mut grid, &mut next);
        }

        let alpha = 1.0 / (1.0 + 2.0_f64.powi(-(self.dim as i32)));
        let mut out = Array2::zeros((n, v));
        for k in 0..n {
            for r in 0..d1 {
                let o = self.offsets[k * d1 + r];
                let w = self.barycentric[k * d1 + r] * alpha;
                for c in 0..v {
                    out[[k, c]] += w * grid[o * v + c];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barycentric_weights_sum_to_one() {
        let feats = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 13) % 11) as f64 * 0.37);
        let lattice = Lattice::new(feats.view());
        for k in 0..50 {
            let s: f64 = lattice.barycentric[k * 4..k * 4 + 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "point {k}: {s}");
            assert!(lattice.barycentric[k * 4..k * 4 + 4].iter().all(|&b| b >= -1e-9));
        }
    }

    #[test]
    fn far_apart_points_do_not_interact() {
        let feats = ndarray::array![[0.0, 0.0], [1000.0, 1000.0]];
        let lattice = Lattice::new(feats.view());
        let out = lattice.filter(&ndarray::array![[1.0], [0.0]]);
        assert!(out[[1, 0]].abs() < 1e-12);
        assert!(out[[0, 0]] > 0.0);
    }
}
