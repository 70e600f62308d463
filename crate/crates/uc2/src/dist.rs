//! Squared-Euclidean distance kernels.
//!
//! The hot path uses the expansion `‖e−c‖² = ‖e‖² − 2e·c + ‖c‖²` with
//! precomputed centroid norms; everything accumulates in `f64`. The naive
//! subtract-square form is kept as the reference the expansion is tested
//! against.

use crate::types::EmbeddingMatrix;

/// Naive subtract-square form, f64 accumulation.
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent accumulators so the adds pipeline
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x4, y4) in ca.zip(cb) {
        for i in 0..4 {
            let d = x4[i] as f64 - y4[i] as f64;
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        let d = x as f64 - y as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x4, y4) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x4[i] as f64 * y4[i] as f64;
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x as f64 * y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sq_norm(a: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.chunks_exact(4);
    let rem = chunks.remainder();
    for x4 in chunks {
        for i in 0..4 {
            acc[i] += x4[i] as f64 * x4[i] as f64;
        }
    }
    let mut tail = 0.0;
    for &x in rem {
        tail += x as f64 * x as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x8, y8) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x8[i] * y8[i];
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Nearest-row scanner over a centroid table with precomputed row norms.
/// The table is widened to `f64` once at construction (the widening is
/// exact) so the per-centroid inner loop is a pure `f64` dot product.
/// Ties break toward the lowest row id.
pub struct NearestScan {
    dim: usize,
    vals: Vec<f64>,
    norms: Vec<f64>,
}

impl NearestScan {
    pub fn new(mat: &EmbeddingMatrix) -> Self {
        let vals: Vec<f64> = mat.values().iter().map(|&v| v as f64).collect();
        let norms = vals.chunks(mat.dim().max(1)).map(|r| dot64(r, r)).collect();
        Self { dim: mat.dim(), vals, norms }
    }

    pub fn k(&self) -> usize {
        self.norms.len()
    }

    fn row(&self, id: usize) -> &[f64] {
        &self.vals[id * self.dim..(id + 1) * self.dim]
    }

    fn widen(e: &[f32]) -> Vec<f64> {
        e.iter().map(|&v| v as f64).collect()
    }

    /// Expansion-form distance to row `id`, clamped at zero.
    pub fn dist_to(&self, e: &[f32], e_norm: f64, id: u32) -> f64 {
        let ef = Self::widen(e);
        (e_norm - 2.0 * dot64(&ef, self.row(id as usize)) + self.norms[id as usize]).max(0.0)
    }

    /// Nearest row over the whole table.
    pub fn nearest(&self, e: &[f32]) -> (u32, f64) {
        let ef = Self::widen(e);
        let e_norm = dot64(&ef, &ef);
        let mut best_id = 0u32;
        let mut best = f64::INFINITY;
        for id in 0..self.k() {
            let d = (e_norm - 2.0 * dot64(&ef, self.row(id)) + self.norms[id]).max(0.0);
            if d < best {
                best = d;
                best_id = id as u32;
            }
        }
        (best_id, best)
    }

    /// Nearest row for every row of `mat`. Blocks eight queries per pass
    /// over the table (transposed so the inner loop is a broadcast
    /// multiply-add) which is much faster than row-at-a-time `nearest`
    /// for small dimensions.
    pub fn assign_rows(&self, mat: &EmbeddingMatrix) -> Vec<(u32, f64)> {
        debug_assert_eq!(mat.dim(), self.dim);
        let n = mat.n_rows();
        let dim = self.dim;
        let mut out = Vec::with_capacity(n);
        let mut qt = vec![0.0f64; dim * 8];
        for start in (0..n - n % 8).step_by(8) {
            for i in 0..8 {
                let row = mat.row(start + i);
                for j in 0..dim {
                    qt[j * 8 + i] = row[j] as f64;
                }
            }
            let mut qnorm = [0.0f64; 8];
            for q8 in qt.chunks_exact(8) {
                for i in 0..8 {
                    qnorm[i] += q8[i] * q8[i];
                }
            }
            let mut best = [f64::INFINITY; 8];
            let mut best_id = [0u32; 8];
            for id in 0..self.k() {
                let c = self.row(id);
                let cn = self.norms[id];
                let mut acc = [0.0f64; 8];
                for (&cv, q8) in c.iter().zip(qt.chunks_exact(8)) {
                    for i in 0..8 {
                        acc[i] += q8[i] * cv;
                    }
                }
                for i in 0..8 {
                    let d = (qnorm[i] - 2.0 * acc[i] + cn).max(0.0);
                    if d < best[i] {
                        best[i] = d;
                        best_id[i] = id as u32;
                    }
                }
            }
            for i in 0..8 {
                out.push((best_id[i], best[i]));
            }
        }
        for i in (n - n % 8)..n {
            out.push(self.nearest(mat.row(i)));
        }
        out
    }

    /// Nearest row among `ids` (need not be sorted); `None` when empty.
    pub fn nearest_in(&self, e: &[f32], ids: &[u32]) -> Option<(u32, f64)> {
        let ef = Self::widen(e);
        let e_norm = dot64(&ef, &ef);
        let mut best: Option<(u32, f64)> = None;
        for &id in ids {
            let d =
                (e_norm - 2.0 * dot64(&ef, self.row(id as usize)) + self.norms[id as usize]).max(0.0);
            match best {
                None => best = Some((id, d)),
                Some((bid, bd)) => {
                    if d < bd || (d == bd && id < bid) {
                        best = Some((id, d));
                    }
                }
            }
        }
        best
    }
}
