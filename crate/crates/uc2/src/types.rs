//! Shared data model: embedding corpora, codebooks, hierarchies,
//! assignment histograms and token sequences.
//!
//! Values are stored as `f32` (matching on-disk layout); every distance and
//! sum in the crate accumulates in `f64`. Token ids are `u32` with the row
//! index of a codebook acting as the id.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major N×d matrix of `f32` features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking only the shape. Finiteness is checked
    /// separately via [`EmbeddingMatrix::non_finite_positions`] so defective
    /// inputs (e.g. codebooks awaiting filtering) can still be represented.
    pub fn new(n_rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if values.len() != n_rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {}x{} matrix, got {}",
                n_rows * dim,
                n_rows,
                dim,
                values.len()
            )));
        }
        Ok(Self { n_rows, dim, values })
    }

    pub fn zeros(n_rows: usize, dim: usize) -> Self {
        Self { n_rows, dim, values: vec![0.0; n_rows * dim] }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Returns every (row, col) holding a NaN or infinity; empty means ok.
    pub fn non_finite_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, row) in self.rows().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Errors with all offending positions unless every value is finite.
    pub fn validate(&self) -> Result<()> {
        let positions = self.non_finite_positions();
        if positions.is_empty() {
            Ok(())
        } else {
            Err(Error::NonFinite { positions })
        }
    }
}

/// Build provenance carried alongside a codebook (in-memory only; the
/// on-disk format stores the centroid table alone).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodebookMeta {
    pub seed: u64,
    pub source_hash: u64,
    pub iterations: u32,
}

/// K×d centroid table. The row index is the token id, dense in `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: EmbeddingMatrix,
    pub metadata: CodebookMeta,
}

impl Codebook {
    pub fn new(centroids: EmbeddingMatrix, metadata: CodebookMeta) -> Result<Self> {
        if centroids.n_rows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        Ok(Self { centroids, metadata })
    }

    pub fn k(&self) -> usize {
        self.centroids.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroids(&self) -> &EmbeddingMatrix {
        &self.centroids
    }

    pub fn centroid(&self, id: u32) -> &[f32] {
        self.centroids.row(id as usize)
    }

    /// SHA-256 over the little-endian bytes of the centroid table. Used to
    /// prove a frozen codebook was not touched by training.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.centroids.values() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Coarse centroids plus the fine-to-coarse partition produced by two-stage
/// clustering. Reused as an inverted-file index for multi-probe search.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalIndex {
    coarse_centroids: EmbeddingMatrix,
    buckets: Vec<Vec<u32>>,
}

impl HierarchicalIndex {
    pub fn new(coarse_centroids: EmbeddingMatrix, buckets: Vec<Vec<u32>>) -> Result<Self> {
        if coarse_centroids.n_rows() != buckets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coarse centroids but {} buckets",
                coarse_centroids.n_rows(),
                buckets.len()
            )));
        }
        Ok(Self { coarse_centroids, buckets })
    }

    pub fn k1(&self) -> usize {
        self.buckets.len()
    }

    pub fn coarse_centroids(&self) -> &EmbeddingMatrix {
        &self.coarse_centroids
    }

    pub fn buckets(&self) -> &[Vec<u32>] {
        &self.buckets
    }

    pub fn bucket(&self, cell: usize) -> &[u32] {
        &self.buckets[cell]
    }

    /// Parent cell of each fine id, the form stored on disk.
    pub fn parent_ids(&self, k: usize) -> Result<Vec<u32>> {
        let mut parents = vec![u32::MAX; k];
        for (cell, bucket) in self.buckets.iter().enumerate() {
            for &id in bucket {
                if (id as usize) >= k || parents[id as usize] != u32::MAX {
                    return Err(Error::ShapeMismatch(format!(
                        "bucket contents do not partition 0..{k}"
                    )));
                }
                parents[id as usize] = cell as u32;
            }
        }
        if parents.iter().any(|&p| p == u32::MAX) {
            return Err(Error::ShapeMismatch(format!(
                "bucket contents do not partition 0..{k}"
            )));
        }
        Ok(parents)
    }

    /// Checks that the buckets are an exact partition of `0..k`.
    pub fn check_partition(&self, k: usize) -> Result<()> {
        self.parent_ids(k).map(|_| ())
    }
}

/// Per-codeword assignment counts; `counts[k] / total` is the empirical
/// usage distribution q(k).
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl AssignmentHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn from_assignments(assignments: &[u32], k: usize) -> Result<Self> {
        let mut counts = vec![0u64; k];
        for &a in assignments {
            let a = a as usize;
            if a >= k {
                return Err(Error::OutOfVocabulary { token: a as u32, k });
            }
            counts[a] += 1;
        }
        Ok(Self::new(counts))
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// q(k) = counts[k] / total; empty when total = 0.
    pub fn probabilities(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        let t = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Discrete token ids addressing a codebook of size `codebook_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    codebook_k: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, codebook_k: usize) -> Result<Self> {
        for &t in &tokens {
            if t as usize >= codebook_k {
                return Err(Error::OutOfVocabulary { token: t, k: codebook_k });
            }
        }
        Ok(Self { tokens, codebook_k })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn codebook_k(&self) -> usize {
        self.codebook_k
    }
}

/// Embedding corpus paired with integer semantic labels.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddings {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<u32>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: EmbeddingMatrix, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != embeddings.n_rows() {
            return Err(Error::LengthMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                embeddings.n_rows()
            )));
        }
        Ok(Self { embeddings, labels })
    }
}

/// Row-major f64 matrix for trainer-side values (pooled projections,
/// trainable-table lookups).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {}x{}, got {}",
                rows * dim,
                rows,
                dim,
                values.len()
            )));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, values: vec![0.0; rows * dim] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// L2-normalizes each row in place; rows with zero norm are left unchanged.
/// Optional preprocessing before clustering/quantization, default off.
pub fn l2_normalize_rows(m: &mut EmbeddingMatrix) {
    let dim = m.dim();
    for i in 0..m.n_rows() {
        let row = m.row_mut(i);
        let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        let _ = dim;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_all_finite_ok() {
        let m = EmbeddingMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(m.validate().is_ok());
        assert!(m.non_finite_positions().is_empty());
    }

    #[test]
    fn validate_reports_nan_position() {
        let m = EmbeddingMatrix::new(2, 2, vec![0.0, 0.0, f32::NAN, 0.0]).unwrap();
        assert_eq!(m.non_finite_positions(), vec![(1, 0)]);
    }

    #[test]
    fn validate_reports_all_defects() {
        let mut values = vec![0.0f32; 3 * 4];
        values[3] = f32::INFINITY; // (0, 3)
        values[2 * 4 + 2] = f32::NAN; // (2, 2)
        let m = EmbeddingMatrix::new(3, 4, values).unwrap();
        assert_eq!(m.non_finite_positions(), vec![(0, 3), (2, 2)]);
        match m.validate() {
            Err(Error::NonFinite { positions }) => assert_eq!(positions.len(), 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn histogram_probabilities_sum_to_one() {
        let h = AssignmentHistogram::new(vec![5, 0, 3, 2]);
        assert_eq!(h.total(), 10);
        let sum: f64 = h.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_check_catches_missing_and_duplicate_ids() {
        let coarse = EmbeddingMatrix::zeros(2, 2);
        let good = HierarchicalIndex::new(coarse.clone(), vec![vec![0, 2], vec![1]]).unwrap();
        assert!(good.check_partition(3).is_ok());
        let missing = HierarchicalIndex::new(coarse.clone(), vec![vec![0], vec![1]]).unwrap();
        assert!(missing.check_partition(3).is_err());
        let dup = HierarchicalIndex::new(coarse, vec![vec![0, 1], vec![1, 2]]).unwrap();
        assert!(dup.check_partition(3).is_err());
    }

    #[test]
    fn token_sequence_rejects_out_of_range() {
        assert!(TokenSequence::new(vec![0, 3], 3).is_err());
        assert!(TokenSequence::new(vec![0, 2], 3).is_ok());
    }

    #[test]
    fn labels_must_match_rows() {
        let m = EmbeddingMatrix::zeros(3, 2);
        assert!(LabeledEmbeddings::new(m.clone(), vec![0, 1]).is_err());
        assert!(LabeledEmbeddings::new(m, vec![0, 1, 0]).is_ok());
    }
}
