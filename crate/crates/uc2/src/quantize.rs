//! Nearest-centroid quantization, exact and multi-probe hierarchical, plus
//! the cascaded frozen/trainable codebook lookup.
//!
//! The frozen codebook supplies stable token ids; the trainable table maps
//! those ids to task-adapted embeddings. The trainable side is kept in f64
//! so its gradients can be audited against finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dist::{sq_norm, NearestScan};
use crate::error::{Error, Result};
use crate::types::{
    AssignmentHistogram, Codebook, EmbeddingMatrix, HierarchicalIndex, Mat64, TokenSequence,
};

/// Exact nearest-centroid id; ties break to the lowest id.
pub fn quantize_exact(e: &[f32], codebook: &Codebook) -> Result<u32> {
    if e.len() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs codebook dim {}",
            e.len(),
            codebook.dim()
        )));
    }
    let scan = NearestScan::new(codebook.centroids());
    Ok(scan.nearest(e).0)
}

/// Quantizes every row, returning the token sequence and usage histogram.
pub fn quantize_batch(
    data: &EmbeddingMatrix,
    codebook: &Codebook,
) -> Result<(TokenSequence, AssignmentHistogram)> {
    if data.dim() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "data dim {} vs codebook dim {}",
            data.dim(),
            codebook.dim()
        )));
    }
    let scan = NearestScan::new(codebook.centroids());
    let tokens: Vec<u32> = scan.assign_rows(data).into_iter().map(|(id, _)| id).collect();
    let histogram = AssignmentHistogram::from_assignments(&tokens, codebook.k())?;
    Ok((TokenSequence::new(tokens, codebook.k())?, histogram))
}

/// Outcome of a hierarchical probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierHit {
    pub id: u32,
    pub dist: f64,
    /// True when every probed bucket was empty and an exact scan was used.
    pub fell_back_to_exact: bool,
}

/// Multi-probe search: scans only the buckets of the `nprobe` nearest coarse
/// centroids. With `nprobe = k1` the result equals [`quantize_exact`].
pub fn quantize_hierarchical(
    e: &[f32],
    codebook: &Codebook,
    index: &HierarchicalIndex,
    nprobe: usize,
) -> Result<HierHit> {
    if e.len() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs codebook dim {}",
            e.len(),
            codebook.dim()
        )));
    }
    if nprobe < 1 || nprobe > index.k1() {
        return Err(Error::InvalidConfig(format!(
            "nprobe = {} out of range 1..={}",
            nprobe,
            index.k1()
        )));
    }
    let e_norm = sq_norm(e);
    let coarse = NearestScan::new(index.coarse_centroids());
    let mut order: Vec<u32> = (0..index.k1() as u32).collect();
    let dists: Vec<f64> = order.iter().map(|&c| coarse.dist_to(e, e_norm, c)).collect();
    order.sort_by(|&a, &b| {
        dists[a as usize]
            .partial_cmp(&dists[b as usize])
            .unwrap()
            .then(a.cmp(&b))
    });

    let scan = NearestScan::new(codebook.centroids());
    let mut best: Option<(u32, f64)> = None;
    for &cell in order.iter().take(nprobe) {
        if let Some((id, d)) = scan.nearest_in(e, index.bucket(cell as usize)) {
            best = match best {
                None => Some((id, d)),
                Some((bid, bd)) if d < bd || (d == bd && id < bid) => Some((id, d)),
                keep => keep,
            };
        }
    }
    match best {
        Some((id, dist)) => Ok(HierHit { id, dist, fell_back_to_exact: false }),
        None => {
            let (id, dist) = scan.nearest(e);
            Ok(HierHit { id, dist, fell_back_to_exact: true })
        }
    }
}

/// Frozen indexing codebook paired with a trainable embedding table sharing
/// the same vocabulary.
#[derive(Debug, Clone)]
pub struct CascadedCodebook {
    frozen: Codebook,
    index: Option<HierarchicalIndex>,
    trainable: Vec<f64>, // k × d2, row-major
    d2: usize,
}

impl CascadedCodebook {
    /// Trainable table starts as a copy of the frozen codebook (d2 = d).
    pub fn from_frozen(frozen: Codebook, index: Option<HierarchicalIndex>) -> Self {
        let d2 = frozen.dim();
        let trainable = frozen.centroids().values().iter().map(|&v| v as f64).collect();
        Self { frozen, index, trainable, d2 }
    }

    /// Trainable table with a different width, initialized by pushing the
    /// frozen centroids through a seeded near-orthogonal projection.
    pub fn from_frozen_with_d2(
        frozen: Codebook,
        index: Option<HierarchicalIndex>,
        d2: usize,
        seed: u64,
    ) -> Result<Self> {
        if d2 == 0 {
            return Err(Error::InvalidConfig("d2 must be >= 1".into()));
        }
        let d = frozen.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        // d columns of length d2... projection P is d×d2; columns orthonormalized
        // by Gram-Schmidt where possible.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d2);
        for _ in 0..d2 {
            let mut col: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            for prev in &cols {
                let proj: f64 = col.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (c, p) in col.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
            let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for c in col.iter_mut() {
                    *c /= norm;
                }
            }
            cols.push(col);
        }
        let mut trainable = Vec::with_capacity(frozen.k() * d2);
        for row in frozen.centroids().rows() {
            for col in &cols {
                trainable.push(row.iter().zip(col).map(|(&x, &p)| x as f64 * p).sum());
            }
        }
        Ok(Self { frozen, index, trainable, d2 })
    }

    pub fn frozen(&self) -> &Codebook {
        &self.frozen
    }

    pub fn index(&self) -> Option<&HierarchicalIndex> {
        self.index.as_ref()
    }

    pub fn k(&self) -> usize {
        self.frozen.k()
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn trainable(&self) -> &[f64] {
        &self.trainable
    }

    pub fn trainable_row(&self, id: u32) -> &[f64] {
        &self.trainable[id as usize * self.d2..(id as usize + 1) * self.d2]
    }

    pub fn set_trainable_row(&mut self, id: u32, row: &[f64]) -> Result<()> {
        if id as usize >= self.k() {
            return Err(Error::OutOfVocabulary { token: id, k: self.k() });
        }
        if row.len() != self.d2 {
            return Err(Error::ShapeMismatch(format!(
                "row len {} vs d2 {}",
                row.len(),
                self.d2
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { positions: vec![(id as usize, 0)] });
        }
        let d2 = self.d2;
        self.trainable[id as usize * d2..(id as usize + 1) * d2].copy_from_slice(row);
        Ok(())
    }

    pub(crate) fn trainable_row_mut(&mut self, id: u32) -> &mut [f64] {
        let d2 = self.d2;
        &mut self.trainable[id as usize * d2..(id as usize + 1) * d2]
    }

    pub fn frozen_checksum(&self) -> [u8; 32] {
        self.frozen.checksum()
    }
}

/// Looks each token up in the trainable table; row t = table[v_t].
pub fn cascade_lookup(tokens: &TokenSequence, cascade: &CascadedCodebook) -> Result<Mat64> {
    if tokens.codebook_k() != cascade.k() {
        return Err(Error::ShapeMismatch(format!(
            "token vocabulary {} vs cascade vocabulary {}",
            tokens.codebook_k(),
            cascade.k()
        )));
    }
    let d2 = cascade.d2();
    let mut values = Vec::with_capacity(tokens.len() * d2);
    for &t in tokens.tokens() {
        if t as usize >= cascade.k() {
            return Err(Error::OutOfVocabulary { token: t, k: cascade.k() });
        }
        values.extend_from_slice(cascade.trainable_row(t));
    }
    Mat64::new(tokens.len(), d2, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Hierarchical { nprobe: usize },
}

impl SearchMode {
    /// Exact up to 65 536 entries; above that, multi-probe with ⌈K₁/8⌉.
    pub fn default_for(cascade: &CascadedCodebook) -> SearchMode {
        match cascade.index() {
            Some(index) if cascade.k() > 65_536 => {
                SearchMode::Hierarchical { nprobe: (index.k1() + 7) / 8 }
            }
            _ => SearchMode::Exact,
        }
    }
}

/// Full tokenize pipeline: quantize rows against the frozen codebook, then
/// look the ids up in the trainable table.
pub fn tokenize_sequence(
    z: &EmbeddingMatrix,
    cascade: &CascadedCodebook,
    mode: SearchMode,
) -> Result<(TokenSequence, Mat64)> {
    if z.n_rows() > 0 && z.dim() != cascade.frozen().dim() {
        return Err(Error::ShapeMismatch(format!(
            "input dim {} vs frozen codebook dim {}",
            z.dim(),
            cascade.frozen().dim()
        )));
    }
    let tokens: Vec<u32> = match mode {
        SearchMode::Exact => {
            let scan = NearestScan::new(cascade.frozen().centroids());
            z.rows().map(|row| scan.nearest(row).0).collect()
        }
        SearchMode::Hierarchical { nprobe } => {
            let index = cascade.index().ok_or_else(|| {
                Error::InvalidConfig("hierarchical mode requires an index".into())
            })?;
            let mut out = Vec::with_capacity(z.n_rows());
            for row in z.rows() {
                out.push(quantize_hierarchical(row, cascade.frozen(), index, nprobe)?.id);
            }
            out
        }
    };
    let seq = TokenSequence::new(tokens, cascade.k())?;
    let embeds = cascade_lookup(&seq, cascade)?;
    Ok((seq, embeds))
}
