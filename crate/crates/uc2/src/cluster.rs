//! Lloyd k-means and the two-stage codebook construction.
//!
//! The two-stage path clusters the corpus into `k1` coarse cells, then runs
//! an independent k-means inside each cell for its share of the `k` fine
//! centroids. The union of fine centroids is the codebook; the coarse cells
//! double as an inverted-file index for multi-probe search. Non-finite
//! centroids (degenerate tiny clusters) are filtered and the codebook
//! compacted afterwards.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{sq_dist, NearestScan};
use crate::error::{Error, Result};
use crate::types::{Codebook, CodebookMeta, EmbeddingMatrix, HierarchicalIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    /// k-means++ seeding on a uniform sample of min(N, 256·k) rows.
    KmeansppOnSample,
    /// k distinct rows chosen uniformly.
    RandomRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyClusterPolicy {
    /// Move an empty centroid onto the point farthest from its current one.
    ReseedFarthest,
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Relative SSE-change threshold; iteration stops when the change drops
    /// strictly below it.
    pub tol: f64,
    pub init: InitMethod,
    pub seed: u64,
    pub empty_cluster_policy: EmptyClusterPolicy,
}

impl ClusterConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 50,
            tol: 1e-4,
            init: InitMethod::KmeansppOnSample,
            seed: 0,
            empty_cluster_policy: EmptyClusterPolicy::ReseedFarthest,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.k > n_rows {
            return Err(Error::InvalidConfig(format!(
                "k = {} exceeds corpus size {}",
                self.k, n_rows
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub codebook: Codebook,
    pub assignments: Vec<u32>,
    /// SSE after each assignment pass; non-increasing.
    pub distortion_trace: Vec<f64>,
    pub iters_run: usize,
}

impl ClusterResult {
    pub fn final_sse(&self) -> f64 {
        *self.distortion_trace.last().unwrap_or(&f64::NAN)
    }
}

fn hash_matrix(data: &EmbeddingMatrix) -> u64 {
    let mut h = DefaultHasher::new();
    data.n_rows().hash(&mut h);
    data.dim().hash(&mut h);
    for v in data.values() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// k-means++ seeding on a uniform sample of min(N, 256·k) rows.
/// Exposed so reference implementations can start from identical centroids.
pub fn kmeanspp_init(data: &EmbeddingMatrix, k: usize, seed: u64) -> EmbeddingMatrix {
    let n = data.n_rows();
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cap = 256usize.saturating_mul(k).min(n);
    let pool: Vec<usize> = if cap < n {
        let mut idx = sample(&mut rng, n, cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };

    let mut centroids = Vec::with_capacity(k * dim);
    let first = pool[rng.gen_range(0..pool.len())];
    centroids.extend_from_slice(data.row(first));

    // Min squared distance from each pool point to the chosen set.
    let mut min_d2: Vec<f64> = pool.iter().map(|&i| sq_dist(data.row(i), data.row(first))).collect();

    for _ in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = pool.len() - 1;
            for (j, &w) in min_d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = j;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..pool.len())
        };
        let row = data.row(pool[pick]);
        centroids.extend_from_slice(row);
        for (j, &i) in pool.iter().enumerate() {
            let d = sq_dist(data.row(i), row);
            if d < min_d2[j] {
                min_d2[j] = d;
            }
        }
    }
    EmbeddingMatrix::new(k, dim, centroids).expect("seeded centroid shape")
}

fn random_rows_init(data: &EmbeddingMatrix, k: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, data.n_rows(), k).into_vec();
    idx.sort_unstable();
    let mut values = Vec::with_capacity(k * data.dim());
    for i in idx {
        values.extend_from_slice(data.row(i));
    }
    EmbeddingMatrix::new(k, data.dim(), values).expect("seeded centroid shape")
}

fn assign_all(data: &EmbeddingMatrix, centroids: &EmbeddingMatrix) -> (Vec<u32>, Vec<f64>, f64) {
    let scan = NearestScan::new(centroids);
    let hits = scan.assign_rows(data);
    let mut assignments = Vec::with_capacity(data.n_rows());
    let mut dists = Vec::with_capacity(data.n_rows());
    let mut sse = 0.0f64;
    for (id, d) in hits {
        assignments.push(id);
        dists.push(d);
        sse += d;
    }
    (assignments, dists, sse)
}

fn update_means(
    data: &EmbeddingMatrix,
    assignments: &[u32],
    old: &EmbeddingMatrix,
    k: usize,
) -> (EmbeddingMatrix, Vec<u64>) {
    let dim = data.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0u64; k];
    for (row, &a) in data.rows().zip(assignments) {
        let a = a as usize;
        counts[a] += 1;
        let s = &mut sums[a * dim..(a + 1) * dim];
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    let mut values = Vec::with_capacity(k * dim);
    for c in 0..k {
        if counts[c] == 0 {
            values.extend_from_slice(old.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            values.extend(sums[c * dim..(c + 1) * dim].iter().map(|&s| (s * inv) as f32));
        }
    }
    (EmbeddingMatrix::new(k, dim, values).expect("mean shape"), counts)
}

/// Moves each empty centroid onto a distinct point that is farthest from its
/// currently assigned centroid. Returns true if any centroid moved.
fn reseed_empty(
    centroids: &mut EmbeddingMatrix,
    data: &EmbeddingMatrix,
    dists: &[f64],
    counts: &[u64],
) -> bool {
    let empties: Vec<usize> = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i).collect();
    if empties.is_empty() {
        return false;
    }
    let mut used = vec![false; data.n_rows()];
    for cluster in empties {
        let mut best = None;
        let mut best_d = -1.0f64;
        for (i, &d) in dists.iter().enumerate() {
            if !used[i] && d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            used[i] = true;
            let row: Vec<f32> = data.row(i).to_vec();
            centroids.row_mut(cluster).copy_from_slice(&row);
        }
    }
    true
}

/// Lloyd's algorithm with k-means++ seeding and farthest-point reseeding of
/// empty clusters. Deterministic for a fixed (data, cfg, seed).
pub fn lloyd_kmeans(data: &EmbeddingMatrix, cfg: &ClusterConfig) -> Result<ClusterResult> {
    cfg.validate(data.n_rows())?;
    data.validate()?;

    let mut centroids = match cfg.init {
        InitMethod::KmeansppOnSample => kmeanspp_init(data, cfg.k, cfg.seed),
        InitMethod::RandomRows => random_rows_init(data, cfg.k, cfg.seed),
    };

    let mut trace = Vec::new();
    let mut assignments;
    let mut iters_run = 0usize;
    let mut prev = f64::INFINITY;
    loop {
        let (a, dists, sse) = assign_all(data, &centroids);
        assignments = a;
        trace.push(sse);
        iters_run += 1;
        let rel = if prev.is_finite() {
            if prev > 0.0 { (prev - sse).abs() / prev } else { 0.0 }
        } else {
            f64::INFINITY
        };
        prev = sse;

        let (new_centroids, counts) = update_means(data, &assignments, &centroids, cfg.k);
        centroids = new_centroids;
        let reseeded = match cfg.empty_cluster_policy {
            EmptyClusterPolicy::ReseedFarthest => reseed_empty(&mut centroids, data, &dists, &counts),
        };

        if (rel < cfg.tol && !reseeded) || iters_run >= cfg.max_iters {
            break;
        }
    }

    // Sync assignments with the returned centroids; keep reseeding until no
    // cluster is left empty so the training corpus utilizes every codeword.
    let mut rounds = 0;
    loop {
        let (a, dists, sse) = assign_all(data, &centroids);
        assignments = a;
        trace.push(sse);
        iters_run += 1;
        let mut counts = vec![0u64; cfg.k];
        for &x in &assignments {
            counts[x as usize] += 1;
        }
        if counts.iter().all(|&c| c > 0) || rounds >= cfg.k {
            break;
        }
        reseed_empty(&mut centroids, data, &dists, &counts);
        rounds += 1;
    }

    let codebook = Codebook::new(
        centroids,
        CodebookMeta {
            seed: cfg.seed,
            source_hash: hash_matrix(data),
            iterations: iters_run as u32,
        },
    )?;
    Ok(ClusterResult { codebook, assignments, distortion_trace: trace, iters_run })
}

/// How fine centroids are allotted across coarse cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    /// k/k1 per cell, remainder to the largest cells.
    Fixed,
    /// ⌈k·|cell|/N⌉ per cell.
    Proportional,
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub codebook: Codebook,
    pub index: HierarchicalIndex,
    pub assignments: Vec<u32>,
    pub k_requested: usize,
    /// Human-readable notes on quota adjustments (undersized cells etc).
    pub notes: Vec<String>,
}

impl TwoStageResult {
    pub fn k_final(&self) -> usize {
        self.codebook.k()
    }
}

const FINE_SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

/// Two-stage construction: coarse k1-way partition, then per-cell fine
/// clustering; the union of fine centroids is the codebook. With `k1 = 1`
/// this degenerates to a single `lloyd_kmeans(data, k)` run with the same
/// seed.
pub fn two_stage_cluster(
    data: &EmbeddingMatrix,
    k: usize,
    k1: usize,
    cfg: &ClusterConfig,
    allocation: Allocation,
) -> Result<TwoStageResult> {
    if k1 > k {
        return Err(Error::InvalidConfig(format!("k1 = {k1} exceeds k = {k}")));
    }
    if k1 < 1 {
        return Err(Error::InvalidConfig("k1 must be >= 1".into()));
    }
    if k1 > data.n_rows() {
        return Err(Error::InvalidConfig(format!(
            "k1 = {} exceeds corpus size {}",
            k1,
            data.n_rows()
        )));
    }
    if k > data.n_rows() {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds corpus size {}",
            k,
            data.n_rows()
        )));
    }

    let mut notes = Vec::new();
    let coarse_cfg = ClusterConfig { k: k1, ..cfg.clone() };
    let coarse = lloyd_kmeans(data, &coarse_cfg)?;

    // Rows per coarse cell, in corpus order.
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); k1];
    for (row, &a) in coarse.assignments.iter().enumerate() {
        cells[a as usize].push(row);
    }

    let n = data.n_rows();
    let mut quotas = vec![0usize; k1];
    match allocation {
        Allocation::Fixed => {
            let base = k / k1;
            let rem = k - base * k1;
            for q in quotas.iter_mut() {
                *q = base;
            }
            if rem > 0 {
                let mut order: Vec<usize> = (0..k1).collect();
                order.sort_by_key(|&b| (std::cmp::Reverse(cells[b].len()), b));
                for &b in order.iter().take(rem) {
                    quotas[b] += 1;
                }
                notes.push(format!("k = {k} not divisible by k1 = {k1}; {rem} extra centroid(s) given to the largest cells"));
            }
        }
        Allocation::Proportional => {
            for (b, cell) in cells.iter().enumerate() {
                quotas[b] = ((k * cell.len() + n - 1) / n).max(1);
            }
        }
    }

    let dim = data.dim();
    let mut centroid_values = Vec::new();
    let mut assignments = vec![0u32; n];
    let mut buckets: Vec<Vec<u32>> = Vec::with_capacity(k1);
    let mut offset = 0u32;
    let mut total_iters = 0u32;

    for (b, cell) in cells.iter().enumerate() {
        let mut quota = quotas[b];
        if quota > cell.len() {
            notes.push(format!(
                "cell {b} has {} point(s) for a quota of {quota}; emitting one centroid per point",
                cell.len()
            ));
            quota = cell.len();
        }
        let mut sub_values = Vec::with_capacity(cell.len() * dim);
        for &row in cell {
            sub_values.extend_from_slice(data.row(row));
        }
        let sub = EmbeddingMatrix::new(cell.len(), dim, sub_values)?;
        let fine_cfg = ClusterConfig {
            k: quota,
            seed: cfg.seed.wrapping_add(FINE_SEED_STRIDE.wrapping_mul(b as u64)),
            ..cfg.clone()
        };
        let fine = lloyd_kmeans(&sub, &fine_cfg)?;
        total_iters += fine.iters_run as u32;

        centroid_values.extend_from_slice(fine.codebook.centroids().values());
        for (pos, &row) in cell.iter().enumerate() {
            assignments[row] = offset + fine.assignments[pos];
        }
        buckets.push((offset..offset + quota as u32).collect());
        offset += quota as u32;
    }

    let k_final = offset as usize;
    if k_final < k {
        notes.push(format!("k_final = {k_final} < k_requested = {k}"));
    }
    let codebook = Codebook::new(
        EmbeddingMatrix::new(k_final, dim, centroid_values)?,
        CodebookMeta {
            seed: cfg.seed,
            source_hash: hash_matrix(data),
            iterations: coarse.iters_run as u32 + total_iters,
        },
    )?;
    let index = HierarchicalIndex::new(coarse.codebook.centroids().clone(), buckets)?;
    index.check_partition(k_final)?;
    Ok(TwoStageResult { codebook, index, assignments, k_requested: k, notes })
}

/// Old id → new id, or `None` for a removed centroid.
pub type CentroidRemap = Vec<Option<u32>>;

/// Drops non-finite centroid rows and compacts, preserving order.
pub fn filter_invalid_centroids(codebook: &Codebook) -> Result<(Codebook, CentroidRemap)> {
    let dim = codebook.dim();
    let mut values = Vec::new();
    let mut remap = Vec::with_capacity(codebook.k());
    let mut next = 0u32;
    for row in codebook.centroids().rows() {
        if row.iter().all(|v| v.is_finite()) {
            values.extend_from_slice(row);
            remap.push(Some(next));
            next += 1;
        } else {
            remap.push(None);
        }
    }
    if next == 0 {
        return Err(Error::EmptyCodebook);
    }
    let filtered = Codebook::new(
        EmbeddingMatrix::new(next as usize, dim, values)?,
        codebook.metadata.clone(),
    )?;
    Ok((filtered, remap))
}

/// Applies a centroid remap to a hierarchical index, dropping removed ids.
pub fn remap_index(index: &HierarchicalIndex, remap: &CentroidRemap) -> Result<HierarchicalIndex> {
    let buckets = index
        .buckets()
        .iter()
        .map(|b| b.iter().filter_map(|&id| remap[id as usize]).collect())
        .collect();
    HierarchicalIndex::new(index.coarse_centroids().clone(), buckets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix::new(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn perfect_fit_on_k_distinct_points() {
        let data =
            EmbeddingMatrix::new(3, 2, vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0]).unwrap();
        let res = lloyd_kmeans(&data, &ClusterConfig::new(3)).unwrap();
        assert!(res.final_sse().abs() < 1e-12);
        let mut rows: Vec<Vec<f32>> =
            res.codebook.centroids().rows().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 10.0], vec![10.0, 0.0]]);
    }

    #[test]
    fn two_points_one_centroid() {
        let data = EmbeddingMatrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        let res = lloyd_kmeans(&data, &ClusterConfig::new(1)).unwrap();
        assert!((res.codebook.centroid(0)[0] - 1.0).abs() < 1e-7);
        assert!((res.final_sse() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_lloyd_reference() {
        // Independent straightforward Lloyd with the same init and iteration
        // count; no tolerance stop, no empty clusters expected.
        let data = random_matrix(200, 4, 11);
        let cfg = ClusterConfig::new(8).with_iters(25).with_tol(0.0).with_seed(3);
        let res = lloyd_kmeans(&data, &cfg).unwrap();

        let mut centroids = kmeanspp_init(&data, 8, 3);
        let mut sse = 0.0;
        for _ in 0..25 {
            // assign
            let mut assign = vec![0usize; data.n_rows()];
            sse = 0.0;
            for (i, row) in data.rows().enumerate() {
                let mut best = f64::INFINITY;
                for c in 0..8 {
                    let d = sq_dist(row, centroids.row(c));
                    if d < best {
                        best = d;
                        assign[i] = c;
                    }
                }
                sse += best;
            }
            // update
            let mut sums = vec![0.0f64; 8 * 4];
            let mut counts = vec![0u64; 8];
            for (i, row) in data.rows().enumerate() {
                counts[assign[i]] += 1;
                for (j, &v) in row.iter().enumerate() {
                    sums[assign[i] * 4 + j] += v as f64;
                }
            }
            for c in 0..8 {
                assert!(counts[c] > 0, "reference run hit an empty cluster");
                for j in 0..4 {
                    centroids.row_mut(c)[j] = (sums[c * 4 + j] / counts[c] as f64) as f32;
                }
            }
        }
        // Final assignment cost of the reference centroids.
        let mut final_sse = 0.0;
        for row in data.rows() {
            let mut best = f64::INFINITY;
            for c in 0..8 {
                best = best.min(sq_dist(row, centroids.row(c)));
            }
            final_sse += best;
        }
        let _ = sse;
        let rel = (res.final_sse() - final_sse).abs() / final_sse;
        assert!(rel < 1e-9, "impl {} vs reference {}", res.final_sse(), final_sse);
    }

    #[test]
    fn trace_is_monotone_nonincreasing() {
        let data = random_matrix(500, 6, 42);
        let res = lloyd_kmeans(&data, &ClusterConfig::new(16).with_seed(1)).unwrap();
        let slack = 1e-9 * res.distortion_trace[0];
        for w in res.distortion_trace.windows(2) {
            assert!(w[1] <= w[0] + slack, "trace increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let data = random_matrix(300, 5, 9);
        let cfg = ClusterConfig::new(12).with_seed(77);
        let a = lloyd_kmeans(&data, &cfg).unwrap();
        let b = lloyd_kmeans(&data, &cfg).unwrap();
        assert_eq!(a.codebook.centroids(), b.codebook.centroids());
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn no_empty_clusters_at_termination() {
        let data = random_matrix(400, 3, 5);
        let res = lloyd_kmeans(&data, &ClusterConfig::new(32).with_seed(2)).unwrap();
        let mut counts = vec![0u64; 32];
        for &a in &res.assignments {
            counts[a as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn k_larger_than_corpus_is_invalid() {
        let data = random_matrix(8, 2, 0);
        assert!(matches!(
            lloyd_kmeans(&data, &ClusterConfig::new(10)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn non_finite_data_is_rejected() {
        let data = EmbeddingMatrix::new(2, 2, vec![0.0, f32::NAN, 1.0, 1.0]).unwrap();
        assert!(matches!(
            lloyd_kmeans(&data, &ClusterConfig::new(1)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn degenerate_hierarchy_equals_single_stage() {
        let data = random_matrix(250, 4, 13);
        let cfg = ClusterConfig::new(10).with_seed(5);
        let flat = lloyd_kmeans(&data, &cfg).unwrap();
        let two = two_stage_cluster(&data, 10, 1, &cfg, Allocation::Fixed).unwrap();
        assert_eq!(two.codebook.centroids(), flat.codebook.centroids());
        assert_eq!(two.assignments, flat.assignments);
    }

    #[test]
    fn two_stage_buckets_partition_ids() {
        let data = random_matrix(600, 4, 21);
        let cfg = ClusterConfig::new(24).with_seed(8);
        let res = two_stage_cluster(&data, 24, 4, &cfg, Allocation::Fixed).unwrap();
        res.index.check_partition(res.k_final()).unwrap();
        let mut all: Vec<u32> = res.index.buckets().iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..res.k_final() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_allocation_distributes_remainder_to_largest_cells() {
        let data = random_matrix(900, 3, 17);
        let cfg = ClusterConfig::new(10).with_seed(4);
        let res = two_stage_cluster(&data, 10, 3, &cfg, Allocation::Fixed).unwrap();
        assert_eq!(res.k_final(), 10);
        let mut sizes: Vec<usize> = res.index.buckets().iter().map(|b| b.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert!(!res.notes.is_empty());
    }

    #[test]
    fn filter_removes_nan_row_and_remaps() {
        let mut values = vec![1.0f32; 4 * 2];
        values[2 * 2] = f32::NAN;
        let cb = Codebook::new(
            EmbeddingMatrix::new(4, 2, values).unwrap(),
            CodebookMeta::default(),
        )
        .unwrap();
        let (filtered, remap) = filter_invalid_centroids(&cb).unwrap();
        assert_eq!(filtered.k(), 3);
        assert_eq!(remap, vec![Some(0), Some(1), None, Some(2)]);
    }

    #[test]
    fn filter_is_identity_on_clean_codebook_and_idempotent() {
        let cb = Codebook::new(
            EmbeddingMatrix::new(3, 2, vec![1.0; 6]).unwrap(),
            CodebookMeta::default(),
        )
        .unwrap();
        let (once, remap) = filter_invalid_centroids(&cb).unwrap();
        assert_eq!(once.centroids(), cb.centroids());
        assert_eq!(remap, vec![Some(0), Some(1), Some(2)]);
        let (twice, remap2) = filter_invalid_centroids(&once).unwrap();
        assert_eq!(twice.centroids(), once.centroids());
        assert_eq!(remap2, remap);
    }

    #[test]
    fn filter_all_invalid_errors() {
        let cb = Codebook::new(
            EmbeddingMatrix::new(2, 1, vec![f32::NAN, f32::INFINITY]).unwrap(),
            CodebookMeta::default(),
        )
        .unwrap();
        assert!(matches!(filter_invalid_centroids(&cb), Err(Error::EmptyCodebook)));
    }
}
