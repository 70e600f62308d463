//! Codebook-quality functionals: utilization, assignment entropy,
//! distortion and its usage-weighted decomposition, the regularized
//! objectives, a plug-in mutual-information estimate, and the
//! rate-distortion scan.
//!
//! Entropies are in nats. All reductions accumulate in f64 over immutable
//! inputs.

use std::collections::HashMap;

use crate::cluster::{lloyd_kmeans, ClusterConfig};
use crate::dist::sq_dist;
use crate::error::{Error, Result};
use crate::types::{AssignmentHistogram, Codebook, EmbeddingMatrix, TokenSequence};

/// Fraction of codewords assigned at least once.
pub fn utilization(h: &AssignmentHistogram) -> Result<f64> {
    if h.k() == 0 {
        return Err(Error::EmptyHistogram);
    }
    let active = h.counts().iter().filter(|&&c| c > 0).count();
    Ok(active as f64 / h.k() as f64)
}

/// Shannon entropy of the assignment distribution, in nats.
pub fn assignment_entropy(h: &AssignmentHistogram) -> Result<f64> {
    if h.total() == 0 {
        return Err(Error::UndefinedEntropy);
    }
    let total = h.total() as f64;
    let mut entropy = 0.0;
    for &c in h.counts() {
        if c > 0 {
            let q = c as f64 / total;
            entropy -= q * q.ln();
        }
    }
    Ok(entropy)
}

/// Mean squared distortion with its per-cluster decomposition.
#[derive(Debug, Clone)]
pub struct DistortionReport {
    /// Mean squared distance to the assigned centroid.
    pub total: f64,
    /// Per codeword: (q(k), mean squared error of its members). Empty
    /// clusters report (0, 0).
    pub per_cluster: Vec<(f64, f64)>,
    /// (1/K)·Σ_k Var_k with Var_k about the cluster mean. Reported as a
    /// diagnostic; not asserted as a bound (it can fail for non-uniform q).
    pub variance_bound: f64,
    /// True when total < variance_bound beyond rounding.
    pub bound_violated: bool,
}

pub fn quantization_distortion(
    data: &EmbeddingMatrix,
    codebook: &Codebook,
    assignments: &[u32],
) -> Result<DistortionReport> {
    if assignments.len() != data.n_rows() {
        return Err(Error::LengthMismatch(format!(
            "{} assignments for {} rows",
            assignments.len(),
            data.n_rows()
        )));
    }
    if data.dim() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "data dim {} vs codebook dim {}",
            data.dim(),
            codebook.dim()
        )));
    }
    let k = codebook.k();
    let dim = data.dim();
    let n = data.n_rows();

    let mut sse_per = vec![0.0f64; k];
    let mut counts = vec![0u64; k];
    let mut sums = vec![0.0f64; k * dim];
    for (row, &a) in data.rows().zip(assignments) {
        let a = a as usize;
        if a >= k {
            return Err(Error::OutOfVocabulary { token: a as u32, k });
        }
        sse_per[a] += sq_dist(row, codebook.centroid(a as u32));
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row) {
            *s += v as f64;
        }
    }

    let mut per_cluster = Vec::with_capacity(k);
    let mut var_sum = 0.0f64;
    for c in 0..k {
        if counts[c] == 0 {
            per_cluster.push((0.0, 0.0));
            continue;
        }
        let q = counts[c] as f64 / n as f64;
        per_cluster.push((q, sse_per[c] / counts[c] as f64));
    }
    // Intra-cluster variance about the mean, for the diagnostic bound.
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        let mean: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|&s| s * inv).collect();
        let mut var = 0.0f64;
        for (row, &a) in data.rows().zip(assignments) {
            if a as usize == c {
                var += row.iter().zip(&mean).map(|(&x, m)| (x as f64 - m) * (x as f64 - m)).sum::<f64>();
            }
        }
        var_sum += var * inv;
    }
    let total = sse_per.iter().sum::<f64>() / n as f64;
    let variance_bound = var_sum / k as f64;
    Ok(DistortionReport {
        total,
        per_cluster,
        variance_bound,
        bound_violated: total < variance_bound - 1e-9 * variance_bound.abs(),
    })
}

/// Weights of the combined codebook objectives.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParams {
    pub lambda: f64,
    pub beta: f64,
    pub tau_temp: f64,
}

impl ObjectiveParams {
    pub fn new(lambda: f64, beta: f64, tau_temp: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidConfig("lambda and beta must be >= 0".into()));
        }
        if !(tau_temp > 0.0) {
            return Err(Error::InvalidConfig("tau_temp must be > 0".into()));
        }
        Ok(Self { lambda, beta, tau_temp })
    }
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self { lambda: 1.0, beta: 1.0, tau_temp: 0.07 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CodebookObjective {
    pub total: f64,
    /// Unnormalized SSE of embeddings to their assigned centroids.
    pub alignment_term: f64,
    /// Spread of centroids around their common mean.
    pub utilization_term: f64,
}

/// Alignment SSE plus λ times the centroid-spread term.
pub fn codebook_objective(
    data: &EmbeddingMatrix,
    codebook: &Codebook,
    assignments: &[u32],
    lambda: f64,
) -> Result<CodebookObjective> {
    if assignments.len() != data.n_rows() {
        return Err(Error::LengthMismatch(format!(
            "{} assignments for {} rows",
            assignments.len(),
            data.n_rows()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let k = codebook.k();
    let dim = codebook.dim();
    let mut alignment = 0.0f64;
    for (row, &a) in data.rows().zip(assignments) {
        if a as usize >= k {
            return Err(Error::OutOfVocabulary { token: a, k });
        }
        alignment += sq_dist(row, codebook.centroid(a));
    }
    let mut mean = vec![0.0f64; dim];
    for c in codebook.centroids().rows() {
        for (m, &v) in mean.iter_mut().zip(c) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= k as f64;
    }
    let mut spread = 0.0f64;
    for c in codebook.centroids().rows() {
        spread += c.iter().zip(&mean).map(|(&x, m)| (x as f64 - m) * (x as f64 - m)).sum::<f64>();
    }
    Ok(CodebookObjective {
        total: alignment + lambda * spread,
        alignment_term: alignment,
        utilization_term: spread,
    })
}

/// Entropy-regularized quantization loss: distortion − β·entropy.
pub fn regularized_loss(distortion: f64, entropy: f64, beta: f64) -> f64 {
    distortion - beta * entropy
}

/// Plug-in mutual information between tokens and labels from the empirical
/// joint. Returns (Î(y;v), H(v)); Î ≤ H(v) holds by construction.
pub fn mutual_information_estimate(
    tokens: &TokenSequence,
    labels: &[u32],
) -> Result<(f64, f64)> {
    if tokens.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} tokens vs {} labels",
            tokens.len(),
            labels.len()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = tokens.len() as f64;
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut v_counts: HashMap<u32, u64> = HashMap::new();
    let mut y_counts: HashMap<u32, u64> = HashMap::new();
    for (&v, &y) in tokens.tokens().iter().zip(labels) {
        *joint.entry((v, y)).or_insert(0) += 1;
        *v_counts.entry(v).or_insert(0) += 1;
        *y_counts.entry(y).or_insert(0) += 1;
    }
    let entropy = |counts: &HashMap<_, u64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_v = entropy(&v_counts);
    let h_y = entropy(&y_counts);
    let h_vy: f64 = joint
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    let i_hat = (h_v + h_y - h_vy).max(0.0);
    Ok((i_hat, h_v))
}

#[derive(Debug, Clone)]
pub struct RdScan {
    /// (K, mean distortion) per requested codebook size.
    pub points: Vec<(usize, f64)>,
    /// Least-squares slope of ln D vs ln K; `None` when degenerate (some
    /// D = 0).
    pub slope: Option<f64>,
    pub degenerate: bool,
}

/// Clusters at each K and fits the log-log distortion slope. On smooth
/// d-dimensional data the ideal slope is −2/d.
pub fn rate_distortion_scan(
    data: &EmbeddingMatrix,
    k_values: &[usize],
    cfg: &ClusterConfig,
) -> Result<RdScan> {
    if k_values.is_empty() {
        return Err(Error::InvalidConfig("k_values must be nonempty".into()));
    }
    for w in k_values.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidConfig("k_values must be strictly increasing".into()));
        }
    }
    if *k_values.last().unwrap() > data.n_rows() {
        return Err(Error::InvalidConfig(format!(
            "largest K = {} exceeds corpus size {}",
            k_values.last().unwrap(),
            data.n_rows()
        )));
    }
    let n = data.n_rows() as f64;
    let mut points = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let res = lloyd_kmeans(data, &ClusterConfig { k, ..cfg.clone() })?;
        points.push((k, res.final_sse() / n));
    }
    let degenerate = points.iter().any(|&(_, d)| d <= 0.0);
    let slope = if degenerate {
        None
    } else {
        // least squares on (ln K, ln D)
        let m = points.len() as f64;
        let xs: Vec<f64> = points.iter().map(|&(k, _)| (k as f64).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|&(_, d)| d.ln()).collect();
        let mx = xs.iter().sum::<f64>() / m;
        let my = ys.iter().sum::<f64>() / m;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        if den > 0.0 {
            Some(num / den)
        } else {
            None
        }
    };
    Ok(RdScan { points, slope, degenerate })
}
