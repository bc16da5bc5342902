//! Affinity construction, normalized spectral clustering, and scoring.
//!
//! The affinity averages the distinctive matrices into the consistency
//! matrix and symmetrizes: `W = (|M| + |M^T|) / 2` with
//! `M = C + (1/L) sum_l D^l`. Clustering follows the normalized-embedding
//! recipe: scale by inverse square-root degrees (regularized, so isolated
//! vertices never divide by zero), take the top-K eigenvectors, fix signs,
//! row-normalize, and run seeded k-means with 20 restarts.

mod assignment;
mod kmeans;

use ndarray::Array2;
use ndarray_linalg::{Eigh, UPLO};

use crate::datasets::SampleSet;
use crate::error::{Error, Result};
use crate::selfexpress::{MembershipMatrix, SelfExpressionParams};

/// Symmetric nonnegative pairwise-similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    pub w: Array2<f64>,
}

impl Affinity {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Wraps the affinity in the dataset cache container so heatmaps and
    /// external tools can reuse the same file format. Rows are "features",
    /// columns samples; labels are the clustering if available.
    pub fn to_sample_set(&self, name: &str, labels: Option<&[usize]>) -> Result<SampleSet> {
        let n = self.n();
        let (labels, k) = match labels {
            Some(l) => {
                let k = l.iter().copied().max().map(|m| m + 1).unwrap_or(1);
                (l.to_vec(), k)
            }
            None => (vec![0usize; n], 1),
        };
        SampleSet::new(self.w.clone(), labels, (n, 1, 1), name.to_string(), k)
    }
}

/// Result of one spectral clustering run.
#[derive(Debug, Clone)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    pub q: MembershipMatrix,
    pub seed: u64,
    /// Set when the affinity was identically zero, in which case the
    /// labeling is arbitrary (but still deterministic).
    pub degenerate: bool,
}

/// `W = (|M| + |M^T|)/2` with `M = C + (1/L) sum_l D^l`. Exactly symmetric
/// and entrywise nonnegative by construction.
pub fn build_affinity(params: &SelfExpressionParams) -> Affinity {
    let n = params.n();
    let levels = params.levels().max(1) as f64;
    let mut m = params.c.clone();
    for d in &params.d {
        m.scaled_add(1.0 / levels, d);
    }
    let mut w = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = (m[[i, j]].abs() + m[[j, i]].abs()) / 2.0;
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    Affinity { w }
}

const DEGREE_EPSILON: f64 = 1e-10;
const KMEANS_RESTARTS: usize = 20;

/// Normalized spectral clustering with deterministic seeding.
pub fn spectral_cluster(aff: &Affinity, k: usize, seed: u64) -> Result<ClusteringResult> {
    let n = aff.n();
    if aff.w.ncols() != n {
        return Err(Error::Shape(format!(
            "affinity must be square, got {}x{}",
            n,
            aff.w.ncols()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 clusters, got {k}"
        )));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples into {k} clusters"
        )));
    }

    let degenerate = aff.w.iter().all(|&v| v == 0.0);

    // Degree-regularized symmetric normalization.
    let scale: Vec<f64> = aff
        .w
        .rows()
        .into_iter()
        .map(|row| 1.0 / (row.sum() + DEGREE_EPSILON).sqrt())
        .collect();
    let mut s = aff.w.clone();
    for ((i, j), v) in s.indexed_iter_mut() {
        *v *= scale[i] * scale[j];
    }

    let (_, vecs) = s
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e}")))?;
    // Eigenvalues ascend; the embedding takes the top-k columns in
    // descending order.
    let mut embedding = Array2::<f64>::zeros((n, k));
    for c in 0..k {
        let src = vecs.column(n - 1 - c);
        // Fix the sign so the largest-magnitude component is positive.
        let mut pivot = 0usize;
        let mut pivot_abs = -1.0;
        for (i, &v) in src.iter().enumerate() {
            if v.abs() > pivot_abs {
                pivot_abs = v.abs();
                pivot = i;
            }
        }
        let flip = if src[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            embedding[[i, c]] = src[i] * flip;
        }
    }
    // Row normalization; all-zero rows stay zero.
    for mut row in embedding.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }

    let outcome = kmeans::cluster(&embedding, k, seed, KMEANS_RESTARTS);
    let q = MembershipMatrix::from_labels(&outcome.labels, k)?;
    Ok(ClusteringResult {
        labels: outcome.labels,
        q,
        seed,
        degenerate,
    })
}

/// One-hot membership matrix from labels in `[0, k)`.
pub fn labels_to_membership(labels: &[usize], k: usize) -> Result<MembershipMatrix> {
    MembershipMatrix::from_labels(labels, k)
}

/// Percentage of misclustered samples under the best cluster-to-class
/// matching (maximum-weight assignment on the confusion matrix).
pub fn clustering_error(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Shape(format!(
            "label vectors differ in length: {} vs {}",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::InvalidArgument("empty label vectors".into()));
    }
    let n = true_labels.len();
    let k = true_labels
        .iter()
        .chain(pred_labels.iter())
        .copied()
        .max()
        .unwrap()
        + 1;
    let mut confusion = Array2::<f64>::zeros((k, k));
    for (&t, &p) in true_labels.iter().zip(pred_labels.iter()) {
        confusion[[t, p]] += 1.0;
    }
    // Maximize matched count == minimize negated counts.
    let cost = confusion.mapv(|v| -v);
    let assign = assignment::solve(&cost);
    let matched: f64 = (0..k).map(|t| confusion[[t, assign[t]]]).sum();
    Ok(100.0 * (1.0 - matched / n as f64))
}
