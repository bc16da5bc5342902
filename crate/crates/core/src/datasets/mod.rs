//! Benchmark dataset ingestion, the cache container, and synthetic
//! union-of-subspaces fixtures.
//!
//! All loaders emit grayscale intensities scaled to `[0, 1]`, one flattened
//! image per column, with labels renumbered to `0..K`. Clustering here is
//! transductive: there are no train/test splits, every sample participates.

mod cache;
mod loaders;

pub use cache::{load_cache, save_cache};
pub use loaders::{load_coil, load_orl, load_yaleb, CoilVariant};

use ndarray::{Array2, Array4};
use ndarray_linalg::QR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dataset held in memory: the `d x n` feature matrix, per-column labels,
/// and the image geometry of each column.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// `d x n`, one flattened sample per column in channel-major
    /// `(c, h, w)` order.
    pub x: Array2<f64>,
    /// Length `n`, values in `[0, K)`.
    pub labels: Vec<usize>,
    /// `(height, width, channels)`.
    pub image_shape: (usize, usize, usize),
    pub name: String,
    pub k: usize,
}

impl SampleSet {
    pub fn new(
        x: Array2<f64>,
        labels: Vec<usize>,
        image_shape: (usize, usize, usize),
        name: String,
        k: usize,
    ) -> Result<Self> {
        let set = Self {
            x,
            labels,
            image_shape,
            name,
            k,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        let (d, n) = self.x.dim();
        if d != h * w * c {
            return Err(Error::Shape(format!(
                "feature dimension {d} does not match image shape {h}x{w}x{c}"
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} samples",
                self.labels.len()
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        let mut seen = vec![false; self.k];
        for (i, &label) in self.labels.iter().enumerate() {
            if label >= self.k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} at column {i} out of range for K={}",
                    self.k
                )));
            }
            seen[label] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidArgument(format!(
                "labels do not cover all {} classes",
                self.k
            )));
        }
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in sample matrix".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Per-class sample counts, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &label in &self.labels {
            counts[label] += 1;
        }
        counts
    }

    /// `(n, c, h, w)` tensor view of the columns, suitable for the encoder.
    pub fn tensor(&self) -> Array4<f64> {
        let (h, w, c) = self.image_shape;
        let n = self.n();
        self.x
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, h, w))
            .expect("dimensions validated at construction")
    }

    /// Restricts the set to the given classes (relabeled consecutively in
    /// the order supplied). Columns keep their relative order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<SampleSet> {
        for &cls in classes {
            if cls >= self.k {
                return Err(Error::InvalidArgument(format!(
                    "class {cls} out of range for K={}",
                    self.k
                )));
            }
        }
        let remap: std::collections::HashMap<usize, usize> = classes
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let cols: Vec<usize> = (0..self.n())
            .filter(|&i| remap.contains_key(&self.labels[i]))
            .collect();
        let mut x = Array2::zeros((self.dim(), cols.len()));
        let mut labels = Vec::with_capacity(cols.len());
        for (dst, &src) in cols.iter().enumerate() {
            x.column_mut(dst).assign(&self.x.column(src));
            labels.push(remap[&self.labels[src]]);
        }
        SampleSet::new(
            x,
            labels,
            self.image_shape,
            format!("{}-sel{}", self.name, classes.len()),
            classes.len(),
        )
    }
}

/// Asserts the loader contract that every pixel sits in `[0, 1]`.
pub(crate) fn check_pixel_range(x: &Array2<f64>, name: &str) -> Result<()> {
    for &v in x.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Numerical(format!(
                "{name}: pixel value {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Parameters of the synthetic union-of-subspaces generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub k: usize,
    pub ambient_dim: usize,
    pub subspace_dim: usize,
    pub points_per_subspace: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("need at least one subspace".into()));
        }
        if self.subspace_dim == 0 || self.subspace_dim >= self.ambient_dim {
            return Err(Error::InvalidArgument(format!(
                "subspace dimension {} must sit in (0, {})",
                self.subspace_dim, self.ambient_dim
            )));
        }
        if self.points_per_subspace < self.subspace_dim + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least {} points per subspace, got {}",
                self.subspace_dim + 1,
                self.points_per_subspace
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Factors `d` into `(h, w)` with `h >= w` and `h*w = d`, as close to
/// square as possible; primes degrade to `(d, 1)`.
fn image_factorization(d: usize) -> (usize, usize) {
    let mut w = (d as f64).sqrt() as usize;
    while w > 1 && d % w != 0 {
        w -= 1;
    }
    (d / w.max(1), w.max(1))
}

/// Draws `K` random orthonormal subspace bases, samples unit-coefficient
/// points from each, adds isotropic noise, and normalizes every column to
/// unit l2 norm. Deterministic in the seed.
pub fn synth_union_of_subspaces(spec: &SyntheticSpec) -> Result<SampleSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.ambient_dim;
    let per = spec.points_per_subspace;
    let n = spec.k * per;
    let mut x = Array2::<f64>::zeros((d, n));
    let mut labels = Vec::with_capacity(n);

    for subspace in 0..spec.k {
        let gaussian =
            Array2::from_shape_fn((d, spec.subspace_dim), |_| rng.sample::<f64, _>(StandardNormal));
        let (basis, _) = gaussian
            .qr()
            .map_err(|e| Error::Numerical(format!("QR factorization failed: {e}")))?;
        for p in 0..per {
            let mut coef: Vec<f64> = (0..spec.subspace_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = coef.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut coef {
                    *v /= norm;
                }
            }
            let col = n_col(subspace, per, p);
            let mut point = basis.dot(&ndarray::Array1::from_vec(coef));
            if spec.noise_sigma > 0.0 {
                for v in point.iter_mut() {
                    *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                point.mapv_inplace(|v| v / norm);
            }
            x.column_mut(col).assign(&point);
            labels.push(subspace);
        }
    }

    let (h, w) = image_factorization(d);
    SampleSet::new(
        x,
        labels,
        (h, w, 1),
        format!(
            "synthetic-k{}-d{}-p{}-seed{}",
            spec.k, spec.subspace_dim, per, spec.seed
        ),
        spec.k,
    )
}

fn n_col(subspace: usize, per: usize, p: usize) -> usize {
    subspace * per + p
}
