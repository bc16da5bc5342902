//! Connection-layer parameters and every term of the training objective.
//!
//! Each connection layer multiplies the flattened level features `Z^l`
//! (a `d_l x n` matrix) by `C + D^l`, where `C` is shared across levels and
//! `D^l` is level-specific. The trivial solution is excluded by keeping the
//! diagonals of both `C` and every `D^l` at zero, which implies the weaker
//! constraint `diag(C + D^l) = 0`.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Shared consistency matrix plus the per-level distinctive matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfExpressionParams {
    /// Consistency matrix, `n x n`, shared by all connection layers.
    pub c: Array2<f64>,
    /// Distinctive matrices, one `n x n` matrix per connection layer.
    pub d: Vec<Array2<f64>>,
}

impl SelfExpressionParams {
    pub fn new(c: Array2<f64>, d: Vec<Array2<f64>>) -> Result<Self> {
        let n = c.nrows();
        if c.ncols() != n {
            return Err(Error::Shape(format!(
                "consistency matrix must be square, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        for (l, dl) in d.iter().enumerate() {
            if dl.dim() != (n, n) {
                return Err(Error::Shape(format!(
                    "distinctive matrix for level {} is {}x{}, expected {}x{}",
                    l + 1,
                    dl.nrows(),
                    dl.ncols(),
                    n,
                    n
                )));
            }
        }
        Ok(Self { c, d })
    }

    /// All entries set to 1e-4, then diagonal-masked.
    pub fn init(n: usize, levels: usize) -> Self {
        let c = Array2::from_elem((n, n), 1e-4);
        let d = vec![Array2::from_elem((n, n), 1e-4); levels];
        let mut params = Self { c, d };
        params.mask_diagonal();
        params
    }

    /// Like [`SelfExpressionParams::init`] but with every `D^l` held at zero
    /// (single-connection ablations freeze the distinctive matrices).
    pub fn init_zero_d(n: usize, levels: usize) -> Self {
        let c = Array2::from_elem((n, n), 1e-4);
        let d = vec![Array2::zeros((n, n)); levels];
        let mut params = Self { c, d };
        params.mask_diagonal();
        params
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    /// Number of connection layers.
    pub fn levels(&self) -> usize {
        self.d.len()
    }

    /// Zeroes the diagonal of `C` and of every `D^l` in place. Off-diagonal
    /// entries are untouched; idempotent.
    pub fn mask_diagonal(&mut self) {
        self.c.diag_mut().fill(0.0);
        for dl in &mut self.d {
            dl.diag_mut().fill(0.0);
        }
    }

    /// Consuming variant of [`SelfExpressionParams::mask_diagonal`].
    pub fn masked(mut self) -> Self {
        self.mask_diagonal();
        self
    }

    /// `C + D^level` with the diagonal forced to zero. `level` is 1-based.
    pub fn connection(&self, level: usize) -> Result<Array2<f64>> {
        if level == 0 || level > self.levels() {
            return Err(Error::InvalidArgument(format!(
                "connection level {} out of range 1..={}",
                level,
                self.levels()
            )));
        }
        let mut a = &self.c + &self.d[level - 1];
        a.diag_mut().fill(0.0);
        Ok(a)
    }
}

/// Pseudo-label membership matrix `Q`, `n x K`. Either all-zero (before any
/// clustering has run) or every row one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    q: Array2<f64>,
}

impl MembershipMatrix {
    /// The pre-clustering state: an all-zero `n x K` matrix.
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            q: Array2::zeros((n, k)),
        }
    }

    /// Builds a one-hot membership matrix from labels in `[0, k)`.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut q = Array2::zeros((labels.len(), k));
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} at row {i} out of range for K={k}"
                )));
            }
            q[[i, label]] = 1.0;
        }
        Ok(Self { q })
    }

    /// Wraps an existing matrix, checking the zero-or-one-hot row invariant.
    pub fn from_matrix(q: Array2<f64>) -> Result<Self> {
        let zero = q.iter().all(|&v| v == 0.0);
        if !zero {
            for (i, row) in q.rows().into_iter().enumerate() {
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(Error::InvalidArgument(format!(
                        "membership row {i} is neither zero nor one-hot"
                    )));
                }
            }
        }
        Ok(Self { q })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn k(&self) -> usize {
        self.q.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.q.iter().all(|&v| v == 0.0)
    }

    /// Per-row sums: 1.0 for assigned samples, 0.0 before clustering.
    pub fn row_weights(&self) -> Array1<f64> {
        self.q.sum_axis(ndarray::Axis(1))
    }

    /// Argmax of each row; only meaningful for one-hot matrices.
    pub fn labels(&self) -> Vec<usize> {
        self.q
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Weights balancing the objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        if !(lambda1 > 0.0 && lambda2 > 0.0 && lambda3 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be strictly positive, got ({lambda1}, {lambda2}, {lambda3})"
            )));
        }
        Ok(Self {
            lambda1,
            lambda2,
            lambda3,
        })
    }
}

/// The objective split into its terms. `total` is always
/// `recon + lambda1*exp + lambda2*lc + lambda3*ld` in that accumulation
/// order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub exp: f64,
    pub lc: f64,
    pub ld: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(recon: f64, exp: f64, lc: f64, ld: f64, w: &LossWeights) -> Self {
        let total = recon + w.lambda1 * exp + w.lambda2 * lc + w.lambda3 * ld;
        Self {
            recon,
            exp,
            lc,
            ld,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Which regularizer acts on the consistency matrix.
///
/// `MembershipL1` is the pseudo-label-weighted default. `PlainL1` and
/// `SquaredFrobenius` are the single-matrix ablation choices, and
/// `GroupedL2` is an experimental aggregation (per-column l2 over clusters,
/// then summed) kept behind configuration because the membership form
/// collapses to the plain l1 norm once every row of `Q` is one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CRegularizer {
    MembershipL1,
    PlainL1,
    SquaredFrobenius,
    GroupedL2,
}

impl CRegularizer {
    pub fn name(&self) -> &'static str {
        match self {
            CRegularizer::MembershipL1 => "membership-l1",
            CRegularizer::PlainL1 => "plain-l1",
            CRegularizer::SquaredFrobenius => "squared-frobenius",
            CRegularizer::GroupedL2 => "grouped-l2",
        }
    }
}

/// Sum of squares of all entries, accumulated in row-major order.
pub fn frobenius_sq(a: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for &v in a.iter() {
        acc += v * v;
    }
    acc
}

/// Applies the connection layer `level` to flattened features:
/// returns `Z * (C + D^level)` with the diagonal of the sum masked to zero.
pub fn apply_self_expression(
    z: &Array2<f64>,
    params: &SelfExpressionParams,
    level: usize,
) -> Result<Array2<f64>> {
    let a = params.connection(level)?;
    if z.ncols() != params.n() {
        return Err(Error::Shape(format!(
            "level {level}: features have {} columns but connection matrices are {}x{}",
            z.ncols(),
            params.n(),
            params.n()
        )));
    }
    Ok(z.dot(&a))
}

/// Self-expression loss: `sum_l ||Z^l - Z^l (C + D^l)||_F^2`.
pub fn loss_exp(z_levels: &[Array2<f64>], params: &SelfExpressionParams) -> Result<f64> {
    if z_levels.len() != params.levels() {
        return Err(Error::Shape(format!(
            "got {} feature levels but parameters hold {} connection layers",
            z_levels.len(),
            params.levels()
        )));
    }
    let mut acc = 0.0;
    for (idx, z) in z_levels.iter().enumerate() {
        let modified = apply_self_expression(z, params, idx + 1)?;
        let residual = z - &modified;
        acc += frobenius_sq(&residual);
    }
    Ok(acc)
}

/// Membership regularizer on `C`: the sum of absolute values of all entries
/// of `Q^T |C|`. Zero while `Q` is the all-zero pre-clustering matrix.
pub fn loss_c(q: &MembershipMatrix, c: &Array2<f64>) -> Result<f64> {
    loss_c_regularized(CRegularizer::MembershipL1, q, c)
}

/// [`loss_c`] generalized over the configured regularizer.
pub fn loss_c_regularized(
    reg: CRegularizer,
    q: &MembershipMatrix,
    c: &Array2<f64>,
) -> Result<f64> {
    if q.n() != c.nrows() || c.nrows() != c.ncols() {
        return Err(Error::Shape(format!(
            "membership matrix has {} rows but C is {}x{}",
            q.n(),
            c.nrows(),
            c.ncols()
        )));
    }
    match reg {
        CRegularizer::MembershipL1 => {
            let abs_c = c.mapv(f64::abs);
            let product = q.matrix().t().dot(&abs_c);
            Ok(product.iter().map(|v| v.abs()).sum())
        }
        CRegularizer::PlainL1 => Ok(c.iter().map(|v| v.abs()).sum()),
        CRegularizer::SquaredFrobenius => Ok(frobenius_sq(c)),
        CRegularizer::GroupedL2 => {
            let abs_c = c.mapv(f64::abs);
            let product = q.matrix().t().dot(&abs_c);
            let mut acc = 0.0;
            for col in product.columns() {
                acc += col.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            Ok(acc)
        }
    }
}

/// Subgradient of [`loss_c_regularized`] with respect to `C`. Uses the
/// convention `sign(0) = 0`, which keeps exact zeros stable.
pub fn loss_c_grad(
    reg: CRegularizer,
    q: &MembershipMatrix,
    c: &Array2<f64>,
) -> Result<Array2<f64>> {
    if q.n() != c.nrows() || c.nrows() != c.ncols() {
        return Err(Error::Shape(format!(
            "membership matrix has {} rows but C is {}x{}",
            q.n(),
            c.nrows(),
            c.ncols()
        )));
    }
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    match reg {
        CRegularizer::MembershipL1 => {
            let weights = q.row_weights();
            let mut g = c.mapv(sign);
            for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v * weights[i]);
            }
            Ok(g)
        }
        CRegularizer::PlainL1 => Ok(c.mapv(sign)),
        CRegularizer::SquaredFrobenius => Ok(c.mapv(|v| 2.0 * v)),
        CRegularizer::GroupedL2 => {
            let abs_c = c.mapv(f64::abs);
            let product = q.matrix().t().dot(&abs_c); // K x n
            let col_norms: Vec<f64> = product
                .columns()
                .into_iter()
                .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            // q.dot(product) has entry (i, j) = sum_k Q[i,k] P[k,j].
            let weighted = q.matrix().dot(&product);
            let mut g = Array2::zeros(c.raw_dim());
            for ((i, j), out) in g.indexed_iter_mut() {
                if col_norms[j] > 0.0 {
                    *out = sign(c[[i, j]]) * weighted[[i, j]] / col_norms[j];
                }
            }
            Ok(g)
        }
    }
}

/// Connectivity regularizer: `sum_l ||D^l||_F^2`.
pub fn loss_d(params: &SelfExpressionParams) -> f64 {
    params.d.iter().map(frobenius_sq).sum()
}

/// Full objective on flattened inputs/reconstructions.
pub fn total_loss(
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    z_levels: &[Array2<f64>],
    params: &SelfExpressionParams,
    q: &MembershipMatrix,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    total_loss_regularized(CRegularizer::MembershipL1, x, x_hat, z_levels, params, q, w)
}

/// [`total_loss`] with a configurable `C` regularizer.
pub fn total_loss_regularized(
    reg: CRegularizer,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
    z_levels: &[Array2<f64>],
    params: &SelfExpressionParams,
    q: &MembershipMatrix,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "input is {:?} but reconstruction is {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let residual = x - x_hat;
    let recon = frobenius_sq(&residual);
    let exp = loss_exp(z_levels, params)?;
    let lc = loss_c_regularized(reg, q, &params.c)?;
    let ld = loss_d(params);
    Ok(LossBreakdown::compose(recon, exp, lc, ld, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn random_masked_params(rng: &mut ChaCha8Rng, n: usize, levels: usize) -> SelfExpressionParams {
        let c = random_matrix(rng, n, n);
        let d = (0..levels).map(|_| random_matrix(rng, n, n)).collect();
        SelfExpressionParams::new(c, d).unwrap().masked()
    }

    #[test]
    fn apply_zero_params_gives_zero() {
        let params = SelfExpressionParams::new(
            Array2::zeros((4, 4)),
            vec![Array2::zeros((4, 4))],
        )
        .unwrap();
        let z = Array2::from_elem((3, 4), 1.5);
        let out = apply_self_expression(&z, &params, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_identity_features_returns_connection() {
        // Z = I_3, so Z (C + D) = C + D = C when D = 0.
        let mut c = Array2::from_elem((3, 3), 0.5);
        c.diag_mut().fill(0.0);
        let params =
            SelfExpressionParams::new(c.clone(), vec![Array2::zeros((3, 3))]).unwrap();
        let out = apply_self_expression(&Array2::eye(3), &params, 1).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn apply_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_matrix(&mut rng, 4, 6);
        let params = random_masked_params(&mut rng, 6, 1);
        let out = apply_self_expression(&z, &params, 1).unwrap();

        let a = params.connection(1).unwrap();
        for r in 0..4 {
            for i in 0..6 {
                let mut acc = 0.0;
                for j in 0..6 {
                    acc += z[[r, j]] * a[[j, i]];
                }
                assert_relative_eq!(out[[r, i]], acc, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn apply_dimension_mismatch_names_level() {
        let params = SelfExpressionParams::init(5, 2);
        let z = Array2::zeros((3, 4));
        let err = apply_self_expression(&z, &params, 2).unwrap_err();
        assert!(err.to_string().contains("level 2"), "{err}");
    }

    #[test]
    fn loss_exp_zero_for_perfect_self_expression() {
        // Two identical columns: swapping them reproduces Z with zero diagonal.
        let z = ndarray::array![[1.0, 1.0], [2.0, 2.0], [-0.5, -0.5]];
        let a = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        let params = SelfExpressionParams::new(a, vec![Array2::zeros((2, 2))]).unwrap();
        let v = loss_exp(&[z], &params).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_exp_zero_coefficients_gives_feature_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = random_matrix(&mut rng, 5, 4);
        let z2 = random_matrix(&mut rng, 3, 4);
        let params = SelfExpressionParams::new(
            Array2::zeros((4, 4)),
            vec![Array2::zeros((4, 4)), Array2::zeros((4, 4))],
        )
        .unwrap();
        let expected = frobenius_sq(&z1) + frobenius_sq(&z2);
        let got = loss_exp(&[z1, z2], &params).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-15);
    }

    #[test]
    fn loss_exp_matches_entrywise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 6;
        let z_levels = vec![random_matrix(&mut rng, 4, n), random_matrix(&mut rng, 3, n)];
        let params = random_masked_params(&mut rng, n, 2);

        let mut expected = 0.0;
        for (idx, z) in z_levels.iter().enumerate() {
            let a = params.connection(idx + 1).unwrap();
            for r in 0..z.nrows() {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += z[[r, j]] * a[[j, i]];
                    }
                    let diff = z[[r, i]] - acc;
                    expected += diff * diff;
                }
            }
        }
        let got = loss_exp(&z_levels, &params).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-10);
    }

    #[test]
    fn loss_c_zero_membership_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_matrix(&mut rng, 7, 7);
        let q = MembershipMatrix::zeros(7, 3);
        assert_eq!(loss_c(&q, &c).unwrap(), 0.0);
    }

    #[test]
    fn loss_c_hand_enumerated_case() {
        // n=4, K=2, samples {0,1} -> cluster 0 and {2,3} -> cluster 1,
        // |C| all ones off the diagonal: Q^T |C| is 2x4 with every entry 1.5
        // ... enumerate instead of trusting algebra.
        let mut c = Array2::<f64>::from_elem((4, 4), 1.0);
        c.diag_mut().fill(0.0);
        let q = MembershipMatrix::from_labels(&[0, 0, 1, 1], 2).unwrap();

        let mut expected = 0.0;
        for k in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += q.matrix()[[i, k]] * c[[i, j]].abs();
                }
                expected += acc.abs();
            }
        }
        assert_eq!(expected, 12.0);
        assert_eq!(loss_c(&q, &c).unwrap(), 12.0);
    }

    #[test]
    fn loss_d_closed_form_offdiagonal_count() {
        let n = 100;
        let mut d = Array2::from_elem((n, n), 1e-4);
        d.diag_mut().fill(0.0);
        let params = SelfExpressionParams::new(Array2::zeros((n, n)), vec![d]).unwrap();
        let expected = (n * n - n) as f64 * 1e-4 * 1e-4;
        assert_relative_eq!(loss_d(&params), expected, max_relative = 1e-12);
    }

    #[test]
    fn loss_d_quadruples_under_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_masked_params(&mut rng, 5, 3);
        let doubled = SelfExpressionParams::new(
            params.c.clone(),
            params.d.iter().map(|d| d * 2.0).collect(),
        )
        .unwrap();
        assert_relative_eq!(loss_d(&doubled), 4.0 * loss_d(&params), max_relative = 1e-15);
    }

    #[test]
    fn total_loss_all_zero_terms() {
        let n = 4;
        let x = Array2::from_elem((6, n), 0.3);
        let params = SelfExpressionParams::new(
            Array2::zeros((n, n)),
            vec![Array2::zeros((n, n))],
        )
        .unwrap();
        let z = vec![Array2::zeros((2, n))];
        let q = MembershipMatrix::zeros(n, 2);
        let w = LossWeights::new(1.0, 1.0, 1.0).unwrap();
        let b = total_loss(&x, &x.clone(), &z, &params, &q, &w).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!((b.recon, b.exp, b.lc, b.ld), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn total_loss_weight_changes_touch_only_their_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 5;
        let x = random_matrix(&mut rng, 6, n);
        let x_hat = random_matrix(&mut rng, 6, n);
        let z = vec![random_matrix(&mut rng, 4, n)];
        let params = random_masked_params(&mut rng, n, 1);
        let q = MembershipMatrix::from_labels(&[0, 1, 0, 1, 0], 2).unwrap();

        let w1 = LossWeights::new(1.0, 2.0, 3.0).unwrap();
        let w2 = LossWeights::new(2.0, 2.0, 3.0).unwrap();
        let b1 = total_loss(&x, &x_hat, &z, &params, &q, &w1).unwrap();
        let b2 = total_loss(&x, &x_hat, &z, &params, &q, &w2).unwrap();
        assert_eq!(b1.recon, b2.recon);
        assert_eq!(b1.exp, b2.exp);
        assert_eq!(b1.lc, b2.lc);
        assert_eq!(b1.ld, b2.ld);
        assert_relative_eq!(b2.total - b1.total, b1.exp, max_relative = 1e-12);
    }

    #[test]
    fn total_loss_matches_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 5;
        let x = random_matrix(&mut rng, 6, n);
        let x_hat = random_matrix(&mut rng, 6, n);
        let z = vec![random_matrix(&mut rng, 4, n), random_matrix(&mut rng, 3, n)];
        let params = random_masked_params(&mut rng, n, 2);
        let q = MembershipMatrix::from_labels(&[1, 0, 1, 1, 0], 2).unwrap();
        let w = LossWeights::new(0.7, 1.3, 2.1).unwrap();
        let b = total_loss(&x, &x_hat, &z, &params, &q, &w).unwrap();
        let recomposed = b.recon + w.lambda1 * b.exp + w.lambda2 * b.lc + w.lambda3 * b.ld;
        assert_relative_eq!(b.total, recomposed, max_relative = 1e-12);
        assert!(b.recon >= 0.0 && b.exp >= 0.0 && b.lc >= 0.0 && b.ld >= 0.0);
    }

    #[test]
    fn mask_diagonal_identity_becomes_zero() {
        let mut params =
            SelfExpressionParams::new(Array2::eye(4), vec![Array2::eye(4)]).unwrap();
        params.mask_diagonal();
        assert!(params.c.iter().all(|&v| v == 0.0));
        assert!(params.d[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_diagonal_is_idempotent_and_preserves_offdiagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = SelfExpressionParams::new(
            random_matrix(&mut rng, 6, 6),
            vec![random_matrix(&mut rng, 6, 6)],
        )
        .unwrap();
        let once = raw.clone().masked();
        let twice = once.clone().masked();
        assert_eq!(once, twice);
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(once.c[[i, j]].to_bits(), raw.c[[i, j]].to_bits());
                    assert_eq!(once.d[0][[i, j]].to_bits(), raw.d[0][[i, j]].to_bits());
                }
            }
        }
    }

    #[test]
    fn init_fills_and_masks() {
        let params = SelfExpressionParams::init(5, 2);
        assert_eq!(params.c[[0, 1]], 1e-4);
        assert_eq!(params.c[[0, 0]], 0.0);
        assert_eq!(params.d[1][[3, 2]], 1e-4);
        assert_eq!(params.d[1][[2, 2]], 0.0);
    }

    #[test]
    fn grouped_l2_differs_from_membership_under_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_matrix(&mut rng, 6, 6);
        let q = MembershipMatrix::from_labels(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let literal = loss_c_regularized(CRegularizer::MembershipL1, &q, &c).unwrap();
        let grouped = loss_c_regularized(CRegularizer::GroupedL2, &q, &c).unwrap();
        // l2 over groups is strictly below l1 unless each column's mass sits
        // in a single cluster.
        assert!(grouped < literal);
    }

    proptest! {
        // For any fully one-hot Q, the membership regularizer collapses to
        // the plain entrywise l1 norm of C.
        #[test]
        fn collapse_identity(
            n in 2usize..12,
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_matrix(&mut rng, n, n);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let q = MembershipMatrix::from_labels(&labels, k).unwrap();
            let lhs = loss_c(&q, &c).unwrap();
            let rhs: f64 = c.iter().map(|v| v.abs()).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        // Re-applying the diagonal mask never changes the total loss.
        #[test]
        fn masking_invariance(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let x = random_matrix(&mut rng, 5, n);
            let x_hat = random_matrix(&mut rng, 5, n);
            let z = vec![random_matrix(&mut rng, 3, n)];
            let params = random_masked_params(&mut rng, n, 1);
            let q = MembershipMatrix::zeros(n, 2);
            let w = LossWeights::new(1.0, 1.0, 1.0).unwrap();
            let before = total_loss(&x, &x_hat, &z, &params, &q, &w).unwrap();
            let after = total_loss(&x, &x_hat, &z, &params.clone().masked(), &q, &w).unwrap();
            prop_assert_eq!(before.total.to_bits(), after.total.to_bits());
        }
    }
}
