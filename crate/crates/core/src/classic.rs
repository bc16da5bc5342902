//! Classical self-expression solvers on the raw data matrix.
//!
//! These minimize `0.5 ||X - XC||_F^2 + lambda g(C)` (with `g` the plain
//! squared-Frobenius or entrywise l1 penalty, and an optional zero-diagonal
//! constraint) and serve two roles: desk-scale baselines, and independent
//! oracles for the trained pipeline. The Frobenius variant without the
//! constraint has the closed form `(X^T X + lambda I)^{-1} X^T X`, which
//! the proximal-gradient solver is tested against.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};

use crate::error::{Error, Result};

/// Penalty on the coefficient matrix. `Frobenius` weighs
/// `(lambda/2)||C||_F^2`; `L1` weighs `lambda ||C||_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Frobenius,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicConfig {
    pub regularizer: Regularizer,
    pub lambda: f64,
    pub diag_constraint: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl ClassicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        if self.tol <= 0.0 {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for ClassicConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::L1,
            lambda: 0.1,
            diag_constraint: true,
            max_iter: 2000,
            tol: 1e-8,
        }
    }
}

/// `0.5 ||X - XC||_F^2 + lambda g(C)` under the configured penalty.
pub fn objective(x: &Array2<f64>, c: &Array2<f64>, cfg: &ClassicConfig) -> f64 {
    let residual = x - &x.dot(c);
    let fit: f64 = residual.iter().map(|v| v * v).sum::<f64>() / 2.0;
    let penalty = match cfg.regularizer {
        Regularizer::Frobenius => cfg.lambda / 2.0 * c.iter().map(|v| v * v).sum::<f64>(),
        Regularizer::L1 => cfg.lambda * c.iter().map(|v| v.abs()).sum::<f64>(),
    };
    fit + penalty
}

/// Unique minimizer of `0.5||X - XC||_F^2 + (lambda/2)||C||_F^2`:
/// `C = (X^T X + lambda I)^{-1} X^T X`, computed through the
/// eigendecomposition of the (symmetric PSD) Gram matrix.
pub fn solve_frobenius_closed_form(x: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    let gram = x.t().dot(x);
    let (vals, vecs) = gram
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e}")))?;
    // (G + lambda I)^{-1} G = V diag(e / (e + lambda)) V^T
    let shrunk: Array1<f64> = vals.mapv(|e| e / (e + lambda));
    let mut scaled = vecs.clone();
    for (mut col, &s) in scaled.columns_mut().into_iter().zip(shrunk.iter()) {
        col.mapv_inplace(|v| v * s);
    }
    Ok(scaled.dot(&vecs.t()))
}

/// Largest eigenvalue of the Gram matrix by power iteration, padded by a
/// hair so the proximal step size `1/L` is never optimistic.
fn lipschitz_bound(gram: &Array2<f64>) -> f64 {
    let n = gram.nrows();
    let mut v = Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut eigenvalue = 0.0;
    for _ in 0..200 {
        let w = gram.dot(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1e-12;
        }
        let next = &w / norm;
        let new_eig = next.dot(&gram.dot(&next));
        let done = (new_eig - eigenvalue).abs() <= 1e-10 * new_eig.abs().max(1.0);
        eigenvalue = new_eig;
        v = next;
        if done {
            break;
        }
    }
    eigenvalue * (1.0 + 1e-6)
}

/// Entrywise proximal map of `step * lambda * g` composed with the
/// zero-diagonal projection (both are separable, so the composition is the
/// exact proximal operator of their sum).
fn prox(c: &mut Array2<f64>, cfg: &ClassicConfig, step: f64) {
    let t = step * cfg.lambda;
    match cfg.regularizer {
        Regularizer::Frobenius => {
            let shrink = 1.0 / (1.0 + t);
            c.mapv_inplace(|v| v * shrink);
        }
        Regularizer::L1 => {
            c.mapv_inplace(|v| {
                if v > t {
                    v - t
                } else if v < -t {
                    v + t
                } else {
                    0.0
                }
            });
        }
    }
    if cfg.diag_constraint {
        c.diag_mut().fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct IterativeSolution {
    pub c: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
}

/// Proximal-gradient minimization of the classical objective. Stops when
/// the relative objective decrease drops below `tol` or after `max_iter`
/// steps; on a non-finite objective the step size is halved and the solve
/// restarted once before failing.
pub fn solve_iterative(x: &Array2<f64>, cfg: &ClassicConfig) -> Result<IterativeSolution> {
    cfg.validate()?;
    let gram = x.t().dot(x);
    let base_step = 1.0 / lipschitz_bound(&gram);
    match run_ista(x, &gram, cfg, base_step) {
        Ok(solution) => Ok(solution),
        Err(Error::Numerical(_)) => run_ista(x, &gram, cfg, base_step / 2.0),
        Err(e) => Err(e),
    }
}

fn run_ista(
    x: &Array2<f64>,
    gram: &Array2<f64>,
    cfg: &ClassicConfig,
    step: f64,
) -> Result<IterativeSolution> {
    let n = x.ncols();
    let mut c = Array2::<f64>::zeros((n, n));
    let mut history = Vec::with_capacity(cfg.max_iter.min(4096) + 1);
    let mut prev = objective(x, &c, cfg);
    history.push(prev);
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        // Gradient of the smooth part: X^T (XC - X) = G C - G.
        let grad = gram.dot(&c) - gram;
        c.scaled_add(-step, &grad);
        prox(&mut c, cfg, step);
        let current = objective(x, &c, cfg);
        if !current.is_finite() {
            return Err(Error::Numerical(format!(
                "objective diverged at iteration {it}"
            )));
        }
        history.push(current);
        let decrease = (prev - current) / prev.abs().max(1.0);
        prev = current;
        if decrease >= 0.0 && decrease < cfg.tol {
            break;
        }
    }
    Ok(IterativeSolution {
        c,
        objective: prev,
        iterations,
        objective_history: history,
    })
}

/// Fraction of the total absolute coefficient mass placed on same-label
/// columns; a solver-quality diagnostic on data with known subspaces.
pub fn subspace_preserving_rate(c: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = c.nrows();
    if c.ncols() != n || labels.len() != n {
        return Err(Error::Shape(format!(
            "coefficients are {}x{} with {} labels",
            c.nrows(),
            c.ncols(),
            labels.len()
        )));
    }
    let mut same = 0.0;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mass = c[[j, i]].abs();
            total += mass;
            if labels[i] == labels[j] {
                same += mass;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(same / total)
}
