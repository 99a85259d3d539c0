//! Small dense linear-algebra helpers shared by the state-space and sampler code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Smallest acceptable ratio between the smallest and largest Cholesky pivot (squared).
const PIVOT_RATIO_FLOOR: f64 = 1e-15;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Checks symmetry and positive semi-definiteness with tolerance `1e-10 * trace scale`.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("{what} must be square")));
    }
    if n == 0 {
        return Ok(());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} has non-finite entries"
        )));
    }
    let scale = m.diagonal().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let tol = 1e-10 * scale;
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
            }
        }
    }
    if is_diagonal(m) {
        if m.diagonal().iter().any(|&d| d < -tol) {
            return Err(Error::InvalidArgument(format!(
                "{what} has a negative diagonal entry"
            )));
        }
        return Ok(());
    }
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] += tol;
    }
    if shifted.cholesky().is_some() {
        return Ok(());
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&ev| ev < -tol) {
        return Err(Error::InvalidArgument(format!(
            "{what} is not positive semi-definite"
        )));
    }
    Ok(())
}

/// Cholesky factorization that rejects numerically singular matrices.
pub fn guarded_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = m.cholesky()?;
    let l = chol.l_dirty();
    let n = l.nrows();
    if n == 0 {
        return Some(chol);
    }
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..n {
        let d = l[(i, i)] * l[(i, i)];
        if !d.is_finite() {
            return None;
        }
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if hi <= 0.0 || lo / hi < PIVOT_RATIO_FLOOR {
        return None;
    }
    Some(chol)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Returns a factor `F` with `F F^T = cov` for a symmetric PSD matrix.
///
/// Diagonal matrices take a square-root fast path; otherwise Cholesky is tried
/// first and a clipped eigen-decomposition handles rank-deficient input.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if is_diagonal(cov) {
        let mut f = DMatrix::zeros(n, n);
        for i in 0..n {
            let d = cov[(i, i)];
            if d < -1e-10 * d.abs().max(1.0) {
                return Err(Error::Numerical(
                    "covariance has a negative variance".into(),
                ));
            }
            f[(i, i)] = d.max(0.0).sqrt();
        }
        return Ok(f);
    }
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.unpack());
    }
    let mut sym = cov.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-10 * max_ev.max(1.0);
    if eig.eigenvalues.iter().any(|&ev| ev < -tol) {
        return Err(Error::Numerical(
            "covariance is not positive semi-definite".into(),
        ));
    }
    let mut vecs = eig.eigenvectors;
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        vecs.column_mut(j).scale_mut(s);
    }
    Ok(vecs)
}

pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let f = psd_factor(cov)?;
    let z = standard_normal_vector(mean.len(), rng);
    Ok(mean + f * z)
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_square(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Log-density of `N(mean, cov)` at `x`; `None` when `cov` is not positive definite.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let n = x.len();
    if n == 0 {
        return Some(0.0);
    }
    let chol = cov.clone().cholesky()?;
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Some(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + diff.dot(&sol)))
}
