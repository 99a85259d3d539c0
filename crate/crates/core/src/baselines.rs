//! Moving-average means and EWMA covariances.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::diagnostics::sigma_mse;
use crate::linalg::{check_psd, symmetrize};
use crate::model::MeanCovPath;
use crate::{Error, Result};

/// Number of leading observations used by [`ewma_init`].
pub const EWMA_INIT_STEPS: usize = 10;

/// Centered equally weighted moving average over the observed cells of each
/// series. The window shrinks at the boundaries; a window with no observed
/// cell falls back to the series' overall observed mean (0 if it has none).
pub fn moving_average_mean(data: &Dataset, window: usize) -> Result<DMatrix<f64>> {
    if window == 0 {
        return Err(Error::InvalidArgument(
            "moving-average window must be at least 1".into(),
        ));
    }
    let (p, n) = (data.p(), data.len());
    let before = (window - 1) / 2;
    let after = window / 2;
    let mut out = DMatrix::zeros(p, n);
    for j in 0..p {
        let (mut tot, mut cnt) = (0.0, 0usize);
        for i in 0..n {
            if data.observed[(j, i)] {
                tot += data.values[(j, i)];
                cnt += 1;
            }
        }
        let fallback = if cnt > 0 { tot / cnt as f64 } else { 0.0 };
        for i in 0..n {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            let (mut s, mut c) = (0.0, 0usize);
            for m in lo..=hi {
                if data.observed[(j, m)] {
                    s += data.values[(j, m)];
                    c += 1;
                }
            }
            out[(j, i)] = if c > 0 { s / c as f64 } else { fallback };
        }
    }
    Ok(out)
}

fn residual(data: &Dataset, mu: &DMatrix<f64>, i: usize) -> (Vec<usize>, Vec<f64>) {
    let idx = data.observed_indices(i);
    let r = idx
        .iter()
        .map(|&j| data.values[(j, i)] - mu[(j, i)])
        .collect();
    (idx, r)
}

/// Average outer product of the first (up to) ten residuals, with missing
/// residuals counted as zero.
pub fn ewma_init(data: &Dataset, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = data.p();
    let n = data.len().min(EWMA_INIT_STEPS);
    if n == 0 {
        return Err(Error::Data(
            "no observations to initialize the EWMA recursion".into(),
        ));
    }
    let mut s = DMatrix::zeros(p, p);
    for i in 0..n {
        let (idx, r) = residual(data, mu, i);
        for (a, &ja) in idx.iter().enumerate() {
            for (b, &jb) in idx.iter().enumerate() {
                s[(ja, jb)] += r[a] * r[b];
            }
        }
    }
    Ok(s / n as f64)
}

/// `S(t_1) = init`, `S(t_i) = (1 - lambda) r_{i-1} r_{i-1}^T + lambda S(t_{i-1})`
/// with `r = y - mu`.
///
/// When some cells of `y_{i-1}` are missing, the rank-one term is replaced by
/// `blockdiag(r_O r_O^T, S_MM)` over the observed (`O`) and missing (`M`)
/// components: missing variances carry over unchanged, their cross terms with
/// observed series decay by `lambda`, and every output stays PSD.
pub fn ewma_cov(
    data: &Dataset,
    mu: &DMatrix<f64>,
    lambda: f64,
    init: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let (p, n) = (data.p(), data.len());
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if mu.shape() != (p, n) || init.shape() != (p, p) {
        return Err(Error::Dimension("EWMA inputs do not match the data".into()));
    }
    check_psd(init, "EWMA initial covariance")?;
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    out.push(init.clone());
    for i in 1..n {
        let prev = &out[i - 1];
        let (idx, r) = residual(data, mu, i - 1);
        let mut obs = vec![false; p];
        for &j in &idx {
            obs[j] = true;
        }
        let mut term = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..p {
                if !obs[a] && !obs[b] {
                    term[(a, b)] = prev[(a, b)];
                }
            }
        }
        for (x, &ja) in idx.iter().enumerate() {
            for (y, &jb) in idx.iter().enumerate() {
                term[(ja, jb)] = r[x] * r[y];
            }
        }
        let mut next = prev * lambda + term * (1.0 - lambda);
        symmetrize(&mut next);
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(lambda, mse)` for every grid point, in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Grid search for the `lambda` minimizing the mean squared covariance error
/// against `truth`; ties go to the larger `lambda`.
pub fn select_lambda(
    data: &Dataset,
    mu: &DMatrix<f64>,
    init: &DMatrix<f64>,
    truth: &MeanCovPath,
    grid: &[f64],
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let est = ewma_cov(data, mu, lambda, init)?;
        let mse = sigma_mse(&est, &truth.sigma)?;
        table.push((lambda, mse));
        best = match best {
            Some((bl, bm)) if mse > bm || (mse == bm && lambda < bl) => Some((bl, bm)),
            _ => Some((lambda, mse)),
        };
    }
    Ok(LambdaSelection {
        lambda: best.expect("non-empty grid").0,
        table,
    })
}

/// `0.50, 0.51, ..., 0.99`.
pub fn default_lambda_grid() -> Vec<f64> {
    (50..100).map(|i| i as f64 / 100.0).collect()
}
