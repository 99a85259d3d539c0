//! Nested Gaussian process dictionaries in state-space form.
//!
//! Each dictionary element `f` (an entry of `xi` or of `psi`) carries the
//! state `(f, f', A)` where `A` is the local instantaneous mean of `f''`.
//! Over a step of length `delta` the state moves as
//!
//! ```text
//! [f, f', A]_{i+1} = [[1, d, 0], [0, 1, d], [0, 0, 1]] [f, f', A]_i + [[0, 0], [1, 0], [0, 1]] w_i
//! w_i ~ N(0, diag(s2_f * d, s2_A * d))
//! ```
//!
//! Stacked states list all values first, then all first derivatives, then all
//! instantaneous means. Within each group the `(l, k)` elements of `xi` are in
//! column-major order (`l` fastest), which makes the observation block of the
//! loadings system equal to `eta_i^T (x) Theta` acting on `vec(xi(t_i))`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2};
use serde::{Deserialize, Serialize};

use crate::statespace::StateSpaceSystem;
use crate::{Error, Result};

/// State-equation variances of every dictionary element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgpVariances {
    /// `L x K` variances of the derivative innovations of `xi`.
    pub sigma2_xi: DMatrix<f64>,
    /// `L x K` variances of the instantaneous-mean innovations of `xi`.
    pub sigma2_a: DMatrix<f64>,
    pub sigma2_psi: DVector<f64>,
    pub sigma2_b: DVector<f64>,
}

impl NgpVariances {
    pub fn constant(l: usize, k: usize, xi: f64, a: f64, psi: f64, b: f64) -> Self {
        Self {
            sigma2_xi: DMatrix::from_element(l, k, xi),
            sigma2_a: DMatrix::from_element(l, k, a),
            sigma2_psi: DVector::from_element(k, psi),
            sigma2_b: DVector::from_element(k, b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .sigma2_xi
            .iter()
            .chain(self.sigma2_a.iter())
            .chain(self.sigma2_psi.iter())
            .chain(self.sigma2_b.iter());
        for v in all {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "state-equation variance {v} is not positive"
                )));
            }
        }
        if self.sigma2_xi.shape() != self.sigma2_a.shape()
            || self.sigma2_psi.len() != self.sigma2_b.len()
        {
            return Err(Error::Dimension(
                "variance blocks have inconsistent shapes".into(),
            ));
        }
        Ok(())
    }
}

/// Dictionary states at every grid point.
///
/// `xi_states[i]` has length `3 L K` and `psi_states[i]` has length `3 K`,
/// both in the stacked (values, derivatives, means) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryPaths {
    pub l: usize,
    pub k: usize,
    pub xi_states: Vec<DVector<f64>>,
    pub psi_states: Vec<DVector<f64>>,
}

impl DictionaryPaths {
    pub fn zeros(l: usize, k: usize, n: usize) -> Self {
        Self {
            l,
            k,
            xi_states: vec![DVector::zeros(3 * l * k); n],
            psi_states: vec![DVector::zeros(3 * k); n],
        }
    }

    /// Builds the stacked states from plain `xi(t_i)` and `psi(t_i)` values with
    /// derivative and mean coordinates set to zero.
    pub fn from_values(xi: &[DMatrix<f64>], psi: &[DVector<f64>]) -> Result<Self> {
        if xi.len() != psi.len() || xi.is_empty() {
            return Err(Error::Dimension(
                "xi and psi paths must be non-empty and equally long".into(),
            ));
        }
        let (l, k) = xi[0].shape();
        let mut out = Self::zeros(l, k, xi.len());
        for i in 0..xi.len() {
            if xi[i].shape() != (l, k) || psi[i].len() != k {
                return Err(Error::Dimension(format!(
                    "step {i}: dictionary shapes disagree"
                )));
            }
            out.xi_states[i]
                .rows_mut(0, l * k)
                .copy_from(&DVector::from_column_slice(xi[i].as_slice()));
            out.psi_states[i].rows_mut(0, k).copy_from(&psi[i]);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.xi_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi_states.is_empty()
    }

    fn xi_block(&self, i: usize, block: usize) -> DMatrix<f64> {
        let m = self.l * self.k;
        DMatrix::from_column_slice(
            self.l,
            self.k,
            self.xi_states[i].rows(block * m, m).as_slice(),
        )
    }

    pub fn xi(&self, i: usize) -> DMatrix<f64> {
        self.xi_block(i, 0)
    }

    pub fn xi_deriv(&self, i: usize) -> DMatrix<f64> {
        self.xi_block(i, 1)
    }

    pub fn xi_mean(&self, i: usize) -> DMatrix<f64> {
        self.xi_block(i, 2)
    }

    pub fn psi(&self, i: usize) -> DVector<f64> {
        self.psi_states[i].rows(0, self.k).into_owned()
    }

    pub fn psi_deriv(&self, i: usize) -> DVector<f64> {
        self.psi_states[i].rows(self.k, self.k).into_owned()
    }

    pub fn psi_mean(&self, i: usize) -> DVector<f64> {
        self.psi_states[i].rows(2 * self.k, self.k).into_owned()
    }

    pub fn xi_path(&self) -> Vec<DMatrix<f64>> {
        (0..self.len()).map(|i| self.xi(i)).collect()
    }

    pub fn psi_path(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|i| self.psi(i)).collect()
    }
}

/// Observation times with their affine image in `(0, 1]`.
///
/// The map `t -> (t - origin) / scale` sends the first time to `1/T` and the
/// last to `1` for a fitted grid; online extensions reuse the same map, so
/// later times land above 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
    pub origin: f64,
    pub scale: f64,
}

impl TimeGrid {
    pub fn rescaled(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidArgument("empty time grid".into()));
        }
        let n = raw.len();
        let (origin, scale) = if n == 1 {
            (raw[0] - 1.0, 1.0)
        } else {
            let range = raw[n - 1] - raw[0];
            let step = range / (n - 1) as f64;
            (raw[0] - step, range + step)
        };
        Self::with_map(raw, origin, scale)
    }

    pub fn with_map(raw: Vec<f64>, origin: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && origin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid time map origin={origin} scale={scale}"
            )));
        }
        for i in 1..raw.len() {
            if !(raw[i] > raw[i - 1]) {
                return Err(Error::Data(format!(
                    "time grid is not strictly increasing at step {i}"
                )));
            }
        }
        let scaled = raw.iter().map(|t| (t - origin) / scale).collect();
        Ok(Self {
            raw,
            scaled,
            origin,
            scale,
        })
    }

    pub fn map_time(&self, t: f64) -> f64 {
        (t - self.origin) / self.scale
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Spacings `t_{i+1} - t_i` on the scaled axis.
    pub fn deltas(&self) -> Vec<f64> {
        self.scaled.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Sub-grid `start..end` sharing the same time map.
    pub fn slice(&self, start: usize, end: usize) -> TimeGrid {
        TimeGrid {
            raw: self.raw[start..end].to_vec(),
            scaled: self.scaled[start..end].to_vec(),
            origin: self.origin,
            scale: self.scale,
        }
    }
}

/// Transition and noise loading of one `(f, f', A)` block over a step `delta`.
pub fn ngp_transition_block(delta: f64) -> Result<(Matrix3<f64>, Matrix3x2<f64>)> {
    check_delta(delta)?;
    let t = Matrix3::new(1.0, delta, 0.0, 0.0, 1.0, delta, 0.0, 0.0, 1.0);
    let r = Matrix3x2::new(0.0, 0.0, 1.0, 0.0, 0.0, 1.0);
    Ok((t, r))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "time step {delta} must be positive"
        )));
    }
    Ok(())
}

/// Transition and noise loading for `blocks` independent elements in stacked order.
pub fn stacked_transition(blocks: usize, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_delta(delta)?;
    let m = blocks;
    let mut t = DMatrix::identity(3 * m, 3 * m);
    let mut r = DMatrix::zeros(3 * m, 2 * m);
    for e in 0..m {
        t[(e, m + e)] = delta;
        t[(m + e, 2 * m + e)] = delta;
        r[(m + e, e)] = 1.0;
        r[(2 * m + e, m + e)] = 1.0;
    }
    Ok((t, r))
}

/// `diag(s2_f * delta ..., s2_A * delta ...)` for stacked elements.
pub fn stacked_noise_cov(s2_f: &[f64], s2_a: &[f64], delta: f64) -> DMatrix<f64> {
    let diag: Vec<f64> = s2_f.iter().chain(s2_a).map(|v| v * delta).collect();
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

fn stacked_init_cov(blocks: usize, var_level: f64, var_mean: f64) -> DMatrix<f64> {
    let diag: Vec<f64> = (0..3 * blocks)
        .map(|e| if e < 2 * blocks { var_level } else { var_mean })
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

fn fill_transitions(
    sys_blocks: usize,
    grid: &TimeGrid,
    s2_f: &[f64],
    s2_a: &[f64],
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let deltas = grid.deltas();
    let mut ts = Vec::with_capacity(deltas.len());
    let mut rs = Vec::with_capacity(deltas.len());
    let mut qs = Vec::with_capacity(deltas.len());
    for &d in &deltas {
        let (t, r) = stacked_transition(sys_blocks, d)?;
        ts.push(t);
        rs.push(r);
        qs.push(stacked_noise_cov(s2_f, s2_a, d));
    }
    Ok((ts, rs, qs))
}

/// `eta_i^T (x) Theta` (p x LK).
pub fn kron_row(eta_i: &DVector<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, l) = theta.shape();
    let k = eta_i.len();
    let mut out = DMatrix::zeros(p, l * k);
    for kk in 0..k {
        out.columns_mut(kk * l, l).copy_from(&(theta * eta_i[kk]));
    }
    out
}

/// Observation system for the loadings dictionary `xi` given `Theta` and the
/// latent factors `eta` (K x T).
#[allow(clippy::too_many_arguments)]
pub fn assemble_xi_system(
    theta: &DMatrix<f64>,
    eta: &DMatrix<f64>,
    grid: &TimeGrid,
    vars: &NgpVariances,
    sigma0: &DVector<f64>,
    init_var_mu: f64,
    init_var_alpha: f64,
) -> Result<StateSpaceSystem> {
    let (p, l) = theta.shape();
    let k = eta.nrows();
    let n = grid.len();
    if eta.ncols() != n {
        return Err(Error::Dimension(format!(
            "eta has {} columns for {n} grid points",
            eta.ncols()
        )));
    }
    if vars.sigma2_xi.shape() != (l, k) || vars.sigma2_a.shape() != (l, k) {
        return Err(Error::Dimension(format!(
            "xi variances are {:?}, expected ({l}, {k})",
            vars.sigma2_xi.shape()
        )));
    }
    if sigma0.len() != p {
        return Err(Error::Dimension(format!(
            "Sigma0 has {} entries for p={p}",
            sigma0.len()
        )));
    }
    let m = l * k;
    let h = DMatrix::from_diagonal(sigma0);
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = DMatrix::zeros(p, 3 * m);
        z.columns_mut(0, m)
            .copy_from(&kron_row(&eta.column(i).into_owned(), theta));
        zs.push(z);
    }
    let (ts, rs, qs) =
        fill_transitions(m, grid, vars.sigma2_xi.as_slice(), vars.sigma2_a.as_slice())?;
    Ok(StateSpaceSystem {
        obs_matrices: zs,
        obs_noise: vec![h; n],
        transitions: ts,
        noise_loadings: rs,
        noise_covs: qs,
        init_mean: DVector::zeros(3 * m),
        init_cov: stacked_init_cov(m, init_var_mu, init_var_alpha),
    })
}

/// Observation system for the mean dictionary `psi` with the latent factor
/// innovations integrated out: `y_i = Theta xi(t_i) psi(t_i) + e_i`,
/// `e_i ~ N(0, Theta xi xi^T Theta^T + Sigma0)`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_psi_system(
    theta: &DMatrix<f64>,
    xi: &[DMatrix<f64>],
    grid: &TimeGrid,
    vars: &NgpVariances,
    sigma0: &DVector<f64>,
    init_var_mu: f64,
    init_var_alpha: f64,
) -> Result<StateSpaceSystem> {
    let (p, l) = theta.shape();
    let n = grid.len();
    if xi.len() != n {
        return Err(Error::Dimension(format!(
            "{} xi values for {n} grid points",
            xi.len()
        )));
    }
    let k = vars.sigma2_psi.len();
    if sigma0.len() != p {
        return Err(Error::Dimension(format!(
            "Sigma0 has {} entries for p={p}",
            sigma0.len()
        )));
    }
    let s0 = DMatrix::from_diagonal(sigma0);
    let mut zs = Vec::with_capacity(n);
    let mut hs = Vec::with_capacity(n);
    for (i, x) in xi.iter().enumerate() {
        if x.shape() != (l, k) {
            return Err(Error::Dimension(format!(
                "step {i}: xi is {:?}, expected ({l}, {k})",
                x.shape()
            )));
        }
        let loading = theta * x;
        let mut z = DMatrix::zeros(p, 3 * k);
        z.columns_mut(0, k).copy_from(&loading);
        zs.push(z);
        hs.push(&loading * loading.transpose() + &s0);
    }
    let (ts, rs, qs) = fill_transitions(
        k,
        grid,
        vars.sigma2_psi.as_slice(),
        vars.sigma2_b.as_slice(),
    )?;
    Ok(StateSpaceSystem {
        obs_matrices: zs,
        obs_noise: hs,
        transitions: ts,
        noise_loadings: rs,
        noise_covs: qs,
        init_mean: DVector::zeros(3 * k),
        init_cov: stacked_init_cov(k, init_var_mu, init_var_alpha),
    })
}
