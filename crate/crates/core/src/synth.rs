//! Synthetic LAF data with known `(mu, Sigma)` paths.
//!
//! Scenario A uses bumps functions for the loadings dictionary (sharp local
//! features); scenario B uses smooth Gaussian-process draws. In both the mean
//! dictionary is a GP draw, `Theta` comes from the multiplicative gamma
//! shrinkage prior and `Sigma0^-1` has `Ga(1, 0.1)` diagonal entries. Times are
//! `1..=T`, and dictionaries are evaluated on the rescaled grid `i / T`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::linalg::standard_normal_vector;
use crate::model::{compose, cumulative_product, MeanCovPath};
use crate::ngp::TimeGrid;
use crate::{Error, Result};

pub const BUMP_LOCATIONS: [f64; 11] = [
    0.1, 0.13, 0.15, 0.23, 0.25, 0.40, 0.44, 0.65, 0.76, 0.78, 0.81,
];
pub const BUMP_HEIGHTS: [f64; 11] = [4.0, 5.0, 3.0, 4.0, 5.0, 4.2, 2.1, 4.3, 3.1, 5.1, 4.2];
pub const BUMP_WIDTHS: [f64; 11] = [
    0.005, 0.005, 0.006, 0.01, 0.01, 0.03, 0.01, 0.01, 0.005, 0.008, 0.005,
];

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// `sum_j h_j g((t - p_j) / w_j)` with `g(x) = (1 + |x|)^-4`.
pub fn bumps(grid: &[f64]) -> Vec<f64> {
    bumps_shifted(grid, 0)
}

/// Bumps with the location vector rotated by `shift` positions, so that
/// location `j` becomes `p_{(j + shift) mod 11}` while heights and widths stay.
pub fn bumps_shifted(grid: &[f64], shift: usize) -> Vec<f64> {
    let n = BUMP_LOCATIONS.len();
    grid.iter()
        .map(|&t| {
            (0..n)
                .map(|j| {
                    let x = (t - BUMP_LOCATIONS[(j + shift) % n]) / BUMP_WIDTHS[j];
                    BUMP_HEIGHTS[j] * (1.0 + x.abs()).powi(-4)
                })
                .sum()
        })
        .collect()
}

/// Squared-exponential correlation `exp(-kappa (s - t)^2)`.
pub fn gp_kernel(a: &[f64], b: &[f64], kappa: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        (-kappa * (a[i] - b[j]).powi(2)).exp()
    })
}

/// Cholesky factor of `K + jitter I`, escalating the jitter tenfold from 1e-10 up to 1e-6.
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * 1.0001 {
        let m = k + DMatrix::identity(n, n) * jitter;
        if let Some(c) = m.cholesky() {
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "kernel matrix of size {n} is not positive definite even with jitter {JITTER_MAX}"
    )))
}

/// One draw of `GP(0, c)` on `grid`.
pub fn sample_gp<R: Rng + ?Sized>(grid: &[f64], kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let l = jittered_cholesky(&gp_kernel(grid, grid, kappa))?;
    let z = standard_normal_vector(grid.len(), rng);
    Ok((l * z).iter().copied().collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "GP grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Mean and covariance of a GP on `new` given its values on `old`, computed
/// from the Cholesky factor of the jittered joint kernel.
pub fn gp_conditional(
    old: &[f64],
    values: &[f64],
    new: &[f64],
    kappa: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let all: Vec<f64> = old.iter().chain(new).copied().collect();
    check_grid(&all)?;
    let (n_old, n_new) = (old.len(), new.len());
    let l = jittered_cholesky(&gp_kernel(&all, &all, kappa))?;
    let l_oo = l.view((0, 0), (n_old, n_old)).into_owned();
    let l_no = l.view((n_old, 0), (n_new, n_old)).into_owned();
    let l_nn = l.view((n_old, n_old), (n_new, n_new)).into_owned();
    let z_old = l_oo
        .solve_lower_triangular(&DVector::from_column_slice(values))
        .ok_or_else(|| Error::Numerical("singular kernel factor".into()))?;
    Ok((l_no * z_old, &l_nn * l_nn.transpose()))
}

fn sample_gp_continuation<R: Rng + ?Sized>(
    old: &[f64],
    values: &[f64],
    new: &[f64],
    kappa: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (mean, cov) = gp_conditional(old, values, new, kappa)?;
    let l = crate::linalg::psd_factor(&cov)?;
    let z = standard_normal_vector(new.len(), rng);
    Ok((mean + l * z).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Bumps loadings dictionary.
    A,
    /// Smooth GP loadings dictionary.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub p: usize,
    pub l: usize,
    pub k: usize,
    pub t: usize,
    pub kappa: f64,
    pub a1: f64,
    pub a2: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn a() -> Self {
        Self {
            scenario: Scenario::A,
            p: 5,
            l: 2,
            k: 2,
            t: 100,
            kappa: 10.0,
            a1: 10.0,
            a2: 10.0,
            a_sigma: 1.0,
            b_sigma: 0.1,
            seed: 0,
        }
    }

    pub fn b() -> Self {
        Self {
            scenario: Scenario::B,
            p: 10,
            l: 5,
            k: 4,
            ..Self::a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.l == 0 || self.k == 0 || self.t == 0 {
            return Err(Error::InvalidArgument(
                "scenario dimensions must be positive".into(),
            ));
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("a1", self.a1),
            ("a2", self.a2),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// The generating parameters and the induced `(mu, Sigma)` path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: ScenarioSpec,
    pub grid: TimeGrid,
    pub theta: DMatrix<f64>,
    pub sigma2_idio: DVector<f64>,
    pub xi: Vec<DMatrix<f64>>,
    pub psi: Vec<DVector<f64>>,
    pub gamma: MeanCovPath,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// One draw of `y_i = Theta xi(t_i) eta_i + eps_i` with `eta_i ~ N(psi(t_i), I)`.
    pub fn sample_observation<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> DVector<f64> {
        let k = self.psi[i].len();
        let eta = &self.psi[i] + standard_normal_vector(k, rng);
        let eps = DVector::from_fn(self.theta.nrows(), |j, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * self.sigma2_idio[j].sqrt()
        });
        &self.theta * (&self.xi[i] * eta) + eps
    }

    fn observations<R: Rng + ?Sized>(
        &self,
        range: std::ops::Range<usize>,
        rng: &mut R,
    ) -> Result<Dataset> {
        let n = range.len();
        let mut values = DMatrix::zeros(self.theta.nrows(), n);
        for (c, i) in range.clone().enumerate() {
            values.set_column(c, &self.sample_observation(i, rng));
        }
        Dataset::fully_observed(self.grid.raw[range].to_vec(), values)
    }
}

fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// Draws a scenario dataset and its ground truth.
pub fn generate<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    rng: &mut R,
) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let (p, l, k, t) = (spec.p, spec.l, spec.k, spec.t);
    let grid = TimeGrid::rescaled((1..=t).map(|i| i as f64).collect())?;

    let mut vartheta = DVector::zeros(l);
    for h in 0..l {
        vartheta[h] = sample_gamma(if h == 0 { spec.a1 } else { spec.a2 }, 1.0, rng);
    }
    let tau = cumulative_product(&vartheta);
    let mut theta = DMatrix::zeros(p, l);
    for c in 0..l {
        for j in 0..p {
            let phi = sample_gamma(1.5, 1.5, rng);
            let z: f64 = StandardNormal.sample(rng);
            theta[(j, c)] = z / (phi * tau[c]).sqrt();
        }
    }
    let sigma2_idio = DVector::from_fn(p, |_, _| {
        1.0 / sample_gamma(spec.a_sigma, spec.b_sigma, rng)
    });

    let mut xi = vec![DMatrix::zeros(l, k); t];
    for kk in 0..k {
        for ll in 0..l {
            let path = match spec.scenario {
                Scenario::A => bumps_shifted(&grid.scaled, ll + l * kk),
                Scenario::B => sample_gp(&grid.scaled, spec.kappa, rng)?,
            };
            for (i, v) in path.into_iter().enumerate() {
                xi[i][(ll, kk)] = v;
            }
        }
    }
    let mut psi = vec![DVector::zeros(k); t];
    for kk in 0..k {
        for (i, v) in sample_gp(&grid.scaled, spec.kappa, rng)?
            .into_iter()
            .enumerate()
        {
            psi[i][kk] = v;
        }
    }
    let gamma = compose(&theta, &sigma2_idio, &xi, &psi)?;
    let truth = GroundTruth {
        spec: spec.clone(),
        grid,
        theta,
        sigma2_idio,
        xi,
        psi,
        gamma,
    };
    let data = truth.observations(0..t, rng)?;
    Ok((data, truth))
}

/// Extends `prev` by `extra` steps at raw times `T+1..=T+extra`.
///
/// Returns the new observations only, together with the ground truth over the
/// whole extended range. GP dictionaries continue from the conditional GP
/// given their previous values. Bumps dictionaries are evaluated at the
/// extended times wrapped back into `(0, 1]`, so the continuation keeps
/// non-trivial structure instead of decaying to zero.
pub fn continue_generate<R: Rng + ?Sized>(
    prev: &GroundTruth,
    extra: usize,
    rng: &mut R,
) -> Result<(Dataset, GroundTruth)> {
    let spec = &prev.spec;
    let (l, k, t0) = (spec.l, spec.k, prev.len());
    let last = *prev
        .grid
        .raw
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty ground truth".into()))?;
    let new_raw: Vec<f64> = (1..=extra).map(|j| last + j as f64).collect();
    let raw: Vec<f64> = prev.grid.raw.iter().chain(&new_raw).copied().collect();
    let grid = TimeGrid::with_map(raw, prev.grid.origin, prev.grid.scale)?;
    let old_s = &prev.grid.scaled;
    let new_s = &grid.scaled[t0..];

    let mut xi = prev.xi.clone();
    xi.extend(vec![DMatrix::zeros(l, k); extra]);
    let mut psi = prev.psi.clone();
    psi.extend(vec![DVector::zeros(k); extra]);
    if extra > 0 {
        for kk in 0..k {
            for ll in 0..l {
                let path = match spec.scenario {
                    Scenario::A => {
                        let wrapped: Vec<f64> = new_s.iter().map(|&s| s - s.ceil() + 1.0).collect();
                        bumps_shifted(&wrapped, ll + l * kk)
                    }
                    Scenario::B => {
                        let old: Vec<f64> = prev.xi.iter().map(|m| m[(ll, kk)]).collect();
                        sample_gp_continuation(old_s, &old, new_s, spec.kappa, rng)?
                    }
                };
                for (j, v) in path.into_iter().enumerate() {
                    xi[t0 + j][(ll, kk)] = v;
                }
            }
        }
        for kk in 0..k {
            let old: Vec<f64> = prev.psi.iter().map(|v| v[kk]).collect();
            for (j, v) in sample_gp_continuation(old_s, &old, new_s, spec.kappa, rng)?
                .into_iter()
                .enumerate()
            {
                psi[t0 + j][kk] = v;
            }
        }
    }
    let gamma = compose(&prev.theta, &prev.sigma2_idio, &xi, &psi)?;
    let truth = GroundTruth {
        spec: spec.clone(),
        grid,
        theta: prev.theta.clone(),
        sigma2_idio: prev.sigma2_idio.clone(),
        xi,
        psi,
        gamma,
    };
    let data = truth.observations(t0..t0 + extra, rng)?;
    Ok((data, truth))
}
