#![allow(dead_code)]

use laf_core::statespace::{ObservationSequence, StateSpaceSystem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// `A A^T + floor I`, well conditioned.
pub fn random_spd(n: usize, floor: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = normal_matrix(n, n, rng) * 0.7;
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_system(n_steps: usize, m: usize, p: usize, rng: &mut impl Rng) -> StateSpaceSystem {
    let r = 1 + rng.random_range(0..m);
    StateSpaceSystem {
        obs_matrices: (0..n_steps).map(|_| normal_matrix(p, m, rng)).collect(),
        obs_noise: (0..n_steps).map(|_| random_spd(p, 0.3, rng)).collect(),
        transitions: (1..n_steps)
            .map(|_| normal_matrix(m, m, rng) * 0.6)
            .collect(),
        noise_loadings: (1..n_steps).map(|_| normal_matrix(m, r, rng)).collect(),
        noise_covs: (1..n_steps)
            .map(|_| {
                DMatrix::from_diagonal(&DVector::from_fn(r, |_, _| rng.random_range(0.2..1.5)))
            })
            .collect(),
        init_mean: DVector::from_fn(m, |_, _| StandardNormal.sample(rng)),
        init_cov: random_spd(m, 0.5, rng),
    }
}

pub fn random_observations(
    n_steps: usize,
    p: usize,
    missing: f64,
    rng: &mut impl Rng,
) -> ObservationSequence {
    let values = (0..n_steps)
        .map(|_| {
            DVector::from_fn(p, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                2.0 * z
            })
        })
        .collect();
    let mask = (0..n_steps)
        .map(|_| (0..p).map(|_| rng.random::<f64>() >= missing).collect())
        .collect();
    ObservationSequence::new(values, mask).unwrap()
}

/// Explicit joint normal of the stacked states and the unmasked observations.
pub struct JointGaussian {
    pub m: usize,
    pub n: usize,
    pub x_mean: DVector<f64>,
    pub x_cov: DMatrix<f64>,
    /// `(step, component)` of every unmasked observation, in time order.
    pub obs_index: Vec<(usize, usize)>,
    pub y: DVector<f64>,
    pub y_mean: DVector<f64>,
    pub y_cov: DMatrix<f64>,
    pub xy_cov: DMatrix<f64>,
}

impl JointGaussian {
    pub fn build(sys: &StateSpaceSystem, obs: &ObservationSequence) -> Self {
        let n = sys.obs_matrices.len();
        let m = sys.init_mean.len();
        let mut x_mean = DVector::zeros(n * m);
        let mut x_cov = DMatrix::zeros(n * m, n * m);
        // marginal moments step by step, then cross covariances by propagation
        let mut mean = sys.init_mean.clone();
        let mut var = sys.init_cov.clone();
        let mut vars = Vec::new();
        for i in 0..n {
            x_mean.rows_mut(i * m, m).copy_from(&mean);
            vars.push(var.clone());
            if i + 1 == n {
                break;
            }
            let t = &sys.transitions[i];
            let r = &sys.noise_loadings[i];
            mean = t * &mean;
            var = t * &var * t.transpose() + r * &sys.noise_covs[i] * r.transpose();
        }
        for i in 0..n {
            let mut phi = DMatrix::identity(m, m);
            for j in i..n {
                let c = &phi * &vars[i];
                x_cov.view_mut((j * m, i * m), (m, m)).copy_from(&c);
                x_cov
                    .view_mut((i * m, j * m), (m, m))
                    .copy_from(&c.transpose());
                if j + 1 < n {
                    phi = &sys.transitions[j] * phi;
                }
            }
        }
        let obs_index: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| {
                obs.mask[i]
                    .iter()
                    .enumerate()
                    .filter(|(_, &o)| o)
                    .map(move |(c, _)| (i, c))
            })
            .collect();
        let q = obs_index.len();
        let mut z = DMatrix::zeros(q, n * m);
        let mut h = DMatrix::zeros(q, q);
        let mut y = DVector::zeros(q);
        for (a, &(i, c)) in obs_index.iter().enumerate() {
            z.view_mut((a, i * m), (1, m))
                .copy_from(&sys.obs_matrices[i].row(c));
            y[a] = obs.values[i][c];
            for (b, &(i2, c2)) in obs_index.iter().enumerate() {
                if i2 == i {
                    h[(a, b)] = sys.obs_noise[i][(c, c2)];
                }
            }
        }
        let y_mean = &z * &x_mean;
        let y_cov = &z * &x_cov * z.transpose() + h;
        let xy_cov = &x_cov * z.transpose();
        Self {
            m,
            n,
            x_mean,
            x_cov,
            obs_index,
            y,
            y_mean,
            y_cov,
            xy_cov,
        }
    }

    /// Conditional mean and covariance of the states given the observations
    /// made at steps `< upto`.
    pub fn conditional(&self, upto: usize) -> (DVector<f64>, DMatrix<f64>) {
        let keep: Vec<usize> = (0..self.obs_index.len())
            .filter(|&a| self.obs_index[a].0 < upto)
            .collect();
        if keep.is_empty() {
            return (self.x_mean.clone(), self.x_cov.clone());
        }
        let syy = DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
            self.y_cov[(keep[a], keep[b])]
        });
        let sxy = DMatrix::from_fn(self.x_mean.len(), keep.len(), |r, b| {
            self.xy_cov[(r, keep[b])]
        });
        let d = DVector::from_fn(keep.len(), |a, _| self.y[keep[a]] - self.y_mean[keep[a]]);
        let inv = syy
            .try_inverse()
            .expect("invertible observation covariance");
        let mean = &self.x_mean + &sxy * &inv * d;
        let cov = &self.x_cov - &sxy * &inv * sxy.transpose();
        (mean, cov)
    }

    pub fn step_moments(
        &self,
        joint: &(DVector<f64>, DMatrix<f64>),
        i: usize,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.m;
        (
            joint.0.rows(i * m, m).into_owned(),
            joint.1.view((i * m, i * m), (m, m)).into_owned(),
        )
    }

    pub fn log_likelihood(&self) -> f64 {
        let q = self.y.len();
        if q == 0 {
            return 0.0;
        }
        let d = &self.y - &self.y_mean;
        let lu = self.y_cov.clone().lu();
        let det = lu.determinant();
        let sol = lu.solve(&d).unwrap();
        -0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + d.dot(&sol))
    }
}

pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

pub fn max_rel_err_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

/// Composite Simpson rule on a uniform grid with an odd number of points.
pub fn simpson(ys: &[f64], h: f64) -> f64 {
    assert!(ys.len() % 2 == 1 && ys.len() >= 3);
    let n = ys.len() - 1;
    let mut s = ys[0] + ys[n];
    for (i, y) in ys.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * y } else { 2.0 * y };
    }
    s * h / 3.0
}

/// Normalizes `exp(log_unnorm)` over `[lo, hi]` on `n` intervals and returns
/// the grid and the normalized density values.
pub fn grid_density(
    lo: f64,
    hi: f64,
    n: usize,
    log_unnorm: impl Fn(f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_unnorm(x)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ys: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z = simpson(&ys, h);
    (xs, ys.iter().map(|y| y / z).collect())
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}
