//! Time-varying linear-Gaussian state-space models.
//!
//! ```text
//! y_i     = Z_i x_i + e_i,        e_i ~ N(0, H_i)
//! x_{i+1} = T_i x_i + R_i w_i,    w_i ~ N(0, Q_i)
//! x_1     ~ N(a_1, P_1)
//! ```
//!
//! Observation components can be masked per step. Masked components are
//! removed from `Z_i`, `H_i` and `y_i` before the update, so a fully masked
//! step leaves the filtered moments equal to the predicted ones and adds
//! nothing to the log-likelihood.
//!
//! The smoother uses the backward `r`/`N` recursions, which avoid inverting
//! predicted covariances. The simulation smoother is the mean-correction
//! scheme: simulate an unconditional path and pseudo-data, smooth the
//! difference with a zero initial mean, and add the unconditional path back.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::{
    check_psd, guarded_cholesky, psd_factor, select_entries, select_rows, select_square,
    standard_normal_vector, symmetrize,
};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// System matrices for one pass of the filter.
///
/// `obs_matrices` and `obs_noise` hold one entry per step. The transition
/// quantities hold one entry per step transition (`n_steps - 1`): entry `i`
/// maps the state at step `i` to step `i + 1`.
#[derive(Debug, Clone)]
pub struct StateSpaceSystem {
    pub obs_matrices: Vec<DMatrix<f64>>,
    pub obs_noise: Vec<DMatrix<f64>>,
    pub transitions: Vec<DMatrix<f64>>,
    pub noise_loadings: Vec<DMatrix<f64>>,
    pub noise_covs: Vec<DMatrix<f64>>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

impl StateSpaceSystem {
    pub fn n_steps(&self) -> usize {
        self.obs_matrices.len()
    }

    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    pub fn obs_dim(&self, step: usize) -> usize {
        self.obs_matrices[step].nrows()
    }

    /// Checks dimension consistency and PSD-ness of `P_1`, `H_i`, `Q_i`.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_steps();
        let s = self.state_dim();
        if n == 0 {
            return Err(Error::Dimension("system has no steps".into()));
        }
        if self.init_cov.shape() != (s, s) {
            return Err(Error::Dimension(format!(
                "initial covariance is {:?}, expected ({s}, {s})",
                self.init_cov.shape()
            )));
        }
        check_psd(&self.init_cov, "initial covariance")?;
        if self.obs_noise.len() != n {
            return Err(Error::Dimension(format!(
                "{} observation-noise matrices for {n} steps",
                self.obs_noise.len()
            )));
        }
        for i in 0..n {
            let z = &self.obs_matrices[i];
            if z.ncols() != s {
                return Err(Error::Dimension(format!(
                    "step {i}: observation matrix has {} columns, state dim is {s}",
                    z.ncols()
                )));
            }
            let m = z.nrows();
            if self.obs_noise[i].shape() != (m, m) {
                return Err(Error::Dimension(format!(
                    "step {i}: observation noise is {:?}, expected ({m}, {m})",
                    self.obs_noise[i].shape()
                )));
            }
            check_psd(
                &self.obs_noise[i],
                &format!("observation noise at step {i}"),
            )?;
        }
        let nt = n - 1;
        if self.transitions.len() != nt
            || self.noise_loadings.len() != nt
            || self.noise_covs.len() != nt
        {
            return Err(Error::Dimension(format!(
                "expected {nt} transitions, got T={}, R={}, Q={}",
                self.transitions.len(),
                self.noise_loadings.len(),
                self.noise_covs.len()
            )));
        }
        for i in 0..nt {
            if self.transitions[i].shape() != (s, s) {
                return Err(Error::Dimension(format!("transition {i} is not {s}x{s}")));
            }
            let r = &self.noise_loadings[i];
            if r.nrows() != s {
                return Err(Error::Dimension(format!(
                    "noise loading {i} has {} rows",
                    r.nrows()
                )));
            }
            let q = &self.noise_covs[i];
            if q.shape() != (r.ncols(), r.ncols()) {
                return Err(Error::Dimension(format!(
                    "noise covariance {i} is {:?}, loading has {} columns",
                    q.shape(),
                    r.ncols()
                )));
            }
            check_psd(q, &format!("state-noise covariance {i}"))?;
        }
        Ok(())
    }

    fn state_noise(&self, i: usize) -> DMatrix<f64> {
        let r = &self.noise_loadings[i];
        r * &self.noise_covs[i] * r.transpose()
    }
}

/// Observed values and per-component masks (`true` = observed).
#[derive(Debug, Clone)]
pub struct ObservationSequence {
    pub values: Vec<DVector<f64>>,
    pub mask: Vec<Vec<bool>>,
}

impl ObservationSequence {
    pub fn new(values: Vec<DVector<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "{} observation vectors but {} masks",
                values.len(),
                mask.len()
            )));
        }
        for (i, (v, m)) in values.iter().zip(&mask).enumerate() {
            if v.len() != m.len() {
                return Err(Error::Dimension(format!(
                    "step {i}: value/mask length mismatch"
                )));
            }
            if v.iter().zip(m).any(|(x, &obs)| obs && !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "step {i}: observed value is not finite"
                )));
            }
        }
        Ok(Self { values, mask })
    }

    pub fn fully_observed(values: Vec<DVector<f64>>) -> Self {
        let mask = values.iter().map(|v| vec![true; v.len()]).collect();
        Self { values, mask }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_indices(&self, step: usize) -> Vec<usize> {
        self.mask[step]
            .iter()
            .enumerate()
            .filter_map(|(j, &o)| o.then_some(j))
            .collect()
    }

    fn check_against(&self, sys: &StateSpaceSystem) -> Result<()> {
        if self.len() != sys.n_steps() {
            return Err(Error::Dimension(format!(
                "{} observation steps for a {}-step system",
                self.len(),
                sys.n_steps()
            )));
        }
        for i in 0..self.len() {
            if self.values[i].len() != sys.obs_dim(i) {
                return Err(Error::Dimension(format!(
                    "step {i}: observation has length {}, system expects {}",
                    self.values[i].len(),
                    sys.obs_dim(i)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct StepRecord {
    z_obs: DMatrix<f64>,
    innovation: DVector<f64>,
    innovation_prec: DMatrix<f64>,
    /// `P Z^T F^{-1}` (state_dim x observed count).
    gain: DMatrix<f64>,
}

/// Output of the forward pass.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    records: Vec<StepRecord>,
}

/// Filtered and smoothed moments.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

pub fn kalman_filter(sys: &StateSpaceSystem, obs: &ObservationSequence) -> Result<FilterOutput> {
    sys.validate()?;
    obs.check_against(sys)?;
    run_filter(sys, obs, &sys.init_mean)
}

pub fn kalman_smoother(
    sys: &StateSpaceSystem,
    obs: &ObservationSequence,
) -> Result<SmootherOutput> {
    let filt = kalman_filter(sys, obs)?;
    let (smoothed_means, smoothed_covs) = backward_pass(sys, &filt, true);
    Ok(SmootherOutput {
        filtered_means: filt.filtered_means,
        filtered_covs: filt.filtered_covs,
        smoothed_means,
        smoothed_covs: smoothed_covs.unwrap_or_default(),
        log_likelihood: filt.log_likelihood,
    })
}

/// Draws one state path from the joint posterior of the states given the
/// unmasked observations.
pub fn simulation_smoother<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    obs: &ObservationSequence,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    sys.validate()?;
    obs.check_against(sys)?;
    let n = sys.n_steps();

    let (states_plus, obs_plus) = simulate_masked(sys, &obs.mask, rng)?;
    let diff_values: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut d = DVector::zeros(obs.values[i].len());
            for (j, &o) in obs.mask[i].iter().enumerate() {
                if o {
                    d[j] = obs.values[i][j] - obs_plus[i][j];
                }
            }
            d
        })
        .collect();
    let diff = ObservationSequence {
        values: diff_values,
        mask: obs.mask.clone(),
    };

    let zero = DVector::zeros(sys.state_dim());
    let filt = run_filter(sys, &diff, &zero)?;
    let (means, _) = backward_pass(sys, &filt, false);
    Ok(states_plus
        .into_iter()
        .zip(means)
        .map(|(xp, m)| xp + m)
        .collect())
}

/// Draws states and observations from the system (no conditioning).
pub fn simulate<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    sys.validate()?;
    let mask: Vec<Vec<bool>> = (0..sys.n_steps())
        .map(|i| vec![true; sys.obs_dim(i)])
        .collect();
    simulate_masked(sys, &mask, rng)
}

/// Unconditional draw; observation components that are masked are left at zero
/// and consume no random numbers.
fn simulate_masked<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    mask: &[Vec<bool>],
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = sys.n_steps();
    let s = sys.state_dim();
    let mut states = Vec::with_capacity(n);
    let init_factor = psd_factor(&sys.init_cov)?;
    states.push(&sys.init_mean + init_factor * standard_normal_vector(s, rng));
    for i in 0..n - 1 {
        let q_factor = psd_factor(&sys.noise_covs[i])?;
        let w = q_factor * standard_normal_vector(sys.noise_covs[i].nrows(), rng);
        let next = &sys.transitions[i] * &states[i] + &sys.noise_loadings[i] * w;
        states.push(next);
    }
    let mut observations = Vec::with_capacity(n);
    for i in 0..n {
        let m = sys.obs_dim(i);
        let idx: Vec<usize> = (0..m).filter(|&j| mask[i][j]).collect();
        let mut y = DVector::zeros(m);
        if !idx.is_empty() {
            let z = select_rows(&sys.obs_matrices[i], &idx);
            let h = select_square(&sys.obs_noise[i], &idx);
            let e = psd_factor(&h)? * standard_normal_vector(idx.len(), rng);
            let yo = z * &states[i] + e;
            for (k, &j) in idx.iter().enumerate() {
                y[j] = yo[k];
            }
        }
        observations.push(y);
    }
    Ok((states, observations))
}

fn run_filter(
    sys: &StateSpaceSystem,
    obs: &ObservationSequence,
    init_mean: &DVector<f64>,
) -> Result<FilterOutput> {
    let n = sys.n_steps();
    let s = sys.state_dim();
    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(n),
        predicted_covs: Vec::with_capacity(n),
        filtered_means: Vec::with_capacity(n),
        filtered_covs: Vec::with_capacity(n),
        log_likelihood: 0.0,
        records: Vec::with_capacity(n),
    };

    let mut a = init_mean.clone();
    let mut p = sys.init_cov.clone();
    for i in 0..n {
        let idx = obs.observed_indices(i);
        let m = idx.len();
        let (a_f, p_f, record) = if m == 0 {
            let rec = StepRecord {
                z_obs: DMatrix::zeros(0, s),
                innovation: DVector::zeros(0),
                innovation_prec: DMatrix::zeros(0, 0),
                gain: DMatrix::zeros(s, 0),
            };
            (a.clone(), p.clone(), rec)
        } else {
            let z = select_rows(&sys.obs_matrices[i], &idx);
            let h = select_square(&sys.obs_noise[i], &idx);
            let y = select_entries(&obs.values[i], &idx);
            let v = y - &z * &a;
            let pzt = &p * z.transpose();
            let mut f = &z * &pzt + h;
            symmetrize(&mut f);
            let chol = guarded_cholesky(f).ok_or(Error::SingularInnovation { step: i })?;
            let f_inv = chol.inverse();
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let f_inv_v = &f_inv * &v;
            out.log_likelihood -= 0.5 * (m as f64 * LN_2PI + logdet + v.dot(&f_inv_v));
            let gain = &pzt * &f_inv;
            let a_f = &a + &pzt * f_inv_v;
            let mut p_f = &p - &gain * pzt.transpose();
            symmetrize(&mut p_f);
            let rec = StepRecord {
                z_obs: z,
                innovation: v,
                innovation_prec: f_inv,
                gain,
            };
            (a_f, p_f, rec)
        };

        out.predicted_means.push(a.clone());
        out.predicted_covs.push(p.clone());
        if i + 1 < n {
            let t = &sys.transitions[i];
            a = t * &a_f;
            p = t * &p_f * t.transpose() + sys.state_noise(i);
            symmetrize(&mut p);
        }
        out.filtered_means.push(a_f);
        out.filtered_covs.push(p_f);
        out.records.push(record);
    }
    Ok(out)
}

/// Backward smoothing recursions; covariances only when requested.
fn backward_pass(
    sys: &StateSpaceSystem,
    filt: &FilterOutput,
    with_covs: bool,
) -> (Vec<DVector<f64>>, Option<Vec<DMatrix<f64>>>) {
    let n = sys.n_steps();
    let s = sys.state_dim();
    let mut means = vec![DVector::zeros(s); n];
    let mut covs = with_covs.then(|| vec![DMatrix::zeros(s, s); n]);
    let mut r = DVector::zeros(s);
    let mut big_n = DMatrix::zeros(s, s);

    for i in (0..n).rev() {
        let rec = &filt.records[i];
        let (u, m_mat) = if i + 1 < n {
            let t = &sys.transitions[i];
            let u = t.transpose() * &r;
            let m_mat = with_covs.then(|| t.transpose() * &big_n * t);
            (u, m_mat)
        } else {
            (DVector::zeros(s), with_covs.then(|| DMatrix::zeros(s, s)))
        };

        let zt = rec.z_obs.transpose();
        let r_new = if rec.innovation.is_empty() {
            u
        } else {
            &zt * (&rec.innovation_prec * &rec.innovation) + &u - &zt * (rec.gain.transpose() * &u)
        };
        means[i] = &filt.predicted_means[i] + &filt.predicted_covs[i] * &r_new;

        if let (Some(covs), Some(m_mat)) = (covs.as_mut(), m_mat) {
            let n_new = if rec.innovation.is_empty() {
                m_mat
            } else {
                let a = DMatrix::identity(s, s) - &rec.gain * &rec.z_obs;
                &zt * &rec.innovation_prec * &rec.z_obs + a.transpose() * m_mat * &a
            };
            let p = &filt.predicted_covs[i];
            let mut v = p - p * &n_new * p;
            symmetrize(&mut v);
            covs[i] = v;
            big_n = n_new;
        }
        r = r_new;
    }
    (means, covs)
}
