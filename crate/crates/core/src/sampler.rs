//! Gibbs sampler for the LAF model.
//!
//! One iteration runs the nine conditional updates in order:
//!
//! 1. loadings-dictionary states `xi` (simulation smoother),
//! 2. their state-equation variances,
//! 3. mean-dictionary states `psi` with the latent factors integrated out,
//! 4. their state-equation variances,
//! 5. latent factor innovations `nu` (and `eta = psi + nu`),
//! 6. idiosyncratic precisions,
//! 7. rows of `Theta`,
//! 8. local shrinkage precisions `phi`,
//! 9. global shrinkage factors `vartheta`.
//!
//! Every step exposes the parameters of its full conditional
//! (`*_conditionals`) separately from the draw, so they can be checked
//! against independent oracles. Missing cells are dropped from every
//! likelihood term.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::linalg::{
    mvn_log_density, select_entries, select_rows, select_square, standard_normal_vector,
};
use crate::model::{
    compose, compose_gamma, validate_config, FactorState, LafConfig, Loadings, MeanCovPath,
    PosteriorDraw,
};
use crate::ngp::{
    assemble_psi_system, assemble_xi_system, DictionaryPaths, NgpVariances, TimeGrid,
};
use crate::statespace::{simulation_smoother, ObservationSequence};
use crate::{Error, Result};

/// `Ga(shape, rate)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        sample_gamma(self.shape, self.rate, rng)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let (a, b) = (self.shape, self.rate);
        a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
    }
}

/// `InvGa(shape, scale)` with density proportional to `x^(-shape-1) exp(-scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaParams {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        Ok(self.scale / sample_gamma(self.shape, 1.0, rng)?)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let (a, b) = (self.shape, self.scale);
        a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
    }
}

/// Gaussian conditional stored through its precision: `N(precision^-1 rhs, precision^-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub precision: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl GaussianParams {
    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(self.chol()?.solve(&self.rhs))
    }

    pub fn cov(&self) -> Result<DMatrix<f64>> {
        Ok(self.chol()?.inverse())
    }

    fn chol(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.precision.clone().cholesky().ok_or_else(|| {
            Error::Numerical("conditional precision is not positive definite".into())
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self.chol()?;
        let mean = chol.solve(&self.rhs);
        let z = standard_normal_vector(self.rhs.len(), rng);
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        Ok(mean + dev)
    }
}

fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("gamma(shape={shape}, rate={rate}): {e}")))?;
    let x: f64 = g.sample(rng);
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numerical(format!(
            "gamma(shape={shape}, rate={rate}) draw underflowed"
        )))
    }
}

/// Lanczos approximation of `ln Gamma(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Iteration-0 state: loadings and precisions from their priors, zero
/// dictionaries, standard normal factors, state variances at their prior means.
pub fn init_chain<R: Rng + ?Sized>(
    cfg: &LafConfig,
    data: &Dataset,
    rng: &mut R,
) -> Result<PosteriorDraw> {
    let (p, l, k, n) = (data.p(), cfg.l_star, cfg.k_star, data.len());
    let mut vartheta = DVector::zeros(l);
    for h in 0..l {
        let a = if h == 0 { cfg.a1 } else { cfg.a2 };
        vartheta[h] = sample_gamma(a, 1.0, rng)?;
    }
    let mut phi = DMatrix::zeros(p, l);
    for v in phi.iter_mut() {
        *v = sample_gamma(1.5, 1.5, rng)?;
    }
    let mut loadings = Loadings {
        theta: DMatrix::zeros(p, l),
        phi,
        vartheta,
    };
    let tau = loadings.tau();
    for col in 0..l {
        for j in 0..p {
            let z: f64 = StandardNormal.sample(rng);
            loadings.theta[(j, col)] = z / (loadings.phi[(j, col)] * tau[col]).sqrt();
        }
    }
    let mut sigma2_idio = DVector::zeros(p);
    for j in 0..p {
        sigma2_idio[j] = 1.0 / sample_gamma(cfg.a_sigma, cfg.b_sigma, rng)?;
    }
    let prior_mean = |a: f64, b: f64| if a > 1.0 { b / (a - 1.0) } else { 1.0 };
    let ngp_vars = NgpVariances::constant(
        l,
        k,
        prior_mean(cfg.a_xi, cfg.b_xi),
        prior_mean(cfg.a_a, cfg.b_a),
        prior_mean(cfg.a_psi, cfg.b_psi),
        prior_mean(cfg.a_b, cfg.b_b),
    );
    let dict = DictionaryPaths::zeros(l, k, n);
    let nu = DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(rng));
    let factors = FactorState::from_nu(nu, &dict);
    Ok(PosteriorDraw {
        loadings,
        sigma2_idio,
        dict,
        factors,
        ngp_vars,
    })
}

pub(crate) fn draw_xi_states<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    obs: &ObservationSequence,
    grid: &TimeGrid,
    init: (&DVector<f64>, &DMatrix<f64>),
    rng: &mut R,
) -> Result<()> {
    let mut sys = assemble_xi_system(
        &draw.loadings.theta,
        &draw.factors.eta,
        grid,
        &draw.ngp_vars,
        &draw.sigma2_idio,
        1.0,
        1.0,
    )?;
    sys.init_mean = init.0.clone();
    sys.init_cov = init.1.clone();
    draw.dict.xi_states = simulation_smoother(&sys, obs, rng)?;
    Ok(())
}

pub(crate) fn draw_psi_states<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    obs: &ObservationSequence,
    grid: &TimeGrid,
    init: (&DVector<f64>, &DMatrix<f64>),
    rng: &mut R,
) -> Result<()> {
    let xi = draw.dict.xi_path();
    let mut sys = assemble_psi_system(
        &draw.loadings.theta,
        &xi,
        grid,
        &draw.ngp_vars,
        &draw.sigma2_idio,
        1.0,
        1.0,
    )?;
    sys.init_mean = init.0.clone();
    sys.init_cov = init.1.clone();
    draw.dict.psi_states = simulation_smoother(&sys, obs, rng)?;
    Ok(())
}

/// Diagonal initial covariance: `var_level` on values and derivatives, `var_mean` on means.
pub fn stacked_init_cov(blocks: usize, var_level: f64, var_mean: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(3 * blocks, |e, _| {
        if e < 2 * blocks {
            var_level
        } else {
            var_mean
        }
    }))
}

pub fn step1_update_xi<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    data: &Dataset,
    grid: &TimeGrid,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    let m = draw.dict.l * draw.dict.k;
    let init_mean = DVector::zeros(3 * m);
    let init_cov = stacked_init_cov(m, cfg.sigma2_mu, cfg.sigma2_alpha);
    draw_xi_states(
        draw,
        &data.to_observations(),
        grid,
        (&init_mean, &init_cov),
        rng,
    )
}

/// Conditionals of the derivative-innovation and mean-innovation variances of
/// `blocks` stacked nGP elements, given their state path.
///
/// With `T` grid points there are `T - 1` Gaussian increments, so the shape
/// is `a + (T - 1) / 2`.
pub fn ngp_variance_conditionals(
    states: &[DVector<f64>],
    blocks: usize,
    deltas: &[f64],
    prior_f: (f64, f64),
    prior_a: (f64, f64),
) -> Result<(Vec<InvGammaParams>, Vec<InvGammaParams>)> {
    if deltas.len() + 1 != states.len().max(1) {
        return Err(Error::Dimension(format!(
            "{} spacings for {} states",
            deltas.len(),
            states.len()
        )));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "non-positive time step {d}"
        )));
    }
    let half_n = deltas.len() as f64 / 2.0;
    let mut out_f = Vec::with_capacity(blocks);
    let mut out_a = Vec::with_capacity(blocks);
    for e in 0..blocks {
        let (mut ss_f, mut ss_a) = (0.0, 0.0);
        for (i, &d) in deltas.iter().enumerate() {
            let (s0, s1) = (&states[i], &states[i + 1]);
            let df = s1[blocks + e] - s0[blocks + e] - s0[2 * blocks + e] * d;
            let da = s1[2 * blocks + e] - s0[2 * blocks + e];
            ss_f += df * df / d;
            ss_a += da * da / d;
        }
        out_f.push(InvGammaParams {
            shape: prior_f.0 + half_n,
            scale: prior_f.1 + 0.5 * ss_f,
        });
        out_a.push(InvGammaParams {
            shape: prior_a.0 + half_n,
            scale: prior_a.1 + 0.5 * ss_a,
        });
    }
    Ok((out_f, out_a))
}

/// Conditionals of `sigma2_xi` and `sigma2_A`, indexed `l + L k`.
pub fn xi_variance_conditionals(
    dict: &DictionaryPaths,
    grid: &TimeGrid,
    cfg: &LafConfig,
) -> Result<(Vec<InvGammaParams>, Vec<InvGammaParams>)> {
    ngp_variance_conditionals(
        &dict.xi_states,
        dict.l * dict.k,
        &grid.deltas(),
        (cfg.a_xi, cfg.b_xi),
        (cfg.a_a, cfg.b_a),
    )
}

pub fn psi_variance_conditionals(
    dict: &DictionaryPaths,
    grid: &TimeGrid,
    cfg: &LafConfig,
) -> Result<(Vec<InvGammaParams>, Vec<InvGammaParams>)> {
    ngp_variance_conditionals(
        &dict.psi_states,
        dict.k,
        &grid.deltas(),
        (cfg.a_psi, cfg.b_psi),
        (cfg.a_b, cfg.b_b),
    )
}

pub fn step2_update_xi_variances<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    grid: &TimeGrid,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    let (f, a) = xi_variance_conditionals(&draw.dict, grid, cfg)?;
    for (e, (pf, pa)) in f.iter().zip(&a).enumerate() {
        draw.ngp_vars.sigma2_xi[e] = pf.sample(rng)?;
        draw.ngp_vars.sigma2_a[e] = pa.sample(rng)?;
    }
    Ok(())
}

pub fn step3_update_psi<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    data: &Dataset,
    grid: &TimeGrid,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    let k = draw.dict.k;
    let init_mean = DVector::zeros(3 * k);
    let init_cov = stacked_init_cov(k, cfg.sigma2_mu_psi, cfg.sigma2_alpha_psi);
    draw_psi_states(
        draw,
        &data.to_observations(),
        grid,
        (&init_mean, &init_cov),
        rng,
    )
}

pub fn step4_update_psi_variances<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    grid: &TimeGrid,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    let (f, a) = psi_variance_conditionals(&draw.dict, grid, cfg)?;
    for (e, (pf, pa)) in f.iter().zip(&a).enumerate() {
        draw.ngp_vars.sigma2_psi[e] = pf.sample(rng)?;
        draw.ngp_vars.sigma2_b[e] = pa.sample(rng)?;
    }
    Ok(())
}

/// Per-step conditionals of `nu_i`: precision `I + Lambda^T S^-1 Lambda`
/// and `rhs = Lambda^T S^-1 (y_i - Lambda psi_i)` with `Lambda = Theta xi(t_i)`,
/// restricted to observed rows.
pub fn nu_conditionals(draw: &PosteriorDraw, data: &Dataset) -> Vec<GaussianParams> {
    let k = draw.dict.k;
    (0..data.len())
        .map(|i| {
            let idx = data.observed_indices(i);
            let lambda = select_rows(&(&draw.loadings.theta * draw.dict.xi(i)), &idx);
            let prec_s =
                DVector::from_iterator(idx.len(), idx.iter().map(|&j| 1.0 / draw.sigma2_idio[j]));
            let y = select_entries(&data.column_filled(i), &idx);
            let resid = y - &lambda * draw.dict.psi(i);
            let weighted = DMatrix::from_fn(idx.len(), k, |r, c| lambda[(r, c)] * prec_s[r]);
            let precision = DMatrix::identity(k, k) + weighted.transpose() * &lambda;
            let rhs = weighted.transpose() * resid;
            GaussianParams { precision, rhs }
        })
        .collect()
}

pub fn step5_update_nu<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    data: &Dataset,
    rng: &mut R,
) -> Result<()> {
    let conds = nu_conditionals(draw, data);
    for (i, c) in conds.iter().enumerate() {
        let nu = c.sample(rng)?;
        draw.factors.nu.set_column(i, &nu);
    }
    draw.factors.refresh_eta(&draw.dict);
    Ok(())
}

/// Conditionals of the idiosyncratic precisions `sigma_j^-2`.
pub fn sigma0_conditionals(
    draw: &PosteriorDraw,
    data: &Dataset,
    cfg: &LafConfig,
) -> Vec<GammaParams> {
    let p = data.p();
    let mut count = vec![0usize; p];
    let mut ss = vec![0.0; p];
    for i in 0..data.len() {
        let fit = &draw.loadings.theta * (draw.dict.xi(i) * draw.factors.eta.column(i));
        for j in data.observed_indices(i) {
            let r = data.values[(j, i)] - fit[j];
            count[j] += 1;
            ss[j] += r * r;
        }
    }
    (0..p)
        .map(|j| GammaParams {
            shape: cfg.a_sigma + count[j] as f64 / 2.0,
            rate: cfg.b_sigma + 0.5 * ss[j],
        })
        .collect()
}

pub fn step6_update_sigma0<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    data: &Dataset,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    for (j, c) in sigma0_conditionals(draw, data, cfg).iter().enumerate() {
        draw.sigma2_idio[j] = 1.0 / c.sample(rng)?;
    }
    Ok(())
}

/// Per-row conditionals of `Theta`: precision
/// `sigma_j^-2 sum_i x_i x_i^T + diag(phi_j tau)` and `rhs = sigma_j^-2 sum_i x_i y_ji`
/// with `x_i = xi(t_i) eta_i`, summing over observed cells of series `j`.
pub fn theta_conditionals(draw: &PosteriorDraw, data: &Dataset) -> Vec<GaussianParams> {
    let (p, l) = draw.loadings.theta.shape();
    let tau = draw.loadings.tau();
    let x: Vec<DVector<f64>> = (0..data.len())
        .map(|i| draw.dict.xi(i) * draw.factors.eta.column(i))
        .collect();
    (0..p)
        .map(|j| {
            let prec_j = 1.0 / draw.sigma2_idio[j];
            let mut precision = DMatrix::from_diagonal(&DVector::from_fn(l, |c, _| {
                draw.loadings.phi[(j, c)] * tau[c]
            }));
            let mut rhs = DVector::zeros(l);
            for (i, xi) in x.iter().enumerate() {
                if data.observed[(j, i)] {
                    precision.ger(prec_j, xi, xi, 1.0);
                    rhs.axpy(prec_j * data.values[(j, i)], xi, 1.0);
                }
            }
            GaussianParams { precision, rhs }
        })
        .collect()
}

pub fn step7_update_theta<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    data: &Dataset,
    rng: &mut R,
) -> Result<()> {
    for (j, c) in theta_conditionals(draw, data).iter().enumerate() {
        let row = c.sample(rng)?;
        draw.loadings.theta.set_row(j, &row.transpose());
    }
    Ok(())
}

/// `phi_jl | . ~ Ga(2, (3 + tau_l theta_jl^2) / 2)`, as a `p x L` table.
pub fn phi_conditionals(loadings: &Loadings) -> Vec<Vec<GammaParams>> {
    let (p, l) = loadings.theta.shape();
    let tau = loadings.tau();
    (0..p)
        .map(|j| {
            (0..l)
                .map(|c| GammaParams {
                    shape: 2.0,
                    rate: 0.5 * (3.0 + tau[c] * loadings.theta[(j, c)].powi(2)),
                })
                .collect()
        })
        .collect()
}

pub fn step8_update_phi<R: Rng + ?Sized>(draw: &mut PosteriorDraw, rng: &mut R) -> Result<()> {
    let conds = phi_conditionals(&draw.loadings);
    for (j, row) in conds.iter().enumerate() {
        for (c, g) in row.iter().enumerate() {
            draw.loadings.phi[(j, c)] = g.sample(rng)?;
        }
    }
    Ok(())
}

/// Conditional of `vartheta_h` given the current values of the other factors.
///
/// Only columns `l >= h` involve `vartheta_h`, so the rate sums over them with
/// `tau_l^(-h) = prod_{t <= l, t != h} vartheta_t`.
pub fn vartheta_conditional(loadings: &Loadings, h: usize, cfg: &LafConfig) -> GammaParams {
    let (p, l) = loadings.theta.shape();
    let mut rate = 1.0;
    let mut tau_minus = 1.0;
    for col in 0..l {
        if col != h {
            tau_minus *= loadings.vartheta[col];
        }
        if col >= h {
            let s: f64 = (0..p)
                .map(|j| loadings.phi[(j, col)] * loadings.theta[(j, col)].powi(2))
                .sum();
            rate += 0.5 * tau_minus * s;
        }
    }
    let a = if h == 0 { cfg.a1 } else { cfg.a2 };
    GammaParams {
        shape: a + (p * (l - h)) as f64 / 2.0,
        rate,
    }
}

pub fn step9_update_vartheta<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    for h in 0..draw.loadings.vartheta.len() {
        let g = vartheta_conditional(&draw.loadings, h, cfg);
        draw.loadings.vartheta[h] = g.sample(rng)?;
    }
    Ok(())
}

/// One full sweep of steps 1-9.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    draw: &mut PosteriorDraw,
    data: &Dataset,
    grid: &TimeGrid,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<()> {
    step1_update_xi(draw, data, grid, cfg, rng)?;
    step2_update_xi_variances(draw, grid, cfg, rng)?;
    step3_update_psi(draw, data, grid, cfg, rng)?;
    step4_update_psi_variances(draw, grid, cfg, rng)?;
    step5_update_nu(draw, data, rng)?;
    step6_update_sigma0(draw, data, cfg, rng)?;
    step7_update_theta(draw, data, rng)?;
    step8_update_phi(draw, rng)?;
    step9_update_vartheta(draw, cfg, rng)?;
    Ok(())
}

/// Log-density of the observed cells under `y_i ~ N(mu(t_i), Sigma(t_i))`.
pub fn data_log_likelihood(path: &MeanCovPath, data: &Dataset) -> f64 {
    (0..data.len())
        .map(|i| {
            let idx = data.observed_indices(i);
            let y = select_entries(&data.column_filled(i), &idx);
            let mu = select_entries(&path.mu.column(i).into_owned(), &idx);
            let s = select_square(&path.sigma[i], &idx);
            mvn_log_density(&y, &mu, &s).unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub chain: usize,
    pub iteration: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub seed: u64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub wall_time_secs: f64,
    pub grid: TimeGrid,
}

/// Retained (post burn-in, thinned) draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub draws: Vec<PosteriorDraw>,
    /// Composed paths for each retained draw when `retain_composed` is set.
    pub composed: Option<Vec<MeanCovPath>>,
    /// Data log-likelihood of each retained draw.
    pub log_likelihood: Vec<f64>,
    pub meta: ChainMeta,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Composed path of retained draw `d`, from the cache when available.
    pub fn composed_path(&self, d: usize) -> MeanCovPath {
        match &self.composed {
            Some(c) => c[d].clone(),
            None => compose_gamma(&self.draws[d]),
        }
    }
}

/// Runs one chain of `cfg.n_iter` sweeps.
pub fn run_gibbs<R: Rng + ?Sized>(
    cfg: &LafConfig,
    data: &Dataset,
    rng: &mut R,
    mut progress: Option<&mut dyn FnMut(Progress)>,
) -> Result<Chain> {
    run_gibbs_indexed(cfg, data, 0, rng, &mut progress)
}

fn run_gibbs_indexed<R: Rng + ?Sized>(
    cfg: &LafConfig,
    data: &Dataset,
    chain: usize,
    rng: &mut R,
    progress: &mut Option<&mut dyn FnMut(Progress)>,
) -> Result<Chain> {
    validate_config(cfg)?;
    if cfg.p != data.p() {
        return Err(Error::Config(vec![format!(
            "p is {} but the data has {} series",
            cfg.p,
            data.p()
        )]));
    }
    if data.is_empty() {
        return Err(Error::Data("no observations".into()));
    }
    let start = Instant::now();
    let grid = TimeGrid::rescaled(data.times.clone())?;
    let mut draw = init_chain(cfg, data, rng)?;
    let mut draws = Vec::with_capacity(cfg.retained());
    let mut composed = cfg.retain_composed.then(Vec::new);
    let mut loglik = Vec::with_capacity(cfg.retained());
    for it in 0..cfg.n_iter {
        gibbs_sweep(&mut draw, data, &grid, cfg, rng).map_err(|e| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        })?;
        let keep = it >= cfg.burn_in && (it - cfg.burn_in + 1).is_multiple_of(cfg.thin);
        if !keep && progress.is_none() {
            continue;
        }
        let path = compose(
            &draw.loadings.theta,
            &draw.sigma2_idio,
            &draw.dict.xi_path(),
            &draw.dict.psi_path(),
        )?;
        let ll = data_log_likelihood(&path, data);
        if let Some(cb) = progress.as_mut() {
            cb(Progress {
                chain,
                iteration: it,
                log_likelihood: ll,
            });
        }
        if keep {
            draws.push(draw.clone());
            loglik.push(ll);
            if let Some(c) = composed.as_mut() {
                c.push(path);
            }
        }
    }
    Ok(Chain {
        draws,
        composed,
        log_likelihood: loglik,
        meta: ChainMeta {
            chain,
            seed: cfg.seed,
            n_iter: cfg.n_iter,
            burn_in: cfg.burn_in,
            thin: cfg.thin,
            wall_time_secs: start.elapsed().as_secs_f64(),
            grid,
        },
    })
}

/// Generator for chain `chain` of a run seeded with `seed`: each chain reads
/// its own ChaCha stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs `n_chains` chains on up to `threads` worker threads.
pub fn run_chains(
    cfg: &LafConfig,
    data: &Dataset,
    n_chains: usize,
    threads: usize,
    progress: Option<&(dyn Fn(Progress) + Sync)>,
) -> Result<Vec<Chain>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Chain>>>> =
        Mutex::new((0..n_chains).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n_chains.max(1)) {
            s.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::SeqCst);
                if c >= n_chains {
                    break;
                }
                let mut rng = chain_rng(cfg.seed, c);
                let mut cb = progress.map(|f| move |pr: Progress| f(pr));
                let mut hook: Option<&mut dyn FnMut(Progress)> =
                    cb.as_mut().map(|f| f as &mut dyn FnMut(Progress));
                let out = run_gibbs_indexed(cfg, data, c, &mut rng, &mut hook);
                results.lock().unwrap()[c] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every chain index is claimed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_draw() -> PosteriorDraw {
        let xi = vec![DMatrix::from_element(1, 1, 1.0)];
        let psi = vec![DVector::from_element(1, 0.0)];
        let dict = DictionaryPaths::from_values(&xi, &psi).unwrap();
        PosteriorDraw {
            loadings: Loadings {
                theta: DMatrix::from_element(1, 1, 1.0),
                phi: DMatrix::from_element(1, 1, 1.0),
                vartheta: DVector::from_element(1, 1.0),
            },
            sigma2_idio: DVector::from_element(1, 1.0),
            factors: FactorState::from_nu(DMatrix::zeros(1, 1), &dict),
            dict,
            ngp_vars: NgpVariances::constant(1, 1, 1.0, 1.0, 1.0, 1.0),
        }
    }

    #[test]
    fn scalar_nu_conjugacy() {
        let draw = tiny_draw();
        let data = Dataset::fully_observed(vec![1.0], DMatrix::from_element(1, 1, 2.0)).unwrap();
        let c = &nu_conditionals(&draw, &data)[0];
        assert!((c.mean().unwrap()[0] - 1.0).abs() < 1e-14);
        assert!((c.cov().unwrap()[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn missing_step_restores_nu_prior() {
        let draw = tiny_draw();
        let data = Dataset::missing(1, vec![1.0]).unwrap();
        let c = &nu_conditionals(&draw, &data)[0];
        assert_eq!(c.precision, DMatrix::identity(1, 1));
        assert_eq!(c.rhs[0], 0.0);
    }

    #[test]
    fn ngp_variance_hand_sum() {
        // T=2, delta=1, xi'=(0,1), A=(0,.)
        let s0 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let s1 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let (f, a) =
            ngp_variance_conditionals(&[s0, s1], 1, &[1.0], (2.0, 3.0), (2.0, 3.0)).unwrap();
        assert_eq!(f[0].scale, 3.5);
        assert_eq!(a[0].scale, 3.0);
    }

    #[test]
    fn vartheta_single_column() {
        let mut d = tiny_draw();
        d.loadings.phi[(0, 0)] = 2.0;
        let g = vartheta_conditional(
            &d.loadings,
            0,
            &LafConfig {
                a1: 2.0,
                ..LafConfig::default()
            },
        );
        assert_eq!(
            g,
            GammaParams {
                shape: 2.5,
                rate: 2.0
            }
        );
    }

    #[test]
    fn phi_at_unit_theta() {
        let d = tiny_draw();
        assert_eq!(
            phi_conditionals(&d.loadings)[0][0],
            GammaParams {
                shape: 2.0,
                rate: 2.0
            }
        );
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }
}
