//! Independent oracles for the state-space recursions and the Gibbs conditionals.

use laf_core::model::{FactorState, LafConfig, Loadings, PosteriorDraw};
use laf_core::ngp::{DictionaryPaths, NgpVariances, TimeGrid};
use laf_core::sampler::*;
use laf_core::statespace::{kalman_smoother, simulation_smoother};
use laf_core::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;

/// Largest relative deviation of filtered/smoothed moments and log-likelihood
/// from joint conditioning over `systems` random systems.
pub fn kalman_vs_joint(systems: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for s in 0..systems {
        let n = 1 + s % 5;
        let m = 1 + (s / 5) % 3;
        let p = 1 + r.random_range(0..3);
        let sys = random_system(n, m, p, &mut r);
        let obs = random_observations(n, p, if s % 2 == 0 { 0.0 } else { 0.3 }, &mut r);
        let joint = JointGaussian::build(&sys, &obs);
        let out = kalman_smoother(&sys, &obs).unwrap();
        let full = joint.conditional(n);
        for i in 0..n {
            let filt = joint.step_moments(&joint.conditional(i + 1), i);
            let sm = joint.step_moments(&full, i);
            worst = worst
                .max(max_rel_err_v(&out.filtered_means[i], &filt.0))
                .max(max_rel_err(&out.filtered_covs[i], &filt.1))
                .max(max_rel_err_v(&out.smoothed_means[i], &sm.0))
                .max(max_rel_err(&out.smoothed_covs[i], &sm.1));
        }
        let ll = joint.log_likelihood();
        worst = worst.max((out.log_likelihood - ll).abs() / ll.abs().max(1.0));
    }
    worst
}

/// Largest `|empirical - exact| / MC-SE` over the per-step means and
/// covariance entries of simulation-smoother draws on a 3-state, 20-step system.
pub fn simulation_smoother_z(draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, m) = (20, 3);
    let sys = random_system(n, m, 2, &mut r);
    let obs = random_observations(n, 2, 0.2, &mut r);
    let exact = kalman_smoother(&sys, &obs).unwrap();
    let mut sum = vec![DVector::<f64>::zeros(m); n];
    let mut paths = Vec::with_capacity(draws);
    for _ in 0..draws {
        let path = simulation_smoother(&sys, &obs, &mut r).unwrap();
        for i in 0..n {
            sum[i] += &path[i];
        }
        paths.push(path);
    }
    let nd = draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mean = &exact.smoothed_means[i];
        let cov = &exact.smoothed_covs[i];
        let emp_mean = &sum[i] / nd;
        for a in 0..m {
            worst = worst.max((emp_mean[a] - mean[a]).abs() / (cov[(a, a)] / nd).sqrt());
        }
        for a in 0..m {
            for b in a..m {
                let emp: f64 = paths
                    .iter()
                    .map(|p| (p[i][a] - mean[a]) * (p[i][b] - mean[b]))
                    .sum::<f64>()
                    / nd;
                let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / nd).sqrt();
                worst = worst.max((emp - cov[(a, b)]).abs() / se);
            }
        }
    }
    worst
}

pub struct ConditionalFixture {
    pub cfg: LafConfig,
    pub draw: PosteriorDraw,
    pub data: Dataset,
    pub grid: TimeGrid,
}

pub fn conditional_fixture(seed: u64) -> ConditionalFixture {
    let mut r = rng(seed);
    let (p, l, k, n) = (4, 3, 2, 30);
    let cfg = LafConfig {
        p,
        l_star: l,
        k_star: k,
        a_xi: 3.0,
        b_xi: 0.5,
        a_a: 2.5,
        b_a: 0.2,
        a_psi: 1.5,
        b_psi: 0.3,
        a_b: 4.0,
        b_b: 2.0,
        a1: 2.0,
        a2: 3.0,
        a_sigma: 1.0,
        b_sigma: 0.1,
        ..LafConfig::default()
    };
    let mut times = vec![0.0; n];
    for i in 1..n {
        times[i] = times[i - 1] + r.random_range(0.5..2.0);
    }
    let grid = TimeGrid::rescaled(times.clone()).unwrap();
    let xi: Vec<DMatrix<f64>> = (0..n).map(|_| normal_matrix(l, k, &mut r)).collect();
    let psi: Vec<DVector<f64>> = (0..n)
        .map(|_| normal_matrix(k, 1, &mut r).column(0).into_owned())
        .collect();
    let mut dict = DictionaryPaths::from_values(&xi, &psi).unwrap();
    for s in dict.xi_states.iter_mut().chain(dict.psi_states.iter_mut()) {
        for v in s.iter_mut() {
            *v += 0.5 * r.random::<f64>();
        }
    }
    let phi = DMatrix::from_fn(p, l, |_, _| r.random_range(0.3..3.0));
    let vartheta = DVector::from_fn(l, |_, _| r.random_range(0.5..2.5));
    let theta = normal_matrix(p, l, &mut r);
    let sigma2_idio = DVector::from_fn(p, |_, _| r.random_range(0.2..1.5));
    let nu = normal_matrix(k, n, &mut r);
    let draw = PosteriorDraw {
        loadings: Loadings {
            theta,
            phi,
            vartheta,
        },
        sigma2_idio,
        factors: FactorState::from_nu(nu, &dict),
        dict,
        ngp_vars: NgpVariances::constant(l, k, 1.0, 1.0, 1.0, 1.0),
    };
    let cells: Vec<Vec<Option<f64>>> = (0..p)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let z: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                    (r.random::<f64>() > 0.1).then_some(2.0 * z)
                })
                .collect()
        })
        .collect();
    let data = Dataset::from_options(times, &cells).unwrap();
    ConditionalFixture {
        cfg,
        draw,
        data,
        grid,
    }
}

fn sup_density_gap(
    lo: f64,
    hi: f64,
    log_unnorm: impl Fn(f64) -> f64,
    log_density: impl Fn(f64) -> f64,
) -> f64 {
    let (xs, ys) = grid_density(lo, hi, 20_000, log_unnorm);
    xs.iter()
        .zip(&ys)
        .map(|(&x, &y)| (y - log_density(x).exp()).abs())
        .fold(0.0, f64::max)
}

fn invgamma_log_prior(x: f64, a: f64, b: f64) -> f64 {
    -(a + 1.0) * x.ln() - b / x
}

fn gamma_log_prior(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() - b * x
}

/// Sup-norm gaps between the closed-form nGP variance conditionals and the
/// normalized prior times Gaussian-increment likelihood on a grid.
fn ngp_variance_gap(
    states: &[DVector<f64>],
    blocks: usize,
    deltas: &[f64],
    prior_f: (f64, f64),
    prior_a: (f64, f64),
    closed: (Vec<InvGammaParams>, Vec<InvGammaParams>),
) -> f64 {
    let mut worst: f64 = 0.0;
    for e in 0..blocks {
        let incs_f: Vec<f64> = (0..deltas.len())
            .map(|i| {
                states[i + 1][blocks + e]
                    - states[i][blocks + e]
                    - states[i][2 * blocks + e] * deltas[i]
            })
            .collect();
        let incs_a: Vec<f64> = (0..deltas.len())
            .map(|i| states[i + 1][2 * blocks + e] - states[i][2 * blocks + e])
            .collect();
        for (incs, prior, post) in [
            (&incs_f, prior_f, closed.0[e]),
            (&incs_a, prior_a, closed.1[e]),
        ] {
            let centre = post.scale / (post.shape + 1.0);
            let hi = 40.0 * centre;
            let gap = sup_density_gap(
                hi * 1e-7,
                hi,
                |s| {
                    invgamma_log_prior(s, prior.0, prior.1)
                        + incs
                            .iter()
                            .zip(deltas)
                            .map(|(x, &d)| normal_logpdf(*x, 0.0, s * d))
                            .sum::<f64>()
                },
                |s| post.log_density(s),
            );
            worst = worst.max(gap);
        }
    }
    worst
}

pub fn step2_gap(fx: &ConditionalFixture) -> f64 {
    let d = &fx.draw.dict;
    let closed = xi_variance_conditionals(d, &fx.grid, &fx.cfg).unwrap();
    ngp_variance_gap(
        &d.xi_states,
        d.l * d.k,
        &fx.grid.deltas(),
        (fx.cfg.a_xi, fx.cfg.b_xi),
        (fx.cfg.a_a, fx.cfg.b_a),
        closed,
    )
}

pub fn step4_gap(fx: &ConditionalFixture) -> f64 {
    let d = &fx.draw.dict;
    let closed = psi_variance_conditionals(d, &fx.grid, &fx.cfg).unwrap();
    ngp_variance_gap(
        &d.psi_states,
        d.k,
        &fx.grid.deltas(),
        (fx.cfg.a_psi, fx.cfg.b_psi),
        (fx.cfg.a_b, fx.cfg.b_b),
        closed,
    )
}

/// Moment gaps of the latent-factor conditionals against the covariance-form
/// Gaussian conditioning of `nu_i` on `y_i`.
pub fn step5_gap(fx: &ConditionalFixture) -> f64 {
    let d = &fx.draw;
    let k = d.dict.k;
    let mut worst: f64 = 0.0;
    for (i, c) in nu_conditionals(d, &fx.data).iter().enumerate() {
        let idx = fx.data.observed_indices(i);
        let lambda_full = &d.loadings.theta * d.dict.xi(i);
        let lam = DMatrix::from_fn(idx.len(), k, |r, col| lambda_full[(idx[r], col)]);
        let s = DMatrix::from_diagonal(&DVector::from_fn(idx.len(), |r, _| d.sigma2_idio[idx[r]]));
        let y = DVector::from_fn(idx.len(), |r, _| fx.data.values[(idx[r], i)]);
        let (mean, cov) = if idx.is_empty() {
            (DVector::zeros(k), DMatrix::identity(k, k))
        } else {
            let inv = (&lam * lam.transpose() + s).try_inverse().unwrap();
            let resid = y - &lam * d.dict.psi(i);
            (
                lam.transpose() * &inv * resid,
                DMatrix::identity(k, k) - lam.transpose() * &inv * &lam,
            )
        };
        worst = worst
            .max((c.mean().unwrap() - mean).amax())
            .max((c.cov().unwrap() - cov).amax());
    }
    worst
}

pub fn step6_gap(fx: &ConditionalFixture) -> f64 {
    let d = &fx.draw;
    let mut worst: f64 = 0.0;
    for (j, post) in sigma0_conditionals(d, &fx.data, &fx.cfg).iter().enumerate() {
        let resid: Vec<f64> = (0..fx.data.len())
            .filter(|&i| fx.data.observed[(j, i)])
            .map(|i| {
                let fit = (&d.loadings.theta * d.dict.xi(i) * d.factors.eta.column(i))[j];
                fx.data.values[(j, i)] - fit
            })
            .collect();
        let hi = 12.0 * post.shape / post.rate;
        let gap = sup_density_gap(
            hi * 1e-7,
            hi,
            |lam| {
                gamma_log_prior(lam, fx.cfg.a_sigma, fx.cfg.b_sigma)
                    + resid
                        .iter()
                        .map(|r| normal_logpdf(*r, 0.0, 1.0 / lam))
                        .sum::<f64>()
            },
            |lam| post.log_density(lam),
        );
        worst = worst.max(gap);
    }
    worst
}

/// Moment gaps of the loadings-row conditionals against the covariance-form
/// posterior of a Gaussian linear model.
pub fn step7_gap(fx: &ConditionalFixture) -> f64 {
    let d = &fx.draw;
    let l = d.loadings.theta.ncols();
    let tau = d.loadings.tau();
    let mut worst: f64 = 0.0;
    for (j, c) in theta_conditionals(d, &fx.data).iter().enumerate() {
        let obs: Vec<usize> = (0..fx.data.len())
            .filter(|&i| fx.data.observed[(j, i)])
            .collect();
        let x = DMatrix::from_fn(obs.len(), l, |r, col| {
            (d.dict.xi(obs[r]) * d.factors.eta.column(obs[r]))[col]
        });
        let y = DVector::from_fn(obs.len(), |r, _| fx.data.values[(j, obs[r])]);
        let prior_cov = DMatrix::from_diagonal(&DVector::from_fn(l, |col, _| {
            1.0 / (d.loadings.phi[(j, col)] * tau[col])
        }));
        let syy = &x * &prior_cov * x.transpose()
            + DMatrix::identity(obs.len(), obs.len()) * d.sigma2_idio[j];
        let gain = &prior_cov * x.transpose() * syy.try_inverse().unwrap();
        let mean = &gain * y;
        let cov = &prior_cov - &gain * &x * &prior_cov;
        worst = worst
            .max((c.mean().unwrap() - mean).amax())
            .max((c.cov().unwrap() - cov).amax());
    }
    worst
}

pub fn step8_gap(fx: &ConditionalFixture) -> f64 {
    let ld = &fx.draw.loadings;
    let tau = ld.tau();
    let mut worst: f64 = 0.0;
    for (j, row) in phi_conditionals(ld).iter().enumerate() {
        for (col, post) in row.iter().enumerate() {
            let th = ld.theta[(j, col)];
            let hi = 15.0 * post.shape / post.rate;
            let gap = sup_density_gap(
                hi * 1e-7,
                hi,
                |f| gamma_log_prior(f, 1.5, 1.5) + normal_logpdf(th, 0.0, 1.0 / (f * tau[col])),
                |f| post.log_density(f),
            );
            worst = worst.max(gap);
        }
    }
    worst
}

pub fn step9_gap(fx: &ConditionalFixture) -> f64 {
    let ld = &fx.draw.loadings;
    let (p, l) = ld.theta.shape();
    let mut worst: f64 = 0.0;
    for h in 0..l {
        let post = vartheta_conditional(ld, h, &fx.cfg);
        let a = if h == 0 { fx.cfg.a1 } else { fx.cfg.a2 };
        let hi = 15.0 * post.shape / post.rate;
        let gap = sup_density_gap(
            hi * 1e-7,
            hi,
            |v| {
                let mut vt = ld.vartheta.clone();
                vt[h] = v;
                let mut ll = gamma_log_prior(v, a, 1.0);
                for col in 0..l {
                    let tau: f64 = vt.rows(0, col + 1).iter().product();
                    for j in 0..p {
                        ll +=
                            normal_logpdf(ld.theta[(j, col)], 0.0, 1.0 / (ld.phi[(j, col)] * tau));
                    }
                }
                ll
            },
            |v| post.log_density(v),
        );
        worst = worst.max(gap);
    }
    worst
}

/// `(step, gap)` for every checked conditional.
pub fn all_conditional_gaps(seed: u64) -> Vec<(&'static str, f64)> {
    let fx = conditional_fixture(seed);
    vec![
        ("step 2", step2_gap(&fx)),
        ("step 4", step4_gap(&fx)),
        ("step 5", step5_gap(&fx)),
        ("step 6", step6_gap(&fx)),
        ("step 7", step7_gap(&fx)),
        ("step 8", step8_gap(&fx)),
        ("step 9", step9_gap(&fx)),
    ]
}
