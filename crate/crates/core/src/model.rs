//! Model configuration, posterior draw types and the induced mean/covariance paths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ngp::{DictionaryPaths, NgpVariances};
use crate::{Error, Result};

/// Truncation levels, prior hyperparameters and MCMC controls.
///
/// `Default` gives the locally-varying-smoothness simulation settings:
/// `L* = K* = 2`, `InvGa(2, 1e8)` on the loadings-dictionary variances,
/// `InvGa(0.005, 0.005)` on the mean-dictionary variances, `Ga(1, 0.1)` on the
/// idiosyncratic precisions, `a1 = a2 = 2`, initial-state variances 100, and
/// 50,000 iterations with 20,000 burn-in and thinning 5.
///
/// Gamma distributions use the shape/rate convention; inverse gammas are
/// shape/scale with density proportional to `x^(-a-1) exp(-b/x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LafConfig {
    pub p: usize,
    pub l_star: usize,
    pub k_star: usize,
    pub a_xi: f64,
    pub b_xi: f64,
    #[serde(rename = "a_A")]
    pub a_a: f64,
    #[serde(rename = "b_A")]
    pub b_a: f64,
    pub a_psi: f64,
    pub b_psi: f64,
    #[serde(rename = "a_B")]
    pub a_b: f64,
    #[serde(rename = "b_B")]
    pub b_b: f64,
    pub a1: f64,
    pub a2: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Initial variance of the value and derivative coordinates of `xi`.
    pub sigma2_mu: f64,
    /// Initial variance of the instantaneous-mean coordinates of `xi`.
    pub sigma2_alpha: f64,
    #[serde(rename = "sigma2_mu_k")]
    pub sigma2_mu_psi: f64,
    #[serde(rename = "sigma2_alpha_k")]
    pub sigma2_alpha_psi: f64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Keep every composed `(mu, Sigma)` path in the chain (memory heavy).
    pub retain_composed: bool,
    /// Number of trailing observations re-processed by online updates.
    pub warmstart: usize,
    /// Diffuse initial state variance used at the start of an online window.
    pub online_init_var: f64,
    pub online_iter: usize,
    pub online_burn_in: usize,
}

impl Default for LafConfig {
    fn default() -> Self {
        Self {
            p: 5,
            l_star: 2,
            k_star: 2,
            a_xi: 2.0,
            b_xi: 1e8,
            a_a: 2.0,
            b_a: 1e8,
            a_psi: 0.005,
            b_psi: 0.005,
            a_b: 0.005,
            b_b: 0.005,
            a1: 2.0,
            a2: 2.0,
            a_sigma: 1.0,
            b_sigma: 0.1,
            sigma2_mu: 100.0,
            sigma2_alpha: 100.0,
            sigma2_mu_psi: 100.0,
            sigma2_alpha_psi: 100.0,
            n_iter: 50_000,
            burn_in: 20_000,
            thin: 5,
            seed: 0,
            retain_composed: false,
            warmstart: 3,
            online_init_var: 100.0,
            online_iter: 5_000,
            online_burn_in: 500,
        }
    }
}

impl LafConfig {
    /// Smooth-dictionary simulation settings: `L* = 5`, `K* = 4`, scale `1e4` on
    /// the loadings-dictionary variances, 10,000 iterations with 5,000 burn-in.
    pub fn smooth_scenario() -> Self {
        Self {
            p: 10,
            l_star: 5,
            k_star: 4,
            b_xi: 1e4,
            b_a: 1e4,
            n_iter: 10_000,
            burn_in: 5_000,
            ..Self::default()
        }
    }

    /// Number of retained draws.
    pub fn retained(&self) -> usize {
        if self.thin == 0 || self.burn_in >= self.n_iter {
            return 0;
        }
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Reports every invariant violation by field name.
pub fn validate_config(cfg: &LafConfig) -> Result<()> {
    let mut issues = Vec::new();
    let positive = [
        ("a_xi", cfg.a_xi),
        ("b_xi", cfg.b_xi),
        ("a_A", cfg.a_a),
        ("b_A", cfg.b_a),
        ("a_psi", cfg.a_psi),
        ("b_psi", cfg.b_psi),
        ("a_B", cfg.a_b),
        ("b_B", cfg.b_b),
        ("a1", cfg.a1),
        ("a2", cfg.a2),
        ("a_sigma", cfg.a_sigma),
        ("b_sigma", cfg.b_sigma),
        ("sigma2_mu", cfg.sigma2_mu),
        ("sigma2_alpha", cfg.sigma2_alpha),
        ("sigma2_mu_k", cfg.sigma2_mu_psi),
        ("sigma2_alpha_k", cfg.sigma2_alpha_psi),
        ("online_init_var", cfg.online_init_var),
    ];
    for (name, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            issues.push(format!("{name} must be positive and finite (got {v})"));
        }
    }
    for (name, v) in [
        ("p", cfg.p),
        ("l_star", cfg.l_star),
        ("k_star", cfg.k_star),
        ("thin", cfg.thin),
    ] {
        if v < 1 {
            issues.push(format!("{name} must be at least 1"));
        }
    }
    if cfg.burn_in >= cfg.n_iter {
        issues.push(format!(
            "burn_in ({}) must be smaller than n_iter ({})",
            cfg.burn_in, cfg.n_iter
        ));
    }
    if cfg.online_burn_in >= cfg.online_iter {
        issues.push(format!(
            "online_burn_in ({}) must be smaller than online_iter ({})",
            cfg.online_burn_in, cfg.online_iter
        ));
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(issues))
    }
}

/// Shrinkage-prior loadings `Theta` with local precisions `phi` and global
/// multiplicative gamma factors `vartheta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loadings {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub vartheta: DVector<f64>,
}

impl Loadings {
    /// Column shrinkage `tau_l = prod_{h <= l} vartheta_h`.
    pub fn tau(&self) -> DVector<f64> {
        cumulative_product(&self.vartheta)
    }
}

pub fn cumulative_product(v: &DVector<f64>) -> DVector<f64> {
    let mut acc = 1.0;
    DVector::from_iterator(
        v.len(),
        v.iter().map(|x| {
            acc *= x;
            acc
        }),
    )
}

/// Latent factors `eta_i = psi(t_i) + nu_i` (both `K x T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub nu: DMatrix<f64>,
    pub eta: DMatrix<f64>,
}

impl FactorState {
    pub fn from_nu(nu: DMatrix<f64>, dict: &DictionaryPaths) -> Self {
        let mut f = Self {
            eta: nu.clone(),
            nu,
        };
        f.refresh_eta(dict);
        f
    }

    pub fn refresh_eta(&mut self, dict: &DictionaryPaths) {
        for i in 0..self.nu.ncols() {
            let e = self.nu.column(i) + dict.psi(i);
            self.eta.set_column(i, &e);
        }
    }
}

/// One state of the Gibbs chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub loadings: Loadings,
    /// Diagonal of `Sigma0`.
    pub sigma2_idio: DVector<f64>,
    pub dict: DictionaryPaths,
    pub factors: FactorState,
    pub ngp_vars: NgpVariances,
}

impl PosteriorDraw {
    pub fn p(&self) -> usize {
        self.loadings.theta.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.dict.len()
    }
}

/// `mu(t_i)` (as the columns of a `p x T` matrix) and `Sigma(t_i)` for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCovPath {
    pub mu: DMatrix<f64>,
    pub sigma: Vec<DMatrix<f64>>,
}

impl MeanCovPath {
    pub fn p(&self) -> usize {
        self.mu.nrows()
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Steps `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> MeanCovPath {
        MeanCovPath {
            mu: self.mu.columns(start, end - start).into_owned(),
            sigma: self.sigma[start..end].to_vec(),
        }
    }
}

pub fn compose_gamma(draw: &PosteriorDraw) -> MeanCovPath {
    compose(
        &draw.loadings.theta,
        &draw.sigma2_idio,
        &draw.dict.xi_path(),
        &draw.dict.psi_path(),
    )
    .expect("posterior draw has consistent dimensions")
}

/// `mu = Theta xi psi`, `Sigma = Theta xi xi^T Theta^T + diag(sigma2)` at every step.
pub fn compose(
    theta: &DMatrix<f64>,
    sigma2: &DVector<f64>,
    xi: &[DMatrix<f64>],
    psi: &[DVector<f64>],
) -> Result<MeanCovPath> {
    let p = theta.nrows();
    if sigma2.len() != p || xi.len() != psi.len() {
        return Err(Error::Dimension("compose: inconsistent inputs".into()));
    }
    let n = xi.len();
    let s0 = DMatrix::from_diagonal(sigma2);
    let mut mu = DMatrix::zeros(p, n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        if xi[i].nrows() != theta.ncols() || xi[i].ncols() != psi[i].len() {
            return Err(Error::Dimension(format!(
                "compose: step {i} has mismatched xi/psi"
            )));
        }
        let lambda = theta * &xi[i];
        mu.set_column(i, &(&lambda * &psi[i]));
        sigma.push(&lambda * lambda.transpose() + &s0);
    }
    Ok(MeanCovPath { mu, sigma })
}
