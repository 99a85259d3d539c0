//! Online updating and prediction with the static parameters held fixed.
//!
//! `Theta`, `Sigma0` and the state-equation variances are fixed at their
//! posterior means, and only the dictionary states and latent factors are
//! resampled over the new window. The window either starts `k` observations
//! before the new data with a diffuse initial state (`k > 0`), or right after
//! the fitted sample from the one-step predictive distribution of the last
//! fitted state (`k = 0`). Forecasts treat future observations as missing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{GammaAccumulator, PosteriorSummary};
use crate::linalg::{check_psd, psd_factor, select_entries, select_square, symmetrize};
use crate::model::{compose, FactorState, LafConfig, Loadings, MeanCovPath, PosteriorDraw};
use crate::ngp::{stacked_noise_cov, stacked_transition, DictionaryPaths, NgpVariances, TimeGrid};
use crate::sampler::{draw_psi_states, draw_xi_states, step5_update_nu, Chain};
use crate::{Error, Result};

/// Posterior means of the static parameters and the moments of the last
/// dictionary states of a fitted chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    pub theta: DMatrix<f64>,
    pub sigma2_idio: DVector<f64>,
    pub ngp_vars: NgpVariances,
    pub xi_state_mean: DVector<f64>,
    pub xi_state_cov: DMatrix<f64>,
    pub psi_state_mean: DVector<f64>,
    pub psi_state_cov: DMatrix<f64>,
    /// Raw time of the last fitted observation.
    pub last_time: f64,
    /// Average raw spacing of the fitted times, used to place forecast steps.
    pub time_step: f64,
    /// Affine time map of the fitted grid.
    pub time_origin: f64,
    pub time_scale: f64,
}

impl FixedParams {
    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn l(&self) -> usize {
        self.theta.ncols()
    }

    pub fn k(&self) -> usize {
        self.psi_state_mean.len() / 3
    }

    pub fn validate(&self) -> Result<()> {
        let (p, l, k) = (self.p(), self.l(), self.k());
        let v = &self.ngp_vars;
        if self.sigma2_idio.len() != p
            || v.sigma2_xi.shape() != (l, k)
            || v.sigma2_a.shape() != (l, k)
            || v.sigma2_psi.len() != k
            || v.sigma2_b.len() != k
            || self.xi_state_mean.len() != 3 * l * k
            || self.xi_state_cov.shape() != (3 * l * k, 3 * l * k)
            || self.psi_state_mean.len() != 3 * k
            || self.psi_state_cov.shape() != (3 * k, 3 * k)
        {
            return Err(Error::Dimension(
                "fixed parameters have inconsistent shapes".into(),
            ));
        }
        if self.sigma2_idio.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(
                "idiosyncratic variances must be positive".into(),
            ));
        }
        let all = v
            .sigma2_xi
            .iter()
            .chain(v.sigma2_a.iter())
            .chain(v.sigma2_psi.iter())
            .chain(v.sigma2_b.iter());
        for s in all {
            if !(*s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "state-equation variance {s} is negative"
                )));
            }
        }
        check_psd(&self.xi_state_cov, "xi state covariance")?;
        check_psd(&self.psi_state_cov, "psi state covariance")?;
        if !(self.time_scale > 0.0 && self.time_step > 0.0) {
            return Err(Error::InvalidArgument(
                "time map must have positive scale and step".into(),
            ));
        }
        Ok(())
    }

    /// The fitted grid's time map applied to `times`.
    pub fn grid(&self, times: Vec<f64>) -> Result<TimeGrid> {
        TimeGrid::with_map(times, self.time_origin, self.time_scale)
    }
}

/// Mean and covariance (divisor `n - 1`, zero for a single vector).
pub fn sample_moments(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len();
    let d = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for x in xs {
            let c = x - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
    }
    symmetrize(&mut cov);
    (mean, cov)
}

/// Posterior means over the retained draws of `chain`.
pub fn extract_fixed_params(chain: &Chain) -> Result<FixedParams> {
    let n = chain.len();
    if n == 0 {
        return Err(Error::InvalidArgument("chain has no retained draws".into()));
    }
    let first = &chain.draws[0];
    let last = first.n_steps() - 1;
    let avg_m = |f: &dyn Fn(&PosteriorDraw) -> &DMatrix<f64>| {
        chain.draws.iter().fold(
            DMatrix::zeros(f(first).nrows(), f(first).ncols()),
            |a, d| a + f(d),
        ) / n as f64
    };
    let avg_v = |f: &dyn Fn(&PosteriorDraw) -> &DVector<f64>| {
        chain
            .draws
            .iter()
            .fold(DVector::zeros(f(first).len()), |a, d| a + f(d))
            / n as f64
    };
    let ngp_vars = NgpVariances {
        sigma2_xi: avg_m(&|d| &d.ngp_vars.sigma2_xi),
        sigma2_a: avg_m(&|d| &d.ngp_vars.sigma2_a),
        sigma2_psi: avg_v(&|d| &d.ngp_vars.sigma2_psi),
        sigma2_b: avg_v(&|d| &d.ngp_vars.sigma2_b),
    };
    let xi_last: Vec<DVector<f64>> = chain
        .draws
        .iter()
        .map(|d| d.dict.xi_states[last].clone())
        .collect();
    let psi_last: Vec<DVector<f64>> = chain
        .draws
        .iter()
        .map(|d| d.dict.psi_states[last].clone())
        .collect();
    let (xi_state_mean, xi_state_cov) = sample_moments(&xi_last);
    let (psi_state_mean, psi_state_cov) = sample_moments(&psi_last);
    let grid = &chain.meta.grid;
    let raw = &grid.raw;
    let time_step = if raw.len() > 1 {
        (raw[raw.len() - 1] - raw[0]) / (raw.len() - 1) as f64
    } else {
        1.0
    };
    Ok(FixedParams {
        theta: avg_m(&|d| &d.loadings.theta),
        sigma2_idio: avg_v(&|d| &d.sigma2_idio),
        ngp_vars,
        xi_state_mean,
        xi_state_cov,
        psi_state_mean,
        psi_state_cov,
        last_time: raw[raw.len() - 1],
        time_step,
        time_origin: grid.origin,
        time_scale: grid.scale,
    })
}

/// Retained composed paths over an online window.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineChain {
    pub grid: TimeGrid,
    /// Number of leading window steps that re-process already fitted data.
    pub n_history: usize,
    pub paths: Vec<MeanCovPath>,
}

impl OnlineChain {
    pub fn summary(&self, prob: f64) -> Result<PosteriorSummary> {
        summarize_paths(&self.paths, prob)
    }

    /// Summary restricted to the steps after the history tail.
    pub fn new_steps_summary(&self, prob: f64) -> Result<PosteriorSummary> {
        let n = self.grid.len();
        let sliced: Vec<MeanCovPath> = self
            .paths
            .iter()
            .map(|p| p.slice(self.n_history, n))
            .collect();
        summarize_paths(&sliced, prob)
    }
}

fn summarize_paths(paths: &[MeanCovPath], prob: f64) -> Result<PosteriorSummary> {
    let first = paths
        .first()
        .ok_or_else(|| Error::InvalidArgument("no retained paths".into()))?;
    let mut acc = GammaAccumulator::new(first.p(), first.len());
    for p in paths {
        acc.push(p)?;
    }
    acc.finish(prob)
}

fn fixed_draw(fixed: &FixedParams, n: usize, rng: &mut (impl Rng + ?Sized)) -> PosteriorDraw {
    let (l, k) = (fixed.l(), fixed.k());
    let dict = DictionaryPaths::zeros(l, k, n);
    let nu = DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(rng));
    PosteriorDraw {
        loadings: Loadings {
            theta: fixed.theta.clone(),
            phi: DMatrix::from_element(fixed.p(), l, 1.0),
            vartheta: DVector::from_element(l, 1.0),
        },
        sigma2_idio: fixed.sigma2_idio.clone(),
        factors: FactorState::from_nu(nu, &dict),
        dict,
        ngp_vars: fixed.ngp_vars.clone(),
    }
}

struct StateInit {
    xi_mean: DVector<f64>,
    xi_cov: DMatrix<f64>,
    psi_mean: DVector<f64>,
    psi_cov: DMatrix<f64>,
}

impl StateInit {
    fn diffuse(fixed: &FixedParams, c: f64) -> Self {
        let (m, k) = (fixed.l() * fixed.k(), fixed.k());
        Self {
            xi_mean: DVector::zeros(3 * m),
            xi_cov: DMatrix::identity(3 * m, 3 * m) * c,
            psi_mean: DVector::zeros(3 * k),
            psi_cov: DMatrix::identity(3 * k, 3 * k) * c,
        }
    }

    /// One-step predictive distribution of the state `delta` after the last fitted step.
    fn predictive(fixed: &FixedParams, delta: f64) -> Result<Self> {
        let (m, k) = (fixed.l() * fixed.k(), fixed.k());
        let v = &fixed.ngp_vars;
        let step = |blocks: usize,
                    mean: &DVector<f64>,
                    cov: &DMatrix<f64>,
                    s2f: &[f64],
                    s2a: &[f64]|
         -> Result<_> {
            let (t, r) = stacked_transition(blocks, delta)?;
            let q = stacked_noise_cov(s2f, s2a, delta);
            let mut c = &t * cov * t.transpose() + &r * q * r.transpose();
            symmetrize(&mut c);
            Ok((&t * mean, c))
        };
        let (xi_mean, xi_cov) = step(
            m,
            &fixed.xi_state_mean,
            &fixed.xi_state_cov,
            v.sigma2_xi.as_slice(),
            v.sigma2_a.as_slice(),
        )?;
        let (psi_mean, psi_cov) = step(
            k,
            &fixed.psi_state_mean,
            &fixed.psi_state_cov,
            v.sigma2_psi.as_slice(),
            v.sigma2_b.as_slice(),
        )?;
        Ok(Self {
            xi_mean,
            xi_cov,
            psi_mean,
            psi_cov,
        })
    }
}

fn run_fixed_gibbs<R: Rng + ?Sized>(
    fixed: &FixedParams,
    data: &Dataset,
    grid: TimeGrid,
    init: &StateInit,
    n_history: usize,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<OnlineChain> {
    if cfg.online_burn_in >= cfg.online_iter || cfg.thin == 0 {
        return Err(Error::Config(vec![
            "online_burn_in must be smaller than online_iter and thin positive".into(),
        ]));
    }
    let obs = data.to_observations();
    let mut draw = fixed_draw(fixed, data.len(), rng);
    let mut paths = Vec::new();
    for it in 0..cfg.online_iter {
        let sweep = |draw: &mut PosteriorDraw, rng: &mut R| -> Result<()> {
            draw_xi_states(draw, &obs, &grid, (&init.xi_mean, &init.xi_cov), rng)?;
            draw_psi_states(draw, &obs, &grid, (&init.psi_mean, &init.psi_cov), rng)?;
            step5_update_nu(draw, data, rng)
        };
        sweep(&mut draw, rng).map_err(|e| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        })?;
        if it >= cfg.online_burn_in && (it - cfg.online_burn_in + 1).is_multiple_of(cfg.thin) {
            paths.push(compose(
                &draw.loadings.theta,
                &draw.sigma2_idio,
                &draw.dict.xi_path(),
                &draw.dict.psi_path(),
            )?);
        }
    }
    Ok(OnlineChain {
        grid,
        n_history,
        paths,
    })
}

/// Resamples the dictionary states and factors over `history_tail` followed by
/// `new_data`, with the static parameters fixed.
///
/// A non-empty `history_tail` (the last `k` fitted observations) starts the
/// window from `N(0, c I)` with `c = cfg.online_init_var`. An empty tail
/// starts right after the fitted sample from the one-step predictive
/// distribution of the fitted last state.
pub fn online_update<R: Rng + ?Sized>(
    fixed: &FixedParams,
    history_tail: &Dataset,
    new_data: &Dataset,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<OnlineChain> {
    fixed.validate()?;
    for d in [history_tail, new_data] {
        if !d.is_empty() && d.p() != fixed.p() {
            return Err(Error::Dimension(format!(
                "data has {} series, fitted model has {}",
                d.p(),
                fixed.p()
            )));
        }
    }
    let window = if history_tail.is_empty() {
        new_data.clone()
    } else if new_data.is_empty() {
        history_tail.clone()
    } else {
        history_tail.concat(new_data)?
    };
    if window.is_empty() {
        return Err(Error::InvalidArgument("online window is empty".into()));
    }
    let grid = fixed.grid(window.times.clone())?;
    let init = if history_tail.is_empty() {
        let delta = grid.scaled[0] - fixed.grid(vec![fixed.last_time])?.scaled[0];
        if !(delta > 0.0) {
            return Err(Error::Data(
                "new observations must come after the fitted sample".into(),
            ));
        }
        StateInit::predictive(fixed, delta)?
    } else {
        if !(cfg.online_init_var > 0.0) {
            return Err(Error::Config(vec![
                "online_init_var must be positive".into()
            ]));
        }
        StateInit::diffuse(fixed, cfg.online_init_var)
    };
    run_fixed_gibbs(fixed, &window, grid, &init, history_tail.len(), cfg, rng)
}

/// Fixed-parameter smoother over a whole dataset from the diffuse initial state.
pub fn batch_fixed_smoother<R: Rng + ?Sized>(
    fixed: &FixedParams,
    data: &Dataset,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<OnlineChain> {
    fixed.validate()?;
    let grid = fixed.grid(data.times.clone())?;
    let init = StateInit::diffuse(fixed, cfg.online_init_var);
    run_fixed_gibbs(fixed, data, grid, &init, data.len(), cfg, rng)
}

/// Forecast draws for the `horizon` steps after the last known observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub times: Vec<f64>,
    /// Composed paths restricted to the forecast steps, one per retained draw.
    pub paths: Vec<MeanCovPath>,
    /// One predictive observation draw per retained path (`p x horizon`).
    pub y_draws: Vec<DMatrix<f64>>,
}

impl Prediction {
    pub fn summary(&self, prob: f64) -> Result<PosteriorSummary> {
        summarize_paths(&self.paths, prob)
    }

    /// Pointwise equal-tailed predictive interval of every `y_j(t_{T+h})`.
    pub fn y_intervals(&self, prob: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, h) = self.y_draws[0].shape();
        let mut lo = DMatrix::zeros(p, h);
        let mut hi = DMatrix::zeros(p, h);
        for j in 0..p {
            for i in 0..h {
                let vals: Vec<f64> = self.y_draws.iter().map(|y| y[(j, i)]).collect();
                let (a, b) = crate::diagnostics::equal_tailed_interval(&vals, prob);
                lo[(j, i)] = a;
                hi[(j, i)] = b;
            }
        }
        (lo, hi)
    }
}

/// Appends `horizon` fully missing steps after the known data and runs
/// [`online_update`]; the known data are `history_tail` (possibly empty) and
/// `realized` (observations after the fitted sample, possibly empty).
pub fn predict<R: Rng + ?Sized>(
    fixed: &FixedParams,
    history_tail: &Dataset,
    realized: &Dataset,
    horizon: usize,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<Prediction> {
    if horizon == 0 {
        return Err(Error::InvalidArgument(
            "prediction horizon must be at least 1".into(),
        ));
    }
    let last = realized
        .times
        .last()
        .or(history_tail.times.last())
        .copied()
        .unwrap_or(fixed.last_time)
        .max(fixed.last_time);
    let times: Vec<f64> = (1..=horizon)
        .map(|h| last + h as f64 * fixed.time_step)
        .collect();
    let future = Dataset::missing(fixed.p(), times.clone())?;
    let new_data = if realized.is_empty() {
        future
    } else {
        realized.concat(&future)?
    };
    let chain = online_update(fixed, history_tail, &new_data, cfg, rng)?;
    let n = chain.grid.len();
    let paths: Vec<MeanCovPath> = chain
        .paths
        .iter()
        .map(|p| p.slice(n - horizon, n))
        .collect();
    let mut y_draws = Vec::with_capacity(paths.len());
    for path in &paths {
        let mut y = DMatrix::zeros(fixed.p(), horizon);
        for h in 0..horizon {
            let f = psd_factor(&path.sigma[h])?;
            let z = crate::linalg::standard_normal_vector(fixed.p(), rng);
            y.set_column(h, &(path.mu.column(h) + f * z));
        }
        y_draws.push(y);
    }
    Ok(Prediction {
        times,
        paths,
        y_draws,
    })
}

/// `E[y_target | y_others]` under `N(mu, sigma)`, conditioning on the
/// components flagged in `observed` (the target itself is ignored).
pub fn conditional_mean(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    target: usize,
    y: &DVector<f64>,
    observed: &[bool],
) -> Result<f64> {
    let p = mu.len();
    if sigma.shape() != (p, p) || y.len() != p || observed.len() != p || target >= p {
        return Err(Error::Dimension("conditional mean inputs disagree".into()));
    }
    let others: Vec<usize> = (0..p).filter(|&j| j != target && observed[j]).collect();
    if others.is_empty() {
        return Ok(mu[target]);
    }
    let s_oo = select_square(sigma, &others);
    let s_to = DVector::from_iterator(others.len(), others.iter().map(|&j| sigma[(target, j)]));
    let diff = select_entries(y, &others) - select_entries(mu, &others);
    let sol = s_oo
        .cholesky()
        .ok_or_else(|| Error::Numerical("conditioning covariance is not positive definite".into()))?
        .solve(&diff);
    Ok(mu[target] + s_to.dot(&sol))
}

/// One-step-ahead errors of three predictors for every realized observation:
/// (a) zero, (b) the posterior mean of `mu(t)`, (c) the conditional mean of
/// `y_j(t)` given the other components at `t` under the posterior means of
/// `mu(t)` and `Sigma(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepErrors {
    pub times: Vec<f64>,
    /// `p x n` error matrices; missing cells hold `NaN`.
    pub zero: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    pub conditional: DMatrix<f64>,
}

impl OneStepErrors {
    pub const METHODS: [&'static str; 3] = ["a", "b", "c"];

    pub fn by_method(&self) -> [(&'static str, &DMatrix<f64>); 3] {
        [
            ("a", &self.zero),
            ("b", &self.mean),
            ("c", &self.conditional),
        ]
    }

    /// Mean squared error of each method over the non-missing cells.
    pub fn mse(&self) -> [f64; 3] {
        let f = |m: &DMatrix<f64>| {
            let v: Vec<f64> = m.iter().filter(|x| x.is_finite()).map(|x| x * x).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        [f(&self.zero), f(&self.mean), f(&self.conditional)]
    }
}

/// Rolls through `realized`, forecasting each step from everything before it.
pub fn one_step_errors<R: Rng + ?Sized>(
    fixed: &FixedParams,
    history_tail: &Dataset,
    realized: &Dataset,
    cfg: &LafConfig,
    rng: &mut R,
) -> Result<OneStepErrors> {
    let (p, n) = (fixed.p(), realized.len());
    let mut zero = DMatrix::from_element(p, n, f64::NAN);
    let mut mean = zero.clone();
    let mut conditional = zero.clone();
    let k = history_tail.len();
    for s in 0..n {
        let known = if k == 0 {
            realized.slice(0, s)?
        } else {
            history_tail.concat(&realized.slice(0, s)?)?
        };
        let (tail, after) = if k == 0 {
            (known.slice(0, 0)?, known)
        } else {
            let tail = known.slice(known.len() - k, known.len())?;
            (tail, realized.slice(0, 0)?)
        };
        let pred = predict(fixed, &tail, &after, 1, cfg, rng)?;
        let summ = pred.summary(0.95)?;
        let mu = summ.mean.mu.column(0).into_owned();
        let sigma = &summ.mean.sigma[0];
        let y = realized.column_filled(s);
        let observed: Vec<bool> = (0..p).map(|j| realized.observed[(j, s)]).collect();
        for j in 0..p {
            if !observed[j] {
                continue;
            }
            zero[(j, s)] = y[j];
            mean[(j, s)] = y[j] - mu[j];
            conditional[(j, s)] = y[j] - conditional_mean(&mu, sigma, j, &y, &observed)?;
        }
    }
    Ok(OneStepErrors {
        times: realized.times.clone(),
        zero,
        mean,
        conditional,
    })
}

/// Log-density contribution of each step's observed cells under `path`
/// (zero for fully missing steps).
pub fn step_log_likelihoods(path: &MeanCovPath, data: &Dataset) -> Vec<f64> {
    (0..data.len())
        .map(|i| {
            let idx = data.observed_indices(i);
            if idx.is_empty() {
                return 0.0;
            }
            let y = select_entries(&data.column_filled(i), &idx);
            let mu = select_entries(&path.mu.column(i).into_owned(), &idx);
            let s = select_square(&path.sigma[i], &idx);
            crate::linalg::mvn_log_density(&y, &mu, &s).unwrap_or(f64::NEG_INFINITY)
        })
        .collect()
}
