//! Convergence diagnostics and posterior summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::MeanCovPath;
use crate::sampler::Chain;
use crate::{Error, Result};

/// Potential scale reduction factor treating `segments` equal-length pieces of
/// one chain as separate chains.
///
/// Leading samples that do not fill a whole segment are dropped. The value is
/// reported as `max(1, R)`, and as 1 when the within-segment variance is zero.
pub fn psrf_split(samples: &[f64], segments: usize) -> Result<f64> {
    if segments < 2 || samples.len() < 2 * segments {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot be split into {segments} segments of length >= 2",
            samples.len()
        )));
    }
    let n = samples.len() / segments;
    let used = &samples[samples.len() - n * segments..];
    let (nf, mf) = (n as f64, segments as f64);
    let mut means = Vec::with_capacity(segments);
    let mut w = 0.0;
    for seg in used.chunks(n) {
        let m = seg.iter().sum::<f64>() / nf;
        w += seg.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0);
        means.push(m);
    }
    w /= mf;
    let grand = means.iter().sum::<f64>() / mf;
    let b = nf * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (mf - 1.0);
    if w <= 0.0 {
        return Ok(1.0);
    }
    let v = (nf - 1.0) / nf * w + b / nf;
    Ok((v / w).sqrt().max(1.0))
}

/// Shortest interval spanning `ceil(prob n)` consecutive order statistics;
/// ties go to the leftmost interval.
pub fn hpd_interval(samples: &[f64], prob: f64) -> Result<(f64, f64)> {
    if samples.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "hpd needs at least 20 samples, got {}",
            samples.len()
        )));
    }
    if !(prob > 0.0 && prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability {prob} outside (0, 1]"
        )));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(hpd_sorted(&s, prob))
}

fn hpd_sorted(sorted: &[f64], prob: f64) -> (f64, f64) {
    let n = sorted.len();
    let m = ((prob * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let m = m.min(n);
    let mut best = 0;
    let mut width = f64::INFINITY;
    for i in 0..=(n - m) {
        let w = sorted[i + m - 1] - sorted[i];
        if w < width {
            width = w;
            best = i;
        }
    }
    (sorted[best], sorted[best + m - 1])
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central run of `ceil(prob n)` order statistics, splitting the excluded
/// samples evenly between the tails (the extra one goes to the upper tail).
pub fn equal_tailed_interval(samples: &[f64], prob: f64) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let m = (((prob * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n);
    let lo = (n - m) / 2;
    (s[lo], s[lo + m - 1])
}

/// Squared errors over the upper triangle (diagonal included) of every step.
pub fn sigma_squared_errors(est: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    if est.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} estimated vs {} true covariances",
            est.len(),
            truth.len()
        )));
    }
    let mut out = Vec::new();
    for (e, t) in est.iter().zip(truth) {
        if e.shape() != t.shape() {
            return Err(Error::Dimension("covariance shapes differ".into()));
        }
        for b in 0..t.ncols() {
            for a in 0..=b {
                out.push((e[(a, b)] - t[(a, b)]).powi(2));
            }
        }
    }
    Ok(out)
}

/// Mean squared covariance error; the objective of EWMA `lambda` selection.
pub fn sigma_mse(est: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<f64> {
    let e = sigma_squared_errors(est, truth)?;
    if e.is_empty() {
        return Err(Error::InvalidArgument(
            "no covariance entries to compare".into(),
        ));
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

fn upper_entries(sigma: &[DMatrix<f64>]) -> impl Iterator<Item = f64> + '_ {
    sigma
        .iter()
        .flat_map(|s| (0..s.ncols()).flat_map(move |b| (0..=b).map(move |a| s[(a, b)])))
}

fn range(vals: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub q90: f64,
    pub q95: f64,
    pub max: f64,
}

impl ErrorSummary {
    pub fn from_values(vals: &[f64]) -> Self {
        let mut s = vals.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            q90: quantile_sorted(&s, 0.90),
            q95: quantile_sorted(&s, 0.95),
            max: *s.last().expect("non-empty"),
        }
    }
}

/// Squared errors divided by the squared range of the true process, for the
/// covariance and mean blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub sigma: ErrorSummary,
    pub mu: ErrorSummary,
}

impl ErrorTable {
    pub const HEADER: [&'static str; 4] = ["Mean", "90th Quantile", "95th Quantile", "Max"];

    /// Rows `(block, mean, q90, q95, max)` for the covariance and mean blocks.
    pub fn rows(&self) -> [(&'static str, [f64; 4]); 2] {
        let r = |s: &ErrorSummary| [s.mean, s.q90, s.q95, s.max];
        [("Sigma", r(&self.sigma)), ("mu", r(&self.mu))]
    }
}

pub fn standardized_errors(est: &MeanCovPath, truth: &MeanCovPath) -> Result<ErrorTable> {
    if est.mu.shape() != truth.mu.shape() {
        return Err(Error::Dimension(format!(
            "mean paths {:?} vs {:?}",
            est.mu.shape(),
            truth.mu.shape()
        )));
    }
    if est.mu.is_empty() {
        return Err(Error::InvalidArgument("empty paths".into()));
    }
    let r_mu = range(truth.mu.iter().copied());
    let r_sigma = range(upper_entries(&truth.sigma));
    if !(r_mu > 0.0) || !(r_sigma > 0.0) {
        return Err(Error::InvalidArgument("true process has zero range".into()));
    }
    let s: Vec<f64> = sigma_squared_errors(&est.sigma, &truth.sigma)?
        .into_iter()
        .map(|e| e / (r_sigma * r_sigma))
        .collect();
    let m: Vec<f64> = est
        .mu
        .iter()
        .zip(truth.mu.iter())
        .map(|(a, b)| (a - b).powi(2) / (r_mu * r_mu))
        .collect();
    Ok(ErrorTable {
        sigma: ErrorSummary::from_values(&s),
        mu: ErrorSummary::from_values(&m),
    })
}

/// Collects composed paths draw by draw and summarizes every `mu_j(t_i)` and
/// upper-triangular `Sigma_jk(t_i)`.
#[derive(Debug, Clone)]
pub struct GammaAccumulator {
    p: usize,
    n: usize,
    draws: usize,
    mu_sum: DMatrix<f64>,
    sigma_sum: Vec<DMatrix<f64>>,
    /// Per coordinate, the values of every pushed draw.
    samples: Vec<Vec<f64>>,
}

impl GammaAccumulator {
    pub fn new(p: usize, n: usize) -> Self {
        let coords = n * (p + p * (p + 1) / 2);
        Self {
            p,
            n,
            draws: 0,
            mu_sum: DMatrix::zeros(p, n),
            sigma_sum: vec![DMatrix::zeros(p, p); n],
            samples: vec![Vec::new(); coords],
        }
    }

    fn per_step(&self) -> usize {
        self.p + self.p * (self.p + 1) / 2
    }

    pub fn push(&mut self, path: &MeanCovPath) -> Result<()> {
        if path.mu.shape() != (self.p, self.n) || path.sigma.len() != self.n {
            return Err(Error::Dimension(
                "composed path does not match the accumulator".into(),
            ));
        }
        self.draws += 1;
        self.mu_sum += &path.mu;
        let per = self.per_step();
        for i in 0..self.n {
            self.sigma_sum[i] += &path.sigma[i];
            let base = i * per;
            for j in 0..self.p {
                self.samples[base + j].push(path.mu[(j, i)]);
            }
            let mut c = base + self.p;
            for b in 0..self.p {
                for a in 0..=b {
                    self.samples[c].push(path.sigma[i][(a, b)]);
                    c += 1;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.draws
    }

    pub fn is_empty(&self) -> bool {
        self.draws == 0
    }

    /// Posterior means and pointwise hpd bands at level `prob`.
    pub fn finish(&self, prob: f64) -> Result<PosteriorSummary> {
        if self.draws == 0 {
            return Err(Error::InvalidArgument("no draws to summarize".into()));
        }
        let d = self.draws as f64;
        let mean = MeanCovPath {
            mu: &self.mu_sum / d,
            sigma: self.sigma_sum.iter().map(|s| s / d).collect(),
        };
        let (p, n, per) = (self.p, self.n, self.per_step());
        let mut mu_lo = DMatrix::zeros(p, n);
        let mut mu_hi = DMatrix::zeros(p, n);
        let mut sigma_lo = vec![DMatrix::zeros(p, p); n];
        let mut sigma_hi = vec![DMatrix::zeros(p, p); n];
        let band = |v: &Vec<f64>| {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            hpd_sorted(&s, prob)
        };
        for i in 0..n {
            let base = i * per;
            for j in 0..p {
                let (lo, hi) = band(&self.samples[base + j]);
                mu_lo[(j, i)] = lo;
                mu_hi[(j, i)] = hi;
            }
            let mut c = base + p;
            for b in 0..p {
                for a in 0..=b {
                    let (lo, hi) = band(&self.samples[c]);
                    for (x, y) in [(a, b), (b, a)] {
                        sigma_lo[i][(x, y)] = lo;
                        sigma_hi[i][(x, y)] = hi;
                    }
                    c += 1;
                }
            }
        }
        Ok(PosteriorSummary {
            draws: self.draws,
            prob,
            mean,
            mu_lo,
            mu_hi,
            sigma_lo,
            sigma_hi,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub draws: usize,
    pub prob: f64,
    pub mean: MeanCovPath,
    pub mu_lo: DMatrix<f64>,
    pub mu_hi: DMatrix<f64>,
    pub sigma_lo: Vec<DMatrix<f64>>,
    pub sigma_hi: Vec<DMatrix<f64>>,
}

impl PosteriorSummary {
    /// Fraction of upper-triangular `Sigma` entries of `truth` inside the bands.
    pub fn sigma_coverage(&self, truth: &[DMatrix<f64>]) -> f64 {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (i, t) in truth.iter().enumerate() {
            for b in 0..t.ncols() {
                for a in 0..=b {
                    tot += 1;
                    if self.sigma_lo[i][(a, b)] <= t[(a, b)]
                        && t[(a, b)] <= self.sigma_hi[i][(a, b)]
                    {
                        hit += 1;
                    }
                }
            }
        }
        hit as f64 / tot.max(1) as f64
    }

    pub fn mu_coverage(&self, truth: &DMatrix<f64>) -> f64 {
        let hit = truth
            .iter()
            .zip(self.mu_lo.iter().zip(self.mu_hi.iter()))
            .filter(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
            .count();
        hit as f64 / truth.len().max(1) as f64
    }
}

/// Pools the retained draws of all chains into one summary at 95% hpd.
pub fn summarize_chain(chains: &[Chain]) -> Result<PosteriorSummary> {
    summarize_chains_at(chains, 0.95)
}

pub fn summarize_chains_at(chains: &[Chain], prob: f64) -> Result<PosteriorSummary> {
    let first = chains
        .iter()
        .find(|c| !c.is_empty())
        .ok_or_else(|| Error::InvalidArgument("no retained draws".into()))?;
    let mut acc = GammaAccumulator::new(first.draws[0].p(), first.draws[0].n_steps());
    for c in chains {
        for d in 0..c.len() {
            acc.push(&c.composed_path(d))?;
        }
    }
    acc.finish(prob)
}

/// Lag-1 autocorrelation.
pub fn lag1_autocorrelation(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 3 {
        return 0.0;
    }
    let m = samples.iter().sum::<f64>() / n as f64;
    let var: f64 = samples.iter().map(|x| (x - m).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    samples
        .windows(2)
        .map(|w| (w[0] - m) * (w[1] - m))
        .sum::<f64>()
        / var
}
