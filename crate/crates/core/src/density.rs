//! Per-class Gaussian and Gaussian-mixture density models over detection
//! embeddings.
//!
//! Single-Gaussian fits use the sample mean and the `(n − 1)`-normalized
//! covariance. Mixtures are fitted by EM from a k-means++ start; the EM
//! iterations themselves run on exact maximum-likelihood updates so that the
//! total negative log-likelihood never increases, and the relative diagonal
//! jitter `jitter · tr(Σ)/d · I` is added once to the converged covariances.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::CholeskyFactor;
use crate::math::{self, exp, ln, LN_2PI};
use crate::{Error, Result};

/// Weight below which a mixture component counts as collapsed.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;
/// Covariance condition estimate above which a component counts as collapsed.
pub const COLLAPSE_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitConfig {
    pub k: usize,
    /// Relative diagonal regularizer, multiplied by `tr(Σ)/d`.
    pub jitter: f64,
    pub em_max_iters: usize,
    /// Relative change in total NLL that ends EM.
    pub em_tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 3,
            jitter: 1e-6,
            em_max_iters: 200,
            em_tol: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.k) {
            return Err(Error::Config(format!("k must be in 1..=4, got {}", self.k)));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be positive, got {}", self.jitter)));
        }
        if self.em_max_iters == 0 {
            return Err(Error::Config("em_max_iters must be at least 1".into()));
        }
        if !(self.em_tol >= 0.0) {
            return Err(Error::Config(format!("em_tol must be non-negative, got {}", self.em_tol)));
        }
        Ok(())
    }
}

/// Borrowed row-major sample matrix.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Samples<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.data.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub chol: CholeskyFactor,
}

impl GaussianComponent {
    /// `ln w + ln N(x; μ, Σ)`; `scratch` must have the embedding dimension.
    #[inline]
    fn weighted_log_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        for ((s, &xi), &mi) in scratch.iter_mut().zip(x).zip(&self.mean) {
            *s = xi - mi;
        }
        let m = self.chol.mahalanobis_sq(scratch);
        ln(self.weight) - 0.5 * (self.mean.len() as f64 * LN_2PI + self.chol.log_det() + m)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CollapseEvent {
    /// Components re-seeded from the highest-residual sample.
    Reseeded { k: usize, components: Vec<usize>, iteration: usize },
    /// A second collapse: the mixture was refitted with one fewer component.
    ReducedK { from: usize, to: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitMetadata {
    pub sample_count: usize,
    pub requested_k: usize,
    pub em_iterations: usize,
    pub converged: bool,
    /// Fewer samples than dimensions + 1: the covariance is only invertible thanks to jitter.
    pub degenerate: bool,
    pub collapse_events: Vec<CollapseEvent>,
}

/// Density model of one class: a K-component Gaussian mixture plus the class prior.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassDensityModel {
    pub class_id: u32,
    pub class_prior: f64,
    pub components: Vec<GaussianComponent>,
    pub meta: FitMetadata,
}

impl ClassDensityModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.components.iter().map(|c| c.weight)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: alloc::string::String| Error::Fit {
            class_id: self.class_id,
            reason,
        };
        if self.components.is_empty() {
            return Err(bad("model has no components".into()));
        }
        let dim = self.dim();
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(bad(format!("component {k} has weight {}", c.weight)));
            }
            if c.mean.len() != dim || c.chol.dim() != dim {
                return Err(bad(format!("component {k} has inconsistent dimension")));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("component {k} has a non-finite mean")));
            }
            if c.chol.diagonal().any(|v| !(v > 0.0)) {
                return Err(bad(format!("component {k} has a non-positive Cholesky diagonal")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(format!("weights sum to {total}")));
        }
        if !(self.class_prior > 0.0 && self.class_prior <= 1.0) {
            return Err(bad(format!("class prior {} outside (0, 1]", self.class_prior)));
        }
        Ok(())
    }

    /// `ln Σ_k w_k N(x; μ_k, Σ_k)` with an online log-sum-exp.
    pub fn log_density_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for c in &self.components {
            let v = c.weighted_log_pdf(x, scratch);
            if v > max {
                sum = sum * exp(max - v) + 1.0;
                max = v;
            } else {
                sum += exp(v - max);
            }
        }
        max + ln(sum)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim()];
        self.log_density_with(x, &mut scratch)
    }

    /// [`Self::log_density_with`] for a column-major batch `x` (entry `j` of
    /// vector `s` at `j * out.len() + s`). `diff` must be as long as `x`,
    /// `maha` and `sum` as long as `out`.
    pub fn log_density_batch(&self, x: &[f64], diff: &mut [f64], maha: &mut [f64], sum: &mut [f64], out: &mut [f64]) {
        let m = out.len();
        out.fill(f64::NEG_INFINITY);
        sum.fill(0.0);
        for c in &self.components {
            for (j, &mu) in c.mean.iter().enumerate() {
                for (d, &v) in diff[j * m..(j + 1) * m].iter_mut().zip(&x[j * m..(j + 1) * m]) {
                    *d = v - mu;
                }
            }
            c.chol.mahalanobis_sq_batch(diff, maha);
            let base = self.dim() as f64 * LN_2PI + c.chol.log_det();
            let lw = ln(c.weight);
            for ((max, s), &q) in out.iter_mut().zip(sum.iter_mut()).zip(maha.iter()) {
                let v = lw - 0.5 * (base + q);
                if v > *max {
                    *s = *s * exp(*max - v) + 1.0;
                    *max = v;
                } else {
                    *s += exp(v - *max);
                }
            }
        }
        for (o, &s) in out.iter_mut().zip(sum.iter()) {
            *o += ln(s);
        }
    }
}

/// Multivariate normal log density evaluated through the Cholesky factor of
/// the covariance.
pub fn log_gaussian_pdf(x: &[f64], mean: &[f64], chol: &CholeskyFactor) -> Result<f64> {
    let d = chol.dim();
    for len in [x.len(), mean.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, actual: len });
        }
    }
    let mut diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let m = chol.mahalanobis_sq(&mut diff);
    Ok(-0.5 * (d as f64 * LN_2PI + chol.log_det() + m))
}

fn mean_of(samples: Samples<'_>) -> Vec<f64> {
    let mut mean = vec![0.0; samples.dim()];
    for row in samples.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Scatter matrix `Σ_i (x_i − μ)(x_i − μ)ᵀ` (full, row-major), optionally weighted.
fn scatter(samples: Samples<'_>, mean: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    let d = samples.dim();
    let mut s = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for (i, row) in samples.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        for ((t, &x), &m) in diff.iter_mut().zip(row).zip(mean) {
            *t = x - m;
        }
        for a in 0..d {
            let wa = w * diff[a];
            let dst = &mut s[a * d..a * d + a + 1];
            for (b, v) in dst.iter_mut().enumerate() {
                *v += wa * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            s[b * d + a] = s[a * d + b];
        }
    }
    s
}

/// Adds `jitter · tr(Σ)/d · I` in place; falls back to a unit scale when the trace vanishes.
fn add_relative_jitter(cov: &mut [f64], dim: usize, jitter: f64) {
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let scale = trace / dim as f64;
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    for i in 0..dim {
        cov[i * dim + i] += jitter * scale;
    }
}

/// One full-covariance Gaussian: sample mean, unbiased covariance plus
/// relative jitter, prior `n / total_count`.
pub fn fit_single_gaussian(class_id: u32, samples: Samples<'_>, total_count: usize, jitter: f64) -> Result<ClassDensityModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Fit {
            class_id,
            reason: format!("need at least 2 samples, got {n}"),
        });
    }
    if total_count < n {
        return Err(Error::invalid(format!("total count {total_count} smaller than class count {n}")));
    }
    if !(jitter > 0.0) {
        return Err(Error::Config(format!("jitter must be positive, got {jitter}")));
    }
    let d = samples.dim();
    let mean = mean_of(samples);
    let mut cov = scatter(samples, &mean, None);
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|v| *v /= denom);
    add_relative_jitter(&mut cov, d, jitter);
    let chol = CholeskyFactor::from_covariance(&cov, d).map_err(|e| Error::Fit {
        class_id,
        reason: format!("{e}"),
    })?;
    Ok(ClassDensityModel {
        class_id,
        class_prior: n as f64 / total_count as f64,
        components: vec![GaussianComponent {
            weight: 1.0,
            mean,
            chol,
        }],
        meta: FitMetadata {
            sample_count: n,
            requested_k: 1,
            em_iterations: 0,
            converged: true,
            degenerate: n <= d,
            collapse_events: Vec::new(),
        },
    })
}

/// Total NLL after each E-step. A new segment starts whenever EM restarts
/// (after a re-seed or a reduction of K); NLL is non-increasing within a segment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub segments: Vec<Vec<f64>>,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    /// Largest increase between consecutive entries of any segment (≤ 0 when monotone).
    pub fn max_increase(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: ClassDensityModel,
    pub trace: EmTrace,
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
    chols: Vec<Option<CholeskyFactor>>,
}

fn mix_seed(seed: u64, class_id: u32) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(samples: Samples<'_>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = samples.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(samples.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = samples.rows().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc >= target && v > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = samples.row(pick).to_vec();
        for (i, r) in samples.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    centers
}

/// Exact M-step from an `n × k` responsibility matrix.
fn m_step(samples: Samples<'_>, resp: &[f64], k: usize) -> Params {
    let n = samples.len();
    let d = samples.dim();
    let mut params = Params {
        weights: vec![0.0; k],
        means: vec![vec![0.0; d]; k],
        covs: vec![Vec::new(); k],
        chols: vec![None; k],
    };
    let mut w = vec![0.0; n];
    for j in 0..k {
        for i in 0..n {
            w[i] = resp[i * k + j];
        }
        let nk: f64 = w.iter().sum();
        params.weights[j] = nk / n as f64;
        if params.weights[j] < COLLAPSE_WEIGHT {
            continue;
        }
        let mean = &mut params.means[j];
        for (i, row) in samples.rows().enumerate() {
            if w[i] != 0.0 {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += w[i] * v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut cov = scatter(samples, mean, Some(&w));
        cov.iter_mut().for_each(|v| *v /= nk);
        params.chols[j] = CholeskyFactor::from_covariance(&cov, d).ok();
        params.covs[j] = cov;
    }
    params
}

fn collapsed(params: &Params) -> Vec<usize> {
    (0..params.weights.len())
        .filter(|&j| {
            params.weights[j] < COLLAPSE_WEIGHT
                || match &params.chols[j] {
                    None => true,
                    Some(l) => !(l.condition_estimate() <= COLLAPSE_CONDITION),
                }
        })
        .collect()
}

/// Re-seeds `bad` components at the sample farthest from every healthy mean,
/// with the pooled covariance of all samples.
fn reseed(samples: Samples<'_>, params: &mut Params, bad: &[usize]) {
    let k = params.weights.len();
    let healthy: Vec<usize> = (0..k).filter(|j| !bad.contains(j)).collect();
    let residual = |row: &[f64]| {
        healthy
            .iter()
            .map(|&j| sq_dist(row, &params.means[j]))
            .fold(f64::INFINITY, f64::min)
    };
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, row) in samples.rows().enumerate() {
        let r = if healthy.is_empty() { 0.0 } else { residual(row) };
        if r > best.1 {
            best = (i, r);
        }
    }
    let mean_all = mean_of(samples);
    let mut pooled = scatter(samples, &mean_all, None);
    let n = samples.len() as f64;
    pooled.iter_mut().for_each(|v| *v /= n);
    let chol = CholeskyFactor::from_covariance(&pooled, samples.dim()).ok();
    for &j in bad {
        params.means[j] = samples.row(best.0).to_vec();
        params.covs[j] = pooled.clone();
        params.chols[j] = chol.clone();
        params.weights[j] = 1.0 / k as f64;
    }
    let total: f64 = params.weights.iter().sum();
    params.weights.iter_mut().for_each(|w| *w /= total);
}

/// E-step: fills `resp` and returns the total NLL.
fn e_step(samples: Samples<'_>, params: &Params, resp: &mut [f64]) -> f64 {
    let k = params.weights.len();
    let d = samples.dim();
    let mut scratch = vec![0.0; d];
    let log_norm: Vec<f64> = (0..k)
        .map(|j| {
            let l = params.chols[j].as_ref().expect("healthy component");
            ln(params.weights[j]) - 0.5 * (d as f64 * LN_2PI + l.log_det())
        })
        .collect();
    let mut nll = 0.0;
    let mut lp = vec![0.0; k];
    for (i, row) in samples.rows().enumerate() {
        for j in 0..k {
            for ((s, &x), &m) in scratch.iter_mut().zip(row).zip(&params.means[j]) {
                *s = x - m;
            }
            let l = params.chols[j].as_ref().expect("healthy component");
            lp[j] = log_norm[j] - 0.5 * l.mahalanobis_sq(&mut scratch);
        }
        let lse = math::log_sum_exp(&lp);
        nll -= lse;
        for j in 0..k {
            resp[i * k + j] = exp(lp[j] - lse);
        }
    }
    nll
}

enum Attempt {
    Done { params: Params, iterations: usize, converged: bool },
    Collapsed,
}

fn run_em(
    samples: Samples<'_>,
    k: usize,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    trace: &mut EmTrace,
    events: &mut Vec<CollapseEvent>,
) -> Attempt {
    let n = samples.len();
    let centers = kmeans_pp(samples, k, rng);
    let mut resp = vec![0.0; n * k];
    for (i, row) in samples.rows().enumerate() {
        let mut best = (0usize, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let dist = sq_dist(row, c);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        resp[i * k + best.0] = 1.0;
    }
    let mut params = m_step(samples, &resp, k);
    let mut reseeded = false;
    let mut iterations = 0usize;
    trace.segments.push(Vec::new());
    loop {
        let bad = collapsed(&params);
        if !bad.is_empty() {
            if reseeded {
                return Attempt::Collapsed;
            }
            reseeded = true;
            events.push(CollapseEvent::Reseeded {
                k,
                components: bad.clone(),
                iteration: iterations,
            });
            reseed(samples, &mut params, &bad);
            if !collapsed(&params).is_empty() {
                return Attempt::Collapsed;
            }
            if trace.segments.last().is_some_and(|s| !s.is_empty()) {
                trace.segments.push(Vec::new());
            }
        }
        let nll = e_step(samples, &params, &mut resp);
        iterations += 1;
        let segment = trace.segments.last_mut().expect("segment");
        let prev = segment.last().copied();
        segment.push(nll);
        if let Some(prev) = prev {
            if (prev - nll).abs() <= config.em_tol * prev.abs().max(f64::MIN_POSITIVE) {
                return Attempt::Done {
                    params,
                    iterations,
                    converged: true,
                };
            }
        }
        if iterations >= config.em_max_iters {
            return Attempt::Done {
                params,
                iterations,
                converged: false,
            };
        }
        params = m_step(samples, &resp, k);
    }
}

/// Fits a K-component full-covariance mixture by EM. K = 1 is the closed-form
/// single-Gaussian fit.
pub fn fit_gmm_em(class_id: u32, samples: Samples<'_>, total_count: usize, config: &FitConfig) -> Result<GmmFit> {
    config.validate()?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::Fit {
            class_id,
            reason: format!("need at least 2 samples, got {n}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, class_id));
    let mut trace = EmTrace::default();
    let mut events = Vec::new();
    let mut k = config.k;
    let d = samples.dim();
    while k > 1 {
        match run_em(samples, k, config, &mut rng, &mut trace, &mut events) {
            Attempt::Done {
                params,
                iterations,
                converged,
            } => {
                let mut components = Vec::with_capacity(k);
                for j in 0..k {
                    let mut cov = params.covs[j].clone();
                    add_relative_jitter(&mut cov, d, config.jitter);
                    let chol = CholeskyFactor::from_covariance(&cov, d).map_err(|e| Error::Fit {
                        class_id,
                        reason: format!("component {j}: {e}"),
                    })?;
                    components.push(GaussianComponent {
                        weight: params.weights[j],
                        mean: params.means[j].clone(),
                        chol,
                    });
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                components.iter_mut().for_each(|c| c.weight /= total);
                let model = ClassDensityModel {
                    class_id,
                    class_prior: n as f64 / total_count.max(n) as f64,
                    components,
                    meta: FitMetadata {
                        sample_count: n,
                        requested_k: config.k,
                        em_iterations: trace.iterations(),
                        converged,
                        degenerate: n <= d,
                        collapse_events: events,
                    },
                };
                debug_assert!(iterations <= config.em_max_iters);
                return Ok(GmmFit { model, trace });
            }
            Attempt::Collapsed => {
                events.push(CollapseEvent::ReducedK { from: k, to: k - 1 });
                k -= 1;
            }
        }
    }
    let mut model = fit_single_gaussian(class_id, samples, total_count.max(n), config.jitter)?;
    model.meta.requested_k = config.k;
    model.meta.em_iterations = 1;
    model.meta.collapse_events = events;
    let nll = -samples.rows().map(|r| model.log_density(r)).sum::<f64>();
    trace.segments.push(vec![nll]);
    model.meta.em_iterations = trace.iterations();
    Ok(GmmFit { model, trace })
}

/// A complete set of class models indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    models: Vec<ClassDensityModel>,
    log_priors: Vec<f64>,
}

impl ModelSet {
    /// Requires exactly one model per class `0..num_classes`, a common
    /// dimension and priors summing to 1.
    pub fn new(mut models: Vec<ClassDensityModel>, num_classes: usize) -> Result<Self> {
        models.sort_by_key(|m| m.class_id);
        for c in 0..num_classes as u32 {
            if models.get(c as usize).map(|m| m.class_id) != Some(c) {
                let missing = (0..num_classes as u32)
                    .find(|c| !models.iter().any(|m| m.class_id == *c))
                    .unwrap_or(c);
                return Err(Error::MissingClass(missing));
            }
        }
        if models.len() != num_classes {
            return Err(Error::invalid(format!(
                "{} models for {num_classes} classes",
                models.len()
            )));
        }
        let dim = models.first().map_or(0, |m| m.dim());
        for m in &models {
            m.validate()?;
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: m.dim(),
                });
            }
        }
        let prior_sum: f64 = models.iter().map(|m| m.class_prior).sum();
        if (prior_sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class priors sum to {prior_sum}")));
        }
        let log_priors = models.iter().map(|m| ln(m.class_prior)).collect();
        Ok(Self { models, log_priors })
    }

    pub fn models(&self) -> &[ClassDensityModel] {
        &self.models
    }

    pub fn into_models(self) -> Vec<ClassDensityModel> {
        self.models
    }

    pub fn num_classes(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn log_priors(&self) -> &[f64] {
        &self.log_priors
    }

    /// Per-class mixture log-likelihoods written into `out`.
    pub fn per_class_loglik_into(&self, e: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.models) {
            *o = m.log_density_with(e, scratch);
        }
    }

    /// Per-class log-likelihoods of a column-major batch, written class-major
    /// into `out` (`num_classes × m`); see [`ClassDensityModel::log_density_batch`].
    pub fn per_class_loglik_batch(&self, x: &[f64], diff: &mut [f64], maha: &mut [f64], sum: &mut [f64], out: &mut [f64]) {
        let m = maha.len();
        for (o, model) in out.chunks_exact_mut(m).zip(&self.models) {
            model.log_density_batch(x, diff, maha, sum, o);
        }
    }

    pub fn per_class_loglik(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: e.len(),
            });
        }
        let mut scratch = vec![0.0; e.len()];
        let mut out = vec![0.0; self.models.len()];
        self.per_class_loglik_into(e, &mut scratch, &mut out);
        Ok(out)
    }

    /// `ln Σ_c π_c p(e | c)` from precomputed per-class log-likelihoods.
    pub fn marginal_log_density(&self, loglik: &[f64]) -> f64 {
        let joint: Vec<f64> = loglik.iter().zip(&self.log_priors).map(|(l, p)| l + p).collect();
        math::log_sum_exp(&joint)
    }

    /// Class posterior `q(y | e)`, see [`posterior_from_loglik`].
    pub fn posterior(&self, e: &[f64], temperature: f64, use_priors: bool) -> Result<Vec<f64>> {
        let ll = self.per_class_loglik(e)?;
        let priors = use_priors.then_some(self.log_priors.as_slice());
        Ok(posterior_from_loglik(&ll, priors, temperature))
    }
}

/// `softmax((loglik_c + ln π_c) / T)` over classes.
pub fn posterior_from_loglik(loglik: &[f64], log_priors: Option<&[f64]>, temperature: f64) -> Vec<f64> {
    let mut z: Vec<f64> = match log_priors {
        Some(p) => loglik.iter().zip(p).map(|(l, p)| (l + p) / temperature).collect(),
        None => loglik.iter().map(|l| l / temperature).collect(),
    };
    let lse = math::log_sum_exp(&z);
    z.iter_mut().for_each(|v| *v = exp(*v - lse));
    z
}
