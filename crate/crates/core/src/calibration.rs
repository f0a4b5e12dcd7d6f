//! Softmax pruning, temperature learning, joint-threshold selection and the
//! four pruning × temperature evaluation modes.

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::math::{self, ceil, exp, ln};
use crate::scoring::ScoreBundle;
use crate::types::{CalibrationProfile, JointThresholds, Mode, QuantilePolicy};
use crate::{Error, Result};

/// Uncalibrated `S_max`, the softmax maximum at `T = 1`.
pub fn raw_confidence(logits: &[f64]) -> f64 {
    let lse = math::log_sum_exp(logits);
    logits.iter().map(|&l| exp(l - lse)).fold(0.0, f64::max)
}

/// `true` for entries kept by the pruning rule `S_max ≥ threshold`.
pub fn retained_mask(raw_confidences: &[f64], threshold: f64) -> Vec<bool> {
    raw_confidences.iter().map(|&c| c >= threshold).collect()
}

/// Keeps the items whose raw confidence is at least `threshold`, in order.
pub fn prune<T: Clone>(items: &[T], raw_confidence: impl Fn(&T) -> f64, threshold: f64) -> Vec<T> {
    items
        .iter()
        .filter(|it| raw_confidence(it) >= threshold)
        .cloned()
        .collect()
}

/// Score vectors (logits or per-class log-likelihoods) with their true class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledVectors {
    values: Vec<f64>,
    width: usize,
    labels: Vec<usize>,
}

impl LabeledVectors {
    pub fn new(width: usize) -> Self {
        Self {
            values: Vec::new(),
            width,
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, vector: &[f64], label: usize) -> Result<()> {
        if vector.len() != self.width {
            return Err(Error::DimensionMismatch {
                expected: self.width,
                actual: vector.len(),
            });
        }
        if label >= self.width {
            return Err(Error::invalid(format!("label {label} out of range for width {}", self.width)));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite calibration vector"));
        }
        self.values.extend_from_slice(vector);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.values.chunks_exact(self.width.max(1)).zip(self.labels.iter().copied())
    }

    /// Every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            width: self.width,
            labels: self.labels.clone(),
        }
    }

    /// Mean `−ln softmax(v / T)[label]`.
    pub fn nll(&self, temperature: f64) -> f64 {
        let total: f64 = self
            .iter()
            .map(|(v, y)| math::log_sum_exp_scaled(v, temperature) - v[y] / temperature)
            .sum();
        total / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TemperatureSearch {
    pub t_min: f64,
    pub t_max: f64,
    pub grid: usize,
    /// Width of the final golden-section bracket.
    pub tol: f64,
}

impl Default for TemperatureSearch {
    fn default() -> Self {
        Self {
            t_min: 1e-2,
            t_max: 1e2,
            grid: 200,
            tol: 1e-4,
        }
    }
}

impl TemperatureSearch {
    /// Log-spaced grid from `t_min` to `t_max` inclusive.
    pub fn grid_points(&self) -> Vec<f64> {
        let (a, b) = (ln(self.t_min), ln(self.t_max));
        let n = self.grid.max(2);
        (0..n)
            .map(|i| exp(a + (b - a) * i as f64 / (n - 1) as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    pub nll_at_one: f64,
}

/// Minimizes validation NLL over a scalar temperature: exhaustive log-grid
/// search, then golden-section refinement inside the neighbouring grid cells.
pub fn learn_temperature(data: &LabeledVectors, search: &TemperatureSearch) -> Result<TemperatureFit> {
    if data.is_empty() {
        return Err(Error::Config("temperature learning needs at least one labelled vector".into()));
    }
    if !(search.t_min > 0.0 && search.t_max > search.t_min && search.grid >= 2 && search.tol > 0.0) {
        return Err(Error::Config(format!("invalid temperature search {search:?}")));
    }
    let grid = search.grid_points();
    let nlls: Vec<f64> = grid.iter().map(|&t| data.nll(t)).collect();
    let mut best = 0usize;
    for (i, &v) in nlls.iter().enumerate() {
        if v < nlls[best] {
            best = i;
        }
    }
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (data.nll(c), data.nll(d));
    while hi - lo > search.tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = data.nll(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = data.nll(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    let f_mid = data.nll(mid);
    let (temperature, nll) = if f_mid <= nlls[best] { (mid, f_mid) } else { (grid[best], nlls[best]) };
    Ok(TemperatureFit {
        temperature,
        nll,
        nll_at_one: data.nll(1.0),
    })
}

/// Inverted-CDF empirical quantile: the smallest sample `x` with `F(x) ≥ q`.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ceil(q * n as f64 - 1e-9).max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Thresholds from ID-only validation bundles: `τ_soft` is the
/// `soft_quantile` of `s_soft`, `τ_gmm` the `gmm_quantile` of `H_gmm`.
pub fn select_joint_thresholds(validation: &[ScoreBundle], policy: QuantilePolicy) -> Result<JointThresholds> {
    if validation.is_empty() {
        return Err(Error::Config("threshold selection needs validation detections".into()));
    }
    for q in [policy.soft_quantile, policy.gmm_quantile] {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!("quantile {q} outside (0, 1)")));
        }
    }
    let mut soft: Vec<f64> = validation.iter().map(|b| b.softmax_conf).collect();
    let mut ent: Vec<f64> = validation.iter().map(|b| b.gmm_posterior_entropy).collect();
    if soft.iter().chain(&ent).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite validation score".into()));
    }
    soft.sort_by(f64::total_cmp);
    ent.sort_by(f64::total_cmp);
    Ok(JointThresholds {
        tau_soft: empirical_quantile(&soft, policy.soft_quantile),
        tau_gmm: empirical_quantile(&ent, policy.gmm_quantile),
        policy,
    })
}

/// The four evaluation modes with their temperatures and pruning floor.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModeMatrix {
    pub profiles: [CalibrationProfile; 4],
}

impl ModeMatrix {
    pub fn get(&self, mode: Mode) -> &CalibrationProfile {
        &self.profiles[Mode::ALL.iter().position(|m| *m == mode).expect("mode")]
    }

    pub fn with_gmm_priors(mut self, use_priors: bool) -> Self {
        self.profiles.iter_mut().for_each(|p| p.gmm_priors = use_priors);
        self
    }
}

/// Raw and Pruned run at `T = 1`; Temp and PrunedTemp use the learned temperatures.
pub fn build_mode_matrix(t_model: f64, t_gmm: f64, prune_threshold: f64) -> ModeMatrix {
    let profiles = Mode::ALL.map(|mode| CalibrationProfile {
        t_model: if mode.tempered() { t_model } else { 1.0 },
        t_gmm: if mode.tempered() { t_gmm } else { 1.0 },
        prune_threshold,
        mode,
        gmm_priors: true,
    });
    ModeMatrix { profiles }
}
