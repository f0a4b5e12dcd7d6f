//! Per-detection confidence and uncertainty scores and the joint
//! softmax/GMM-entropy decision rule.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::borrow::Borrow;
use core::fmt;
use core::str::FromStr;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::density::{posterior_from_loglik, ModelSet};
use crate::math::{self, entropy, exp};
use crate::types::{CalibrationProfile, DetectionRecord, JointThresholds};
use crate::{Error, Result};

/// Tempered softmax `exp(l_c/T) / Σ_j exp(l_j/T)`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let lse = math::log_sum_exp_scaled(logits, temperature);
    let inv = 1.0 / temperature;
    logits.iter().map(|&l| exp(l * inv - lse)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxScores {
    /// `max_c p_c`
    pub conf: f64,
    /// `ln Σ_c exp(l_c / T)`
    pub density: f64,
    /// `−Σ_c p_c ln p_c`
    pub entropy: f64,
}

/// Softmax confidence, log-sum-exp density and entropy of `logits / T`.
/// Pass `T = 1` for the untempered modes.
pub fn score_softmax_family(logits: &[f64], temperature: f64) -> SoftmaxScores {
    let p = softmax(logits, temperature);
    SoftmaxScores {
        conf: p.iter().copied().fold(0.0, f64::max),
        density: math::log_sum_exp_scaled(logits, temperature),
        entropy: entropy(&p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmScores {
    /// Prior-weighted marginal `ln Σ_c π_c N(e; μ_c, Σ_c)` of the single-Gaussian models.
    pub density: f64,
    /// Entropy of the tempered GMM class posterior.
    pub posterior_entropy: f64,
    /// `max_c ln N(e; μ_c, Σ_c)` of the single-Gaussian models.
    pub per_class_max: f64,
    /// Prior-weighted marginal of the K-component mixtures.
    pub multi_density: f64,
}

/// GMM-side scores from precomputed per-class log-likelihoods.
pub fn gmm_scores_from_loglik(
    single_loglik: &[f64],
    multi_loglik: &[f64],
    single: &ModelSet,
    multi: &ModelSet,
    t_gmm: f64,
    use_priors: bool,
) -> GmmScores {
    let priors = use_priors.then_some(single.log_priors());
    let q = posterior_from_loglik(single_loglik, priors, t_gmm);
    GmmScores {
        density: single.marginal_log_density(single_loglik),
        posterior_entropy: entropy(&q),
        per_class_max: single_loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        multi_density: multi.marginal_log_density(multi_loglik),
    }
}

pub fn score_gmm_family(embedding: &[f64], single: &ModelSet, multi: &ModelSet, t_gmm: f64, use_priors: bool) -> Result<GmmScores> {
    let s = single.per_class_loglik(embedding)?;
    let m = multi.per_class_loglik(embedding)?;
    Ok(gmm_scores_from_loglik(&s, &m, single, multi, t_gmm, use_priors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Decision {
    Id,
    Ood,
}

/// Every score of one detection under one calibration profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBundle {
    pub softmax_conf: f64,
    pub softmax_density: f64,
    pub softmax_entropy: f64,
    pub gmm_density: f64,
    pub gmm_posterior_entropy: f64,
    pub gmm_per_class_max: f64,
    pub multi_gmm_density: f64,
    pub joint_decision: Option<Decision>,
}

impl ScoreBundle {
    pub fn from_parts(soft: SoftmaxScores, gmm: GmmScores) -> Self {
        Self {
            softmax_conf: soft.conf,
            softmax_density: soft.density,
            softmax_entropy: soft.entropy,
            gmm_density: gmm.density,
            gmm_posterior_entropy: gmm.posterior_entropy,
            gmm_per_class_max: gmm.per_class_max,
            multi_gmm_density: gmm.multi_density,
            joint_decision: None,
        }
    }
}

/// ID iff `s_soft ≥ τ_soft` and `H_gmm ≤ τ_gmm` (both bounds inclusive).
pub fn joint_decide(bundle: &ScoreBundle, thresholds: &JointThresholds) -> Decision {
    if bundle.softmax_conf >= thresholds.tau_soft && bundle.gmm_posterior_entropy <= thresholds.tau_gmm {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// Sorted validation ID values of the two joint-rule signals.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawReference"))]
pub struct ValidationReference {
    soft: Vec<f64>,
    entropy: Vec<f64>,
}

#[cfg(feature = "serde")]
#[derive(Deserialize)]
struct RawReference {
    soft: Vec<f64>,
    entropy: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<RawReference> for ValidationReference {
    type Error = Error;

    fn try_from(raw: RawReference) -> Result<Self> {
        Self::new(raw.soft, raw.entropy)
    }
}

impl ValidationReference {
    pub fn new(mut soft: Vec<f64>, mut entropy: Vec<f64>) -> Result<Self> {
        if soft.is_empty() || entropy.is_empty() {
            return Err(Error::Config("validation reference is empty".into()));
        }
        if soft.iter().chain(&entropy).any(|v| !v.is_finite()) {
            return Err(Error::Config("validation reference has non-finite values".into()));
        }
        soft.sort_by(f64::total_cmp);
        entropy.sort_by(f64::total_cmp);
        Ok(Self { soft, entropy })
    }

    pub fn from_bundles(bundles: &[ScoreBundle]) -> Result<Self> {
        Self::new(
            bundles.iter().map(|b| b.softmax_conf).collect(),
            bundles.iter().map(|b| b.gmm_posterior_entropy).collect(),
        )
    }

    pub fn soft(&self) -> &[f64] {
        &self.soft
    }

    pub fn entropy(&self) -> &[f64] {
        &self.entropy
    }

    /// Fraction of reference confidences `≤ s`.
    pub fn soft_cdf(&self, s: f64) -> f64 {
        self.soft.partition_point(|&v| v <= s) as f64 / self.soft.len() as f64
    }

    /// Fraction of reference entropies `≥ h`, i.e. the CDF of `−H` at `−h`.
    pub fn neg_entropy_cdf(&self, h: f64) -> f64 {
        let below = self.entropy.partition_point(|&v| v < h);
        (self.entropy.len() - below) as f64 / self.entropy.len() as f64
    }
}

/// `min(F_soft(s_soft), F_{−H}(−H_gmm))` under the validation ID distribution.
pub fn joint_fused_score(bundle: &ScoreBundle, reference: &ValidationReference) -> f64 {
    reference
        .soft_cdf(bundle.softmax_conf)
        .min(reference.neg_entropy_cdf(bundle.gmm_posterior_entropy))
}

/// A scalar score oriented so that larger means "more in-distribution".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreKind {
    SoftmaxConf,
    SoftmaxDensity,
    SoftmaxEntropy,
    GmmDensity,
    GmmEntropy,
    GmmPerClass,
    MultiGmmDensity,
    Joint,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 8] = [
        ScoreKind::SoftmaxConf,
        ScoreKind::SoftmaxDensity,
        ScoreKind::SoftmaxEntropy,
        ScoreKind::GmmDensity,
        ScoreKind::GmmEntropy,
        ScoreKind::GmmPerClass,
        ScoreKind::MultiGmmDensity,
        ScoreKind::Joint,
    ];

    /// The seven rows of the usual ablation table.
    pub const TABLE: [ScoreKind; 7] = [
        ScoreKind::SoftmaxConf,
        ScoreKind::SoftmaxDensity,
        ScoreKind::SoftmaxEntropy,
        ScoreKind::GmmDensity,
        ScoreKind::GmmEntropy,
        ScoreKind::GmmPerClass,
        ScoreKind::Joint,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::SoftmaxConf => "softmax",
            ScoreKind::SoftmaxDensity => "softmax-density",
            ScoreKind::SoftmaxEntropy => "softmax-entropy",
            ScoreKind::GmmDensity => "gmm-density",
            ScoreKind::GmmEntropy => "gmm-entropy",
            ScoreKind::GmmPerClass => "gmm-per-class",
            ScoreKind::MultiGmmDensity => "multi-gmm-density",
            ScoreKind::Joint => "joint",
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(self, ScoreKind::Joint)
    }

    /// Entropies are negated so every score ranks ID above OOD.
    pub fn value(&self, b: &ScoreBundle, reference: Option<&ValidationReference>) -> Result<f64> {
        Ok(match self {
            ScoreKind::SoftmaxConf => b.softmax_conf,
            ScoreKind::SoftmaxDensity => b.softmax_density,
            ScoreKind::SoftmaxEntropy => -b.softmax_entropy,
            ScoreKind::GmmDensity => b.gmm_density,
            ScoreKind::GmmEntropy => -b.gmm_posterior_entropy,
            ScoreKind::GmmPerClass => b.gmm_per_class_max,
            ScoreKind::MultiGmmDensity => b.multi_gmm_density,
            ScoreKind::Joint => {
                let r = reference.ok_or_else(|| Error::Config("joint score needs a validation reference".into()))?;
                joint_fused_score(b, r)
            }
        })
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match norm.as_str() {
            "softmax-conf" | "softmax-confidence" | "conf" => "softmax",
            "logsumexp" | "density" => "softmax-density",
            "entropy" => "softmax-entropy",
            "gmm-posterior-entropy" => "gmm-entropy",
            "joint-thresholding" => "joint",
            other => other,
        };
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == alias)
            .ok_or_else(|| Error::invalid(format!("unknown score '{s}'")))
    }
}

/// Detections scored together by [`Scorer::score_batch`].
pub const SCORE_BATCH: usize = 64;

/// Reusable scoring state for one calibration profile.
///
/// Embeddings are evaluated in column-major blocks of up to [`SCORE_BATCH`]
/// detections. A detection's scores do not depend on the block it lands in,
/// so [`Scorer::score`] and [`Scorer::score_batch`] agree bitwise.
pub struct Scorer<'a> {
    single: &'a ModelSet,
    multi: &'a ModelSet,
    profile: CalibrationProfile,
    logits: Vec<f64>,
    columns: Vec<f64>,
    diff: Vec<f64>,
    maha: Vec<f64>,
    sum: Vec<f64>,
    single_ll: Vec<f64>,
    multi_ll: Vec<f64>,
    row_single: Vec<f64>,
    row_multi: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(single: &'a ModelSet, multi: &'a ModelSet, profile: CalibrationProfile) -> Result<Self> {
        profile.validate()?;
        if single.dim() != multi.dim() || single.num_classes() != multi.num_classes() {
            return Err(Error::invalid("single and multi model sets disagree in shape"));
        }
        let c = single.num_classes();
        let d = single.dim();
        Ok(Self {
            single,
            multi,
            profile,
            logits: Vec::with_capacity(c),
            columns: vec![0.0; d * SCORE_BATCH],
            diff: vec![0.0; d * SCORE_BATCH],
            maha: vec![0.0; SCORE_BATCH],
            sum: vec![0.0; SCORE_BATCH],
            single_ll: vec![0.0; c * SCORE_BATCH],
            multi_ll: vec![0.0; c * SCORE_BATCH],
            row_single: vec![0.0; c],
            row_multi: vec![0.0; c],
        })
    }

    pub fn profile(&self) -> &CalibrationProfile {
        &self.profile
    }

    fn check(&self, det: &DetectionRecord) -> Result<()> {
        if det.embedding.len() != self.single.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.single.dim(),
                actual: det.embedding.len(),
            });
        }
        if det.logits.len() != self.single.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.single.num_classes(),
                actual: det.logits.len(),
            });
        }
        Ok(())
    }

    pub fn score(&mut self, det: &DetectionRecord) -> Result<ScoreBundle> {
        self.check(det)?;
        let mut out = Vec::with_capacity(1);
        self.score_block(core::slice::from_ref(det), &mut out);
        Ok(out.pop().expect("one bundle"))
    }

    /// Scores many detections; a shape error names the offending record.
    pub fn score_batch<D: Borrow<DetectionRecord>>(&mut self, dets: &[D]) -> Result<Vec<ScoreBundle>> {
        for (i, d) in dets.iter().enumerate() {
            self.check(d.borrow()).map_err(|e| Error::record(i, e.to_string()))?;
        }
        let mut out = Vec::with_capacity(dets.len());
        for block in dets.chunks(SCORE_BATCH) {
            self.score_block(block, &mut out);
        }
        Ok(out)
    }

    fn score_block<D: Borrow<DetectionRecord>>(&mut self, dets: &[D], out: &mut Vec<ScoreBundle>) {
        let m = dets.len();
        let d = self.single.dim();
        let c = self.single.num_classes();
        let columns = &mut self.columns[..d * m];
        for (s, det) in dets.iter().enumerate() {
            for (j, &v) in det.borrow().embedding.iter().enumerate() {
                columns[j * m + s] = v as f64;
            }
        }
        let (diff, maha, sum) = (&mut self.diff[..d * m], &mut self.maha[..m], &mut self.sum[..m]);
        self.single
            .per_class_loglik_batch(columns, diff, maha, sum, &mut self.single_ll[..c * m]);
        self.multi
            .per_class_loglik_batch(columns, diff, maha, sum, &mut self.multi_ll[..c * m]);
        for (s, det) in dets.iter().enumerate() {
            self.logits.clear();
            self.logits.extend(det.borrow().logits.iter().map(|&v| v as f64));
            for k in 0..c {
                self.row_single[k] = self.single_ll[k * m + s];
                self.row_multi[k] = self.multi_ll[k * m + s];
            }
            let soft = score_softmax_family(&self.logits, self.profile.t_model);
            let gmm = gmm_scores_from_loglik(
                &self.row_single,
                &self.row_multi,
                self.single,
                self.multi,
                self.profile.t_gmm,
                self.profile.gmm_priors,
            );
            out.push(ScoreBundle::from_parts(soft, gmm));
        }
    }
}

#[cfg(feature = "serde")]
impl Serialize for ScoreKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

#[cfg(feature = "serde")]
impl<'de> Deserialize<'de> for ScoreKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let s = alloc::string::String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{ClassDensityModel, FitMetadata, GaussianComponent};
    use crate::linalg::CholeskyFactor;
    use crate::math::ln;
    use crate::types::QuantilePolicy;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    fn set(means: &[f64]) -> ModelSet {
        let n = means.len();
        ModelSet::new(
            means
                .iter()
                .enumerate()
                .map(|(c, &m)| ClassDensityModel {
                    class_id: c as u32,
                    class_prior: 1.0 / n as f64,
                    components: vec![GaussianComponent {
                        weight: 1.0,
                        mean: vec![m],
                        chol: CholeskyFactor::identity(1),
                    }],
                    meta: FitMetadata::default(),
                })
                .collect(),
            n,
        )
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let p = softmax(&[2.0, 0.0], 2.0);
        close(p[0], 0.731_058_578_630_004_9, 1e-12);
        close(p[1], 0.268_941_421_369_995_1, 1e-12);
        let p = softmax(&[1000.0, 0.0], 1.0);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_family_examples() {
        let s = score_softmax_family(&[0.0, 0.0], 1.0);
        close(s.conf, 0.5, 1e-15);
        close(s.density, ln(2.0), 1e-15);
        close(s.entropy, ln(2.0), 1e-15);
        let s = score_softmax_family(&[50.0, -50.0], 1.0);
        close(s.conf, 1.0, 1e-15);
        close(s.entropy, 0.0, 1e-15);
        close(score_softmax_family(&[1.0, 1.0, 1.0], 1.0).entropy, ln(3.0), 1e-15);
    }

    #[test]
    fn gmm_family_examples() {
        let s = set(&[0.0, 4.0]);
        let g = score_gmm_family(&[0.0], &s, &s, 1.0, true).unwrap();
        // posterior (1/(1+e^-8), e^-8/(1+e^-8)); entropy evaluated directly
        let q0 = 1.0 / (1.0 + exp(-8.0));
        let h = -(q0 * ln(q0) + (1.0 - q0) * ln(1.0 - q0));
        close(g.posterior_entropy, h, 1e-12);
        close(g.posterior_entropy, 0.003_018_207_4, 1e-9);
        close(g.per_class_max, -0.918_938_533_204_672_7, 1e-12);
        let same = set(&[1.0, 1.0, 1.0]);
        let g = score_gmm_family(&[7.0], &same, &same, 1.0, true).unwrap();
        close(g.posterior_entropy, ln(3.0), 1e-12);
    }

    #[test]
    fn joint_rule_examples() {
        let t = JointThresholds {
            tau_soft: 0.5,
            tau_gmm: 0.4,
            policy: QuantilePolicy::default(),
        };
        let mut b = ScoreBundle::from_parts(
            SoftmaxScores { conf: 0.9, density: 0.0, entropy: 0.0 },
            GmmScores { density: 0.0, posterior_entropy: 0.1, per_class_max: 0.0, multi_density: 0.0 },
        );
        assert_eq!(joint_decide(&b, &t), Decision::Id);
        b.gmm_posterior_entropy = 0.5;
        assert_eq!(joint_decide(&b, &t), Decision::Ood);
        b.softmax_conf = 0.5;
        b.gmm_posterior_entropy = 0.4;
        assert_eq!(joint_decide(&b, &t), Decision::Id);
    }

    #[test]
    fn fused_score_examples() {
        let r = ValidationReference::new(vec![0.4, 0.1, 0.3, 0.2], vec![0.9, 0.6, 0.8, 0.7]).unwrap();
        let mut b = ScoreBundle::from_parts(
            SoftmaxScores { conf: 0.2, density: 0.0, entropy: 0.0 },
            GmmScores { density: 0.0, posterior_entropy: 0.8, per_class_max: 0.0, multi_density: 0.0 },
        );
        close(joint_fused_score(&b, &r), 0.5, 1e-15);
        b.softmax_conf = 0.05;
        assert_eq!(joint_fused_score(&b, &r), 0.0);
        assert!(ValidationReference::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn score_kind_parsing() {
        for k in ScoreKind::ALL {
            assert_eq!(k.as_str().parse::<ScoreKind>().unwrap(), k);
        }
        assert_eq!("logsumexp".parse::<ScoreKind>().unwrap(), ScoreKind::SoftmaxDensity);
        assert!("nope".parse::<ScoreKind>().is_err());
    }

    #[test]
    fn batch_and_single_scoring_agree_bitwise() {
        let dim = 5;
        let model = |c: u32, k: usize| ClassDensityModel {
            class_id: c,
            class_prior: 0.5,
            components: (0..k)
                .map(|i| {
                    let mut cov = vec![0.0; dim * dim];
                    for a in 0..dim {
                        for b in 0..dim {
                            cov[a * dim + b] = if a == b { 1.5 + i as f64 } else { 0.3 };
                        }
                    }
                    GaussianComponent {
                        weight: 1.0 / k as f64,
                        mean: (0..dim).map(|j| (c as usize + i + j) as f64 * 0.5).collect(),
                        chol: CholeskyFactor::from_covariance(&cov, dim).unwrap(),
                    }
                })
                .collect(),
            meta: FitMetadata::default(),
        };
        let single = ModelSet::new(vec![model(0, 1), model(1, 1)], 2).unwrap();
        let multi = ModelSet::new(vec![model(0, 3), model(1, 2)], 2).unwrap();
        let dets: Vec<DetectionRecord> = (0..SCORE_BATCH + 21)
            .map(|i| DetectionRecord {
                image_id: "a".into(),
                bbox: crate::types::BoundingBox::new(0.0, 0.0, 1.0, 1.0),
                logits: vec![(i as f32 * 0.37).sin(), (i as f32 * 0.11).cos()],
                embedding: (0..dim).map(|j| ((i * 7 + j) as f32 * 0.29).sin() * 3.0).collect(),
                detector_score: None,
            })
            .collect();
        let mut scorer = Scorer::new(&single, &multi, CalibrationProfile::default()).unwrap();
        let batch = scorer.score_batch(&dets).unwrap();
        for (d, b) in dets.iter().zip(&batch) {
            let one = scorer.score(d).unwrap();
            assert_eq!(one.gmm_density.to_bits(), b.gmm_density.to_bits());
            assert_eq!(one.multi_gmm_density.to_bits(), b.multi_gmm_density.to_bits());
            assert_eq!(one.gmm_posterior_entropy.to_bits(), b.gmm_posterior_entropy.to_bits());
            let e: Vec<f64> = d.embedding.iter().map(|&v| v as f64).collect();
            let reference = score_gmm_family(&e, &single, &multi, 1.0, true).unwrap();
            assert!((reference.multi_density - b.multi_gmm_density).abs() < 1e-10);
        }
    }
}
