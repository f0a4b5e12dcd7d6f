//! One evaluation pass per calibration mode: scoring, pruning, both AUROC
//! protocols, TPR at fixed OSR levels and closed/open-set mAP.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::map::{map_50_95, GroundTruthBox, MapResult, PredictedBox};
use super::roc::{auroc_protocols, label_detections, tpr_at_osr, OodLabel, OSR_LEVELS};
use crate::calibration::raw_confidence;
use crate::density::ModelSet;
use crate::math::argmax;
use crate::scoring::{joint_decide, Decision, ScoreBundle, ScoreKind, Scorer, ValidationReference};
use crate::types::{CalibrationProfile, Dataset, DetectionRecord, JointThresholds, Mode};
use crate::{Error, Result};

/// Which per-detection confidence ranks predictions for mAP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ConfidenceSource {
    /// Uncalibrated softmax maximum.
    #[default]
    SoftmaxConf,
    DetectorScore,
}

/// Everything calibrated for one mode.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModeCalibration {
    pub profile: CalibrationProfile,
    pub thresholds: JointThresholds,
    pub reference: ValidationReference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub match_floor: f64,
    pub confidence: ConfidenceSource,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            match_floor: crate::assignment::DEFAULT_MATCH_FLOOR,
            confidence: ConfidenceSource::SoftmaxConf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DetectionCounts {
    pub total: usize,
    pub pruned: usize,
    pub id_matched: usize,
    pub ood_matched: usize,
    pub background: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct OsrPoint {
    pub level: f64,
    pub tpr: Option<f64>,
}

/// Configuration echoed into every report row.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ReportConfig {
    pub t_model: f64,
    pub t_gmm: f64,
    pub prune_threshold: f64,
    pub prune_applied: bool,
    pub gmm_priors: bool,
    pub tau_soft: f64,
    pub tau_gmm: f64,
    pub soft_quantile: f64,
    pub gmm_quantile: f64,
    pub match_floor: f64,
    pub confidence: ConfidenceSource,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EvaluationReport {
    pub mode: Mode,
    pub score: ScoreKind,
    pub auroc: Option<f64>,
    pub auroc_bd: Option<f64>,
    pub tpr_at_osr: Vec<OsrPoint>,
    pub cs_map: Option<f64>,
    pub os_map: Option<f64>,
    /// Fraction of retained ID-matched detections accepted by the joint rule.
    pub joint_id_accept: Option<f64>,
    /// Fraction of retained OOD-matched detections rejected by the joint rule.
    pub joint_ood_reject: Option<f64>,
    pub counts: DetectionCounts,
    pub config: ReportConfig,
    /// Reasons for every metric reported as absent.
    pub absent: BTreeMap<String, String>,
    pub map_excluded_classes: Vec<usize>,
}

fn image_indices<'a>(dets: &'a [DetectionRecord], gts: &'a [crate::types::GroundTruthRecord]) -> BTreeMap<&'a str, usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for id in dets.iter().map(|d| d.image_id.as_str()).chain(gts.iter().map(|g| g.image_id.as_str())) {
        let next = ids.len();
        ids.entry(id).or_insert(next);
    }
    ids
}

/// mAP50-95 of the detections whose `keep` flag is set, each predicting its
/// argmax class.
pub fn dataset_map(dataset: &Dataset, keep: &[bool], confidence: ConfidenceSource) -> Result<MapResult> {
    let images = image_indices(&dataset.detections, &dataset.ground_truth);
    let mut preds = Vec::new();
    for (i, d) in dataset.detections.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let logits: Vec<f64> = d.logits.iter().map(|&v| v as f64).collect();
        let conf = match confidence {
            ConfidenceSource::SoftmaxConf => raw_confidence(&logits),
            ConfidenceSource::DetectorScore => d
                .detector_score
                .ok_or_else(|| Error::record(i, "detector_score requested but absent"))? as f64,
        };
        preds.push(PredictedBox {
            image: images[d.image_id.as_str()],
            class_id: argmax(&logits).unwrap_or(0),
            confidence: conf,
            bbox: d.bbox,
            index: i,
        });
    }
    let gts: Vec<GroundTruthBox> = dataset
        .ground_truth
        .iter()
        .map(|g| GroundTruthBox {
            image: images[g.image_id.as_str()],
            class_id: g.class_id,
            bbox: g.bbox,
        })
        .collect();
    Ok(map_50_95(&preds, &gts, dataset.num_classes()))
}

/// Pruning mask of a dataset under a profile (all `true` when the mode does not prune).
pub fn keep_mask(dataset: &Dataset, profile: &CalibrationProfile) -> Vec<bool> {
    dataset
        .detections
        .iter()
        .map(|d| {
            !profile.mode.prunes() || {
                let logits: Vec<f64> = d.logits.iter().map(|&v| v as f64).collect();
                raw_confidence(&logits) >= profile.prune_threshold
            }
        })
        .collect()
}

/// Scores every detection of `dataset` under `profile`.
pub fn score_dataset(dataset: &Dataset, single: &ModelSet, multi: &ModelSet, profile: CalibrationProfile) -> Result<Vec<ScoreBundle>> {
    Scorer::new(single, multi, profile)?.score_batch(&dataset.detections)
}

/// Evaluates one mode for each requested score.
pub fn evaluate_mode(
    closed_test: &Dataset,
    open_test: &Dataset,
    single: &ModelSet,
    multi: &ModelSet,
    calibration: &ModeCalibration,
    scores: &[ScoreKind],
    settings: &EvalSettings,
) -> Result<Vec<EvaluationReport>> {
    let profile = calibration.profile;
    let labels = label_detections(&open_test.detections, &open_test.ground_truth, settings.match_floor);
    let mut bundles = score_dataset(open_test, single, multi, profile)?;
    for b in &mut bundles {
        b.joint_decision = Some(joint_decide(b, &calibration.thresholds));
    }
    let keep_open = keep_mask(open_test, &profile);
    let keep_closed = keep_mask(closed_test, &profile);

    let mut absent = BTreeMap::new();
    let cs = dataset_map(closed_test, &keep_closed, settings.confidence)?;
    let os = dataset_map(open_test, &keep_open, settings.confidence)?;
    if cs.map.is_none() {
        absent.insert("cs_map".into(), "closed_test has no ground truth".into());
    }
    if os.map.is_none() {
        absent.insert("os_map".into(), "open_test has no in-distribution ground truth".into());
    }

    let mut counts = DetectionCounts {
        total: open_test.detections.len(),
        ..Default::default()
    };
    let mut retained_labels = Vec::new();
    let mut retained = Vec::new();
    for ((b, l), &k) in bundles.iter().zip(&labels).zip(&keep_open) {
        if !k {
            counts.pruned += 1;
            continue;
        }
        match l {
            OodLabel::IdMatched(_) => counts.id_matched += 1,
            OodLabel::OodMatched => counts.ood_matched += 1,
            OodLabel::Background => counts.background += 1,
        }
        retained_labels.push(*l);
        retained.push(*b);
    }

    let rate = |want: OodLabel, decision: Decision| -> Option<f64> {
        let matching: Vec<&ScoreBundle> = retained
            .iter()
            .zip(&retained_labels)
            .filter(|(_, l)| core::mem::discriminant(*l) == core::mem::discriminant(&want))
            .map(|(b, _)| b)
            .collect();
        (!matching.is_empty()).then(|| {
            matching.iter().filter(|b| b.joint_decision == Some(decision)).count() as f64 / matching.len() as f64
        })
    };
    let joint_id_accept = rate(OodLabel::IdMatched(0), Decision::Id);
    let joint_ood_reject = rate(OodLabel::OodMatched, Decision::Ood);

    let config = ReportConfig {
        t_model: profile.t_model,
        t_gmm: profile.t_gmm,
        prune_threshold: profile.prune_threshold,
        prune_applied: profile.mode.prunes(),
        gmm_priors: profile.gmm_priors,
        tau_soft: calibration.thresholds.tau_soft,
        tau_gmm: calibration.thresholds.tau_gmm,
        soft_quantile: calibration.thresholds.policy.soft_quantile,
        gmm_quantile: calibration.thresholds.policy.gmm_quantile,
        match_floor: settings.match_floor,
        confidence: settings.confidence,
    };

    let mut reports = Vec::with_capacity(scores.len());
    for &kind in scores {
        let values = retained
            .iter()
            .map(|b| kind.value(b, Some(&calibration.reference)))
            .collect::<Result<Vec<f64>>>()?;
        let mut absent = absent.clone();
        let proto = auroc_protocols(&retained_labels, &values)?;
        let auroc = proto
            .auroc
            .map_err(|e| absent.insert("auroc".into(), format!("{e}")))
            .ok();
        let auroc_bd = proto
            .auroc_bd
            .map_err(|e| absent.insert("auroc_bd".into(), format!("{e}")))
            .ok();
        let mut id = Vec::new();
        let mut ood = Vec::new();
        for (&v, l) in values.iter().zip(&retained_labels) {
            match l {
                OodLabel::IdMatched(_) => id.push(v),
                OodLabel::OodMatched => ood.push(v),
                OodLabel::Background => {}
            }
        }
        let tpr_at_osr = match tpr_at_osr(&id, &ood, &OSR_LEVELS) {
            Ok(points) => points
                .into_iter()
                .map(|(level, tpr)| OsrPoint { level, tpr: Some(tpr) })
                .collect(),
            Err(e) => {
                absent.insert("tpr_at_osr".into(), format!("{e}"));
                OSR_LEVELS.iter().map(|&level| OsrPoint { level, tpr: None }).collect()
            }
        };
        reports.push(EvaluationReport {
            mode: profile.mode,
            score: kind,
            auroc,
            auroc_bd,
            tpr_at_osr,
            cs_map: cs.map,
            os_map: os.map,
            joint_id_accept,
            joint_ood_reject,
            counts,
            config,
            absent,
            map_excluded_classes: cs.excluded_classes.clone(),
        });
    }
    Ok(reports)
}
