use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::assignment::match_records;
use crate::math::floor;
use crate::types::{DetectionRecord, GroundTruthRecord};
use crate::{Error, Result};

/// False-accept levels at which the ID true-positive rate is reported.
pub const OSR_LEVELS: [f64; 3] = [0.05, 0.10, 0.20];

fn check_sets(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::UndefinedMetric("no in-distribution scores"));
    }
    if ood.is_empty() {
        return Err(Error::UndefinedMetric("no out-of-distribution scores"));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    Ok(())
}

/// Mann-Whitney AUROC `P(id > ood) + ½ P(id = ood)` from mid-rank sums.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0f64;
    let mut start = 0usize;
    while start < all.len() {
        let mut end = start;
        while end + 1 < all.len() && all[end + 1].0 == all[start].0 {
            end += 1;
        }
        // ranks start+1 ..= end+1 share their mean
        let mid_rank = (start + end + 2) as f64 / 2.0;
        let ids = all[start..=end].iter().filter(|e| e.1).count();
        rank_sum += mid_rank * ids as f64;
        start = end + 1;
    }
    let n = id.len() as f64;
    let u = rank_sum - n * (n + 1.0) / 2.0;
    Ok(u / (n * ood.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RocCurve {
    /// Descending unique score thresholds; point `i + 1` accepts scores `≥ thresholds[i]`.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    /// Trapezoidal area under the stored points.
    pub auroc: f64,
}

pub fn roc_curve(id: &[f64], ood: &[f64]) -> Result<RocCurve> {
    check_sets(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n, m) = (id.len() as f64, ood.len() as f64);
    let mut thresholds = Vec::new();
    let mut tpr = alloc::vec![0.0];
    let mut fpr = alloc::vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / n);
        fpr.push(fp as f64 / m);
    }
    let auroc = fpr
        .windows(2)
        .zip(tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
        .sum();
    Ok(RocCurve {
        thresholds,
        tpr,
        fpr,
        auroc,
    })
}

/// ID true-positive rate at each false-accept level `α`. The threshold is the
/// OOD score that admits `⌊α·m⌋` OOD detections; scores tied with it count
/// fractionally.
pub fn tpr_at_osr(id: &[f64], ood: &[f64], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_sets(id, ood)?;
    let mut sorted = ood.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    levels
        .iter()
        .map(|&alpha| {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::invalid(alloc::format!("OSR level {alpha} outside [0, 1]")));
            }
            let allowed = floor(alpha * m as f64 + 1e-9) as usize;
            // Threshold sits on the OOD score admitting `allowed` OOD values;
            // OOD ties at the threshold are admitted fractionally so exactly
            // `allowed` are accepted in expectation.
            let t = sorted[m - allowed.max(1)];
            let above = m - sorted.partition_point(|&o| o <= t);
            let tied = sorted.partition_point(|&o| o <= t) - sorted.partition_point(|&o| o < t);
            let frac = if allowed == 0 {
                0.0
            } else {
                (allowed - above) as f64 / tied as f64
            };
            let strictly = id.iter().filter(|&&x| x > t).count() as f64;
            let at = id.iter().filter(|&&x| x == t).count() as f64;
            let accepted = strictly + frac * at;
            Ok((alpha, accepted / id.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum OodLabel {
    IdMatched(u32),
    OodMatched,
    Background,
}

/// Matches detections against all ground truth of their image: ID classes
/// give [`OodLabel::IdMatched`], the OOD sentinel gives
/// [`OodLabel::OodMatched`], anything else is background.
pub fn label_detections(detections: &[DetectionRecord], ground_truth: &[GroundTruthRecord], match_floor: f64) -> Vec<OodLabel> {
    let mut labels = alloc::vec![OodLabel::Background; detections.len()];
    for pair in match_records(detections, ground_truth, match_floor) {
        let gt = &ground_truth[pair.ground_truth];
        labels[pair.detection] = if gt.is_ood() {
            OodLabel::OodMatched
        } else {
            OodLabel::IdMatched(gt.class_id as u32)
        };
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolAuroc {
    /// ID-matched vs OOD-matched; background ignored.
    pub auroc: Result<f64>,
    /// ID-matched vs OOD-matched and background together.
    pub auroc_bd: Result<f64>,
}

pub fn auroc_protocols(labels: &[OodLabel], scores: &[f64]) -> Result<ProtocolAuroc> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let mut id = Vec::new();
    let mut ood = Vec::new();
    let mut bg = Vec::new();
    for (l, &s) in labels.iter().zip(scores) {
        match l {
            OodLabel::IdMatched(_) => id.push(s),
            OodLabel::OodMatched => ood.push(s),
            OodLabel::Background => bg.push(s),
        }
    }
    let auroc_plain = auroc(&id, &ood);
    let auroc_bd = if ood.is_empty() {
        Err(Error::UndefinedMetric("no out-of-distribution scores"))
    } else {
        ood.extend_from_slice(&bg);
        auroc(&id, &ood)
    };
    Ok(ProtocolAuroc {
        auroc: auroc_plain,
        auroc_bd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.8], &[0.8]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auroc(&[1.0], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn roc_curve_endpoints_and_area() {
        let c = roc_curve(&[0.9, 0.4, 0.4], &[0.6, 0.4, 0.1]).unwrap();
        assert_eq!((c.tpr[0], c.fpr[0]), (0.0, 0.0));
        assert_eq!((*c.tpr.last().unwrap(), *c.fpr.last().unwrap()), (1.0, 1.0));
        let a = auroc(&[0.9, 0.4, 0.4], &[0.6, 0.4, 0.1]).unwrap();
        assert!((c.auroc - a).abs() < 1e-12);
    }

    #[test]
    fn tpr_examples() {
        let r = tpr_at_osr(&[0.9, 0.8], &[0.1, 0.2], &OSR_LEVELS).unwrap();
        assert!(r.iter().all(|&(_, t)| t == 1.0));
        let mut ood = vec![0.65, 0.5, 0.4, 0.3];
        ood.extend((0..16).map(|i| 0.01 * i as f64));
        assert_eq!(ood.len(), 20);
        let r = tpr_at_osr(&[0.9, 0.8, 0.7, 0.6], &ood, &[0.05]).unwrap();
        assert_eq!(r[0].1, 0.75);
    }

    #[test]
    fn tpr_with_all_ties_equals_level() {
        let r = tpr_at_osr(&[0.5; 40], &[0.5; 100], &OSR_LEVELS).unwrap();
        for (a, t) in r {
            assert!((a - t).abs() < 1e-12);
        }
    }

    #[test]
    fn protocols_without_background_agree() {
        let labels = [OodLabel::IdMatched(0), OodLabel::IdMatched(1), OodLabel::OodMatched, OodLabel::OodMatched];
        let scores = [0.9, 0.3, 0.5, 0.1];
        let p = auroc_protocols(&labels, &scores).unwrap();
        assert_eq!(p.auroc.unwrap(), p.auroc_bd.unwrap());
    }

    #[test]
    fn protocols_missing_ood() {
        let labels = [OodLabel::IdMatched(0), OodLabel::Background];
        let p = auroc_protocols(&labels, &[0.9, 0.1]).unwrap();
        assert!(p.auroc.is_err() && p.auroc_bd.is_err());
    }
}
