//! COCO-style mAP averaged over IoU thresholds 0.50:0.05:0.95 with 101-point
//! interpolated precision.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::assignment::iou;
use crate::types::BoundingBox;

/// `0.50, 0.55, …, 0.95`, each computed as `(50 + 5i) / 100`.
pub fn iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedBox {
    pub image: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BoundingBox,
    /// Source record index; breaks confidence ties.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub image: usize,
    /// Negative ids (the OOD sentinel) belong to no evaluated class.
    pub class_id: i32,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MapResult {
    /// Mean over classes with ground truth; `None` when no class has any.
    pub map: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Classes without ground truth, left out of the mean.
    pub excluded_classes: Vec<usize>,
}

/// 101-point interpolated AP from per-detection TP flags (already sorted by
/// descending confidence).
pub fn average_precision_101(is_tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Greedy matching in descending confidence order: each prediction takes the
/// unmatched same-class ground truth of its image with the highest IoU at or
/// above `threshold`.
fn match_class(preds: &[&PredictedBox], gts_by_image: &BTreeMap<usize, Vec<BoundingBox>>, threshold: f64) -> Vec<bool> {
    let mut used: BTreeMap<usize, Vec<bool>> = gts_by_image.iter().map(|(&k, v)| (k, vec![false; v.len()])).collect();
    preds
        .iter()
        .map(|p| {
            let Some(gts) = gts_by_image.get(&p.image) else {
                return false;
            };
            let flags = used.get_mut(&p.image).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if flags[g] {
                    continue;
                }
                let v = iou(&p.bbox, gt);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    flags[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn map_50_95(predictions: &[PredictedBox], ground_truth: &[GroundTruthBox], num_classes: usize) -> MapResult {
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let mut gts_by_image: BTreeMap<usize, Vec<BoundingBox>> = BTreeMap::new();
        let mut num_gt = 0usize;
        for g in ground_truth.iter().filter(|g| g.class_id == c as i32) {
            gts_by_image.entry(g.image).or_default().push(g.bbox);
            num_gt += 1;
        }
        if num_gt == 0 {
            per_class.push(None);
            excluded.push(c);
            continue;
        }
        let mut preds: Vec<&PredictedBox> = predictions.iter().filter(|p| p.class_id == c).collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
        let mut sum = 0.0;
        for &t in &thresholds {
            sum += average_precision_101(&match_class(&preds, &gts_by_image, t), num_gt);
        }
        per_class.push(Some(sum / thresholds.len() as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    MapResult {
        map,
        per_class,
        excluded_classes: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(image: usize, confidence: f64, bbox: BoundingBox, index: usize) -> PredictedBox {
        PredictedBox {
            image,
            class_id: 0,
            confidence,
            bbox,
            index,
        }
    }

    fn gt(image: usize, bbox: BoundingBox) -> GroundTruthBox {
        GroundTruthBox { image, class_id: 0, bbox }
    }

    #[test]
    fn perfect_detection() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let r = map_50_95(&[pred(0, 0.9, b, 0)], &[gt(0, b)], 1);
        assert_eq!(r.map, Some(1.0));
    }

    #[test]
    fn iou_point_six_gives_three_tenths() {
        let g = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let d = BoundingBox::new(0.0, 0.0, 10.0, 6.0);
        assert_eq!(iou(&g, &d), 0.6);
        let r = map_50_95(&[pred(0, 0.9, d, 0)], &[gt(0, g)], 1);
        assert!((r.map.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn no_detections_and_missing_classes() {
        let g = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let r = map_50_95(&[], &[gt(0, g)], 2);
        assert_eq!(r.map, Some(0.0));
        assert_eq!(r.excluded_classes, vec![1]);
        let r = map_50_95(&[], &[], 1);
        assert_eq!(r.map, None);
    }

    #[test]
    fn ood_ground_truth_ignored() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let ood = GroundTruthBox { image: 0, class_id: -1, bbox: b };
        let r = map_50_95(&[pred(0, 0.9, b, 0)], &[ood, gt(1, b)], 1);
        assert_eq!(r.map, Some(0.0));
    }

    #[test]
    fn ap_of_interleaved_hits() {
        // TP, FP, TP over 2 GT: precision envelope (1, 2/3, 2/3); recall (0.5, 0.5, 1)
        let ap = average_precision_101(&[true, false, true], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-15);
    }
}
