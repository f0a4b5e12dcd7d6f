use osgate_core::assignment::{hungarian_assign, iou, match_boxes};
use osgate_core::calibration::{prune, select_joint_thresholds, LabeledVectors};
use osgate_core::density::{fit_gmm_em, FitConfig, Samples};
use osgate_core::math::argmax;
use osgate_core::metrics::{auroc, map_50_95, tpr_at_osr, GroundTruthBox, PredictedBox};
use osgate_core::scoring::{joint_decide, joint_fused_score, softmax, Decision, ScoreBundle, ValidationReference};
use osgate_core::synthgen::oracle_auroc;
use osgate_core::{BoundingBox, JointThresholds, QuantilePolicy};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0f32..100.0, 0.0f32..100.0, 1.0f32..50.0, 1.0f32..50.0).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
}

/// Scores on a coarse lattice so ties are common.
fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..20).prop_map(|v| v as f64 / 4.0), 1..max)
}

fn bundle(conf: f64, entropy: f64) -> ScoreBundle {
    ScoreBundle {
        softmax_conf: conf,
        softmax_density: 0.0,
        softmax_entropy: 0.0,
        gmm_density: 0.0,
        gmm_posterior_entropy: entropy,
        gmm_per_class_max: 0.0,
        multi_gmm_density: 0.0,
        joint_decision: None,
    }
}

fn brute_force_assignment(cost: &[f64], n: usize, m: usize) -> f64 {
    // minimum over injective maps from the smaller side into the larger
    fn rec(cost: &[f64], n: usize, m: usize, row: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let (rows, cols) = if transpose { (m, n) } else { (n, m) };
        if row == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = if transpose { cost[c * m + row] } else { cost[row * m + c] };
                best = best.min(v + rec(cost, n, m, row + 1, used, transpose));
                used[c] = false;
            }
        }
        best
    }
    let transpose = n > m;
    let cols = if transpose { n } else { m };
    rec(cost, n, m, 0, &mut vec![false; cols], transpose)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force(n in 1usize..=6, m in 1usize..=6, seed in any::<u64>()) {
        let mut s = seed;
        let cost: Vec<f64> = (0..n * m)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) % 7) as f64 / 7.0
            })
            .collect();
        let pairs = hungarian_assign(&cost, n, m).unwrap();
        prop_assert_eq!(pairs.len(), n.min(m));
        let total: f64 = pairs.iter().map(|&(r, c)| cost[r * m + c]).sum();
        prop_assert!((total - brute_force_assignment(&cost, n, m)).abs() < 1e-9);
        let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(rows.len(), n.min(m));
        prop_assert_eq!(cols.len(), n.min(m));
    }

    #[test]
    fn matching_respects_floor(dets in prop::collection::vec(bbox(), 0..6), gts in prop::collection::vec(bbox(), 0..6), floor in 0.1f64..0.9) {
        let r = match_boxes(&dets, &gts, floor);
        prop_assert_eq!(r.pairs.len() + r.unmatched_detections.len(), dets.len());
        prop_assert_eq!(r.pairs.len() + r.unmatched_ground_truth.len(), gts.len());
        prop_assert!(r.pairs.iter().all(|p| p.iou >= floor));
    }

    #[test]
    fn auroc_matches_oracle(id in scores(40), ood in scores(40)) {
        prop_assert_eq!(auroc(&id, &ood).unwrap(), oracle_auroc(&id, &ood).unwrap());
    }

    #[test]
    fn auroc_swap_symmetry(id in scores(30), ood in scores(30)) {
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_invariant_under_monotone_maps(id in scores(30), ood in scores(30)) {
        let f = |v: &f64| (v * 0.7).exp() + 3.0;
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&id.iter().map(f).collect::<Vec<_>>(), &ood.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tpr_is_non_decreasing_in_level(id in scores(40), ood in scores(40)) {
        let levels: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let r = tpr_at_osr(&id, &ood, &levels).unwrap();
        for w in r.windows(2) {
            prop_assert!(w[1].1 >= w[0].1 - 1e-12);
        }
        prop_assert!(r.iter().all(|p| (0.0..=1.0).contains(&p.1)));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..8), shift in -50.0f64..50.0, t in 0.05f64..20.0) {
        let a = softmax(&logits, t);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = softmax(&shifted, t);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temperature_preserves_argmax(logits in prop::collection::vec(-20.0f64..20.0, 1..8), t in 0.01f64..100.0) {
        prop_assert_eq!(argmax(&softmax(&logits, t)), argmax(&logits));
    }

    #[test]
    fn pruning_is_idempotent(confs in prop::collection::vec(0.0f64..1.0, 0..50), thr in 0.0f64..1.0) {
        let once = prune(&confs, |&c| c, thr);
        let twice = prune(&once, |&c| c, thr);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.iter().all(|&c| c >= thr));
    }

    #[test]
    fn joint_rule_is_monotone(conf in 0.0f64..1.0, h in 0.0f64..1.0, dc in 0.0f64..0.5, dh in 0.0f64..0.5, ts in 0.0f64..1.0, tg in 0.0f64..1.0) {
        let th = JointThresholds { tau_soft: ts, tau_gmm: tg, policy: QuantilePolicy::default() };
        if joint_decide(&bundle(conf, h), &th) == Decision::Id {
            prop_assert_eq!(joint_decide(&bundle(conf + dc, (h - dh).max(0.0)), &th), Decision::Id);
        }
    }

    #[test]
    fn quantile_thresholds_respect_union_bound(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..80)) {
        let bundles: Vec<ScoreBundle> = vals.iter().map(|&(c, h)| bundle(c, h)).collect();
        let policy = QuantilePolicy::default();
        let th = select_joint_thresholds(&bundles, policy).unwrap();
        let rejected = bundles.iter().filter(|b| joint_decide(b, &th) == Decision::Ood).count();
        let bound = (policy.soft_quantile + 1.0 - policy.gmm_quantile) * bundles.len() as f64;
        prop_assert!(rejected as f64 <= bound + 1e-9);
    }

    #[test]
    fn fused_score_is_monotone(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..50), conf in 0.0f64..1.0, h in 0.0f64..1.0, dc in 0.0f64..0.3, dh in 0.0f64..0.3) {
        let reference = ValidationReference::new(vals.iter().map(|v| v.0).collect(), vals.iter().map(|v| v.1).collect()).unwrap();
        let a = joint_fused_score(&bundle(conf, h), &reference);
        let b = joint_fused_score(&bundle(conf + dc, h - dh), &reference);
        prop_assert!(b >= a);
    }

    #[test]
    fn fused_score_is_consistent_with_quantile_rule(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..60), conf in 0.0f64..1.0, h in 0.0f64..1.0) {
        let bundles: Vec<ScoreBundle> = vals.iter().map(|&(c, e)| bundle(c, e)).collect();
        let policy = QuantilePolicy { soft_quantile: 0.1, gmm_quantile: 0.9 };
        let th = select_joint_thresholds(&bundles, policy).unwrap();
        let reference = ValidationReference::from_bundles(&bundles).unwrap();
        if joint_decide(&bundle(conf, h), &th) == Decision::Id {
            prop_assert!(joint_fused_score(&bundle(conf, h), &reference) >= 0.1 - 1e-12);
        }
    }

    #[test]
    fn map_is_invariant_to_prediction_order(seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        };
        let gts: Vec<GroundTruthBox> = (0..6)
            .map(|i| {
                let x = 60.0 * i as f32;
                GroundTruthBox { image: i % 2, class_id: (i % 3) as i32, bbox: BoundingBox::new(x, 0.0, x + 40.0, 40.0) }
            })
            .collect();
        let mut preds: Vec<PredictedBox> = (0..10)
            .map(|i| {
                let g = &gts[i % 6];
                let dx = (next() * 20.0) as f32;
                PredictedBox {
                    image: g.image,
                    class_id: (next() * 3.0) as usize,
                    confidence: (next() * 8.0).floor() / 8.0,
                    bbox: BoundingBox::new(g.bbox.x_min + dx, 0.0, g.bbox.x_max + dx, 40.0),
                    index: i,
                }
            })
            .collect();
        let a = map_50_95(&preds, &gts, 3);
        preds.reverse();
        let b = map_50_95(&preds, &gts, 3);
        prop_assert_eq!(a.map, b.map);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn em_nll_is_monotone_and_deterministic(seed in 0u64..1000, k in 1usize..=4, dim in 1usize..=4) {
        let mut s = seed.wrapping_add(17);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let n = 60;
        let data: Vec<f64> = (0..n * dim)
            .map(|i| next() + if (i / dim) % 2 == 0 { 3.0 } else { 0.0 })
            .collect();
        let samples = Samples::new(&data, dim).unwrap();
        let cfg = FitConfig { k, seed, ..FitConfig::default() };
        let fit = fit_gmm_em(0, samples, n, &cfg).unwrap();
        prop_assert!(fit.trace.max_increase() <= 1e-9);
        let again = fit_gmm_em(0, samples, n, &cfg).unwrap();
        prop_assert_eq!(fit.model, again.model);
    }

    #[test]
    fn temperature_scaled_nll_matches_rescaled_data(t in 0.1f64..10.0, f in 0.2f64..5.0) {
        let mut v = LabeledVectors::new(3);
        v.push(&[1.0, -0.5, 2.0], 2).unwrap();
        v.push(&[0.1, 0.3, -1.0], 0).unwrap();
        v.push(&[-2.0, 2.5, 0.0], 1).unwrap();
        prop_assert!((v.nll(t * f) - v.scaled(1.0 / f).nll(t)).abs() < 1e-9);
    }
}
