//! Prediction-to-ground-truth matching: IoU, an exact O(n³) assignment
//! solver, and the per-image matching used to label embeddings.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::types::{BoundingBox, Dataset, DetectionRecord, GroundTruthRecord};
use crate::{Error, Result};

pub const DEFAULT_MATCH_FLOOR: f64 = 0.5;

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) as f64 - a.x_min.max(b.x_min) as f64).max(0.0);
    let iy = (a.y_max.min(b.y_max) as f64 - a.y_min.max(b.y_min) as f64).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Minimum-cost assignment on a row-major `n_rows × n_cols` cost matrix.
///
/// Returns `min(n_rows, n_cols)` `(row, col)` pairs sorted by row. Among
/// equal-cost optima the lexicographically smallest row-major pairing wins.
pub fn hungarian_assign(cost: &[f64], n_rows: usize, n_cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != n_rows * n_cols {
        return Err(Error::DimensionMismatch {
            expected: n_rows * n_cols,
            actual: cost.len(),
        });
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::invalid(alloc::format!(
            "non-finite cost at ({}, {})",
            i / n_cols.max(1),
            i % n_cols.max(1)
        )));
    }
    let n = n_rows.max(n_cols);
    if n_rows == 0 || n_cols == 0 {
        return Ok(Vec::new());
    }
    let at = |i: usize, j: usize| -> f64 {
        if i < n_rows && j < n_cols {
            cost[i * n_cols + j]
        } else {
            0.0
        }
    };

    // Shortest augmenting paths with dual potentials (1-based, column 0 is a sentinel).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    let mut col_to_row = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
        col_to_row[j - 1] = p[j] - 1;
    }

    // Every optimal assignment uses only edges that are tight under the
    // optimal duals, so the lexicographic optimum is the lexicographically
    // smallest perfect matching of the tight subgraph.
    let scale = 1.0 + cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let eps = 1e-9 * scale;
    let tight = |i: usize, j: usize| at(i, j) - u[i + 1] - v[j + 1] <= eps;
    let mut col_fixed = vec![false; n];
    for i in 0..n {
        let current = row_to_col[i];
        for j in 0..current {
            if col_fixed[j] || !tight(i, j) {
                continue;
            }
            if let Some(path) = alternating_path(i, j, current, &row_to_col, &col_to_row, &col_fixed, &tight, n) {
                // path: rows r_1..r_m that shift to new columns c_1..c_m, the last one onto `current`.
                row_to_col[i] = j;
                col_to_row[j] = i;
                for (r, c) in path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                break;
            }
        }
        col_fixed[row_to_col[i]] = true;
    }

    Ok((0..n_rows)
        .filter_map(|i| {
            let j = row_to_col[i];
            (j < n_cols).then_some((i, j))
        })
        .collect())
}

/// Breadth-first search for a re-routing that lets row `i` take column `j`
/// while the current owner chain ends on column `target` (freed by `i`).
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    i: usize,
    j: usize,
    target: usize,
    row_to_col: &[usize],
    col_to_row: &[usize],
    col_fixed: &[bool],
    tight: &impl Fn(usize, usize) -> bool,
    n: usize,
) -> Option<Vec<(usize, usize)>> {
    let start = col_to_row[j];
    debug_assert_ne!(start, i);
    let mut parent_col = vec![usize::MAX; n];
    let mut seen_row = vec![false; n];
    seen_row[i] = true;
    seen_row[start] = true;
    let mut queue = alloc::collections::VecDeque::new();
    queue.push_back(start);
    // came_from[c] = row that reaches column c
    let mut came_from = vec![usize::MAX; n];
    while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if c == j || col_fixed[c] || came_from[c] != usize::MAX || !tight(r, c) {
                continue;
            }
            came_from[c] = r;
            if c == target {
                let mut path = Vec::new();
                let mut col = c;
                loop {
                    let row = came_from[col];
                    path.push((row, col));
                    if row == start {
                        break;
                    }
                    col = parent_col[row];
                }
                return Some(path);
            }
            let next = col_to_row[c];
            if !seen_row[next] {
                seen_row[next] = true;
                parent_col[next] = row_to_col[next];
                queue.push_back(next);
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

/// Outcome of matching one image; indices are local to the slices passed in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

/// Assignment on `1 − IoU`, then pairs below `match_floor` are demoted to unmatched.
pub fn match_boxes(detections: &[BoundingBox], ground_truth: &[BoundingBox], match_floor: f64) -> MatchResult {
    let (nd, ng) = (detections.len(), ground_truth.len());
    let mut ious = vec![0.0; nd * ng];
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in ground_truth.iter().enumerate() {
            ious[i * ng + j] = iou(d, g);
        }
    }
    let cost: Vec<f64> = ious.iter().map(|v| 1.0 - v).collect();
    // Box validation upstream guarantees finite costs.
    let assignment = hungarian_assign(&cost, nd, ng).unwrap_or_default();

    let mut det_used = vec![false; nd];
    let mut gt_used = vec![false; ng];
    let mut pairs = Vec::new();
    for (i, j) in assignment {
        let v = ious[i * ng + j];
        if v >= match_floor && v > 0.0 {
            det_used[i] = true;
            gt_used[j] = true;
            pairs.push(MatchedPair {
                detection: i,
                ground_truth: j,
                iou: v,
            });
        }
    }
    MatchResult {
        pairs,
        unmatched_detections: (0..nd).filter(|&i| !det_used[i]).collect(),
        unmatched_ground_truth: (0..ng).filter(|&j| !gt_used[j]).collect(),
    }
}

/// Matches the records of a single image.
pub fn match_image(detections: &[DetectionRecord], ground_truth: &[GroundTruthRecord], match_floor: f64) -> MatchResult {
    debug_assert!(detections
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(ground_truth.iter().map(|g| g.image_id.as_str()))
        .collect::<alloc::collections::BTreeSet<_>>()
        .len()
        <= 1);
    let db: Vec<BoundingBox> = detections.iter().map(|d| d.bbox).collect();
    let gb: Vec<BoundingBox> = ground_truth.iter().map(|g| g.bbox).collect();
    match_boxes(&db, &gb, match_floor)
}

/// Record indices belonging to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroup<'a> {
    pub image_id: &'a str,
    pub detections: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

/// Groups record indices by image id, ordered by image id.
pub fn group_by_image<'a>(detections: &'a [DetectionRecord], ground_truth: &'a [GroundTruthRecord]) -> Vec<ImageGroup<'a>> {
    let mut map: BTreeMap<&'a str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        map.entry(d.image_id.as_str()).or_default().0.push(i);
    }
    for (j, g) in ground_truth.iter().enumerate() {
        map.entry(g.image_id.as_str()).or_default().1.push(j);
    }
    map.into_iter()
        .map(|(image_id, (detections, ground_truth))| ImageGroup {
            image_id,
            detections,
            ground_truth,
        })
        .collect()
}

/// Matches every image of a dataset; pair indices refer to the dataset's record slices.
pub fn match_records(detections: &[DetectionRecord], ground_truth: &[GroundTruthRecord], match_floor: f64) -> Vec<MatchedPair> {
    let mut out = Vec::new();
    for group in group_by_image(detections, ground_truth) {
        let db: Vec<BoundingBox> = group.detections.iter().map(|&i| detections[i].bbox).collect();
        let gb: Vec<BoundingBox> = group.ground_truth.iter().map(|&j| ground_truth[j].bbox).collect();
        for p in match_boxes(&db, &gb, match_floor).pairs {
            out.push(MatchedPair {
                detection: group.detections[p.detection],
                ground_truth: group.ground_truth[p.ground_truth],
                iou: p.iou,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: Vec<f32>,
    pub class_id: u32,
    pub source_image: String,
    pub detection_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectionSummary {
    pub per_class: Vec<usize>,
    pub classes_without_matches: Vec<u32>,
    pub match_floor: f64,
}

/// Embeddings of detections matched to in-distribution ground truth, each
/// labelled with the class of its match. Detections matched to OOD objects or
/// to nothing are dropped.
pub fn collect_labeled_embeddings(dataset: &Dataset, match_floor: f64) -> (Vec<LabeledEmbedding>, CollectionSummary) {
    let mut per_class = vec![0usize; dataset.num_classes()];
    let mut out = Vec::new();
    for pair in match_records(&dataset.detections, &dataset.ground_truth, match_floor) {
        let gt = &dataset.ground_truth[pair.ground_truth];
        if gt.is_ood() {
            continue;
        }
        let det = &dataset.detections[pair.detection];
        per_class[gt.class_id as usize] += 1;
        out.push(LabeledEmbedding {
            embedding: det.embedding.clone(),
            class_id: gt.class_id as u32,
            source_image: det.image_id.clone(),
            detection_index: pair.detection,
        });
    }
    let classes_without_matches = per_class
        .iter()
        .enumerate()
        .filter(|(_, &n)| n == 0)
        .map(|(c, _)| c as u32)
        .collect();
    (
        out,
        CollectionSummary {
            per_class,
            classes_without_matches,
            match_floor,
        },
    )
}
