//! AP50 / mAP with greedy matching.

use serde::{Deserialize, Serialize};

use crate::detector::boxes::{iou, BBox};
use crate::detector::Detection;

pub const MATCH_IOU: f64 = 0.5;

/// One frame's detections and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalFrame<'a> {
    pub frame_id: u64,
    pub detections: &'a [Detection],
    pub ground_truth: &'a [(BBox, usize)],
}

/// A ranked detection of one category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    pub frame_id: u64,
    pub index: usize,
    pub score: f64,
    pub true_positive: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for categories without ground truth.
    pub per_category_ap50: Vec<Option<f64>>,
    /// Mean over categories with ground truth; 0 when there are none.
    pub map50: f64,
    pub counts: Vec<Counts>,
}

fn rank_key(a: &RankedDetection, b: &RankedDetection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.frame_id.cmp(&b.frame_id))
        .then(a.index.cmp(&b.index))
}

/// Greedy matching of one category's detections. Within a frame,
/// detections are taken in rank order and each claims the highest-IoU
/// unmatched ground truth of that category with IoU ≥ `iou_threshold`.
/// Returns the ranked detections and the number of ground-truth boxes.
pub fn match_detections(
    frames: &[EvalFrame<'_>],
    category: usize,
    iou_threshold: f64,
) -> (Vec<RankedDetection>, usize) {
    let mut ranked: Vec<RankedDetection> = frames
        .iter()
        .flat_map(|f| {
            f.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.category == category)
                .map(|(i, d)| RankedDetection {
                    frame_id: f.frame_id,
                    index: i,
                    score: d.score,
                    true_positive: false,
                })
        })
        .collect();
    ranked.sort_by(rank_key);

    let gts: Vec<Vec<BBox>> = frames
        .iter()
        .map(|f| {
            f.ground_truth
                .iter()
                .filter(|(_, c)| *c == category)
                .map(|(b, _)| *b)
                .collect()
        })
        .collect();
    let num_gt = gts.iter().map(Vec::len).sum();
    let slot_of: std::collections::HashMap<u64, usize> =
        frames.iter().enumerate().map(|(i, f)| (f.frame_id, i)).collect();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    for r in ranked.iter_mut() {
        let fi = slot_of[&r.frame_id];
        let det = &frames[fi].detections[r.index].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[fi].iter().enumerate() {
            if used[fi][g] {
                continue;
            }
            let v = iou(det, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[fi][g] = true;
            r.true_positive = true;
        }
    }
    (ranked, num_gt)
}

/// All-point interpolated AP of ranked TP/FP flags. `None` when `num_gt` is 0.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // envelope from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

pub fn map50(frames: &[EvalFrame<'_>], num_categories: usize) -> EvalResult {
    let mut per_category_ap50 = Vec::with_capacity(num_categories);
    let mut counts = Vec::with_capacity(num_categories);
    for c in 0..num_categories {
        let (ranked, num_gt) = match_detections(frames, c, MATCH_IOU);
        let flags: Vec<bool> = ranked.iter().map(|r| r.true_positive).collect();
        let tp = flags.iter().filter(|f| **f).count();
        per_category_ap50.push(average_precision(&flags, num_gt));
        counts.push(Counts {
            tp,
            fp: flags.len() - tp,
            fn_: num_gt - tp,
        });
    }
    let defined: Vec<f64> = per_category_ap50.iter().flatten().copied().collect();
    let map50 = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    EvalResult {
        per_category_ap50,
        map50,
        counts,
    }
}
