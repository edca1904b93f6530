//! Anchor grid, box-delta coding and anchor/target matching.

use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{iou, BBox};

/// Anchors at IoU at or above this are positive.
pub const POSITIVE_IOU: f64 = 0.5;
/// Anchors whose best IoU is below this are negative.
pub const NEGATIVE_IOU: f64 = 0.3;

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Square anchors centred on every cell of a `rows × cols` feature grid.
///
/// Anchor index `(a * rows + i) * cols + j` matches the objectness map layout
/// `[N, A, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
    pub sizes: Vec<f64>,
    boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn new(rows: usize, cols: usize, stride: f64, sizes: &[f64]) -> Self {
        let mut boxes = Vec::with_capacity(sizes.len() * rows * cols);
        for &size in sizes {
            for i in 0..rows {
                for j in 0..cols {
                    let cx = (j as f64 + 0.5) * stride;
                    let cy = (i as f64 + 0.5) * stride;
                    boxes.push(BBox::from_center(cx, cy, size, size));
                }
            }
        }
        Self {
            rows,
            cols,
            stride,
            sizes: sizes.to_vec(),
            boxes,
        }
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }

    /// Flat index of delta component `d` of `anchor` in a `[1, 4A, rows, cols]` map.
    pub fn delta_index(&self, anchor: usize, d: usize) -> usize {
        let plane = self.rows * self.cols;
        let (a, cell) = (anchor / plane, anchor % plane);
        (a * 4 + d) * plane + cell
    }
}

/// Applies `(dx, dy, dw, dh)` to `anchor`: centre offsets relative to the
/// anchor size, log-scale width and height.
pub fn decode(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Inverse of [`decode`].
pub fn encode(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels each anchor against `targets`: positive at IoU ≥ 0.5 (best target)
/// or when it is a highest-IoU anchor of some target, negative when its best
/// IoU is below 0.3, ignored otherwise.
pub fn assign_anchors(anchors: &[BBox], targets: &[BBox]) -> Vec<AnchorLabel> {
    if targets.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_for_target = vec![0.0f64; targets.len()];
    let best: Vec<(usize, f64)> = anchors
        .iter()
        .map(|a| {
            let mut arg = (0, f64::NEG_INFINITY);
            for (t, b) in targets.iter().enumerate() {
                let v = iou(a, b);
                if v > arg.1 {
                    arg = (t, v);
                }
                best_for_target[t] = best_for_target[t].max(v);
            }
            arg
        })
        .collect();
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(t, v)| {
            if v >= POSITIVE_IOU {
                AnchorLabel::Positive(t)
            } else if v < NEGATIVE_IOU {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (i, a) in anchors.iter().enumerate() {
        let matched = targets
            .iter()
            .enumerate()
            .any(|(t, b)| best_for_target[t] > 0.0 && iou(a, b) == best_for_target[t]);
        if matched {
            labels[i] = AnchorLabel::Positive(best[i].0);
        }
    }
    labels
}

/// Draws at most `batch` labelled anchors, at most half of them positive.
/// Returns `(anchor index, matched target)` pairs, positives first.
pub fn sample_anchors<R: Rng>(
    labels: &[AnchorLabel],
    batch: usize,
    rng: &mut R,
) -> Vec<(usize, Option<usize>)> {
    let mut pos: Vec<(usize, Option<usize>)> = Vec::new();
    let mut neg: Vec<(usize, Option<usize>)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(t) => pos.push((i, Some(*t))),
            AnchorLabel::Negative => neg.push((i, None)),
            AnchorLabel::Ignore => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(batch / 2);
    let rest = batch - pos.len();
    neg.truncate(rest);
    pos.extend(neg);
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_layout() {
        let g = AnchorGrid::new(16, 16, 4.0, &[12.0, 24.0]);
        assert_eq!(g.len(), 512);
        assert_eq!(g.boxes()[0], BBox::new(-4.0, -4.0, 8.0, 8.0));
        assert_eq!(g.boxes()[256], BBox::new(-10.0, -10.0, 14.0, 14.0));
        assert_eq!(g.boxes()[17].center(), (6.0, 6.0));
        assert_eq!(g.delta_index(256 + 17, 2), (4 + 2) * 256 + 17);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let a = BBox::new(10.0, 10.0, 22.0, 22.0);
        let t = BBox::new(8.5, 12.0, 30.0, 21.0);
        let back = decode(&a, encode(&a, &t));
        for (x, y) in back.to_array().iter().zip(t.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_anchor_is_positive() {
        let t = BBox::new(0.0, 0.0, 10.0, 10.0);
        let anchors = [t, BBox::new(40.0, 40.0, 50.0, 50.0)];
        let l = assign_anchors(&anchors, &[t]);
        assert_eq!(l, vec![AnchorLabel::Positive(0), AnchorLabel::Negative]);
    }

    #[test]
    fn empty_targets_all_negative() {
        let anchors = AnchorGrid::new(4, 4, 4.0, &[4.0]);
        assert!(assign_anchors(anchors.boxes(), &[])
            .iter()
            .all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn iou_point_four_is_ignored() {
        // 10×10 target; anchor shifted to overlap 4/7 of width: IoU = 40 / 100 ... built directly
        let target = BBox::new(0.0, 0.0, 10.0, 10.0);
        // intersection 10 × w, union 100 + 10·(10 − w)... choose x-shift s: inter = 10(10 − s),
        // union = 200 − inter, IoU = 0.4 → inter = 400/7
        let s = 10.0 - 40.0 / 7.0;
        let half = BBox::new(s, 0.0, s + 10.0, 10.0);
        assert!((iou(&half, &target) - 0.4).abs() < 1e-12);
        let anchors = [target, half];
        let l = assign_anchors(&anchors, &[target]);
        assert_eq!(l[1], AnchorLabel::Ignore);
    }

    #[test]
    fn sampler_caps_positives() {
        let mut labels = vec![AnchorLabel::Positive(0); 40];
        labels.extend(vec![AnchorLabel::Negative; 100]);
        labels.push(AnchorLabel::Ignore);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_anchors(&labels, 32, &mut rng);
        assert_eq!(s.len(), 32);
        assert_eq!(s.iter().filter(|(_, t)| t.is_some()).count(), 16);
        assert!(s.iter().all(|(i, _)| *i != 140));
        let few = sample_anchors(&labels[100..], 32, &mut rng);
        assert_eq!(few.len(), 32);
        assert!(few.iter().all(|(_, t)| t.is_none()));
    }
}
