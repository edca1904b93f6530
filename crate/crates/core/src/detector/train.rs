//! Detection losses and supervised training (source pretraining and the
//! fully supervised target fine-tuning baseline).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{self, assign_anchors, sample_anchors};
use super::boxes::{iou, BBox};
use super::{DetectorModel, Slot, Trainable};
use crate::error::{Error, Result};
use crate::nn::BnMode;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A proposal is foreground when its best IoU with a target reaches this.
pub const ROI_FOREGROUND_IOU: f64 = 0.5;
const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Ground-truth object: box and category index.
pub type Target = (BBox, usize);

/// ROI class targets: the category of the best-overlapping target when its
/// IoU is at least 0.5, otherwise `background`.
pub fn roi_labels(proposals: &[BBox], targets: &[Target], background: usize) -> Vec<usize> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (background, f64::NEG_INFINITY);
            for (b, c) in targets {
                let v = iou(p, b);
                if v > best.1 {
                    best = (*c, v);
                }
            }
            if best.1 >= ROI_FOREGROUND_IOU {
                best.0
            } else {
                background
            }
        })
        .collect()
}

/// Objectness cross-entropy over anchors sampled against `targets` for
/// image `n` of a traced batch. Also returns the sample for regression.
pub fn rpn_objectness_loss<R: Rng>(
    tape: &mut Tape,
    model: &DetectorModel,
    objectness: Var,
    per_image: &[(usize, &[BBox])],
    batch: usize,
    rng: &mut R,
) -> Result<(Var, Vec<(usize, usize, Option<usize>)>)> {
    let grid = model.config.anchors();
    let count = grid.len();
    let mut index = Vec::new();
    let mut targets = Vec::new();
    let mut sampled = Vec::new();
    for &(n, boxes) in per_image {
        let labels = assign_anchors(grid.boxes(), boxes);
        for (a, t) in sample_anchors(&labels, batch, rng) {
            index.push(Some(n * count + a));
            targets.push(if t.is_some() { 1.0 } else { 0.0 });
            sampled.push((n, a, t));
        }
    }
    if index.is_empty() {
        return Err(Error::usage("no anchors could be sampled"));
    }
    let len = index.len();
    let logits = tape.gather(objectness, index, vec![len])?;
    Ok((tape.bce_with_logits_mean(logits, targets)?, sampled))
}

/// Smooth-L1 box-delta loss of the positive sampled anchors, normalized by
/// the total sample count. `None` when nothing is positive.
pub fn rpn_box_loss(
    tape: &mut Tape,
    model: &DetectorModel,
    deltas: Var,
    sampled: &[(usize, usize, Option<usize>)],
    targets: &[&[BBox]],
) -> Result<Option<Var>> {
    let grid = model.config.anchors();
    let count = grid.len();
    let mut index = Vec::new();
    let mut goal = Vec::new();
    for &(n, a, t) in sampled {
        let Some(t) = t else { continue };
        let enc = anchors::encode(&grid.boxes()[a], &targets[n][t]);
        for (d, v) in enc.iter().enumerate() {
            index.push(Some(n * 4 * count + grid.delta_index(a, d)));
            goal.push(*v);
        }
    }
    if index.is_empty() {
        return Ok(None);
    }
    let len = index.len();
    let picked = tape.gather(deltas, index, vec![len])?;
    let scale = 1.0 / sampled.len() as f64;
    Ok(Some(tape.smooth_l1_sum(picked, goal, SMOOTH_L1_BETA, scale)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `lr_decay` after this fraction of steps.
    pub decay_after: f64,
    pub lr_decay: f64,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub roi_foreground_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 2,
            learning_rate: 1e-3,
            decay_after: 0.75,
            lr_decay: 0.1,
            rpn_batch: 64,
            roi_batch: 64,
            roi_foreground_fraction: 0.5,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

/// One labelled image (`[3, S, S]`) for supervised training.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a> {
    pub image: &'a Tensor,
    pub targets: &'a [Target],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub roi_cls: f64,
    pub total: f64,
}

struct Adam {
    m: BTreeMap<Slot, Vec<f64>>,
    v: BTreeMap<Slot, Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DetectorModel, grads: &[(Slot, Tensor)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (slot, g) in grads {
            let m = self.m.entry(*slot).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(*slot).or_insert_with(|| vec![0.0; g.len()]);
            let p = model.values_mut(*slot);
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::Shape {
                op: "stack",
                shape: img.shape().to_vec(),
                reason: format!("expected {shape:?}"),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// Supervised training of every learnable slot. BN layers normalize with
/// batch statistics and their running statistics follow each layer's stored
/// momentum. Returns the trained model and the per-step total loss.
pub fn train(
    model: &DetectorModel,
    data: &[LabeledImage<'_>],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, &StepLosses),
) -> Result<(DetectorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(config.steps);
    let decay_step = (config.steps as f64 * config.decay_after) as usize;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(data[order.pop().expect("refilled")]);
        }
        let lr = if step >= decay_step {
            config.learning_rate * config.lr_decay
        } else {
            config.learning_rate
        };
        let losses = train_step(&mut model, &batch, config, lr, &mut adam, &mut rng)?;
        progress(step, &losses);
        curve.push(losses.total);
    }
    Ok((model, curve))
}

fn train_step(
    model: &mut DetectorModel,
    batch: &[LabeledImage<'_>],
    config: &TrainConfig,
    lr: f64,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let images: Vec<&Tensor> = batch.iter().map(|b| b.image).collect();
    let images = stack(&images)?;
    let mut tape = Tape::new();
    let (features, stats) =
        model.backbone_on_tape(&mut tape, &images, BnMode::Adapt, Trainable::All)?;
    let (obj, deltas) = model.rpn_on_tape(&mut tape, features, Trainable::All)?;

    let gt_boxes: Vec<Vec<BBox>> = batch
        .iter()
        .map(|b| b.targets.iter().map(|t| t.0).collect())
        .collect();
    let per_image: Vec<(usize, &[BBox])> = gt_boxes
        .iter()
        .enumerate()
        .map(|(n, b)| (n, b.as_slice()))
        .collect();
    let (rpn_cls, sampled) =
        rpn_objectness_loss(&mut tape, model, obj, &per_image, config.rpn_batch, rng)?;
    let box_targets: Vec<&[BBox]> = gt_boxes.iter().map(|b| b.as_slice()).collect();
    let rpn_box = rpn_box_loss(&mut tape, model, deltas, &sampled, &box_targets)?;

    let mut rois = Vec::new();
    let mut labels = Vec::new();
    for (n, sample) in batch.iter().enumerate() {
        let (logits, d) = model.anchor_outputs(tape.value(obj), tape.value(deltas), n);
        let mut boxes: Vec<BBox> = model
            .select_proposals(&logits, &d)
            .into_iter()
            .map(|(_, b)| b)
            .collect();
        boxes.extend(sample.targets.iter().map(|t| t.0));
        let cls = roi_labels(&boxes, sample.targets, model.background());
        let (mut fg, mut bg): (Vec<usize>, Vec<usize>) =
            (0..boxes.len()).partition(|&i| cls[i] != model.background());
        fg.shuffle(rng);
        bg.shuffle(rng);
        fg.truncate((config.roi_batch as f64 * config.roi_foreground_fraction) as usize);
        bg.truncate(config.roi_batch - fg.len());
        for i in fg.into_iter().chain(bg) {
            rois.push((n, boxes[i]));
            labels.push(cls[i]);
        }
    }
    let class_logits = model.roi_head_on_tape(&mut tape, features, &rois, Trainable::All)?;
    let roi_cls = tape.cross_entropy_mean(class_logits, labels)?;

    let mut total = tape.add(rpn_cls, roi_cls)?;
    if let Some(b) = rpn_box {
        total = tape.add(total, b)?;
    }
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let losses = StepLosses {
        rpn_cls: value(Some(rpn_cls)),
        rpn_box: value(rpn_box),
        roi_cls: value(Some(roi_cls)),
        total: value(Some(total)),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", losses.total)));
    }
    let grads = clip(tape.backward(total)?, config.clip_norm);
    adam.step(model, &grads, lr);
    for (block, s) in model.backbone.iter_mut().zip(&stats) {
        let m = block.bn.momentum;
        for c in 0..s.mean.len() {
            block.bn.running_mean[c] = (1.0 - m) * block.bn.running_mean[c] + m * s.mean[c];
            block.bn.running_var[c] = (1.0 - m) * block.bn.running_var[c] + m * s.var[c];
        }
    }
    Ok(losses)
}

fn clip(grads: Gradients, max_norm: f64) -> Vec<(Slot, Tensor)> {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    grads
        .into_iter()
        .filter_map(|(k, t)| Slot::from_key(k).map(|s| (s, t.map(|g| g * scale))))
        .collect()
}

/// Mean of `values[i - window + 1 ..= i]` for every full window.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}
