//! Miniature two-stage detector: BN backbone, anchor-based proposal head and
//! an ROI classification head over nearest-neighbour pooled features.

pub mod anchors;
pub mod boxes;
pub mod checkpoint;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormLayer, BnMode, ChannelStats};
use crate::tape::{ParamKey, Tape, Var};
use crate::tensor::Tensor;

pub use anchors::{assign_anchors, AnchorGrid, AnchorLabel};
pub use boxes::{iou, nms, BBox};

/// Initial BN momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    /// Output channels of each conv + BN + ReLU stage.
    pub channels: Vec<usize>,
    /// Whether a 2×2 max pool follows each stage.
    pub pool: Vec<bool>,
    pub anchor_sizes: Vec<f64>,
    /// Proposals kept per image (K').
    pub proposals: usize,
    pub pre_nms_proposals: usize,
    pub proposal_nms_iou: f64,
    pub min_proposal_size: f64,
    pub roi_grid: usize,
    pub hidden: usize,
}

impl DetectorConfig {
    /// 64×64 input, three stages (16, 32, 64 channels), 2 anchors per cell on
    /// a 16×16 grid, K' = 64, 4×4 ROI pooling, 256 hidden units.
    pub fn reference() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 64],
            pool: vec![true, true, false],
            anchor_sizes: vec![12.0, 24.0],
            proposals: 64,
            pre_nms_proposals: 256,
            proposal_nms_iou: 0.7,
            min_proposal_size: 2.0,
            roi_grid: 4,
            hidden: 256,
        }
    }

    /// Two-stage network small enough for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            input_size: 16,
            channels: vec![4, 6],
            pool: vec![true, false],
            anchor_sizes: vec![4.0, 8.0],
            proposals: 8,
            pre_nms_proposals: 32,
            proposal_nms_iou: 0.7,
            min_proposal_size: 1.0,
            roi_grid: 2,
            hidden: 8,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.pool.iter().filter(|p| **p).count()
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }

    pub fn roi_features(&self) -> usize {
        self.feature_channels() * self.roi_grid * self.roi_grid
    }

    pub fn anchors(&self) -> AnchorGrid {
        let g = self.grid_size();
        AnchorGrid::new(g, g, self.stride() as f64, &self.anchor_sizes)
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.channels.is_empty()
            && self.channels.len() == self.pool.len()
            && self.channels.iter().all(|&c| c > 0)
            && !self.anchor_sizes.is_empty()
            && self.proposals > 0
            && self.roi_grid > 0
            && self.hidden > 0
            && self.input_size % self.stride() == 0
            && self.grid_size() > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid detector config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNormLayer,
    pub pool: bool,
}

/// Which parameter slots receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    BatchNormAffine,
    Nothing,
}

/// Every named tensor slot of a [`DetectorModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    ConvWeight(usize),
    ConvBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    BnRunningMean(usize),
    BnRunningVar(usize),
    BnMomentum(usize),
    ObjectnessWeight,
    ObjectnessBias,
    DeltaWeight,
    DeltaBias,
    HiddenWeight,
    HiddenBias,
    ClassWeight,
    ClassBias,
}

impl Slot {
    pub fn key(self) -> ParamKey {
        let (layer, kind) = match self {
            Slot::ConvWeight(l) => (l, 0),
            Slot::ConvBias(l) => (l, 1),
            Slot::BnGamma(l) => (l, 2),
            Slot::BnBeta(l) => (l, 3),
            Slot::BnRunningMean(l) => (l, 4),
            Slot::BnRunningVar(l) => (l, 5),
            Slot::BnMomentum(l) => (l, 6),
            Slot::ObjectnessWeight => (usize::MAX, 0),
            Slot::ObjectnessBias => (usize::MAX, 1),
            Slot::DeltaWeight => (usize::MAX, 2),
            Slot::DeltaBias => (usize::MAX, 3),
            Slot::HiddenWeight => (usize::MAX, 4),
            Slot::HiddenBias => (usize::MAX, 5),
            Slot::ClassWeight => (usize::MAX, 6),
            Slot::ClassBias => (usize::MAX, 7),
        };
        if layer == usize::MAX {
            ParamKey(1_000_000 + kind)
        } else {
            ParamKey(layer as u32 * 16 + kind)
        }
    }

    pub fn from_key(key: ParamKey) -> Option<Slot> {
        let k = key.0;
        if k >= 1_000_000 {
            return Some(match k - 1_000_000 {
                0 => Slot::ObjectnessWeight,
                1 => Slot::ObjectnessBias,
                2 => Slot::DeltaWeight,
                3 => Slot::DeltaBias,
                4 => Slot::HiddenWeight,
                5 => Slot::HiddenBias,
                6 => Slot::ClassWeight,
                7 => Slot::ClassBias,
                _ => return None,
            });
        }
        let l = (k / 16) as usize;
        Some(match k % 16 {
            0 => Slot::ConvWeight(l),
            1 => Slot::ConvBias(l),
            2 => Slot::BnGamma(l),
            3 => Slot::BnBeta(l),
            4 => Slot::BnRunningMean(l),
            5 => Slot::BnRunningVar(l),
            6 => Slot::BnMomentum(l),
            _ => return None,
        })
    }

    pub fn name(self) -> String {
        match self {
            Slot::ConvWeight(l) => format!("backbone.{l}.conv.weight"),
            Slot::ConvBias(l) => format!("backbone.{l}.conv.bias"),
            Slot::BnGamma(l) => format!("backbone.{l}.bn.gamma"),
            Slot::BnBeta(l) => format!("backbone.{l}.bn.beta"),
            Slot::BnRunningMean(l) => format!("backbone.{l}.bn.running_mean"),
            Slot::BnRunningVar(l) => format!("backbone.{l}.bn.running_var"),
            Slot::BnMomentum(l) => format!("backbone.{l}.bn.momentum"),
            Slot::ObjectnessWeight => "rpn.objectness.weight".into(),
            Slot::ObjectnessBias => "rpn.objectness.bias".into(),
            Slot::DeltaWeight => "rpn.deltas.weight".into(),
            Slot::DeltaBias => "rpn.deltas.bias".into(),
            Slot::HiddenWeight => "roi.hidden.weight".into(),
            Slot::HiddenBias => "roi.hidden.bias".into(),
            Slot::ClassWeight => "roi.class.weight".into(),
            Slot::ClassBias => "roi.class.bias".into(),
        }
    }

    /// Gradient-trained slots (excludes running statistics and momentum).
    pub fn is_learnable(self) -> bool {
        !matches!(
            self,
            Slot::BnRunningMean(_) | Slot::BnRunningVar(_) | Slot::BnMomentum(_)
        )
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(
            self,
            Slot::BnGamma(_)
                | Slot::BnBeta(_)
                | Slot::BnRunningMean(_)
                | Slot::BnRunningVar(_)
                | Slot::BnMomentum(_)
        )
    }

    fn trainable_under(self, t: Trainable) -> bool {
        match t {
            Trainable::All => self.is_learnable(),
            Trainable::BatchNormAffine => matches!(self, Slot::BnGamma(_) | Slot::BnBeta(_)),
            Trainable::Nothing => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub categories: Vec<String>,
    pub backbone: Vec<ConvBlock>,
    pub objectness_weight: Tensor,
    pub objectness_bias: Tensor,
    pub delta_weight: Tensor,
    pub delta_bias: Tensor,
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub class_weight: Tensor,
    pub class_bias: Tensor,
}

/// One detection: box, category index and class probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

pub type Prediction = Vec<Detection>;

/// Network outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutputs {
    /// Objectness logit of each selected proposal (`o`).
    pub proposal_logits: Vec<f64>,
    pub proposal_boxes: Vec<BBox>,
    /// Anchor each proposal was decoded from.
    pub proposal_anchors: Vec<usize>,
    /// K' × (L + 1) logits, background last.
    pub class_logits: Tensor,
    pub anchor_objectness: Vec<f64>,
    pub anchor_deltas: Vec<[f64; 4]>,
}

impl RawOutputs {
    pub fn num_proposals(&self) -> usize {
        self.proposal_boxes.len()
    }
}

/// Tape handles for one traced single-image forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub objectness: Var,
    pub deltas: Var,
    pub class_logits: Var,
    pub proposal_logits: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub raw: RawOutputs,
    pub vars: OutputVars,
    /// Per-BN-layer statistics of the current input (μ̂, σ̂²).
    pub batch_stats: Vec<ChannelStats>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

impl DetectorModel {
    pub fn new(config: DetectorConfig, seed: u64, categories: &[&str]) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::usage("category list must not be empty"));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (&cout, &pool) in config.channels.iter().zip(&config.pool) {
            backbone.push(ConvBlock {
                weight: he_normal(&mut rng, &[cout, cin, 3, 3], cin * 9),
                bias: Tensor::zeros([cout]),
                bn: BatchNormLayer::new(cout, DEFAULT_MOMENTUM),
                pool,
            });
            cin = cout;
        }
        let a = config.anchor_sizes.len();
        let l = categories.len();
        let head_std = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let normal = Normal::new(0.0, 0.01).expect("valid std");
            Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
        };
        let objectness_weight = head_std(&mut rng, &[a, cin, 1, 1]);
        let delta_weight = head_std(&mut rng, &[4 * a, cin, 1, 1]);
        let hidden_weight = he_normal(&mut rng, &[config.hidden, config.roi_features()], config.roi_features());
        let class_weight = head_std(&mut rng, &[l + 1, config.hidden]);
        Ok(Self {
            categories: categories.iter().map(|s| s.to_string()).collect(),
            backbone,
            objectness_weight,
            objectness_bias: Tensor::zeros([a]),
            delta_weight,
            delta_bias: Tensor::zeros([4 * a]),
            hidden_bias: Tensor::zeros([config.hidden]),
            hidden_weight,
            class_weight,
            class_bias: Tensor::zeros([l + 1]),
            config,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn background(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for l in 0..self.backbone.len() {
            out.extend([
                Slot::ConvWeight(l),
                Slot::ConvBias(l),
                Slot::BnGamma(l),
                Slot::BnBeta(l),
                Slot::BnRunningMean(l),
                Slot::BnRunningVar(l),
                Slot::BnMomentum(l),
            ]);
        }
        out.extend([
            Slot::ObjectnessWeight,
            Slot::ObjectnessBias,
            Slot::DeltaWeight,
            Slot::DeltaBias,
            Slot::HiddenWeight,
            Slot::HiddenBias,
            Slot::ClassWeight,
            Slot::ClassBias,
        ]);
        out
    }

    /// Current value of `slot`.
    pub fn tensor(&self, slot: Slot) -> Tensor {
        let vec = |v: &[f64]| Tensor::vector(v.to_vec());
        match slot {
            Slot::ConvWeight(l) => self.backbone[l].weight.clone(),
            Slot::ConvBias(l) => self.backbone[l].bias.clone(),
            Slot::BnGamma(l) => vec(&self.backbone[l].bn.gamma),
            Slot::BnBeta(l) => vec(&self.backbone[l].bn.beta),
            Slot::BnRunningMean(l) => vec(&self.backbone[l].bn.running_mean),
            Slot::BnRunningVar(l) => vec(&self.backbone[l].bn.running_var),
            Slot::BnMomentum(l) => Tensor::scalar(self.backbone[l].bn.momentum),
            Slot::ObjectnessWeight => self.objectness_weight.clone(),
            Slot::ObjectnessBias => self.objectness_bias.clone(),
            Slot::DeltaWeight => self.delta_weight.clone(),
            Slot::DeltaBias => self.delta_bias.clone(),
            Slot::HiddenWeight => self.hidden_weight.clone(),
            Slot::HiddenBias => self.hidden_bias.clone(),
            Slot::ClassWeight => self.class_weight.clone(),
            Slot::ClassBias => self.class_bias.clone(),
        }
    }

    /// Mutable view of the values stored in `slot`.
    pub fn values_mut(&mut self, slot: Slot) -> &mut [f64] {
        match slot {
            Slot::ConvWeight(l) => self.backbone[l].weight.data_mut(),
            Slot::ConvBias(l) => self.backbone[l].bias.data_mut(),
            Slot::BnGamma(l) => &mut self.backbone[l].bn.gamma,
            Slot::BnBeta(l) => &mut self.backbone[l].bn.beta,
            Slot::BnRunningMean(l) => &mut self.backbone[l].bn.running_mean,
            Slot::BnRunningVar(l) => &mut self.backbone[l].bn.running_var,
            Slot::BnMomentum(l) => std::slice::from_mut(&mut self.backbone[l].bn.momentum),
            Slot::ObjectnessWeight => self.objectness_weight.data_mut(),
            Slot::ObjectnessBias => self.objectness_bias.data_mut(),
            Slot::DeltaWeight => self.delta_weight.data_mut(),
            Slot::DeltaBias => self.delta_bias.data_mut(),
            Slot::HiddenWeight => self.hidden_weight.data_mut(),
            Slot::HiddenBias => self.hidden_bias.data_mut(),
            Slot::ClassWeight => self.class_weight.data_mut(),
            Slot::ClassBias => self.class_bias.data_mut(),
        }
    }

    /// SHA-256 of every slot's bytes, keyed by slot name.
    pub fn slot_digests(&self) -> Vec<(Slot, [u8; 32])> {
        self.slots()
            .into_iter()
            .map(|s| {
                let t = self.tensor(s);
                let mut h = Sha256::new();
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
                (s, h.finalize().into())
            })
            .collect()
    }

    /// Digest over all slots.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (slot, d) in self.slot_digests() {
            h.update(slot.name().as_bytes());
            h.update(d);
        }
        hex(&h.finalize())
    }

    /// Slots whose contents differ between `self` and `other`.
    pub fn changed_slots(&self, other: &DetectorModel) -> Vec<Slot> {
        self.slot_digests()
            .into_iter()
            .zip(other.slot_digests())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    fn param(&self, tape: &mut Tape, slot: Slot, trainable: Trainable) -> Var {
        tape.param(slot.key(), self.tensor(slot), slot.trainable_under(trainable))
    }

    /// Backbone on an `[N, 3, S, S]` batch. Returns the feature map and, in
    /// adapt mode, the batch statistics of each BN layer's input (empty in
    /// eval mode).
    pub fn backbone_on_tape(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        mode: BnMode,
        trainable: Trainable,
    ) -> Result<(Var, Vec<ChannelStats>)> {
        let (_, c, h, w) = images.dims4("detector")?;
        let s = self.config.input_size;
        for (axis, got, expected) in [("channels", c, 3), ("height", h, s), ("width", w, s)] {
            if got != expected {
                return Err(Error::Dimension {
                    op: "detector",
                    axis,
                    expected,
                    got,
                });
            }
        }
        let mut x = tape.input(images.clone());
        let mut stats = Vec::with_capacity(self.backbone.len());
        for (l, block) in self.backbone.iter().enumerate() {
            let w = self.param(tape, Slot::ConvWeight(l), trainable);
            let b = self.param(tape, Slot::ConvBias(l), trainable);
            x = tape.conv2d(x, w, b, 1, 1)?;
            let gamma = self.param(tape, Slot::BnGamma(l), trainable);
            let beta = self.param(tape, Slot::BnBeta(l), trainable);
            x = match mode {
                BnMode::Adapt => {
                    let y = tape.batchnorm_batch(x, gamma, beta, block.bn.epsilon)?;
                    stats.push(tape.batch_stats(y).expect("batch stats").clone());
                    y
                }
                BnMode::Eval => {
                    tape.batchnorm_fixed(x, gamma, beta, block.bn.running_stats(), block.bn.epsilon)?
                }
            };
            x = tape.relu(x)?;
            if block.pool {
                x = tape.maxpool2(x)?;
            }
        }
        Ok((x, stats))
    }

    /// Objectness `[N, A, g, g]` and deltas `[N, 4A, g, g]` maps.
    pub fn rpn_on_tape(
        &self,
        tape: &mut Tape,
        features: Var,
        trainable: Trainable,
    ) -> Result<(Var, Var)> {
        let ow = self.param(tape, Slot::ObjectnessWeight, trainable);
        let ob = self.param(tape, Slot::ObjectnessBias, trainable);
        let dw = self.param(tape, Slot::DeltaWeight, trainable);
        let db = self.param(tape, Slot::DeltaBias, trainable);
        let obj = tape.conv2d(features, ow, ob, 1, 0)?;
        let deltas = tape.conv2d(features, dw, db, 1, 0)?;
        Ok((obj, deltas))
    }

    /// Per-anchor objectness logits and deltas of image `n`.
    pub fn anchor_outputs(&self, obj: &Tensor, deltas: &Tensor, n: usize) -> (Vec<f64>, Vec<[f64; 4]>) {
        let grid = self.config.anchors();
        let count = grid.len();
        let logits = obj.data()[n * count..(n + 1) * count].to_vec();
        let dmap = &deltas.data()[n * 4 * count..(n + 1) * 4 * count];
        let d = (0..count)
            .map(|a| std::array::from_fn(|k| dmap[grid.delta_index(a, k)]))
            .collect();
        (logits, d)
    }

    /// Selects up to K' proposals: decode, drop tiny boxes, keep the top
    /// pre-NMS candidates, class-agnostic NMS. Returns `(anchor, box)` pairs.
    pub fn select_proposals(&self, logits: &[f64], deltas: &[[f64; 4]]) -> Vec<(usize, BBox)> {
        let grid = self.config.anchors();
        let size = self.config.input_size as f64;
        let decoded: Vec<BBox> = grid
            .boxes()
            .iter()
            .zip(deltas)
            .map(|(a, d)| anchors::decode(a, *d).clip(size))
            .collect();
        let min = self.config.min_proposal_size;
        let mut order: Vec<usize> = (0..decoded.len())
            .filter(|&i| decoded[i].width() >= min && decoded[i].height() >= min)
            .collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(self.config.pre_nms_proposals);
        if order.is_empty() {
            // keep the best anchor's own box so K' ≥ 1
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .expect("anchors");
            return vec![(best, grid.boxes()[best].clip(size))];
        }
        let cand: Vec<BBox> = order.iter().map(|&i| decoded[i]).collect();
        let scores: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
        let mut keep = nms(&cand, &scores, self.config.proposal_nms_iou);
        keep.truncate(self.config.proposals);
        keep.into_iter().map(|k| (order[k], cand[k])).collect()
    }

    /// Nearest-neighbour ROI pooling indices into the `[N, C, g, g]` feature map.
    fn roi_index(&self, image: usize, bbox: &BBox) -> Vec<Option<usize>> {
        let c = self.config.feature_channels();
        let g = self.config.grid_size();
        let r = self.config.roi_grid;
        let stride = self.config.stride() as f64;
        let cell = |v: f64| ((v / stride).floor().max(0.0) as usize).min(g - 1);
        let mut idx = Vec::with_capacity(c * r * r);
        for ch in 0..c {
            for gy in 0..r {
                let y = bbox.y1 + (gy as f64 + 0.5) * bbox.height() / r as f64;
                for gx in 0..r {
                    let x = bbox.x1 + (gx as f64 + 0.5) * bbox.width() / r as f64;
                    idx.push(Some(((image * c + ch) * g + cell(y)) * g + cell(x)));
                }
            }
        }
        idx
    }

    /// Class logits `[R, L + 1]` for `(image, box)` regions.
    pub fn roi_head_on_tape(
        &self,
        tape: &mut Tape,
        features: Var,
        rois: &[(usize, BBox)],
        trainable: Trainable,
    ) -> Result<Var> {
        let index: Vec<Option<usize>> = rois
            .iter()
            .flat_map(|(n, b)| self.roi_index(*n, b))
            .collect();
        let pooled = tape.gather(features, index, vec![rois.len(), self.config.roi_features()])?;
        let hw = self.param(tape, Slot::HiddenWeight, trainable);
        let hb = self.param(tape, Slot::HiddenBias, trainable);
        let hidden = tape.dense(pooled, hw, hb)?;
        let hidden = tape.relu(hidden)?;
        let cw = self.param(tape, Slot::ClassWeight, trainable);
        let cb = self.param(tape, Slot::ClassBias, trainable);
        tape.dense(hidden, cw, cb)
    }

    /// Full traced pass over a single `[1, 3, S, S]` image.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        mode: BnMode,
        trainable: Trainable,
    ) -> Result<ForwardPass> {
        let (n, ..) = image.dims4("detector")?;
        if n != 1 {
            return Err(Error::Dimension {
                op: "detector",
                axis: "batch",
                expected: 1,
                got: n,
            });
        }
        let (features, batch_stats) = self.backbone_on_tape(tape, image, mode, trainable)?;
        let (obj, deltas) = self.rpn_on_tape(tape, features, trainable)?;
        let (anchor_objectness, anchor_deltas) =
            self.anchor_outputs(tape.value(obj), tape.value(deltas), 0);
        let selected = self.select_proposals(&anchor_objectness, &anchor_deltas);
        let k = selected.len();
        let proposal_logits = tape.gather(obj, selected.iter().map(|(a, _)| Some(*a)).collect(), vec![k])?;
        let rois: Vec<(usize, BBox)> = selected.iter().map(|(_, b)| (0, *b)).collect();
        let class_logits = self.roi_head_on_tape(tape, features, &rois, trainable)?;
        let raw = RawOutputs {
            proposal_logits: tape.value(proposal_logits).data().to_vec(),
            proposal_boxes: selected.iter().map(|(_, b)| *b).collect(),
            proposal_anchors: selected.iter().map(|(a, _)| *a).collect(),
            class_logits: tape.value(class_logits).clone(),
            anchor_objectness,
            anchor_deltas,
        };
        Ok(ForwardPass {
            raw,
            vars: OutputVars {
                objectness: obj,
                deltas,
                class_logits,
                proposal_logits,
            },
            batch_stats,
        })
    }

    /// Untraced forward pass; never mutates the model.
    pub fn forward_full(&self, image: &Tensor, mode: BnMode) -> Result<RawOutputs> {
        let mut tape = Tape::new();
        Ok(self
            .forward_on_tape(&mut tape, image, mode, Trainable::Nothing)?
            .raw)
    }

    /// Eval-mode detections at the given thresholds.
    pub fn detect(&self, image: &Tensor, score_threshold: f64, nms_iou: f64) -> Result<Prediction> {
        let raw = self.forward_full(image, BnMode::Eval)?;
        postprocess(&raw, score_threshold, nms_iou)
    }
}

/// Softmax over each proposal's class logits, per-category thresholding and
/// per-category NMS. Boxes are the proposal boxes.
pub fn postprocess(raw: &RawOutputs, score_threshold: f64, nms_iou: f64) -> Result<Prediction> {
    let probs = nn::softmax_rows(&raw.class_logits)?;
    let (k, cols) = probs.dims2("postprocess")?;
    let mut out = Vec::new();
    for category in 0..cols - 1 {
        let cand: Vec<usize> = (0..k)
            .filter(|&i| probs.data()[i * cols + category] >= score_threshold)
            .collect();
        let boxes: Vec<BBox> = cand.iter().map(|&i| raw.proposal_boxes[i]).collect();
        let scores: Vec<f64> = cand
            .iter()
            .map(|&i| probs.data()[i * cols + category])
            .collect();
        for keep in nms(&boxes, &scores, nms_iou) {
            out.push(Detection {
                bbox: boxes[keep],
                category,
                score: scores[keep],
            });
        }
    }
    Ok(out)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CATS: [&str; 3] = ["disc", "triangle", "square"];

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, 64, 64], |_| rand::Rng::random::<f64>(&mut rng))
    }

    #[test]
    fn build_is_deterministic() {
        let a = DetectorModel::new(DetectorConfig::reference(), 7, &CATS).unwrap();
        let b = DetectorModel::new(DetectorConfig::reference(), 7, &CATS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = DetectorModel::new(DetectorConfig::reference(), 8, &CATS).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn fresh_batchnorm_defaults() {
        let m = DetectorModel::new(DetectorConfig::reference(), 1, &CATS).unwrap();
        for block in &m.backbone {
            assert!(block.bn.gamma.iter().all(|&g| g == 1.0));
            assert!(block.bn.beta.iter().all(|&b| b == 0.0));
            assert_eq!(block.bn.momentum, 0.1);
        }
        assert!(DetectorModel::new(DetectorConfig::reference(), 1, &[]).is_err());
    }

    #[test]
    fn fresh_forward_contract() {
        let m = DetectorModel::new(DetectorConfig::reference(), 1, &CATS).unwrap();
        let raw = m.forward_full(&image(0), BnMode::Eval).unwrap();
        assert_eq!(raw.num_proposals(), 64);
        assert_eq!(raw.class_logits.shape(), &[64, 4]);
        assert_eq!(raw.anchor_objectness.len(), 512);
        assert!(raw.class_logits.is_finite());
        let again = m.forward_full(&image(0), BnMode::Eval).unwrap();
        assert_eq!(raw, again);
        assert!(m.forward_full(&Tensor::zeros([1, 3, 32, 32]), BnMode::Eval).is_err());
    }

    #[test]
    fn adapt_and_eval_differ_under_shifted_input() {
        let m = DetectorModel::new(DetectorConfig::reference(), 1, &CATS).unwrap();
        let shifted = image(1).map(|v| 3.0 * v + 2.0);
        let a = m.forward_full(&shifted, BnMode::Adapt).unwrap();
        let e = m.forward_full(&shifted, BnMode::Eval).unwrap();
        assert_ne!(a.anchor_objectness, e.anchor_objectness);
    }

    #[test]
    fn slot_keys_roundtrip() {
        let m = DetectorModel::new(DetectorConfig::micro(), 1, &CATS).unwrap();
        for s in m.slots() {
            assert_eq!(Slot::from_key(s.key()), Some(s));
        }
    }

    fn raw_with(boxes: Vec<BBox>, probs: &[[f64; 4]]) -> RawOutputs {
        let logits: Vec<f64> = probs.iter().flatten().map(|p| p.max(1e-12).ln()).collect();
        RawOutputs {
            proposal_logits: vec![0.0; boxes.len()],
            proposal_anchors: vec![0; boxes.len()],
            class_logits: Tensor::new([boxes.len(), 4], logits).unwrap(),
            proposal_boxes: boxes,
            anchor_objectness: vec![],
            anchor_deltas: vec![],
        }
    }

    #[test]
    fn postprocess_suppresses_same_category_only() {
        let b = BBox::new(4.0, 4.0, 20.0, 20.0);
        let raw = raw_with(vec![b, b], &[[0.9, 0.0, 0.0, 0.1], [0.8, 0.0, 0.0, 0.2]]);
        let p = postprocess(&raw, 0.5, 0.5).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].score - 0.9).abs() < 1e-9);
        let raw = raw_with(vec![b, b], &[[0.9, 0.0, 0.0, 0.1], [0.0, 0.8, 0.0, 0.2]]);
        let p = postprocess(&raw, 0.5, 0.5).unwrap();
        assert_eq!(p.len(), 2);
    }
}
