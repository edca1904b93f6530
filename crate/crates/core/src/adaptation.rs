//! Online test-time adaptation: pseudo-labels, image-level aggregation,
//! the weakly supervised losses, BN statistic/affine updates and the
//! per-frame step for every method.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::boxes::BBox;
use crate::detector::train::{roi_labels, rpn_objectness_loss, Target};
use crate::detector::{
    postprocess, DetectorModel, Detection, Prediction, Slot, Trainable, DEFAULT_MOMENTUM,
    DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, BnMode, ChannelStats};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Lower clamp of ẑ inside the image-level loss (upper is `1 − ZHAT_CLAMP`).
pub const ZHAT_CLAMP: f64 = 1e-7;

/// Set of category indices present in a frame.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeakLabel(BTreeSet<usize>);

impl WeakLabel {
    pub fn new(categories: impl IntoIterator<Item = usize>) -> Self {
        Self(categories.into_iter().collect())
    }

    pub fn contains(&self, category: usize) -> bool {
        self.0.contains(&category)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        match self.0.iter().find(|&&c| c >= num_categories) {
            Some(c) => Err(Error::usage(format!(
                "category index {c} out of range for {num_categories} categories"
            ))),
            None => Ok(()),
        }
    }

    /// Inverse of [`multi_hot`]: entries ≥ 0.5 are members.
    pub fn from_multi_hot(v: &[f64]) -> Self {
        Self::new(v.iter().enumerate().filter(|(_, x)| **x >= 0.5).map(|(i, _)| i))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub entries: Vec<(BBox, usize)>,
}

impl PseudoLabel {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Source,
    #[serde(alias = "bn_stats")]
    BnStats,
    Dua,
    Wstta,
    /// Supervised fine-tuning on the labelled target split before streaming;
    /// online steps leave the model untouched.
    #[serde(alias = "oracle_ft")]
    OracleFt,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Source,
        Method::BnStats,
        Method::Dua,
        Method::Wstta,
        Method::OracleFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnStats => "bn-stats",
            Method::Dua => "dua",
            Method::Wstta => "wstta",
            Method::OracleFt => "oracle-ft",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('-', "_") == s)
            .ok_or_else(|| Error::usage(format!("unknown method {s:?}")))
    }

    pub fn needs_weak_label(self) -> bool {
        self == Method::Wstta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub method: Method,
    pub omega: f64,
    pub delta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    /// m₀: initial momentum, and the fixed momentum of `bn_stats`.
    pub initial_momentum: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Anchors sampled for the RPN part of the instance loss.
    pub rpn_sample: usize,
    /// Seeds the anchor sampler (stream = step index).
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Wstta,
            omega: 0.99,
            delta: 0.005,
            lambda: 1e-4,
            alpha: 0.1,
            tau: 0.8,
            initial_momentum: DEFAULT_MOMENTUM,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            rpn_sample: 32,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.omega > 0.0 && self.omega <= 1.0, "omega must be in (0, 1]"),
            (self.delta >= 0.0, "delta must be non-negative"),
            (self.lambda >= 0.0, "lambda must be non-negative"),
            (self.alpha >= 0.0, "alpha must be non-negative"),
            ((0.0..=1.0).contains(&self.tau), "tau must be in [0, 1]"),
            (
                (0.0..=1.0).contains(&self.initial_momentum),
                "initial momentum must be in [0, 1]",
            ),
            (
                (0.0..=1.0).contains(&self.score_threshold),
                "score threshold must be in [0, 1]",
            ),
            (self.rpn_sample > 0, "rpn sample must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::usage(msg));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationState {
    pub t: u64,
    pub m: f64,
    pub config: AdaptationConfig,
}

impl AdaptationState {
    pub fn new(config: AdaptationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            t: 0,
            m: config.initial_momentum,
            config,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: u64,
    pub loss_total: f64,
    pub loss_instance: f64,
    pub loss_image: f64,
    pub momentum_used: f64,
    pub pseudo_count: usize,
    pub prediction: Prediction,
    pub weak_label: Option<WeakLabel>,
}

/// Keeps detections scoring at least `tau` whose category is in `weak`.
pub fn make_pseudo_label(prediction: &[Detection], weak: &WeakLabel, tau: f64) -> PseudoLabel {
    PseudoLabel {
        entries: prediction
            .iter()
            .filter(|d| d.score >= tau && weak.contains(d.category))
            .map(|d| (d.bbox, d.category))
            .collect(),
    }
}

pub fn multi_hot(weak: &WeakLabel, num_categories: usize) -> Vec<f64> {
    (0..num_categories)
        .map(|c| if weak.contains(c) { 1.0 } else { 0.0 })
        .collect()
}

/// Column of the first maximum in each row of a `[K, L]` matrix.
fn row_argmax(scores: &Tensor) -> Result<Vec<usize>> {
    let (_, l) = scores.dims2("build_o")?;
    Ok(scores
        .data()
        .chunks(l)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// `[K, L]` matrix holding `objectness[k]` in the argmax column of row `k`
/// of `class_scores` and zero elsewhere.
pub fn build_o(class_scores: &Tensor, objectness: &[f64]) -> Result<Tensor> {
    let (k, l) = class_scores.dims2("build_o")?;
    if objectness.len() != k {
        return Err(Error::Dimension {
            op: "build_o",
            axis: "proposals",
            expected: k,
            got: objectness.len(),
        });
    }
    let mut data = vec![0.0; k * l];
    for (r, col) in row_argmax(class_scores)?.into_iter().enumerate() {
        data[r * l + col] = objectness[r];
    }
    Tensor::new([k, l], data)
}

/// Traced ẑ: `Σ_k softmax_rows(C) ⊙ softmax_cols(O)`. `class_scores` is
/// `[K, L]`, `objectness` is `[K]`.
pub fn image_level_prediction_on_tape(tape: &mut Tape, class_scores: Var, objectness: Var) -> Result<Var> {
    let argmax = row_argmax(tape.value(class_scores))?;
    let (k, l) = tape.value(class_scores).dims2("image_level_prediction")?;
    if tape.value(objectness).len() != k {
        return Err(Error::Dimension {
            op: "image_level_prediction",
            axis: "proposals",
            expected: k,
            got: tape.value(objectness).len(),
        });
    }
    let mut index = vec![None; k * l];
    for (r, col) in argmax.into_iter().enumerate() {
        index[r * l + col] = Some(r);
    }
    let o = tape.gather(objectness, index, vec![k, l])?;
    let sc = tape.softmax_rows(class_scores)?;
    let so = tape.softmax_cols(o)?;
    let prod = tape.mul(sc, so)?;
    tape.sum_cols(prod)
}

pub fn image_level_prediction(class_scores: &Tensor, objectness: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let c = tape.input(class_scores.clone());
    let o = tape.input(Tensor::vector(objectness.to_vec()));
    let z = image_level_prediction_on_tape(&mut tape, c, o)?;
    Ok(tape.value(z).data().to_vec())
}

/// Mean per-class binary cross-entropy of ẑ, clamped to `[1e-7, 1 − 1e-7]`.
pub fn image_level_loss(zhat: &[f64], target: &[f64]) -> Result<f64> {
    if zhat.len() != target.len() {
        return Err(Error::Dimension {
            op: "image_level_loss",
            axis: "categories",
            expected: target.len(),
            got: zhat.len(),
        });
    }
    let sum: f64 = zhat
        .iter()
        .zip(target)
        .map(|(z, t)| {
            let z = z.clamp(ZHAT_CLAMP, 1.0 - ZHAT_CLAMP);
            -(t * z.ln() + (1.0 - t) * (1.0 - z).ln())
        })
        .sum();
    Ok(sum / zhat.len() as f64)
}

pub fn total_loss(l_ins: f64, l_img: f64, alpha: f64) -> f64 {
    l_ins + alpha * l_img
}

pub fn decay_momentum(m: f64, omega: f64, delta: f64) -> f64 {
    (m * omega + delta).min(1.0)
}

/// Blends the running statistics toward the batch statistics with weight `m`.
pub fn update_bn_stats(layer: &mut BatchNormLayer, batch: &ChannelStats, m: f64) -> Result<()> {
    let c = layer.channels();
    for (axis, got) in [("mean", batch.mean.len()), ("var", batch.var.len())] {
        if got != c {
            return Err(Error::Dimension {
                op: "update_bn_stats",
                axis,
                expected: c,
                got,
            });
        }
    }
    for (r, b) in layer.running_mean.iter_mut().zip(&batch.mean) {
        *r = (1.0 - m) * *r + m * b;
    }
    for (r, b) in layer.running_var.iter_mut().zip(&batch.var) {
        *r = (1.0 - m) * *r + m * b;
    }
    Ok(())
}

/// Gradient-descent step on BN γ/β. Any other gradient is rejected.
pub fn update_bn_affine(model: &mut DetectorModel, gradients: &Gradients, lambda: f64) -> Result<()> {
    for (key, g) in gradients {
        let slot = Slot::from_key(*key)
            .filter(|s| matches!(s, Slot::BnGamma(_) | Slot::BnBeta(_)))
            .ok_or_else(|| Error::usage(format!("gradient for non-affine parameter {key:?}")))?;
        let values = model.values_mut(slot);
        if values.len() != g.len() {
            return Err(Error::Dimension {
                op: "update_bn_affine",
                axis: "channels",
                expected: values.len(),
                got: g.len(),
            });
        }
        for (v, d) in values.iter_mut().zip(g.data()) {
            *v -= lambda * d;
        }
    }
    Ok(())
}

/// Instance-level loss on a traced adapt-mode pass: RPN objectness BCE over
/// sampled anchors plus ROI cross-entropy over all proposals, both against
/// the pseudo-label. Returns `(total, rpn, roi)` variables.
pub fn instance_level_loss_on_tape(
    tape: &mut Tape,
    model: &DetectorModel,
    objectness: Var,
    class_logits: Var,
    proposal_boxes: &[BBox],
    pseudo: &PseudoLabel,
    rpn_sample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, Var)> {
    let boxes: Vec<BBox> = pseudo.entries.iter().map(|(b, _)| *b).collect();
    let (rpn, _) = rpn_objectness_loss(tape, model, objectness, &[(0, &boxes)], rpn_sample, rng)?;
    let targets: Vec<Target> = pseudo.entries.clone();
    let labels = roi_labels(proposal_boxes, &targets, model.background());
    let roi = tape.cross_entropy_mean(class_logits, labels)?;
    let total = tape.add(rpn, roi)?;
    Ok((total, rpn, roi))
}

/// Value and BN-affine gradients of the combined objective on one frame,
/// with the batch statistics of the traced adapt-mode pass. Nothing is
/// applied to the model.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: f64,
    pub instance: f64,
    pub image: f64,
    pub gradients: Gradients,
    pub batch_stats: Vec<ChannelStats>,
}

/// Evaluates `L_ins + α·L_img` for step `t`, with gradients for the slots
/// `trainable` selects (the update uses [`Trainable::BatchNormAffine`]).
/// Anchor sampling is seeded by `(config.seed, t)`, so repeated calls see
/// the same sample.
pub fn wstta_objective(
    model: &DetectorModel,
    config: &AdaptationConfig,
    t: u64,
    image: &Tensor,
    pseudo: &PseudoLabel,
    weak: &WeakLabel,
    trainable: Trainable,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, image, BnMode::Adapt, trainable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(t);
    let (ins, _, _) = instance_level_loss_on_tape(
        &mut tape,
        model,
        pass.vars.objectness,
        pass.vars.class_logits,
        &pass.raw.proposal_boxes,
        pseudo,
        config.rpn_sample,
        &mut rng,
    )?;

    let l = model.num_categories();
    let k = pass.raw.proposal_boxes.len();
    let fg: Vec<Option<usize>> = (0..k)
        .flat_map(|r| (0..l).map(move |c| Some(r * (l + 1) + c)))
        .collect();
    let c = tape.gather(pass.vars.class_logits, fg, vec![k, l])?;
    let zhat = image_level_prediction_on_tape(&mut tape, c, pass.vars.proposal_logits)?;
    let img = tape.bce_prob_mean(zhat, multi_hot(weak, l), ZHAT_CLAMP)?;
    let weighted = tape.scale(img, config.alpha)?;
    let total = tape.add(ins, weighted)?;

    let (total_v, instance, image_v) = (
        tape.value(total).item(),
        tape.value(ins).item(),
        tape.value(img).item(),
    );
    if !(total_v.is_finite() && instance.is_finite() && image_v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "step {t}: loss total={total_v} instance={instance} image={image_v}"
        )));
    }
    let gradients = tape.backward(total)?;
    if let Some((key, _)) = gradients.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("step {t}: gradient of {key:?} is not finite")));
    }
    Ok(Objective {
        total: total_v,
        instance,
        image: image_v,
        gradients,
        batch_stats: pass.batch_stats,
    })
}

fn wstta_update(
    model: &mut DetectorModel,
    state: &AdaptationState,
    image: &Tensor,
    pseudo: &PseudoLabel,
    weak: &WeakLabel,
    m: f64,
) -> Result<Objective> {
    let obj = wstta_objective(model, &state.config, state.t, image, pseudo, weak, Trainable::BatchNormAffine)?;
    for (block, stats) in model.backbone.iter_mut().zip(&obj.batch_stats) {
        update_bn_stats(&mut block.bn, stats, m)?;
    }
    update_bn_affine(model, &obj.gradients, state.config.lambda)?;
    Ok(obj)
}

fn refresh_stats(model: &mut DetectorModel, image: &Tensor, m: f64) -> Result<()> {
    let mut tape = Tape::new();
    let (_, stats) = model.backbone_on_tape(&mut tape, image, BnMode::Adapt, Trainable::Nothing)?;
    for (block, s) in model.backbone.iter_mut().zip(&stats) {
        update_bn_stats(&mut block.bn, s, m)?;
    }
    Ok(())
}

/// One online step on a `[1, 3, S, S]` frame. The returned report carries
/// the eval-mode prediction made before any update. On a non-finite loss
/// the model and state are left as they were.
pub fn adapt_step(
    model: &mut DetectorModel,
    state: &mut AdaptationState,
    image: &Tensor,
    weak: Option<&WeakLabel>,
) -> Result<StepReport> {
    let cfg = state.config.clone();
    if cfg.method.needs_weak_label() && weak.is_none() {
        return Err(Error::usage("the wstta method needs a weak label for every frame"));
    }
    if let Some(w) = weak {
        w.validate(model.num_categories())?;
    }
    let raw = model.forward_full(image, BnMode::Eval)?;
    let prediction = postprocess(&raw, cfg.score_threshold, cfg.nms_iou)?;

    let mut report = StepReport {
        t: state.t,
        loss_total: 0.0,
        loss_instance: 0.0,
        loss_image: 0.0,
        momentum_used: 0.0,
        pseudo_count: 0,
        prediction,
        weak_label: weak.cloned(),
    };
    match cfg.method {
        Method::Source | Method::OracleFt => {}
        Method::BnStats => {
            refresh_stats(model, image, cfg.initial_momentum)?;
            report.momentum_used = cfg.initial_momentum;
        }
        Method::Dua => {
            let m = decay_momentum(state.m, cfg.omega, cfg.delta);
            refresh_stats(model, image, m)?;
            state.m = m;
            report.momentum_used = m;
        }
        Method::Wstta => {
            let weak = weak.expect("checked above");
            let pseudo = make_pseudo_label(&report.prediction, weak, cfg.tau);
            let m = decay_momentum(state.m, cfg.omega, cfg.delta);
            let snapshot = model.clone();
            match wstta_update(model, state, image, &pseudo, weak, m) {
                Ok(obj) => {
                    report.loss_total = obj.total;
                    report.loss_instance = obj.instance;
                    report.loss_image = obj.image;
                }
                Err(e) => {
                    *model = snapshot;
                    return Err(e);
                }
            }
            state.m = m;
            report.momentum_used = m;
            report.pseudo_count = pseudo.len();
        }
    }
    state.t += 1;
    Ok(report)
}

/// Closed form of `t` momentum decays from `m0` (ω < 1, no clamping).
pub fn momentum_closed_form(m0: f64, omega: f64, delta: f64, t: u64) -> f64 {
    let fixed = delta / (1.0 - omega);
    omega.powi(t as i32) * (m0 - fixed) + fixed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    fn det(cat: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            category: cat,
            score,
        }
    }

    #[test]
    fn pseudo_label_threshold_is_inclusive() {
        let p = vec![det(0, 0.9), det(1, 0.6), det(2, 0.85), det(0, 0.8)];
        let weak = WeakLabel::new([0]);
        let pl = make_pseudo_label(&p, &weak, 0.8);
        assert_eq!(pl.entries.iter().map(|e| e.1).collect::<Vec<_>>(), vec![0, 0]);
        assert!(make_pseudo_label(&p, &WeakLabel::default(), 0.8).is_empty());
    }

    #[test]
    fn worked_aggregation_example() {
        let c = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let o = build_o(&c, &[2.0, 0.0]).unwrap();
        assert_eq!(o.data(), &[2.0, 0.0, 0.0, 0.0]);
        let z = image_level_prediction(&c, &[2.0, 0.0]).unwrap();
        assert!((z[0] - 0.6760).abs() < 5e-5, "{z:?}");
        assert!((z[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_first_column() {
        let c = Tensor::full([2, 3], 0.3);
        let o = build_o(&c, &[1.5, -2.0]).unwrap();
        assert_eq!(o.data(), &[1.5, 0.0, 0.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn image_loss_values() {
        assert!((image_level_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = image_level_loss(&[0.0], &[1.0]).unwrap();
        assert!((l - 16.118_095_650_958_32).abs() < 1e-9);
    }

    #[test]
    fn momentum_examples() {
        assert!((decay_momentum(0.1, 0.94, 0.005) - 0.099).abs() < 1e-15);
        assert_eq!(decay_momentum(0.3, 1.0, 0.0), 0.3);
        assert_eq!(decay_momentum(0.9, 1.0, 0.5), 1.0);
        let mut m = 0.1;
        for _ in 0..2000 {
            m = decay_momentum(m, 0.94, 0.005);
        }
        assert!((m - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn bn_stats_update() {
        let mut layer = BatchNormLayer::new(1, 0.1);
        let batch = ChannelStats {
            mean: vec![2.0],
            var: vec![3.0],
        };
        update_bn_stats(&mut layer, &batch, 0.1).unwrap();
        assert!((layer.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((layer.running_var[0] - 1.2).abs() < 1e-15);
        update_bn_stats(&mut layer, &batch, 1.0).unwrap();
        assert_eq!(layer.running_mean, vec![2.0]);
    }

    #[test]
    fn wstta_requires_weak_label() {
        let mut model = DetectorModel::new(DetectorConfig::micro(), 1, &["a", "b"]).unwrap();
        let mut state = AdaptationState::new(AdaptationConfig::default()).unwrap();
        let image = Tensor::full([1, 3, 16, 16], 0.5);
        assert!(matches!(
            adapt_step(&mut model, &mut state, &image, None),
            Err(Error::Usage(_))
        ));
        assert_eq!(state.t, 0);
    }
}
