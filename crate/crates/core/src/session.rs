//! Streaming adaptation session: the observe-once fetch/label state machine
//! shared by batch runs and the HTTP service, its event records and the run
//! report rebuilt from them.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_step, AdaptationConfig, AdaptationState, Method, WeakLabel};
use crate::detector::train::{train, LabeledImage, TrainConfig};
use crate::detector::{DetectorModel, Prediction};
use crate::error::{Error, Result};
use crate::eval::{map50, EvalFrame, EvalResult};
use crate::scene::{
    generate_frame, noisy_weak_label, weak_label_oracle, DomainSpec, Frame, SceneConfig, Split,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub adaptation: AdaptationConfig,
    /// Frames streamed before the session ends.
    pub budget: usize,
    /// Picks which stream frames are used and seeds label noise and anchor
    /// sampling.
    pub seed: u64,
    /// When set, the selected frames are re-shuffled with this seed, so runs
    /// differing only here see the same frames in a different order.
    pub order_seed: Option<u64>,
    /// Scene generator seed (shared with pretraining).
    pub data_seed: u64,
    /// Probability of flipping each bit of the oracle weak label.
    pub noise: f64,
    /// Answer labels from ground truth instead of waiting for an operator.
    pub auto_oracle: bool,
    /// Evaluate on the target test split every this many steps (0: only at
    /// the end).
    pub eval_every: usize,
    pub test_frames: usize,
    /// Size of the target stream split the frames are drawn from.
    pub stream_pool: usize,
    /// Fine-tuning schedule of the `oracle-ft` baseline.
    pub oracle_train: TrainConfig,
    pub domain: DomainSpec,
    pub scene: SceneConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            adaptation: AdaptationConfig::default(),
            budget: 100,
            seed: 0,
            order_seed: None,
            data_seed: 0,
            noise: 0.0,
            auto_oracle: true,
            eval_every: 10,
            test_frames: Split::TargetTest.default_count(),
            stream_pool: Split::TargetStream.default_count(),
            oracle_train: TrainConfig {
                steps: 1000,
                learning_rate: 5e-4,
                ..TrainConfig::default()
            },
            domain: DomainSpec::TARGET,
            scene: SceneConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.adaptation.validate()?;
        self.domain.validate()?;
        if self.budget == 0 {
            return Err(Error::usage("budget must be positive"));
        }
        if self.budget > self.stream_pool {
            return Err(Error::usage(format!(
                "budget {} exceeds the stream pool of {} frames",
                self.budget, self.stream_pool
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::usage("noise must be in [0, 1]"));
        }
        if self.test_frames == 0 {
            return Err(Error::usage("test_frames must be positive"));
        }
        Ok(())
    }

    /// Stream frame ids in the order they are served.
    pub fn frame_order(&self) -> Vec<u64> {
        let first = Split::TargetStream.first_id();
        let mut ids: Vec<u64> = (0..self.stream_pool as u64).map(|i| first + i).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        ids.truncate(self.budget);
        if let Some(order) = self.order_seed {
            ids.sort_unstable();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(order));
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub frame_id: u64,
    pub loss_total: f64,
    pub loss_instance: f64,
    pub loss_image: f64,
    pub momentum: f64,
    pub pseudo_count: usize,
    pub detections: usize,
    pub weak_label: Vec<String>,
    /// Set when the update was rolled back.
    pub aborted: Option<String>,
    pub model_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalScope {
    /// Held-out target test split, evaluated with the current model.
    TargetTest,
    /// The online predictions made on the streamed frames so far.
    Online,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Steps completed when the evaluation ran.
    pub t: usize,
    pub scope: EvalScope,
    pub map50: f64,
    pub per_category_ap50: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Operator,
    Oracle,
}

/// Scalar-only session record. Never carries pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionCreated {
        config: SessionConfig,
        categories: Vec<String>,
        model_digest: String,
    },
    FrameServed {
        t: usize,
        frame_id: u64,
        detections: usize,
    },
    LabelReceived {
        t: usize,
        frame_id: u64,
        categories: Vec<String>,
        source: LabelSource,
    },
    StepCompleted(StepRecord),
    EvalCompleted(EvalRecord),
    Error {
        t: usize,
        message: String,
    },
}

/// A frame handed out for labelling.
#[derive(Clone, Debug)]
pub struct ServedFrame {
    pub t: usize,
    pub frame_id: u64,
    /// `[3, S, S]`.
    pub image: crate::tensor::Tensor,
    pub prediction: Prediction,
}

struct Pending {
    frame: Frame,
    prediction: Prediction,
}

/// Online predictions kept for the online mAP: boxes and scores only.
struct OnlineRecord {
    frame_id: u64,
    prediction: Prediction,
    ground_truth: Vec<(crate::detector::boxes::BBox, usize)>,
}

pub struct Session {
    config: SessionConfig,
    model: DetectorModel,
    state: AdaptationState,
    order: Vec<u64>,
    cursor: usize,
    pending: Option<Pending>,
    last_stepped: Option<u64>,
    noise_rng: ChaCha8Rng,
    online: Vec<OnlineRecord>,
    events: Vec<SessionEvent>,
}

/// Evaluates `model` on `count` frames of `split` rendered through `domain`.
pub fn evaluate_split(
    model: &DetectorModel,
    scene: &SceneConfig,
    data_seed: u64,
    split: Split,
    count: usize,
    domain: &DomainSpec,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(count);
    let mut gts = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let f = generate_frame(scene, data_seed, split.first_id() + i, domain)?;
        preds.push((f.frame_id, model.detect(&f.batch(), score_threshold, nms_iou)?));
        gts.push(f.gt_boxes);
    }
    let frames: Vec<EvalFrame<'_>> = preds
        .iter()
        .zip(&gts)
        .map(|((id, p), g)| EvalFrame {
            frame_id: *id,
            detections: p,
            ground_truth: g,
        })
        .collect();
    Ok(map50(&frames, model.num_categories()))
}

/// Supervised fine-tuning of every parameter on the labelled target stream
/// split (the `oracle-ft` upper bound).
pub fn oracle_finetune(model: &DetectorModel, config: &SessionConfig) -> Result<DetectorModel> {
    let frames: Vec<Frame> = (0..config.stream_pool as u64)
        .map(|i| {
            generate_frame(
                &config.scene,
                config.data_seed,
                Split::TargetStream.first_id() + i,
                &config.domain,
            )
        })
        .collect::<Result<_>>()?;
    let data: Vec<LabeledImage<'_>> = frames
        .iter()
        .map(|f| LabeledImage {
            image: &f.image,
            targets: &f.gt_boxes,
        })
        .collect();
    let tc = TrainConfig {
        seed: config.seed,
        ..config.oracle_train.clone()
    };
    Ok(train(model, &data, &tc, |_, _| {})?.0)
}

impl Session {
    pub fn new(model: DetectorModel, mut config: SessionConfig) -> Result<Self> {
        config.validate()?;
        config.adaptation.seed = config.seed;
        let model = if config.adaptation.method == Method::OracleFt {
            oracle_finetune(&model, &config)?
        } else {
            model
        };
        let state = AdaptationState::new(config.adaptation.clone())?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(1);
        let order = config.frame_order();
        let created = SessionEvent::SessionCreated {
            config: config.clone(),
            categories: model.categories.clone(),
            model_digest: model.digest(),
        };
        Ok(Self {
            config,
            model,
            state,
            order,
            cursor: 0,
            pending: None,
            last_stepped: None,
            noise_rng,
            online: Vec::new(),
            events: vec![created],
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    pub fn momentum(&self) -> f64 {
        self.state.m
    }

    /// Steps completed so far.
    pub fn steps(&self) -> usize {
        self.cursor
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == self.order.len()
    }

    pub fn awaiting_label(&self) -> Option<u64> {
        self.pending.as_ref().map(|p| p.frame.frame_id)
    }

    /// Every event emitted so far.
    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    /// Serves the next frame with the current model's eval-mode prediction.
    pub fn next_frame(&mut self) -> Result<ServedFrame> {
        if let Some(p) = &self.pending {
            return Err(Error::Conflict(format!(
                "frame {} is awaiting its label",
                p.frame.frame_id
            )));
        }
        if self.is_finished() {
            return Err(Error::EndOfStream(self.order.len()));
        }
        let frame_id = self.order[self.cursor];
        let frame = generate_frame(
            &self.config.scene,
            self.config.data_seed,
            frame_id,
            &self.config.domain,
        )?;
        let a = &self.config.adaptation;
        let prediction = self.model.detect(&frame.batch(), a.score_threshold, a.nms_iou)?;
        self.events.push(SessionEvent::FrameServed {
            t: self.cursor,
            frame_id,
            detections: prediction.len(),
        });
        let served = ServedFrame {
            t: self.cursor,
            frame_id,
            image: frame.image.clone(),
            prediction: prediction.clone(),
        };
        self.pending = Some(Pending { frame, prediction });
        Ok(served)
    }

    /// Resolves category names against the model's category list.
    pub fn resolve_categories(&self, names: &[String]) -> Result<WeakLabel> {
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            idx.push(
                self.model
                    .category_index(n)
                    .ok_or_else(|| Error::UnknownCategory(n.clone()))?,
            );
        }
        Ok(WeakLabel::new(idx))
    }

    fn names(&self, weak: &WeakLabel) -> Vec<String> {
        weak.iter().map(|c| self.model.categories[c].clone()).collect()
    }

    /// Accepts the weak label of the frame awaiting it, runs the adaptation
    /// step and drops the frame's pixels. `categories` may be `None` only in
    /// auto-oracle mode.
    pub fn submit_label(&mut self, frame_id: u64, categories: Option<&[String]>) -> Result<StepRecord> {
        let pending_id = match &self.pending {
            Some(p) => p.frame.frame_id,
            None if self.last_stepped == Some(frame_id) => {
                return Err(Error::Conflict(format!("frame {frame_id} was already labelled")))
            }
            None => return Err(Error::NotFound(format!("frame {frame_id} is not awaiting a label"))),
        };
        if pending_id != frame_id {
            if self.last_stepped == Some(frame_id) {
                return Err(Error::Conflict(format!("frame {frame_id} was already labelled")));
            }
            return Err(Error::NotFound(format!(
                "frame {frame_id} is not awaiting a label (current frame is {pending_id})"
            )));
        }
        let (weak, source) = match categories {
            Some(names) => (self.resolve_categories(names)?, LabelSource::Operator),
            None if self.config.auto_oracle => {
                let frame = &self.pending.as_ref().expect("pending").frame;
                let truth = weak_label_oracle(frame);
                let noisy = noisy_weak_label(
                    &truth,
                    self.model.num_categories(),
                    self.config.noise,
                    &mut self.noise_rng,
                )?;
                (noisy, LabelSource::Oracle)
            }
            None => return Err(Error::usage("this session expects operator labels")),
        };

        let Pending { frame, prediction } = self.pending.take().expect("pending");
        let t = self.cursor;
        self.events.push(SessionEvent::LabelReceived {
            t,
            frame_id,
            categories: self.names(&weak),
            source,
        });
        let step = adapt_step(&mut self.model, &mut self.state, &frame.batch(), Some(&weak));
        let (record, online_pred) = match step {
            Ok(report) => (
                StepRecord {
                    t,
                    frame_id,
                    loss_total: report.loss_total,
                    loss_instance: report.loss_instance,
                    loss_image: report.loss_image,
                    momentum: report.momentum_used,
                    pseudo_count: report.pseudo_count,
                    detections: report.prediction.len(),
                    weak_label: self.names(&weak),
                    aborted: None,
                    model_digest: self.model.digest(),
                },
                report.prediction,
            ),
            Err(Error::NonFinite(msg)) => {
                self.events.push(SessionEvent::Error {
                    t,
                    message: msg.clone(),
                });
                (
                    StepRecord {
                        t,
                        frame_id,
                        loss_total: 0.0,
                        loss_instance: 0.0,
                        loss_image: 0.0,
                        momentum: self.state.m,
                        pseudo_count: 0,
                        detections: prediction.len(),
                        weak_label: self.names(&weak),
                        aborted: Some(msg),
                        model_digest: self.model.digest(),
                    },
                    prediction,
                )
            }
            Err(e) => {
                // nothing was applied; put the frame back so the call can be retried
                self.pending = Some(Pending { frame, prediction });
                self.events.pop();
                return Err(e);
            }
        };
        self.online.push(OnlineRecord {
            frame_id,
            prediction: online_pred,
            ground_truth: frame.gt_boxes,
        });
        self.cursor += 1;
        self.last_stepped = Some(frame_id);
        self.events.push(SessionEvent::StepCompleted(record.clone()));

        let every = self.config.eval_every;
        if self.is_finished() || (every > 0 && self.cursor % every == 0) {
            self.evaluate()?;
        }
        Ok(record)
    }

    fn evaluate(&mut self) -> Result<()> {
        let c = &self.config;
        let res = evaluate_split(
            &self.model,
            &c.scene,
            c.data_seed,
            Split::TargetTest,
            c.test_frames,
            &c.domain,
            c.adaptation.score_threshold,
            c.adaptation.nms_iou,
        )?;
        self.events.push(SessionEvent::EvalCompleted(EvalRecord {
            t: self.cursor,
            scope: EvalScope::TargetTest,
            map50: res.map50,
            per_category_ap50: res.per_category_ap50,
        }));
        if self.is_finished() {
            let frames: Vec<EvalFrame<'_>> = self
                .online
                .iter()
                .map(|o| EvalFrame {
                    frame_id: o.frame_id,
                    detections: &o.prediction,
                    ground_truth: &o.ground_truth,
                })
                .collect();
            let res = map50(&frames, self.model.num_categories());
            self.events.push(SessionEvent::EvalCompleted(EvalRecord {
                t: self.cursor,
                scope: EvalScope::Online,
                map50: res.map50,
                per_category_ap50: res.per_category_ap50,
            }));
        }
        Ok(())
    }

    /// Drives the session to the end with oracle labels.
    pub fn run_to_end(&mut self) -> Result<()> {
        if !self.config.auto_oracle {
            return Err(Error::usage("run_to_end needs an auto-oracle session"));
        }
        while !self.is_finished() {
            let f = self.next_frame()?;
            self.submit_label(f.frame_id, None)?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<RunReport> {
        RunReport::from_events(&self.events)
    }
}

/// Batch run of one configuration with oracle labels.
pub fn run_session(model: DetectorModel, mut config: SessionConfig) -> Result<RunReport> {
    config.auto_oracle = true;
    let start = std::time::Instant::now();
    let mut session = Session::new(model, config)?;
    session.run_to_end()?;
    let mut report = session.report()?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Everything a run produced, rebuilt from its event records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SessionConfig,
    pub categories: Vec<String>,
    pub initial_digest: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub errors: Vec<String>,
    /// Not part of the event log; zero when rebuilt from events.
    pub wall_clock_secs: f64,
}

/// One line of the NDJSON report.
#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Header {
        config: SessionConfig,
        categories: Vec<String>,
        initial_digest: String,
        wall_clock_secs: f64,
    },
    Step(StepRecord),
    Eval(EvalRecord),
    Error { message: String },
}

impl RunReport {
    pub fn from_events(events: &[SessionEvent]) -> Result<Self> {
        let Some(SessionEvent::SessionCreated {
            config,
            categories,
            model_digest,
        }) = events.first()
        else {
            return Err(Error::usage("event log does not start with session_created"));
        };
        let mut report = RunReport {
            config: config.clone(),
            categories: categories.clone(),
            initial_digest: model_digest.clone(),
            steps: Vec::new(),
            evals: Vec::new(),
            errors: Vec::new(),
            wall_clock_secs: 0.0,
        };
        for e in &events[1..] {
            match e {
                SessionEvent::StepCompleted(s) => report.steps.push(s.clone()),
                SessionEvent::EvalCompleted(r) => report.evals.push(r.clone()),
                SessionEvent::Error { message, .. } => report.errors.push(message.clone()),
                SessionEvent::SessionCreated { .. } => {
                    return Err(Error::usage("duplicate session_created record"))
                }
                SessionEvent::FrameServed { .. } | SessionEvent::LabelReceived { .. } => {}
            }
        }
        Ok(report)
    }

    /// Last target-test mAP, if any evaluation ran.
    pub fn final_map(&self) -> Option<f64> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.scope == EvalScope::TargetTest)
            .map(|e| e.map50)
    }

    pub fn online_map(&self) -> Option<f64> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.scope == EvalScope::Online)
            .map(|e| e.map50)
    }

    pub fn momentum_trajectory(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.momentum).collect()
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |rec: &ReportLine| -> Result<()> {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&ReportLine::Header {
            config: self.config.clone(),
            categories: self.categories.clone(),
            initial_digest: self.initial_digest.clone(),
            wall_clock_secs: self.wall_clock_secs,
        })?;
        for s in &self.steps {
            line(&ReportLine::Step(s.clone()))?;
        }
        for e in &self.evals {
            line(&ReportLine::Eval(e.clone()))?;
        }
        for m in &self.errors {
            line(&ReportLine::Error { message: m.clone() })?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self> {
        let mut report: Option<RunReport> = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReportLine = serde_json::from_str(&line)?;
            match (rec, report.as_mut()) {
                (
                    ReportLine::Header {
                        config,
                        categories,
                        initial_digest,
                        wall_clock_secs,
                    },
                    None,
                ) => {
                    report = Some(RunReport {
                        config,
                        categories,
                        initial_digest,
                        steps: Vec::new(),
                        evals: Vec::new(),
                        errors: Vec::new(),
                        wall_clock_secs,
                    })
                }
                (ReportLine::Header { .. }, Some(_)) => {
                    return Err(Error::usage(format!("report line {}: second header", n + 1)))
                }
                (_, None) => {
                    return Err(Error::usage(format!("report line {}: missing header", n + 1)))
                }
                (ReportLine::Step(s), Some(r)) => r.steps.push(s),
                (ReportLine::Eval(e), Some(r)) => r.evals.push(e),
                (ReportLine::Error { message }, Some(r)) => r.errors.push(message),
            }
        }
        report.ok_or_else(|| Error::usage("empty report"))
    }

    /// Per-step CSV: `t,frame_id,loss_total,loss_instance,loss_image,momentum,pseudo_count,detections,target_map50`.
    /// `target_map50` is filled on rows where an evaluation ran.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,frame_id,loss_total,loss_instance,loss_image,momentum,pseudo_count,detections,target_map50"
        )?;
        for s in &self.steps {
            let map = self
                .evals
                .iter()
                .find(|e| e.scope == EvalScope::TargetTest && e.t == s.t + 1)
                .map(|e| e.map50.to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.t,
                s.frame_id,
                s.loss_total,
                s.loss_instance,
                s.loss_image,
                s.momentum,
                s.pseudo_count,
                s.detections,
                map
            )?;
        }
        Ok(())
    }
}
