//! Tape-based reverse-mode differentiation over the kernels in [`crate::nn`].
//!
//! Every call on [`Tape`] computes its value immediately and appends a node.
//! [`Tape::backward`] walks the nodes in exact reverse order and returns
//! gradients for the parameter slots that were registered as trainable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{self, ChannelStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Caller-chosen identifier of a parameter slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(pub u32);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamKey),
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Batch statistics; inputs are (x, gamma, beta).
    BatchNormBatch {
        eps: f64,
    },
    /// Fixed statistics; inputs are (x, gamma, beta).
    BatchNormFixed {
        stats: ChannelStats,
        eps: f64,
    },
    Relu,
    MaxPool2,
    Dense,
    Gather {
        index: Vec<Option<usize>>,
        shape: Vec<usize>,
    },
    SoftmaxRows,
    SoftmaxCols,
    Mul,
    Add,
    Scale(f64),
    SumCols,
    BceWithLogitsMean {
        targets: Vec<f64>,
    },
    CrossEntropyMean {
        targets: Vec<usize>,
    },
    BceProbMean {
        targets: Vec<f64>,
        clamp: f64,
    },
    SmoothL1Sum {
        targets: Vec<f64>,
        beta: f64,
        scale: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// Batch statistics produced by `BatchNormBatch`.
    stats: Option<ChannelStats>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter slot.
pub type Gradients = BTreeMap<ParamKey, Tensor>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Batch statistics recorded by a [`Tape::batchnorm_batch`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&ChannelStats> {
        self.nodes[v.0].stats.as_ref()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Input, value, false)
    }

    /// Registers a parameter slot. Only trainable slots receive gradients.
    pub fn param(&mut self, key: ParamKey, value: Tensor, trainable: bool) -> Var {
        self.push_leaf(Op::Param(key), value, trainable)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            requires_grad,
            stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, stats) = evaluate(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            stats,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.record(Op::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn batchnorm_batch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.record(Op::BatchNormBatch { eps }, &[x, gamma, beta])
    }

    pub fn batchnorm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: ChannelStats,
        eps: f64,
    ) -> Result<Var> {
        self.record(Op::BatchNormFixed { stats, eps }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu, &[x])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MaxPool2, &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Dense, &[x, w, b])
    }

    /// `out[i] = x.flat[index[i]]`, or 0 where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather { index, shape }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows, &[x])
    }

    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxCols, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(factor), &[x])
    }

    /// Column sums of a 2-D tensor.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumCols, &[x])
    }

    /// Mean binary cross-entropy of logits against targets in [0, 1].
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        self.record(Op::BceWithLogitsMean { targets }, &[logits])
    }

    /// Mean softmax cross-entropy over the rows of a 2-D logit tensor.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropyMean { targets }, &[logits])
    }

    /// Mean binary cross-entropy of probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce_prob_mean(&mut self, probs: Var, targets: Vec<f64>, clamp: f64) -> Result<Var> {
        self.record(Op::BceProbMean { targets, clamp }, &[probs])
    }

    /// `scale · Σ smooth_l1(x − target)`.
    pub fn smooth_l1_sum(
        &mut self,
        x: Var,
        targets: Vec<f64>,
        beta: f64,
        scale: f64,
    ) -> Result<Var> {
        self.record(
            Op::SmoothL1Sum {
                targets,
                beta,
                scale,
            },
            &[x],
        )
    }

    /// Recomputes every non-leaf node from its recorded inputs and checks the
    /// result is bitwise identical to what was recorded.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if node.inputs.is_empty() {
                continue;
            }
            let values: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let (value, _) = evaluate(&node.op, &values)?;
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse-mode gradients of the scalar `loss` for every trainable slot.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::usage("loss is not on this tape"));
        };
        if root.value.len() != 1 {
            return Err(Error::usage(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(key) = node.op {
                match out.get_mut(&key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(key, g);
                    }
                }
                continue;
            }
            let values: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = differentiate(node, &values, &need, &g)?;
            for ((&i, ig), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let Some(ig) = ig else { continue };
                if !needed {
                    continue;
                }
                match grads[i].as_mut() {
                    Some(acc) => acc.add_assign(&ig),
                    None => grads[i] = Some(ig),
                }
            }
        }
        Ok(out)
    }
}

fn same_len(op: &'static str, a: &Tensor, n: usize) -> Result<()> {
    if a.len() != n {
        return Err(Error::Dimension {
            op,
            axis: "elements",
            expected: n,
            got: a.len(),
        });
    }
    Ok(())
}

fn evaluate(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Option<ChannelStats>)> {
    let value = match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are never evaluated"),
        Op::Conv2d { stride, padding } => nn::conv2d(x[0], x[1], x[2], *stride, *padding)?,
        Op::BatchNormBatch { eps } => {
            let stats = nn::channel_stats(x[0])?;
            let y = nn::batchnorm_apply(x[0], x[1].data(), x[2].data(), &stats, *eps)?;
            return Ok((y, Some(stats)));
        }
        Op::BatchNormFixed { stats, eps } => {
            nn::batchnorm_apply(x[0], x[1].data(), x[2].data(), stats, *eps)?
        }
        Op::Relu => nn::relu(x[0]),
        Op::MaxPool2 => nn::maxpool2(x[0])?,
        Op::Dense => nn::dense(x[0], x[1], x[2])?,
        Op::Gather { index, shape } => {
            let src = x[0].data();
            if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.len()) {
                return Err(Error::usage(format!(
                    "gather index {bad} out of range {}",
                    src.len()
                )));
            }
            let data = index
                .iter()
                .map(|i| i.map_or(0.0, |i| src[i]))
                .collect();
            Tensor::new(shape.clone(), data)?
        }
        Op::SoftmaxRows => nn::softmax_rows(x[0])?,
        Op::SoftmaxCols => nn::softmax_cols(x[0])?,
        Op::Mul | Op::Add => {
            if x[0].shape() != x[1].shape() {
                return Err(Error::Shape {
                    op: "elementwise",
                    shape: x[1].shape().to_vec(),
                    reason: format!("expected {:?}", x[0].shape()),
                });
            }
            let data = x[0]
                .data()
                .iter()
                .zip(x[1].data())
                .map(|(a, b)| if matches!(op, Op::Mul) { a * b } else { a + b })
                .collect();
            Tensor::new(x[0].shape(), data)?
        }
        Op::Scale(f) => x[0].map(|v| v * f),
        Op::SumCols => {
            let (_, cols) = x[0].dims2("sum_cols")?;
            let mut out = vec![0.0; cols];
            for row in x[0].data().chunks(cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        }
        Op::BceWithLogitsMean { targets } => {
            same_len("bce_with_logits", x[0], targets.len())?;
            let n = targets.len() as f64;
            let total: f64 = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / n)
        }
        Op::CrossEntropyMean { targets } => {
            let (rows, cols) = x[0].dims2("cross_entropy")?;
            same_len("cross_entropy", &Tensor::zeros([rows]), targets.len())?;
            let mut total = 0.0;
            for (row, &t) in x[0].data().chunks(cols).zip(targets) {
                if t >= cols {
                    return Err(Error::usage(format!("class target {t} out of range {cols}")));
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Tensor::scalar(total / rows as f64)
        }
        Op::BceProbMean { targets, clamp } => {
            same_len("bce_prob", x[0], targets.len())?;
            let total: f64 = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&p, &t)| {
                    let p = p.clamp(*clamp, 1.0 - clamp);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum();
            Tensor::scalar(total / targets.len() as f64)
        }
        Op::SmoothL1Sum {
            targets,
            beta,
            scale,
        } => {
            same_len("smooth_l1", x[0], targets.len())?;
            let total: f64 = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&v, &t)| {
                    let d = (v - t).abs();
                    if d < *beta {
                        0.5 * d * d / beta
                    } else {
                        d - 0.5 * beta
                    }
                })
                .sum();
            Tensor::scalar(scale * total)
        }
    };
    Ok((value, None))
}

fn differentiate(
    node: &Node,
    x: &[&Tensor],
    need: &[bool],
    g: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let out = &node.value;
    let gs = g.item();
    let grads = match &node.op {
        Op::Input | Op::Param(_) => unreachable!(),
        Op::Conv2d { stride, padding } => {
            let need = [need[0], need[1], need[2]];
            nn::conv2d_backward(x[0], x[1], x[2], *stride, *padding, g, need)?.to_vec()
        }
        Op::BatchNormBatch { eps } | Op::BatchNormFixed { eps, .. } => {
            let (stats, through) = match &node.op {
                Op::BatchNormFixed { stats, .. } => (stats, false),
                _ => (node.stats.as_ref().expect("batch stats recorded"), true),
            };
            let (dx, dgamma, dbeta) =
                nn::batchnorm_backward(x[0], x[1].data(), stats, *eps, through, g)?;
            vec![
                Some(dx),
                Some(Tensor::vector(dgamma)),
                Some(Tensor::vector(dbeta)),
            ]
        }
        Op::Relu => {
            let data = x[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(x[0].shape(), data)?)]
        }
        Op::MaxPool2 => {
            let (_, arg) = nn::maxpool2_with_argmax(x[0])?;
            let mut dx = vec![0.0; x[0].len()];
            for (&src, &d) in arg.iter().zip(g.data()) {
                dx[src] += d;
            }
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
        Op::Dense => {
            let need = [need[0], need[1], need[2]];
            nn::dense_backward(x[0], x[1], g, need)?.to_vec()
        }
        Op::Gather { index, .. } => {
            let mut dx = vec![0.0; x[0].len()];
            for (i, &d) in index.iter().zip(g.data()) {
                if let Some(i) = i {
                    dx[*i] += d;
                }
            }
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
        Op::SoftmaxRows | Op::SoftmaxCols => {
            let (rows, cols) = out.dims2("softmax")?;
            let s = out.data();
            let gd = g.data();
            let mut dx = vec![0.0; s.len()];
            let lanes: Vec<Vec<usize>> = if matches!(node.op, Op::SoftmaxRows) {
                (0..rows)
                    .map(|r| (0..cols).map(|c| r * cols + c).collect())
                    .collect()
            } else {
                (0..cols)
                    .map(|c| (0..rows).map(|r| r * cols + c).collect())
                    .collect()
            };
            for lane in lanes {
                let dot: f64 = lane.iter().map(|&i| gd[i] * s[i]).sum();
                for i in lane {
                    dx[i] = s[i] * (gd[i] - dot);
                }
            }
            vec![Some(Tensor::new(out.shape(), dx)?)]
        }
        Op::Mul => {
            let ga = x[1]
                .data()
                .iter()
                .zip(g.data())
                .map(|(b, d)| b * d)
                .collect();
            let gb = x[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, d)| a * d)
                .collect();
            vec![
                Some(Tensor::new(out.shape(), ga)?),
                Some(Tensor::new(out.shape(), gb)?),
            ]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Scale(f) => vec![Some(g.map(|d| d * f))],
        Op::SumCols => {
            let (rows, cols) = x[0].dims2("sum_cols")?;
            let dx = (0..rows * cols).map(|i| g.data()[i % cols]).collect();
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
        Op::BceWithLogitsMean { targets } => {
            let n = targets.len() as f64;
            let dx = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &t)| gs * (nn::sigmoid_scalar(z) - t) / n)
                .collect();
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
        Op::CrossEntropyMean { targets } => {
            let (rows, cols) = x[0].dims2("cross_entropy")?;
            let mut dx = nn::softmax_rows(x[0])?.into_data();
            for (r, &t) in targets.iter().enumerate() {
                dx[r * cols + t] -= 1.0;
            }
            let k = gs / rows as f64;
            dx.iter_mut().for_each(|v| *v *= k);
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
        Op::BceProbMean { targets, clamp } => {
            let n = targets.len() as f64;
            let dx = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&p, &t)| {
                    if p <= *clamp || p >= 1.0 - clamp {
                        0.0
                    } else {
                        gs * (-t / p + (1.0 - t) / (1.0 - p)) / n
                    }
                })
                .collect();
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
        Op::SmoothL1Sum {
            targets,
            beta,
            scale,
        } => {
            let dx = x[0]
                .data()
                .iter()
                .zip(targets)
                .map(|(&v, &t)| {
                    let d = v - t;
                    let slope = if d.abs() < *beta { d / beta } else { d.signum() };
                    gs * scale * slope
                })
                .collect();
            vec![Some(Tensor::new(x[0].shape(), dx)?)]
        }
    };
    Ok(grads)
}
