use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wstta_core::adaptation::{wstta_objective, AdaptationConfig, PseudoLabel, WeakLabel};
use wstta_core::detector::boxes::BBox;
use wstta_core::detector::{DetectorConfig, DetectorModel, Trainable};
use wstta_core::nn::{self, BatchNormLayer, BnMode};
use wstta_core::tape::{ParamKey, Tape, Var};
use wstta_core::Tensor;

const H: f64 = 1e-5;

/// Relative error with a floor so rounding noise on tiny gradients does not
/// dominate.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// conv → [bn] → relu → maxpool → dense → loss, with every weight a
/// trainable parameter.
struct MicroNet {
    params: Vec<Tensor>,
    input: Tensor,
    batchnorm: bool,
    targets: Vec<usize>,
    soft_head: bool,
}

impl MicroNet {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=2);
        let s = [4, 6][rng.random_range(0..2)];
        let f = rng.random_range(1..=3);
        let k = rng.random_range(2..=3);
        let flat = f * (s / 2) * (s / 2);
        let params = vec![
            rand_tensor(rng, &[f, c, 3, 3], 0.5),
            rand_tensor(rng, &[f], 0.1),
            Tensor::from_fn([f], |_| rng.random_range(0.5..1.5)),
            rand_tensor(rng, &[f], 0.2),
            rand_tensor(rng, &[k, flat], 0.3),
            rand_tensor(rng, &[k], 0.1),
        ];
        MicroNet {
            input: rand_tensor(rng, &[n, c, s, s], 1.0),
            batchnorm: n * s * s > 1 && rng.random_bool(0.7),
            targets: (0..n).map(|_| rng.random_range(0..k)).collect(),
            soft_head: rng.random_bool(0.5),
            params,
        }
    }

    fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn build(&self, params: &[Tensor]) -> (Tape, Var) {
        let mut t = Tape::new();
        let x = t.input(self.input.clone());
        let p: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, v)| t.param(ParamKey(i as u32), v.clone(), true))
            .collect();
        let mut h = t.conv2d(x, p[0], p[1], 1, 1).unwrap();
        if self.batchnorm {
            h = t.batchnorm_batch(h, p[2], p[3], 1e-5).unwrap();
        }
        h = t.relu(h).unwrap();
        h = t.maxpool2(h).unwrap();
        let shape = t.value(h).shape().to_vec();
        let n = shape[0];
        let flat = shape[1..].iter().product::<usize>();
        let h = t.gather(h, (0..n * flat).map(Some).collect(), vec![n, flat]).unwrap();
        let logits = t.dense(h, p[4], p[5]).unwrap();
        let loss = if self.soft_head {
            // exercise the aggregation ops: rows × columns softmax, summed
            let a = t.softmax_rows(logits).unwrap();
            let b = t.softmax_cols(logits).unwrap();
            let m = t.mul(a, b).unwrap();
            let z = t.sum_cols(m).unwrap();
            let z = t.scale(z, 0.5).unwrap();
            let k = t.value(z).len();
            let targets = (0..k).map(|i| (i % 2) as f64).collect();
            let bce = t.bce_prob_mean(z, targets, 1e-7).unwrap();
            let ce = t.cross_entropy_mean(logits, self.targets.clone()).unwrap();
            t.add(bce, ce).unwrap()
        } else {
            t.cross_entropy_mean(logits, self.targets.clone()).unwrap()
        };
        (t, loss)
    }

    fn loss(&self, params: &[Tensor]) -> f64 {
        let (t, l) = self.build(params);
        t.value(l).item()
    }
}

#[test]
fn random_micro_networks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..40 {
        let net = MicroNet::random(&mut rng);
        assert!(net.param_count() <= 200);
        let (tape, loss) = net.build(&net.params);
        let grads = tape.backward(loss).unwrap();
        for (i, p) in net.params.iter().enumerate() {
            let used = net.batchnorm || !(i == 2 || i == 3);
            let g = grads.get(&ParamKey(i as u32));
            if !used {
                assert!(g.is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
                continue;
            }
            let g = g.expect("gradient for a used parameter");
            for j in 0..p.len() {
                let mut plus = net.params.clone();
                plus[i].data_mut()[j] += H;
                let mut minus = net.params.clone();
                minus[i].data_mut()[j] -= H;
                let numeric = (net.loss(&plus) - net.loss(&minus)) / (2.0 * H);
                let e = rel_err(g.data()[j], numeric);
                assert!(e < 1e-4, "case {case} param {i}[{j}]: {} vs {numeric} ({e:e})", g.data()[j]);
            }
        }
    }
}

#[test]
fn every_micro_detector_parameter_matches_finite_differences() {
    let model = DetectorModel::new(DetectorConfig::micro(), 9, &["a", "b"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = model.config.input_size;
    let image = Tensor::from_fn([1, 3, s, s], |_| rng.random_range(0.0..1.0));
    let pseudo = PseudoLabel {
        entries: vec![(BBox::new(2.0, 1.0, 10.0, 9.0), 1), (BBox::new(6.0, 7.0, 15.0, 15.0), 0)],
    };
    let weak = WeakLabel::new([0, 1]);
    let cfg = AdaptationConfig::default();
    let obj = wstta_objective(&model, &cfg, 0, &image, &pseudo, &weak, Trainable::All).unwrap();
    let loss = |m: &DetectorModel| {
        wstta_objective(m, &cfg, 0, &image, &pseudo, &weak, Trainable::All)
            .unwrap()
            .total
    };
    let mut checked = 0;
    for slot in model.slots().into_iter().filter(|s| s.is_learnable()) {
        // parameters the loss never reads carry no gradient; FD must then agree with zero
        let n = model.clone().values_mut(slot).len();
        let zeros = Tensor::zeros([n]);
        let g = obj.gradients.get(&slot.key()).unwrap_or(&zeros);
        for j in 0..n {
            let mut plus = model.clone();
            plus.values_mut(slot)[j] += H;
            let mut minus = model.clone();
            minus.values_mut(slot)[j] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let e = rel_err(g.data()[j], numeric);
            assert!(e < 1e-4, "{}[{j}]: {} vs {numeric} ({e:e})", slot.name(), g.data()[j]);
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} entries checked");
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4("naive").unwrap();
    let (f, _, kh, kw) = w.dims4("naive").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for img in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((img * c + ch) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ch) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((img * f + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new([n, f, oh, ow], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_matches_naive_loops(
        seed in any::<u64>(),
        n in 1usize..=2, c in 1usize..=3, f in 1usize..=3,
        h in 1usize..=8, w in 1usize..=8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, pad in 0usize..=2,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        prop_assume!((h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, c, h, w], 1.0);
        let wt = rand_tensor(&mut rng, &[f, c, k, k], 1.0);
        let b = rand_tensor(&mut rng, &[f], 1.0);
        let got = nn::conv2d(&x, &wt, &b, stride, pad).unwrap();
        let want = naive_conv(&x, &wt, &b, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn softmax_rows_and_cols_normalize(
        rows in 1usize..=16, cols in 1usize..=6,
        vals in prop::collection::vec(-50.0f64..50.0, 96),
    ) {
        let m = Tensor::new([rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let r = nn::softmax_rows(&m).unwrap();
        for row in r.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let c = nn::softmax_cols(&m).unwrap();
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| c.data()[i * cols + j]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(r.data().iter().chain(c.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn adapt_mode_batchnorm_output_has_beta_mean_gamma_variance(
        seed in any::<u64>(), n in 1usize..=3, c in 1usize..=4, s in 2usize..=6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // large inputs so epsilon is negligible against the batch variance
        let x = rand_tensor(&mut rng, &[n, c, s, s], 100.0);
        let mut layer = BatchNormLayer::new(c, 0.1);
        for ch in 0..c {
            layer.gamma[ch] = rng.random_range(-2.0..2.0);
            layer.beta[ch] = rng.random_range(-2.0..2.0);
        }
        let out = layer.forward(&x, BnMode::Adapt).unwrap().output;
        let stats = nn::channel_stats(&out).unwrap();
        for ch in 0..c {
            prop_assert!((stats.mean[ch] - layer.beta[ch]).abs() <= 1e-6);
            prop_assert!((stats.var[ch] - layer.gamma[ch].powi(2)).abs() <= 1e-6);
        }
    }
}

#[test]
fn replay_reproduces_forward_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let net = MicroNet::random(&mut rng);
        let (tape, _) = net.build(&net.params);
        assert!(tape.replay_matches().unwrap());
    }
    let model = DetectorModel::new(DetectorConfig::micro(), 4, &["a", "b", "c"]).unwrap();
    let image = Tensor::from_fn([1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    for mode in [BnMode::Adapt, BnMode::Eval] {
        let mut tape = Tape::new();
        model.forward_on_tape(&mut tape, &image, mode, Trainable::All).unwrap();
        assert!(tape.replay_matches().unwrap());
    }
}
