use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use wstta_core::adaptation::multi_hot;
use wstta_core::detector::anchors::{assign_anchors, AnchorLabel};
use wstta_core::detector::boxes::{iou, nms, BBox};
use wstta_core::detector::checkpoint;
use wstta_core::detector::{DetectorConfig, DetectorModel, Detection};
use wstta_core::eval::{map50, EvalFrame};
use wstta_core::nn::BnMode;
use wstta_core::scene::{
    generate_frame, generate_split, inject_label_noise, weak_label_oracle, DomainSpec, SceneConfig,
    Split, CATEGORIES,
};
use wstta_core::Tensor;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..60.0, 0.0f64..60.0, 0.5f64..25.0, 0.5f64..25.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// O(n²) greedy reference: scan in score order, keep a box unless a kept
/// box overlaps it too much.
fn greedy_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    // insertion sort: descending score, ascending index
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && (scores[idx[j]] > scores[idx[j - 1]] || (scores[idx[j]] == scores[idx[j - 1]] && idx[j] < idx[j - 1])) {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in idx.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &idx[pos + 1..] {
            if iou(&boxes[i], &boxes[j]) > thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nms_matches_greedy_oracle(
        boxes in prop::collection::vec(arb_box(), 0..=50),
        raw_scores in prop::collection::vec(0u8..20, 50),
        thr in 0.05f64..0.95,
    ) {
        // coarse scores so ties are common
        let scores: Vec<f64> = raw_scores[..boxes.len()].iter().map(|s| *s as f64 / 20.0).collect();
        prop_assert_eq!(nms(&boxes, &scores, thr), greedy_nms(&boxes, &scores, thr));
    }

    #[test]
    fn argmax_anchor_of_every_target_is_positive(targets in prop::collection::vec(arb_box(), 1..=4)) {
        let anchors = DetectorConfig::reference().anchors();
        let labels = assign_anchors(anchors.boxes(), &targets);
        for t in &targets {
            let best = anchors.boxes().iter().map(|a| iou(a, t)).fold(0.0, f64::max);
            if best > 0.0 {
                let hit = anchors
                    .boxes()
                    .iter()
                    .zip(&labels)
                    .any(|(a, l)| iou(a, t) == best && matches!(l, AnchorLabel::Positive(_)));
                prop_assert!(hit, "target {:?} has no positive anchor", t);
            }
        }
    }

    #[test]
    fn ap_depends_on_ranking_only(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_eval_frames(&mut rng);
        let base = map50(&frames(&dets, &gts), 3);
        // strictly increasing rescaling of every score
        let rescaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: 0.2 + 0.5 * x.score.powi(3), ..*x }).collect())
            .collect();
        let again = map50(&frames(&rescaled, &gts), 3);
        prop_assert_eq!(&base.per_category_ap50, &again.per_category_ap50);
        for ap in base.per_category_ap50.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(ap));
        }
    }

    #[test]
    fn lowest_scoring_false_positive_never_helps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dets, gts) = random_eval_frames(&mut rng);
        let before = map50(&frames(&dets, &gts), 3);
        // far away from every ground-truth box, below every score
        dets[0].push(Detection { bbox: BBox::new(200.0, 200.0, 210.0, 210.0), category: rng.random_range(0..3), score: 0.001 });
        let after = map50(&frames(&dets, &gts), 3);
        for (a, b) in before.per_category_ap50.iter().zip(&after.per_category_ap50) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(b <= a);
            }
        }
    }

    #[test]
    fn label_noise_keeps_a_valid_multi_hot(bits in prop::collection::vec(any::<bool>(), 0..8), rho in 0.0f64..=1.0, seed in any::<u64>()) {
        let v: Vec<f64> = bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        let out = inject_label_noise(&v, rho, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.len(), v.len());
        prop_assert!(out.iter().all(|x| *x == 0.0 || *x == 1.0));
    }
}

fn random_eval_frames(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<(BBox, usize)>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..rng.random_range(1..5) {
        let g: Vec<(BBox, usize)> = (0..rng.random_range(0..4))
            .map(|_| {
                let x = rng.random_range(0.0..40.0);
                let y = rng.random_range(0.0..40.0);
                (BBox::new(x, y, x + 12.0, y + 12.0), rng.random_range(0..3))
            })
            .collect();
        let mut d = Vec::new();
        for (b, c) in &g {
            if rng.random_bool(0.7) {
                let j = rng.random_range(-2.0..2.0);
                d.push(Detection { bbox: BBox::new(b.x1 + j, b.y1, b.x2 + j, b.y2), category: *c, score: rng.random_range(0.05..1.0) });
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let x = rng.random_range(0.0..50.0);
            d.push(Detection { bbox: BBox::new(x, x, x + 8.0, x + 8.0), category: rng.random_range(0..3), score: rng.random_range(0.05..1.0) });
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

fn frames<'a>(dets: &'a [Vec<Detection>], gts: &'a [Vec<(BBox, usize)>]) -> Vec<EvalFrame<'a>> {
    dets.iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (d, g))| EvalFrame { frame_id: i as u64, detections: d, ground_truth: g })
        .collect()
}

#[test]
fn cross_category_boxes_never_match() {
    let b = BBox::new(5.0, 5.0, 20.0, 20.0);
    let dets = [Detection { bbox: b, category: 1, score: 0.9 }];
    let gt = [(b, 0)];
    let r = map50(&[EvalFrame { frame_id: 0, detections: &dets, ground_truth: &gt }], 3);
    assert_eq!(r.per_category_ap50, vec![Some(0.0), None, None]);
    assert_eq!(r.counts[1].fp, 1);
}

#[test]
fn postprocess_invariants_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (thr, nms_iou) = (0.05, 0.5);
    for (config, seed) in [(DetectorConfig::micro(), 1), (DetectorConfig::micro(), 2), (DetectorConfig::reference(), 3)] {
        let model = DetectorModel::new(config.clone(), seed, &CATEGORIES).unwrap();
        let s = config.input_size;
        for _ in 0..5 {
            let image = Tensor::from_fn([1, 3, s, s], |_| rng.random_range(0.0..1.0));
            let before = model.digest();
            let dets = model.detect(&image, thr, nms_iou).unwrap();
            model.forward_full(&image, BnMode::Eval).unwrap();
            assert_eq!(model.digest(), before, "eval-mode forward mutated the model");
            for (i, a) in dets.iter().enumerate() {
                assert!(a.score >= thr && a.score <= 1.0);
                let bb = a.bbox;
                assert!(bb.x1 >= 0.0 && bb.y1 >= 0.0 && bb.x2 <= s as f64 && bb.y2 <= s as f64, "{bb:?}");
                assert!(bb.x1 < bb.x2 && bb.y1 < bb.y2);
                for b in &dets[i + 1..] {
                    if a.category == b.category {
                        assert!(iou(&a.bbox, &b.bbox) <= nms_iou);
                    }
                }
            }
        }
    }
}

#[test]
fn fresh_checkpoint_matches_fixture() {
    let model = DetectorModel::new(DetectorConfig::reference(), 0, &CATEGORIES).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let fixture = include_str!("fixtures/fresh_reference_seed0.sha256").trim();
    assert_eq!(digest, fixture);
}

#[test]
fn generator_contract() {
    let scene = SceneConfig::default();
    let frames = generate_split(&scene, 5, Split::SourceTrain, 1000, &DomainSpec::SOURCE).unwrap();
    let mut present = [0usize; 3];
    for f in &frames {
        assert!((1..=4).contains(&f.gt_boxes.len()));
        for (b, _) in &f.gt_boxes {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            assert!(b.x1 < b.x2 && b.y1 < b.y2);
        }
        for c in weak_label_oracle(f).iter() {
            present[c] += 1;
        }
    }
    for (c, n) in present.iter().enumerate() {
        assert!(*n >= 200, "{} appears in only {n} of 1000 frames", CATEGORIES[c]);
    }
    // pure function of (seed, id)
    let again = generate_frame(&scene, 5, frames[17].frame_id, &DomainSpec::SOURCE).unwrap();
    assert_eq!(again.image, frames[17].image);
    assert_eq!(again.gt_boxes, frames[17].gt_boxes);
}

#[test]
fn domains_share_geometry() {
    let scene = SceneConfig::default();
    for id in 0..50 {
        let s = generate_frame(&scene, 2, id, &DomainSpec::SOURCE).unwrap();
        let t = generate_frame(&scene, 2, id, &DomainSpec::TARGET).unwrap();
        assert_eq!(s.gt_boxes, t.gt_boxes);
        assert_ne!(s.image, t.image);
    }
}

#[test]
fn oracle_label_is_ground_truth_multi_hot() {
    let scene = SceneConfig::default();
    let frames = generate_split(&scene, 0, Split::TargetStream, 500, &DomainSpec::TARGET).unwrap();
    for f in &frames {
        let want: BTreeSet<usize> = f.gt_boxes.iter().map(|(_, c)| *c).collect();
        let got = weak_label_oracle(f);
        assert_eq!(got.iter().collect::<BTreeSet<_>>(), want);
        let hot = multi_hot(&got, 3);
        for c in 0..3 {
            assert_eq!(hot[c] == 1.0, want.contains(&c));
        }
    }
}

#[test]
fn label_noise_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let v = [1.0, 0.0, 1.0];
    let mut flips = [0usize; 3];
    let trials = 10_000;
    for _ in 0..trials {
        let out = inject_label_noise(&v, 0.7, &mut rng).unwrap();
        for i in 0..3 {
            flips[i] += usize::from(out[i] != v[i]);
        }
    }
    for f in flips {
        let rate = f as f64 / trials as f64;
        assert!((rate - 0.7).abs() <= 0.02, "flip rate {rate}");
    }
    assert_eq!(inject_label_noise(&v, 0.0, &mut rng).unwrap(), v);
    assert_eq!(inject_label_noise(&v, 1.0, &mut rng).unwrap(), [0.0, 1.0, 0.0]);
}
