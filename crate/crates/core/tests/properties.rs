use emoseq::datamodel::{FrameLabels, TaskKind, VideoRecord};
use emoseq::gradcore::{bce_with_logits, Graph, Tensor};
use emoseq::io;
use emoseq::model::Param;
use emoseq::objectives::{ccc, loss_au, loss_expr, loss_va};
use emoseq::segmentation::{merge_predictions, split, SegmentationConfig};
use emoseq::trainer::{adamw_step, lr_schedule, OptimConfig, OptimState};
use proptest::prelude::*;
use std::path::Path;

fn window_stride() -> impl Strategy<Value = (usize, usize)> {
    (1usize..40).prop_flat_map(|w| (Just(w), 1..=w))
}

fn va_video(n: usize, seed: u64) -> VideoRecord {
    let values: Vec<f64> = (0..2 * n)
        .map(|i| ((i as u64 * 2654435761 + seed) % 2001) as f64 / 1000.0 - 1.0)
        .collect();
    let labels = FrameLabels::new(TaskKind::Va, values, vec![true; n]).unwrap();
    VideoRecord::new("v", Tensor::zeros(&[n, 1]), labels).unwrap()
}

fn label_outputs(segs: &[emoseq::datamodel::Segment]) -> Vec<Tensor> {
    segs.iter()
        .map(|s| Tensor::new(&[s.window(), 2], s.labels.values().to_vec()).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segments_cover_every_frame(n in 1usize..2000, (w, s) in window_stride()) {
        let cfg = SegmentationConfig::new(w, s).unwrap();
        let segs = split(&va_video(n, 1), &cfg).unwrap();
        prop_assert!(segs.len() <= n / s + 1);
        let mut covered = vec![false; n];
        for sg in &segs {
            prop_assert_eq!(sg.window(), w);
            let first = sg.start_frame - 1;
            covered[first..first + sg.real_len()].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn merge_ignores_part_order(n in 1usize..300, (w, s) in window_stride(), rot in 0usize..50) {
        let cfg = SegmentationConfig::new(w, s).unwrap();
        let video = va_video(n, 7);
        let segs = split(&video, &cfg).unwrap();
        let outs: Vec<Tensor> = segs
            .iter()
            .enumerate()
            .map(|(k, sg)| Tensor::from_fn(&[sg.window(), 2], |i| ((i * 31 + k * 17) % 97) as f64 / 97.0))
            .collect();
        let parts: Vec<_> = segs.iter().zip(&outs).collect();
        let mut shuffled = parts.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        prop_assert_eq!(merge_predictions(&parts).unwrap(), merge_predictions(&shuffled).unwrap());
    }

    #[test]
    fn split_then_merge_is_identity(n in 1usize..500, (w, s) in window_stride()) {
        let video = va_video(n, 3);
        let segs = split(&video, &SegmentationConfig::new(w, s).unwrap()).unwrap();
        let outs = label_outputs(&segs);
        let parts: Vec<_> = segs.iter().zip(&outs).collect();
        let merged = merge_predictions(&parts).unwrap();
        prop_assert_eq!(merged.data(), video.labels.values());
    }

    #[test]
    fn ccc_symmetric_and_bounded(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, any::<bool>()), 2..64)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mut mask: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        mask[0] = true;
        mask[1] = true;
        let a = ccc(&x, &y, &mask).unwrap();
        let b = ccc(&y, &x, &mask).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn losses_ignore_masked_rows(
        rows in prop::collection::vec((any::<bool>(), 0usize..8, -3.0f64..3.0), 3..24),
        junk in -50.0f64..50.0,
    ) {
        let n = rows.len();
        let mut mask: Vec<bool> = rows.iter().map(|r| r.0).collect();
        mask[0] = true;
        mask[1] = true;
        let base = Tensor::from_fn(&[n, 12], |i| rows[i / 12].2 + (i % 12) as f64 * 0.1);
        let mut dirty = base.clone();
        for (i, v) in dirty.data_mut().iter_mut().enumerate() {
            if !mask[i / 12] {
                *v = junk;
            }
        }
        let slice2 = |t: &Tensor| Tensor::from_fn(&[n, 2], |i| t.data()[(i / 2) * 12 + i % 2].tanh());
        let slice8 = |t: &Tensor| Tensor::from_fn(&[n, 8], |i| t.data()[(i / 8) * 12 + i % 8]);
        let classes: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let target_va = Tensor::from_fn(&[n, 2], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        let target_au = Tensor::from_fn(&[n, 12], |i| ((i * 5) % 3 == 0) as u8 as f64);
        let eval = |logits: &Tensor| {
            let mut g = Graph::new();
            let p = g.constant(slice2(logits));
            let va = loss_va(&mut g, p, &target_va, &mask).unwrap();
            let e = g.constant(slice8(logits));
            let ex = loss_expr(&mut g, e, &classes, &mask).unwrap();
            let a = g.constant(logits.clone());
            let au = loss_au(&mut g, a, &target_au, &mask).unwrap();
            [g.value(va).item().unwrap(), g.value(ex).item().unwrap(), g.value(au).item().unwrap()]
        };
        prop_assert_eq!(eval(&base), eval(&dirty));
    }

    #[test]
    fn stable_bce_matches_naive(x in -15.0f64..15.0, y in 0.0f64..=1.0) {
        let p = 1.0 / (1.0 + (-x).exp());
        let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let stable = bce_with_logits(x, y);
        prop_assert!((stable - naive).abs() <= 1e-8 * naive.abs().max(1.0), "{stable} vs {naive}");
    }

    #[test]
    fn zero_gradient_contracts_exactly(
        theta in -100.0f64..100.0,
        lr in 0.0f64..0.5,
        wd in 0.0f64..0.5,
        steps in 1usize..20,
    ) {
        let mut p = vec![Param { name: "w".into(), value: Tensor::full(&[1], theta) }];
        let mut state = OptimState::new(&p);
        let cfg = OptimConfig { weight_decay: wd, ..OptimConfig::default() };
        let mut expected = theta;
        for _ in 0..steps {
            adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut state, lr, &cfg).unwrap();
            expected *= 1.0 - lr * wd;
        }
        prop_assert_eq!(p[0].value.data()[0], expected);
        prop_assert_eq!(state.step, steps as u64);
    }

    #[test]
    fn zero_lr_leaves_parameters(
        values in prop::collection::vec(-5.0f64..5.0, 1..16),
        grads in prop::collection::vec(-5.0f64..5.0, 16),
    ) {
        let n = values.len();
        let mut p = vec![Param { name: "w".into(), value: Tensor::new(&[n], values.clone()).unwrap() }];
        let mut state = OptimState::new(&p);
        let g = Tensor::new(&[n], grads[..n].to_vec()).unwrap();
        let cfg = OptimConfig { weight_decay: 0.3, ..OptimConfig::default() };
        for _ in 0..5 {
            adamw_step(&mut p, std::slice::from_ref(&g), &mut state, 0.0, &cfg).unwrap();
        }
        prop_assert_eq!(p[0].value.data(), values.as_slice());
    }

    #[test]
    fn schedule_bounded(total in 2usize..5000, warm_frac in 0.0f64..0.99, base in 1e-6f64..1.0) {
        let warmup = ((total as f64 * warm_frac) as usize).min(total - 1);
        for step in 0..total {
            let lr = lr_schedule(step, total, warmup, base);
            prop_assert!(lr >= 0.0 && lr <= base);
        }
    }

    #[test]
    fn feature_files_roundtrip(n in 0usize..40, d in 1usize..9, seed in any::<u32>()) {
        let t = Tensor::from_fn(&[n, d], |i| f64::from(((i as u32).wrapping_mul(seed) % 10_007) as f32 / 97.0 - 50.0));
        let bytes = io::encode_features(&t).unwrap();
        prop_assert_eq!(io::decode_features(&bytes, Path::new("p")).unwrap(), t);
        if !bytes.is_empty() && n > 0 {
            prop_assert!(io::decode_features(&bytes[..bytes.len() - 4], Path::new("p")).is_err());
        }
    }
}

#[test]
fn batch_loss_gradient_is_mean_of_sample_gradients() {
    let n = 6;
    let logits = Tensor::from_fn(&[n, 8], |i| ((i * 13) % 17) as f64 / 5.0 - 1.5);
    let classes: Vec<usize> = (0..n).map(|i| (i * 3) % 8).collect();
    let grad_of = |mask: &[bool]| {
        let mut g = Graph::new();
        let x = g.leaf(logits.clone(), true);
        let l = loss_expr(&mut g, x, &classes, mask).unwrap();
        g.backward(l).unwrap();
        g.grad(x).unwrap().clone()
    };
    let batch = grad_of(&[true; 6]);
    let mut mean = vec![0.0; n * 8];
    for i in 0..n {
        let mask: Vec<bool> = (0..n).map(|j| j == i).collect();
        for (m, v) in mean.iter_mut().zip(grad_of(&mask).data()) {
            *m += v / n as f64;
        }
    }
    for (a, b) in batch.data().iter().zip(&mean) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn stable_bce_at_extreme_logits() {
    assert_eq!(bce_with_logits(1e4, 1.0), 0.0);
    assert_eq!(bce_with_logits(-1e4, 0.0), 0.0);
    assert_eq!(bce_with_logits(1e4, 0.0), 1e4);
    assert_eq!(bce_with_logits(-1e4, 1.0), 1e4);
}
