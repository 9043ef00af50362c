//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use emoseq::datamodel::{FrameLabels, TaskKind, VideoRecord};
use emoseq::gradcheck;
use emoseq::gradcore::{Graph, Tensor};
use emoseq::io::{self, generate_synthetic};
use emoseq::model::{EncoderConfig, HeadConfig, ModelConfig, Param, PipelineModel, TcnConfig};
use emoseq::objectives::{ccc, loss_au, loss_expr, loss_va, CccAccumulator};
use emoseq::segmentation::{merge_predictions, split, SegmentationConfig};
use emoseq::trainer::{
    adamw_step, evaluate, lr_schedule, split_fold, OptimConfig, OptimState, TrainOptions, Trainer,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = Box<dyn FnMut(&mut Option<f64>) -> Outcome>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

// Criterion 1.
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_suite().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.clone())
        .collect();
    ensure!(failed.is_empty(), "checks above 1e-4: {failed:?}");
    ensure!(secs < 60.0, "suite took {secs:.1}s");
    Ok(format!(
        "{} checks, worst {} at {:.2e}, {secs:.1}s",
        results.len(),
        worst.name,
        worst.max_rel_error
    ))
}

// Criterion 2.
fn loss_identities() -> Outcome {
    let err = |e: emoseq::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 32;
    let target = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-1.0..1.0));
    let mask = vec![true; n];
    let mut g = Graph::new();
    let p = g.constant(target.clone());
    let l = loss_va(&mut g, p, &target, &mask).map_err(err)?;
    let va = g.value(l).item().map_err(err)?;
    ensure!(va.abs() <= 1e-10, "loss_va(pred=target) = {va:e}");

    let mut g = Graph::new();
    let logits = g.constant(Tensor::full(&[n, 8], 0.37));
    let classes: Vec<usize> = (0..n).map(|i| i % 8).collect();
    let l = loss_expr(&mut g, logits, &classes, &mask).map_err(err)?;
    let expr = g.value(l).item().map_err(err)?;
    ensure!(
        (expr - 8f64.ln()).abs() <= 1e-9,
        "loss_expr(uniform) = {expr}"
    );

    let y = Tensor::from_fn(&[n, 12], |i| (i % 2) as f64);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[n, 12]));
    let l = loss_au(&mut g, x, &y, &mask).map_err(err)?;
    let au = g.value(l).item().map_err(err)?;
    ensure!((au - 2f64.ln()).abs() <= 1e-9, "loss_au(0) = {au}");

    let big = Tensor::from_fn(&[n, 12], |i| if i % 3 == 0 { 1e4 } else { -1e4 });
    let mut g = Graph::new();
    let x = g.leaf(big, true);
    let l = loss_au(&mut g, x, &y, &mask).map_err(err)?;
    let extreme = g.value(l).item().map_err(err)?;
    g.backward(l).map_err(err)?;
    ensure!(extreme.is_finite(), "loss_au at |x| = 1e4 is {extreme}");
    ensure!(
        g.grad(x).unwrap().all_finite(),
        "gradient at |x| = 1e4 not finite"
    );
    Ok(format!(
        "va {va:.1e}, expr {expr:.9}, au {au:.9}, au(|x|=1e4) {extreme:.1}"
    ))
}

/// Direct two-pass population formula.
fn ccc_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    2.0 * cov / (vx + vy + (mx - my).powi(2))
}

// Criterion 3.
fn ccc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 1000 {
        let n = rng.gen_range(2..=64);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.6 * x[i] + rng.gen_range(-0.8..0.8))
            .collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            (0..n).filter(|&i| mask[i]).map(|i| (x[i], y[i])).unzip();
        if xs.len() < 2 {
            continue;
        }
        let streamed = ccc(&x, &y, &mask).map_err(|e| e.to_string())?;
        worst = worst.max((streamed - ccc_two_pass(&xs, &ys)).abs());
        cases += 1;
    }
    ensure!(worst <= 1e-10, "max deviation {worst:e}");
    let mut acc = CccAccumulator::default();
    for (a, b) in [(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)] {
        acc.push(a, b);
    }
    let anti = acc.value().map_err(|e| e.to_string())?;
    ensure!(anti == -1.0, "CCC([1,2,3],[3,2,1]) = {anti:?}");
    Ok(format!(
        "1000 pairs, max |streaming - two-pass| = {worst:.1e}; anti-correlated = -1"
    ))
}

/// Frames covered by brute force: every window start k·s that still lands
/// on a real frame.
fn brute_force_cover(n: usize, w: usize, s: usize) -> (usize, Vec<usize>) {
    let mut cover = vec![0; n];
    let mut count = 0;
    let mut start = 0;
    while start < n {
        count += 1;
        for f in start..(start + w).min(n) {
            cover[f] += 1;
        }
        start += s;
    }
    (count, cover)
}

// Criterion 4.
fn segmentation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut combos = 0;
    for n in 1..=50usize {
        for w in 1..=10usize {
            for s in 1..=w {
                let cfg = SegmentationConfig::new(w, s).map_err(|e| e.to_string())?;
                let values: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.85)).collect();
                let labels = FrameLabels::new(TaskKind::Va, values, valid).unwrap();
                let video = VideoRecord::new("v", Tensor::zeros(&[n, 1]), labels.clone()).unwrap();
                let segs = split(&video, &cfg).map_err(|e| e.to_string())?;
                let (count, cover) = brute_force_cover(n, w, s);
                ensure!(
                    segs.len() == count,
                    "n={n} w={w} s={s}: {} segments, oracle {count}",
                    segs.len()
                );
                ensure!(
                    segs.len() <= n / s + 1,
                    "n={n} w={w} s={s}: count above ⌊n/s⌋+1"
                );
                let mut mine = vec![0; n];
                for sg in &segs {
                    ensure!(sg.window() == w, "segment length {} != {w}", sg.window());
                    let first = sg.start_frame - 1;
                    for f in first..first + sg.real_len() {
                        mine[f] += 1;
                    }
                }
                ensure!(
                    mine == cover,
                    "n={n} w={w} s={s}: coverage differs from oracle"
                );
                ensure!(
                    cover.iter().all(|&c| c > 0),
                    "n={n} w={w} s={s}: uncovered frame"
                );
                let outs: Vec<Tensor> = segs
                    .iter()
                    .map(|sg| Tensor::new(&[w, 2], sg.labels.values().to_vec()).unwrap())
                    .collect();
                let parts: Vec<_> = segs.iter().zip(&outs).collect();
                let merged = merge_predictions(&parts).map_err(|e| e.to_string())?;
                for f in (0..n).filter(|&f| labels.valid()[f]) {
                    ensure!(
                        merged.row(f) == labels.row(f),
                        "n={n} w={w} s={s}: merge changed frame {f}"
                    );
                }
                combos += 1;
            }
        }
    }
    Ok(format!(
        "{combos} (n, w, s) combinations agree with the enumerator"
    ))
}

const SYNTH_SEED: u64 = 7;

fn reduced_config(task: TaskKind) -> ModelConfig {
    ModelConfig {
        feature_dim: 32,
        tcn: TcnConfig {
            channels: 64,
            ..TcnConfig::default()
        },
        encoder: EncoderConfig {
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
        },
        head: HeadConfig { hidden_dim: 64 },
        dropout: 0.1,
        task,
        ..ModelConfig::default()
    }
}

fn overfit_epochs(task: TaskKind) -> usize {
    match task {
        TaskKind::Va => 10,
        TaskKind::Au => 20,
        TaskKind::Expr => 30,
    }
}

fn overfit_options(task: TaskKind) -> TrainOptions {
    TrainOptions {
        optim: OptimConfig {
            lr: 2e-3,
            batch_size: 8,
            epochs: Some(overfit_epochs(task)),
            seed: 1,
            ..OptimConfig::default()
        },
        segmentation: SegmentationConfig::new(300, 200).unwrap(),
        output_dir: None,
        stop_after: None,
    }
}

struct Run {
    train_metric: f64,
    val_metric: f64,
    seconds: f64,
}

fn fit(config: ModelConfig, train: &[VideoRecord], val: &[VideoRecord]) -> Result<Run, String> {
    let task = config.task;
    let options = overfit_options(task);
    let seg = options.segmentation;
    let start = Instant::now();
    let model = PipelineModel::init(config, 1).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(model, train, val.to_vec(), options).map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let last = t.model().clone();
    let train_metric = evaluate(&last, train, &seg)
        .map_err(|e| e.to_string())?
        .headline();
    let val_metric = evaluate(&last, val, &seg)
        .map_err(|e| e.to_string())?
        .headline();
    Ok(Run {
        train_metric,
        val_metric,
        seconds,
    })
}

/// Permutes label rows across every frame of the training videos.
fn shuffled_labels(videos: &[VideoRecord], seed: u64) -> Vec<VideoRecord> {
    let task = videos[0].task();
    let width = task.label_width();
    let mut rows: Vec<Vec<f64>> = videos
        .iter()
        .flat_map(|v| (0..v.n_frames()).map(move |i| v.labels.row(i).to_vec()))
        .collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rows = rows.into_iter();
    videos
        .iter()
        .map(|v| {
            let n = v.n_frames();
            let values: Vec<f64> = rows.by_ref().take(n).flatten().collect();
            debug_assert_eq!(values.len(), n * width);
            let labels = FrameLabels::new(task, values, vec![true; n]).unwrap();
            VideoRecord::new(v.video_id.clone(), v.features.clone(), labels).unwrap()
        })
        .collect()
}

fn synthetic_split(task: TaskKind) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    let data = generate_synthetic(task, 20, 600, 32, SYNTH_SEED).unwrap();
    split_fold(data, 0)
}

// Criterion 5. Returns the full VA validation metric for reuse by 8.
fn synthetic_overfit(va_val: &mut Option<f64>) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (task, floor) in [
        (TaskKind::Va, 0.90),
        (TaskKind::Expr, 0.90),
        (TaskKind::Au, 0.85),
    ] {
        let (train, val) = synthetic_split(task);
        let full = fit(reduced_config(task), &train, &val)?;
        let control = fit(reduced_config(task), &shuffled_labels(&train, 11), &val)?;
        if task == TaskKind::Va {
            *va_val = Some(full.val_metric);
        }
        let gap = full.val_metric - control.val_metric;
        lines.push(format!(
            "{task}: train {:.4} (≥ {floor}), val {:.4} vs shuffled {:.4} (gap {gap:.3}), {} epochs {:.0}s",
            full.train_metric,
            full.val_metric,
            control.val_metric,
            overfit_epochs(task),
            full.seconds
        ));
        if full.train_metric < floor {
            failures.push(format!(
                "{task} train metric {:.4} < {floor}",
                full.train_metric
            ));
        }
        if gap < 0.3 {
            failures.push(format!("{task} gap over shuffled control {gap:.3} < 0.3"));
        }
        if full.seconds >= 900.0 {
            failures.push(format!("{task} took {:.0}s", full.seconds));
        }
    }
    ensure!(
        failures.is_empty(),
        "{}; {}",
        failures.join("; "),
        lines.join(" | ")
    );
    Ok(lines.join(" | "))
}

// Criterion 6.
fn optimizer_truth() -> Outcome {
    let err = |e: emoseq::Error| e.to_string();
    let one = |v: f64| {
        vec![Param {
            name: "theta".into(),
            value: Tensor::full(&[1], v),
        }]
    };
    let cfg = |wd: f64| OptimConfig {
        weight_decay: wd,
        ..OptimConfig::default()
    };
    let g1 = [Tensor::full(&[1], 1.0)];
    let mut p = one(1.0);
    let mut s = OptimState::new(&p);
    adamw_step(&mut p, &g1, &mut s, 0.1, &cfg(0.0)).map_err(err)?;
    let a = p[0].value.data()[0];
    ensure!((a - 0.9).abs() <= 1e-6, "wd 0: θ = {a}");
    let mut p = one(1.0);
    let mut s = OptimState::new(&p);
    adamw_step(&mut p, &g1, &mut s, 0.1, &cfg(0.01)).map_err(err)?;
    let b = p[0].value.data()[0];
    ensure!((b - 0.899).abs() <= 1e-6, "wd 0.01: θ = {b}");

    let (lr, wd) = (0.05, 0.2);
    let mut p = one(-2.5);
    let mut s = OptimState::new(&p);
    let mut expected = -2.5;
    for step in 0..25 {
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut s, lr, &cfg(wd)).map_err(err)?;
        expected *= 1.0 - lr * wd;
        ensure!(
            p[0].value.data()[0] == expected,
            "zero-gradient step {step} is not exact contraction"
        );
    }

    let (t, w, base) = (1010, 10, 3e-5);
    let at_w = lr_schedule(w, t, w, base);
    ensure!(at_w == base, "lr at warmup end {at_w:e}");
    let mid = lr_schedule(w + (t - w) / 2, t, w, base);
    ensure!(
        (mid - base / 2.0).abs() <= 1e-12,
        "lr at cosine midpoint {mid:e}"
    );
    Ok(format!(
        "θ {a:.8} / {b:.8}, 25 exact contractions, warmup end {at_w:e}, midpoint {mid:e}"
    ))
}

fn write_run_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"task = "va"
fold = 0
seed = 5
[paths]
features = "{d}/data/features"
annotations = "{d}/data/annotations"
[segmentation]
window = 40
stride = 20
[model]
dropout = 0.2
[model.tcn]
channels = 16
dilations = [1, 2]
num_blocks = 1
[model.encoder]
d_model = 16
num_layers = 1
num_heads = 2
ff_dim = 32
[model.head]
hidden_dim = 16
[optim]
lr = 0.002
batch_size = 4
epochs = 5
"#,
        d = dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn emoseq(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_emoseq"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "emoseq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

// Criterion 7.
fn determinism_and_resume() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    emoseq(&[
        "synth",
        "--task",
        "va",
        "--videos",
        "6",
        "--frames",
        "120",
        "--dim",
        "8",
        "--seed",
        "3",
        "--out",
        &s(&dir.join("data")),
    ])?;
    let cfg = s(&write_run_config(dir));
    let run = |name: &str, extra: &[&str]| -> Result<(), String> {
        let out = s(&dir.join(name));
        let mut args = vec!["train", "--config", &cfg, "--output", &out];
        args.extend_from_slice(extra);
        emoseq(&args)
    };
    run("a", &[])?;
    run("b", &[])?;
    run("c", &["--stop-after", "2"])?;
    run("c", &["--resume"])?;
    let read = |name: &str, file: &str| fs::read(dir.join(name).join(file)).unwrap();
    let history = read("a", "history.log");
    ensure!(
        String::from_utf8_lossy(&history).lines().count() == 5,
        "history has wrong length"
    );
    ensure!(
        history == read("b", "history.log"),
        "two runs produced different histories"
    );
    ensure!(
        read("a", "last.ckpt") == read("b", "last.ckpt"),
        "two runs produced different checkpoints"
    );
    ensure!(
        history == read("c", "history.log"),
        "resumed history differs from uninterrupted run"
    );
    ensure!(
        read("a", "last.ckpt") == read("c", "last.ckpt"),
        "resumed final state differs"
    );
    ensure!(
        read("a", "best.ckpt") == read("c", "best.ckpt"),
        "resumed best checkpoint differs"
    );

    // Library path: save/load/save is byte-stable mid-run.
    let data = generate_synthetic(TaskKind::Va, 4, 60, 4, 9).unwrap();
    let (train, val) = split_fold(data, 0);
    let opts = TrainOptions {
        optim: OptimConfig {
            lr: 1e-3,
            batch_size: 2,
            epochs: Some(3),
            ..OptimConfig::default()
        },
        segmentation: SegmentationConfig::new(16, 8).unwrap(),
        output_dir: None,
        stop_after: None,
    };
    let model = PipelineModel::init(gradcheck::toy_config(TaskKind::Va), 2).unwrap();
    let mut t = Trainer::new(model, &train, val, opts).map_err(|e| e.to_string())?;
    t.run_epoch().map_err(|e| e.to_string())?;
    let bytes = io::encode_checkpoint(&t.checkpoint()).unwrap();
    let again =
        io::encode_checkpoint(&io::decode_checkpoint(&bytes, Path::new("mem")).unwrap()).unwrap();
    ensure!(bytes == again, "save→load→save not byte-identical");
    Ok(
        "two CLI runs identical; stop-after-2 + resume matches the uninterrupted run byte for byte"
            .into(),
    )
}

// Criterion 8.
fn ablation(full_val: Option<f64>) -> Outcome {
    let task = TaskKind::Va;
    let (train, val) = synthetic_split(task);
    let full = match full_val {
        Some(v) => v,
        None => fit(reduced_config(task), &train, &val)?.val_metric,
    };
    let no_tcn = fit(
        ModelConfig {
            use_tcn: false,
            ..reduced_config(task)
        },
        &train,
        &val,
    )?
    .val_metric;
    let no_encoder = fit(
        ModelConfig {
            use_encoder: false,
            ..reduced_config(task)
        },
        &train,
        &val,
    )?
    .val_metric;
    let line = format!("va val CCC full {full:.4}, no-tcn {no_tcn:.4}, no-encoder {no_encoder:.4}");
    ensure!(full >= no_tcn && full >= no_encoder, "{line}");
    Ok(line)
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut va_val = None;
    let mut failed = 0;
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "gradient fidelity", Box::new(|_| gradient_fidelity())),
        (2, "loss identities", Box::new(|_| loss_identities())),
        (3, "CCC oracle", Box::new(|_| ccc_oracle())),
        (
            4,
            "segmentation oracle",
            Box::new(|_| segmentation_oracle()),
        ),
        (5, "synthetic overfit", Box::new(synthetic_overfit)),
        (6, "optimizer unit truth", Box::new(|_| optimizer_truth())),
        (
            7,
            "determinism and resume",
            Box::new(|_| determinism_and_resume()),
        ),
        (8, "ablation ordering", Box::new(|v| ablation(*v))),
    ];
    for (id, name, mut f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(&mut va_val)))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
