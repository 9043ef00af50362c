//! AdamW with a warmup-then-cosine schedule, the epoch loop, evaluation and
//! checkpoint hooks.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{check_dataset, Segment, VideoRecord};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor};
use crate::io::{self, Checkpoint};
use crate::model::{Param, PipelineModel};
use crate::objectives::{self, EvalReport};
use crate::segmentation::{self, SegmentationConfig};

pub const NUM_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Required for training; there is no sensible universal default.
    pub epochs: Option<usize>,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: None,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("lr must be a finite value ≥ 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay ≥ 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        match self.epochs {
            None => bad("epochs must be set"),
            Some(e) if e <= self.warmup_epochs => bad("epochs must exceed warmup_epochs"),
            Some(_) => Ok(()),
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(0)
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
///
/// Gradients are checked before anything is modified; a non-finite entry
/// aborts the step and leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adamw: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient shape mismatch for {}",
                p.name
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let theta = p.value.data_mut();
        for (((th, &gi), mi), vi) in theta
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th = *th * decay - lr * (m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay reaching 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps);
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic fold of a video, `0..NUM_FOLDS`.
pub fn fold_of(video_id: &str) -> usize {
    (fnv1a(video_id.as_bytes()) % NUM_FOLDS as u64) as usize
}

/// Splits into (train, validation) with `fold` held out.
pub fn split_fold(videos: Vec<VideoRecord>, fold: usize) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    videos
        .into_iter()
        .partition(|v| fold_of(&v.video_id) != fold)
}

/// Merged per-frame outputs (`n × output_dim`) for one video.
pub fn predict_video(
    model: &PipelineModel,
    video: &VideoRecord,
    seg: &SegmentationConfig,
) -> Result<Tensor> {
    let segments = segmentation::split(video, seg)?;
    let outs = segments
        .iter()
        .map(|s| model.predict_segment(s))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<_> = segments.iter().zip(&outs).collect();
    segmentation::merge_predictions(&parts)
}

/// Frame-level metrics of `model` over `videos`, computed on the
/// concatenation of all valid frames.
pub fn evaluate(
    model: &PipelineModel,
    videos: &[VideoRecord],
    seg: &SegmentationConfig,
) -> Result<EvalReport> {
    if let Some(v) = videos.iter().find(|v| v.task() != model.task()) {
        return Err(Error::TaskMismatch {
            checkpoint: model.task(),
            requested: v.task(),
        });
    }
    let preds = videos
        .iter()
        .map(|v| predict_video(model, v, seg))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = videos.iter().map(|v| &v.labels).collect();
    EvalReport::from_predictions(model.task(), &preds, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

/// Serializable snapshot of a ChaCha8 stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything beyond the parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub epochs_done: usize,
    pub rng: RngState,
    pub history: Vec<HistoryRecord>,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub optim: OptimConfig,
    pub segmentation: SegmentationConfig,
    /// Writes `last.ckpt`, `best.ckpt` and `history.log` here when set.
    pub output_dir: Option<PathBuf>,
    /// Return after this many epochs in the current call, leaving the run
    /// resumable.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the final ones without a
    /// validation split).
    pub best: PipelineModel,
    pub last: PipelineModel,
    pub history: Vec<HistoryRecord>,
}

pub struct Trainer {
    model: PipelineModel,
    optim: OptimState,
    rng: ChaCha8Rng,
    epochs_done: usize,
    history: Vec<HistoryRecord>,
    best: Option<(f64, usize, Vec<Tensor>)>,
    segments: Vec<Segment>,
    val: Vec<VideoRecord>,
    options: TrainOptions,
}

impl Trainer {
    pub fn new(
        model: PipelineModel,
        train: &[VideoRecord],
        val: Vec<VideoRecord>,
        options: TrainOptions,
    ) -> Result<Self> {
        let optim = OptimState::new(model.params());
        let rng = ChaCha8Rng::seed_from_u64(options.optim.seed);
        Self::assemble(model, optim, rng, 0, Vec::new(), None, train, val, options)
    }

    /// Continues the run saved in `ckpt` (which must carry optimizer state
    /// and progress).
    pub fn resume(
        ckpt: Checkpoint,
        train: &[VideoRecord],
        val: Vec<VideoRecord>,
        options: TrainOptions,
    ) -> Result<Self> {
        let (optim, progress) = match (ckpt.optimizer, ckpt.progress) {
            (Some(o), Some(p)) => (o, p),
            _ => {
                return Err(Error::Config(
                    "checkpoint has no training state to resume".into(),
                ))
            }
        };
        let best = match (
            progress.best_metric,
            progress.best_epoch,
            progress.best_params,
        ) {
            (Some(m), Some(e), Some(p)) => Some((m, e, p)),
            _ => None,
        };
        let rng = progress.rng.restore()?;
        Self::assemble(
            ckpt.model,
            optim,
            rng,
            progress.epochs_done,
            progress.history,
            best,
            train,
            val,
            options,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: PipelineModel,
        optim: OptimState,
        rng: ChaCha8Rng,
        epochs_done: usize,
        history: Vec<HistoryRecord>,
        best: Option<(f64, usize, Vec<Tensor>)>,
        train: &[VideoRecord],
        val: Vec<VideoRecord>,
        options: TrainOptions,
    ) -> Result<Self> {
        options.optim.validate()?;
        options.segmentation.validate()?;
        let (dim, task) = check_dataset(train)?;
        if task != model.task() {
            return Err(Error::TaskMismatch {
                checkpoint: model.task(),
                requested: task,
            });
        }
        if dim != model.config().feature_dim {
            return Err(Error::Config(format!(
                "dataset feature_dim {dim} but model expects {}",
                model.config().feature_dim
            )));
        }
        if !val.is_empty() {
            check_dataset(&val)?;
        }
        let mut segments = Vec::new();
        for v in train {
            segments.extend(segmentation::split(v, &options.segmentation)?);
        }
        Ok(Self {
            model,
            optim,
            rng,
            epochs_done,
            history,
            best,
            segments,
            val,
            options,
        })
    }

    pub fn model(&self) -> &PipelineModel {
        &self.model
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.segments.len().div_ceil(self.options.optim.batch_size)
    }

    /// Runs the remaining epochs (or `stop_after` of them).
    pub fn run(&mut self) -> Result<()> {
        let target = self.options.optim.epochs();
        let limit = self
            .options
            .stop_after
            .map_or(target, |n| (self.epochs_done + n).min(target));
        while self.epochs_done < limit {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<HistoryRecord> {
        let cfg = self.options.optim.clone();
        let spe = self.steps_per_epoch();
        let total = cfg.epochs() * spe;
        let warmup = cfg.warmup_epochs * spe;
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        let mut lr = 0.0;
        let segments = std::mem::take(&mut self.segments);
        let mut outcome = Ok(());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = self.epochs_done * spe + b;
            lr = lr_schedule(step, total, warmup, cfg.lr);
            let batch: Vec<&Segment> = chunk.iter().map(|&i| &segments[i]).collect();
            match self.step(&batch, lr) {
                Ok(Some(loss)) => {
                    loss_sum += loss;
                    loss_batches += 1;
                }
                Ok(None) => {}
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        self.segments = segments;
        outcome?;
        self.epochs_done += 1;
        let val_metric = if self.val.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, &self.val, &self.options.segmentation)?.headline())
        };
        let record = HistoryRecord {
            epoch: self.epochs_done,
            lr,
            train_loss: if loss_batches > 0 {
                loss_sum / loss_batches as f64
            } else {
                f64::NAN
            },
            val_metric,
        };
        self.history.push(record.clone());
        if let Some(m) = val_metric {
            if self.best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                let params = self
                    .model
                    .params()
                    .iter()
                    .map(|p| p.value.clone())
                    .collect();
                self.best = Some((m, self.epochs_done, params));
                self.save_best()?;
            }
        }
        self.save_progress()?;
        Ok(record)
    }

    /// Forward, loss, backward and one optimizer update. Returns `None` when
    /// the batch holds too few labelled frames for the task loss.
    fn step(&mut self, batch: &[&Segment], lr: f64) -> Result<Option<f64>> {
        let task = self.model.task();
        let mask: Vec<bool> = batch.iter().flat_map(|s| s.loss_mask()).collect();
        let needed = if task == crate::datamodel::TaskKind::Va {
            2
        } else {
            1
        };
        if mask.iter().filter(|&&m| m).count() < needed {
            return Ok(None);
        }
        let labels: Vec<f64> = batch
            .iter()
            .flat_map(|s| s.labels.values().iter().copied())
            .collect();
        let mut g = Graph::new();
        let ids = self.model.bind(&mut g);
        let out = self
            .model
            .forward(&mut g, &ids, batch, Some(&mut self.rng))?;
        let rows = mask.len();
        let flat = g.reshape(out, &[rows, task.output_dim()])?;
        let loss = objectives::task_loss(&mut g, task, flat, &labels, &mask)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {value} in epoch {}",
                self.epochs_done + 1
            )));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = ids
            .iter()
            .zip(self.model.params())
            .map(|(&id, p)| {
                g.take_grad(id)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        adamw_step(
            self.model.params_mut(),
            &grads,
            &mut self.optim,
            lr,
            &self.options.optim,
        )?;
        Ok(Some(value))
    }

    pub fn progress(&self) -> Progress {
        Progress {
            epochs_done: self.epochs_done,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            best_metric: self.best.as_ref().map(|b| b.0),
            best_epoch: self.best.as_ref().map(|b| b.1),
            best_params: self.best.as_ref().map(|b| b.2.clone()),
        }
    }

    /// Resumable snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optim.clone()),
            progress: Some(self.progress()),
        }
    }

    fn best_model(&self) -> Result<PipelineModel> {
        match &self.best {
            Some((_, _, params)) => {
                let named = self
                    .model
                    .params()
                    .iter()
                    .zip(params)
                    .map(|(p, v)| Param {
                        name: p.name.clone(),
                        value: v.clone(),
                    })
                    .collect();
                PipelineModel::from_params(self.model.config().clone(), named)
            }
            None => Ok(self.model.clone()),
        }
    }

    fn save_best(&self) -> Result<()> {
        let Some(dir) = &self.options.output_dir else {
            return Ok(());
        };
        let ckpt = Checkpoint {
            model: self.best_model()?,
            optimizer: None,
            progress: None,
        };
        io::save_checkpoint(&dir.join(BEST_CHECKPOINT), &ckpt)
    }

    fn save_progress(&self) -> Result<()> {
        let Some(dir) = &self.options.output_dir else {
            return Ok(());
        };
        io::save_checkpoint(&dir.join(LAST_CHECKPOINT), &self.checkpoint())?;
        write_history(&dir.join(HISTORY_LOG), &self.history)
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        Ok(TrainOutcome {
            best: self.best_model()?,
            last: self.model,
            history: self.history,
        })
    }
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_LOG: &str = "history.log";

/// One JSON object per line: `epoch`, `lr`, `train_loss`, `val_metric`.
pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h).map_err(|e| Error::invalid(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a fresh run to completion.
pub fn train(
    model: PipelineModel,
    train: &[VideoRecord],
    val: Vec<VideoRecord>,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, train, val, options)?;
    t.run()?;
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Vec<Param> {
        vec![Param {
            name: "theta".into(),
            value: Tensor::full(&[1], value),
        }]
    }

    fn cfg(wd: f64) -> OptimConfig {
        OptimConfig {
            weight_decay: wd,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_hand_values() {
        let mut p = one(1.0);
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &[Tensor::full(&[1], 1.0)], &mut s, 0.1, &cfg(0.0)).unwrap();
        assert!((p[0].value.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.step, 1);

        let mut p = one(1.0);
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &[Tensor::full(&[1], 1.0)], &mut s, 0.1, &cfg(0.01)).unwrap();
        assert!((p[0].value.data()[0] - 0.899).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = one(0.75);
        let mut s = OptimState::new(&p);
        let c = cfg(0.0);
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut s, 0.1, &c).unwrap();
        assert_eq!(p[0].value.data()[0], 0.75);

        let c = cfg(0.05);
        let mut expected = 0.75;
        for _ in 0..10 {
            adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut s, 0.2, &c).unwrap();
            expected *= 1.0 - 0.2 * 0.05;
            assert_eq!(p[0].value.data()[0], expected);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = one(1.0);
        let mut s = OptimState::new(&p);
        let err = adamw_step(
            &mut p,
            &[Tensor::full(&[1], f64::NAN)],
            &mut s,
            0.1,
            &cfg(0.0),
        );
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(p[0].value.data()[0], 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let (t, w, base) = (110, 10, 3e-5);
        assert_eq!(lr_schedule(0, t, w, base), 0.0);
        assert!((lr_schedule(5, t, w, base) - base / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(w, t, w, base), base);
        assert!((lr_schedule(60, t, w, base) - base / 2.0).abs() < 1e-12);
        let last = lr_schedule(t - 1, t, w, base);
        let bound = base * (1.0 + (PI * (1.0 - 1.0 / (t - w) as f64)).cos()) / 2.0;
        assert!((last - bound).abs() < 1e-18);
        assert!(last < base * 1e-3);
        for s in 0..t {
            assert!(lr_schedule(s, t, w, base) >= 0.0);
        }
    }

    #[test]
    fn schedule_continuous_at_boundary() {
        let (t, w, base) = (10_000, 1000, 1.0);
        let before = lr_schedule(w - 1, t, w, base);
        let at = lr_schedule(w, t, w, base);
        let after = lr_schedule(w + 1, t, w, base);
        assert!((at - before).abs() <= 1.0 / w as f64 + 1e-12);
        assert!((at - after).abs() < 1e-6);
    }

    #[test]
    fn folds_are_stable() {
        assert_eq!(fold_of("vid000"), fold_of("vid000"));
        assert!(fold_of("x") < NUM_FOLDS);
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_err());
        let ok = OptimConfig {
            epochs: Some(3),
            ..OptimConfig::default()
        };
        assert!(ok.validate().is_ok());
        let warm = OptimConfig {
            epochs: Some(1),
            ..OptimConfig::default()
        };
        assert!(warm.validate().is_err());
    }

    #[test]
    fn rng_state_roundtrip() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        rng.next_u32();
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }
}
