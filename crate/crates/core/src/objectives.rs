//! Mask-aware task losses (differentiable, on a [`Graph`]) and evaluation
//! metrics (plain `f64`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameLabels, TaskKind, AU_NAMES, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, Graph, Tensor, TensorId};

/// CCC denominators below this are treated as degenerate (CCC := 0).
pub const CCC_DENOM_FLOOR: f64 = 1e-12;

/// Single-pass concordance correlation over paired samples.
///
/// Uses Welford-style co-moment updates; all statistics are population
/// (1/N) moments.
#[derive(Debug, Clone, Copy, Default)]
pub struct CccAccumulator {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    co: f64,
}

impl CccAccumulator {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let k = self.n as f64;
        let dx = x - self.mean_x;
        self.mean_x += dx / k;
        let dy = y - self.mean_y;
        self.mean_y += dy / k;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.co += dx * (y - self.mean_y);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn value(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::invalid(format!(
                "CCC needs at least 2 valid pairs, got {}",
                self.n
            )));
        }
        let k = self.n as f64;
        let cov = self.co / k;
        let gap = self.mean_x - self.mean_y;
        let denom = self.m2_x / k + self.m2_y / k + gap * gap;
        if denom < CCC_DENOM_FLOOR {
            return Ok(0.0);
        }
        Ok((2.0 * cov / denom).clamp(-1.0, 1.0))
    }
}

/// Concordance correlation of `x` and `y` over positions where `mask` is true.
pub fn ccc(x: &[f64], y: &[f64], mask: &[bool]) -> Result<f64> {
    if x.len() != y.len() || x.len() != mask.len() {
        return Err(Error::shape(format!(
            "ccc: lengths {}, {} and mask {}",
            x.len(),
            y.len(),
            mask.len()
        )));
    }
    let mut acc = CccAccumulator::default();
    for ((&a, &b), _) in x.iter().zip(y).zip(mask).filter(|(_, &m)| m) {
        acc.push(a, b);
    }
    acc.value()
}

fn count_valid(mask: &[bool], rows: usize, what: &str) -> Result<usize> {
    if mask.len() != rows {
        return Err(Error::shape(format!(
            "{what}: mask of {} for {rows} rows",
            mask.len()
        )));
    }
    Ok(mask.iter().filter(|&&m| m).count())
}

fn rows_cols(g: &Graph, id: TensorId, cols: usize, what: &str) -> Result<usize> {
    match *g.shape(id) {
        [n, c] if c == cols => Ok(n),
        ref s => Err(Error::shape(format!(
            "{what}: expected [N, {cols}], got {s:?}"
        ))),
    }
}

/// `1 − (CCC_valence + CCC_arousal) / 2` over the valid rows of a batch.
///
/// Gradients flow through the prediction mean, variance and covariance; the
/// target statistics are constants.
pub fn loss_va(g: &mut Graph, pred: TensorId, target: &Tensor, mask: &[bool]) -> Result<TensorId> {
    let n_rows = rows_cols(g, pred, 2, "loss_va")?;
    if target.shape() != [n_rows, 2] {
        return Err(Error::shape(format!(
            "loss_va: target {:?} for prediction [{n_rows}, 2]",
            target.shape()
        )));
    }
    let n = count_valid(mask, n_rows, "loss_va")?;
    if n < 2 {
        return Err(Error::invalid(format!(
            "loss_va needs ≥ 2 valid frames, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let weights = Tensor::from_fn(&[n_rows, 2], |i| f64::from(u8::from(mask[i / 2])));

    // target side, constant
    let mut my = [0.0; 2];
    for (i, &y) in target.data().iter().enumerate() {
        my[i % 2] += weights.data()[i] * y;
    }
    my.iter_mut().for_each(|m| *m *= inv_n);
    let dy = Tensor::from_fn(&[n_rows, 2], |i| {
        (target.data()[i] - my[i % 2]) * weights.data()[i]
    });
    let mut vy = [0.0; 2];
    for (i, &d) in dy.data().iter().enumerate() {
        vy[i % 2] += d * d * inv_n;
    }

    let m = g.constant(weights);
    let xm = g.mul(pred, m)?;
    let sx = g.sum_axis(xm, 0)?;
    let mx = g.scale(sx, inv_n);
    let centered = {
        let mxb = g.broadcast_to(mx, &[n_rows, 2])?;
        let c = g.sub(pred, mxb)?;
        g.mul(c, m)?
    };
    let sq = g.mul(centered, centered)?;
    let vx = g.sum_axis(sq, 0)?;
    let vx = g.scale(vx, inv_n);
    let dy = g.constant(dy);
    let prod = g.mul(centered, dy)?;
    let cov = g.sum_axis(prod, 0)?;
    let cov = g.scale(cov, inv_n);
    let my_t = g.constant(Tensor::new(&[2], my.to_vec())?);
    let gap = g.sub(mx, my_t)?;
    let gap2 = g.mul(gap, gap)?;
    let vy_t = g.constant(Tensor::new(&[2], vy.to_vec())?);
    let den = g.add(vx, vy_t)?;
    let den = g.add(den, gap2)?;
    let degenerate: Vec<bool> = g
        .value(den)
        .data()
        .iter()
        .map(|&d| d < CCC_DENOM_FLOOR)
        .collect();
    let guard = g.constant(Tensor::from_fn(&[2], |i| {
        f64::from(u8::from(degenerate[i]))
    }));
    let den = g.add(den, guard)?;
    let num = g.scale(cov, 2.0);
    let ccc = g.div(num, den)?;
    let ccc = g.masked_fill(ccc, &degenerate, 0.0)?;
    let total = g.sum(ccc);
    let half = g.scale(total, -0.5);
    Ok(g.add_scalar(half, 1.0))
}

/// Mean negative log softmax probability of the true class over valid rows.
pub fn loss_expr(
    g: &mut Graph,
    logits: TensorId,
    classes: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    let k = EXPR_CLASSES.len();
    let n_rows = rows_cols(g, logits, k, "loss_expr")?;
    if classes.len() != n_rows {
        return Err(Error::shape(format!(
            "loss_expr: {} targets for {n_rows} rows",
            classes.len()
        )));
    }
    let n = count_valid(mask, n_rows, "loss_expr")?;
    if n == 0 {
        return Err(Error::invalid("loss_expr: no valid frames"));
    }
    let mut pick = vec![0.0; n_rows * k];
    for (i, (&c, _)) in classes
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
    {
        if c >= k {
            return Err(Error::invalid(format!("expression class {c} out of range")));
        }
        pick[i * k + c] = 1.0;
    }
    let ls = g.log_softmax(logits, 1)?;
    let pick = g.constant(Tensor::new(&[n_rows, k], pick)?);
    let picked = g.mul(ls, pick)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Logit-space binary cross-entropy averaged over valid frame–unit pairs.
pub fn loss_au(
    g: &mut Graph,
    logits: TensorId,
    target: &Tensor,
    mask: &[bool],
) -> Result<TensorId> {
    let k = AU_NAMES.len();
    let n_rows = rows_cols(g, logits, k, "loss_au")?;
    if target.shape() != [n_rows, k] {
        return Err(Error::shape(format!(
            "loss_au: target {:?} for [{n_rows}, {k}] logits",
            target.shape()
        )));
    }
    let n = count_valid(mask, n_rows, "loss_au")?;
    if n == 0 {
        return Err(Error::invalid("loss_au: no valid frames"));
    }
    let weights: Vec<f64> = (0..n_rows * k)
        .map(|i| f64::from(u8::from(mask[i / k])))
        .collect();
    let s = g.bce_with_logits_sum(logits, target.data(), &weights)?;
    Ok(g.scale(s, 1.0 / (n * k) as f64))
}

/// Dispatches to the task's loss. `labels` holds `task.label_width()` values
/// per row, as in [`FrameLabels::values`].
pub fn task_loss(
    g: &mut Graph,
    task: TaskKind,
    pred: TensorId,
    labels: &[f64],
    mask: &[bool],
) -> Result<TensorId> {
    let rows = mask.len();
    if labels.len() != rows * task.label_width() {
        return Err(Error::shape(format!(
            "{} label values for {rows} rows of {task}",
            labels.len()
        )));
    }
    match task {
        TaskKind::Va => loss_va(g, pred, &Tensor::new(&[rows, 2], labels.to_vec())?, mask),
        TaskKind::Expr => {
            let classes: Vec<usize> = labels.iter().map(|&c| c as usize).collect();
            loss_expr(g, pred, &classes, mask)
        }
        TaskKind::Au => loss_au(
            g,
            pred,
            &Tensor::new(&[rows, AU_NAMES.len()], labels.to_vec())?,
            mask,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn summarize(counts: &[(usize, usize, usize)]) -> F1Scores {
    let per_class_f1: Vec<f64> = counts
        .iter()
        .map(|&(tp, fp, fn_)| f1(tp, fp, fn_))
        .collect();
    let macro_f1 = if per_class_f1.is_empty() {
        0.0
    } else {
        per_class_f1.iter().sum::<f64>() / per_class_f1.len() as f64
    };
    F1Scores {
        per_class_f1,
        macro_f1,
    }
}

/// Per-class and macro F1 for single-label predictions. A class with no
/// true positives, false positives or false negatives scores 0.
pub fn macro_f1_multiclass(
    pred: &[usize],
    target: &[usize],
    mask: &[bool],
    num_classes: usize,
) -> Result<F1Scores> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "macro_f1: prediction, target and mask lengths differ",
        ));
    }
    let mut counts = vec![(0, 0, 0); num_classes];
    for ((&p, &t), _) in pred.iter().zip(target).zip(mask).filter(|(_, &m)| m) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!(
                "class index out of range ({p}, {t})"
            )));
        }
        if p == t {
            counts[p].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[t].2 += 1;
        }
    }
    Ok(summarize(&counts))
}

/// Per-unit and macro F1 for multi-label predictions stored row-major
/// (`num_labels` per row).
pub fn macro_f1_multilabel(
    pred: &[bool],
    target: &[bool],
    mask: &[bool],
    num_labels: usize,
) -> Result<F1Scores> {
    if pred.len() != target.len() || pred.len() != mask.len() * num_labels {
        return Err(Error::shape(
            "macro_f1: prediction, target and mask lengths differ",
        ));
    }
    let mut counts = vec![(0, 0, 0); num_labels];
    for (row, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (j, c) in counts.iter_mut().enumerate() {
            let (p, t) = (pred[row * num_labels + j], target[row * num_labels + j]);
            match (p, t) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(summarize(&counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Va {
        ccc_valence: f64,
        ccc_arousal: f64,
        mean_ccc: f64,
    },
    Classification(F1Scores),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub valid_frames: usize,
    pub metrics: Metrics,
}

impl EvalReport {
    /// Frame-level metrics over the concatenation of every video's valid
    /// frames. `predictions[i]` is the merged `n × output_dim` model output
    /// for the video whose labels are `labels[i]`.
    pub fn from_predictions(
        task: TaskKind,
        predictions: &[Tensor],
        labels: &[&FrameLabels],
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(
                "one prediction matrix per label track expected",
            ));
        }
        let d = task.output_dim();
        for (p, l) in predictions.iter().zip(labels) {
            if p.shape() != [l.len(), d] || l.task() != task {
                return Err(Error::shape(format!(
                    "prediction {:?} does not match {} {task} label rows",
                    p.shape(),
                    l.len()
                )));
            }
        }
        let valid_frames = labels.iter().map(|l| l.valid_count()).sum();
        let metrics = match task {
            TaskKind::Va => {
                let mut acc = [CccAccumulator::default(); 2];
                for (p, l) in predictions.iter().zip(labels) {
                    for row in (0..l.len()).filter(|&r| l.valid()[r]) {
                        for (dim, a) in acc.iter_mut().enumerate() {
                            a.push(p.at(row, dim), l.row(row)[dim]);
                        }
                    }
                }
                let (v, a) = (acc[0].value()?, acc[1].value()?);
                Metrics::Va {
                    ccc_valence: v,
                    ccc_arousal: a,
                    mean_ccc: (v + a) / 2.0,
                }
            }
            TaskKind::Expr => {
                let (mut pred, mut target, mut mask) = (Vec::new(), Vec::new(), Vec::new());
                for (p, l) in predictions.iter().zip(labels) {
                    for row in 0..l.len() {
                        pred.push(argmax(p.row(row)));
                        target.push(l.class_at(row));
                        mask.push(l.valid()[row]);
                    }
                }
                Metrics::Classification(macro_f1_multiclass(&pred, &target, &mask, d)?)
            }
            TaskKind::Au => {
                let (mut pred, mut target, mut mask) = (Vec::new(), Vec::new(), Vec::new());
                for (p, l) in predictions.iter().zip(labels) {
                    for row in 0..l.len() {
                        pred.extend(p.row(row).iter().map(|&x| sigmoid(x) >= 0.5));
                        target.extend(l.row(row).iter().map(|&y| y == 1.0));
                        mask.push(l.valid()[row]);
                    }
                }
                Metrics::Classification(macro_f1_multilabel(&pred, &target, &mask, d)?)
            }
        };
        Ok(Self {
            task,
            valid_frames,
            metrics,
        })
    }

    /// Model-selection score: mean CCC for VA, macro F1 otherwise.
    pub fn headline(&self) -> f64 {
        match &self.metrics {
            Metrics::Va { mean_ccc, .. } => *mean_ccc,
            Metrics::Classification(f) => f.macro_f1,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task          {}", self.task);
        let _ = writeln!(s, "valid_frames  {}", self.valid_frames);
        match &self.metrics {
            Metrics::Va {
                ccc_valence,
                ccc_arousal,
                mean_ccc,
            } => {
                let _ = writeln!(s, "ccc_valence   {ccc_valence:.6}");
                let _ = writeln!(s, "ccc_arousal   {ccc_arousal:.6}");
                let _ = writeln!(s, "mean_ccc      {mean_ccc:.6}");
            }
            Metrics::Classification(f) => {
                let names: &[&str] = if self.task == TaskKind::Expr {
                    &EXPR_CLASSES
                } else {
                    &AU_NAMES
                };
                for (name, v) in names.iter().zip(&f.per_class_f1) {
                    let _ = writeln!(
                        s,
                        "f1[{name}]{:pad$}{v:.6}",
                        "",
                        pad = 10usize.saturating_sub(name.len())
                    );
                }
                let _ = writeln!(s, "macro_f1      {:.6}", f.macro_f1);
            }
        }
        s
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
