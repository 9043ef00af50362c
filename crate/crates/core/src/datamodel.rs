//! Domain types shared across the pipeline: tasks, per-frame labels with
//! validity masks, videos and fixed-length segments.
//!
//! Frame numbers exposed by these types are 1-based. Storage inside the
//! vectors is naturally 0-based; `frame - 1` is the row index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Expression class names in label-index order.
pub const EXPR_CLASSES: [&str; 8] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "neutral",
    "other",
];

/// Action units predicted by the AU head, in output-column order.
pub const AU_NAMES: [&str; 12] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Va,
    Expr,
    Au,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Va, TaskKind::Expr, TaskKind::Au];

    /// Number of model outputs per frame.
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Va => 2,
            TaskKind::Expr => EXPR_CLASSES.len(),
            TaskKind::Au => AU_NAMES.len(),
        }
    }

    /// Number of stored label values per frame (EXPR stores a class index).
    pub fn label_width(self) -> usize {
        match self {
            TaskKind::Va => 2,
            TaskKind::Expr => 1,
            TaskKind::Au => AU_NAMES.len(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Va => "va",
            TaskKind::Expr => "expr",
            TaskKind::Au => "au",
        }
    }
}

/// Free-function form of [`TaskKind::output_dim`].
pub fn output_dim(task: TaskKind) -> usize {
    task.output_dim()
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "va" => Ok(TaskKind::Va),
            "expr" => Ok(TaskKind::Expr),
            "au" => Ok(TaskKind::Au),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected va, expr or au)"
            ))),
        }
    }
}

/// Per-frame labels for a single task.
///
/// `values` is row-major with `task.label_width()` entries per frame. Invalid
/// frames carry zeros in `values`; only `valid` decides whether a frame
/// participates in losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    task: TaskKind,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl FrameLabels {
    pub fn new(task: TaskKind, mut values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let width = task.label_width();
        if values.len() != valid.len() * width {
            return Err(Error::shape(format!(
                "{task} labels: {} values for {} frames (width {width})",
                values.len(),
                valid.len()
            )));
        }
        for (frame, (row, &ok)) in values.chunks_mut(width).zip(&valid).enumerate() {
            if !ok {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            check_label_row(task, row)
                .map_err(|msg| Error::invalid(format!("frame {}: {msg}", frame + 1)))?;
        }
        Ok(Self {
            task,
            values,
            valid,
        })
    }

    /// Labels for `n` frames, all invalid.
    pub fn empty(task: TaskKind, n: usize) -> Self {
        Self {
            task,
            values: vec![0.0; n * task.label_width()],
            valid: vec![false; n],
        }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Label row at 0-based position `row`.
    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.task.label_width();
        &self.values[row * w..(row + 1) * w]
    }

    /// Class index of an EXPR frame. Only meaningful for valid frames.
    pub fn class_at(&self, row: usize) -> usize {
        debug_assert_eq!(self.task, TaskKind::Expr);
        self.values[row] as usize
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Copy of rows `start..start + len`, padding past the end with invalid rows.
    pub(crate) fn window(&self, start: usize, len: usize) -> FrameLabels {
        let w = self.task.label_width();
        let mut out = FrameLabels::empty(self.task, len);
        let avail = self.len().saturating_sub(start).min(len);
        out.values[..avail * w].copy_from_slice(&self.values[start * w..(start + avail) * w]);
        out.valid[..avail].copy_from_slice(&self.valid[start..start + avail]);
        out
    }
}

fn check_label_row(task: TaskKind, row: &[f64]) -> std::result::Result<(), String> {
    match task {
        TaskKind::Va => {
            for &v in row {
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(format!("valence/arousal value {v} outside [-1, 1]"));
                }
            }
        }
        TaskKind::Expr => {
            let c = row[0];
            if c.fract() != 0.0 || !(0.0..EXPR_CLASSES.len() as f64).contains(&c) {
                return Err(format!("expression class {c} outside 0..=7"));
            }
        }
        TaskKind::Au => {
            if let Some(v) = row.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(format!("action unit indicator {v} is not 0 or 1"));
            }
        }
    }
    Ok(())
}

/// One video: per-frame features plus labels for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `n_frames × feature_dim`.
    pub features: Tensor,
    pub labels: FrameLabels,
}

impl VideoRecord {
    pub fn new(video_id: impl Into<String>, features: Tensor, labels: FrameLabels) -> Result<Self> {
        let video_id = video_id.into();
        if features.ndim() != 2 {
            return Err(Error::shape(format!(
                "video {video_id}: features must be 2-D, got {:?}",
                features.shape()
            )));
        }
        let n = features.shape()[0];
        if n == 0 {
            return Err(Error::invalid(format!("video {video_id} has no frames")));
        }
        if labels.len() != n {
            return Err(Error::shape(format!(
                "video {video_id}: {n} feature rows but {} label rows",
                labels.len()
            )));
        }
        Ok(Self {
            video_id,
            features,
            labels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn task(&self) -> TaskKind {
        self.labels.task()
    }
}

/// A fixed-length window cut from a video.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    /// 1-based segment ordinal.
    pub index: usize,
    /// 1-based first frame, `(index - 1) * stride + 1`.
    pub start_frame: usize,
    /// `window × feature_dim`; padded rows are zero.
    pub features: Tensor,
    /// `false` for padded positions past the video end.
    pub frame_valid: Vec<bool>,
    pub labels: FrameLabels,
}

impl Segment {
    pub fn window(&self) -> usize {
        self.frame_valid.len()
    }

    /// Number of real (unpadded) frames.
    pub fn real_len(&self) -> usize {
        self.frame_valid.iter().take_while(|&&v| v).count()
    }

    /// Frames that count toward losses: real and labelled.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.frame_valid
            .iter()
            .zip(self.labels.valid())
            .map(|(&a, &b)| a && b)
            .collect()
    }
}

/// Checks that every video shares one feature width and one task.
pub fn check_dataset(videos: &[VideoRecord]) -> Result<(usize, TaskKind)> {
    let first = videos
        .first()
        .ok_or_else(|| Error::invalid("dataset is empty"))?;
    let (dim, task) = (first.feature_dim(), first.task());
    for v in videos {
        if v.feature_dim() != dim {
            return Err(Error::shape(format!(
                "video {} has feature_dim {} but dataset uses {dim}",
                v.video_id,
                v.feature_dim()
            )));
        }
        if v.task() != task {
            return Err(Error::invalid(format!(
                "video {} labelled for {} in a {task} dataset",
                v.video_id,
                v.task()
            )));
        }
    }
    Ok((dim, task))
}
