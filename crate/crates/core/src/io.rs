//! Feature and annotation files, checkpoints and the synthetic dataset
//! generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameLabels, TaskKind, VideoRecord, AU_NAMES, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::model::{ModelConfig, Param, PipelineModel};
use crate::objectives::argmax;
use crate::trainer::{HistoryRecord, OptimState, Progress, RngState};

pub const FEATURE_MAGIC: &[u8; 5] = b"AFSQ1";
pub const FEATURE_EXT: &str = "afsq";
pub const ANNOTATION_EXT: &str = "txt";
pub const VA_SENTINEL: f64 = -5.0;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let &[n, dim] = features.shape() else {
        return Err(Error::shape(format!(
            "features must be 2-D, got {:?}",
            features.shape()
        )));
    };
    let to_u32 =
        |x: usize| u32::try_from(x).map_err(|_| Error::invalid(format!("size {x} exceeds u32")));
    let mut out = Vec::with_capacity(13 + 4 * n * dim);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&to_u32(dim)?.to_le_bytes());
    out.extend_from_slice(&to_u32(n)?.to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature container into an `n × dim` tensor.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 13 || &bytes[..5] != FEATURE_MAGIC {
        return Err(Error::data(
            path,
            None,
            "not an AFSQ1 feature file (bad magic)",
        ));
    }
    let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let payload = &bytes[13..];
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::data(path, None, "declared size overflows"))?;
    if payload.len() != expected {
        return Err(Error::data(
            path,
            None,
            format!(
                "header declares {n} frames × {dim} dims ({expected} bytes) but payload has {} bytes",
                payload.len()
            ),
        ));
    }
    if dim == 0 {
        return Err(Error::data(path, None, "feature_dim is 0"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::data(
            path,
            None,
            format!("non-finite value in frame {}", i / dim + 1),
        ));
    }
    Tensor::new(&[n, dim], data)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Option<T> {
    s.trim().parse().ok()
}

/// Parses one annotation line into a label row, or `None` for an invalid
/// frame.
fn parse_row(task: TaskKind, line: &str) -> std::result::Result<Option<Vec<f64>>, String> {
    match task {
        TaskKind::Va => {
            let parts: Vec<&str> = line.split(',').collect();
            let [v, a] = parts.as_slice() else {
                return Err(format!("expected `valence,arousal`, got `{line}`"));
            };
            let (Some(v), Some(a)) = (parse_num::<f64>(v), parse_num::<f64>(a)) else {
                return Err(format!("malformed number in `{line}`"));
            };
            if v == VA_SENTINEL || a == VA_SENTINEL {
                return Ok(None);
            }
            if !(-1.0..=1.0).contains(&v) || !(-1.0..=1.0).contains(&a) {
                return Err(format!("valence/arousal outside [-1, 1]: `{line}`"));
            }
            Ok(Some(vec![v, a]))
        }
        TaskKind::Expr => {
            let c: i64 = parse_num(line)
                .ok_or_else(|| format!("expected an integer class, got `{line}`"))?;
            match c {
                -1 => Ok(None),
                0..=7 => Ok(Some(vec![c as f64])),
                _ => Err(format!(
                    "class {c} out of range 0..{}",
                    EXPR_CLASSES.len() - 1
                )),
            }
        }
        TaskKind::Au => {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != AU_NAMES.len() {
                return Err(format!(
                    "expected {} AU values, got {}",
                    AU_NAMES.len(),
                    parts.len()
                ));
            }
            let mut row = Vec::with_capacity(parts.len());
            let mut missing = false;
            for p in parts {
                match parse_num::<i64>(p) {
                    Some(0) => row.push(0.0),
                    Some(1) => row.push(1.0),
                    Some(-1) => missing = true,
                    _ => return Err(format!("AU value `{}` not in {{0, 1, -1}}", p.trim())),
                }
            }
            Ok(if missing { None } else { Some(row) })
        }
    }
}

/// Parses annotation text. A first line that does not parse is taken as a
/// header; every later line must be a frame.
pub fn parse_annotations(text: &str, task: TaskKind, path: &Path) -> Result<FrameLabels> {
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    let mut values = Vec::new();
    let mut valid = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        match parse_row(task, line.trim()) {
            Ok(Some(row)) => {
                values.extend(row);
                valid.push(true);
            }
            Ok(None) => {
                values.extend(std::iter::repeat_n(0.0, task.label_width()));
                valid.push(false);
            }
            Err(_) if i == 0 => {}
            Err(msg) => return Err(Error::data(path, Some(i + 1), msg)),
        }
    }
    FrameLabels::new(task, values, valid).map_err(|e| Error::data(path, None, e.to_string()))
}

pub fn read_annotations(path: &Path, task: TaskKind) -> Result<FrameLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, task, path)
}

/// Annotation text for `labels`, invalid frames written as sentinels.
pub fn format_annotations(labels: &FrameLabels) -> String {
    let mut out = String::new();
    for i in 0..labels.len() {
        let ok = labels.valid()[i];
        let row = labels.row(i);
        match labels.task() {
            TaskKind::Va if ok => out.push_str(&format!("{},{}", row[0], row[1])),
            TaskKind::Va => out.push_str("-5,-5"),
            TaskKind::Expr if ok => out.push_str(&labels.class_at(i).to_string()),
            TaskKind::Expr => out.push_str("-1"),
            TaskKind::Au => {
                let cells: Vec<&str> = row
                    .iter()
                    .map(|&v| {
                        if !ok {
                            "-1"
                        } else if v > 0.5 {
                            "1"
                        } else {
                            "0"
                        }
                    })
                    .collect();
                out.push_str(&cells.join(","));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, labels: &FrameLabels) -> Result<()> {
    fs::write(path, format_annotations(labels)).map_err(|e| Error::io(path, e))
}

/// Prediction text in the annotation layout: VA values, EXPR argmax class,
/// AU `sigmoid(logit) ≥ 0.5` decisions.
pub fn format_predictions(task: TaskKind, outputs: &Tensor) -> String {
    let d = task.output_dim();
    let mut out = String::new();
    for row in outputs.data().chunks(d) {
        match task {
            TaskKind::Va => out.push_str(&format!("{},{}", row[0], row[1])),
            TaskKind::Expr => out.push_str(&argmax(row).to_string()),
            TaskKind::Au => {
                let cells: Vec<&str> = row
                    .iter()
                    .map(|&x| if x >= 0.0 { "1" } else { "0" })
                    .collect();
                out.push_str(&cells.join(","));
            }
        }
        out.push('\n');
    }
    out
}

pub fn load_video(
    feature_path: &Path,
    annotation_path: &Path,
    task: TaskKind,
) -> Result<VideoRecord> {
    let features = read_features(feature_path)?;
    let labels = read_annotations(annotation_path, task)?;
    if labels.len() != features.shape()[0] {
        return Err(Error::data(
            annotation_path,
            None,
            format!(
                "{} annotated frames but {} has {} frames",
                labels.len(),
                feature_path.display(),
                features.shape()[0]
            ),
        ));
    }
    let id = video_id(feature_path);
    VideoRecord::new(id, features, labels)
        .map_err(|e| Error::data(feature_path, None, e.to_string()))
}

fn video_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Feature files in `dir`, sorted by name.
pub fn list_feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == FEATURE_EXT) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Every `<id>.afsq` in `features_dir` paired with `<id>.txt` in
/// `annotations_dir`.
pub fn load_dataset(
    features_dir: &Path,
    annotations_dir: &Path,
    task: TaskKind,
) -> Result<Vec<VideoRecord>> {
    let files = list_feature_files(features_dir)?;
    if files.is_empty() {
        return Err(Error::data(
            features_dir,
            None,
            "no .afsq feature files found",
        ));
    }
    files
        .iter()
        .map(|f| {
            let ann = annotations_dir.join(format!("{}.{ANNOTATION_EXT}", video_id(f)));
            load_video(f, &ann, task)
        })
        .collect()
}

/// Writes features and annotations for each video into the two directories.
pub fn write_dataset(
    videos: &[VideoRecord],
    features_dir: &Path,
    annotations_dir: &Path,
) -> Result<()> {
    for dir in [features_dir, annotations_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for v in videos {
        write_features(
            &features_dir.join(format!("{}.{FEATURE_EXT}", v.video_id)),
            &v.features,
        )?;
        write_annotations(
            &annotations_dir.join(format!("{}.{ANNOTATION_EXT}", v.video_id)),
            &v.labels,
        )?;
    }
    Ok(())
}

// Synthetic data.

/// Seed of the label maps; fixed so every dataset of a given feature_dim
/// shares one ground-truth function.
pub const MAP_SEED: u64 = 0x05ee_d0f1_abe1;
pub const LATENT_DIM: usize = 8;
pub const AR_COEF: f64 = 0.9;
pub const FEATURE_NOISE: f64 = 0.1;
/// Trailing moving-average length behind the VA readout.
pub const MA_WINDOW: usize = 8;
pub const VA_GAIN: f64 = 1.5;

/// The fixed maps from features to labels.
#[derive(Debug, Clone)]
pub struct GeneratorMaps {
    pub feature_dim: usize,
    /// `LATENT_DIM × feature_dim` mixing of the latent process.
    pub mixing: Tensor,
    /// Unit-norm readouts for valence and arousal.
    pub va: [Vec<f64>; 2],
    /// One unit-norm score direction per expression class.
    pub expr: Vec<Vec<f64>>,
    /// One unit-norm direction per AU, active when the projection is > 0.
    pub au: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GeneratorMaps {
    pub fn new(feature_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(MAP_SEED);
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        let mixing = Tensor::from_fn(&[LATENT_DIM, feature_dim], |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let va = [
            unit_vector(&mut rng, feature_dim),
            unit_vector(&mut rng, feature_dim),
        ];
        let expr = (0..EXPR_CLASSES.len())
            .map(|_| unit_vector(&mut rng, feature_dim))
            .collect();
        let au = (0..AU_NAMES.len())
            .map(|_| unit_vector(&mut rng, feature_dim))
            .collect();
        Self {
            feature_dim,
            mixing,
            va,
            expr,
            au,
        }
    }

    /// Ground-truth outputs in the model's output space: VA values,
    /// expression scores, AU margins.
    pub fn outputs(&self, task: TaskKind, features: &Tensor) -> Tensor {
        let n = features.shape()[0];
        let d = task.output_dim();
        let mut out = Vec::with_capacity(n * d);
        for t in 0..n {
            match task {
                TaskKind::Va => {
                    let lo = (t + 1).saturating_sub(MA_WINDOW);
                    let mut avg = vec![0.0; self.feature_dim];
                    for s in lo..=t {
                        for (a, x) in avg.iter_mut().zip(features.row(s)) {
                            *a += x;
                        }
                    }
                    let k = (t + 1 - lo) as f64;
                    avg.iter_mut().for_each(|a| *a /= k);
                    out.extend(self.va.iter().map(|w| (VA_GAIN * dot(w, &avg)).tanh()));
                }
                TaskKind::Expr => out.extend(self.expr.iter().map(|w| dot(w, features.row(t)))),
                TaskKind::Au => out.extend(self.au.iter().map(|w| dot(w, features.row(t)))),
            }
        }
        Tensor::new(&[n, d], out).expect("sized above")
    }

    /// Labels of a feature sequence; every frame is valid.
    pub fn labels(&self, task: TaskKind, features: &Tensor) -> FrameLabels {
        let outputs = self.outputs(task, features);
        let values: Vec<f64> = match task {
            TaskKind::Va => outputs.data().to_vec(),
            TaskKind::Expr => outputs
                .data()
                .chunks(task.output_dim())
                .map(|r| argmax(r) as f64)
                .collect(),
            TaskKind::Au => outputs
                .data()
                .iter()
                .map(|&m| if m > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        };
        let n = features.shape()[0];
        FrameLabels::new(task, values, vec![true; n]).expect("generator labels are in range")
    }

    /// Features of one video: a stationary AR(1) latent of unit variance,
    /// mixed up to `feature_dim` with white noise added, stored at f32
    /// precision.
    pub fn features(&self, n_frames: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
        let mut z: Vec<f64> = (0..LATENT_DIM)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut data = Vec::with_capacity(n_frames * self.feature_dim);
        for t in 0..n_frames {
            if t > 0 {
                for zi in z.iter_mut() {
                    *zi = AR_COEF * *zi + innov * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for j in 0..self.feature_dim {
                let mixed: f64 = (0..LATENT_DIM).map(|l| z[l] * self.mixing.at(l, j)).sum();
                let noisy = mixed + FEATURE_NOISE * rng.sample::<f64, _>(StandardNormal);
                data.push(f64::from(noisy as f32));
            }
        }
        Tensor::new(&[n_frames, self.feature_dim], data).expect("sized above")
    }
}

/// A seeded learnable dataset. Video ids are `vid000`, `vid001`, ...
pub fn generate_synthetic(
    task: TaskKind,
    n_videos: usize,
    n_frames: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<VideoRecord>> {
    if n_videos == 0 || n_frames == 0 || feature_dim == 0 {
        return Err(Error::Config("synthetic sizes must all be ≥ 1".into()));
    }
    let maps = GeneratorMaps::new(feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_videos)
        .map(|i| {
            let features = maps.features(n_frames, &mut rng);
            let labels = maps.labels(task, &features);
            VideoRecord::new(format!("vid{i:03}"), features, labels)
        })
        .collect()
}

// Checkpoints.

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMOSEQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus, for resumable snapshots, optimizer state and run progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PipelineModel,
    pub optimizer: Option<OptimState>,
    pub progress: Option<Progress>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgressMeta {
    epochs_done: usize,
    rng: RngState,
    history: Vec<HistoryRecord>,
    best_metric: Option<f64>,
    best_epoch: Option<usize>,
    has_best_params: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    params: Vec<TensorMeta>,
    optimizer_step: Option<u64>,
    progress: Option<ProgressMeta>,
}

/// Layout: magic, u32 version, u64 meta length, JSON meta, then f64 LE
/// blocks in order: parameters, first moments, second moments, best
/// parameters (the last three only when present).
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = ckpt.model.params();
    let meta = CheckpointMeta {
        model: ckpt.model.config().clone(),
        params: params
            .iter()
            .map(|p| TensorMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        progress: ckpt.progress.as_ref().map(|p| ProgressMeta {
            epochs_done: p.epochs_done,
            rng: p.rng.clone(),
            history: p.history.clone(),
            best_metric: p.best_metric,
            best_epoch: p.best_epoch,
            has_best_params: p.best_params.is_some(),
        }),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut block = |ts: &[Tensor]| -> Result<()> {
        if ts.len() != params.len() {
            return Err(Error::shape(
                "checkpoint block does not match parameter count",
            ));
        }
        for (t, p) in ts.iter().zip(params) {
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor for {} has wrong shape",
                    p.name
                )));
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(())
    };
    let values: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    block(&values)?;
    if let Some(o) = &ckpt.optimizer {
        block(&o.m)?;
        block(&o.v)?;
    }
    if let Some(best) = ckpt.progress.as_ref().and_then(|p| p.best_params.as_ref()) {
        block(best)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(self.path, None, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensors(&mut self, metas: &[TensorMeta]) -> Result<Vec<Tensor>> {
        metas
            .iter()
            .map(|m| {
                let n: usize = m.shape.iter().product();
                let raw = self.take(n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::new(&m.shape, data)
            })
            .collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::data(path, None, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(
            path,
            None,
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let len =
        usize::try_from(len).map_err(|_| Error::data(path, None, "metadata length overflows"))?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::data(path, None, format!("bad checkpoint metadata: {e}")))?;

    let values = r.tensors(&meta.params)?;
    let params = meta
        .params
        .iter()
        .zip(values)
        .map(|(m, value)| Param {
            name: m.name.clone(),
            value,
        })
        .collect();
    let model = PipelineModel::from_params(meta.model, params)
        .map_err(|e| Error::data(path, None, e.to_string()))?;
    let optimizer = match meta.optimizer_step {
        Some(step) => Some(OptimState {
            m: r.tensors(&meta.params)?,
            v: r.tensors(&meta.params)?,
            step,
        }),
        None => None,
    };
    let progress = match meta.progress {
        Some(p) => {
            let best_params = if p.has_best_params {
                Some(r.tensors(&meta.params)?)
            } else {
                None
            };
            Some(Progress {
                epochs_done: p.epochs_done,
                rng: p.rng,
                history: p.history,
                best_metric: p.best_metric,
                best_epoch: p.best_epoch,
                best_params,
            })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::data(
            path,
            None,
            format!("{} trailing bytes after checkpoint", bytes.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        progress,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    // Write-then-rename so an interrupted save never clobbers the last good
    // checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
