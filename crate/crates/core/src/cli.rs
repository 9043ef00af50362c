//! Command-line front end: `synth`, `train`, `eval`, `predict`, `gradcheck`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameLabels, TaskKind, VideoRecord};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io;
use crate::model::{ModelConfig, PipelineModel};
use crate::segmentation::SegmentationConfig;
use crate::trainer::{self, OptimConfig, TrainOptions, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "emoseq",
    version,
    about = "Frame-level emotion recognition from precomputed visual features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset (features/ and annotations/).
    Synth(SynthArgs),
    /// Train a model; writes best.ckpt, last.ckpt, history.log and config.toml.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write per-frame predictions for every feature file in a directory.
    Predict(PredictArgs),
    /// Finite-difference gradient check of every primitive and the pipeline.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 20)]
    pub videos: usize,
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output root; receives `features/` and `annotations/`.
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
}

/// Options shared by every command that reads a dataset.
#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Held-out fold (0-4) under the video-id hash split.
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the TCN with a per-frame linear projection.
    #[arg(long)]
    pub no_tcn: bool,
    /// Drop the Transformer encoder.
    #[arg(long)]
    pub no_encoder: bool,
    /// Continue from `<output>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs in this invocation (the run stays resumable).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub features: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// The TOML run file. Every field is optional; see the README for the schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<TaskKind>,
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    pub train_videos: Option<Vec<String>>,
    pub val_videos: Option<Vec<String>>,
    pub paths: Paths,
    pub segmentation: SegmentationConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    /// Whether `model.task` / `model.feature_dim` were written explicitly.
    #[serde(skip)]
    explicit_model_task: bool,
    #[serde(skip)]
    explicit_feature_dim: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let model = table.get("model").and_then(|m| m.as_table());
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.explicit_model_task = model.is_some_and(|m| m.contains_key("task"));
        cfg.explicit_feature_dim = model.is_some_and(|m| m.contains_key("feature_dim"));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the shared data flags and settles the task, checking that
    /// the top level and the model section agree.
    fn apply_data_flags(&mut self, a: &DataArgs) -> Result<()> {
        if let Some(t) = &a.task {
            self.task = Some(t.parse()?);
        }
        if let Some(f) = &a.features {
            self.paths.features = Some(f.clone());
        }
        if let Some(f) = &a.annotations {
            self.paths.annotations = Some(f.clone());
        }
        if let Some(w) = a.window {
            self.segmentation.window = w;
        }
        if let Some(s) = a.stride {
            self.segmentation.stride = s;
        }
        if a.fold.is_some() {
            self.fold = a.fold;
        }
        let task = match (self.task, self.explicit_model_task) {
            (Some(t), true) if t != self.model.task && a.task.is_none() => {
                return Err(Error::Config(format!(
                    "task = \"{t}\" disagrees with model.task = \"{}\"",
                    self.model.task
                )))
            }
            (Some(t), _) => t,
            (None, true) => self.model.task,
            (None, false) => {
                return Err(Error::Config(
                    "task is not set (use --task or `task = ...`)".into(),
                ))
            }
        };
        self.task = Some(task);
        self.model.task = task;
        if let Some(f) = self.fold {
            if f >= trainer::NUM_FOLDS {
                return Err(Error::Config(format!(
                    "fold {f} outside 0..{}",
                    trainer::NUM_FOLDS
                )));
            }
        }
        self.segmentation.validate()
    }

    fn task(&self) -> TaskKind {
        self.task.unwrap_or(self.model.task)
    }

    fn dir(&self, which: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .clone()
            .ok_or_else(|| Error::Config(format!("{which} directory is not set")))?;
        if !p.is_dir() {
            return Err(Error::data(
                &p,
                None,
                format!("{which} directory does not exist"),
            ));
        }
        Ok(p)
    }

    fn load_dataset(&self) -> Result<Vec<VideoRecord>> {
        let features = self.dir("features", &self.paths.features)?;
        let annotations = self.dir("annotations", &self.paths.annotations)?;
        io::load_dataset(&features, &annotations, self.task())
    }

    /// (train, validation) by explicit lists, by fold, or everything for
    /// training when neither is given.
    fn split(&self, videos: Vec<VideoRecord>) -> Result<(Vec<VideoRecord>, Vec<VideoRecord>)> {
        if self.train_videos.is_some() || self.val_videos.is_some() {
            let train_ids = self.train_videos.clone().unwrap_or_default();
            let val_ids = self.val_videos.clone().unwrap_or_default();
            for id in train_ids.iter().chain(&val_ids) {
                if !videos.iter().any(|v| &v.video_id == id) {
                    return Err(Error::Config(format!(
                        "video `{id}` listed in config but not found"
                    )));
                }
            }
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for v in videos {
                if val_ids.contains(&v.video_id) {
                    val.push(v);
                } else if train_ids.is_empty() || train_ids.contains(&v.video_id) {
                    train.push(v);
                }
            }
            return Ok((train, val));
        }
        Ok(match self.fold {
            Some(f) => trainer::split_fold(videos, f),
            None => (videos, Vec::new()),
        })
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let task: TaskKind = a.task.parse()?;
    let videos = io::generate_synthetic(task, a.videos, a.frames, a.dim, a.seed)?;
    io::write_dataset(&videos, &a.out.join("features"), &a.out.join("annotations"))?;
    println!(
        "wrote {} {task} videos ({} frames, dim {}) to {}",
        videos.len(),
        a.frames,
        a.dim,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.data.config)?;
    cfg.apply_data_flags(&a.data)?;
    if let Some(o) = &a.output {
        cfg.paths.output = Some(o.clone());
    }
    if let Some(e) = a.epochs {
        cfg.optim.epochs = Some(e);
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.optim.batch_size = b;
    }
    if let Some(s) = a.seed.or(cfg.seed) {
        cfg.seed = Some(s);
        cfg.optim.seed = s;
    }
    if a.no_tcn {
        cfg.model.use_tcn = false;
    }
    if a.no_encoder {
        cfg.model.use_encoder = false;
    }
    cfg.optim.validate()?;
    let output = cfg
        .paths
        .output
        .clone()
        .ok_or_else(|| Error::Config("output directory is not set".into()))?;

    let videos = cfg.load_dataset()?;
    let dim = videos[0].feature_dim();
    if !cfg.explicit_feature_dim {
        cfg.model.feature_dim = dim;
    }
    cfg.model.validate()?;
    let (train_set, val_set) = cfg.split(videos)?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
    let config_path = output.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let options = TrainOptions {
        optim: cfg.optim.clone(),
        segmentation: cfg.segmentation,
        output_dir: Some(output.clone()),
        stop_after: a.stop_after,
    };
    println!(
        "train {} videos, validate {} videos, task {}",
        train_set.len(),
        val_set.len(),
        cfg.task()
    );
    let mut t = if a.resume {
        let ckpt = io::load_checkpoint(&output.join(trainer::LAST_CHECKPOINT))?;
        if ckpt.model.task() != cfg.task() {
            return Err(Error::TaskMismatch {
                checkpoint: ckpt.model.task(),
                requested: cfg.task(),
            });
        }
        Trainer::resume(ckpt, &train_set, val_set, options)?
    } else {
        let model = PipelineModel::init(cfg.model.clone(), cfg.optim.seed)?;
        Trainer::new(model, &train_set, val_set, options)?
    };
    println!("parameters {}", t.model().num_scalars());
    let target = cfg.optim.epochs();
    let limit = a
        .stop_after
        .map_or(target, |n| (t.epochs_done() + n).min(target));
    while t.epochs_done() < limit {
        let r = t.run_epoch()?;
        let val = r.val_metric.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "epoch {:>3}  lr {:.3e}  train_loss {:.6}  val {val}",
            r.epoch, r.lr, r.train_loss
        );
    }
    if t.epochs_done() < target {
        println!(
            "stopped after epoch {}; continue with --resume",
            t.epochs_done()
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mut cfg = load_config(&a.data.config)?;
    if a.data.task.is_none() && cfg.task.is_none() && !cfg.explicit_model_task {
        cfg.task = Some(ckpt.model.task());
    }
    cfg.apply_data_flags(&a.data)?;
    if cfg.task() != ckpt.model.task() {
        return Err(Error::TaskMismatch {
            checkpoint: ckpt.model.task(),
            requested: cfg.task(),
        });
    }
    let videos = cfg.load_dataset()?;
    let videos = match cfg.fold {
        Some(f) => trainer::split_fold(videos, f).1,
        None => videos,
    };
    if videos.is_empty() {
        return Err(Error::Config("no videos selected for evaluation".into()));
    }
    let report = trainer::evaluate(&ckpt.model, &videos, &cfg.segmentation)?;
    if let Some(path) = &a.report {
        let json =
            serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(report.to_table())
}

pub fn predict(a: &PredictArgs) -> Result<usize> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mut seg = load_config(&a.config)?.segmentation;
    if let Some(w) = a.window {
        seg.window = w;
    }
    if let Some(s) = a.stride {
        seg.stride = s;
    }
    seg.validate()?;
    let task = ckpt.model.task();
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let files = io::list_feature_files(&a.features)?;
    for f in &files {
        let features = io::read_features(f)?;
        let n = features.shape()[0];
        let id = f
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let video = VideoRecord::new(id.clone(), features, FrameLabels::empty(task, n))
            .map_err(|e| Error::data(f, None, e.to_string()))?;
        let out = trainer::predict_video(&ckpt.model, &video, &seg)?;
        let path = a.output.join(format!("{id}.{}", io::ANNOTATION_EXT));
        fs::write(&path, io::format_predictions(task, &out)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(files.len())
}

/// Prints one line per check; fails with a numerical error if any check
/// exceeds the tolerance.
pub fn gradcheck() -> Result<()> {
    let results = gradcheck::run_suite()?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} max_rel_error {:.3e}  {status}",
            r.name, r.max_rel_error
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::Numerical(format!(
            "{failed} of {} gradient checks exceed {:e}",
            results.len(),
            gradcheck::TOLERANCE
        )));
    }
    println!(
        "all {} checks within {:e}",
        results.len(),
        gradcheck::TOLERANCE
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => {
            print!("{}", eval(a)?);
            Ok(())
        }
        Command::Predict(a) => {
            let n = predict(a)?;
            println!("wrote predictions for {n} videos to {}", a.output.display());
            Ok(())
        }
        Command::Gradcheck => gradcheck(),
    }
}
