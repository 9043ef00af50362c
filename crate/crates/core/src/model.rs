//! The segment model: dilated causal TCN, pre-norm Transformer encoder and a
//! two-layer MLP head, composed per segment.
//!
//! Parameters are stored as a flat, named list whose order and shapes are a
//! pure function of [`ModelConfig`]. A forward pass binds them onto a
//! [`Graph`] and walks the same order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Segment, TaskKind};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub channels: usize,
    pub kernel_size: usize,
    /// One residual stage per dilation, repeated in every block.
    pub dilations: Vec<usize>,
    pub num_blocks: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            kernel_size: 3,
            dilations: vec![1, 2, 4, 8],
            num_blocks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            num_layers: 4,
            num_heads: 8,
            ff_dim: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// `false` replaces the TCN with a per-frame linear projection.
    pub use_tcn: bool,
    /// `false` drops the Transformer encoder entirely.
    pub use_encoder: bool,
    pub tcn: TcnConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub dropout: f64,
    pub task: TaskKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 512,
            use_tcn: true,
            use_encoder: true,
            tcn: TcnConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            dropout: 0.3,
            task: TaskKind::Va,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.head.hidden_dim == 0 {
            return bad("feature_dim and head.hidden_dim must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.use_tcn {
            let t = &self.tcn;
            if t.channels == 0 || t.kernel_size == 0 || t.num_blocks == 0 || t.dilations.is_empty()
            {
                return bad(
                    "tcn channels, kernel_size, num_blocks and dilations must be non-empty".into(),
                );
            }
            if t.dilations.contains(&0) {
                return bad("tcn dilations must be ≥ 1".into());
            }
        }
        let e = &self.encoder;
        if e.d_model == 0 {
            return bad("encoder.d_model must be ≥ 1".into());
        }
        if self.use_encoder {
            if e.num_layers == 0 || e.num_heads == 0 || e.ff_dim == 0 {
                return bad("encoder num_layers, num_heads and ff_dim must be ≥ 1".into());
            }
            if !e.d_model.is_multiple_of(e.num_heads) {
                return bad(format!(
                    "encoder.d_model {} not divisible by num_heads {}",
                    e.d_model, e.num_heads
                ));
            }
            if self.use_tcn && self.tcn.channels != e.d_model {
                return bad(format!(
                    "tcn.channels {} must equal encoder.d_model {}",
                    self.tcn.channels, e.d_model
                ));
            }
        }
        Ok(())
    }

    /// Width of the per-frame representation fed to the head.
    pub fn width(&self) -> usize {
        if self.use_tcn {
            self.tcn.channels
        } else {
            self.encoder.d_model
        }
    }

    /// Total scalar parameter count.
    ///
    /// TCN stage with input width `i`, `C` channels and kernel `K`:
    /// `K·i·C + C + K·C·C + C`, plus `i·C + C` when `i ≠ C`.
    /// Encoder layer of width `d`, feed-forward `f`: `4d² + 4d + 2df + f + d + 4d`
    /// (projections, their biases, the feed-forward pair, two norms), plus
    /// `2d` for the final norm. Head: `d·h + h + h·o + o`.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let d = self.width();
        if self.use_tcn {
            let (c, k) = (self.tcn.channels, self.tcn.kernel_size);
            let mut width = self.feature_dim;
            for _ in 0..self.tcn.num_blocks {
                for _ in &self.tcn.dilations {
                    total += k * width * c + c + k * c * c + c;
                    if width != c {
                        total += width * c + c;
                    }
                    width = c;
                }
            }
        } else {
            total += self.feature_dim * d + d;
        }
        if self.use_encoder {
            let f = self.encoder.ff_dim;
            total += self.encoder.num_layers * (4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d);
            total += 2 * d;
        }
        let (h, o) = (self.head.hidden_dim, self.task.output_dim());
        total + d * h + h + h * o + o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    config: ModelConfig,
    params: Vec<Param>,
}

enum Init {
    Zeros,
    Ones,
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
}

/// Parameter names and shapes in binding order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let d = cfg.width();
    if cfg.use_tcn {
        let (c, k) = (cfg.tcn.channels, cfg.tcn.kernel_size);
        let mut width = cfg.feature_dim;
        for b in 0..cfg.tcn.num_blocks {
            for (s, _) in cfg.tcn.dilations.iter().enumerate() {
                let p = format!("tcn.{b}.{s}");
                push(
                    format!("{p}.conv1.weight"),
                    vec![k, width, c],
                    Init::FanIn(k * width),
                );
                push(format!("{p}.conv1.bias"), vec![c], Init::Zeros);
                push(
                    format!("{p}.conv2.weight"),
                    vec![k, c, c],
                    Init::FanIn(k * c),
                );
                push(format!("{p}.conv2.bias"), vec![c], Init::Zeros);
                if width != c {
                    push(
                        format!("{p}.residual.weight"),
                        vec![width, c],
                        Init::FanIn(width),
                    );
                    push(format!("{p}.residual.bias"), vec![c], Init::Zeros);
                }
                width = c;
            }
        }
    } else {
        push(
            "input_proj.weight".into(),
            vec![cfg.feature_dim, d],
            Init::FanIn(cfg.feature_dim),
        );
        push("input_proj.bias".into(), vec![d], Init::Zeros);
    }
    if cfg.use_encoder {
        let f = cfg.encoder.ff_dim;
        for l in 0..cfg.encoder.num_layers {
            let p = format!("encoder.{l}");
            push(format!("{p}.norm1.gamma"), vec![d], Init::Ones);
            push(format!("{p}.norm1.beta"), vec![d], Init::Zeros);
            for proj in ["query", "key", "value", "out"] {
                push(
                    format!("{p}.attn.{proj}.weight"),
                    vec![d, d],
                    Init::FanIn(d),
                );
                push(format!("{p}.attn.{proj}.bias"), vec![d], Init::Zeros);
            }
            push(format!("{p}.norm2.gamma"), vec![d], Init::Ones);
            push(format!("{p}.norm2.beta"), vec![d], Init::Zeros);
            push(format!("{p}.ff1.weight"), vec![d, f], Init::FanIn(d));
            push(format!("{p}.ff1.bias"), vec![f], Init::Zeros);
            push(format!("{p}.ff2.weight"), vec![f, d], Init::FanIn(f));
            push(format!("{p}.ff2.bias"), vec![d], Init::Zeros);
        }
        push("encoder.norm.gamma".into(), vec![d], Init::Ones);
        push("encoder.norm.beta".into(), vec![d], Init::Zeros);
    }
    let (h, o) = (cfg.head.hidden_dim, cfg.task.output_dim());
    push("head.fc1.weight".into(), vec![d, h], Init::FanIn(d));
    push("head.fc1.bias".into(), vec![h], Init::Zeros);
    push("head.fc2.weight".into(), vec![h, o], Init::FanIn(h));
    push("head.fc2.bias".into(), vec![o], Init::Zeros);
    out
}

struct TcnStage {
    conv1: (TensorId, TensorId),
    conv2: (TensorId, TensorId),
    residual: Option<(TensorId, TensorId)>,
    dilation: usize,
}

struct EncoderLayer {
    norm1: (TensorId, TensorId),
    query: (TensorId, TensorId),
    key: (TensorId, TensorId),
    value: (TensorId, TensorId),
    out: (TensorId, TensorId),
    norm2: (TensorId, TensorId),
    ff1: (TensorId, TensorId),
    ff2: (TensorId, TensorId),
}

/// Parameter handles on a graph, arranged by component.
pub struct Bound {
    tcn: Vec<TcnStage>,
    input_proj: Option<(TensorId, TensorId)>,
    layers: Vec<EncoderLayer>,
    final_norm: Option<(TensorId, TensorId)>,
    head: [(TensorId, TensorId); 2],
}

impl Bound {
    fn from_ids(cfg: &ModelConfig, ids: &[TensorId]) -> Result<Self> {
        let expected = layout(cfg).len();
        if ids.len() != expected {
            return Err(Error::shape(format!(
                "{} parameter handles for a model with {expected} tensors",
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let mut pair = || (it.next().expect("counted"), it.next().expect("counted"));
        let mut tcn = Vec::new();
        let mut input_proj = None;
        if cfg.use_tcn {
            let mut width = cfg.feature_dim;
            for _ in 0..cfg.tcn.num_blocks {
                for &dilation in &cfg.tcn.dilations {
                    let conv1 = pair();
                    let conv2 = pair();
                    let residual = (width != cfg.tcn.channels).then(&mut pair);
                    tcn.push(TcnStage {
                        conv1,
                        conv2,
                        residual,
                        dilation,
                    });
                    width = cfg.tcn.channels;
                }
            }
        } else {
            input_proj = Some(pair());
        }
        let mut layers = Vec::new();
        let mut final_norm = None;
        if cfg.use_encoder {
            for _ in 0..cfg.encoder.num_layers {
                layers.push(EncoderLayer {
                    norm1: pair(),
                    query: pair(),
                    key: pair(),
                    value: pair(),
                    out: pair(),
                    norm2: pair(),
                    ff1: pair(),
                    ff2: pair(),
                });
            }
            final_norm = Some(pair());
        }
        let head = [pair(), pair()];
        Ok(Self {
            tcn,
            input_proj,
            layers,
            final_norm,
            head,
        })
    }
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (t, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        if j % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

impl PipelineModel {
    /// Fresh model with seeded fan-in uniform weights, zero biases and unit
    /// norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                    }
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::shape(format!(
                "model config expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> TaskKind {
        self.config.task
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect()
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect()
    }

    fn bound(&self, ids: &[TensorId]) -> Result<Bound> {
        Bound::from_ids(&self.config, ids)
    }

    fn check_input(&self, g: &Graph, x: TensorId) -> Result<usize> {
        match *g.shape(x) {
            [w, d] if d == self.config.feature_dim && w > 0 => Ok(w),
            ref s => Err(Error::shape(format!(
                "segment features {s:?}, expected [w, {}]",
                self.config.feature_dim
            ))),
        }
    }

    /// `w × D → w × C`. Without a TCN this is the per-frame input projection.
    pub fn tcn_forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        x: TensorId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        self.check_input(g, x)?;
        let b = self.bound(ids)?;
        if let Some((w, bias)) = b.input_proj {
            return g.linear(x, w, bias);
        }
        let p = self.config.dropout;
        let mut h = x;
        for stage in &b.tcn {
            let y = g.causal_conv1d(h, stage.conv1.0, stage.dilation)?;
            let y = g.add_broadcast(y, stage.conv1.1)?;
            let y = g.relu(y);
            let y = g.dropout(y, p, rng.as_deref_mut())?;
            let y = g.causal_conv1d(y, stage.conv2.0, stage.dilation)?;
            let y = g.add_broadcast(y, stage.conv2.1)?;
            let y = g.relu(y);
            let y = g.dropout(y, p, rng.as_deref_mut())?;
            let res = match stage.residual {
                Some((w, bias)) => g.linear(h, w, bias)?,
                None => h,
            };
            let s = g.add(y, res)?;
            h = g.relu(s);
        }
        Ok(h)
    }

    /// `w × C → w × C`. `pad_mask[t]` is true for padded positions, which
    /// are excluded as attention keys.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        x: TensorId,
        pad_mask: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        self.encoder_forward_traced(g, ids, x, pad_mask, rng, None)
    }

    /// As [`Self::encoder_forward`], additionally collecting the attention
    /// probability matrices (`w × w`, one per layer and head) into `trace`.
    pub fn encoder_forward_traced(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        x: TensorId,
        pad_mask: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut Vec<TensorId>>,
    ) -> Result<TensorId> {
        let d = self.config.width();
        let w = match *g.shape(x) {
            [w, c] if c == d => w,
            ref s => {
                return Err(Error::shape(format!(
                    "encoder input {s:?}, expected [w, {d}]"
                )))
            }
        };
        if pad_mask.len() != w {
            return Err(Error::shape(format!(
                "pad mask of {} for {w} positions",
                pad_mask.len()
            )));
        }
        if pad_mask.iter().all(|&m| m) {
            return Err(Error::invalid("every position of the segment is padding"));
        }
        let b = self.bound(ids)?;
        if !self.config.use_encoder {
            return Ok(x);
        }
        let p = self.config.dropout;
        let heads = self.config.encoder.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let key_mask: Vec<bool> = (0..w * w).map(|i| pad_mask[i % w]).collect();

        let pe = g.constant(positional_encoding(w, d));
        let mut h = g.add(x, pe)?;
        for layer in &b.layers {
            let n = self.norm(g, h, layer.norm1)?;
            let q = g.linear(n, layer.query.0, layer.query.1)?;
            let k = g.linear(n, layer.key.0, layer.key.1)?;
            let v = g.linear(n, layer.value.0, layer.value.1)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice(q, 1, hd * dh, dh)?;
                let kh = g.slice(k, 1, hd * dh, dh)?;
                let vh = g.slice(v, 1, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale);
                let s = g.masked_fill(s, &key_mask, f64::NEG_INFINITY)?;
                let a = g.softmax(s, 1)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(a);
                }
                head_out.push(g.matmul(a, vh)?);
            }
            let cat = if heads == 1 {
                head_out[0]
            } else {
                g.concat(&head_out, 1)?
            };
            let attn = g.linear(cat, layer.out.0, layer.out.1)?;
            let attn = g.dropout(attn, p, rng.as_deref_mut())?;
            h = g.add(h, attn)?;

            let n = self.norm(g, h, layer.norm2)?;
            let f = g.linear(n, layer.ff1.0, layer.ff1.1)?;
            let f = g.gelu(f);
            let f = g.linear(f, layer.ff2.0, layer.ff2.1)?;
            let f = g.dropout(f, p, rng.as_deref_mut())?;
            h = g.add(h, f)?;
        }
        let fin = b.final_norm.expect("encoder enabled");
        self.norm(g, h, fin)
    }

    fn norm(
        &self,
        g: &mut Graph,
        x: TensorId,
        (gamma, beta): (TensorId, TensorId),
    ) -> Result<TensorId> {
        let n = g.layer_norm(x, 1, LAYER_NORM_EPS)?;
        let n = g.mul_broadcast(n, gamma)?;
        g.add_broadcast(n, beta)
    }

    /// `w × C → w × output_dim`. VA outputs are squashed by tanh; EXPR and AU
    /// outputs are raw logits.
    pub fn head_forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        h: TensorId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let b = self.bound(ids)?;
        let [(w1, b1), (w2, b2)] = b.head;
        let y = g.linear(h, w1, b1)?;
        let y = g.gelu(y);
        let y = g.dropout(y, self.config.dropout, rng)?;
        let y = g.linear(y, w2, b2)?;
        Ok(match self.config.task {
            TaskKind::Va => g.tanh(y),
            TaskKind::Expr | TaskKind::Au => y,
        })
    }

    /// One segment end to end. `rng = Some` selects training mode (dropout on).
    pub fn forward_segment_with(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        x: TensorId,
        frame_valid: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let w = self.check_input(g, x)?;
        if frame_valid.len() != w {
            return Err(Error::shape(format!(
                "frame mask of {} for a {w}-frame segment",
                frame_valid.len()
            )));
        }
        let pad_mask: Vec<bool> = frame_valid.iter().map(|&v| !v).collect();
        let t = self.tcn_forward(g, ids, x, rng.as_deref_mut())?;
        let e = self.encoder_forward(g, ids, t, &pad_mask, rng.as_deref_mut())?;
        self.head_forward(g, ids, e, rng)
    }

    /// A batch of segments, stacked to `B × w × output_dim`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        batch: &[&Segment],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let first = batch.first().ok_or_else(|| Error::shape("empty batch"))?;
        let w = first.window();
        let mut outs = Vec::with_capacity(batch.len());
        for seg in batch {
            if seg.window() != w {
                return Err(Error::shape(
                    "segments in a batch must share a window length",
                ));
            }
            let x = g.constant(seg.features.clone());
            outs.push(self.forward_segment_with(
                g,
                ids,
                x,
                &seg.frame_valid,
                rng.as_deref_mut(),
            )?);
        }
        let flat = g.concat(&outs, 0)?;
        g.reshape(flat, &[batch.len(), w, self.config.task.output_dim()])
    }

    /// Inference on one segment with frozen parameters.
    pub fn predict_segment(&self, segment: &Segment) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids = self.bind_frozen(&mut g);
        let x = g.constant(segment.features.clone());
        let y = self.forward_segment_with(&mut g, &ids, x, &segment.frame_valid, None)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small(task: TaskKind) -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            tcn: TcnConfig {
                channels: 8,
                kernel_size: 3,
                dilations: vec![1, 2],
                num_blocks: 2,
            },
            encoder: EncoderConfig {
                d_model: 8,
                num_layers: 2,
                num_heads: 2,
                ff_dim: 16,
            },
            head: HeadConfig { hidden_dim: 5 },
            task,
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zeroed(model: &mut PipelineModel) {
        for p in model.params_mut() {
            if !p.name.contains("gamma") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn param_count_matches_layout() {
        for task in TaskKind::ALL {
            for (tcn, enc) in [(true, true), (false, true), (true, false), (false, false)] {
                let cfg = ModelConfig {
                    use_tcn: tcn,
                    use_encoder: enc,
                    ..small(task)
                };
                let m = PipelineModel::init(cfg.clone(), 0).unwrap();
                assert_eq!(m.num_scalars(), cfg.param_count());
            }
        }
        // hand count for the toy gradient-check model (D=4, C=4, K=3, dilations [1,2], 1 head)
        let toy = crate::gradcheck::toy_config(TaskKind::Va);
        let tcn = 2 * (3 * 4 * 4 + 4 + 3 * 4 * 4 + 4);
        let enc = 4 * 16 + 4 * 4 + 2 * 4 * 8 + 8 + 4 + 4 * 4 + 2 * 4;
        let head = 4 * 4 + 4 + 4 * 2 + 2;
        assert_eq!(toy.param_count(), tcn + enc + head);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(TaskKind::Va);
        cfg.encoder.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small(TaskKind::Va);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small(TaskKind::Va);
        cfg.tcn.channels = 16;
        assert!(cfg.validate().is_err());
        cfg.use_encoder = false;
        assert!(cfg.validate().is_ok());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn tcn_keeps_length() {
        let cfg = ModelConfig {
            feature_dim: 512,
            ..ModelConfig::default()
        };
        let m = PipelineModel::init(cfg, 1).unwrap();
        let mut g = Graph::new();
        let ids = m.bind_frozen(&mut g);
        let x = g.constant(random(&[300, 512], 2));
        let y = m.tcn_forward(&mut g, &ids, x, None).unwrap();
        assert_eq!(g.shape(y), &[300, 256]);
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        for task in TaskKind::ALL {
            let mut m = PipelineModel::init(small(task), 3).unwrap();
            zeroed(&mut m);
            let mut g = Graph::new();
            let ids = m.bind_frozen(&mut g);
            let x = g.constant(random(&[10, 6], 4));
            let t = m.tcn_forward(&mut g, &ids, x, None).unwrap();
            assert!(g.value(t).data().iter().all(|&v| v == 0.0));
            let y = m.head_forward(&mut g, &ids, t, None).unwrap();
            assert_eq!(g.shape(y), &[10, task.output_dim()]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tcn_is_causal() {
        let m = PipelineModel::init(small(TaskKind::Va), 5).unwrap();
        let base = random(&[20, 6], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let t = rng.gen_range(0..20);
            let mut pert = base.clone();
            pert.data_mut()[t * 6 + rng.gen_range(0..6)] += 0.5;
            let mut g = Graph::new();
            let ids = m.bind_frozen(&mut g);
            let (a, b) = (g.constant(base.clone()), g.constant(pert));
            let ya = m.tcn_forward(&mut g, &ids, a, None).unwrap();
            let yb = m.tcn_forward(&mut g, &ids, b, None).unwrap();
            for r in 0..t {
                assert_eq!(g.value(ya).row(r), g.value(yb).row(r));
            }
        }
    }

    #[test]
    fn attention_ignores_padding() {
        let m = PipelineModel::init(small(TaskKind::Expr), 8).unwrap();
        let w = 12;
        let valid = 7;
        let pad: Vec<bool> = (0..w).map(|t| t >= valid).collect();
        let base = random(&[w, 8], 9);
        let mut other = base.clone();
        for v in &mut other.data_mut()[valid * 8..] {
            *v = 42.0;
        }
        let mut g = Graph::new();
        let ids = m.bind_frozen(&mut g);
        let mut trace = Vec::new();
        let a = g.constant(base);
        let b = g.constant(other);
        let ya = m
            .encoder_forward_traced(&mut g, &ids, a, &pad, None, Some(&mut trace))
            .unwrap();
        let yb = m.encoder_forward(&mut g, &ids, b, &pad, None).unwrap();
        for r in 0..valid {
            assert_eq!(g.value(ya).row(r), g.value(yb).row(r));
        }
        assert_eq!(trace.len(), 4);
        for &att in &trace {
            let a = g.value(att);
            for r in 0..w {
                let row = a.row(r);
                let s: f64 = row[..valid].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row[valid..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn single_valid_frame_attends_to_itself() {
        let m = PipelineModel::init(small(TaskKind::Va), 10).unwrap();
        let w = 5;
        let pad = [false, true, true, true, true];
        let mut g = Graph::new();
        let ids = m.bind_frozen(&mut g);
        let x = g.constant(random(&[w, 8], 11));
        let mut trace = Vec::new();
        m.encoder_forward_traced(&mut g, &ids, x, &pad, None, Some(&mut trace))
            .unwrap();
        for &att in &trace {
            for r in 0..w {
                assert_eq!(g.value(att).row(r)[0], 1.0);
            }
        }
    }

    #[test]
    fn all_masked_is_rejected() {
        let m = PipelineModel::init(small(TaskKind::Va), 12).unwrap();
        let mut g = Graph::new();
        let ids = m.bind_frozen(&mut g);
        let x = g.constant(random(&[3, 8], 13));
        assert!(m
            .encoder_forward(&mut g, &ids, x, &[true; 3], None)
            .is_err());
    }

    #[test]
    fn va_head_is_bounded() {
        let mut m = PipelineModel::init(small(TaskKind::Va), 14).unwrap();
        for p in m
            .params_mut()
            .iter_mut()
            .filter(|p| p.name.starts_with("head"))
        {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        }
        let mut g = Graph::new();
        let ids = m.bind_frozen(&mut g);
        let h = g.constant(random(&[30, 8], 15));
        let y = m.head_forward(&mut g, &ids, h, None).unwrap();
        assert_eq!(g.shape(y), &[30, 2]);
        assert!(g.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let m = PipelineModel::init(small(TaskKind::Au), 16).unwrap();
        let mut params = m.params().to_vec();
        assert!(PipelineModel::from_params(small(TaskKind::Au), params.clone()).is_ok());
        params[0].value = Tensor::zeros(&[1]);
        assert!(PipelineModel::from_params(small(TaskKind::Au), params).is_err());
        assert!(PipelineModel::from_params(small(TaskKind::Va), m.params().to_vec()).is_err());
    }
}
