//! Central finite-difference checks of the reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward values on fresh graphs
//! built from constants, so it shares no code with the adjoint rules it
//! checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, TensorId};
use crate::model::{EncoderConfig, HeadConfig, ModelConfig, PipelineModel, TcnConfig};
use crate::objectives;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that entries whose true gradient is ~0 are judged on absolute error.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the tape gradient of `build(inputs)` (a scalar) against central
/// differences with step `h`.
pub fn check<F>(name: &str, inputs: &[Tensor], h: f64, build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i].data()[j], numeric);
            if !err.is_finite() {
                return Err(Error::Numerical(format!(
                    "{name}: non-finite gradient entry"
                )));
            }
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.1, 1]`, clear of the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to a scalar through a fixed random projection so that every
/// output entry carries a distinct weight.
fn project(g: &mut Graph, y: TensorId, seed: u64) -> Result<TensorId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let r = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId>>,
);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, vec![$($t),*], Box::new($f)))
        };
    }
    case!(
        "matmul",
        [
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[4, 2], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, 1)
        }
    );
    case!(
        "add",
        [
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 3], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y, 2)
        }
    );
    case!(
        "sub",
        [
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 3], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.sub(x[0], x[1])?;
            project(g, y, 3)
        }
    );
    case!(
        "mul",
        [
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 3], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y, 4)
        }
    );
    case!(
        "div",
        [
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 3], 0.5, 2.0)
        ],
        |g, x| {
            let y = g.div(x[0], x[1])?;
            project(g, y, 5)
        }
    );
    case!("scale", [uniform(rng, &[4], -1.0, 1.0)], |g, x| {
        let y = g.scale(x[0], -1.7);
        let y = g.add_scalar(y, 0.3);
        project(g, y, 6)
    });
    case!(
        "broadcast",
        [
            uniform(rng, &[3], -1.0, 1.0),
            uniform(rng, &[2, 1], -1.0, 1.0)
        ],
        |g, x| {
            let a = g.broadcast_to(x[0], &[2, 2, 3])?;
            let b = g.broadcast_to(x[1], &[2, 2, 3])?;
            let y = g.mul(a, b)?;
            project(g, y, 7)
        }
    );
    case!("transpose", [uniform(rng, &[3, 2], -1.0, 1.0)], |g, x| {
        let y = g.transpose(x[0])?;
        project(g, y, 8)
    });
    case!("reshape", [uniform(rng, &[2, 6], -1.0, 1.0)], |g, x| {
        let y = g.reshape(x[0], &[3, 2, 2])?;
        project(g, y, 9)
    });
    case!(
        "concat",
        [
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 2], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.concat(&[x[0], x[1], x[0]], 1)?;
            project(g, y, 10)
        }
    );
    case!("slice", [uniform(rng, &[3, 4, 2], -1.0, 1.0)], |g, x| {
        let y = g.slice(x[0], 1, 1, 2)?;
        project(g, y, 11)
    });
    case!("relu", [away_from_zero(rng, &[10])], |g, x| {
        let y = g.relu(x[0]);
        project(g, y, 12)
    });
    case!("gelu", [uniform(rng, &[10], -3.0, 3.0)], |g, x| {
        let y = g.gelu(x[0]);
        project(g, y, 13)
    });
    case!("tanh", [uniform(rng, &[10], -2.0, 2.0)], |g, x| {
        let y = g.tanh(x[0]);
        project(g, y, 14)
    });
    case!("sigmoid", [uniform(rng, &[10], -4.0, 4.0)], |g, x| {
        let y = g.sigmoid(x[0]);
        project(g, y, 15)
    });
    case!("exp", [uniform(rng, &[10], -2.0, 2.0)], |g, x| {
        let y = g.exp(x[0]);
        project(g, y, 16)
    });
    case!("log", [uniform(rng, &[10], 0.2, 3.0)], |g, x| {
        let y = g.log(x[0])?;
        project(g, y, 17)
    });
    case!("softmax", [uniform(rng, &[3, 5], -2.0, 2.0)], |g, x| {
        let a = g.softmax(x[0], 1)?;
        let b = g.softmax(x[0], 0)?;
        let y = g.concat(&[a, b], 0)?;
        project(g, y, 18)
    });
    case!("log_softmax", [uniform(rng, &[3, 5], -2.0, 2.0)], |g, x| {
        let y = g.log_softmax(x[0], 1)?;
        project(g, y, 19)
    });
    case!("layer_norm", [uniform(rng, &[3, 6], -2.0, 2.0)], |g, x| {
        let a = g.layer_norm(x[0], 1, 1e-5)?;
        let b = g.layer_norm(x[0], 0, 1e-5)?;
        let y = g.concat(&[a, b], 1)?;
        project(g, y, 20)
    });
    case!("dropout", [uniform(rng, &[20], -1.0, 1.0)], |g, x| {
        // identical mask on every evaluation
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let y = g.dropout(x[0], 0.3, Some(&mut r))?;
        project(g, y, 21)
    });
    case!(
        "causal_conv1d",
        [
            uniform(rng, &[9, 3], -1.0, 1.0),
            uniform(rng, &[3, 3, 2], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.causal_conv1d(x[0], x[1], 2)?;
            project(g, y, 22)
        }
    );
    case!("masked_fill", [uniform(rng, &[6], -1.0, 1.0)], |g, x| {
        let y = g.masked_fill(x[0], &[false, true, false, false, true, false], -3.0)?;
        project(g, y, 23)
    });
    case!("sum_axis", [uniform(rng, &[2, 3, 4], -1.0, 1.0)], |g, x| {
        let a = g.sum_axis(x[0], 1)?;
        let y = g.mean(a)?;
        let z = g.sum_axis(x[0], 2)?;
        let z = project(g, z, 24)?;
        g.add(y, z)
    });
    case!(
        "bce_with_logits",
        [uniform(rng, &[8], -4.0, 4.0)],
        |g, x| {
            let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
            let weights = [1.0, 0.5, 1.0, 0.0, 1.0, 2.0, 1.0, 1.0];
            g.bce_with_logits_sum(x[0], &targets, &weights)
        }
    );
    cases
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let n = 16;
    let target_va = uniform(rng, &[n, 2], -0.9, 0.9);
    let mask: Vec<bool> = (0..n).map(|i| i % 5 != 3).collect();
    let m1 = mask.clone();
    cases.push((
        "loss_va",
        vec![uniform(rng, &[n, 2], -0.9, 0.9)],
        Box::new(move |g, x| objectives::loss_va(g, x[0], &target_va, &m1)),
    ));
    let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
    let m2 = mask.clone();
    cases.push((
        "loss_expr",
        vec![uniform(rng, &[n, 8], -2.0, 2.0)],
        Box::new(move |g, x| objectives::loss_expr(g, x[0], &classes, &m2)),
    ));
    let au = Tensor::from_fn(&[n, 12], |_| f64::from(rng.gen::<bool>()));
    cases.push((
        "loss_au",
        vec![uniform(rng, &[n, 12], -3.0, 3.0)],
        Box::new(move |g, x| objectives::loss_au(g, x[0], &au, &mask)),
    ));
    cases
}

/// The toy model used by the pipeline check.
pub fn toy_config(task: TaskKind) -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        use_tcn: true,
        use_encoder: true,
        tcn: TcnConfig {
            channels: 4,
            kernel_size: 3,
            dilations: vec![1, 2],
            num_blocks: 1,
        },
        encoder: EncoderConfig {
            d_model: 4,
            num_layers: 1,
            num_heads: 1,
            ff_dim: 8,
        },
        head: HeadConfig { hidden_dim: 4 },
        dropout: 0.3,
        task,
    }
}

/// Full TCN → encoder → head → loss gradient with respect to every
/// parameter, at `w = 8, D = 4, C = 4`, evaluation mode.
pub fn pipeline_case(task: TaskKind) -> Result<CheckResult> {
    let cfg = toy_config(task);
    let model = PipelineModel::init(cfg.clone(), 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = 8;
    let features = uniform(&mut rng, &[w, cfg.feature_dim], -1.0, 1.0);
    let frame_valid: Vec<bool> = (0..w).map(|t| t < 6).collect();
    let labels: Vec<f64> = match task {
        TaskKind::Va => (0..w * 2).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        TaskKind::Expr => (0..w).map(|_| f64::from(rng.gen_range(0u8..8))).collect(),
        TaskKind::Au => (0..w * 12).map(|_| f64::from(rng.gen::<bool>())).collect(),
    };
    // Fresh init has zero biases, which puts ReLU inputs exactly on the kink
    // wherever a whole row upstream is zero; randomise everything instead.
    let params: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            let offset = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
            Tensor::from_fn(p.value.shape(), |_| offset + rng.gen_range(-0.5..0.5))
        })
        .collect();
    let name = format!("pipeline_{task}");
    check(&name, &params, STEP, |g, ids| {
        let x = g.constant(features.clone());
        let y = model.forward_segment_with(g, ids, x, &frame_valid, None)?;
        objectives::task_loss(g, task, y, &labels, &frame_valid)
    })
}

/// Every primitive, the three task losses, and the composed pipeline.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut results = Vec::new();
    for (name, inputs, build) in primitive_cases(&mut rng)
        .into_iter()
        .chain(loss_cases(&mut rng))
    {
        results.push(check(name, &inputs, STEP, build)?);
    }
    for task in TaskKind::ALL {
        results.push(pipeline_case(task)?);
    }
    Ok(results)
}
