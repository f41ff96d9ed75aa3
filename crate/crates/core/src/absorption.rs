//! Context absorption: train low-rank adapters so that the contextless model
//! on `Y` reproduces the hidden states the frozen model produces on `XY`.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Normalization, Var};
use crate::error::{Error, Result};
use crate::model::{
    bind, check_capacity, collect_trace, forward_graph, HiddenStateTrace, LoraAdapterSet, LoraConfig,
    ModelWeights, Trainable,
};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentTarget {
    HiddenStates,
    TokenDistribution,
    TttReconstruction,
}

/// Where the student places `Y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Same absolute positions as in the oracle pass (`n…n+m−1`).
    AbsoluteOffset,
    /// Positions restart at 0.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbsorptionConfig {
    pub n: usize,
    pub m: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub norm_mode: Normalization,
    pub loss_norm: LossNorm,
    pub alignment_target: AlignmentTarget,
    pub position_mode: PositionMode,
    pub lora: LoraConfig,
    pub optimizer: AdamWConfig,
}

impl Default for AbsorptionConfig {
    fn default() -> Self {
        AbsorptionConfig {
            n: 32,
            m: 64,
            max_steps: 200,
            learning_rate: 5e-4,
            epsilon: 0.01,
            norm_mode: Normalization::PerElement,
            loss_norm: LossNorm::L1,
            alignment_target: AlignmentTarget::HiddenStates,
            position_mode: PositionMode::AbsoluteOffset,
            lora: LoraConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl AbsorptionConfig {
    /// Settings for 7B-scale models; far too large for the toy model.
    pub fn large_scale() -> Self {
        AbsorptionConfig {
            n: 1024,
            m: 2048,
            epsilon: 2.0,
            norm_mode: Normalization::PerPosition,
            lora: LoraConfig { rank: 64, ..LoraConfig::default() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        self.lora.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Threshold,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    /// Loss of every forward pass, in order.
    pub losses: Vec<f64>,
    pub steps_executed: usize,
    pub optimizer_steps: usize,
    pub terminated_by: Termination,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_time_secs: f64,
    /// Widest attention span of any student or oracle pass.
    pub max_attention_width: usize,
}

impl AbsorptionReport {
    /// `step,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

/// Hidden states of `f_W(XY)` at the last `m` positions, placed from `base`.
pub fn capture_oracle_trace_at(
    weights: &ModelWeights,
    xy_tokens: &[u32],
    n: usize,
    m: usize,
    base: usize,
) -> Result<HiddenStateTrace> {
    if xy_tokens.len() != n + m {
        return Err(Error::Contract(format!(
            "oracle input has {} tokens, expected n + m = {}",
            xy_tokens.len(),
            n + m
        )));
    }
    let mut g = Graph::new();
    let bm = bind(&mut g, weights, None, Trainable::Nothing)?;
    let out = forward_graph(&mut g, &weights.config, &bm, xy_tokens, base, None, true)?;
    collect_trace(&g, &out.hidden, base).slice(n, m)
}

pub fn capture_oracle_trace(weights: &ModelWeights, xy_tokens: &[u32], n: usize, m: usize) -> Result<HiddenStateTrace> {
    capture_oracle_trace_at(weights, xy_tokens, n, m, 0)
}

/// Distance between a detached target trace and student states on `g`.
///
/// Per-position mode sums over layers and hidden units and divides by the
/// number of positions; per-element mode averages over everything.
pub fn sync_loss(
    g: &mut Graph,
    target: &HiddenStateTrace,
    student: &[Var],
    norm_mode: Normalization,
    loss_norm: LossNorm,
) -> Result<Var> {
    if student.len() != target.depth() {
        return Err(Error::Contract(format!(
            "student has {} layers of states, target has {}",
            student.len(),
            target.depth()
        )));
    }
    let mut total: Option<Var> = None;
    for (s, t) in student.iter().zip(&target.layers) {
        if g.shape(*s) != t.shape() {
            return Err(Error::Contract(format!(
                "student states {:?} do not match target {:?}",
                g.shape(*s),
                t.shape()
            )));
        }
        let t = g.input(t.clone())?;
        let term = match loss_norm {
            LossNorm::L1 => g.l1_loss(*s, t, norm_mode)?,
            LossNorm::L2 => g.squared_loss(*s, t, norm_mode)?,
        };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty trace".into()))?;
    match norm_mode {
        Normalization::PerPosition => Ok(total),
        Normalization::PerElement => g.scale(total, 1.0 / target.depth() as f32),
    }
}

/// [`sync_loss`] between two materialized traces.
pub fn sync_loss_value(
    target: &HiddenStateTrace,
    student: &HiddenStateTrace,
    norm_mode: Normalization,
    loss_norm: LossNorm,
) -> Result<f64> {
    if target.num_positions() != student.num_positions() {
        return Err(Error::Contract(format!(
            "traces cover {} and {} positions",
            target.num_positions(),
            student.num_positions()
        )));
    }
    let mut g = Graph::new();
    let vars = student.layers.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = sync_loss(&mut g, target, &vars, norm_mode, loss_norm)?;
    Ok(g.value(loss).item() as f64)
}

/// Mean over rows of `KL(softmax(oracle) ‖ softmax(student))`.
pub fn token_distribution_loss(g: &mut Graph, oracle_logits: &Tensor, student_logits: Var) -> Result<Var> {
    if oracle_logits.shape() != g.shape(student_logits) {
        return Err(Error::Contract(format!(
            "oracle logits {:?} vs student logits {:?}",
            oracle_logits.shape(),
            g.shape(student_logits)
        )));
    }
    let p = g.input(oracle_logits.clone())?;
    g.kl_divergence(p, student_logits)
}

/// Next-token cross-entropy of the bound model on `x` itself.
pub(crate) fn ttt_reconstruction_graph(
    g: &mut Graph,
    weights: &ModelWeights,
    bound: &crate::model::BoundModel,
    x_tokens: &[u32],
    start: usize,
) -> Result<(Var, usize)> {
    if x_tokens.len() < 2 {
        return Err(Error::Contract(format!(
            "reconstruction needs at least 2 context tokens, got {}",
            x_tokens.len()
        )));
    }
    let inputs = &x_tokens[..x_tokens.len() - 1];
    let targets: Vec<usize> = x_tokens[1..].iter().map(|&t| t as usize).collect();
    let out = forward_graph(g, &weights.config, bound, inputs, start, None, false)?;
    Ok((g.cross_entropy(out.logits, &targets)?, out.max_attention_width))
}

/// Reconstruction loss value of `weights` (optionally adapted) on `x`.
pub fn ttt_reconstruction_loss(
    weights: &ModelWeights,
    adapters: Option<&LoraAdapterSet>,
    x_tokens: &[u32],
) -> Result<f64> {
    let mut g = Graph::new();
    let bm = bind(&mut g, weights, adapters, Trainable::Nothing)?;
    let (loss, _) = ttt_reconstruction_graph(&mut g, weights, &bm, x_tokens, 0)?;
    Ok(g.value(loss).item() as f64)
}

enum Objective {
    Hidden(HiddenStateTrace),
    Distribution(Tensor),
    Reconstruction,
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Optimization { step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Absorb `x` with the window starting at position 0.
pub fn absorb_context(
    weights: &ModelWeights,
    x_tokens: &[u32],
    y_tokens: &[u32],
    cfg: &AbsorptionConfig,
    seed: u64,
) -> Result<(LoraAdapterSet, AbsorptionReport)> {
    absorb_context_at(weights, x_tokens, y_tokens, cfg, seed, 0)
}

/// Absorb `x`, with `XY` occupying absolute positions `base…base+n+m−1`.
pub fn absorb_context_at(
    weights: &ModelWeights,
    x_tokens: &[u32],
    y_tokens: &[u32],
    cfg: &AbsorptionConfig,
    seed: u64,
    base: usize,
) -> Result<(LoraAdapterSet, AbsorptionReport)> {
    cfg.validate()?;
    if x_tokens.len() != cfg.n || y_tokens.len() != cfg.m {
        return Err(Error::Contract(format!(
            "absorption expects |X| = {} and |Y| = {}, got {} and {}",
            cfg.n,
            cfg.m,
            x_tokens.len(),
            y_tokens.len()
        )));
    }
    let clock = Instant::now();
    let mut adapters = LoraAdapterSet::init(&weights.config, &cfg.lora, seed)?;
    let student_start = match cfg.position_mode {
        PositionMode::AbsoluteOffset => base + cfg.n,
        PositionMode::Reset => 0,
    };
    let x_start = match cfg.position_mode {
        PositionMode::AbsoluteOffset => base,
        PositionMode::Reset => 0,
    };
    check_capacity(&weights.config, student_start, cfg.m)?;

    let mut max_width = 0;
    let objective = match cfg.alignment_target {
        AlignmentTarget::HiddenStates | AlignmentTarget::TokenDistribution => {
            let xy: Vec<u32> = x_tokens.iter().chain(y_tokens).copied().collect();
            let mut g = Graph::new();
            let bm = bind(&mut g, weights, None, Trainable::Nothing)?;
            let capture = cfg.alignment_target == AlignmentTarget::HiddenStates;
            let out = forward_graph(&mut g, &weights.config, &bm, &xy, base, None, capture)?;
            max_width = out.max_attention_width;
            if capture {
                Objective::Hidden(collect_trace(&g, &out.hidden, base).slice(cfg.n, cfg.m)?)
            } else {
                let v = weights.config.vocab_size;
                let rows = g.value(out.logits).data()[cfg.n * v..].to_vec();
                Objective::Distribution(Tensor::new(vec![cfg.m, v], rows)?)
            }
        }
        AlignmentTarget::TttReconstruction => {
            if x_tokens.len() < 2 {
                return Err(Error::Contract(format!(
                    "reconstruction needs at least 2 context tokens, got {}",
                    x_tokens.len()
                )));
            }
            Objective::Reconstruction
        }
    };

    let mut states: Vec<AdamWState> = adapters
        .pairs
        .iter()
        .flat_map(|p| [AdamWState::new(p.a.numel()), AdamWState::new(p.b.numel())])
        .collect();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut terminated_by = Termination::MaxSteps;
    let mut optimizer_steps = 0;

    for step in 0..cfg.max_steps {
        let fail = at_step(step);
        let mut g = Graph::new();
        let bm = bind(&mut g, weights, Some(&adapters), Trainable::Adapters)?;
        let loss = match &objective {
            Objective::Hidden(target) => {
                let out = forward_graph(&mut g, &weights.config, &bm, y_tokens, student_start, None, true)
                    .map_err(&fail)?;
                max_width = max_width.max(out.max_attention_width);
                sync_loss(&mut g, target, &out.hidden, cfg.norm_mode, cfg.loss_norm).map_err(&fail)?
            }
            Objective::Distribution(oracle) => {
                let out = forward_graph(&mut g, &weights.config, &bm, y_tokens, student_start, None, false)
                    .map_err(&fail)?;
                max_width = max_width.max(out.max_attention_width);
                token_distribution_loss(&mut g, oracle, out.logits).map_err(&fail)?
            }
            Objective::Reconstruction => {
                let (loss, width) =
                    ttt_reconstruction_graph(&mut g, weights, &bm, x_tokens, x_start).map_err(&fail)?;
                max_width = max_width.max(width);
                loss
            }
        };
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Optimization { step, detail: format!("loss is {value}") });
        }
        losses.push(value);
        if value < cfg.epsilon {
            terminated_by = Termination::Threshold;
            break;
        }
        g.backward(loss).map_err(&fail)?;
        let grads: Vec<Tensor> = bm
            .adapters()
            .iter()
            .flat_map(|a| [a.a, a.b])
            .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        drop(g);
        let params = adapters.pairs.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]);
        for ((param, grad), state) in params.zip(&grads).zip(&mut states) {
            adamw_step(Arc::make_mut(param), grad, state, cfg.learning_rate, &cfg.optimizer, step as u64 + 1)?;
        }
        optimizer_steps += 1;
    }

    Ok((
        adapters,
        AbsorptionReport {
            steps_executed: losses.len(),
            optimizer_steps,
            terminated_by,
            initial_loss: losses.first().copied(),
            final_loss: losses.last().copied(),
            losses,
            wall_time_secs: clock.elapsed().as_secs_f64(),
            max_attention_width: max_width,
        },
    ))
}
