//! Decoder forward pass, shared by training (full sequences on a graph) and
//! inference (chunks appended to a [`DecodeCache`]).

use std::sync::Arc;

use super::config::ModelConfig;
use super::lora::LoraAdapterSet;
use super::weights::{ModelWeights, Projection};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

/// Per-position residual-stream states `h^0 … h^L`.
///
/// `h^0` is the embedding output and `h^l` the output of block `l`; the last
/// entry is taken before the final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateTrace {
    pub positions: Vec<usize>,
    /// `num_layers + 1` tensors, each `[positions, hidden_dim]`.
    pub layers: Vec<Tensor>,
}

impl HiddenStateTrace {
    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    /// Number of captured vectors per position (`L + 1`).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map(|t| t.last_dim()).unwrap_or(0)
    }

    pub fn state(&self, position_index: usize, layer: usize) -> &[f32] {
        self.layers[layer].row(position_index)
    }

    /// Sub-trace over position indices `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<HiddenStateTrace> {
        if start + len > self.num_positions() {
            return Err(Error::Contract(format!(
                "trace slice [{start}, {}) beyond {} positions",
                start + len,
                self.num_positions()
            )));
        }
        let d = self.hidden_dim();
        let layers = self
            .layers
            .iter()
            .map(|t| Tensor::new(vec![len, d], t.data()[start * d..(start + len) * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(HiddenStateTrace { positions: self.positions[start..start + len].to_vec(), layers })
    }
}

/// Keys and values already computed for a contiguous run of positions.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    start_position: usize,
    next_position: usize,
    /// Per layer `[heads, len, head_dim]`, rotary already applied to keys.
    keys: Vec<Option<Arc<Tensor>>>,
    values: Vec<Option<Arc<Tensor>>>,
    last_attention_width: usize,
    max_attention_width: usize,
}

impl DecodeCache {
    pub fn new(config: &ModelConfig, start_position: usize) -> Self {
        DecodeCache {
            start_position,
            next_position: start_position,
            keys: vec![None; config.num_layers],
            values: vec![None; config.num_layers],
            last_attention_width: 0,
            max_attention_width: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.next_position - self.start_position
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start_position(&self) -> usize {
        self.start_position
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Keys attended by the last query of the most recent call.
    pub fn last_attention_width(&self) -> usize {
        self.last_attention_width
    }

    pub fn max_attention_width(&self) -> usize {
        self.max_attention_width
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].as_ref().map(|k| k.shape()[1]).unwrap_or(0)
    }
}

/// Model tensors bound as leaves of one graph.
pub(crate) struct BoundModel {
    embedding: Var,
    layers: Vec<BoundLayer>,
    final_norm: Var,
    unembedding: Var,
    adapters: Vec<BoundAdapter>,
    scaling: f32,
    /// Frozen adapters are applied as `x·(W + ΔW)`, the same arithmetic as a merge.
    dense_adapters: bool,
}

struct BoundLayer {
    attn_norm: Var,
    mlp_norm: Var,
    projections: [Var; 7],
}

pub(crate) struct BoundAdapter {
    pub layer: usize,
    pub target: Projection,
    pub a: Var,
    pub b: Var,
}

impl BoundModel {
    pub fn adapters(&self) -> &[BoundAdapter] {
        &self.adapters
    }

    /// Base parameters in [`ModelWeights::named_tensors`] order.
    pub fn base_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.extend_from_slice(&l.projections);
            out.push(l.mlp_norm);
        }
        out.push(self.final_norm);
        out.push(self.unembedding);
        out
    }
}

/// Which tensors receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trainable {
    Nothing,
    Base,
    Adapters,
}

pub(crate) fn bind(
    g: &mut Graph,
    weights: &ModelWeights,
    adapters: Option<&LoraAdapterSet>,
    trainable: Trainable,
) -> Result<BoundModel> {
    let base = trainable == Trainable::Base;
    let mut leaf = |t: &Arc<Tensor>, train: bool| {
        if train {
            g.parameter(Arc::clone(t))
        } else {
            g.input(Arc::clone(t))
        }
    };
    let embedding = leaf(&weights.embedding, base)?;
    let mut layers = Vec::with_capacity(weights.layers.len());
    for lw in &weights.layers {
        let attn_norm = leaf(&lw.attn_norm, base)?;
        let mut projections = [embedding; 7];
        for (slot, t) in projections.iter_mut().zip(&lw.projections) {
            *slot = leaf(t, base)?;
        }
        let mlp_norm = leaf(&lw.mlp_norm, base)?;
        layers.push(BoundLayer { attn_norm, mlp_norm, projections });
    }
    let final_norm = leaf(&weights.final_norm, base)?;
    let unembedding = leaf(&weights.unembedding, base)?;
    let mut bound = Vec::new();
    let mut scaling = 0.0;
    if let Some(set) = adapters {
        scaling = set.scaling();
        let train = trainable == Trainable::Adapters;
        for p in &set.pairs {
            if p.layer >= weights.layers.len() {
                return Err(Error::Config(format!("adapter layer {} beyond model", p.layer)));
            }
            bound.push(BoundAdapter { layer: p.layer, target: p.target, a: leaf(&p.a, train)?, b: leaf(&p.b, train)? });
        }
    }
    let dense_adapters = trainable != Trainable::Adapters;
    Ok(BoundModel { embedding, layers, final_norm, unembedding, adapters: bound, scaling, dense_adapters })
}

pub(crate) struct GraphForward {
    pub logits: Var,
    /// `h^0 … h^L`, each `[tokens, hidden_dim]`; empty unless captured.
    pub hidden: Vec<Var>,
    pub max_attention_width: usize,
}

fn project(g: &mut Graph, bm: &BoundModel, layer: usize, target: Projection, x: Var) -> Result<Var> {
    let w = bm.layers[layer].projections[target as usize];
    let adapter = bm.adapters.iter().find(|a| a.layer == layer && a.target == target);
    if let (Some(ad), true) = (adapter, bm.dense_adapters) {
        let at = g.transpose(ad.a, 0, 1)?;
        let bt = g.transpose(ad.b, 0, 1)?;
        let delta = g.matmul(at, bt)?;
        let delta = g.scale(delta, bm.scaling)?;
        let w = g.add(w, delta)?;
        return g.matmul(x, w);
    }
    let y = g.matmul(x, w)?;
    match adapter {
        None => Ok(y),
        Some(ad) => {
            let at = g.transpose(ad.a, 0, 1)?;
            let bt = g.transpose(ad.b, 0, 1)?;
            let low = g.matmul(x, at)?;
            let delta = g.matmul(low, bt)?;
            let delta = g.scale(delta, bm.scaling)?;
            g.add(y, delta)
        }
    }
}

fn norm(g: &mut Graph, x: Var, gain: Var) -> Result<Var> {
    let n = g.rms_norm(x, NORM_EPS)?;
    g.mul(n, gain)
}

/// `[T, d] -> [heads, T, head_dim]`
fn split_heads(g: &mut Graph, x: Var, t: usize, heads: usize, hd: usize) -> Result<Var> {
    let x = g.reshape(x, &[t, heads, hd])?;
    g.transpose(x, 0, 1)
}

pub(crate) fn check_capacity(config: &ModelConfig, start: usize, len: usize) -> Result<()> {
    if start + len > config.max_positions {
        return Err(Error::Capacity { requested: start + len - 1, max: config.max_positions });
    }
    Ok(())
}

pub(crate) fn forward_graph(
    g: &mut Graph,
    config: &ModelConfig,
    bm: &BoundModel,
    tokens: &[u32],
    start: usize,
    mut cache: Option<&mut DecodeCache>,
    capture: bool,
) -> Result<GraphForward> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Contract("forward needs at least one token".into()));
    }
    if let Some(c) = cache.as_deref() {
        if c.next_position != start {
            return Err(Error::Contract(format!(
                "cache expects position {}, got {start}",
                c.next_position
            )));
        }
    }
    check_capacity(config, start, t)?;
    let (heads, hd) = (config.num_heads, config.head_dim());
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let mut h = g.embedding(bm.embedding, &ids)?;
    let mut hidden = Vec::new();
    if capture {
        hidden.push(h);
    }
    let mut max_width = 0;
    let inv_sqrt = 1.0 / (hd as f32).sqrt();

    for l in 0..config.num_layers {
        let lw = &bm.layers[l];
        let x = norm(g, h, lw.attn_norm)?;
        let q = project(g, bm, l, Projection::Query, x)?;
        let q = split_heads(g, q, t, heads, hd)?;
        let q = g.rope(q, start, config.rope_base)?;
        let k = project(g, bm, l, Projection::Key, x)?;
        let k = split_heads(g, k, t, heads, hd)?;
        let mut k = g.rope(k, start, config.rope_base)?;
        let v = project(g, bm, l, Projection::Value, x)?;
        let mut v = split_heads(g, v, t, heads, hd)?;

        if let Some(c) = cache.as_deref_mut() {
            if let (Some(ck), Some(cv)) = (&c.keys[l], &c.values[l]) {
                let ck = g.input(Arc::clone(ck))?;
                let cv = g.input(Arc::clone(cv))?;
                k = g.concat(&[ck, k], 1)?;
                v = g.concat(&[cv, v], 1)?;
            }
            c.keys[l] = Some(g.value_arc(k));
            c.values[l] = Some(g.value_arc(v));
        }
        let keys = g.shape(k)[1];
        max_width = max_width.max(keys);

        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let probs = g.causal_softmax(scores, keys - t)?;
        let att = g.matmul(probs, v)?;
        let att = g.transpose(att, 0, 1)?;
        let att = g.reshape(att, &[t, config.hidden_dim])?;
        let att = project(g, bm, l, Projection::Output, att)?;
        h = g.add(h, att)?;

        let x = norm(g, h, lw.mlp_norm)?;
        let gate = project(g, bm, l, Projection::Gate, x)?;
        let up = project(g, bm, l, Projection::Up, x)?;
        let act = g.silu(gate)?;
        let act = g.mul(act, up)?;
        let down = project(g, bm, l, Projection::Down, act)?;
        h = g.add(h, down)?;
        if capture {
            hidden.push(h);
        }
    }
    let x = norm(g, h, bm.final_norm)?;
    let logits = g.matmul(x, bm.unembedding)?;
    if let Some(c) = cache {
        c.next_position += t;
        c.last_attention_width = max_width;
        c.max_attention_width = c.max_attention_width.max(max_width);
    }
    Ok(GraphForward { logits, hidden, max_attention_width: max_width })
}

pub(crate) fn collect_trace(g: &Graph, hidden: &[Var], start: usize) -> HiddenStateTrace {
    let layers: Vec<Tensor> = hidden.iter().map(|&v| g.value(v).clone()).collect();
    let len = layers.first().map(|t| t.shape()[0]).unwrap_or(0);
    HiddenStateTrace { positions: (start..start + len).collect(), layers }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[tokens, vocab]`
    pub logits: Tensor,
    pub trace: Option<HiddenStateTrace>,
    pub max_attention_width: usize,
}

/// Causal forward over `tokens` placed at absolute positions `start_position..`.
pub fn forward_full(
    weights: &ModelWeights,
    adapters: Option<&LoraAdapterSet>,
    tokens: &[u32],
    start_position: usize,
    capture: bool,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let bm = bind(&mut g, weights, adapters, Trainable::Nothing)?;
    let out = forward_graph(&mut g, &weights.config, &bm, tokens, start_position, None, capture)?;
    let trace = capture.then(|| collect_trace(&g, &out.hidden, start_position));
    Ok(ForwardOutput {
        logits: g.value(out.logits).clone(),
        trace,
        max_attention_width: out.max_attention_width,
    })
}

/// Queries per forward pass in `prefill`; bounds the score tensors at
/// `[heads, PREFILL_CHUNK, keys]` for long prompts.
pub const PREFILL_CHUNK: usize = 256;

/// Run `tokens` through the model, appending them to `cache`; returns `[tokens, vocab]` logits.
pub fn prefill(
    weights: &ModelWeights,
    adapters: Option<&LoraAdapterSet>,
    cache: &mut DecodeCache,
    tokens: &[u32],
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract("forward needs at least one token".into()));
    }
    check_capacity(&weights.config, cache.next_position(), tokens.len())?;
    let mut logits = Vec::with_capacity(tokens.len() * weights.config.vocab_size);
    for chunk in tokens.chunks(PREFILL_CHUNK) {
        let mut g = Graph::new();
        let bm = bind(&mut g, weights, adapters, Trainable::Nothing)?;
        let start = cache.next_position();
        let out = forward_graph(&mut g, &weights.config, &bm, chunk, start, Some(cache), false)?;
        logits.extend_from_slice(g.value(out.logits).data());
    }
    Tensor::new(vec![tokens.len(), weights.config.vocab_size], logits)
}

/// One decode step: append `token` to the cache and return next-token logits.
pub fn forward_incremental(
    weights: &ModelWeights,
    adapters: Option<&LoraAdapterSet>,
    cache: &mut DecodeCache,
    token: u32,
) -> Result<Vec<f32>> {
    Ok(prefill(weights, adapters, cache, &[token])?.into_data())
}

/// Argmax with lowest-index tie-break.
pub fn greedy_next_token(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Plain greedy decoding with a KV cache. Stops early at `eos` when given.
pub fn greedy_generate(
    weights: &ModelWeights,
    prompt: &[u32],
    start_position: usize,
    max_new_tokens: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let mut cache = DecodeCache::new(&weights.config, start_position);
    let logits = prefill(weights, None, &mut cache, prompt)?;
    let mut next = greedy_next_token(logits.row(prompt.len() - 1));
    let mut out = Vec::with_capacity(max_new_tokens);
    loop {
        if Some(next) == eos {
            break;
        }
        out.push(next);
        if out.len() == max_new_tokens {
            break;
        }
        next = greedy_next_token(&forward_incremental(weights, None, &mut cache, next)?);
    }
    Ok(out)
}
