//! Synthetic recall tasks, pretraining corpora and the toy pretraining loop.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{bind, forward_graph, init_model, ModelConfig, ModelWeights, Trainable};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::Tensor;
use crate::tokenizer::{encode, BOS};

const KEY_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const VALUE_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const KEY_LEN: usize = 3;
pub const VALUE_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    /// `"K is"`
    pub prompt: String,
    /// `"V"`
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallTask {
    pub seed: u64,
    pub pairs: Vec<(String, String)>,
    /// Every pair stated once as `"K is V."`, space separated.
    pub context: String,
    pub probes: Vec<Probe>,
}

fn random_word(rng: &mut impl Rng, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

pub fn statement(key: &str, value: &str) -> String {
    format!("{key} is {value}.")
}

/// Deterministic task with `num_pairs` distinct keys.
pub fn make_recall_task(num_pairs: usize, seed: u64) -> Result<RecallTask> {
    if num_pairs == 0 {
        return Err(Error::Contract("a recall task needs at least one pair".into()));
    }
    let max_keys = KEY_ALPHABET.len().pow(KEY_LEN as u32);
    if num_pairs > max_keys {
        return Err(Error::Contract(format!("at most {max_keys} distinct keys")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(num_pairs);
    while pairs.len() < num_pairs {
        let key = random_word(&mut rng, KEY_ALPHABET, KEY_LEN);
        if seen.insert(key.clone()) {
            pairs.push((key, random_word(&mut rng, VALUE_ALPHABET, VALUE_LEN)));
        }
    }
    let context = pairs.iter().map(|(k, v)| statement(k, v)).collect::<Vec<_>>().join(" ");
    let probes = pairs
        .iter()
        .map(|(k, v)| Probe { prompt: format!("{k} is"), answer: v.clone() })
        .collect();
    Ok(RecallTask { seed, pairs, context, probes })
}

impl RecallTask {
    pub fn context_tokens(&self) -> Vec<u32> {
        encode(self.context.as_bytes())
    }

    pub fn value_of(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `num_probes` statements about keys drawn with replacement, each
    /// preceded by a space so it can follow the context directly.
    pub fn probe_text(&self, num_probes: usize, rng: &mut impl Rng) -> String {
        let mut out = String::new();
        for _ in 0..num_probes {
            let (k, v) = self.pairs.choose(rng).expect("nonempty");
            out.push(' ');
            out.push_str(&statement(k, v));
        }
        out
    }

    /// JSON export with keys `pairs`, `context`, `probes`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Layout of generated pretraining documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallCorpusConfig {
    pub num_documents: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub probes_per_document: usize,
}

impl Default for RecallCorpusConfig {
    fn default() -> Self {
        RecallCorpusConfig { num_documents: 8000, min_pairs: 1, max_pairs: 4, probes_per_document: 16 }
    }
}

/// One document: context, then probes answered from it, then a blank line.
pub fn recall_document(task: &RecallTask, num_probes: usize, rng: &mut impl Rng) -> String {
    format!("{}{}\n\n", task.context, task.probe_text(num_probes, rng))
}

/// Recall documents interleaved with paragraphs of `text` (if any).
pub fn build_pretraining_corpus(text: Option<&[u8]>, cfg: &RecallCorpusConfig, seed: u64) -> Result<Vec<u8>> {
    if cfg.min_pairs == 0 || cfg.min_pairs > cfg.max_pairs {
        return Err(Error::Config(format!(
            "recall corpus pair range [{}, {}] is invalid",
            cfg.min_pairs, cfg.max_pairs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paragraphs: Vec<&[u8]> = text
        .map(|t| t.split(|&b| b == b'\n').filter(|p| !p.is_empty()).collect())
        .unwrap_or_default();
    let mut out = Vec::new();
    for i in 0..cfg.num_documents {
        let pairs = rng.gen_range(cfg.min_pairs..=cfg.max_pairs);
        let task = make_recall_task(pairs, rng.gen())?;
        out.extend_from_slice(recall_document(&task, cfg.probes_per_document, &mut rng).as_bytes());
        if !paragraphs.is_empty() {
            out.extend_from_slice(paragraphs[i % paragraphs.len()]);
            out.extend_from_slice(b"\n\n");
        }
    }
    Ok(out)
}

/// Short prose mixed into the corpus when no text file is supplied.
pub const FALLBACK_TEXT: &str = include_str!("fallback_corpus.txt");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub context_window: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Fraction of the corpus (taken from the end) kept for held-out loss.
    pub holdout_fraction: f64,
    pub holdout_windows: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            context_window: 128,
            batch_size: 8,
            learning_rate: 1.5e-3,
            warmup_steps: 100,
            holdout_fraction: 0.05,
            holdout_windows: 16,
            optimizer: AdamWConfig { weight_decay: 0.0, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub weights: ModelWeights,
    /// Mean training cross-entropy per step.
    pub losses: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

/// Next-token cross-entropy training with AdamW, default options.
pub fn pretrain_toy(config: &ModelConfig, corpus: &[u8], steps: usize, seed: u64) -> Result<ModelWeights> {
    Ok(pretrain_toy_with(config, corpus, steps, seed, &PretrainOptions::default(), |_, _| {})?.weights)
}

struct Split {
    train: Vec<u32>,
    heldout: Vec<u32>,
}

fn split_corpus(corpus: &[u8], opts: &PretrainOptions) -> Result<Split> {
    let w = opts.context_window;
    if w < 2 {
        return Err(Error::Config("context_window must be at least 2".into()));
    }
    if opts.batch_size == 0 || opts.holdout_windows == 0 {
        return Err(Error::Config("batch_size and holdout_windows must be at least 1".into()));
    }
    if corpus.len() < 64 * w {
        return Err(Error::Data(format!(
            "corpus has {} bytes, need at least {} (64 × context window {w})",
            corpus.len(),
            64 * w
        )));
    }
    let hold = ((corpus.len() as f64 * opts.holdout_fraction) as usize).max(w + 1);
    let cut = corpus.len() - hold;
    Ok(Split { train: encode(&corpus[..cut]), heldout: encode(&corpus[cut..]) })
}

/// `[BOS] + window` inputs and next-token targets.
fn window(tokens: &[u32], start: usize, len: usize) -> (Vec<u32>, Vec<usize>) {
    let mut input = Vec::with_capacity(len);
    input.push(BOS);
    input.extend_from_slice(&tokens[start..start + len - 1]);
    let targets = tokens[start..start + len].iter().map(|&t| t as usize).collect();
    (input, targets)
}

/// Mean next-token cross-entropy over evenly spaced windows.
pub fn heldout_loss(weights: &ModelWeights, tokens: &[u32], window_len: usize, windows: usize) -> Result<f64> {
    let len = window_len.min(tokens.len());
    let span = tokens.len() - len;
    let mut total = 0.0;
    for i in 0..windows {
        let start = if windows == 1 { 0 } else { span * i / (windows - 1) };
        let (input, targets) = window(tokens, start, len);
        let mut g = Graph::new();
        let bm = bind(&mut g, weights, None, Trainable::Nothing)?;
        let out = forward_graph(&mut g, &weights.config, &bm, &input, 0, None, false)?;
        let loss = g.cross_entropy(out.logits, &targets)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / windows as f64)
}

fn lr_at(opts: &PretrainOptions, step: usize, total: usize) -> f64 {
    let base = opts.learning_rate;
    if step < opts.warmup_steps {
        return base * (step + 1) as f64 / opts.warmup_steps as f64;
    }
    let span = total.saturating_sub(opts.warmup_steps).max(1);
    let t = (step - opts.warmup_steps) as f64 / span as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Pretraining with explicit options; `progress(step, loss)` is called after every step.
pub fn pretrain_toy_with(
    config: &ModelConfig,
    corpus: &[u8],
    steps: usize,
    seed: u64,
    opts: &PretrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    opts.optimizer.validate()?;
    let split = split_corpus(corpus, opts)?;
    let w = opts.context_window;
    if w > config.max_positions {
        return Err(Error::Config(format!(
            "context_window {w} exceeds max_positions {}",
            config.max_positions
        )));
    }
    let mut weights = init_model(config, seed)?;
    let heldout_initial = heldout_loss(&weights, &split.heldout, w, opts.holdout_windows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0001);
    let mut states: Vec<AdamWState> =
        weights.named_tensors().iter().map(|(_, t)| AdamWState::new(t.numel())).collect();
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut grads: Vec<Tensor> =
            weights.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        for _ in 0..opts.batch_size {
            let start = rng.gen_range(0..=split.train.len() - w);
            let (input, targets) = window(&split.train, start, w);
            let mut g = Graph::new();
            let bm = bind(&mut g, &weights, None, Trainable::Base)?;
            let out = forward_graph(&mut g, config, &bm, &input, 0, None, false)?;
            let loss = g.cross_entropy(out.logits, &targets)?;
            loss_sum += g.value(loss).item() as f64;
            g.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(bm.base_vars()) {
                if let Some(gr) = g.grad(v) {
                    acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, &b)| *a += b);
                }
            }
        }
        let loss = loss_sum / opts.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Optimization { step, detail: "pretraining loss is not finite".into() });
        }
        let inv = 1.0 / opts.batch_size as f32;
        let lr = lr_at(opts, step, steps);
        for (((_, param), grad), state) in
            weights.named_tensors_mut().into_iter().zip(&mut grads).zip(&mut states)
        {
            grad.data_mut().iter_mut().for_each(|x| *x *= inv);
            adamw_step(Arc::make_mut(param), grad, state, lr, &opts.optimizer, step as u64 + 1)?;
        }
        losses.push(loss);
        progress(step, loss);
    }
    let heldout_final = heldout_loss(&weights, &split.heldout, w, opts.holdout_windows)?;
    Ok(PretrainReport { weights, losses, heldout_initial, heldout_final })
}
