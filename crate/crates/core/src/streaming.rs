//! Continual deduction with a sliding absorption window.
//!
//! The window `Z` grows by greedy generation. Whenever it holds `n + m`
//! tokens, its first `n` are absorbed by synchronizing on the next `m`, the
//! adapters are merged into the weights and the window slides by `n`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::absorption::{absorb_context_at, AbsorptionConfig, Termination};
use crate::error::{Error, Result};
use crate::model::{forward_incremental, greedy_next_token, lora_merge, prefill, DecodeCache, ModelWeights};
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Standard,
    Absorber,
}

/// Positions attended when predicting the token after a history of `total` tokens.
pub fn attended_positions_per_token(mode: CostMode, total: usize, n: usize, m: usize) -> usize {
    match mode {
        CostMode::Standard => total,
        CostMode::Absorber => total - n * absorption_rounds(total, n, m),
    }
}

/// Rounds triggered once `total` tokens have entered the window.
pub fn absorption_rounds(total: usize, n: usize, m: usize) -> usize {
    if n == 0 || total < n + m {
        0
    } else {
        (total - m) / n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetReason {
    MaxNewTokens,
    Capacity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamEvent {
    GeneratedToken {
        index: usize,
        token: u32,
        /// Absolute position the token will occupy.
        position: usize,
        /// Keys attended by the pass that produced it.
        attention_width: usize,
    },
    AbsorptionRound {
        round: usize,
        /// Absolute position of `X[0]`.
        position_offset: usize,
        steps_executed: usize,
        optimizer_steps: usize,
        terminated_by: Termination,
        initial_loss: Option<f64>,
        final_loss: Option<f64>,
        attention_width: usize,
        wall_time_secs: f64,
    },
    Eos {
        generated: usize,
    },
    BudgetExhausted {
        reason: BudgetReason,
        generated: usize,
    },
}

impl StreamEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, StreamEvent::Eos { .. } | StreamEvent::BudgetExhausted { .. })
    }
}

pub fn events_to_jsonl(events: &[StreamEvent]) -> String {
    events.iter().map(|e| serde_json::to_string(e).expect("plain data") + "\n").collect()
}

#[derive(Clone, Debug)]
pub struct StreamState {
    pub window: Vec<u32>,
    pub emitted: Vec<u32>,
    pub weights: ModelWeights,
    /// Absolute position of `window[0]`.
    pub position_offset: usize,
    pub round: usize,
}

impl StreamState {
    pub fn new(weights: ModelWeights, input: &[u32]) -> Self {
        let window = if input.is_empty() { vec![BOS] } else { input.to_vec() };
        StreamState { window, emitted: Vec::new(), weights, position_offset: 0, round: 0 }
    }

    pub fn total_consumed(&self) -> usize {
        self.position_offset + self.window.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamOptions {
    pub max_new_tokens: usize,
    /// Token that ends the stream; `None` generates until the budget runs out.
    pub eos: Option<u32>,
}

impl StreamOptions {
    pub fn new(max_new_tokens: usize) -> Self {
        StreamOptions { max_new_tokens, eos: Some(EOS) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamTimings {
    /// Until the logits for the first new token were available.
    pub prefill_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub tokens: Vec<u32>,
    pub events: Vec<StreamEvent>,
    pub weights: ModelWeights,
    pub rounds: usize,
    /// Widest attention of any forward pass, absorption passes included.
    pub max_attention_width: usize,
    pub timings: StreamTimings,
}

/// Greedy deduction with absorption; stops at EOS or after `max_new_tokens`.
pub fn absorber_generate(
    weights: &ModelWeights,
    input_tokens: &[u32],
    cfg: &AbsorptionConfig,
    max_new_tokens: usize,
    seed: u64,
) -> Result<StreamOutcome> {
    absorber_generate_with(weights, input_tokens, cfg, StreamOptions::new(max_new_tokens), seed)
}

fn is_capacity(e: &Error) -> bool {
    matches!(e, Error::Capacity { .. })
}

pub fn absorber_generate_with(
    weights: &ModelWeights,
    input_tokens: &[u32],
    cfg: &AbsorptionConfig,
    opts: StreamOptions,
    seed: u64,
) -> Result<StreamOutcome> {
    cfg.validate()?;
    if cfg.n == 0 {
        return Err(Error::Config("streaming needs n ≥ 1 so the window can slide".into()));
    }
    let clock = Instant::now();
    let mut st = StreamState::new(weights.clone(), input_tokens);
    let mut events = Vec::new();
    let mut cache: Option<DecodeCache> = None;
    let mut next_logits: Option<(Vec<f32>, usize)> = None;
    let mut max_width = 0;
    let mut prefill_secs = None;
    let window = cfg.n + cfg.m;

    let terminal = loop {
        while st.window.len() >= window {
            let (x, y) = st.window[..window].split_at(cfg.n);
            let absorbed = absorb_context_at(
                &st.weights,
                x,
                y,
                cfg,
                seed.wrapping_add(st.round as u64),
                st.position_offset,
            );
            let (adapters, report) = match absorbed {
                Err(e) if is_capacity(&e) => break,
                other => other?,
            };
            st.weights = lora_merge(&st.weights, &adapters)?;
            max_width = max_width.max(report.max_attention_width);
            events.push(StreamEvent::AbsorptionRound {
                round: st.round,
                position_offset: st.position_offset,
                steps_executed: report.steps_executed,
                optimizer_steps: report.optimizer_steps,
                terminated_by: report.terminated_by,
                initial_loss: report.initial_loss,
                final_loss: report.final_loss,
                attention_width: report.max_attention_width,
                wall_time_secs: report.wall_time_secs,
            });
            st.window.drain(..cfg.n);
            st.position_offset += cfg.n;
            st.round += 1;
            cache = None;
            next_logits = None;
        }
        if st.window.len() >= window {
            break StreamEvent::BudgetExhausted { reason: BudgetReason::Capacity, generated: st.emitted.len() };
        }
        if st.emitted.len() >= opts.max_new_tokens {
            break StreamEvent::BudgetExhausted { reason: BudgetReason::MaxNewTokens, generated: st.emitted.len() };
        }

        if next_logits.is_none() {
            let step = match cache.as_mut() {
                None => {
                    let mut c = DecodeCache::new(&st.weights.config, st.position_offset);
                    prefill(&st.weights, None, &mut c, &st.window).map(|l| {
                        let last = l.row(l.shape()[0] - 1).to_vec();
                        (last, c)
                    })
                }
                Some(c) => {
                    let last = *st.window.last().expect("window nonempty");
                    forward_incremental(&st.weights, None, c, last).map(|l| (l, c.clone()))
                }
            };
            let (logits, c) = match step {
                Err(e) if is_capacity(&e) => {
                    break StreamEvent::BudgetExhausted { reason: BudgetReason::Capacity, generated: st.emitted.len() }
                }
                other => other?,
            };
            let width = c.last_attention_width();
            max_width = max_width.max(width);
            cache = Some(c);
            next_logits = Some((logits, width));
        }
        if prefill_secs.is_none() {
            prefill_secs = Some(clock.elapsed().as_secs_f64());
        }

        let (logits, width) = next_logits.take().expect("computed above");
        let z = greedy_next_token(&logits);
        if Some(z) == opts.eos {
            break StreamEvent::Eos { generated: st.emitted.len() };
        }
        events.push(StreamEvent::GeneratedToken {
            index: st.emitted.len(),
            token: z,
            position: st.total_consumed(),
            attention_width: width,
        });
        st.window.push(z);
        st.emitted.push(z);
    };
    events.push(terminal);

    Ok(StreamOutcome {
        tokens: st.emitted,
        events,
        weights: st.weights,
        rounds: st.round,
        max_attention_width: max_width,
        timings: StreamTimings {
            prefill_secs: prefill_secs.unwrap_or_else(|| clock.elapsed().as_secs_f64()),
            total_secs: clock.elapsed().as_secs_f64(),
        },
    })
}
