//! Latency, agreement with the full-context model, token F1 and ablation grids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::absorption::{absorb_context_at, AbsorptionConfig, AlignmentTarget, LossNorm, PositionMode};
use crate::corpus::{make_recall_task, recall_document};
use crate::error::{Error, Result};
use crate::model::{
    forward_full, forward_incremental, greedy_generate, greedy_next_token, prefill, DecodeCache,
    HiddenStateTrace, LoraAdapterSet, ModelWeights,
};
use crate::streaming::{absorber_generate_with, attended_positions_per_token, CostMode, StreamOptions};
use crate::tensor::Tensor;
use crate::tokenizer::encode;

pub const DEFAULT_K_GEN: usize = 128;

// ── latency ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub mode: CostMode,
    pub prefix_len: usize,
    pub k_gen: usize,
    pub t_prefill: f64,
    pub t_gen: f64,
    /// `(T_gen(N+K) − T_prefill(N)) / K`, median over trials.
    pub latency: f64,
    pub cost_model: usize,
}

pub const LATENCY_CSV_HEADER: &str = "mode,N,K_gen,T_prefill,T_gen,L_N,cost_model";

impl LatencyRecord {
    pub fn csv_row(&self) -> String {
        let mode = match self.mode {
            CostMode::Standard => "standard",
            CostMode::Absorber => "absorber",
        };
        format!(
            "{mode},{},{},{:.6},{:.6},{:.9},{}",
            self.prefix_len, self.k_gen, self.t_prefill, self.t_gen, self.latency, self.cost_model
        )
    }
}

pub fn latency_csv(records: &[LatencyRecord]) -> String {
    let mut out = format!("{LATENCY_CSV_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Deterministic printable prefix.
pub fn synthetic_prefix(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(32..127)).collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// One timed run: `(T_prefill, T_gen)` in seconds, both from the same clock.
fn time_once(
    weights: &ModelWeights,
    mode: CostMode,
    prefix: &[u32],
    k_gen: usize,
    cfg: &AbsorptionConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    match mode {
        CostMode::Standard => {
            let clock = Instant::now();
            let mut cache = DecodeCache::new(&weights.config, 0);
            let logits = prefill(weights, None, &mut cache, prefix)?;
            let mut next = greedy_next_token(logits.row(prefix.len() - 1));
            let t_prefill = clock.elapsed().as_secs_f64();
            for _ in 1..k_gen {
                next = greedy_next_token(&forward_incremental(weights, None, &mut cache, next)?);
            }
            std::hint::black_box(next);
            Ok((t_prefill, clock.elapsed().as_secs_f64()))
        }
        CostMode::Absorber => {
            let out = absorber_generate_with(weights, prefix, cfg, StreamOptions { max_new_tokens: k_gen, eos: None }, seed)?;
            if out.tokens.len() != k_gen {
                return Err(Error::Contract(format!(
                    "absorber stream produced {} of {k_gen} tokens",
                    out.tokens.len()
                )));
            }
            Ok((out.timings.prefill_secs, out.timings.total_secs))
        }
    }
}

/// Median amortized per-token latency after a prefix of `prefix_len` tokens.
pub fn measure_latency(
    weights: &ModelWeights,
    mode: CostMode,
    prefix_len: usize,
    k_gen: usize,
    trials: usize,
    cfg: &AbsorptionConfig,
    seed: u64,
) -> Result<LatencyRecord> {
    if prefix_len == 0 || trials == 0 || k_gen == 0 {
        return Err(Error::Contract("latency needs N ≥ 1, K ≥ 1 and trials ≥ 1".into()));
    }
    let prefix = synthetic_prefix(prefix_len, seed);
    let (mut pre, mut gen, mut lat) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..trials {
        let (p, g) = time_once(weights, mode, &prefix, k_gen, cfg, seed)?;
        pre.push(p);
        gen.push(g);
        lat.push(((g - p) / k_gen as f64).max(0.0));
    }
    Ok(LatencyRecord {
        mode,
        prefix_len,
        k_gen,
        t_prefill: median(&mut pre),
        t_gen: median(&mut gen),
        latency: median(&mut lat),
        cost_model: attended_positions_per_token(mode, prefix_len, cfg.n, cfg.m),
    })
}

// ── agreement ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub label: String,
    pub top1_agreement: f64,
    pub mean_abs_logit_diff: f64,
    pub mean_hidden_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Oracle continuation `Y'`.
    pub continuation: Vec<u32>,
    pub arms: Vec<ArmScore>,
}

impl AgreementReport {
    pub fn arm(&self, label: &str) -> Option<&ArmScore> {
        self.arms.iter().find(|a| a.label == label)
    }
}

pub const ARM_PRE: &str = "pre_absorption";
pub const ARM_POST: &str = "post_absorption";
pub const ARM_ORACLE: &str = "oracle";

/// The oracle's greedy continuation of `XY` and its outputs on it.
#[derive(Clone, Debug)]
pub struct OracleContinuation {
    pub n: usize,
    pub y_len: usize,
    pub continuation: Vec<u32>,
    /// `[holdout, vocab]`, row `i` predicts `continuation[i]`.
    pub logits: Tensor,
    pub hidden: HiddenStateTrace,
}

pub fn oracle_continuation(base: &ModelWeights, x: &[u32], y: &[u32], holdout_len: usize) -> Result<OracleContinuation> {
    if holdout_len == 0 {
        return Err(Error::Contract("holdout_len must be at least 1".into()));
    }
    if y.is_empty() {
        return Err(Error::Contract("agreement needs a nonempty Y".into()));
    }
    let xy: Vec<u32> = x.iter().chain(y).copied().collect();
    let continuation = greedy_generate(base, &xy, 0, holdout_len, None)?;
    let mut seq = xy;
    seq.extend_from_slice(&continuation[..holdout_len - 1]);
    let out = forward_full(base, None, &seq, 0, true)?;
    let first = x.len() + y.len() - 1;
    Ok(OracleContinuation {
        n: x.len(),
        y_len: y.len(),
        logits: rows(&out.logits, first, holdout_len)?,
        hidden: out.trace.expect("captured").slice(first, holdout_len)?,
        continuation,
    })
}

fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let w = t.last_dim();
    Tensor::new(vec![len, w], t.data()[start * w..(start + len) * w].to_vec())
}

/// Contextless model on `Y Y'` (placed after `X`'s positions) against the oracle.
pub fn score_arm(
    label: &str,
    weights: &ModelWeights,
    adapters: Option<&LoraAdapterSet>,
    y: &[u32],
    oracle: &OracleContinuation,
) -> Result<ArmScore> {
    let h = oracle.continuation.len();
    let mut seq = y.to_vec();
    seq.extend_from_slice(&oracle.continuation[..h - 1]);
    let out = forward_full(weights, adapters, &seq, oracle.n, true)?;
    let logits = rows(&out.logits, y.len() - 1, h)?;
    let hidden = out.trace.expect("captured").slice(y.len() - 1, h)?;

    let agree = (0..h).filter(|&i| greedy_next_token(logits.row(i)) == greedy_next_token(oracle.logits.row(i))).count();
    let logit_diff = mean_abs(logits.data(), oracle.logits.data());
    let mut hidden_sum = 0.0;
    let mut count = 0usize;
    for (a, b) in hidden.layers.iter().zip(&oracle.hidden.layers) {
        hidden_sum += mean_abs(a.data(), b.data()) * a.numel() as f64;
        count += a.numel();
    }
    Ok(ArmScore {
        label: label.to_string(),
        top1_agreement: agree as f64 / h as f64,
        mean_abs_logit_diff: logit_diff,
        mean_hidden_l1: hidden_sum / count as f64,
    })
}

fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len().max(1) as f64
}

/// Pre-absorption, post-absorption and oracle arms on the oracle's continuation.
pub fn agreement_eval(
    base: &ModelWeights,
    absorbed: &ModelWeights,
    x: &[u32],
    y: &[u32],
    holdout_len: usize,
) -> Result<AgreementReport> {
    let oracle = oracle_continuation(base, x, y, holdout_len)?;
    let arms = vec![
        score_arm(ARM_PRE, base, None, y, &oracle)?,
        score_arm(ARM_POST, absorbed, None, y, &oracle)?,
        ArmScore { label: ARM_ORACLE.into(), top1_agreement: 1.0, mean_abs_logit_diff: 0.0, mean_hidden_l1: 0.0 },
    ];
    Ok(AgreementReport { continuation: oracle.continuation, arms })
}

// ── token F1 ───────────────────────────────────────────────────────────

/// Bag-of-tokens F1: shared count from the multiset intersection.
pub fn token_f1<T: std::hash::Hash + Eq>(predicted: &[T], reference: &[T]) -> f64 {
    if predicted.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut shared = 0usize;
    for t in predicted {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    if shared == 0 {
        return 0.0;
    }
    let p = shared as f64 / predicted.len() as f64;
    let r = shared as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

// ── ablation grid ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub alignment_target: Vec<AlignmentTarget>,
    pub loss_norm: Vec<LossNorm>,
    pub position_mode: Vec<PositionMode>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n: vec![32],
            m: vec![64],
            alignment_target: vec![AlignmentTarget::HiddenStates],
            loss_norm: vec![LossNorm::L1],
            position_mode: vec![PositionMode::AbsoluteOffset],
        }
    }
}

impl GridSpec {
    pub fn combinations(&self) -> usize {
        self.n.len() * self.m.len() * self.alignment_target.len() * self.loss_norm.len() * self.position_mode.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub final_sync_loss: Option<f64>,
    pub steps_executed: usize,
    pub agreement_pre: f64,
    pub agreement: f64,
    pub logit_diff_pre: f64,
    pub logit_diff: f64,
    pub hidden_l1: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub n: usize,
    pub m: usize,
    pub alignment_target: AlignmentTarget,
    pub loss_norm: LossNorm,
    pub position_mode: PositionMode,
    pub seed: u64,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

/// Produces the `(X, Y)` pair for a cell.
pub trait EpisodeSource {
    fn episode(&self, n: usize, m: usize, seed: u64) -> Result<(Vec<u32>, Vec<u32>)>;
}

/// Recall documents cut into `X = first n tokens`, `Y = next m`.
#[derive(Clone, Debug)]
pub struct RecallEpisodes {
    pub num_pairs: usize,
}

impl EpisodeSource for RecallEpisodes {
    fn episode(&self, n: usize, m: usize, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
        let task = make_recall_task(self.num_pairs, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe915);
        let mut tokens = Vec::new();
        while tokens.len() < n + m {
            tokens.extend(encode(recall_document(&task, 16, &mut rng).as_bytes()));
        }
        tokens.truncate(n + m);
        let y = tokens.split_off(n);
        Ok((tokens, y))
    }
}

/// Absorb, score against the oracle and roll out; one cell, one seed.
pub fn run_cell(
    base: &ModelWeights,
    cfg: &AbsorptionConfig,
    episodes: &dyn EpisodeSource,
    seed: u64,
    holdout_len: usize,
) -> Result<CellMetrics> {
    let (x, y) = episodes.episode(cfg.n, cfg.m, seed)?;
    let (adapters, report) = absorb_context_at(base, &x, &y, cfg, seed, 0)?;
    let oracle = oracle_continuation(base, &x, &y, holdout_len)?;
    let pre = score_arm(ARM_PRE, base, None, &y, &oracle)?;
    let post = score_arm(ARM_POST, base, Some(&adapters), &y, &oracle)?;
    let merged = crate::model::lora_merge(base, &adapters)?;
    let rollout = greedy_generate(&merged, &y, cfg.n, holdout_len, None)?;
    Ok(CellMetrics {
        final_sync_loss: report.final_loss,
        steps_executed: report.steps_executed,
        agreement_pre: pre.top1_agreement,
        agreement: post.top1_agreement,
        logit_diff_pre: pre.mean_abs_logit_diff,
        logit_diff: post.mean_abs_logit_diff,
        hidden_l1: post.mean_hidden_l1,
        f1: token_f1(&rollout, &oracle.continuation),
    })
}

/// Every combination of the grid axes, each with every seed. Cell failures
/// are recorded and the grid continues.
pub fn run_ablation_grid(
    grid: &GridSpec,
    base_cfg: &AbsorptionConfig,
    weights: &ModelWeights,
    episodes: &dyn EpisodeSource,
    seeds: &[u64],
    holdout_len: usize,
) -> Result<Vec<AblationCell>> {
    if grid.combinations() * seeds.len() == 0 {
        return Err(Error::Config("ablation grid has an empty axis or no seeds".into()));
    }
    let mut cells = Vec::with_capacity(grid.combinations() * seeds.len());
    for &n in &grid.n {
        for &m in &grid.m {
            for &alignment_target in &grid.alignment_target {
                for &loss_norm in &grid.loss_norm {
                    for &position_mode in &grid.position_mode {
                        for &seed in seeds {
                            let cfg = AbsorptionConfig {
                                n,
                                m,
                                alignment_target,
                                loss_norm,
                                position_mode,
                                ..base_cfg.clone()
                            };
                            let result = run_cell(weights, &cfg, episodes, seed, holdout_len);
                            let (metrics, error) = match result {
                                Ok(m) => (Some(m), None),
                                Err(e) => (None, Some(e.to_string())),
                            };
                            cells.push(AblationCell { n, m, alignment_target, loss_norm, position_mode, seed, metrics, error });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    N,
    M,
    AlignmentTarget,
    LossNorm,
    PositionMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Agreement,
    LogitDiff,
    HiddenL1,
    F1,
    FinalSyncLoss,
}

fn axis_label(cell: &AblationCell, axis: Axis) -> String {
    match axis {
        Axis::N => cell.n.to_string(),
        Axis::M => cell.m.to_string(),
        Axis::AlignmentTarget => match cell.alignment_target {
            AlignmentTarget::HiddenStates => "Hidden States",
            AlignmentTarget::TokenDistribution => "Token Distribution",
            AlignmentTarget::TttReconstruction => "TTT Reconstruction",
        }
        .into(),
        Axis::LossNorm => match cell.loss_norm {
            LossNorm::L1 => "L1",
            LossNorm::L2 => "L2",
        }
        .into(),
        Axis::PositionMode => match cell.position_mode {
            PositionMode::AbsoluteOffset => "absolute_offset",
            PositionMode::Reset => "reset",
        }
        .into(),
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::N => "n",
        Axis::M => "m",
        Axis::AlignmentTarget => "alignment",
        Axis::LossNorm => "loss norm",
        Axis::PositionMode => "positions",
    }
}

fn metric_value(m: &CellMetrics, metric: Metric) -> Option<f64> {
    match metric {
        Metric::Agreement => Some(100.0 * m.agreement),
        Metric::LogitDiff => Some(m.logit_diff),
        Metric::HiddenL1 => Some(m.hidden_l1),
        Metric::F1 => Some(100.0 * m.f1),
        Metric::FinalSyncLoss => m.final_sync_loss,
    }
}

/// Seed-averaged table with `rows` down and `cols` across.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub row_axis: Axis,
    pub col_axis: Axis,
    pub metric: Metric,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `values[r][c]`, `None` when every cell failed.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn tabulate(cells: &[AblationCell], row_axis: Axis, col_axis: Axis, metric: Metric) -> AblationTable {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for c in cells {
        let (r, k) = (axis_label(c, row_axis), axis_label(c, col_axis));
        if !rows.contains(&r) {
            rows.push(r);
        }
        if !cols.contains(&k) {
            cols.push(k);
        }
    }
    let mut sums = vec![vec![(0.0, 0usize); cols.len()]; rows.len()];
    for c in cells {
        let Some(v) = c.metrics.as_ref().and_then(|m| metric_value(m, metric)) else { continue };
        let r = rows.iter().position(|x| *x == axis_label(c, row_axis)).expect("collected");
        let k = cols.iter().position(|x| *x == axis_label(c, col_axis)).expect("collected");
        sums[r][k].0 += v;
        sums[r][k].1 += 1;
    }
    let values = sums
        .into_iter()
        .map(|row| row.into_iter().map(|(s, k)| (k > 0).then(|| s / k as f64)).collect())
        .collect();
    AblationTable { row_axis, col_axis, metric, rows, cols, values }
}

impl AblationTable {
    pub fn value(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        self.values[r][c]
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let corner = format!("{} \\ {}", axis_name(self.row_axis), axis_name(self.col_axis));
        let _ = writeln!(out, "| {corner} | {} |", self.cols.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.cols.len()));
        for (r, row) in self.rows.iter().zip(&self.values) {
            let vals: Vec<String> = row.iter().map(|v| v.map_or("failed".into(), |x| format!("{x:.2}"))).collect();
            let _ = writeln!(out, "| {r} | {} |", vals.join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", axis_name(self.row_axis), self.cols.join(","));
        for (r, row) in self.rows.iter().zip(&self.values) {
            let vals: Vec<String> = row.iter().map(|v| v.map_or(String::new(), |x| format!("{x}"))).collect();
            let _ = writeln!(out, "{r},{}", vals.join(","));
        }
        out
    }
}

/// One JSON record per cell.
pub fn cells_to_jsonl(cells: &[AblationCell]) -> String {
    cells.iter().map(|c| serde_json::to_string(c).expect("plain data") + "\n").collect()
}
