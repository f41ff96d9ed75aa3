//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any hard criterion fails.
//!
//! The pretrained toy model is cached under the cargo target directory, so
//! only the first run pays for pretraining.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use absorber_core::absorption::{absorb_context_at, capture_oracle_trace, sync_loss_value, AbsorptionConfig, AlignmentTarget, Termination};
use absorber_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Provenance};
use absorber_core::corpus::{build_pretraining_corpus, make_recall_task, pretrain_toy_with, PretrainOptions, RecallCorpusConfig};
use absorber_core::eval::{
    measure_latency, oracle_continuation, run_ablation_grid, score_arm, tabulate, token_f1, Axis, EpisodeSource, GridSpec, Metric,
    RecallEpisodes,
};
use absorber_core::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE, OPS};
use absorber_core::model::{
    forward_full, forward_incremental, greedy_generate, init_model, lora_merge, prefill, DecodeCache, LoraAdapterSet,
    LoraConfig, ModelConfig, ModelWeights,
};
use absorber_core::streaming::{absorber_generate_with, absorption_rounds, CostMode, StreamOptions};
use absorber_core::tokenizer::encode;
use absorber_core::Error;

// ── pretrained fixtures ────────────────────────────────────────────────

/// A pretrained model, cached by a digest of everything that determines it.
struct Fixture {
    name: &'static str,
    env: &'static str,
    model: ModelConfig,
    corpus: RecallCorpusConfig,
    steps: usize,
}

impl Fixture {
    fn cache_path(&self) -> PathBuf {
        let key = format!("{:?}{:?}{:?}{}", self.model, self.corpus, PretrainOptions::default(), self.steps);
        let digest = key.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
        PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}-{digest:016x}.absb", self.name))
    }

    fn load_or_train(&self) -> ModelWeights {
        if let Ok(p) = std::env::var(self.env) {
            return load_checkpoint(std::path::Path::new(&p)).unwrap().0;
        }
        let path = self.cache_path();
        if let Ok((w, _)) = load_checkpoint(&path) {
            return w;
        }
        eprintln!("pretraining {} model ({} steps), cached at {}", self.name, self.steps, path.display());
        let corpus = build_pretraining_corpus(None, &self.corpus, 0).unwrap();
        let clock = Instant::now();
        let report = pretrain_toy_with(&self.model, &corpus, self.steps, 0, &PretrainOptions::default(), |s, l| {
            if s % 500 == 0 {
                eprintln!("  step {s} loss {l:.3} ({:.0}s)", clock.elapsed().as_secs_f64());
            }
        })
        .unwrap();
        assert!(report.heldout_final < report.heldout_initial);
        let prov = Provenance { seed: 0, steps: self.steps as u64, note: Some(format!("acceptance {} fixture", self.name)) };
        save_checkpoint(&report.weights, &prov, &path).unwrap();
        report.weights
    }
}

/// The L=4, d=128 model named by the convergence criterion, trained on recall
/// text until it retrieves values from its context.
fn toy_model() -> &'static ModelWeights {
    static MODEL: OnceLock<ModelWeights> = OnceLock::new();
    MODEL.get_or_init(|| {
        Fixture {
            name: "toy",
            env: "ACCEPTANCE_MODEL",
            model: ModelConfig { num_layers: 4, hidden_dim: 128, num_heads: 4, mlp_dim: 512, ..Default::default() },
            corpus: RecallCorpusConfig::default(),
            steps: 5000,
        }
        .load_or_train()
    })
}

// ── harness ────────────────────────────────────────────────────────────

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn random_tokens(rng: &mut impl Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(32..127)).collect()
}

// ── criteria ───────────────────────────────────────────────────────────

fn c1_gradients() -> Outcome {
    let clock = Instant::now();
    let reports = run_suite(OPS, 100, 1, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 60.0 && reports.iter().all(|r| r.cases == 100),
        format!("{} ops x 100 cases, worst rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 60s), failed {failed:?}", reports.len()),
    )
}

fn c2_empty_context() -> Outcome {
    let w = toy_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for seed in 0..5 {
        let y = random_tokens(&mut rng, 64);
        let cfg = AbsorptionConfig { n: 0, m: 64, ..Default::default() };
        let adapters = LoraAdapterSet::init(&w.config, &cfg.lora, seed).unwrap();
        let oracle = capture_oracle_trace(w, &y, 0, 64).unwrap();
        let student = forward_full(w, Some(&adapters), &y, 0, true).unwrap().trace.unwrap();
        let loss = sync_loss_value(&oracle, &student, cfg.norm_mode, cfg.loss_norm).unwrap();
        worst = worst.max(loss.abs());
        let (_, report) = absorb_context_at(w, &[], &y, &cfg, seed, 0).unwrap();
        steps += report.optimizer_steps;
        if report.terminated_by != Termination::Threshold || report.final_loss != Some(0.0) {
            return outcome(false, format!("seed {seed}: {:?} final {:?}", report.terminated_by, report.final_loss));
        }
    }
    outcome(worst == 0.0 && steps == 0, format!("sync_loss {worst} (== 0), optimizer steps {steps} (== 0), 5 seeds"))
}

fn c3_kv_cache() -> Outcome {
    let w = toy_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = rng.gen_range(2..=256);
        let seq = random_tokens(&mut rng, len);
        let full = forward_full(w, None, &seq, 0, false).unwrap().logits;
        let mut cache = DecodeCache::new(&w.config, 0);
        let first = prefill(w, None, &mut cache, &seq[..1]).unwrap();
        worst = worst.max(max_diff(first.row(0), full.row(0)));
        for (i, &t) in seq.iter().enumerate().skip(1) {
            let row = forward_incremental(w, None, &mut cache, t).unwrap();
            worst = worst.max(max_diff(&row, full.row(i)));
        }
    }
    outcome(worst <= 1e-5, format!("max |logit diff| {worst:.2e} (<= 1e-5) over 50 sequences up to 256 tokens"))
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn c4_adapters() -> Outcome {
    let w = toy_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = AbsorptionConfig { n: 32, m: 64, max_steps: 50, epsilon: 0.0, ..Default::default() };
    let mut absorbed = Vec::new();
    for seed in 0..4 {
        let (x, y) = EPISODES.episode(cfg.n, cfg.m, seed).unwrap();
        absorbed.push(absorb_context_at(w, &x, &y, &cfg, seed, 0).unwrap().0);
    }
    let mut zero_changed = 0;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let len = rng.gen_range(4..96);
        let seq = random_tokens(&mut rng, len);
        let zero = LoraAdapterSet::init(&w.config, &LoraConfig::default(), i).unwrap();
        let base = forward_full(w, None, &seq, 0, false).unwrap().logits;
        let with_zero = forward_full(w, Some(&zero), &seq, 0, false).unwrap().logits;
        if base.data().iter().zip(with_zero.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            zero_changed += 1;
        }
        let trained = &absorbed[i as usize % absorbed.len()];
        let adapted = forward_full(w, Some(trained), &seq, 0, false).unwrap().logits;
        let merged = forward_full(&lora_merge(w, trained).unwrap(), None, &seq, 0, false).unwrap().logits;
        worst = worst.max(adapted.max_abs_diff(&merged));
    }
    outcome(
        zero_changed == 0 && worst <= 1e-5,
        format!(
            "zero adapters changed {zero_changed}/20 inputs (== 0); merged vs adapted max diff {worst:.2e} (<= 1e-5) with absorbed adapters"
        ),
    )
}

/// Recall episode cut to `n + m` tokens.
const EPISODES: RecallEpisodes = RecallEpisodes { num_pairs: 4 };

fn c5_convergence() -> Outcome {
    let w = toy_model();
    let cfg = AbsorptionConfig { n: 32, m: 64, max_steps: 200, learning_rate: 5e-4, epsilon: 0.0, ..Default::default() };
    let mut ratios = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..10 {
        let (x, y) = EPISODES.episode(32, 64, seed).unwrap();
        let clock = Instant::now();
        let (_, r) = absorb_context_at(w, &x, &y, &cfg, seed, 0).unwrap();
        slowest = slowest.max(clock.elapsed().as_secs_f64());
        ratios.push(r.final_loss.unwrap() / r.initial_loss.unwrap());
    }
    let ratio = mean(&ratios);
    outcome(
        ratio <= 0.25 && slowest < 300.0,
        format!("mean final/initial {ratio:.3} (<= 0.25) over 10 seeds, slowest seed {slowest:.1}s (< 300s)"),
    )
}

/// X is the full context of a recall task and Y the unanswered prompt of one
/// probe, so the answer and everything after it must come from X.
fn context_episode(pairs: usize, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let task = make_recall_task(pairs, seed).unwrap();
    let probe = &task.probes[seed as usize % pairs];
    (task.context_tokens(), encode(format!(" {}", probe.prompt).as_bytes()))
}

fn c6_generalization() -> Outcome {
    let w = toy_model();
    let base = AbsorptionConfig { max_steps: 100, learning_rate: 5e-4, epsilon: 0.0, ..Default::default() };
    let (mut pre, mut post, mut ttt) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..20 {
        let (x, y) = context_episode(4, 600 + seed);
        let cfg = AbsorptionConfig { n: x.len(), m: y.len(), ..base.clone() };
        let oracle = oracle_continuation(w, &x, &y, 32).unwrap();
        let (absorbed, _) = absorb_context_at(w, &x, &y, &cfg, seed, 0).unwrap();
        let ttt_cfg = AbsorptionConfig { alignment_target: AlignmentTarget::TttReconstruction, ..cfg };
        let (reconstructed, _) = absorb_context_at(w, &x, &y, &ttt_cfg, seed, 0).unwrap();
        pre.push(score_arm("pre", w, None, &y, &oracle).unwrap().top1_agreement);
        post.push(score_arm("post", w, Some(&absorbed), &y, &oracle).unwrap().top1_agreement);
        ttt.push(score_arm("ttt", w, Some(&reconstructed), &y, &oracle).unwrap().top1_agreement);
    }
    let (pre, post, ttt) = (mean(&pre), mean(&post), mean(&ttt));
    let gain = 100.0 * (post - pre);
    outcome(
        gain >= 15.0 && post > ttt,
        format!(
            "20 seeds, 100 steps: agreement pre {:.1}%, post {:.1}%, ttt {:.1}%; gain {gain:.1} pp (>= 15) of {:.1} pp headroom, post > ttt = {}",
            100.0 * pre,
            100.0 * post,
            100.0 * ttt,
            100.0 * (1.0 - pre),
            post > ttt
        ),
    )
}

fn c7_constant_cost() -> Outcome {
    let w = toy_model();
    let cfg = AbsorptionConfig { n: 32, m: 64, max_steps: 2, ..Default::default() };
    let window = cfg.n + cfg.m;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prompt = random_tokens(&mut rng, 4 * window);
    let opts = StreamOptions { max_new_tokens: 12 * window, eos: None };
    let out = absorber_generate_with(w, &prompt, &cfg, opts, 7).unwrap();
    let total = prompt.len() + out.tokens.len();
    let hard = total >= 16 * window && out.max_attention_width <= window;

    let bench_cfg = AbsorptionConfig { max_steps: 2, ..cfg };
    let lens = [256, 512, 1024, 2048];
    let lat = |mode| -> Vec<f64> {
        lens.iter().map(|&n| measure_latency(w, mode, n, 128, 5, &bench_cfg, 0).unwrap().latency).collect()
    };
    let standard = lat(CostMode::Standard);
    let absorber = lat(CostMode::Absorber);
    let increasing = standard.windows(2).all(|p| p[1] > p[0]);
    let flat = absorber[3] <= 1.5 * absorber[0];
    let ms = |v: &[f64]| v.iter().map(|x| format!("{:.3}", 1e3 * x)).collect::<Vec<_>>().join("/");
    outcome(
        hard,
        format!(
            "stream of {total} tokens (>= {}), max attention width {} (<= {window}); soft: standard L(N) ms {} increasing={increasing}, absorber ms {} L(2048)<=1.5xL(256)={flat}",
            16 * window,
            out.max_attention_width,
            ms(&standard),
            ms(&absorber)
        ),
    )
}

fn c8_alignment_ablation() -> Outcome {
    let w = toy_model();
    let cfg = AbsorptionConfig { max_steps: 100, learning_rate: 5e-4, epsilon: 0.0, ..Default::default() };
    let grid = GridSpec {
        alignment_target: vec![AlignmentTarget::TokenDistribution, AlignmentTarget::HiddenStates],
        ..Default::default()
    };
    let seeds: Vec<u64> = (800..820).collect();
    let cells = run_ablation_grid(&grid, &cfg, w, &EPISODES, &seeds, 32).unwrap();
    let diff = |target, seed| {
        cells
            .iter()
            .find(|c| c.alignment_target == target && c.seed == seed)
            .and_then(|c| c.metrics.as_ref())
            .map(|m| m.logit_diff)
    };
    let wins = seeds
        .iter()
        .filter(|&&s| match (diff(AlignmentTarget::HiddenStates, s), diff(AlignmentTarget::TokenDistribution, s)) {
            (Some(h), Some(t)) => h <= t,
            _ => false,
        })
        .count();
    let table = tabulate(&cells, Axis::AlignmentTarget, Axis::M, Metric::LogitDiff);
    let rows_present = table.value("Hidden States", "64").is_some() && table.value("Token Distribution", "64").is_some();
    println!("{}", table.to_markdown());
    outcome(
        wins * 10 >= 7 * seeds.len() && rows_present,
        format!("hidden_states logit diff <= token_distribution on {wins}/{} seeds (>= 70%), 100 steps each", seeds.len()),
    )
}

fn c9_window_arithmetic() -> Outcome {
    let w = init_model(&ModelConfig { num_layers: 1, hidden_dim: 16, num_heads: 2, mlp_dim: 32, max_positions: 1024, ..Default::default() }, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = Vec::new();
    for case in 0..25 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let prompt_len = rng.gen_range(0..=3 * (n + m));
        let max_new = rng.gen_range(0..=40);
        let cfg = AbsorptionConfig { n, m, max_steps: 1, lora: LoraConfig { rank: 2, ..Default::default() }, ..Default::default() };
        let prompt = random_tokens(&mut rng, prompt_len);
        let out = absorber_generate_with(&w, &prompt, &cfg, StreamOptions { max_new_tokens: max_new, eos: None }, case).unwrap();
        let expected = simulate_rounds(prompt.len().max(1), out.tokens.len(), n, m);
        let closed = absorption_rounds(prompt.len().max(1) + out.tokens.len(), n, m);
        if out.rounds != expected || out.rounds != closed || out.tokens.len() != max_new {
            mismatches.push((case, out.rounds, expected, closed));
        }
    }
    // degenerate case: no round can trigger
    let cfg = AbsorptionConfig { n: 64, m: 64, ..Default::default() };
    let prompt = random_tokens(&mut rng, 20);
    let out = absorber_generate_with(&w, &prompt, &cfg, StreamOptions { max_new_tokens: 40, eos: None }, 0).unwrap();
    let greedy = greedy_generate(&w, &prompt, 0, 40, None).unwrap();
    let same = out.rounds == 0 && out.tokens == greedy;
    outcome(
        mismatches.is_empty() && same,
        format!("25 settings, round-count mismatches {mismatches:?}; no-round stream == greedy: {same}"),
    )
}

/// Pencil-and-paper window: append one token at a time, slide by `n`
/// whenever the window holds `n + m`.
fn simulate_rounds(prompt_len: usize, generated: usize, n: usize, m: usize) -> usize {
    let (mut z, mut rounds) = (0, 0);
    for _ in 0..prompt_len + generated {
        z += 1;
        while z >= n + m {
            z -= n;
            rounds += 1;
        }
    }
    rounds
}

fn c10_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut exact = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..10 {
        let cfg = ModelConfig {
            num_layers: rng.gen_range(1..4),
            hidden_dim: 8 * rng.gen_range(1..4),
            num_heads: 2,
            mlp_dim: rng.gen_range(4..40),
            ..Default::default()
        };
        let w = init_model(&cfg, rng.gen()).unwrap();
        let path = dir.path().join(format!("m{i}.absb"));
        save_checkpoint(&w, &Provenance { seed: i, steps: 0, note: None }, &path).unwrap();
        if load_checkpoint(&path).unwrap().0.bitwise_eq(&w) {
            exact += 1;
        }
    }
    let w = init_model(&ModelConfig { num_layers: 1, hidden_dim: 8, num_heads: 2, mlp_dim: 8, ..Default::default() }, 0).unwrap();
    let bytes = encode_checkpoint(&w, &Provenance::default());
    let p = std::path::Path::new("bad.absb");
    let truncated = decode_checkpoint(&bytes[..bytes.len() - 3], p).unwrap_err();
    let mut flipped = bytes.clone();
    flipped[1] ^= 0xff;
    let magic = decode_checkpoint(&flipped, p).unwrap_err();
    let mut versioned = bytes;
    versioned[4] = 2;
    let version = decode_checkpoint(&versioned, p).unwrap_err();
    let diagnostics = matches!(truncated, Error::Corrupt { .. })
        && matches!(magic, Error::Corrupt { .. })
        && matches!(version, Error::Version { found: 2, .. })
        && [&truncated, &magic, &version].iter().all(|e| e.to_string().contains("bad.absb"));
    outcome(
        exact == 10 && diagnostics,
        format!("bitwise round trips {exact}/10; truncated: \"{truncated}\"; wrong version: \"{version}\""),
    )
}

fn c11_token_f1() -> Outcome {
    let worked = token_f1(&['a', 'b', 'b'], &['b', 'c']);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..100 {
        let p: Vec<u8> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..5)).collect();
        let r: Vec<u8> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..5)).collect();
        if (token_f1(&p, &r) - f1_by_matching(&p, &r)).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    outcome(worked == 0.4 && mismatches == 0, format!("worked case {worked} (== 0.4), oracle mismatches {mismatches}/100"))
}

/// Greedy one-to-one matching of equal tokens.
fn f1_by_matching(p: &[u8], r: &[u8]) -> f64 {
    let mut used = vec![false; r.len()];
    let mut shared = 0usize;
    for x in p {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *x) {
            used[j] = true;
            shared += 1;
        }
    }
    if shared == 0 {
        return 0.0;
    }
    let (pr, rc) = (shared as f64 / p.len() as f64, shared as f64 / r.len() as f64);
    2.0 * pr * rc / (pr + rc)
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 gradient suite", c1_gradients),
        ("2 empty-context identity", c2_empty_context),
        ("3 kv-cache equivalence", c3_kv_cache),
        ("4 adapter identity and merge", c4_adapters),
        ("5 absorption convergence", c5_convergence),
        ("6 causal-effect generalization", c6_generalization),
        ("7 constant deduction cost", c7_constant_cost),
        ("8 alignment-granularity ablation", c8_alignment_ablation),
        ("9 window arithmetic", c9_window_arithmetic),
        ("10 persistence", c10_persistence),
        ("11 token F1", c11_token_f1),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(str::to_string).collect());
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let id = name.split(' ').next().unwrap();
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let verdict = if result.passed { "PASS" } else { "FAIL" };
        println!("[{verdict}] criterion {name}: {} [{:.1}s]", result.detail, clock.elapsed().as_secs_f64());
        if !result.passed {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
