use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn small_config() -> ModelConfig {
    ModelConfig { num_layers: 2, hidden_dim: 16, num_heads: 2, mlp_dim: 24, max_positions: 512, ..Default::default() }
}

/// Weights large enough that attention patterns are far from uniform.
fn noisy_model(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = ModelWeights::expected_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with("norm") {
                Tensor::from_fn(&shape, |_| rng.gen_range(0.5..1.5))
            } else {
                Tensor::randn(&shape, 0.25, &mut rng)
            };
            (name, t)
        })
        .collect();
    ModelWeights::from_tensors(cfg.clone(), tensors).unwrap()
}

fn random_tokens(rng: &mut impl Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..258)).collect()
}

fn random_adapters(cfg: &ModelConfig, seed: u64) -> LoraAdapterSet {
    let mut set = LoraAdapterSet::init(cfg, &LoraConfig { rank: 4, alpha: 8.0, ..Default::default() }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb);
    for p in &mut set.pairs {
        let shape = p.b.shape().to_vec();
        p.b = Arc::new(Tensor::randn(&shape, 0.05, &mut rng));
    }
    set
}

#[test]
fn zero_unembedding_gives_zero_logits() {
    let cfg = small_config();
    let mut w = noisy_model(&cfg, 1);
    w.unembedding = Arc::new(Tensor::zeros(&[cfg.hidden_dim, cfg.vocab_size]));
    let out = forward_full(&w, None, &[1, 2, 3], 0, false).unwrap();
    assert!(out.logits.data().iter().all(|&x| x == 0.0));
    assert_eq!(greedy_next_token(out.logits.row(2)), 0);
}

fn rms_norm(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(g).map(|(v, &g)| v * inv * g as f64).collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols).map(|j| (0..rows).map(|i| x[i] * w.data()[i * cols + j] as f64).sum()).collect()
}

#[test]
fn single_token_micro_model_matches_scalar_oracle() {
    let cfg = ModelConfig {
        num_layers: 1,
        hidden_dim: 2,
        num_heads: 1,
        mlp_dim: 3,
        vocab_size: 5,
        max_positions: 16,
        rope_base: 10000.0,
    };
    let w = noisy_model(&cfg, 9);
    let token = 3;
    let got = forward_full(&w, None, &[token], 4, true).unwrap();

    // one key: attention weight is 1 and the output is the value vector
    let l = &w.layers[0];
    let h0: Vec<f64> = w.embedding.row(token as usize).iter().map(|&x| x as f64).collect();
    let x = rms_norm(&h0, l.attn_norm.data());
    let v = vec_mat(&x, l.projection(Projection::Value));
    let a = vec_mat(&v, l.projection(Projection::Output));
    let h1: Vec<f64> = h0.iter().zip(&a).map(|(p, q)| p + q).collect();
    let x = rms_norm(&h1, l.mlp_norm.data());
    let gate = vec_mat(&x, l.projection(Projection::Gate));
    let up = vec_mat(&x, l.projection(Projection::Up));
    let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
    let down = vec_mat(&act, l.projection(Projection::Down));
    let h2: Vec<f64> = h1.iter().zip(&down).map(|(p, q)| p + q).collect();
    let logits = vec_mat(&rms_norm(&h2, w.final_norm.data()), &w.unembedding);

    for (g, o) in got.logits.data().iter().zip(&logits) {
        assert!((*g as f64 - o).abs() < 1e-5, "{g} vs {o}");
    }
    let trace = got.trace.unwrap();
    for (g, o) in trace.state(0, 1).iter().zip(&h2) {
        assert!((*g as f64 - o).abs() < 1e-5);
    }
}

#[test]
fn trace_shape_contract() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, m) = (3, 5);
    let toks = random_tokens(&mut rng, n + m);
    let trace = forward_full(&w, None, &toks, 0, true).unwrap().trace.unwrap();
    assert_eq!(trace.num_positions(), n + m);
    assert_eq!(trace.depth(), cfg.num_layers + 1);
    assert_eq!(trace.hidden_dim(), cfg.hidden_dim);
    assert_eq!(trace.positions, (0..8).collect::<Vec<_>>());
    let tail = trace.slice(n, m).unwrap();
    assert_eq!(tail.positions, (3..8).collect::<Vec<_>>());
    assert!(forward_full(&w, None, &toks, 0, false).unwrap().trace.is_none());
}

#[test]
fn causality_exact() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let toks = random_tokens(&mut rng, 20);
    let mut other = toks.clone();
    let j = 11;
    other[j] = (other[j] + 1) % 258;
    let a = forward_full(&w, None, &toks, 0, true).unwrap();
    let b = forward_full(&w, None, &other, 0, true).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(a.logits.data()[..j * v], b.logits.data()[..j * v]);
    assert_ne!(a.logits.row(j), b.logits.row(j));
    let (ta, tb) = (a.trace.unwrap(), b.trace.unwrap());
    for l in 0..=cfg.num_layers {
        for p in 0..j {
            assert_eq!(ta.state(p, l), tb.state(p, l));
        }
    }
}

#[test]
fn incremental_matches_full() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in [1, 2, 17, 64] {
        let toks = random_tokens(&mut rng, len);
        let full = forward_full(&w, None, &toks, 5, false).unwrap();
        let mut cache = DecodeCache::new(&cfg, 5);
        for (i, &t) in toks.iter().enumerate() {
            let logits = forward_incremental(&w, None, &mut cache, t).unwrap();
            assert_eq!(cache.len(), i + 1);
            assert_eq!(cache.layer_len(0), i + 1);
            assert_eq!(cache.last_attention_width(), i + 1);
            let diff = logits.iter().zip(full.logits.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-5, "len {len} pos {i} diff {diff}");
        }
    }
}

#[test]
fn chunked_prefill_matches_full() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let toks = random_tokens(&mut rng, 30);
    let full = forward_full(&w, None, &toks, 0, false).unwrap();
    let mut cache = DecodeCache::new(&cfg, 0);
    prefill(&w, None, &mut cache, &toks[..12]).unwrap();
    let rest = prefill(&w, None, &mut cache, &toks[12..]).unwrap();
    let tail = Tensor::new(vec![18, cfg.vocab_size], full.logits.data()[12 * cfg.vocab_size..].to_vec()).unwrap();
    assert!(rest.max_abs_diff(&tail) <= 1e-5);
    assert_eq!(cache.max_attention_width(), 30);
}

#[test]
fn long_prefill_spans_several_chunks() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let toks = random_tokens(&mut rng, PREFILL_CHUNK + PREFILL_CHUNK / 2 + 17);
    let full = forward_full(&w, None, &toks, 0, false).unwrap();
    let mut cache = DecodeCache::new(&cfg, 0);
    let chunked = prefill(&w, None, &mut cache, &toks).unwrap();
    assert!(chunked.max_abs_diff(&full.logits) <= 1e-5);
    assert_eq!(cache.len(), toks.len());
    assert_eq!(cache.last_attention_width(), toks.len());
}

#[test]
fn capacity_error_on_overflow() {
    let cfg = ModelConfig { max_positions: 8, ..small_config() };
    let w = noisy_model(&cfg, 6);
    assert!(forward_full(&w, None, &[1; 8], 0, false).is_ok());
    assert!(matches!(forward_full(&w, None, &[1; 8], 1, false), Err(Error::Capacity { .. })));
    let mut cache = DecodeCache::new(&cfg, 7);
    forward_incremental(&w, None, &mut cache, 1).unwrap();
    assert!(matches!(forward_incremental(&w, None, &mut cache, 1), Err(Error::Capacity { .. })));
    assert!(matches!(forward_full(&w, None, &[], 0, false), Err(Error::Contract(_))));
}

#[test]
fn zero_adapters_are_bitwise_identity() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 7);
    let adapters = LoraAdapterSet::init(&cfg, &LoraConfig::default(), 1).unwrap();
    assert!(adapters.is_zero());
    let toks = random_tokens(&mut ChaCha8Rng::seed_from_u64(4), 25);
    let a = forward_full(&w, None, &toks, 3, true).unwrap();
    let b = forward_full(&w, Some(&adapters), &toks, 3, true).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.logits), bits(&b.logits));
    assert_eq!(a.trace, b.trace);
    let merged = lora_merge(&w, &adapters).unwrap();
    assert!(merged.bitwise_eq(&w));
}

#[test]
fn merged_forward_matches_adapted_forward() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 8);
    let adapters = random_adapters(&cfg, 2);
    let merged = lora_merge(&w, &adapters).unwrap();
    let toks = random_tokens(&mut ChaCha8Rng::seed_from_u64(5), 40);
    let a = forward_full(&w, Some(&adapters), &toks, 0, false).unwrap();
    let b = forward_full(&merged, None, &toks, 0, false).unwrap();
    let plain = forward_full(&w, None, &toks, 0, false).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits) <= 1e-5);
    assert!(a.logits.max_abs_diff(&plain.logits) > 1e-3);
}

#[test]
fn merge_is_additive() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 10);
    let adapters = random_adapters(&cfg, 3);
    let once = lora_merge(&w, &adapters).unwrap();
    let twice = lora_merge(&once, &adapters).unwrap();
    assert!(!once.bitwise_eq(&twice));
    let p = &adapters.pairs[0];
    let delta = p.delta(adapters.scaling());
    let base = w.layers[p.layer].projection(p.target);
    let got = twice.layers[p.layer].projection(p.target);
    for ((g, b), d) in got.data().iter().zip(base.data()).zip(delta.data()) {
        assert!((g - (b + 2.0 * d)).abs() < 1e-5);
    }
}

#[test]
fn merge_rejects_mismatched_shapes() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 11);
    let mut adapters = random_adapters(&cfg, 4);
    adapters.pairs[0].a = Arc::new(Tensor::zeros(&[4, 3]));
    assert!(matches!(lora_merge(&w, &adapters), Err(Error::Config(_))));
}

#[test]
fn delta_matches_explicit_product() {
    let cfg = small_config();
    let adapters = random_adapters(&cfg, 5);
    let p = adapters.get(1, Projection::Down).unwrap();
    let d = p.delta(2.0);
    // delta[i][o] = 2 · Σ_k A[k][i]·B[o][k]
    let (r, inp) = (p.a.shape()[0], p.a.shape()[1]);
    let out = p.b.shape()[0];
    for i in 0..inp {
        for o in 0..out {
            let want: f32 = (0..r).map(|k| p.a.data()[k * inp + i] * p.b.data()[o * r + k]).sum::<f32>() * 2.0;
            assert!((d.data()[i * out + o] - want).abs() < 1e-5);
        }
    }
}

#[test]
fn greedy_tie_break_and_scan() {
    assert_eq!(greedy_next_token(&[0.0, 0.0, 1.0, 0.0]), 2);
    assert_eq!(greedy_next_token(&[0.5; 6]), 0);
    assert_eq!(greedy_next_token(&[1.0, 3.0, 3.0]), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let v: Vec<f32> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        assert_eq!(greedy_next_token(&v) as usize, best);
    }
}

#[test]
fn greedy_generate_matches_recompute() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 12);
    let prompt = vec![1, 2, 3];
    let fast = greedy_generate(&w, &prompt, 0, 10, None).unwrap();
    let mut seq = prompt.clone();
    for _ in 0..10 {
        let out = forward_full(&w, None, &seq, 0, false).unwrap();
        seq.push(greedy_next_token(out.logits.row(seq.len() - 1)));
    }
    assert_eq!(fast, seq[3..]);
}

#[test]
fn rotary_attention_depends_only_on_relative_position() {
    let cfg = small_config();
    let w = noisy_model(&cfg, 13);
    let toks = random_tokens(&mut ChaCha8Rng::seed_from_u64(7), 16);
    let a = forward_full(&w, None, &toks, 0, false).unwrap();
    let b = forward_full(&w, None, &toks, 100, false).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits) < 1e-3);
}
