//! Central finite-difference verification of reverse-mode gradients.
//!
//! Every primitive op in [`crate::autograd`] is exercised on random small
//! tensors in double precision. Each case projects the op output onto a fixed
//! random direction to get a scalar, then compares the tape gradient of every
//! input against `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Normalization, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Builds one op application from graph inputs.
pub type OpBuilder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One randomized check: input tensors plus the op applied to them.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub build: OpBuilder,
}

#[derive(Clone, Debug, Serialize)]
pub struct OpCheckReport {
    pub op: String,
    pub cases: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn projected_loss(
    g: &mut Graph<f64>,
    case: &GradCase,
    inputs: &[Tensor<f64>],
    direction: &mut Option<Tensor<f64>>,
    seed: u64,
    as_parameters: bool,
) -> Result<(Var, Vec<Var>)> {
    let vars = inputs
        .iter()
        .map(|t| {
            if as_parameters {
                g.parameter(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(g, &vars)?;
    let dir = direction.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        Tensor::randn(g.shape(out), 1.0, &mut rng)
    });
    let r = g.input(dir.clone())?;
    let weighted = g.mul(out, r)?;
    Ok((g.sum(weighted)?, vars))
}

/// Largest relative error over all inputs of one case.
pub fn check_case(case: &GradCase, step: f64, seed: u64) -> Result<f64> {
    let mut direction = None;
    let mut g = Graph::new();
    let (loss, vars) = projected_loss(&mut g, case, &case.inputs, &mut direction, seed, true)?;
    g.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>], direction: &mut Option<Tensor<f64>>| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = projected_loss(&mut g, case, inputs, direction, seed, false)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    for (idx, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[idx].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = case.inputs.clone();
        for e in 0..case.inputs[idx].numel() {
            let orig = case.inputs[idx].data()[e];
            probe[idx].data_mut()[e] = orig + step;
            let plus = eval(&probe, &mut direction)?;
            probe[idx].data_mut()[e] = orig - step;
            let minus = eval(&probe, &mut direction)?;
            probe[idx].data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn rand_tensor(rng: &mut ChaCha8Rng, rank: usize) -> Tensor<f64> {
    let shape = rand_shape(rng, rank);
    randn(rng, &shape)
}

/// Names of every op covered by [`make_case`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "silu",
    "rms_norm",
    "embedding_lookup",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "softmax_lastdim",
    "causal_softmax",
    "rope",
    "sum",
    "mean",
    "l1_loss",
    "squared_loss",
    "kl_divergence_lastdim",
    "cross_entropy",
    "attention_block",
];

/// A random case for `op`, or `None` for an unknown name.
pub fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Option<GradCase> {
    let case = match op {
        "add" | "sub" | "mul" => {
            let rank = rng.gen_range(1..=3);
            let shape = rand_shape(rng, rank);
            // rhs is either the full shape or a broadcast suffix
            let cut = rng.gen_range(0..shape.len());
            let rhs = shape[cut..].to_vec();
            let which = op.to_string();
            GradCase {
                inputs: vec![randn(rng, &shape), randn(rng, &rhs)],
                build: Box::new(move |g, v| match which.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }),
            }
        }
        "scale" => {
            let s: f64 = rng.gen_range(-2.0..2.0);
            GradCase {
                inputs: vec![rand_tensor(rng, 2)],
                build: Box::new(move |g, v| g.scale(v[0], s)),
            }
        }
        "matmul" => {
            let (i, k, j) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let variant = rng.gen_range(0..3);
            let (sa, sb) = match variant {
                0 => (vec![i, k], vec![k, j]),
                1 => (vec![2, i, k], vec![2, k, j]),
                _ => (vec![3, i, k], vec![k, j]),
            };
            GradCase {
                inputs: vec![randn(rng, &sa), randn(rng, &sb)],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }
        "silu" => GradCase {
            inputs: vec![rand_tensor(rng, 2)],
            build: Box::new(|g, v| g.silu(v[0])),
        },
        "rms_norm" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(2..=6)];
            GradCase {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(|g, v| g.rms_norm(v[0], 1e-6)),
            }
        }
        "embedding_lookup" => {
            let vocab = rng.gen_range(2..=6);
            let ids: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..vocab)).collect();
            let width = rng.gen_range(1..=4);
            GradCase {
                inputs: vec![randn(rng, &[vocab, width])],
                build: Box::new(move |g, v| g.embedding(v[0], &ids)),
            }
        }
        "transpose" => {
            let shape = rand_shape(rng, 3);
            let (a0, a1) = (rng.gen_range(0..3), rng.gen_range(0..3));
            GradCase {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| g.transpose(v[0], a0, a1)),
            }
        }
        "reshape" => {
            let shape = rand_shape(rng, 3);
            let flat: usize = shape.iter().product();
            GradCase {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| g.reshape(v[0], &[flat])),
            }
        }
        "concat" => {
            let mut a = rand_shape(rng, 3);
            let axis = rng.gen_range(0..3);
            let mut b = a.clone();
            b[axis] = rng.gen_range(1..=3);
            a[axis] = rng.gen_range(1..=3);
            GradCase {
                inputs: vec![randn(rng, &a), randn(rng, &b)],
                build: Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)),
            }
        }
        "slice" => {
            let shape = rand_shape(rng, 3);
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            GradCase {
                inputs: vec![randn(rng, &shape)],
                build: Box::new(move |g, v| g.slice(v[0], axis, start, len)),
            }
        }
        "softmax_lastdim" => GradCase {
            inputs: vec![rand_tensor(rng, 2)],
            build: Box::new(|g, v| g.softmax(v[0])),
        },
        "causal_softmax" => {
            let q = rng.gen_range(1..=4);
            let offset = rng.gen_range(0..=2);
            GradCase {
                inputs: vec![randn(rng, &[2, q, q + offset])],
                build: Box::new(move |g, v| g.causal_softmax(v[0], offset)),
            }
        }
        "rope" => {
            let start = rng.gen_range(0..50);
            let hd = 2 * rng.gen_range(1..=3);
            let seq = rng.gen_range(1..=4);
            GradCase {
                inputs: vec![randn(rng, &[2, seq, hd])],
                build: Box::new(move |g, v| g.rope(v[0], start, 10000.0)),
            }
        }
        "sum" => GradCase {
            inputs: vec![rand_tensor(rng, 2)],
            build: Box::new(|g, v| g.sum(v[0])),
        },
        "mean" => GradCase {
            inputs: vec![rand_tensor(rng, 2)],
            build: Box::new(|g, v| g.mean(v[0])),
        },
        "l1_loss" | "squared_loss" => {
            let shape = rand_shape(rng, 2);
            let a = randn(rng, &shape);
            // keep every |a - b| away from the L1 kink
            let b = Tensor::from_fn(&shape, |i| {
                let gap: f64 = rng.gen_range(0.1..1.0);
                a.data()[i] + if rng.gen_bool(0.5) { gap } else { -gap }
            });
            let norm = if rng.gen_bool(0.5) {
                Normalization::PerPosition
            } else {
                Normalization::PerElement
            };
            let l1 = op == "l1_loss";
            GradCase {
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    if l1 {
                        g.l1_loss(v[0], v[1], norm)
                    } else {
                        g.squared_loss(v[0], v[1], norm)
                    }
                }),
            }
        }
        "kl_divergence_lastdim" => {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(2..=5)];
            GradCase {
                inputs: vec![randn(rng, &shape), randn(rng, &shape)],
                build: Box::new(|g, v| g.kl_divergence(v[0], v[1])),
            }
        }
        "cross_entropy" => {
            let (rows, vocab) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
            GradCase {
                inputs: vec![randn(rng, &[rows, vocab])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
            }
        }
        "attention_block" => {
            // norm -> q/k/v projections -> rotary -> causal attention -> residual
            let (t, d) = (rng.gen_range(1..=4), 4);
            let start = rng.gen_range(0..20);
            GradCase {
                inputs: vec![
                    randn(rng, &[t, d]),
                    randn(rng, &[d]),
                    randn(rng, &[d, d]),
                    randn(rng, &[d, d]),
                    randn(rng, &[d, d]),
                ],
                build: Box::new(move |g, v| {
                    let n = g.rms_norm(v[0], 1e-6)?;
                    let n = g.mul(n, v[1])?;
                    let q = g.matmul(n, v[2])?;
                    let k = g.matmul(n, v[3])?;
                    let val = g.matmul(n, v[4])?;
                    let q = g.reshape(q, &[t, 2, 2])?;
                    let q = g.transpose(q, 0, 1)?;
                    let q = g.rope(q, start, 10000.0)?;
                    let k = g.reshape(k, &[t, 2, 2])?;
                    let k = g.transpose(k, 0, 1)?;
                    let k = g.rope(k, start, 10000.0)?;
                    let val = g.reshape(val, &[t, 2, 2])?;
                    let val = g.transpose(val, 0, 1)?;
                    let kt = g.transpose(k, 1, 2)?;
                    let s = g.matmul(q, kt)?;
                    let s = g.scale(s, 1.0 / 2f64.sqrt())?;
                    let p = g.causal_softmax(s, 0)?;
                    let o = g.matmul(p, val)?;
                    let o = g.transpose(o, 0, 1)?;
                    let o = g.reshape(o, &[t, d])?;
                    let o = g.silu(o)?;
                    g.add(v[0], o)
                }),
            }
        }
        _ => return None,
    };
    Some(case)
}

/// Run `cases` random checks for each op in `ops`.
pub fn run_suite(ops: &[&str], cases: usize, seed: u64, step: f64, tolerance: f64) -> Result<Vec<OpCheckReport>> {
    let mut reports = Vec::with_capacity(ops.len());
    for (k, op) in ops.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
        let mut worst: f64 = 0.0;
        for c in 0..cases {
            let case = make_case(op, &mut rng).ok_or_else(|| {
                crate::error::Error::Contract(format!("unknown op '{op}' in gradient suite"))
            })?;
            worst = worst.max(check_case(&case, step, seed ^ c as u64)?);
        }
        reports.push(OpCheckReport {
            op: op.to_string(),
            cases,
            max_relative_error: worst,
            passed: worst < tolerance,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let analytic = [1.0, 2.0, 3.0];
        let numeric = [1.0, 2.0, 3.1];
        assert!(relative_error(&analytic, &numeric) > DEFAULT_TOLERANCE);
    }

    #[test]
    fn every_op_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for op in OPS {
            assert!(make_case(op, &mut rng).is_some(), "{op}");
        }
        assert!(make_case("nope", &mut rng).is_none());
    }

    #[test]
    fn few_cases_per_op_pass() {
        let reports = run_suite(OPS, 5, 42, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        for r in reports {
            assert!(r.passed, "{} max rel err {}", r.op, r.max_relative_error);
        }
    }
}
