use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The seven linear maps of a block that adapters may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "wq",
            Projection::Key => "wk",
            Projection::Value => "wv",
            Projection::Output => "wo",
            Projection::Gate => "w_gate",
            Projection::Up => "w_up",
            Projection::Down => "w_down",
        }
    }

    pub fn from_name(name: &str) -> Option<Projection> {
        Projection::ALL.into_iter().find(|p| p.name() == name)
    }

    /// `(in, out)` extents; weights are stored `[in, out]` so that `y = x·W`.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let (d, f) = (config.hidden_dim, config.mlp_dim);
        match self {
            Projection::Gate | Projection::Up => (d, f),
            Projection::Down => (f, d),
            _ => (d, d),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Arc<Tensor>,
    pub mlp_norm: Arc<Tensor>,
    /// Indexed by [`Projection`] order.
    pub projections: [Arc<Tensor>; 7],
}

impl LayerWeights {
    pub fn projection(&self, p: Projection) -> &Arc<Tensor> {
        &self.projections[p.index()]
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Arc<Tensor> {
        &mut self.projections[p.index()]
    }
}

/// Base parameters of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Arc<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Arc<Tensor>,
    pub unembedding: Arc<Tensor>,
}

impl ModelWeights {
    /// Every tensor with its canonical name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &layer.attn_norm));
            for p in Projection::ALL {
                out.push((format!("layers.{i}.{}", p.name()), layer.projection(p)));
            }
            out.push((format!("layers.{i}.mlp_norm"), &layer.mlp_norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Arc<Tensor>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let LayerWeights { attn_norm, mlp_norm, projections } = layer;
            out.push((format!("layers.{i}.attn_norm"), attn_norm));
            for (p, t) in Projection::ALL.iter().zip(projections.iter_mut()) {
                out.push((format!("layers.{i}.{}", p.name()), t));
            }
            out.push((format!("layers.{i}.mlp_norm"), mlp_norm));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("unembedding".to_string(), &mut self.unembedding));
        out
    }

    /// Expected shape of every named tensor for `config`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d) = (config.vocab_size, config.hidden_dim);
        let mut out = vec![("embedding".to_string(), vec![v, d])];
        for i in 0..config.num_layers {
            out.push((format!("layers.{i}.attn_norm"), vec![d]));
            for p in Projection::ALL {
                let (a, b) = p.dims(config);
                out.push((format!("layers.{i}.{}", p.name()), vec![a, b]));
            }
            out.push((format!("layers.{i}.mlp_norm"), vec![d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("unembedding".to_string(), vec![d, v]));
        out
    }

    /// Rebuild from tensors given in [`ModelWeights::named_tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter().zip(expected).map(|((name, t), (want, shape))| {
            if name != want || t.shape() != shape.as_slice() {
                Err(Error::Config(format!(
                    "tensor '{name}' {:?} does not match expected '{want}' {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(Arc::new(t))
            }
        });
        let mut next = || it.next().expect("count checked");
        let embedding = next()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let attn_norm = next()?;
            let projections = [next()?, next()?, next()?, next()?, next()?, next()?, next()?];
            let mlp_norm = next()?;
            layers.push(LayerWeights { attn_norm, mlp_norm, projections });
        }
        let final_norm = next()?;
        let unembedding = next()?;
        Ok(ModelWeights { config, embedding, layers, final_norm, unembedding })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &ModelWeights) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        self.config == other.config
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

pub const INIT_STD: f64 = 0.02;

/// Deterministic scaled-gaussian initialization with unit norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (config.vocab_size, config.hidden_dim);
    // residual-branch outputs shrink with depth
    let residual_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
    let embedding = Arc::new(Tensor::randn(&[v, d], INIT_STD, &mut rng));
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let projections = Projection::ALL.map(|p| {
            let (a, b) = p.dims(config);
            let std = match p {
                Projection::Output | Projection::Down => residual_std,
                _ => INIT_STD,
            };
            Arc::new(Tensor::randn(&[a, b], std, &mut rng))
        });
        layers.push(LayerWeights {
            attn_norm: Arc::new(Tensor::full(&[d], 1.0)),
            mlp_norm: Arc::new(Tensor::full(&[d], 1.0)),
            projections,
        });
    }
    Ok(ModelWeights {
        config: config.clone(),
        embedding,
        layers,
        final_norm: Arc::new(Tensor::full(&[d], 1.0)),
        unembedding: Arc::new(Tensor::randn(&[d, v], INIT_STD, &mut rng)),
    })
}
