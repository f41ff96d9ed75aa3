//! Low-rank adapters: each targeted projection `W` (stored `[in, out]`) gains a
//! trainable delta `(α/r)·(B·A)ᵀ` with `A: [r, in]` gaussian and `B: [out, r]` zero.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::{ModelWeights, Projection};
use crate::error::{Error, Result};
use crate::tensor::{strides, Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0, targets: Projection::ALL.to_vec() }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("lora alpha {} must be positive", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora needs at least one target projection".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub layer: usize,
    pub target: Projection,
    /// `[rank, in]`
    pub a: Arc<Tensor>,
    /// `[out, rank]`
    pub b: Arc<Tensor>,
}

impl LoraPair {
    /// Dense `[in, out]` delta `scale·(B·A)ᵀ = scale·Aᵀ·Bᵀ`.
    pub fn delta(&self, scale: f32) -> Tensor {
        let (r, inp) = (self.a.shape()[0], self.a.shape()[1]);
        let out = self.b.shape()[0];
        let mut d = Tensor::zeros(&[inp, out]);
        f32::gemm(
            inp,
            r,
            out,
            self.a.data(),
            strides(inp, r, true),
            self.b.data(),
            strides(r, out, true),
            d.data_mut(),
            0.0,
        );
        d.data_mut().iter_mut().for_each(|x| *x *= scale);
        d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub pairs: Vec<LoraPair>,
}

impl LoraAdapterSet {
    /// Fresh adapters: `A ~ N(0, 1/in)`, `B = 0`.
    pub fn init(model: &ModelConfig, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        let mut pairs = Vec::with_capacity(model.num_layers * targets.len());
        for layer in 0..model.num_layers {
            for &target in &targets {
                let (inp, out) = target.dims(model);
                pairs.push(LoraPair {
                    layer,
                    target,
                    a: Arc::new(Tensor::randn(&[cfg.rank, inp], 1.0 / (inp as f64).sqrt(), &mut rng)),
                    b: Arc::new(Tensor::zeros(&[out, cfg.rank])),
                });
            }
        }
        Ok(LoraAdapterSet { rank: cfg.rank, alpha: cfg.alpha, pairs })
    }

    pub fn scaling(&self) -> f32 {
        (self.alpha / self.rank as f64) as f32
    }

    pub fn get(&self, layer: usize, target: Projection) -> Option<&LoraPair> {
        self.pairs.iter().find(|p| p.layer == layer && p.target == target)
    }

    pub fn is_zero(&self) -> bool {
        self.pairs.iter().all(|p| p.b.data().iter().all(|&x| x == 0.0))
    }

    pub fn parameter_count(&self) -> usize {
        self.pairs.iter().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    fn check_against(&self, weights: &ModelWeights) -> Result<()> {
        for p in &self.pairs {
            let layer = weights.layers.get(p.layer).ok_or_else(|| {
                Error::Config(format!("adapter targets layer {} beyond the model", p.layer))
            })?;
            let w = layer.projection(p.target);
            let (inp, out) = (w.shape()[0], w.shape()[1]);
            if p.a.shape() != [self.rank, inp] || p.b.shape() != [out, self.rank] {
                return Err(Error::Config(format!(
                    "adapter for layers.{}.{} has A {:?}, B {:?} but weight is {:?}",
                    p.layer,
                    p.target.name(),
                    p.a.shape(),
                    p.b.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fold the adapters into the base weights: `W ← W + (α/r)·(B·A)ᵀ`.
pub fn lora_merge(weights: &ModelWeights, adapters: &LoraAdapterSet) -> Result<ModelWeights> {
    adapters.check_against(weights)?;
    let mut merged = weights.clone();
    let scale = adapters.scaling();
    for p in &adapters.pairs {
        let delta = p.delta(scale);
        let w = Arc::make_mut(merged.layers[p.layer].projection_mut(p.target));
        w.data_mut().iter_mut().zip(delta.data()).for_each(|(x, &d)| *x += d);
    }
    Ok(merged)
}
