//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "optimizer betas must lie in [0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer eps must be > 0 and weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamWState {
    pub fn new(numel: usize) -> Self {
        AdamWState { m: vec![0.0; numel], v: vec![0.0; numel] }
    }
}

/// One update; `step` is 1-based.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() || state.v.len() != param.numel() {
        return Err(Error::dim(
            "adamw_step",
            format!("param {:?}, grad {:?}, state {}", param.shape(), grad.shape(), state.m.len()),
        ));
    }
    if step == 0 {
        return Err(Error::Contract("adamw step index is 1-based".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g as f64;
        let mm = b1 * *m as f64 + (1.0 - b1) * g;
        let vv = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = mm as f32;
        *v = vv as f32;
        let update = (mm / c1) / ((vv / c2).sqrt() + cfg.eps);
        *p = (*p as f64 * decay - lr * update) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamWState::new(3);
        for t in 1..=5 {
            adamw_step(&mut p, &Tensor::zeros(&[3]), &mut s, 1e-2, &cfg, t).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![0.3, -7.0, 1e-3]).unwrap();
        let mut s = AdamWState::new(3);
        adamw_step(&mut p, &g, &mut s, 5e-4, &cfg, 1).unwrap();
        // m̂ = g, v̂ = g², so the step is -η·g/(|g|+eps)
        for (&x, &gi) in p.data().iter().zip(g.data()) {
            assert!((x + 5e-4 * gi.signum()).abs() < 1e-7 * 5e-4 / gi.abs() + 1e-9);
        }
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        // f(x) = 0.5·a·(x − c)², independent reference in plain f64
        let (a, c, lr) = (3.0f64, 1.5f64, 0.05f64);
        let cfg = AdamWConfig::default();
        let mut p = Tensor::new(vec![1], vec![-2.0]).unwrap();
        let mut s = AdamWState::new(1);
        let (mut x, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
        for t in 1..=10u64 {
            let g = a * (p.data()[0] as f64 - c);
            adamw_step(&mut p, &Tensor::new(vec![1], vec![g as f32]).unwrap(), &mut s, lr, &cfg, t).unwrap();

            let g_ref = a * (x - c);
            m = 0.9 * m + 0.1 * g_ref;
            v = 0.999 * v + 0.001 * g_ref * g_ref;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            x -= lr * 0.01 * x;
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] as f64 - x).abs() < 1e-5, "step {t}: {} vs {x}", p.data()[0]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut s = AdamWState::new(2);
        let cfg = AdamWConfig::default();
        assert!(adamw_step(&mut p, &Tensor::zeros(&[3]), &mut s, 0.1, &cfg, 1).is_err());
        assert!(adamw_step(&mut p, &Tensor::zeros(&[2]), &mut s, 0.1, &cfg, 0).is_err());
    }
}
