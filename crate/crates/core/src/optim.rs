//! First-order optimizers and learning-rate schedules over [`ParamSet`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Binding, ParamSet};
use crate::tensor::{Gradients, Tensor};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor<f32>>;

/// Pulls the gradient of every bound parameter out of `grads`.
/// Parameters the loss does not depend on get no entry.
pub fn collect_grads(binding: &Binding, mut grads: Gradients<f32>) -> GradMap {
    binding
        .iter()
        .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
        .collect()
}

/// `lr0 * (1 - step/total)^power`.
pub fn poly_lr(step: u64, total: u64, lr0: f64, power: f64) -> Result<f64> {
    check_step(step, total)?;
    if total == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 - step as f64 / total as f64).powf(power))
}

/// Linear ramp from `lr0` at step 0 to `lr_end` at `total`.
pub fn linear_lr(step: u64, total: u64, lr0: f64, lr_end: f64) -> Result<f64> {
    check_step(step, total)?;
    if total == 0 {
        return Ok(lr0);
    }
    let f = step as f64 / total as f64;
    Ok(lr0 + (lr_end - lr0) * f)
}

fn check_step(step: u64, total: u64) -> Result<()> {
    if step > total {
        return Err(Error::Domain(format!("schedule step {step} exceeds total {total}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: GradMap,
    v: GradMap,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: GradMap::new(),
            v: GradMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `buf = mu*buf + g; p -= lr*buf`.
pub struct Sgd {
    momentum: f32,
    buf: GradMap,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            buf: GradMap::new(),
        }
    }

    /// `lr_for` maps a parameter name to its group's current learning rate.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let lr = lr_for(name) as f32;
            let b = self.buf.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((pv, bv), &gv) in p.data_mut().iter_mut().zip(b.data_mut()).zip(g.data()) {
                *bv = self.momentum * *bv + gv;
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.5).unwrap(), 0.01);
        assert!((poly_lr(50, 100, 0.01, 0.5).unwrap() - 0.01 * 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(poly_lr(100, 100, 0.01, 0.5).unwrap(), 0.0);
        assert!(matches!(poly_lr(101, 100, 0.01, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_schedule_endpoints() {
        assert_eq!(linear_lr(0, 10, 5e-5, 1e-5).unwrap(), 5e-5);
        assert!((linear_lr(10, 10, 5e-5, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::new([2], vec![3.0, -0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g, 0.1).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-5 && (d[1] + 0.9).abs() < 1e-5, "{d:?}");
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1], vec![0.0]).unwrap()).unwrap();
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::new([1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.9);
        opt.step(&mut p, &g, |_| 0.1).unwrap();
        opt.step(&mut p, &g, |_| 0.1).unwrap();
        // -0.1 - 0.19
        assert!((p.get("w").unwrap().data()[0] + 0.29).abs() < 1e-6);
    }
}
