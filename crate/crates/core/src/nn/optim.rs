//! Adam with bias correction, cosine learning-rate decay, and an exponential
//! moving average of parameters for evaluation-time weights.

use crate::error::Result;
use crate::nn::params::ParamStore;
use candle_core::backprop::GradStore;
use candle_core::Tensor;
use std::collections::BTreeMap;

/// Adam state. Moments are created lazily the first time a parameter
/// receives a gradient; parameters absent from a step's gradient store are
/// left untouched that step.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update with the given learning rate.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in ps.iter() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = (m_prev.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            let v = (v_prev.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&(v_hat.sqrt()? + self.eps)?)?;
            let p = var.as_tensor().detach();
            var.set(&(p - update.affine(lr, 0.0)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, keyed `m.<name>` and `v.<name>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    /// Restores moments and step count saved by
    /// [`state_tensors`](Self::state_tensors).
    pub fn load_state(&mut self, step: usize, tensors: &BTreeMap<String, Tensor>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}

/// Cosine decay from `base` to `floor` over `total` steps; constant `base`
/// when `total` is zero, clamped at `floor` beyond `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step as f64 / total as f64).min(1.0);
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Exponential moving average of all parameters:
/// `shadow = decay * shadow + (1 - decay) * param`.
pub struct Ema {
    decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    /// Initializes the shadow to the current parameter values.
    pub fn new(ps: &ParamStore, decay: f64) -> Result<Self> {
        Ok(Self { decay, shadow: ps.to_tensors()? })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update(&mut self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.iter() {
            let p = var.as_tensor().detach();
            let s = self.shadow.get(name).cloned().unwrap_or_else(|| p.clone());
            let next = (s.affine(self.decay, 0.0)? + p.affine(1.0 - self.decay, 0.0)?)?;
            self.shadow.insert(name.to_string(), next);
        }
        Ok(())
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    /// Writes the shadow weights into `ps`, replacing its parameters.
    pub fn copy_to(&self, ps: &ParamStore) -> Result<()> {
        ps.load_tensors(&self.shadow)
    }

    pub fn load_state(&mut self, tensors: BTreeMap<String, Tensor>) {
        self.shadow = tensors;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::{DType, Device, Var};

    fn scalar_store(value: f32) -> (ParamStore, Var) {
        let mut ps = ParamStore::new(0, DType::F32, Device::Cpu);
        let v = ps.var("x", &[1], Init::Zeros).unwrap();
        v.set(&Tensor::from_vec(vec![value], &[1], &Device::Cpu).unwrap()).unwrap();
        (ps, v)
    }

    /// Hand-stepped oracle for two Adam updates on f(x) = x^2 / 2, grad = x.
    #[test]
    fn adam_matches_hand_computed_steps() {
        let (ps, var) = scalar_store(1.0);
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let lr = 0.1;

        let mut expect = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for step in 1..=2 {
            let x = var.as_tensor().affine(1.0, 0.0).unwrap();
            let loss = (var.as_tensor() * var.as_tensor()).unwrap().affine(0.5, 0.0).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&ps, &grads, lr).unwrap();

            let g = x.to_vec1::<f32>().unwrap()[0] as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            expect -= lr * mh / (vh.sqrt() + 1e-8);

            let got = var.as_tensor().to_vec1::<f32>().unwrap()[0] as f64;
            assert!((got - expect).abs() < 1e-6, "step {step}: {got} vs {expect}");
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let (ps, var) = scalar_store(3.0);
        let mut opt = Adam::new(0.9, 0.995, 1e-8);
        for _ in 0..400 {
            let loss = (var.as_tensor() * var.as_tensor()).unwrap().affine(0.5, 0.0).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&ps, &grads, 0.05).unwrap();
        }
        let x = var.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!(x.abs() < 0.05, "did not converge: {x}");
    }

    #[test]
    fn adam_state_roundtrip_continues_identically() {
        let (ps_a, var_a) = scalar_store(2.0);
        let mut opt_a = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..3 {
            let loss = (var_a.as_tensor() * var_a.as_tensor()).unwrap();
            opt_a.step(&ps_a, &loss.backward().unwrap(), 0.01).unwrap();
        }
        let saved = opt_a.state_tensors();
        let saved_step = opt_a.step_count();
        let param_after_3 = var_a.as_tensor().to_vec1::<f32>().unwrap()[0];

        // Branch A continues live; branch B reloads from the snapshot.
        let (ps_b, var_b) = scalar_store(param_after_3);
        let mut opt_b = Adam::new(0.9, 0.999, 1e-8);
        opt_b.load_state(saved_step, &saved);
        for _ in 0..2 {
            let la = (var_a.as_tensor() * var_a.as_tensor()).unwrap();
            opt_a.step(&ps_a, &la.backward().unwrap(), 0.01).unwrap();
            let lb = (var_b.as_tensor() * var_b.as_tensor()).unwrap();
            opt_b.step(&ps_b, &lb.backward().unwrap(), 0.01).unwrap();
        }
        let a = var_a.as_tensor().to_vec1::<f32>().unwrap()[0];
        let b = var_b.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert_eq!(a, b, "resumed Adam diverged from live run");
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1.0, 0.0, 0, 100), 1.0);
        assert!((cosine_lr(1.0, 0.0, 50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 0.0, 100, 100).abs() < 1e-12);
        assert!(cosine_lr(1.0, 0.0, 150, 100).abs() < 1e-12);
        assert_eq!(cosine_lr(0.5, 0.0, 7, 0), 0.5);
        let lr = cosine_lr(1.0, 0.2, 100, 100);
        assert!((lr - 0.2).abs() < 1e-12);
        // Monotone nonincreasing over the decay window.
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let l = cosine_lr(1.5e-4, 0.0, s, 100);
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn ema_blends_with_decay() {
        let (ps, var) = scalar_store(1.0);
        let mut ema = Ema::new(&ps, 0.9).unwrap();
        var.set(&Tensor::from_vec(vec![2.0f32], &[1], &Device::Cpu).unwrap()).unwrap();
        ema.update(&ps).unwrap();
        let s = ema.shadow().get("x").unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((s - (0.9 * 1.0 + 0.1 * 2.0)).abs() < 1e-6);

        var.set(&Tensor::from_vec(vec![4.0f32], &[1], &Device::Cpu).unwrap()).unwrap();
        ema.update(&ps).unwrap();
        let s2 = ema.shadow().get("x").unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((s2 - (0.9 * s + 0.1 * 4.0)).abs() < 1e-6);
    }

    #[test]
    fn ema_copy_to_overwrites_params() {
        let (ps, var) = scalar_store(1.0);
        let ema = Ema::new(&ps, 0.99).unwrap();
        var.set(&Tensor::from_vec(vec![7.0f32], &[1], &Device::Cpu).unwrap()).unwrap();
        ema.copy_to(&ps).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f32>().unwrap()[0], 1.0);
    }
}
