//! Named trainable parameters with seed-stable initialization.
//!
//! Every parameter's init stream is derived from `(seed, hash(name))`, so a
//! given name always initializes identically regardless of creation order or
//! which other parameters exist. Names are dotted paths
//! (`denoiser.enc0.res0.conv1.weight`) and the registry iterates in sorted
//! order, which keeps optimizer walks and checkpoints deterministic.

use crate::error::{Error, Result};
use crate::rng::{self, derive_rng, stream};
use candle_core::{DType, Device, Tensor, Var};
use std::collections::BTreeMap;

/// Initialization recipe for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// `U[lo, hi)`.
    Uniform(f64, f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in = shape[0]`.
    FanInUniform,
}

/// Registry of all trainable variables for one model instance.
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self { seed, dtype, device, vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates and registers a parameter. Names must be unique.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let mut rng = derive_rng(self.seed, &[stream::PARAM_INIT, fnv1a(name)]);
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &self.device)?,
            Init::Ones => Tensor::ones(shape, self.dtype, &self.device)?,
            Init::Const(c) => {
                Tensor::ones(shape, self.dtype, &self.device)?.affine(c, 0.0)?
            }
            Init::Uniform(lo, hi) => {
                rng::rand_tensor(&mut rng, shape, lo as f32, hi as f32, self.dtype, &self.device)?
            }
            Init::Normal(std) => {
                rng::randn_tensor(&mut rng, shape, self.dtype, &self.device)?.affine(std, 0.0)?
            }
            Init::FanInUniform => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                rng::rand_tensor(
                    &mut rng,
                    shape,
                    -bound as f32,
                    bound as f32,
                    self.dtype,
                    &self.device,
                )?
            }
        };
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Sorted-name iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Detached snapshot of all parameter values. Each entry owns fresh
    /// storage so it stays valid (and settable) after further updates.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?.detach());
        }
        Ok(out)
    }

    /// Overwrites every registered parameter from `tensors`. The name sets
    /// must match exactly; shapes are checked per entry.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
            }
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} expected",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Dotted-path name builder for nested modules.
pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
