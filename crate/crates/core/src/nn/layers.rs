//! Building-block layers over channels-last feature maps.
//!
//! Spatial tensors are `[B, H, W, C]` throughout. Convolutions lower to a
//! patch-gather plus one matmul, which keeps the per-step cost in a single
//! large gemm instead of many small kernels.

use crate::error::{Error, Result};
use crate::nn::params::{join, Init, ParamStore};
use candle_core::{Tensor, Var};

/// Affine map over the trailing dimension: `y = x W + b`, `W` is `[in, out]`.
pub struct Linear {
    w: Var,
    b: Option<Var>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.var(&join(name, "weight"), &[in_dim, out_dim], Init::FanInUniform)?;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let b = if bias {
            Some(ps.var(&join(name, "bias"), &[out_dim], Init::Uniform(-bound, bound))?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// Zero-initialized variant; the map starts as constant zero.
    pub fn new_zeroed(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = ps.var(&join(name, "weight"), &[in_dim, out_dim], Init::Zeros)?;
        let b = Some(ps.var(&join(name, "bias"), &[out_dim], Init::Zeros)?);
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn weight(&self) -> &Var {
        &self.w
    }

    /// `x` is `[..., in]`; leading dimensions pass through.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.last() != Some(&self.in_dim) {
            return Err(Error::shape(format!(
                "linear expects trailing dim {}, got {:?}",
                self.in_dim, dims
            )));
        }
        let rows = x.elem_count() / self.in_dim;
        let flat = x.contiguous()?.reshape((rows, self.in_dim))?;
        let mut y = flat.matmul(self.w.as_tensor())?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weight is `[9 * C_in, C_out]`
/// with rows ordered by patch offset `(dy, dx)` row-major, then input channel.
pub struct Conv3x3 {
    w: Var,
    b: Var,
    cin: usize,
    cout: usize,
}

impl Conv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / ((9 * cin) as f64).sqrt();
        let w = ps.var(&join(name, "weight"), &[9 * cin, cout], Init::FanInUniform)?;
        let b = ps.var(&join(name, "bias"), &[cout], Init::Uniform(-bound, bound))?;
        Ok(Self { w, b, cin, cout })
    }

    /// Final-layer variant: zero weights and bias so the block starts as the
    /// constant-zero map.
    pub fn new_zeroed(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let w = ps.var(&join(name, "weight"), &[9 * cin, cout], Init::Zeros)?;
        let b = ps.var(&join(name, "bias"), &[cout], Init::Zeros)?;
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        if c != self.cin {
            return Err(Error::shape(format!("conv3x3 expects {} channels, got {c}", self.cin)));
        }
        let xp = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut patches = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                patches.push(xp.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        let gathered = Tensor::cat(&patches, 3)?;
        let flat = gathered.reshape((bsz * h * w, 9 * c))?;
        let y = flat.matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())?;
        Ok(y.reshape((bsz, h, w, self.cout))?)
    }
}

/// 1x1 convolution: a per-pixel linear map over channels.
pub struct Conv1x1 {
    w: Var,
    b: Var,
    cin: usize,
    cout: usize,
}

impl Conv1x1 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = ps.var(&join(name, "weight"), &[cin, cout], Init::FanInUniform)?;
        let b = ps.var(&join(name, "bias"), &[cout], Init::Uniform(-bound, bound))?;
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        if c != self.cin {
            return Err(Error::shape(format!("conv1x1 expects {} channels, got {c}", self.cin)));
        }
        let flat = x.contiguous()?.reshape((bsz * h * w, c))?;
        let y = flat.matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())?;
        Ok(y.reshape((bsz, h, w, self.cout))?)
    }
}

/// 2x2 mean pooling; requires even spatial dims.
pub fn avg_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (bsz, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("avg_pool_2x2 needs even dims, got {h}x{w}")));
    }
    let g = x.contiguous()?.reshape((bsz, h / 2, 2, w / 2, 2, c))?;
    Ok(g.mean(4)?.mean(2)?)
}

/// Nearest-neighbor 2x upsample: each pixel becomes a 2x2 block.
pub fn upsample_nearest_2x(x: &Tensor) -> Result<Tensor> {
    let (bsz, h, w, c) = x.dims4()?;
    let t = x.contiguous()?.reshape((bsz, h, 1, w, 1, c))?;
    let rows = Tensor::cat(&[&t, &t], 2)?;
    let cells = Tensor::cat(&[&rows, &rows], 4)?;
    Ok(cells.reshape((bsz, 2 * h, 2 * w, c))?)
}

/// Group normalization over `[B, H, W, C]` with per-channel affine.
pub struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "group count {groups} must divide channel count {channels}"
            )));
        }
        let gamma = ps.var(&join(name, "gamma"), &[channels], Init::Ones)?;
        let beta = ps.var(&join(name, "beta"), &[channels], Init::Zeros)?;
        Ok(Self { gamma, beta, groups, channels, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "groupnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let g = self.groups;
        let xg = x.contiguous()?.reshape((bsz, h, w, g, c / g))?;
        let mean = xg.mean_keepdim(vec![1usize, 2, 4])?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(vec![1usize, 2, 4])?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let out = norm.reshape((bsz, h, w, c))?;
        Ok(out.broadcast_mul(self.gamma.as_tensor())?.broadcast_add(self.beta.as_tensor())?)
    }
}

/// Sinusoidal position encoding of timestep indices: `[B, dim]` with the
/// first half cosines and the second half sines over geometric frequencies.
pub fn timestep_encoding(
    ts: &[usize],
    dim: usize,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::config(format!("timestep encoding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let tf = t as f64;
        for i in 0..half {
            let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
            data.push((tf * freq).cos() as f32);
        }
        for i in 0..half {
            let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
            data.push((tf * freq).sin() as f32);
        }
    }
    let t = Tensor::from_vec(data, (ts.len(), dim), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Two-layer MLP over the sinusoidal encoding, shared by all blocks.
pub struct TimeEmbed {
    l1: Linear,
    l2: Linear,
    enc_dim: usize,
    out_dim: usize,
}

impl TimeEmbed {
    pub fn new(ps: &mut ParamStore, name: &str, enc_dim: usize, out_dim: usize) -> Result<Self> {
        let l1 = Linear::new(ps, &join(name, "l1"), enc_dim, out_dim, true)?;
        let l2 = Linear::new(ps, &join(name, "l2"), out_dim, out_dim, true)?;
        Ok(Self { l1, l2, enc_dim, out_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `ts` has one timestep per batch element; returns `[B, out_dim]`.
    pub fn forward(&self, ts: &[usize], ps_dtype: candle_core::DType, dev: &candle_core::Device) -> Result<Tensor> {
        let enc = timestep_encoding(ts, self.enc_dim, ps_dtype, dev)?;
        let h = self.l1.forward(&enc)?.silu()?;
        self.l2.forward(&h)
    }
}
