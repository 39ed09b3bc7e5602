//! Learnable general prompts constrained by depth-aware features.
//!
//! The general prompt set (`L_g` tokens plus one matched key) carries
//! degradation-independent scene structure. Before injection it is
//! constrained by cross-attending into a depth feature map: prompts form the
//! queries, projected depth features the keys and values. A real monocular
//! depth network stays out of scope; [`DepthStub`] is a deterministic
//! stand-in, and precomputed features from any external encoder can be
//! loaded from a binary file instead.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::nn::attention::{CrossAttention, OutProj};
use crate::nn::params::{join, Init, ParamStore};
use crate::prompt_pool::mean_pool_query;
use crate::rng::{derive_rng, stream};

/// Magic header of the precomputed depth-feature file format.
pub const DEPTH_FILE_MAGIC: &[u8; 4] = b"T3DF";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    Stub,
    PrecomputedFile,
}

/// Spatial depth-feature grid, width already projected to the model width.
#[derive(Debug, Clone)]
pub struct DepthFeatureMap {
    features: Tensor,
    source: DepthSource,
}

impl DepthFeatureMap {
    /// Wraps a `[H_d, W_d, D]` tensor; every value must be finite.
    pub fn new(features: Tensor, source: DepthSource) -> Result<Self> {
        let dims = features.dims();
        if dims.len() != 3 || dims.contains(&0) {
            return Err(Error::shape(format!(
                "depth features must be nonempty [H_d,W_d,D], got {dims:?}"
            )));
        }
        let flat: Vec<f32> = features.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::DepthFile("non-finite depth feature value".into()));
        }
        Ok(Self { features, source })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn source(&self) -> DepthSource {
        self.source
    }

    pub fn h(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn w(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.dims()[2]
    }
}

/// Spatial mean of the feature grid, the positive anchor of the contrastive
/// prompt loss.
pub fn depth_feature_mean(depth: &DepthFeatureMap) -> Result<Tensor> {
    mean_pool_query(&depth.features)
}

/// Deterministic depth-encoder stand-in: per-patch descriptors (grayscale,
/// |dx|, |dy|, local mean) pushed through a fixed seeded random projection.
/// A pure function of (image, seed, patch, stride, dim).
#[derive(Debug, Clone)]
pub struct DepthStub {
    seed: u64,
    patch: usize,
    stride: usize,
    dim: usize,
}

impl DepthStub {
    pub fn new(seed: u64, patch: usize, stride: usize, dim: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || dim == 0 {
            return Err(Error::config("patch, stride and dim must be positive"));
        }
        Ok(Self { seed, patch, stride, dim })
    }

    pub fn grid_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.patch || w < self.patch {
            return Err(Error::shape(format!(
                "image {h}x{w} smaller than patch {}",
                self.patch
            )));
        }
        Ok(((h - self.patch) / self.stride + 1, (w - self.patch) / self.stride + 1))
    }

    /// Raw per-patch descriptors before projection: for each grid cell a
    /// vector of 4 blocks of `patch*patch` values in order grayscale, |dx|,
    /// |dy|, 3x3 local mean. Returns (descriptors, H_d, W_d, block length).
    pub fn patch_descriptors(&self, y: &ImageBuf) -> Result<(Vec<f32>, usize, usize, usize)> {
        for &v in &y.data {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Image(format!("pixel value {v} outside [0,1]")));
            }
        }
        let (hd, wd) = self.grid_size(y.h, y.w)?;
        let g = y.luma();
        let at = |yy: isize, xx: isize| -> f32 {
            let yy = yy.clamp(0, y.h as isize - 1) as usize;
            let xx = xx.clamp(0, y.w as isize - 1) as usize;
            g[yy * y.w + xx]
        };
        let mut gx = vec![0.0f32; g.len()];
        let mut gy = vec![0.0f32; g.len()];
        let mut lm = vec![0.0f32; g.len()];
        for py in 0..y.h {
            for px in 0..y.w {
                let (yy, xx) = (py as isize, px as isize);
                gx[py * y.w + px] = ((at(yy, xx + 1) - at(yy, xx - 1)) * 0.5).abs();
                gy[py * y.w + px] = ((at(yy + 1, xx) - at(yy - 1, xx)) * 0.5).abs();
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        s += at(yy + dy, xx + dx);
                    }
                }
                lm[py * y.w + px] = s / 9.0;
            }
        }
        let pp = self.patch * self.patch;
        let mut out = Vec::with_capacity(hd * wd * 4 * pp);
        for cy in 0..hd {
            for cx in 0..wd {
                let (oy, ox) = (cy * self.stride, cx * self.stride);
                for chan in [&g, &gx, &gy, &lm] {
                    for py in 0..self.patch {
                        for px in 0..self.patch {
                            out.push(chan[(oy + py) * y.w + (ox + px)]);
                        }
                    }
                }
            }
        }
        Ok((out, hd, wd, 4 * pp))
    }

    /// Fixed projection matrix `[4 * patch^2, dim]`, derived from the seed.
    fn projection(&self) -> Vec<f32> {
        let desc = 4 * self.patch * self.patch;
        let mut rng = derive_rng(
            self.seed,
            &[stream::DEPTH_STUB, self.patch as u64, self.stride as u64, self.dim as u64],
        );
        let scale = 1.0 / (desc as f64).sqrt();
        (0..desc * self.dim)
            .map(|_| {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                (u * scale) as f32
            })
            .collect()
    }

    pub fn encode(&self, y: &ImageBuf) -> Result<DepthFeatureMap> {
        let (desc, hd, wd, dlen) = self.patch_descriptors(y)?;
        let proj = self.projection();
        let mut feat = vec![0.0f32; hd * wd * self.dim];
        for cell in 0..hd * wd {
            let d = &desc[cell * dlen..(cell + 1) * dlen];
            let f = &mut feat[cell * self.dim..(cell + 1) * self.dim];
            for (i, &x) in d.iter().enumerate() {
                let row = &proj[i * self.dim..(i + 1) * self.dim];
                for (o, &w) in f.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
        }
        let t = Tensor::from_vec(feat, (hd, wd, self.dim), &candle_core::Device::Cpu)?;
        DepthFeatureMap::new(t, DepthSource::Stub)
    }
}

/// Writes a feature map in the precomputed-depth binary layout: magic
/// "T3DF", then u32 H_d, W_d, D and the row-major f32 payload, all
/// little-endian.
pub fn save_depth_features(path: &Path, map: &DepthFeatureMap) -> Result<()> {
    let (h, w, d) = (map.h(), map.w(), map.dim());
    let flat: Vec<f32> = map.features.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut bytes = Vec::with_capacity(16 + flat.len() * 4);
    bytes.extend_from_slice(DEPTH_FILE_MAGIC);
    for v in [h as u32, w as u32, d as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a precomputed feature file, validating layout, declared width and
/// finiteness.
pub fn load_precomputed_depth_features(path: &Path, expected_dim: usize) -> Result<DepthFeatureMap> {
    let bytes = fs::read(path)
        .map_err(|e| Error::DepthFile(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[0..4] != DEPTH_FILE_MAGIC {
        return Err(Error::DepthFile(format!(
            "{}: missing T3DF header",
            path.display()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, d) = (u32_at(4), u32_at(8), u32_at(12));
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::DepthFile(format!("{}: zero dimension", path.display())));
    }
    if d != expected_dim {
        return Err(Error::DepthFile(format!(
            "{}: feature width {d} but the model expects {expected_dim}",
            path.display()
        )));
    }
    let expect = 16 + h * w * d * 4;
    if bytes.len() != expect {
        return Err(Error::DepthFile(format!(
            "{}: payload is {} bytes, layout requires {}",
            path.display(),
            bytes.len(),
            expect
        )));
    }
    let vals: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::from_vec(vals, (h, w, d), &candle_core::Device::Cpu)?;
    DepthFeatureMap::new(t, DepthSource::PrecomputedFile)
}

/// Learnable general prompt tokens plus their matched contrastive key.
pub struct GeneralPrompts {
    tokens: Var,
    key: Var,
    l_g: usize,
    dim: usize,
}

impl GeneralPrompts {
    pub fn new(ps: &mut ParamStore, name: &str, l_g: usize, dim: usize) -> Result<Self> {
        if l_g == 0 || dim == 0 {
            return Err(Error::config("token count and dim must be positive"));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let tokens =
            ps.var(&join(name, "tokens"), &[l_g, dim], Init::Uniform(-bound, bound))?;
        let key = ps.var(&join(name, "key"), &[dim], Init::Uniform(-bound, bound))?;
        Ok(Self { tokens, key, l_g, dim })
    }

    pub fn token_count(&self) -> usize {
        self.l_g
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &Var {
        &self.tokens
    }

    /// The matched key trained by the contrastive prompt loss.
    pub fn key(&self) -> &Var {
        &self.key
    }
}

/// Single-head cross-attention that grounds the general prompts in depth:
/// prompts are queries, projected depth features are keys and values.
pub struct DepthConstraint {
    att: CrossAttention,
}

impl DepthConstraint {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let att = CrossAttention::new(ps, name, dim, 1, false, OutProj::None)?;
        Ok(Self { att })
    }

    /// Constrained prompts for one map: `[L_g, D]`.
    pub fn constrain(&self, gp: &GeneralPrompts, depth: &DepthFeatureMap) -> Result<Tensor> {
        Ok(self.constrain_with_weights(gp, depth)?.0)
    }

    /// Also returns the attention map `[1, 1, L_g, H_d*W_d]`.
    pub fn constrain_with_weights(
        &self,
        gp: &GeneralPrompts,
        depth: &DepthFeatureMap,
    ) -> Result<(Tensor, Tensor)> {
        let (h, w, d) = depth.features.dims3()?;
        if d != gp.dim {
            return Err(Error::shape(format!(
                "depth width {d} but prompts are {}",
                gp.dim
            )));
        }
        let q = gp.tokens.as_tensor().unsqueeze(0)?;
        let ctx = depth
            .features
            .to_dtype(gp.tokens.dtype())?
            .reshape((1, h * w, d))?;
        let (out, weights) = self.att.forward_with_weights(&q, &ctx)?;
        Ok((out.squeeze(0)?, weights))
    }

    /// Per-item constraint over a batch of maps, stacked to `[B, L_g, D]`.
    pub fn constrain_batch(
        &self,
        gp: &GeneralPrompts,
        depths: &[DepthFeatureMap],
    ) -> Result<Tensor> {
        if depths.is_empty() {
            return Err(Error::shape("empty depth batch"));
        }
        let rows = depths
            .iter()
            .map(|m| self.constrain(gp, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}
