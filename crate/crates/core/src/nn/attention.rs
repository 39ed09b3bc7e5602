//! Scaled dot-product cross-attention over token sequences.
//!
//! Queries come from one sequence, keys and values from another; both live in
//! the same model width `D`. Two configurations are used: the constraint
//! block (single head, projections only) and the feature-injection blocks
//! (multi-head, zero-initialized output projection plus residual, so an
//! untrained block is the identity).

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::params::{join, ParamStore};
use candle_core::Tensor;
use candle_nn::ops::softmax;

/// Output-projection behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutProj {
    /// No projection; attention output is returned directly.
    None,
    /// Linear projection initialized to zero.
    ZeroInit,
}

pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Option<Linear>,
    dim: usize,
    heads: usize,
    residual: bool,
}

impl CrossAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        residual: bool,
        out_proj: OutProj,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("head count {heads} must divide width {dim}")));
        }
        let wq = Linear::new(ps, &join(name, "wq"), dim, dim, false)?;
        let wk = Linear::new(ps, &join(name, "wk"), dim, dim, false)?;
        let wv = Linear::new(ps, &join(name, "wv"), dim, dim, false)?;
        let wo = match out_proj {
            OutProj::None => None,
            OutProj::ZeroInit => Some(Linear::new_zeroed(ps, &join(name, "wo"), dim, dim)?),
        };
        Ok(Self { wq, wk, wv, wo, dim, heads, residual })
    }

    /// `queries` is `[B, Nq, D]`, `context` is `[B, Nc, D]`; returns
    /// `[B, Nq, D]`.
    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(queries, context)?.0)
    }

    /// Same as [`forward`](Self::forward) but also returns the post-softmax
    /// attention map `[B, heads, Nq, Nc]`.
    pub fn forward_with_weights(
        &self,
        queries: &Tensor,
        context: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (bsz, nq, d) = queries.dims3()?;
        let (bc, nc, dc) = context.dims3()?;
        if d != self.dim || dc != self.dim {
            return Err(Error::shape(format!(
                "attention width {} but got query {d}, context {dc}",
                self.dim
            )));
        }
        if bc != bsz {
            return Err(Error::shape(format!("batch mismatch: {bsz} queries vs {bc} context")));
        }
        let dh = self.dim / self.heads;
        let split = |t: &Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((bsz, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(&self.wq.forward(queries)?, nq)?;
        let k = split(&self.wk.forward(context)?, nc)?;
        let v = split(&self.wv.forward(context)?, nc)?;

        let scores = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(1.0 / (dh as f64).sqrt(), 0.0)?;
        let weights = softmax(&scores, 3)?;
        let mixed = weights.matmul(&v)?;
        let merged = mixed.transpose(1, 2)?.contiguous()?.reshape((bsz, nq, self.dim))?;
        let mut out = match &self.wo {
            Some(wo) => wo.forward(&merged)?,
            None => merged,
        };
        if self.residual {
            out = (out + queries)?;
        }
        Ok((out, weights))
    }
}
