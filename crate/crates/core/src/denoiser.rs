//! Noise-prediction network: an encoder-decoder over channels-last images
//! with prompt conditioning at the bottleneck.
//!
//! The noisy residual and the degraded input enter as a 6-channel
//! concatenation. The encoder halves resolution between levels; at the
//! bottleneck the latent cross-attends first into the weather prompt, then
//! into the depth-constrained general prompts, each through a residual
//! attention whose output projection starts at zero, so the whole injection
//! is the identity at initialization. The final convolution is also
//! zero-initialized: a fresh model predicts zero noise.

use candle_core::Tensor;

use crate::config::DenoiserConfig;
use crate::error::{Error, Result};
use crate::nn::attention::{CrossAttention, OutProj};
use crate::nn::layers::{
    avg_pool_2x2, upsample_nearest_2x, Conv1x1, Conv3x3, GroupNorm, Linear, TimeEmbed,
};
use crate::nn::params::{join, ParamStore};

/// Channel count per normalization group throughout the backbone.
pub const NORM_GROUPS: usize = 8;

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Conv1x1>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &join(name, "norm1"), NORM_GROUPS, cin)?,
            conv1: Conv3x3::new(ps, &join(name, "conv1"), cin, cout)?,
            time_proj: Linear::new(ps, &join(name, "time"), time_dim, cout, true)?,
            norm2: GroupNorm::new(ps, &join(name, "norm2"), NORM_GROUPS, cout)?,
            conv2: Conv3x3::new(ps, &join(name, "conv2"), cout, cout)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv1x1::new(ps, &join(name, "skip"), cin, cout)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (bsz, _, _, _) = x.dims4()?;
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let cout = h.dims4()?.3;
        let t = self.time_proj.forward(temb)?.reshape((bsz, 1, 1, cout))?;
        h = h.broadcast_add(&t)?;
        h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// The full noise predictor. Construction fixes the level layout from the
/// config: level `i` runs at `base_channels * channel_mults[i]` channels,
/// and the bottleneck width must equal the conditioning width `dim`.
pub struct DenoiserCore {
    in_conv: Conv3x3,
    time: TimeEmbed,
    enc_levels: Vec<Vec<ResBlock>>,
    downs: Vec<Conv1x1>,
    att_weather: CrossAttention,
    att_general: CrossAttention,
    ups: Vec<Conv1x1>,
    dec_levels: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    out_conv: Conv3x3,
    channels: Vec<usize>,
    dim: usize,
}

impl DenoiserCore {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &DenoiserConfig) -> Result<Self> {
        if cfg.channel_mults.is_empty() || cfg.res_blocks == 0 {
            return Err(Error::config("need at least one level and one block"));
        }
        let channels: Vec<usize> =
            cfg.channel_mults.iter().map(|m| cfg.base_channels * m).collect();
        for &c in &channels {
            if c == 0 || c % NORM_GROUPS != 0 {
                return Err(Error::config(format!(
                    "level width {c} must be a positive multiple of {NORM_GROUPS}"
                )));
            }
        }
        let last = *channels.last().unwrap();
        if last != cfg.dim {
            return Err(Error::config(format!(
                "bottleneck width {last} must equal conditioning width {}",
                cfg.dim
            )));
        }

        let in_conv = Conv3x3::new(ps, &join(name, "in_conv"), 6, channels[0])?;
        let time = TimeEmbed::new(ps, &join(name, "time"), cfg.time_dim, cfg.time_dim)?;

        let mut enc_levels = Vec::new();
        let mut downs = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(
                    ps,
                    &join(name, &format!("enc{i}.res{b}")),
                    c,
                    c,
                    cfg.time_dim,
                )?);
            }
            enc_levels.push(blocks);
            if i + 1 < channels.len() {
                downs.push(Conv1x1::new(
                    ps,
                    &join(name, &format!("down{i}")),
                    c,
                    channels[i + 1],
                )?);
            }
        }

        let att_weather = CrossAttention::new(
            ps,
            &join(name, "att_weather"),
            cfg.dim,
            cfg.heads,
            true,
            OutProj::ZeroInit,
        )?;
        let att_general = CrossAttention::new(
            ps,
            &join(name, "att_general"),
            cfg.dim,
            cfg.heads,
            true,
            OutProj::ZeroInit,
        )?;

        let mut ups = Vec::new();
        let mut dec_levels = Vec::new();
        for i in (0..channels.len() - 1).rev() {
            ups.push(Conv1x1::new(
                ps,
                &join(name, &format!("up{i}")),
                channels[i + 1],
                channels[i],
            )?);
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let cin = if b == 0 { 2 * channels[i] } else { channels[i] };
                blocks.push(ResBlock::new(
                    ps,
                    &join(name, &format!("dec{i}.res{b}")),
                    cin,
                    channels[i],
                    cfg.time_dim,
                )?);
            }
            dec_levels.push(blocks);
        }

        let out_norm = GroupNorm::new(ps, &join(name, "out_norm"), NORM_GROUPS, channels[0])?;
        let out_conv = Conv3x3::new_zeroed(ps, &join(name, "out_conv"), channels[0], 3)?;

        Ok(Self {
            in_conv,
            time,
            enc_levels,
            downs,
            att_weather,
            att_general,
            ups,
            dec_levels,
            out_norm,
            out_conv,
            channels,
            dim: cfg.dim,
        })
    }

    /// Spatial shrink factor from input to bottleneck.
    pub fn down_factor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Time embedding shared by every block, one row per batch element.
    pub fn time_embedding(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        self.time.forward(ts, like.dtype(), like.device())
    }

    fn check_inputs(&self, x_t: &Tensor, y: &Tensor, ts: &[usize]) -> Result<()> {
        let (bx, hx, wx, cx) = x_t.dims4()?;
        let (by, hy, wy, cy) = y.dims4()?;
        if (bx, hx, wx) != (by, hy, wy) || cx != 3 || cy != 3 {
            return Err(Error::shape(format!(
                "expected matching [B,H,W,3] pairs, got {:?} and {:?}",
                x_t.dims(),
                y.dims()
            )));
        }
        if ts.len() != bx {
            return Err(Error::shape(format!(
                "{} timesteps for batch of {bx}",
                ts.len()
            )));
        }
        let f = self.down_factor();
        if hx % f != 0 || wx % f != 0 {
            return Err(Error::shape(format!(
                "spatial size {hx}x{wx} not divisible by the down factor {f}"
            )));
        }
        Ok(())
    }

    /// Runs the encoder. Returns the bottleneck latent `F_e`
    /// `[B, H/f, W/f, D]`, per-level skip features, and the time embedding.
    pub fn encode(
        &self,
        x_t: &Tensor,
        y: &Tensor,
        ts: &[usize],
    ) -> Result<(Tensor, Vec<Tensor>, Tensor)> {
        self.check_inputs(x_t, y, ts)?;
        let temb = self.time_embedding(ts, x_t)?;
        let mut h = self.in_conv.forward(&Tensor::cat(&[x_t, y], 3)?)?;
        let mut skips = Vec::new();
        for (i, blocks) in self.enc_levels.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, &temb)?;
            }
            if i + 1 < self.enc_levels.len() {
                skips.push(h.clone());
                h = self.downs[i].forward(&avg_pool_2x2(&h)?)?;
            }
        }
        Ok((h, skips, temb))
    }

    /// Bottleneck conditioning: latent rows attend into the weather prompt,
    /// then into the constrained general prompts. `[B, H, W, D]` in and out.
    pub fn inject_prompts(&self, f_e: &Tensor, p_w: &Tensor, p_gd: &Tensor) -> Result<Tensor> {
        Ok(self.inject_prompts_with_weights(f_e, p_w, p_gd)?.0)
    }

    /// Also returns both post-softmax attention maps.
    pub fn inject_prompts_with_weights(
        &self,
        f_e: &Tensor,
        p_w: &Tensor,
        p_gd: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (bsz, h, w, d) = f_e.dims4()?;
        if d != self.dim {
            return Err(Error::shape(format!(
                "latent width {d} but conditioning width {}",
                self.dim
            )));
        }
        let flat = f_e.contiguous()?.reshape((bsz, h * w, d))?;
        let (mid, w1) = self.att_weather.forward_with_weights(&flat, p_w)?;
        let (out, w2) = self.att_general.forward_with_weights(&mid, p_gd)?;
        Ok((out.reshape((bsz, h, w, d))?, w1, w2))
    }

    /// Runs the decoder from the conditioned latent back to a 3-channel map.
    pub fn decode(&self, f_hat: &Tensor, skips: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        if skips.len() != self.ups.len() {
            return Err(Error::shape(format!(
                "{} skip levels for {} decoder stages",
                skips.len(),
                self.ups.len()
            )));
        }
        let mut h = f_hat.clone();
        for (stage, blocks) in self.dec_levels.iter().enumerate() {
            h = self.ups[stage].forward(&upsample_nearest_2x(&h)?)?;
            let skip = &skips[skips.len() - 1 - stage];
            h = Tensor::cat(&[&h, skip], 3)?;
            for b in blocks {
                h = b.forward(&h, temb)?;
            }
        }
        self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)
    }

    /// Full forward pass `eps_hat = f(x_t, y, t, prompts)`.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        y: &Tensor,
        ts: &[usize],
        p_w: &Tensor,
        p_gd: &Tensor,
    ) -> Result<Tensor> {
        let (f_e, skips, temb) = self.encode(x_t, y, ts)?;
        let f_hat = self.inject_prompts(&f_e, p_w, p_gd)?;
        self.decode(&f_hat, &skips, &temb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff_at, grad_to_vec};
    use crate::rng::{derive_rng, randn_tensor};
    use candle_core::{DType, Device, Var};
    use rand::Rng;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            heads: 4,
            dim: 16,
            time_dim: 16,
        }
    }

    fn build(seed: u64, dtype: DType) -> (ParamStore, DenoiserCore) {
        let mut ps = ParamStore::new(seed, dtype, Device::Cpu);
        let dn = DenoiserCore::new(&mut ps, "denoiser", &tiny_cfg()).unwrap();
        (ps, dn)
    }

    fn rt(seed: u64, tag: u64, shape: &[usize], dtype: DType) -> Tensor {
        randn_tensor(&mut derive_rng(seed, &[tag]), shape, dtype, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let (_ps, dn) = build(31, DType::F32);
        let x_t = rt(1, 1, &[2, 8, 8, 3], DType::F32);
        let y = rt(1, 2, &[2, 8, 8, 3], DType::F32);
        let p_w = rt(1, 3, &[2, 6, 16], DType::F32);
        let p_gd = rt(1, 4, &[2, 5, 16], DType::F32);
        let a = dn.predict_noise(&x_t, &y, &[3, 700], &p_w, &p_gd).unwrap();
        assert_eq!(a.dims(), [2, 8, 8, 3]);
        let b = dn.predict_noise(&x_t, &y, &[3, 700], &p_w, &p_gd).unwrap();
        let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
    }

    #[test]
    fn fresh_model_predicts_zero_noise() {
        let (_ps, dn) = build(32, DType::F32);
        let x_t = rt(2, 1, &[1, 8, 8, 3], DType::F32);
        let y = rt(2, 2, &[1, 8, 8, 3], DType::F32);
        let p_w = rt(2, 3, &[1, 4, 16], DType::F32);
        let p_gd = rt(2, 4, &[1, 4, 16], DType::F32);
        let out = dn.predict_noise(&x_t, &y, &[10], &p_w, &p_gd).unwrap();
        assert_eq!(max_abs(&out), 0.0);
    }

    #[test]
    fn injection_is_identity_at_initialization() {
        // Bottleneck latent at 8x8x64 via a 3-level config.
        let cfg = DenoiserConfig {
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            res_blocks: 1,
            heads: 4,
            dim: 64,
            time_dim: 32,
        };
        let mut ps = ParamStore::new(33, DType::F32, Device::Cpu);
        let dn = DenoiserCore::new(&mut ps, "denoiser", &cfg).unwrap();
        let f_e = rt(3, 1, &[2, 8, 8, 64], DType::F32);
        let p_w = rt(3, 2, &[2, 12, 64], DType::F32);
        let p_gd = rt(3, 3, &[2, 7, 64], DType::F32);
        let out = dn.inject_prompts(&f_e, &p_w, &p_gd).unwrap();
        assert_eq!(out.dims(), f_e.dims());
        assert_eq!(max_abs(&(out - &f_e).unwrap()), 0.0);
    }

    fn randomize(ps: &ParamStore, name: &str, seed: u64) {
        let var = ps.get(name).unwrap();
        let t = randn_tensor(
            &mut derive_rng(seed, &[99]),
            var.dims(),
            var.dtype(),
            &Device::Cpu,
        )
        .unwrap()
        .affine(0.2, 0.0)
        .unwrap();
        var.set(&t).unwrap();
    }

    #[test]
    fn injection_order_matters_on_random_weights() {
        let (ps, dn) = build(34, DType::F32);
        randomize(&ps, "denoiser.att_weather.wo.weight", 1);
        randomize(&ps, "denoiser.att_general.wo.weight", 2);
        let f_e = rt(4, 1, &[1, 4, 4, 16], DType::F32);
        // Same token count so both orders are well-formed.
        let p_w = rt(4, 2, &[1, 5, 16], DType::F32);
        let p_gd = rt(4, 3, &[1, 5, 16], DType::F32);
        let ab = dn.inject_prompts(&f_e, &p_w, &p_gd).unwrap();
        let ba = dn.inject_prompts(&f_e, &p_gd, &p_w).unwrap();
        assert!(max_abs(&(ab - ba).unwrap()) > 0.0);
    }

    #[test]
    fn conditioning_is_live_on_random_weights() {
        let (ps, dn) = build(35, DType::F32);
        randomize(&ps, "denoiser.att_weather.wo.weight", 3);
        randomize(&ps, "denoiser.att_general.wo.weight", 4);
        randomize(&ps, "denoiser.out_conv.weight", 5);
        let x_t = rt(5, 1, &[1, 8, 8, 3], DType::F32);
        let y = rt(5, 2, &[1, 8, 8, 3], DType::F32);
        let p_gd = rt(5, 3, &[1, 4, 16], DType::F32);
        let p_w1 = rt(5, 4, &[1, 6, 16], DType::F32);
        let p_w2 = rt(5, 5, &[1, 6, 16], DType::F32);
        let a = dn.predict_noise(&x_t, &y, &[7], &p_w1, &p_gd).unwrap();
        let b = dn.predict_noise(&x_t, &y, &[7], &p_w2, &p_gd).unwrap();
        assert!(max_abs(&(a - b).unwrap()) > 0.0);
    }

    #[test]
    fn attention_rows_sum_to_one_at_both_stages() {
        let (ps, dn) = build(36, DType::F32);
        randomize(&ps, "denoiser.att_weather.wo.weight", 6);
        let f_e = rt(6, 1, &[2, 4, 4, 16], DType::F32);
        let p_w = rt(6, 2, &[2, 9, 16], DType::F32);
        let p_gd = rt(6, 3, &[2, 5, 16], DType::F32);
        let (_, w1, w2) = dn.inject_prompts_with_weights(&f_e, &p_w, &p_gd).unwrap();
        for w in [w1, w2] {
            let sums: Vec<f32> = w.sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for s in sums {
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn shape_violations_are_rejected() {
        let (_ps, dn) = build(37, DType::F32);
        let x_t = rt(7, 1, &[1, 6, 6, 3], DType::F32);
        let y = rt(7, 2, &[1, 6, 6, 3], DType::F32);
        let p_w = rt(7, 3, &[1, 4, 16], DType::F32);
        let p_gd = rt(7, 4, &[1, 4, 16], DType::F32);
        // 6 is not divisible by the down factor 2... it is; use 7x7 odd.
        let x_odd = rt(7, 5, &[1, 7, 7, 3], DType::F32);
        let y_odd = rt(7, 6, &[1, 7, 7, 3], DType::F32);
        assert!(dn.predict_noise(&x_odd, &y_odd, &[1], &p_w, &p_gd).is_err());
        // Mismatched pair.
        let y_small = rt(7, 7, &[1, 4, 4, 3], DType::F32);
        assert!(dn.predict_noise(&x_t, &y_small, &[1], &p_w, &p_gd).is_err());
        // Wrong timestep count.
        assert!(dn.predict_noise(&x_t, &y, &[1, 2], &p_w, &p_gd).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Double precision, random 20-coordinate subset across all weights.
        let (ps, dn) = build(38, DType::F64);
        // Give the zero-initialized tails signal so gradients are generic.
        randomize(&ps, "denoiser.att_weather.wo.weight", 7);
        randomize(&ps, "denoiser.att_general.wo.weight", 8);
        randomize(&ps, "denoiser.out_conv.weight", 9);
        randomize(&ps, "denoiser.out_conv.bias", 10);

        let x_t = rt(8, 1, &[1, 8, 8, 3], DType::F64);
        let y = rt(8, 2, &[1, 8, 8, 3], DType::F64);
        let eps = rt(8, 3, &[1, 8, 8, 3], DType::F64);
        let p_w = rt(8, 4, &[1, 6, 16], DType::F64);
        let p_gd = rt(8, 5, &[1, 5, 16], DType::F64);

        let loss = |dn: &DenoiserCore| -> Result<Tensor> {
            let pred = dn.predict_noise(&x_t, &y, &[11], &p_w, &p_gd)?;
            Ok((pred - &eps)?.sqr()?.mean_all()?)
        };

        let grads = loss(&dn).unwrap().backward().unwrap();
        let names = ps.names();
        let mut rng = derive_rng(40, &[500]);
        let mut checked = 0;
        while checked < 20 {
            let name = &names[rng.gen_range(0..names.len())];
            let var: &Var = ps.get(name).unwrap();
            let Some(g) = grads.get(var) else { continue };
            let idx = rng.gen_range(0..var.elem_count());
            let analytic = grad_to_vec(g).unwrap()[idx];
            let numeric = central_diff_at(var, idx, 1e-5, || {
                Ok(loss(&dn)?.to_scalar::<f64>()?)
            })
            .unwrap();
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
            checked += 1;
        }
    }
}
