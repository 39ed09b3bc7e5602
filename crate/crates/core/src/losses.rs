//! Training objectives.
//!
//! Four terms, combined by [`total_training_loss`]:
//!
//! * `l_res` — mean squared error between the injected noise and the
//!   denoiser's prediction at a random timestep.
//! * `l_cp` — contrastive prompt term pulling the general-prompt key toward
//!   depth feature means and pushing selected pool keys away from it.
//! * `l_psnr` — negated PSNR of a full sampled restoration against the clean
//!   target, so minimizing it maximizes fidelity in dB.
//! * `l_cp_sample` — the contrastive term recomputed with the selections the
//!   sampler actually used on its final step.
//!
//! The sampled branch (`l_psnr` + `l_cp_sample`) runs a complete reverse
//! process per call and is gated by `sampled_every`; off steps contribute
//! exact zeros and log zeros.

use candle_core::Tensor;

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::general_prompts::depth_feature_mean;
use crate::metrics::PSNR_MSE_FLOOR;
use crate::model::RestorationModel;
use crate::nn::params::ParamStore;
use crate::prompt_pool::PromptPool;
use crate::rng::{derive_rng, randn_tensor, stream};
use crate::weather_synth::DegradedSample;

/// Additive guard inside the norm square roots of the differentiable cosine.
///
/// A `max(norm, eps)` clamp is not usable here: at an exactly-zero vector the
/// sqrt backward divides by zero before the clamp applies. Adding the guard
/// under the root keeps the forward within 1e-12 of the exact value for any
/// norm above 1e-6 and keeps the backward finite everywhere.
const COSINE_NORM_GUARD_SQ: f64 = 1e-24;

/// Noise-prediction objective: mean over batch, space, and channels of the
/// squared error between injected and predicted noise.
pub fn residual_diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::shape(format!(
            "noise {:?} vs prediction {:?}",
            eps.dims(),
            eps_hat.dims()
        )));
    }
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

/// Negated PSNR in dB as a scalar tensor: `10 log10(max(MSE, floor))`.
///
/// The floor keeps the log finite for identical inputs, where the loss
/// saturates at -100 dB; above the floor the value equals `-psnr` of the two
/// images up to dtype rounding.
pub fn psnr_loss(restored: &Tensor, target: &Tensor) -> Result<Tensor> {
    if restored.dims() != target.dims() {
        return Err(Error::shape(format!(
            "restored {:?} vs target {:?}",
            restored.dims(),
            target.dims()
        )));
    }
    let mse = (restored - target)?.sqr()?.mean_all()?;
    let floored = mse.maximum(PSNR_MSE_FLOOR)?;
    Ok(floored.log()?.affine(10.0 / std::f64::consts::LN_10, 0.0)?)
}

/// Differentiable cosine similarity of two equally-shaped 1-D tensors.
fn cosine_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("cosine {:?} vs {:?}", a.dims(), b.dims())));
    }
    let dot = (a * b)?.sum_all()?;
    let na = ((a.sqr()?.sum_all()? + COSINE_NORM_GUARD_SQ)?).sqrt()?;
    let nb = ((b.sqr()?.sum_all()? + COSINE_NORM_GUARD_SQ)?).sqrt()?;
    Ok((dot / (na * nb)?)?)
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
fn cosine_distance_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((1.0 - cosine_t(a, b)?)?)
}

/// Contrastive prompt term.
///
/// For each batch item `b` and each of its `k` selected pool keys `i`:
///
/// ```text
/// term(b, i) = dist(key_general, depth_mean_b) - dist(selected_key_{b,i}, key_general)
/// ```
///
/// with `dist = 1 - cos`, averaged over all `b * k` terms. Minimizing aligns
/// the general key with depth structure while repelling the weather-specific
/// keys from it. Each term lies in `[-2, 2]`.
///
/// Shapes: `key_general [D]`, `depth_means [B, D]`, `selected_keys [B, k, D]`.
pub fn contrastive_prompt_loss(
    key_general: &Tensor,
    depth_means: &Tensor,
    selected_keys: &Tensor,
) -> Result<Tensor> {
    let d = key_general.dims1()?;
    let (b, dm) = depth_means.dims2()?;
    let (bk, k, dk) = selected_keys.dims3()?;
    if dm != d || dk != d || bk != b {
        return Err(Error::shape(format!(
            "key [{}], depth means [{}, {}], selected keys [{}, {}, {}]",
            d, b, dm, bk, k, dk
        )));
    }
    if b == 0 || k == 0 {
        return Err(Error::shape("contrastive term needs at least one sample and one key"));
    }
    let mut terms = Vec::with_capacity(b * k);
    for bi in 0..b {
        let anchor = depth_means.narrow(0, bi, 1)?.squeeze(0)?;
        let pull = cosine_distance_t(key_general, &anchor)?;
        for ki in 0..k {
            let sel = selected_keys.narrow(0, bi, 1)?.narrow(1, ki, 1)?.flatten_all()?;
            let push = cosine_distance_t(&sel, key_general)?;
            terms.push((&pull - push)?);
        }
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Gathers the key rows for recorded per-item selections into `[B, k, D]`,
/// preserving the autograd path into the pool's key table.
pub fn gather_selected_keys(pool: &PromptPool, selections: &[Vec<usize>]) -> Result<Tensor> {
    if selections.is_empty() {
        return Err(Error::shape("no selections to gather"));
    }
    let keys = pool.keys().as_tensor();
    let mut rows = Vec::with_capacity(selections.len());
    for sel in selections {
        let idx: Vec<u32> = sel.iter().map(|&i| i as u32).collect();
        let it = Tensor::from_vec(idx, sel.len(), keys.device())?;
        rows.push(keys.index_select(&it, 0)?);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

/// Scalar loss values and the prompt selections behind them, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_res: f64,
    pub l_cp: f64,
    pub l_psnr: f64,
    pub l_cp_sample: f64,
    pub total: f64,
    /// Per-item pool selections from the noise-prediction forward.
    pub train_selections: Vec<Vec<usize>>,
    /// Per-step, per-item selections from the sampled branch; empty on steps
    /// where the branch did not run.
    pub sample_selections: Vec<Vec<Vec<usize>>>,
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Full training objective for one optimization step.
///
/// All randomness is drawn from streams keyed by `(seed, step)`, so a given
/// step's loss is a pure function of the parameters and the batch: timesteps
/// from the timestep stream, diffusion noise from the noise stream, sampler
/// initialization from the sampler stream.
///
/// Returns the weighted total (differentiable) and a [`LossReport`] of the
/// unweighted components. The sampled branch runs only when its weights make
/// it observable and `step` is a multiple of `sampled_every`.
pub fn total_training_loss(
    model: &RestorationModel,
    ps: &ParamStore,
    batch: &[DegradedSample],
    weights: &LossWeights,
    seed: u64,
    step: u64,
) -> Result<(Tensor, LossReport)> {
    let (x, y, r) = model.batch_tensors(ps, batch)?;
    let bsz = batch.len();
    let t_len = model.schedule().len();

    // Depth conditioning is shared by every term of this step.
    let ys: Vec<&crate::img::ImageBuf> = batch.iter().map(|s| &s.y).collect();
    let depths = model.depth_maps(&ys)?;
    let p_gd = model.constrained_prompts(&depths)?;
    let means: Vec<Tensor> = depths
        .iter()
        .map(depth_feature_mean)
        .collect::<Result<Vec<_>>>()?;
    let anchors = Tensor::stack(&means, 0)?.to_dtype(ps.dtype())?;
    let key_general = model.general.key().as_tensor();

    // Noise-prediction term at per-sample uniform timesteps.
    let mut t_rng = derive_rng(seed, &[stream::TIMESTEP, step]);
    let ts: Vec<usize> = (0..bsz)
        .map(|_| rand::Rng::gen_range(&mut t_rng, 0..t_len))
        .collect();
    let mut n_rng = derive_rng(seed, &[stream::DIFFUSION_NOISE, step]);
    let eps = randn_tensor(&mut n_rng, r.dims(), ps.dtype(), ps.device())?;
    let x_t = model.schedule().q_sample_batch(&r, &ts, &eps)?;
    let pred = model.predict(&x_t, &y, &ts, &p_gd)?;
    let l_res = residual_diffusion_loss(&eps, &pred.eps_hat)?;

    // Contrastive term over the keys that forward actually selected.
    let sel_keys = gather_selected_keys(&model.pool, &pred.selections)?;
    let l_cp = contrastive_prompt_loss(key_general, &anchors, &sel_keys)?;

    let sampled_due = weights.sampled_every > 0 && step % weights.sampled_every as u64 == 0;
    let sampled_observable = weights.lambda_psnr != 0.0 || weights.lambda_cp_sample != 0.0;
    let zero = Tensor::zeros((), ps.dtype(), ps.device())?;
    let (l_psnr, l_cp_sample, sample_selections) = if sampled_due && sampled_observable {
        let mut s_rng = derive_rng(seed, &[stream::SAMPLER_INIT, step]);
        let init = randn_tensor(&mut s_rng, y.dims(), ps.dtype(), ps.device())?;
        let sampled = model.sample_restoration(&y, &p_gd, &init)?;
        let restored = (&sampled.residual + &y)?.clamp(0.0, 1.0)?;
        let l_psnr = psnr_loss(&restored, &x)?;
        // Final-step selections are the ones that shaped the restoration the
        // restored image came from.
        let last = sampled
            .step_selections
            .last()
            .ok_or_else(|| Error::shape("sampler produced no steps"))?;
        let keys = gather_selected_keys(&model.pool, last)?;
        let l_cp_sample = contrastive_prompt_loss(key_general, &anchors, &keys)?;
        (l_psnr, l_cp_sample, sampled.step_selections)
    } else {
        (zero.clone(), zero, Vec::new())
    };

    let total = (((l_res.affine(weights.lambda_res, 0.0)?
        + l_cp.affine(weights.lambda_cp, 0.0)?)?
        + l_psnr.affine(weights.lambda_psnr, 0.0)?)?
        + l_cp_sample.affine(weights.lambda_cp_sample, 0.0)?)?;

    let report = LossReport {
        l_res: scalar_f64(&l_res)?,
        l_cp: scalar_f64(&l_cp)?,
        l_psnr: scalar_f64(&l_psnr)?,
        l_cp_sample: scalar_f64(&l_cp_sample)?,
        total: scalar_f64(&total)?,
        train_selections: pred.selections,
        sample_selections,
    };
    Ok((total, report))
}
