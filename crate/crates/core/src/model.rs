//! Full restoration model: denoiser, weather prompt pool, general prompts
//! with their depth constraint, and the diffusion schedule, assembled from
//! one config.
//!
//! Conditioning layout per denoiser call: the weather prompt is selected
//! fresh from the current bottleneck latent (so each sampler step can pick
//! different sub-prompts), while the constrained general prompts depend only
//! on the degraded input's depth features and are computed once per batch.

use candle_core::Tensor;

use crate::config::RunConfig;
use crate::denoiser::DenoiserCore;
use crate::error::{Error, Result};
use crate::general_prompts::{DepthConstraint, DepthFeatureMap, DepthStub, GeneralPrompts};
use crate::img::{batch_tensor, ImageBuf};
use crate::nn::params::ParamStore;
use crate::prompt_pool::PromptPool;
use crate::schedule::{build_linear_schedule, DiffusionSchedule, TimestepPlan};

/// One denoiser evaluation plus the pool selections that conditioned it.
pub struct ConditionedPrediction {
    pub eps_hat: Tensor,
    /// Per batch item, descending-similarity pool indices.
    pub selections: Vec<Vec<usize>>,
}

/// Result of running the deterministic sampler.
pub struct SampledRestoration {
    /// Reconstructed residual `r_d^sample`, same shape as the input batch.
    pub residual: Tensor,
    /// Selections per sampler step (outer: step, inner: batch item).
    pub step_selections: Vec<Vec<Vec<usize>>>,
}

pub struct RestorationModel {
    pub denoiser: DenoiserCore,
    pub pool: PromptPool,
    pub general: GeneralPrompts,
    pub depth_constraint: DepthConstraint,
    pub depth_stub: DepthStub,
    schedule: DiffusionSchedule,
    top_k: usize,
    sample_steps: usize,
}

impl RestorationModel {
    /// Builds every learnable component under `ps` and freezes the schedule.
    /// `cfg` must already be validated.
    pub fn new(ps: &mut ParamStore, cfg: &RunConfig) -> Result<Self> {
        let denoiser = DenoiserCore::new(ps, "denoiser", &cfg.denoiser)?;
        let pool = PromptPool::new(
            ps,
            "pool",
            cfg.pool.size,
            cfg.pool.tokens,
            cfg.denoiser.dim,
        )?;
        let general = GeneralPrompts::new(ps, "general", cfg.general.tokens, cfg.denoiser.dim)?;
        let depth_constraint = DepthConstraint::new(ps, "depth_constraint", cfg.denoiser.dim)?;
        let depth_stub = DepthStub::new(
            cfg.seed,
            cfg.depth.patch,
            cfg.depth.stride,
            cfg.denoiser.dim,
        )?;
        let schedule =
            build_linear_schedule(cfg.schedule.t, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
        Ok(Self {
            denoiser,
            pool,
            general,
            depth_constraint,
            depth_stub,
            schedule,
            top_k: cfg.pool.top_k,
            sample_steps: cfg.schedule.sample_steps,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn sample_steps(&self) -> usize {
        self.sample_steps
    }

    /// Overrides the inference step count (e.g. a CLI `--steps` flag).
    pub fn set_sample_steps(&mut self, steps: usize) -> Result<()> {
        if steps == 0 || steps > self.schedule.len() {
            return Err(Error::Config(format!(
                "sample steps {steps} outside [1, {}]",
                self.schedule.len()
            )));
        }
        self.sample_steps = steps;
        Ok(())
    }

    /// Stub depth features for each degraded image.
    pub fn depth_maps(&self, ys: &[&ImageBuf]) -> Result<Vec<DepthFeatureMap>> {
        ys.iter().map(|y| self.depth_stub.encode(y)).collect()
    }

    /// Constrained general prompts `[B, L_g, D]` from per-sample depth maps.
    pub fn constrained_prompts(&self, depths: &[DepthFeatureMap]) -> Result<Tensor> {
        self.depth_constraint.constrain_batch(&self.general, depths)
    }

    /// One conditioned denoiser call: encode, select and gather the weather
    /// prompt from the current latent, inject both prompts, decode.
    pub fn predict(
        &self,
        x_t: &Tensor,
        y: &Tensor,
        ts: &[usize],
        p_gd: &Tensor,
    ) -> Result<ConditionedPrediction> {
        let (f_e, skips, temb) = self.denoiser.encode(x_t, y, ts)?;
        let (p_w, selections) = self.pool.build_weather_prompt_batch(&f_e, self.top_k)?;
        let f_hat = self.denoiser.inject_prompts(&f_e, &p_w, p_gd)?;
        let eps_hat = self.denoiser.decode(&f_hat, &skips, &temb)?;
        Ok(ConditionedPrediction { eps_hat, selections })
    }

    /// Runs the deterministic reverse process from `init_noise` down to a
    /// clean residual estimate. Gradients flow through every step.
    pub fn sample_restoration(
        &self,
        y: &Tensor,
        p_gd: &Tensor,
        init_noise: &Tensor,
    ) -> Result<SampledRestoration> {
        let plan = self.sampling_plan()?;
        let bsz = y.dim(0)?;
        if init_noise.dims() != y.dims() {
            return Err(Error::shape(format!(
                "init noise {:?} vs batch {:?}",
                init_noise.dims(),
                y.dims()
            )));
        }
        let mut x = init_noise.clone();
        let mut step_selections = Vec::with_capacity(plan.num_steps());
        for (t, prev) in plan.transitions() {
            let ts = vec![t; bsz];
            let pred = self.predict(&x, y, &ts, p_gd)?;
            x = self.schedule.ddim_step(&x, t, prev, &pred.eps_hat)?;
            step_selections.push(pred.selections);
        }
        Ok(SampledRestoration { residual: x, step_selections })
    }

    /// The inference timestep plan from the configured step count.
    pub fn sampling_plan(&self) -> Result<TimestepPlan> {
        crate::schedule::make_timestep_plan(self.schedule.len(), self.sample_steps)
    }

    /// Stacks clean and degraded sides of a sample batch into `[B, H, W, 3]`
    /// tensors (x, y, r_d) with the store's dtype and device.
    pub fn batch_tensors(
        &self,
        ps: &ParamStore,
        samples: &[crate::weather_synth::DegradedSample],
    ) -> Result<(Tensor, Tensor, Tensor)> {
        if samples.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let xs: Vec<&ImageBuf> = samples.iter().map(|s| &s.x).collect();
        let ys: Vec<&ImageBuf> = samples.iter().map(|s| &s.y).collect();
        let rs: Vec<ImageBuf> = samples.iter().map(|s| s.residual_image()).collect();
        let rrefs: Vec<&ImageBuf> = rs.iter().collect();
        let x = batch_tensor(&xs, ps.dtype(), ps.device())?;
        let y = batch_tensor(&ys, ps.dtype(), ps.device())?;
        let r = batch_tensor(&rrefs, ps.dtype(), ps.device())?;
        Ok((x, y, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, randn_tensor};
    use crate::testutil::tiny_config;
    use candle_core::{DType, Device};

    fn build(seed: u64) -> (ParamStore, RestorationModel) {
        let cfg = tiny_config();
        let mut ps = ParamStore::new(seed, DType::F32, Device::Cpu);
        let model = RestorationModel::new(&mut ps, &cfg).unwrap();
        (ps, model)
    }

    #[test]
    fn construction_registers_all_components() {
        let (ps, model) = build(7);
        let names = ps.names();
        for prefix in ["denoiser.", "pool.", "general.", "depth_constraint."] {
            assert!(
                names.iter().any(|n| n.starts_with(prefix)),
                "no parameters under {prefix}"
            );
        }
        assert_eq!(model.schedule().len(), 50);
    }

    #[test]
    fn predict_runs_and_reports_selections() {
        let (ps, model) = build(8);
        let samples = crate::weather_synth::make_batch(&tiny_config().synth, 5, 2).unwrap();
        let (_, y, r) = model.batch_tensors(&ps, &samples).unwrap();
        let ys: Vec<&ImageBuf> = samples.iter().map(|s| &s.y).collect();
        let depths = model.depth_maps(&ys).unwrap();
        let p_gd = model.constrained_prompts(&depths).unwrap();
        assert_eq!(p_gd.dims(), [2, 5, 16]);

        let eps = randn_tensor(&mut derive_rng(9, &[1]), r.dims(), DType::F32, &Device::Cpu)
            .unwrap();
        let x_t = model.schedule().q_sample_batch(&r, &[40, 3], &eps).unwrap();
        let pred = model.predict(&x_t, &y, &[40, 3], &p_gd).unwrap();
        assert_eq!(pred.eps_hat.dims(), y.dims());
        assert_eq!(pred.selections.len(), 2);
        for sel in &pred.selections {
            assert_eq!(sel.len(), 2);
            assert!(sel.iter().all(|&i| i < 6));
        }
    }

    #[test]
    fn sampler_is_deterministic_and_traces_selections() {
        let (ps, model) = build(9);
        let samples = crate::weather_synth::make_batch(&tiny_config().synth, 6, 1).unwrap();
        let (_, y, _) = model.batch_tensors(&ps, &samples).unwrap();
        let ys: Vec<&ImageBuf> = samples.iter().map(|s| &s.y).collect();
        let p_gd = model
            .constrained_prompts(&model.depth_maps(&ys).unwrap())
            .unwrap();
        let noise = randn_tensor(&mut derive_rng(10, &[2]), y.dims(), DType::F32, &Device::Cpu)
            .unwrap();
        let a = model.sample_restoration(&y, &p_gd, &noise).unwrap();
        let b = model.sample_restoration(&y, &p_gd, &noise).unwrap();
        assert_eq!(a.step_selections.len(), 2);
        assert_eq!(a.step_selections, b.step_selections);
        let av: Vec<f32> = a.residual.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.residual.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
    }

    #[test]
    fn sampler_rejects_mismatched_noise() {
        let (ps, model) = build(10);
        let samples = crate::weather_synth::make_batch(&tiny_config().synth, 11, 1).unwrap();
        let (_, y, _) = model.batch_tensors(&ps, &samples).unwrap();
        let ys: Vec<&ImageBuf> = samples.iter().map(|s| &s.y).collect();
        let p_gd = model
            .constrained_prompts(&model.depth_maps(&ys).unwrap())
            .unwrap();
        let bad = randn_tensor(&mut derive_rng(11, &[3]), &[1, 8, 8, 3], DType::F32, &Device::Cpu)
            .unwrap();
        assert!(model.sample_restoration(&y, &p_gd, &bad).is_err());
    }
}
