//! Run configuration: one TOML file drives every stage (synthesis, training,
//! restoration, evaluation). Defaults are the desk-scale profile; the full
//! file is echoed into checkpoints for provenance.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub schedule: ScheduleConfig,
    pub pool: PoolConfig,
    pub general: GeneralPromptConfig,
    pub depth: DepthStubConfig,
    pub denoiser: DenoiserConfig,
    pub losses: LossWeights,
    pub synth: SynthConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Diffusion length T.
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Deterministic sampler steps at inference and for sampled supervision.
    pub sample_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Number of sub-prompts N.
    pub size: usize,
    /// Tokens per sub-prompt L_s.
    pub tokens: usize,
    /// Sub-prompts selected per query.
    pub top_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralPromptConfig {
    /// General prompt token count L_g.
    pub tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthStubConfig {
    /// Square patch side for descriptor extraction.
    pub patch: usize,
    /// Stride between patches.
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Per-level channel multipliers; the level count is the vector length.
    pub channel_mults: Vec<usize>,
    /// Residual blocks per level on each of the encoder and decoder sides.
    pub res_blocks: usize,
    /// Attention heads at the bottleneck injection site.
    pub heads: usize,
    /// Bottleneck width D; must equal base_channels * last multiplier.
    pub dim: usize,
    /// Time-embedding MLP width.
    pub time_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_res: f64,
    pub lambda_cp: f64,
    pub lambda_psnr: f64,
    pub lambda_cp_sample: f64,
    /// Run the sampled-supervision branch every this many steps (1 = every
    /// step). The branch contributes zero on off steps.
    pub sampled_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Samples written by the synth command.
    pub count: usize,
    /// Mix probabilities over [rain, haze, snow, raindrop, composite].
    pub mix: [f64; 5],
    pub rain: RainConfig,
    pub haze: HazeConfig,
    pub snow: SnowConfig,
    pub raindrop: RaindropConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainConfig {
    pub streaks: [usize; 2],
    pub length: [f64; 2],
    pub angle_deg: [f64; 2],
    pub strength: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazeConfig {
    pub transmission: [f64; 2],
    pub atmospheric_light: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnowConfig {
    pub flakes: [usize; 2],
    pub radius: [f64; 2],
    pub brightness: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaindropConfig {
    pub drops: [usize; 2],
    pub radius: [f64; 2],
    pub brighten: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    /// Cosine decay floor.
    pub lr_floor: f64,
    /// Decay of the evaluation-time parameter moving average.
    pub ema_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Training crop side; must not exceed synth.image_size.
    pub patch_size: usize,
    pub hflip: bool,
    /// Random rotation by a multiple of 90 degrees.
    pub rotate: bool,
    /// 0 streams a fresh synthetic sample per draw; a positive value cycles
    /// a fixed pool of that many samples, reshuffled every epoch.
    pub dataset_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            schedule: ScheduleConfig::default(),
            pool: PoolConfig::default(),
            general: GeneralPromptConfig::default(),
            depth: DepthStubConfig::default(),
            denoiser: DenoiserConfig::default(),
            losses: LossWeights::default(),
            synth: SynthConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t: 1000, beta_start: 1e-4, beta_end: 0.02, sample_steps: 2 }
    }
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { size: 20, tokens: 64, top_k: 5 }
    }
}

impl Default for GeneralPromptConfig {
    fn default() -> Self {
        Self { tokens: 256 }
    }
}

impl Default for DepthStubConfig {
    fn default() -> Self {
        Self { patch: 8, stride: 8 }
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            heads: 4,
            dim: 128,
            time_dim: 128,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_res: 1.0,
            lambda_cp: 1.0,
            lambda_psnr: 1.0,
            lambda_cp_sample: 1.0,
            sampled_every: 1,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            count: 64,
            mix: [0.2, 0.2, 0.2, 0.2, 0.2],
            rain: RainConfig::default(),
            haze: HazeConfig::default(),
            snow: SnowConfig::default(),
            raindrop: RaindropConfig::default(),
        }
    }
}

impl Default for RainConfig {
    fn default() -> Self {
        Self {
            streaks: [8, 24],
            length: [6.0, 16.0],
            angle_deg: [-30.0, 30.0],
            strength: [0.15, 0.45],
        }
    }
}

impl Default for HazeConfig {
    fn default() -> Self {
        Self { transmission: [0.35, 0.75], atmospheric_light: [0.8, 1.0] }
    }
}

impl Default for SnowConfig {
    fn default() -> Self {
        Self { flakes: [30, 90], radius: [0.8, 2.2], brightness: [0.6, 0.95] }
    }
}

impl Default for RaindropConfig {
    fn default() -> Self {
        Self { drops: [4, 10], radius: [2.0, 5.0], brighten: [0.05, 0.2] }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.995, eps: 1e-8, lr: 1.5e-4, lr_floor: 0.0, ema_decay: 0.995 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 4,
            patch_size: 64,
            hflip: true,
            rotate: true,
            dataset_size: 0,
            checkpoint_every: 1000,
            log_every: 1,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::config(format!("{name} range [{}, {}] is invalid", r[0], r[1])));
    }
    Ok(())
}

fn check_count_range(name: &str, r: [usize; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::config(format!("{name} range [{}, {}] is invalid", r[0], r[1])));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config encode: {e}")))
    }

    /// Spatial downsampling factor of the denoiser.
    pub fn down_factor(&self) -> usize {
        1 << (self.denoiser.channel_mults.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.t < 2 {
            return Err(Error::config(format!("schedule.t must be at least 2, got {}", s.t)));
        }
        if !(s.beta_start > 0.0 && s.beta_end < 1.0 && s.beta_start <= s.beta_end) {
            return Err(Error::config(format!(
                "schedule betas [{}, {}] must satisfy 0 < start <= end < 1",
                s.beta_start, s.beta_end
            )));
        }
        if s.sample_steps == 0 || s.sample_steps > s.t {
            return Err(Error::config(format!(
                "schedule.sample_steps {} outside [1, {}]",
                s.sample_steps, s.t
            )));
        }

        let p = &self.pool;
        if p.size == 0 || p.tokens == 0 {
            return Err(Error::config("pool.size and pool.tokens must be positive"));
        }
        if p.top_k == 0 || p.top_k > p.size {
            return Err(Error::config(format!(
                "pool.top_k {} outside [1, {}]",
                p.top_k, p.size
            )));
        }

        if self.general.tokens == 0 {
            return Err(Error::config("general.tokens must be positive"));
        }
        if self.depth.patch == 0 || self.depth.stride == 0 {
            return Err(Error::config("depth.patch and depth.stride must be positive"));
        }

        let d = &self.denoiser;
        if d.base_channels == 0 || d.channel_mults.is_empty() || d.res_blocks == 0 {
            return Err(Error::config("denoiser channel layout must be nonempty"));
        }
        if d.channel_mults.iter().any(|&m| m == 0) {
            return Err(Error::config("denoiser.channel_mults entries must be positive"));
        }
        let bottleneck = d.base_channels * d.channel_mults.last().unwrap();
        if d.dim != bottleneck {
            return Err(Error::config(format!(
                "denoiser.dim {} must equal base_channels * last multiplier = {bottleneck}",
                d.dim
            )));
        }
        if d.heads == 0 || d.dim % d.heads != 0 {
            return Err(Error::config(format!(
                "denoiser.heads {} must divide dim {}",
                d.heads, d.dim
            )));
        }
        if d.time_dim == 0 || d.time_dim % 2 != 0 {
            return Err(Error::config(format!("denoiser.time_dim {} must be even", d.time_dim)));
        }

        let lw = &self.losses;
        for (name, v) in [
            ("lambda_res", lw.lambda_res),
            ("lambda_cp", lw.lambda_cp),
            ("lambda_psnr", lw.lambda_psnr),
            ("lambda_cp_sample", lw.lambda_cp_sample),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("losses.{name} must be finite and >= 0")));
            }
        }
        if lw.sampled_every == 0 {
            return Err(Error::config("losses.sampled_every must be positive"));
        }

        let sy = &self.synth;
        if sy.image_size < 8 {
            return Err(Error::config(format!("synth.image_size {} too small", sy.image_size)));
        }
        let mix_sum: f64 = sy.mix.iter().sum();
        if sy.mix.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (mix_sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!(
                "synth.mix must be probabilities summing to 1, got {:?}",
                sy.mix
            )));
        }
        check_count_range("synth.rain.streaks", sy.rain.streaks)?;
        check_range("synth.rain.length", sy.rain.length)?;
        check_range("synth.rain.angle_deg", sy.rain.angle_deg)?;
        check_range("synth.rain.strength", sy.rain.strength)?;
        check_range("synth.haze.transmission", sy.haze.transmission)?;
        check_range("synth.haze.atmospheric_light", sy.haze.atmospheric_light)?;
        for r in [sy.haze.transmission, sy.haze.atmospheric_light] {
            if r[0] < 0.0 || r[1] > 1.0 {
                return Err(Error::config("haze parameters must lie in [0, 1]"));
            }
        }
        check_count_range("synth.snow.flakes", sy.snow.flakes)?;
        check_range("synth.snow.radius", sy.snow.radius)?;
        check_range("synth.snow.brightness", sy.snow.brightness)?;
        check_count_range("synth.raindrop.drops", sy.raindrop.drops)?;
        check_range("synth.raindrop.radius", sy.raindrop.radius)?;
        check_range("synth.raindrop.brighten", sy.raindrop.brighten)?;

        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optim moment decays must lie in [0, 1)"));
        }
        if o.lr <= 0.0 || !o.lr.is_finite() || o.lr_floor < 0.0 || o.lr_floor > o.lr {
            return Err(Error::config(format!(
                "optim.lr {} / lr_floor {} invalid",
                o.lr, o.lr_floor
            )));
        }
        if o.eps <= 0.0 {
            return Err(Error::config("optim.eps must be positive"));
        }
        if !(0.0..1.0).contains(&o.ema_decay) {
            return Err(Error::config(format!("optim.ema_decay {} must lie in [0, 1)", o.ema_decay)));
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if t.patch_size == 0 || t.patch_size > sy.image_size {
            return Err(Error::config(format!(
                "train.patch_size {} outside [1, synth.image_size = {}]",
                t.patch_size, sy.image_size
            )));
        }
        let down = self.down_factor();
        if t.patch_size % down != 0 {
            return Err(Error::config(format!(
                "train.patch_size {} must be divisible by the down factor {down}",
                t.patch_size
            )));
        }
        if t.patch_size / down == 0 {
            return Err(Error::config("train.patch_size collapses at the bottleneck"));
        }
        if t.log_every == 0 || t.checkpoint_every == 0 {
            return Err(Error::config("train.log_every and checkpoint_every must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_profile() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.schedule.t, 1000);
        assert_eq!(c.schedule.beta_start, 1e-4);
        assert_eq!(c.schedule.beta_end, 0.02);
        assert_eq!(c.schedule.sample_steps, 2);
        assert_eq!(c.pool.size, 20);
        assert_eq!(c.pool.tokens, 64);
        assert_eq!(c.pool.top_k, 5);
        assert_eq!(c.general.tokens, 256);
        assert_eq!(c.denoiser.dim, 128);
        assert_eq!(c.optim.beta1, 0.9);
        assert_eq!(c.optim.beta2, 0.995);
        assert_eq!(c.optim.ema_decay, 0.995);
        assert_eq!(c.optim.lr, 1.5e-4);
        assert_eq!(c.losses.lambda_res, 1.0);
        assert_eq!(c.losses.lambda_cp, 1.0);
        assert_eq!(c.losses.lambda_psnr, 1.0);
        assert_eq!(c.losses.lambda_cp_sample, 1.0);
        assert_eq!(c.train.patch_size, 64);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.pool.size = 10;
        c.pool.top_k = 3;
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.pool.size, 10);
        assert_eq!(back.pool.top_k, 3);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml_str("seed = 9\n[pool]\ntop_k = 7\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.pool.top_k, 7);
        assert_eq!(c.pool.size, 20);
        assert_eq!(c.schedule.t, 1000);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(RunConfig::from_toml_str("not_a_field = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[pool]\nsizzle = 2\n").is_err());
    }

    #[test]
    fn validation_catches_module_precondition_breaks() {
        let mut c = RunConfig::default();
        c.pool.top_k = 21;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.schedule.sample_steps = 0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.denoiser.dim = 64;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.denoiser.heads = 3;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.synth.mix = [0.5, 0.5, 0.5, 0.0, 0.0];
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.train.patch_size = 62;
        assert!(c.validate().is_err(), "patch must divide by down factor");

        let mut c = RunConfig::default();
        c.optim.lr_floor = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn down_factor_follows_levels() {
        let mut c = RunConfig::default();
        assert_eq!(c.down_factor(), 4);
        c.denoiser.channel_mults = vec![1, 2];
        assert_eq!(c.down_factor(), 2);
        c.denoiser.channel_mults = vec![1];
        assert_eq!(c.down_factor(), 1);
    }
}
