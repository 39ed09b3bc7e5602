//! Shared fixtures for the crate's unit tests.

use crate::config::RunConfig;

/// Smallest config that exercises every component: 16x16 images, a 2-level
/// denoiser with a 16-wide bottleneck, a 6-entry pool, and a 50-step
/// schedule sampled in 2 steps.
pub(crate) fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.schedule.t = 50;
    cfg.schedule.sample_steps = 2;
    cfg.pool.size = 6;
    cfg.pool.tokens = 4;
    cfg.pool.top_k = 2;
    cfg.general.tokens = 5;
    cfg.depth.patch = 8;
    cfg.depth.stride = 8;
    cfg.denoiser.base_channels = 8;
    cfg.denoiser.channel_mults = vec![1, 2];
    cfg.denoiser.res_blocks = 1;
    cfg.denoiser.heads = 4;
    cfg.denoiser.dim = 16;
    cfg.denoiser.time_dim = 16;
    cfg.synth.image_size = 16;
    cfg.train.patch_size = 16;
    cfg.train.batch_size = 2;
    cfg.validate().unwrap();
    cfg
}
