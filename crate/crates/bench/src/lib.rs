//! Shared setup for the pipeline benchmarks: a configuration small enough
//! to keep iteration times in the microsecond-to-millisecond range.

use t3diff_core::config::RunConfig;

/// Desk-scale-but-smaller config used by every benchmark.
pub fn bench_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.schedule.sample_steps = 2;
    cfg.pool.size = 20;
    cfg.pool.tokens = 8;
    cfg.pool.top_k = 5;
    cfg.general.tokens = 16;
    cfg.depth.patch = 8;
    cfg.depth.stride = 8;
    cfg.denoiser.base_channels = 16;
    cfg.denoiser.channel_mults = vec![1, 2];
    cfg.denoiser.res_blocks = 1;
    cfg.denoiser.dim = 32;
    cfg.denoiser.time_dim = 32;
    cfg.synth.image_size = 32;
    cfg.train.patch_size = 32;
    cfg.train.batch_size = 1;
    cfg.validate().expect("bench config must satisfy module preconditions");
    cfg
}
