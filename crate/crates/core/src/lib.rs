//! Adverse-weather image restoration via residual diffusion with adaptive
//! prompt conditioning.
//!
//! The pipeline reconstructs the degradation residual (degraded minus clean)
//! with a conditional denoiser guided by two prompt kinds: weather-specific
//! prompts selected from a learned pool, and general prompts constrained by
//! scene depth features.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod general_prompts;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod prompt_pool;
pub mod rng;
pub mod schedule;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tasks;
pub mod train;
pub mod weather_synth;

pub use error::{Error, Result};
pub use img::ImageBuf;
pub use schedule::{build_linear_schedule, make_timestep_plan, DiffusionSchedule, PrevStep, TimestepPlan};
