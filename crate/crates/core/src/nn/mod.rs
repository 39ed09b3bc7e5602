//! Neural building blocks: parameter registry, layers, attention, and
//! optimization.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use attention::{CrossAttention, OutProj};
pub use layers::{
    avg_pool_2x2, timestep_encoding, upsample_nearest_2x, Conv1x1, Conv3x3, GroupNorm, Linear,
    TimeEmbed,
};
pub use optim::{cosine_lr, Adam, Ema};
pub use params::{Init, ParamStore};
