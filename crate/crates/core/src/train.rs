//! Training loop: per-step synthetic batches, gradient updates, EMA
//! maintenance, CSV logging, and periodic checkpoints.
//!
//! Every random decision is a pure function of the run seed plus a stream
//! tag: sample content comes from the sample's global index, augmentation
//! from the same index on its own stream, and the loss draws from
//! `(seed, step)`. A run is therefore bitwise reproducible, resumable from
//! any checkpoint, and independent of how many synthesis workers are used.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::losses::total_training_loss;
use crate::model::RestorationModel;
use crate::nn::optim::{cosine_lr, Adam, Ema};
use crate::nn::params::ParamStore;
use crate::rng::{derive_rng, stream};
use crate::weather_synth::{make_sample, DegradedSample};

pub const TRAIN_LOG_FILE: &str = "training_log.csv";
pub const TRAIN_LOG_HEADER: &str = "step,l_res,l_cp,l_psnr,l_cp_sample,total,learning_rate";
pub const FINAL_CHECKPOINT_FILE: &str = "checkpoint_final.ckpt";

/// Name of the periodic snapshot written after the given 1-based step count.
pub fn checkpoint_file_name(steps_done: usize) -> String {
    format!("checkpoint_{steps_done:06}.ckpt")
}

/// One logged training row, mirroring a CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_res: f64,
    pub l_cp: f64,
    pub l_psnr: f64,
    pub l_cp_sample: f64,
    pub total: f64,
    pub learning_rate: f64,
}

impl LogRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.l_res,
            self.l_cp,
            self.l_psnr,
            self.l_cp_sample,
            self.total,
            self.learning_rate
        )
    }
}

/// What a completed run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Steps completed over the whole run, resumed legs included.
    pub steps_done: usize,
    /// Rows logged by this invocation (the CSV also holds earlier legs').
    pub rows: Vec<LogRow>,
    pub final_checkpoint: PathBuf,
}

fn flip_mask(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; mask.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + (w - 1 - x)] = mask[y * w + x];
        }
    }
    out
}

/// Counterclockwise quarter turns, matching the image rotation: the pixel at
/// `(y, x)` moves to `(h-1-x, y)` per turn on a square patch.
fn rot_mask(mask: &[u8], side: usize, quarter_turns: usize) -> Vec<u8> {
    let mut cur = mask.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0u8; cur.len()];
        for y in 0..side {
            for x in 0..side {
                next[(side - 1 - x) * side + y] = cur[y * side + x];
            }
        }
        cur = next;
    }
    cur
}

fn crop_mask(mask: &[u8], w: usize, oy: usize, ox: usize, side: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            out.push(mask[(oy + y) * w + (ox + x)]);
        }
    }
    out
}

fn crop_at(img: &ImageBuf, oy: usize, ox: usize, side: usize) -> ImageBuf {
    let mut out = ImageBuf::new(side, side);
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                out.set(y, x, c, img.get(oy + y, ox + x, c));
            }
        }
    }
    out
}

/// Random square crop plus the configured flips/rotations, applied
/// identically to the clean side, the degraded side, and the write mask.
/// The residual is recomputed from the transformed pair, so the identity
/// `x = y + r` survives any augmentation.
///
/// Draw order is fixed (offset y, offset x, flip coin, rotation pick) and a
/// disabled flag skips its draw entirely.
pub fn augment_sample(
    sample: &DegradedSample,
    patch: usize,
    hflip: bool,
    rotate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DegradedSample> {
    let (h, w) = (sample.x.h, sample.x.w);
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Image(format!("patch {patch} does not fit in {h}x{w}")));
    }
    let oy = if h == patch { 0 } else { rng.gen_range(0..=h - patch) };
    let ox = if w == patch { 0 } else { rng.gen_range(0..=w - patch) };
    let mut x = crop_at(&sample.x, oy, ox, patch);
    let mut y = crop_at(&sample.y, oy, ox, patch);
    let mut mask = crop_mask(&sample.mask, w, oy, ox, patch);
    if hflip && rng.gen_bool(0.5) {
        x = x.hflip();
        y = y.hflip();
        mask = flip_mask(&mask, patch, patch);
    }
    if rotate {
        let k = rng.gen_range(0..4usize);
        if k > 0 {
            x = x.rot90(k);
            y = y.rot90(k);
            mask = rot_mask(&mask, patch, k);
        }
    }
    Ok(DegradedSample::assemble(x, y, sample.label, sample.params.clone(), mask))
}

/// Loader parallelism from `T3_NUM_WORKERS`; unset, unparsable, and 0 all
/// mean serial synthesis.
pub fn env_worker_count() -> usize {
    std::env::var("T3_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

/// Which synthetic sample backs global draw number `draw`. Streaming mode
/// (`dataset_size == 0`) uses the draw itself; pool mode cycles a fixed set
/// of `dataset_size` samples in a fresh shuffled order every epoch, so each
/// sample appears exactly once per epoch and no index beyond the pool is
/// ever touched.
fn source_index(cfg: &RunConfig, draw: u64) -> u64 {
    let n = cfg.train.dataset_size as u64;
    if n == 0 {
        return draw;
    }
    let (epoch, slot) = (draw / n, draw % n);
    let mut order: Vec<u64> = (0..n).collect();
    let mut rng = derive_rng(cfg.seed, &[stream::BATCH_ORDER, epoch]);
    order.shuffle(&mut rng);
    order[slot as usize]
}

fn build_one(cfg: &RunConfig, draw: u64) -> Result<DegradedSample> {
    let sample = make_sample(&cfg.synth, cfg.seed, source_index(cfg, draw))?;
    // Augmentation is keyed by the draw, not the source, so a pooled sample
    // revisited in a later epoch gets a fresh crop and orientation.
    let mut rng = derive_rng(cfg.seed, &[stream::AUGMENT, draw]);
    augment_sample(
        &sample,
        cfg.train.patch_size,
        cfg.train.hflip,
        cfg.train.rotate,
        &mut rng,
    )
}

/// The batch for one optimization step: synthetic samples at global draws
/// `step * batch_size ..`, augmented per-sample. `workers > 1` splits
/// synthesis across threads; the result does not depend on the worker count
/// because every draw is seeded by its own index.
pub fn synth_training_batch(
    cfg: &RunConfig,
    step: usize,
    workers: usize,
) -> Result<Vec<DegradedSample>> {
    let base = (step * cfg.train.batch_size) as u64;
    let indices: Vec<u64> = (0..cfg.train.batch_size as u64).map(|j| base + j).collect();
    if workers <= 1 || indices.len() <= 1 {
        return indices.iter().map(|&i| build_one(cfg, i)).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    let mut out: Vec<Option<DegradedSample>> = Vec::new();
    out.resize_with(indices.len(), || None);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (ci, slot) in out.chunks_mut(chunk).enumerate() {
            let idx = &indices[ci * chunk..(ci * chunk + slot.len())];
            handles.push(scope.spawn(move || -> Result<()> {
                for (s, &i) in slot.iter_mut().zip(idx) {
                    *s = Some(build_one(cfg, i)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("synthesis worker panicked")?;
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|s| s.expect("worker filled every slot")).collect())
}

fn append_log_rows(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Runs training from scratch or from a checkpoint, writing logs and
/// snapshots under `cfg.out_dir`.
///
/// With `resume_from`, parameters, optimizer moments, EMA shadow, and the
/// step counter are restored and the loop continues to `train.iterations`;
/// under a fixed seed the continued run is bitwise identical to one that
/// never stopped. A non-finite total aborts with the offending step and the
/// component values in the error.
pub fn train(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let device = Device::Cpu;

    let mut ps = ParamStore::new(cfg.seed, DType::F32, device.clone());
    let model = RestorationModel::new(&mut ps, cfg)?;
    let mut adam = Adam::new(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
    let mut ema = Ema::new(&ps, cfg.optim.ema_decay)?;

    let mut start_step = 0usize;
    if let Some(path) = resume_from {
        let ckpt = load_checkpoint(path, &device)?;
        ckpt.restore(&ps, &mut adam, &mut ema)?;
        start_step = ckpt.step;
        if start_step > cfg.train.iterations {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {start_step}, beyond train.iterations {}",
                cfg.train.iterations
            )));
        }
    }

    let workers = env_worker_count();
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut rows = Vec::new();

    for step in start_step..cfg.train.iterations {
        let batch = synth_training_batch(cfg, step, workers)?;
        let lr = cosine_lr(cfg.optim.lr, cfg.optim.lr_floor, step, cfg.train.iterations);
        let (total, report) =
            total_training_loss(&model, &ps, &batch, &cfg.losses, cfg.seed, step as u64)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "l_res={} l_cp={} l_psnr={} l_cp_sample={}",
                    report.l_res, report.l_cp, report.l_psnr, report.l_cp_sample
                ),
            });
        }
        let grads = total.backward()?;
        adam.step(&ps, &grads, lr)?;
        ema.update(&ps)?;

        let done = step + 1;
        if step % cfg.train.log_every == 0 || done == cfg.train.iterations {
            rows.push(LogRow {
                step,
                l_res: report.l_res,
                l_cp: report.l_cp,
                l_psnr: report.l_psnr,
                l_cp_sample: report.l_cp_sample,
                total: report.total,
                learning_rate: lr,
            });
        }
        if done % cfg.train.checkpoint_every == 0 && done != cfg.train.iterations {
            save_checkpoint(
                &out_dir.join(checkpoint_file_name(done)),
                &ps,
                &adam,
                &ema,
                cfg,
                done,
            )?;
        }
    }

    append_log_rows(&log_path, &rows)?;
    let final_path = out_dir.join(FINAL_CHECKPOINT_FILE);
    save_checkpoint(&final_path, &ps, &adam, &ema, cfg, cfg.train.iterations)?;
    Ok(TrainOutcome {
        steps_done: cfg.train.iterations,
        rows,
        final_checkpoint: final_path,
    })
}
