//! Procedural paired-sample synthesis: clean base textures degraded by four
//! weather generators plus a sequential composite. Every generator reports
//! the exact pixel mask it wrote, and the stored residual is computed after
//! the final clamp so `x = y + r_d` holds bitwise.

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::rng::{derive_rng, stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherLabel {
    Rain,
    Haze,
    Snow,
    Raindrop,
    Composite,
}

impl WeatherLabel {
    pub const ALL: [WeatherLabel; 5] = [
        WeatherLabel::Rain,
        WeatherLabel::Haze,
        WeatherLabel::Snow,
        WeatherLabel::Raindrop,
        WeatherLabel::Composite,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            WeatherLabel::Rain => "rain",
            WeatherLabel::Haze => "haze",
            WeatherLabel::Snow => "snow",
            WeatherLabel::Raindrop => "raindrop",
            WeatherLabel::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(WeatherLabel::Rain),
            "haze" => Ok(WeatherLabel::Haze),
            "snow" => Ok(WeatherLabel::Snow),
            "raindrop" => Ok(WeatherLabel::Raindrop),
            "composite" => Ok(WeatherLabel::Composite),
            other => Err(Error::config(format!("unknown weather label {other}"))),
        }
    }
}

/// Snaps a [0,1] value to the dyadic grid `m / 256`. On this grid the
/// difference of any two values and its re-addition are exact in f32, which
/// is what makes the stored residual identity bitwise. The grid error
/// (at most 1/512) sits far below the 8-bit PNG quantum.
pub fn quantize_store(v: f32) -> f32 {
    (v * 256.0).round() / 256.0
}

fn quantize_image(img: &mut ImageBuf) {
    for v in &mut img.data {
        *v = quantize_store(*v);
    }
}

/// One paired training sample. `x` and `y` live on the storage grid
/// ([`quantize_store`]); `r_d = x - y` computed after clamp and
/// quantization, so `x = y + r_d` holds bitwise. `mask` marks every pixel
/// whose stored value a generator changed (1 byte per pixel).
#[derive(Debug, Clone)]
pub struct DegradedSample {
    pub x: ImageBuf,
    pub y: ImageBuf,
    pub r_d: Vec<f32>,
    pub label: WeatherLabel,
    pub params: String,
    pub mask: Vec<u8>,
}

impl DegradedSample {
    /// Quantizes the pair onto the storage grid, computes the residual, and
    /// trims the write mask to pixels whose stored values differ.
    pub fn assemble(
        mut x: ImageBuf,
        mut y: ImageBuf,
        label: WeatherLabel,
        params: String,
        mut mask: Vec<u8>,
    ) -> Self {
        quantize_image(&mut x);
        quantize_image(&mut y);
        let r_d: Vec<f32> = x.data.iter().zip(&y.data).map(|(a, b)| a - b).collect();
        for p in 0..mask.len() {
            let changed = (0..3).any(|c| r_d[p * 3 + c] != 0.0);
            mask[p] &= changed as u8;
        }
        Self { x, y, r_d, label, params, mask }
    }

    /// Residual as an image-shaped buffer (values in [-1, 1]).
    pub fn residual_image(&self) -> ImageBuf {
        ImageBuf { h: self.x.h, w: self.x.w, data: self.r_d.clone() }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn sample_count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Smooth procedural clean image: a random linear gradient, a few soft
/// color blobs, and a faint checker mix.
pub fn make_clean(size: usize, rng: &mut ChaCha8Rng) -> ImageBuf {
    let mut img = ImageBuf::new(size, size);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let base: [f64; 3] = [
        rng.gen_range(0.15..0.7),
        rng.gen_range(0.15..0.7),
        rng.gen_range(0.15..0.7),
    ];
    let grad_amp: [f64; 3] =
        [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];

    struct Blob {
        cy: f64,
        cx: f64,
        sigma: f64,
        color: [f64; 3],
    }
    let n_blobs = rng.gen_range(2..=5);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cy: rng.gen_range(0.0..size as f64),
            cx: rng.gen_range(0.0..size as f64),
            sigma: rng.gen_range(size as f64 * 0.08..size as f64 * 0.3),
            color: [
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.35..0.35),
            ],
        })
        .collect();

    let checker_cell = rng.gen_range(4..=12usize);
    let checker_amp: f64 = rng.gen_range(0.0..0.06);

    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let g = gx * u + gy * v;
            let checker =
                if (y / checker_cell + x / checker_cell) % 2 == 0 { checker_amp } else { 0.0 };
            for c in 0..3 {
                let mut val = base[c] + grad_amp[c] * g + checker;
                for b in &blobs {
                    let dy = y as f64 - b.cy;
                    let dx = x as f64 - b.cx;
                    let w = (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
                    val += b.color[c] * w;
                }
                img.set(y, x, c, val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Scattering compositor: `y = x t + A (1 - t)`, clamped to [0,1]. The mask
/// marks pixels whose stored value actually changed (t = 1, or values that
/// round back to themselves, leave the bit clear).
pub fn synth_haze(x: &ImageBuf, t: f64, a: f64) -> Result<(ImageBuf, Vec<u8>)> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&a) {
        return Err(Error::config(format!("haze parameters t={t}, A={a} outside [0, 1]")));
    }
    let mut y = x.clone();
    let mut mask = vec![0u8; x.h * x.w];
    for p in 0..x.h * x.w {
        let mut wrote = false;
        for c in 0..3 {
            let old = y.data[p * 3 + c];
            let new = (old as f64 * t + a * (1.0 - t)).clamp(0.0, 1.0) as f32;
            if new != old {
                y.data[p * 3 + c] = new;
                wrote = true;
            }
        }
        if wrote {
            mask[p] = 1;
        }
    }
    Ok((y, mask))
}

/// Oriented additive streaks. Each streak is a bright anti-aliased line
/// segment; the mask covers exactly the pixels whose value changed.
pub fn synth_rain(
    x: &ImageBuf,
    cfg: &crate::config::RainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuf, Vec<u8>)> {
    let mut y = x.clone();
    let mut mask = vec![0u8; x.h * x.w];
    let n = sample_count(rng, cfg.streaks);
    for _ in 0..n {
        let cy = rng.gen_range(0.0..x.h as f64);
        let cx = rng.gen_range(0.0..x.w as f64);
        let len = sample_range(rng, cfg.length);
        let angle = sample_range(rng, cfg.angle_deg).to_radians();
        let strength = sample_range(rng, cfg.strength);
        // Direction mostly vertical; the angle tilts it.
        let (dy, dx) = (angle.cos(), angle.sin());
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let f = s as f64 / steps.max(1) as f64 - 0.5;
            let py = cy + dy * len * f;
            let px = cx + dx * len * f;
            let (iy, ix) = (py.round() as isize, px.round() as isize);
            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                continue;
            }
            let (uy, ux) = (iy as usize, ix as usize);
            // Fade toward the streak ends.
            let fade = 1.0 - 2.0 * f.abs();
            let add = (strength * fade.max(0.2)) as f32;
            let mut wrote = false;
            for c in 0..3 {
                let old = y.get(uy, ux, c);
                let new = (old + add).min(1.0);
                if new != old {
                    y.set(uy, ux, c, new);
                    wrote = true;
                }
            }
            if wrote {
                mask[uy * x.w + ux] = 1;
            }
        }
    }
    Ok((y, mask))
}

/// Elliptical bright particles blended over the image.
pub fn synth_snow(
    x: &ImageBuf,
    cfg: &crate::config::SnowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuf, Vec<u8>)> {
    let mut y = x.clone();
    let mut mask = vec![0u8; x.h * x.w];
    let n = sample_count(rng, cfg.flakes);
    for _ in 0..n {
        let cy = rng.gen_range(0.0..x.h as f64);
        let cx = rng.gen_range(0.0..x.w as f64);
        let r = sample_range(rng, cfg.radius);
        let bright = sample_range(rng, cfg.brightness);
        let stretch = rng.gen_range(0.7..1.4);
        let reach = (r * 1.6).ceil() as isize;
        for oy in -reach..=reach {
            for ox in -reach..=reach {
                let iy = cy.round() as isize + oy;
                let ix = cx.round() as isize + ox;
                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                    continue;
                }
                let dy = iy as f64 - cy;
                let dx = (ix as f64 - cx) / stretch;
                let d2 = (dy * dy + dx * dx) / (r * r);
                if d2 > 1.0 {
                    continue;
                }
                let alpha = bright * (1.0 - d2).powi(2);
                let (uy, ux) = (iy as usize, ix as usize);
                let mut wrote = false;
                for c in 0..3 {
                    let old = y.get(uy, ux, c);
                    let new = ((1.0 - alpha) * old as f64 + alpha).clamp(0.0, 1.0) as f32;
                    if new != old {
                        y.set(uy, ux, c, new);
                        wrote = true;
                    }
                }
                if wrote {
                    mask[uy * x.w + ux] = 1;
                }
            }
        }
    }
    Ok((y, mask))
}

/// Adherent-droplet effect: disc regions become a blurred, slightly
/// brightened copy of their neighborhood.
pub fn synth_raindrop(
    x: &ImageBuf,
    cfg: &crate::config::RaindropConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuf, Vec<u8>)> {
    let mut y = x.clone();
    let mut mask = vec![0u8; x.h * x.w];
    let n = sample_count(rng, cfg.drops);
    for _ in 0..n {
        let cy = rng.gen_range(0.0..x.h as f64);
        let cx = rng.gen_range(0.0..x.w as f64);
        let r = sample_range(rng, cfg.radius);
        let brighten = sample_range(rng, cfg.brighten);
        let reach = r.ceil() as isize;
        let blur = (r * 0.6).max(1.0) as isize;
        for oy in -reach..=reach {
            for ox in -reach..=reach {
                let iy = cy.round() as isize + oy;
                let ix = cx.round() as isize + ox;
                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                    continue;
                }
                let dy = iy as f64 - cy;
                let dx = ix as f64 - cx;
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (uy, ux) = (iy as usize, ix as usize);
                // Box-blur the source neighborhood (reads from x, so drops
                // never compound within one call).
                let mut acc = [0.0f64; 3];
                let mut cnt = 0.0f64;
                for by in -blur..=blur {
                    for bx in -blur..=blur {
                        let sy = (iy + by).clamp(0, x.h as isize - 1) as usize;
                        let sx = (ix + bx).clamp(0, x.w as isize - 1) as usize;
                        for c in 0..3 {
                            acc[c] += x.get(sy, sx, c) as f64;
                        }
                        cnt += 1.0;
                    }
                }
                let mut wrote = false;
                for c in 0..3 {
                    let old = y.get(uy, ux, c);
                    let new = ((acc[c] / cnt) + brighten).clamp(0.0, 1.0) as f32;
                    if new != old {
                        y.set(uy, ux, c, new);
                        wrote = true;
                    }
                }
                if wrote {
                    mask[uy * x.w + ux] = 1;
                }
            }
        }
    }
    Ok((y, mask))
}

fn pick_label(mix: &[f64; 5], rng: &mut ChaCha8Rng) -> WeatherLabel {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return WeatherLabel::ALL[i];
        }
    }
    WeatherLabel::ALL[4]
}

fn apply_single(
    label: WeatherLabel,
    x: &ImageBuf,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBuf, Vec<u8>, String)> {
    match label {
        WeatherLabel::Rain => {
            let (y, m) = synth_rain(x, &cfg.rain, rng)?;
            Ok((y, m, "rain".into()))
        }
        WeatherLabel::Haze => {
            let t = sample_range(rng, cfg.haze.transmission);
            let a = sample_range(rng, cfg.haze.atmospheric_light);
            let (y, m) = synth_haze(x, t, a)?;
            Ok((y, m, format!("haze t={t:.4} A={a:.4}")))
        }
        WeatherLabel::Snow => {
            let (y, m) = synth_snow(x, &cfg.snow, rng)?;
            Ok((y, m, "snow".into()))
        }
        WeatherLabel::Raindrop => {
            let (y, m) = synth_raindrop(x, &cfg.raindrop, rng)?;
            Ok((y, m, "raindrop".into()))
        }
        WeatherLabel::Composite => unreachable!("composite handled by the caller"),
    }
}

fn degrade_with_rng(cfg: &SynthConfig, x: ImageBuf, rng: &mut ChaCha8Rng) -> Result<DegradedSample> {
    let label = pick_label(&cfg.mix, rng);
    if label == WeatherLabel::Composite {
        // Two distinct single-weather generators applied sequentially.
        let first = rng.gen_range(0..4usize);
        let second = (first + rng.gen_range(1..4usize)) % 4;
        let (y1, m1, p1) = apply_single(WeatherLabel::ALL[first], &x, cfg, rng)?;
        let (y2, m2, p2) = apply_single(WeatherLabel::ALL[second], &y1, cfg, rng)?;
        let mask: Vec<u8> = m1.iter().zip(&m2).map(|(a, b)| a | b).collect();
        Ok(DegradedSample::assemble(
            x,
            y2,
            WeatherLabel::Composite,
            format!("composite [{p1}] then [{p2}]"),
            mask,
        ))
    } else {
        let (y, mask, params) = apply_single(label, &x, cfg, rng)?;
        Ok(DegradedSample::assemble(x, y, label, params, mask))
    }
}

/// Builds sample `index` of the stream defined by `(cfg, seed)`. Each index
/// derives its own RNG, so any subset can be generated in any order or on
/// any worker with identical results.
pub fn make_sample(cfg: &SynthConfig, seed: u64, index: u64) -> Result<DegradedSample> {
    let mut rng = derive_rng(seed, &[stream::SYNTH_SAMPLE, index]);
    let x = make_clean(cfg.image_size, &mut rng);
    degrade_with_rng(cfg, x, &mut rng)
}

/// Degrades a caller-provided clean image (the ingestion path for real
/// photos). Sample `index` of its own `(cfg, seed)` stream; the image keeps
/// its size, so `cfg.image_size` is ignored here.
pub fn degrade_image(cfg: &SynthConfig, seed: u64, index: u64, mut x: ImageBuf) -> Result<DegradedSample> {
    if !x.is_finite() {
        return Err(Error::Image("clean input contains non-finite values".into()));
    }
    x.clamp01();
    let mut rng = derive_rng(seed, &[stream::SYNTH_SAMPLE, index]);
    degrade_with_rng(cfg, x, &mut rng)
}

/// First `n` samples of the `(cfg, seed)` stream.
pub fn make_batch(cfg: &SynthConfig, seed: u64, n: usize) -> Result<Vec<DegradedSample>> {
    if n == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    (0..n as u64).map(|i| make_sample(cfg, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RainConfig, RaindropConfig, SnowConfig};

    fn cfg32() -> SynthConfig {
        SynthConfig { image_size: 32, ..SynthConfig::default() }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        derive_rng(seed, &[900])
    }

    #[test]
    fn haze_closed_forms() {
        let x = make_clean(16, &mut rng(1));
        let (y, mask) = synth_haze(&x, 1.0, 0.5).unwrap();
        assert_eq!(y.data, x.data);
        assert!(mask.iter().all(|&m| m == 0));

        let (y0, _) = synth_haze(&x, 0.0, 0.3).unwrap();
        assert!(y0.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let half = ImageBuf::filled(8, 8, 0.5);
        let (yh, _) = synth_haze(&half, 0.5, 1.0).unwrap();
        assert!(yh.data.iter().all(|&v| (v - 0.75).abs() < 1e-6));

        assert!(synth_haze(&x, 1.5, 0.5).is_err());
    }

    #[test]
    fn zero_intensity_generators_are_identity() {
        let x = make_clean(16, &mut rng(2));
        let rain = RainConfig { streaks: [0, 0], ..RainConfig::default() };
        let (y, m) = synth_rain(&x, &rain, &mut rng(3)).unwrap();
        assert_eq!(y.data, x.data);
        assert!(m.iter().all(|&v| v == 0));

        let snow = SnowConfig { flakes: [0, 0], ..SnowConfig::default() };
        let (y, m) = synth_snow(&x, &snow, &mut rng(4)).unwrap();
        assert_eq!(y.data, x.data);
        assert!(m.iter().all(|&v| v == 0));

        let drop = RaindropConfig { drops: [0, 0], ..RaindropConfig::default() };
        let (y, m) = synth_raindrop(&x, &drop, &mut rng(5)).unwrap();
        assert_eq!(y.data, x.data);
        assert!(m.iter().all(|&v| v == 0));
    }

    #[test]
    fn generators_deterministic_under_seed() {
        let cfg = cfg32();
        for i in 0..6u64 {
            let a = make_sample(&cfg, 77, i).unwrap();
            let b = make_sample(&cfg, 77, i).unwrap();
            assert_eq!(a.y.data, b.y.data);
            assert_eq!(a.x.data, b.x.data);
            assert_eq!(a.label, b.label);
            assert_eq!(a.mask, b.mask);
        }
    }

    /// Residual support must match the emitted mask exactly: a pixel changed
    /// iff its mask bit is set.
    fn check_support(s: &DegradedSample) {
        let w = s.x.w;
        for p in 0..s.x.h * w {
            let changed = (0..3).any(|c| s.r_d[p * 3 + c] != 0.0);
            assert_eq!(
                changed,
                s.mask[p] == 1,
                "pixel {p}: changed={changed} mask={}",
                s.mask[p]
            );
        }
    }

    #[test]
    fn residual_support_matches_mask_for_each_generator() {
        for (i, mix) in [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ]
        .iter()
        .enumerate()
        {
            let cfg = SynthConfig { mix: *mix, ..cfg32() };
            for idx in 0..4u64 {
                let s = make_sample(&cfg, 1000 + i as u64, idx).unwrap();
                let l1: f32 = s.r_d.iter().map(|v| v.abs()).sum();
                assert!(l1 > 0.0, "degenerate sample for mix {i}");
                check_support(&s);
            }
        }
    }

    #[test]
    fn residual_identity_is_exact() {
        let cfg = cfg32();
        for idx in 0..8u64 {
            let s = make_sample(&cfg, 5, idx).unwrap();
            for i in 0..s.x.data.len() {
                assert_eq!(s.x.data[i], s.y.data[i] + s.r_d[i]);
            }
            assert!(s.x.is_finite() && s.y.is_finite());
            assert!(s.y.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// The storage grid guarantees the identity for every representable
    /// value pair, not just the ones synthesis happens to produce.
    #[test]
    fn storage_grid_identity_exhaustive() {
        for m in 0..=256u32 {
            for n in 0..=256u32 {
                let x = m as f32 / 256.0;
                let y = n as f32 / 256.0;
                assert_eq!(quantize_store(x), x);
                let r = x - y;
                assert_eq!(y + r, x, "m={m} n={n}");
                assert_eq!(r, (m as f32 - n as f32) / 256.0);
            }
        }
    }

    #[test]
    fn pure_mix_fixes_labels() {
        let cfg = SynthConfig { mix: [0.0, 1.0, 0.0, 0.0, 0.0], ..cfg32() };
        let batch = make_batch(&cfg, 8, 6).unwrap();
        assert!(batch.iter().all(|s| s.label == WeatherLabel::Haze));
    }

    #[test]
    fn separability_on_masked_pixels() {
        // Mean |residual| on written pixels must dominate untouched pixels
        // by a wide margin (untouched pixels are bit-identical, so their
        // residual is exactly zero).
        let cfg = cfg32();
        let batch = make_batch(&cfg, 31, 12).unwrap();
        for s in &batch {
            let (mut on, mut n_on, mut off, mut n_off) = (0.0f64, 0usize, 0.0f64, 0usize);
            for p in 0..s.x.h * s.x.w {
                let mag: f64 =
                    (0..3).map(|c| s.r_d[p * 3 + c].abs() as f64).sum::<f64>() / 3.0;
                if s.mask[p] == 1 {
                    on += mag;
                    n_on += 1;
                } else {
                    off += mag;
                    n_off += 1;
                }
            }
            assert!(n_on > 0, "sample with empty mask");
            let on_mean = on / n_on as f64;
            if n_off == 0 {
                continue;
            }
            let off_mean = off / n_off as f64;
            assert!(
                on_mean > 10.0 * off_mean.max(1e-12),
                "separability violated: on {on_mean}, off {off_mean}"
            );
        }
    }

    #[test]
    fn composite_masks_are_unions() {
        let cfg = SynthConfig { mix: [0.0, 0.0, 0.0, 0.0, 1.0], ..cfg32() };
        for idx in 0..6u64 {
            let s = make_sample(&cfg, 99, idx).unwrap();
            assert_eq!(s.label, WeatherLabel::Composite);
            check_support(&s);
        }
    }

    #[test]
    fn label_roundtrip() {
        for l in WeatherLabel::ALL {
            assert_eq!(WeatherLabel::parse(l.as_str()).unwrap(), l);
        }
        assert!(WeatherLabel::parse("sleet").is_err());
    }

    #[test]
    fn make_batch_rejects_zero() {
        assert!(make_batch(&cfg32(), 0, 0).is_err());
    }
}
