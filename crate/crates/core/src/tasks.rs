//! Operator-facing pipelines built on a loaded checkpoint: image
//! restoration, paired-dataset evaluation, and prompt-pool usage statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, DatasetEntry};
use crate::error::{Error, Result};
use crate::general_prompts::{load_precomputed_depth_features, DepthFeatureMap, DepthSource};
use crate::img::{batch_tensor, ImageBuf};
use crate::metrics::evaluate_pairs;
use crate::model::RestorationModel;
use crate::nn::params::ParamStore;
use crate::prompt_pool::SelectionRecord;
use crate::rng::{derive_rng, randn_tensor, stream};
use crate::weather_synth::DegradedSample;

pub const EVAL_CSV_HEADER: &str = "dataset,label,psnr,ssim,n";
/// Label used for the over-all-labels aggregate row in eval CSVs.
pub const EVAL_AGGREGATE_LABEL: &str = "all";

/// A checkpointed model ready to run inference.
pub struct RestorePipeline {
    pub cfg: RunConfig,
    pub ps: ParamStore,
    pub model: RestorationModel,
}

/// Loads a checkpoint into a fresh model.
///
/// `use_ema` selects the averaged evaluation weights instead of the raw
/// training parameters. `sample_steps` overrides the configured sampler
/// step count. An archive whose config does not describe the stored
/// parameter set is rejected.
pub fn load_pipeline(
    checkpoint: &Path,
    use_ema: bool,
    sample_steps: Option<usize>,
) -> Result<RestorePipeline> {
    let device = Device::Cpu;
    let ckpt = load_checkpoint(checkpoint, &device)?;
    let cfg = ckpt.parsed_config()?;
    cfg.validate()?;
    let mut ps = ParamStore::new(cfg.seed, DType::F32, device);
    let mut model = RestorationModel::new(&mut ps, &cfg)?;
    ps.load_tensors(if use_ema { &ckpt.ema } else { &ckpt.params })?;
    if let Some(steps) = sample_steps {
        model.set_sample_steps(steps)?;
    }
    Ok(RestorePipeline { cfg, ps, model })
}

/// Where an image's depth features come from.
pub enum DepthInput<'a> {
    /// The built-in deterministic projection of the image itself.
    Stub,
    /// A precomputed feature file.
    File(&'a Path),
}

/// One restored image with its intermediate products.
pub struct RestoredImage {
    pub restored: ImageBuf,
    /// Signed residual estimate at the input size, before clamping.
    pub residual: ImageBuf,
    /// Pool rows chosen on the sampler's final step.
    pub final_selections: Vec<usize>,
}

/// Runs the full reverse process on one degraded image.
///
/// Inputs of any size are handled by reflect-padding the bottom/right edges
/// up to the denoiser's downsampling factor and cropping the result back,
/// so the output always matches the input size. The sampler starts from
/// noise derived only from the run seed, making restoration a deterministic
/// function of (checkpoint, image, depth source).
pub fn restore_image(
    pipe: &RestorePipeline,
    y: &ImageBuf,
    depth: DepthInput,
) -> Result<RestoredImage> {
    let (h, w) = (y.h, y.w);
    let down = pipe.model.denoiser.down_factor();
    let pad_b = (down - h % down) % down;
    let pad_r = (down - w % down) % down;
    let padded = y.pad_reflect(pad_b, pad_r)?;

    let depth_map: DepthFeatureMap = match depth {
        DepthInput::Stub => pipe.model.depth_stub.encode(&padded)?,
        DepthInput::File(path) => {
            load_precomputed_depth_features(path, pipe.cfg.denoiser.dim)?
        }
    };
    let p_gd = pipe.model.constrained_prompts(&[depth_map])?;

    let y_t = batch_tensor(&[&padded], pipe.ps.dtype(), pipe.ps.device())?;
    let mut rng = derive_rng(pipe.cfg.seed, &[stream::SAMPLER_INIT, 0]);
    let init = randn_tensor(&mut rng, y_t.dims(), pipe.ps.dtype(), pipe.ps.device())?;
    let out = pipe.model.sample_restoration(&y_t, &p_gd, &init)?;

    let restored_t = (&out.residual + &y_t)?.clamp(0.0, 1.0)?;
    let restored = ImageBuf::from_tensor(&restored_t.squeeze(0)?.detach())?.crop(h, w);
    let residual = ImageBuf::from_tensor(&out.residual.squeeze(0)?.detach())?.crop(h, w);
    let final_selections = out
        .step_selections
        .last()
        .ok_or_else(|| Error::shape("sampler produced no steps"))?[0]
        .clone();
    Ok(RestoredImage { restored, residual, final_selections })
}

/// Per-pixel magnitude of a signed residual, peak-normalized to [0, 1].
/// An all-zero residual maps to an all-black image.
pub fn residual_heatmap(residual: &ImageBuf) -> ImageBuf {
    let mut heat = ImageBuf::new(residual.h, residual.w);
    let mut peak = 0.0f32;
    for y in 0..residual.h {
        for x in 0..residual.w {
            let m = (0..3).map(|c| residual.get(y, x, c).abs()).sum::<f32>() / 3.0;
            heat.set(y, x, 0, m);
            peak = peak.max(m);
        }
    }
    if peak > 0.0 {
        for y in 0..heat.h {
            for x in 0..heat.w {
                let v = heat.get(y, x, 0) / peak;
                for c in 0..3 {
                    heat.set(y, x, c, v);
                }
            }
        }
    }
    heat
}

/// How [`run_restore`] resolves inputs and writes outputs.
pub struct RestoreOptions {
    pub use_ema: bool,
    pub sample_steps: Option<usize>,
    pub depth_source: DepthSource,
    /// Also write `<stem>_residual.png` heat maps.
    pub heatmap: bool,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        Self {
            use_ema: false,
            sample_steps: None,
            depth_source: DepthSource::Stub,
            heatmap: false,
        }
    }
}

/// Files written for one restored input.
#[derive(Debug)]
pub struct RestoredOutput {
    pub restored: PathBuf,
    pub heatmap: Option<PathBuf>,
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Image(format!("no usable file stem in {}", path.display())))
}

/// Restores every input image and writes `<stem>_restored.png` (16-bit)
/// under `out_dir`. With a file depth source, each input `foo.png` reads
/// its features from a sibling `foo.t3df`.
pub fn run_restore(
    checkpoint: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
    opts: &RestoreOptions,
) -> Result<Vec<RestoredOutput>> {
    if inputs.is_empty() {
        return Err(Error::Image("no input images given".into()));
    }
    let pipe = load_pipeline(checkpoint, opts.use_ema, opts.sample_steps)?;
    std::fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let y = ImageBuf::load_png(input)?;
        let depth_path = input.with_extension("t3df");
        let depth = match opts.depth_source {
            DepthSource::Stub => DepthInput::Stub,
            DepthSource::PrecomputedFile => DepthInput::File(&depth_path),
        };
        let result = restore_image(&pipe, &y, depth)?;
        let stem = stem_of(input)?;
        let restored_path = out_dir.join(format!("{stem}_restored.png"));
        result.restored.save_png16(&restored_path)?;
        let heatmap = if opts.heatmap {
            let p = out_dir.join(format!("{stem}_residual.png"));
            residual_heatmap(&result.residual).save_png16(&p)?;
            Some(p)
        } else {
            None
        };
        outputs.push(RestoredOutput { restored: restored_path, heatmap });
    }
    Ok(outputs)
}

/// One eval CSV row: metrics over a label group (or the aggregate).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub n: usize,
}

/// Restores every entry with `restore` and reports PSNR/SSIM per weather
/// label plus an aggregate row over all entries, in label order with the
/// aggregate last.
pub fn eval_rows<F>(
    entries: &[DatasetEntry],
    dataset_name: &str,
    mut restore: F,
) -> Result<Vec<EvalRow>>
where
    F: FnMut(&DegradedSample) -> Result<ImageBuf>,
{
    if entries.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut all_pairs = Vec::with_capacity(entries.len());
    let mut by_label: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, entry) in entries.iter().enumerate() {
        let restored = restore(&entry.sample)?;
        all_pairs.push((restored, entry.sample.x.clone()));
        by_label.entry(entry.sample.label).or_default().push(i);
    }
    let mut rows = Vec::new();
    for (label, idxs) in &by_label {
        let pairs: Vec<_> = idxs.iter().map(|&i| all_pairs[i].clone()).collect();
        let report = evaluate_pairs(&pairs)?;
        rows.push(EvalRow {
            dataset: dataset_name.to_string(),
            label: label.as_str().to_string(),
            psnr: report.psnr_db,
            ssim: report.ssim,
            n: report.n_images,
        });
    }
    let report = evaluate_pairs(&all_pairs)?;
    rows.push(EvalRow {
        dataset: dataset_name.to_string(),
        label: EVAL_AGGREGATE_LABEL.to_string(),
        psnr: report.psnr_db,
        ssim: report.ssim,
        n: report.n_images,
    });
    Ok(rows)
}

/// Writes eval rows as CSV with the standard header.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.dataset, r.label, r.psnr, r.ssim, r.n));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn dataset_name_of(dir: &Path) -> String {
    dir.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

/// Evaluates a checkpoint on an exported dataset directory using the EMA
/// weights, writing the CSV to `out_csv` and returning the rows.
pub fn run_eval(checkpoint: &Path, dataset_dir: &Path, out_csv: &Path) -> Result<Vec<EvalRow>> {
    let pipe = load_pipeline(checkpoint, true, None)?;
    let entries = load_dataset(dataset_dir)?;
    let rows = eval_rows(&entries, &dataset_name_of(dataset_dir), |s| {
        Ok(restore_image(&pipe, &s.y, DepthInput::Stub)?.restored)
    })?;
    write_eval_csv(out_csv, &rows)?;
    Ok(rows)
}

/// Restores every dataset entry and tallies which pool rows the sampler's
/// final step selected, grouped by the entry's weather label. Writes the
/// counts CSV to `out_csv` and, when given, a bar-chart PNG to `out_png`.
pub fn run_pool_stats(
    checkpoint: &Path,
    dataset_dir: &Path,
    out_csv: &Path,
    out_png: Option<&Path>,
) -> Result<SelectionRecord> {
    let pipe = load_pipeline(checkpoint, true, None)?;
    let entries = load_dataset(dataset_dir)?;
    if entries.is_empty() {
        return Err(Error::Dataset("nothing to analyze".into()));
    }
    let mut record = SelectionRecord::new(pipe.model.pool.size());
    for entry in &entries {
        let result = restore_image(&pipe, &entry.sample.y, DepthInput::Stub)?;
        record.record_selection(entry.sample.label, &result.final_selections)?;
    }
    std::fs::write(out_csv, record.to_csv())?;
    if let Some(png) = out_png {
        crate::plot::save_selection_histogram(png, &record)?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::export_dataset;
    use crate::metrics::PSNR_CAP_DB;
    use crate::testutil::tiny_config;
    use crate::train::train;
    use crate::weather_synth::{make_sample, WeatherLabel};

    /// One cheap final checkpoint shared by the pipeline tests.
    fn quick_checkpoint(dir: &Path) -> PathBuf {
        let mut cfg = tiny_config();
        cfg.out_dir = dir.to_string_lossy().into_owned();
        cfg.train.iterations = 0;
        train(&cfg, None).unwrap().final_checkpoint
    }

    #[test]
    fn restore_keeps_size_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = quick_checkpoint(dir.path());
        let pipe = load_pipeline(&ckpt, false, None).unwrap();

        // 15x13 forces padding for the down factor of 2.
        let mut y = ImageBuf::filled(15, 13, 0.5);
        y.set(3, 4, 0, 0.9);
        let a = restore_image(&pipe, &y, DepthInput::Stub).unwrap();
        assert_eq!((a.restored.h, a.restored.w), (15, 13));
        assert_eq!((a.residual.h, a.residual.w), (15, 13));
        assert_eq!(a.final_selections.len(), pipe.model.top_k());
        assert!(a.restored.data.iter().all(|v| (0.0..=1.0).contains(v)));

        let b = restore_image(&pipe, &y, DepthInput::Stub).unwrap();
        assert_eq!(a.restored.data, b.restored.data, "same input must restore identically");
        assert_eq!(a.final_selections, b.final_selections);
    }

    #[test]
    fn restore_matches_the_manual_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = quick_checkpoint(dir.path());
        let pipe = load_pipeline(&ckpt, false, None).unwrap();

        let cfg = tiny_config();
        let y = make_sample(&cfg.synth, 3, 0).unwrap().y; // 16x16: no padding
        let got = restore_image(&pipe, &y, DepthInput::Stub).unwrap();

        let depth = pipe.model.depth_stub.encode(&y).unwrap();
        let p_gd = pipe.model.constrained_prompts(&[depth]).unwrap();
        let y_t = batch_tensor(&[&y], pipe.ps.dtype(), pipe.ps.device()).unwrap();
        let mut rng = derive_rng(pipe.cfg.seed, &[stream::SAMPLER_INIT, 0]);
        let init = randn_tensor(&mut rng, y_t.dims(), pipe.ps.dtype(), pipe.ps.device()).unwrap();
        let out = pipe.model.sample_restoration(&y_t, &p_gd, &init).unwrap();
        let expect = (&out.residual + &y_t)
            .unwrap()
            .clamp(0.0, 1.0)
            .unwrap()
            .squeeze(0)
            .unwrap();
        assert_eq!(
            got.restored.data,
            ImageBuf::from_tensor(&expect).unwrap().data,
            "wrapper must equal the hand-built pipeline"
        );
    }

    #[test]
    fn ema_and_raw_weights_differ_after_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().to_string_lossy().into_owned();
        cfg.train.iterations = 3;
        cfg.train.checkpoint_every = 1000;
        cfg.losses.lambda_psnr = 0.0;
        cfg.losses.lambda_cp_sample = 0.0;
        // A fast-moving EMA still lags freshly-updated weights.
        cfg.optim.ema_decay = 0.5;
        let ckpt = train(&cfg, None).unwrap().final_checkpoint;
        let raw = load_pipeline(&ckpt, false, None).unwrap();
        let ema = load_pipeline(&ckpt, true, None).unwrap();
        let name = "denoiser.in_conv.weight";
        let a = raw.ps.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = ema.ps.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(a, b, "EMA selection must load different weights");
    }

    #[test]
    fn sample_step_override_is_applied_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = quick_checkpoint(dir.path());
        let pipe = load_pipeline(&ckpt, false, Some(3)).unwrap();
        assert_eq!(pipe.model.sample_steps(), 3);
        assert!(load_pipeline(&ckpt, false, Some(0)).is_err());
        assert!(load_pipeline(&ckpt, false, Some(10_000)).is_err());
    }

    #[test]
    fn config_echo_mismatching_the_weights_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt_path = quick_checkpoint(dir.path());
        let ckpt = load_checkpoint(&ckpt_path, &Device::Cpu).unwrap();

        // Re-save the same tensors under a config describing a wider pool.
        let mut lying_cfg = tiny_config();
        lying_cfg.pool.size += 2;
        let mut ps = ParamStore::new(7, DType::F32, Device::Cpu);
        let _model = RestorationModel::new(&mut ps, &tiny_config()).unwrap();
        ps.load_tensors(&ckpt.params).unwrap();
        let mut adam = crate::nn::optim::Adam::new(0.9, 0.995, 1e-8);
        let mut ema = crate::nn::optim::Ema::new(&ps, 0.9).unwrap();
        ckpt.restore(&ps, &mut adam, &mut ema).unwrap();
        let lying = dir.path().join("lying.ckpt");
        crate::checkpoint::save_checkpoint(&lying, &ps, &adam, &ema, &lying_cfg, 0).unwrap();
        assert!(load_pipeline(&lying, false, None).is_err());
    }

    #[test]
    fn heatmap_normalizes_and_handles_zero_residual() {
        let mut r = ImageBuf::new(4, 4);
        r.set(2, 1, 0, -0.5);
        r.set(2, 1, 1, 0.5);
        r.set(2, 1, 2, 0.5);
        r.set(0, 0, 0, 0.15);
        let h = residual_heatmap(&r);
        assert_eq!(h.get(2, 1, 0), 1.0, "peak pixel maps to 1");
        assert!(h.get(0, 0, 0) > 0.0 && h.get(0, 0, 0) < 1.0);
        assert_eq!(h.get(3, 3, 0), 0.0);

        let z = residual_heatmap(&ImageBuf::new(3, 3));
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_rows_group_by_label_with_identity_restore_hitting_the_cap() {
        // Hand-built identical pairs under two labels. 16x16 keeps the
        // structural-similarity window (11x11) applicable.
        let mk = |label, v: f32, idx| {
            let x = ImageBuf::filled(16, 16, v);
            let y = x.clone();
            DatasetEntry {
                sample: DegradedSample::assemble(x, y, label, "t".into(), vec![1u8; 256]),
                index: idx,
                seed: 0,
            }
        };
        let entries = vec![
            mk(WeatherLabel::Rain, 0.3, 0),
            mk(WeatherLabel::Rain, 0.4, 1),
            mk(WeatherLabel::Haze, 0.5, 2),
            mk(WeatherLabel::Haze, 0.6, 3),
        ];
        let rows = eval_rows(&entries, "toy", |s| Ok(s.y.clone())).unwrap();
        assert_eq!(rows.len(), 3, "two label rows plus the aggregate");
        assert!(rows.iter().take(2).all(|r| r.n == 2));
        let agg = rows.last().unwrap();
        assert_eq!(agg.label, EVAL_AGGREGATE_LABEL);
        assert_eq!(agg.n, 4);
        for r in &rows {
            assert_eq!(r.psnr, PSNR_CAP_DB, "identity restore on identical pairs");
            assert!((r.ssim - 1.0).abs() < 1e-9);
            assert_eq!(r.dataset, "toy");
        }
    }

    #[test]
    fn eval_csv_has_header_and_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            EvalRow { dataset: "d".into(), label: "rain".into(), psnr: 30.25, ssim: 0.9, n: 2 },
            EvalRow { dataset: "d".into(), label: "all".into(), psnr: 31.5, ssim: 0.92, n: 2 },
        ];
        let path = dir.path().join("eval.csv");
        write_eval_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EVAL_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "d,rain,30.25,0.9,2");
    }

    #[test]
    fn full_eval_and_pool_stats_run_on_an_exported_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = quick_checkpoint(&dir.path().join("run"));

        let cfg = tiny_config();
        let samples: Vec<_> = (0..3).map(|i| make_sample(&cfg.synth, 14, i).unwrap()).collect();
        let labels: Vec<WeatherLabel> = samples.iter().map(|s| s.label).collect();
        let data_dir = dir.path().join("data");
        export_dataset(&data_dir, &samples, 14).unwrap();

        let csv = dir.path().join("eval.csv");
        let rows = run_eval(&ckpt, &data_dir, &csv).unwrap();
        let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
        assert_eq!(rows.len(), distinct.len() + 1);
        assert_eq!(rows.last().unwrap().n, 3);
        assert!(csv.exists());

        let pool_csv = dir.path().join("pool.csv");
        let pool_png = dir.path().join("pool.png");
        let record = run_pool_stats(&ckpt, &data_dir, &pool_csv, Some(&pool_png)).unwrap();
        let total: u64 = record
            .labels()
            .iter()
            .map(|&l| record.total_queries(l))
            .sum();
        assert_eq!(total, 3, "one recorded selection per dataset entry");
        let text = std::fs::read_to_string(&pool_csv).unwrap();
        assert!(text.starts_with("label,pool_index,count"));
        assert!(pool_png.exists());
        let decoded = image::open(&pool_png).unwrap();
        assert!(decoded.width() > 0 && decoded.height() > 0);
    }
}
