use candle_core::{DType, Device};
use criterion::{criterion_group, criterion_main, Criterion};
use t3diff_bench::bench_config;
use t3diff_core::model::RestorationModel;
use t3diff_core::nn::params::ParamStore;
use t3diff_core::rng::{derive_rng, randn_tensor};
use t3diff_core::schedule::{build_linear_schedule, make_timestep_plan};
use t3diff_core::weather_synth::make_sample;
use rand::Rng;

fn bench_schedule(c: &mut Criterion) {
    c.bench_function("schedule/build_linear_1000", |b| {
        b.iter(|| build_linear_schedule(1000, 1e-4, 0.02).unwrap())
    });
    c.bench_function("schedule/timestep_plan_1000_to_2", |b| {
        b.iter(|| make_timestep_plan(1000, 2).unwrap())
    });
}

fn bench_selection(c: &mut Criterion) {
    let cfg = bench_config();
    let mut ps = ParamStore::new(cfg.seed, DType::F32, Device::Cpu);
    let model = RestorationModel::new(&mut ps, &cfg).unwrap();
    let mut rng = derive_rng(cfg.seed, &[101]);
    let query: Vec<f32> = (0..cfg.denoiser.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("pool/select_topk_20_of_5", |b| {
        b.iter(|| model.pool.select_topk(&query, cfg.pool.top_k).unwrap())
    });
}

fn bench_denoiser(c: &mut Criterion) {
    let cfg = bench_config();
    let mut ps = ParamStore::new(cfg.seed, DType::F32, Device::Cpu);
    let model = RestorationModel::new(&mut ps, &cfg).unwrap();
    let sample = make_sample(&cfg.synth, cfg.seed, 0).unwrap();
    let (_, y, _) = model.batch_tensors(&ps, &[sample.clone()]).unwrap();
    let depths = model.depth_maps(&[&sample.y]).unwrap();
    let p_gd = model.constrained_prompts(&depths).unwrap();
    let mut rng = derive_rng(cfg.seed, &[102]);
    let noise = randn_tensor(&mut rng, y.dims(), DType::F32, &Device::Cpu).unwrap();

    c.bench_function("denoiser/predict_32x32", |b| {
        b.iter(|| model.predict(&noise, &y, &[250], &p_gd).unwrap())
    });
    c.bench_function("sampler/restore_2_steps_32x32", |b| {
        b.iter(|| model.sample_restoration(&y, &p_gd, &noise).unwrap())
    });
}

fn bench_synth(c: &mut Criterion) {
    let cfg = bench_config();
    let mut index = 0u64;
    c.bench_function("synth/make_sample_32x32", |b| {
        b.iter(|| {
            index += 1;
            make_sample(&cfg.synth, cfg.seed, index).unwrap()
        })
    });
}

criterion_group!(benches, bench_schedule, bench_selection, bench_denoiser, bench_synth);
criterion_main!(benches);
