//! Throughput of the data-parallel paths on a one-thread pool versus the
//! default pool. Build with `--no-default-features` to measure the
//! sequential fallback itself.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stereoseg::data::StereoSample;
use stereoseg::losses::{depth_loss, DepthLossWeights, DisparityPyramid};
use stereoseg::model::{Model, ModelConfig};
use stereoseg::par;
use stereoseg::pipeline::{LrSchedule, RunConfig, Stage, Trainer};
use stereoseg::synthgen::{knee_scene, render, SceneSpec};

const SIZE: usize = 32;

/// `(label, threads)`; 0 keeps the default pool.
fn pools() -> [(&'static str, usize); 2] {
    [("1-thread", 1), ("default", 0)]
}

fn specs(n: u32) -> Vec<SceneSpec> {
    (0..n).map(|i| knee_scene(SIZE, 7, i % 2, i / 2)).collect()
}

fn stereo(n: u32) -> Vec<StereoSample> {
    specs(n).iter().map(|s| render(s, 7).unwrap().stereo).collect()
}

fn bench_render(c: &mut Criterion) {
    let specs = specs(8);
    let mut g = c.benchmark_group("render_8_scenes");
    for (label, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| par::with_threads(threads, || par::map_slice(&specs, |s| render(s, 7).unwrap())))
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let model = Model::build(&ModelConfig::tiny(SIZE, 8), 1).unwrap();
    let pairs = stereo(8);
    let images: Vec<_> = pairs.iter().map(|p| &p.left).collect();
    let mut g = c.benchmark_group("forward_batch_8");
    for (label, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| par::with_threads(threads, || black_box(model.forward_batch(&images).unwrap())))
        });
    }
    g.finish();
}

fn bench_depth_loss(c: &mut Criterion) {
    let model = Model::build(&ModelConfig::tiny(SIZE, 8), 1).unwrap();
    let pairs = stereo(8);
    let pyramids: Vec<DisparityPyramid> = pairs
        .iter()
        .map(|p| {
            let out = model.forward(&p.left).unwrap();
            out.pyramid
        })
        .collect();
    let weights = DepthLossWeights::default();
    let mut g = c.benchmark_group("depth_loss_8_pairs");
    for (label, threads) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    par::map_range(pairs.len(), |i| depth_loss(&pairs[i], &pyramids[i], &weights).unwrap())
                })
            })
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let pairs = stereo(8);
    let mut g = c.benchmark_group("pretrain_step_batch_8");
    g.sample_size(10);
    for (label, threads) in pools() {
        let mut cfg = RunConfig::for_stage(Stage::Pretrain);
        cfg.model = ModelConfig::tiny(SIZE, 8);
        cfg.threads = threads;
        cfg.train.batch_size = 8;
        cfg.train.epochs = 1_000_000;
        cfg.train.lr_schedule = LrSchedule::Constant;
        let mut trainer = Trainer::pretrain(cfg, pairs.clone()).unwrap();
        g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(|| trainer.run_steps(1).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_render, bench_forward, bench_depth_loss, bench_train_step);
criterion_main!(benches);
