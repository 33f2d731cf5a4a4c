//! Sequential vs rayon execution of the batch-level work: one training
//! epoch, validation, and the raw per-image forward map.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use homey_core::data::{generate_synthetic, Dataset, SynthConfig};
use homey_core::detector::{Model, ModelConfig};
use homey_core::exec::{self, Parallelism};
use homey_core::fusion::FusionParams;
use homey_core::losses::LossConfig;
use homey_core::metrics::EvalConfig;
use homey_core::trainer::{evaluate, TrainConfig, Trainer};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn fixture() -> (Dataset, ModelConfig) {
    let ds = generate_synthetic(
        &SynthConfig {
            image_size: 48,
            classes: 4,
            seed: 9,
            ..SynthConfig::default()
        },
        16,
    )
    .expect("synthetic data");
    let cfg = ModelConfig {
        input_size: 48,
        channels: vec![8, 16],
        num_classes: 4,
        fusion: FusionParams {
            d_k: 8,
            channels: 16,
            ..FusionParams::default()
        },
        ..ModelConfig::default()
    };
    (ds, cfg)
}

fn bench_epoch(c: &mut Criterion) {
    let (ds, cfg) = fixture();
    let model = Model::<f32>::init(&cfg).unwrap();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, par) in MODES {
        let trainer = Trainer {
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..TrainConfig::default()
            },
            losses: LossConfig::default(),
            eval: EvalConfig::default(),
            parallelism: par,
            out_dir: None,
            stop_after: None,
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.fit(model.clone(), &ds, None).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (ds, cfg) = fixture();
    let model = Model::<f32>::init(&cfg).unwrap();
    let eval = EvalConfig::default();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &ds, &eval, par).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_map(c: &mut Criterion) {
    let (ds, cfg) = fixture();
    let model = Model::<f32>::init(&cfg).unwrap();
    let images: Vec<_> = ds.samples.iter().map(|s| s.image.to_tensor::<f32>()).collect();
    let mut group = c.benchmark_group("forward_map");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::map(par, &images, |img| model.predict(img).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_epoch, bench_evaluate, bench_forward_map);
criterion_main!(benches);
