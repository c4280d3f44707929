use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use crossdenoise_bench::{loss_records, losses, synthetic_split};
use crossdenoise_core::backbones::ModelKind;
use crossdenoise_core::trainer::{evaluate_test, TrainConfig, Trainer};
use crossdenoise_core::weighting::{ecdf_base_weights, epoch_end_update, Components, UpdateConfig, WeightStrategyConfig};

fn ecdf(c: &mut Criterion) {
    let mut group = c.benchmark_group("ecdf");
    for size in [10_000usize, 100_000, 1_000_000] {
        let data = losses(size, 1);
        group.throughput(Throughput::Elements(size as u64));
        group.bench_with_input(BenchmarkId::from_parameter(size), &data, |b, data| {
            b.iter(|| ecdf_base_weights(data))
        });
    }
    group.finish();
}

fn update(c: &mut Criterion) {
    let cfg = UpdateConfig {
        alpha: 1.0,
        beta: 2.0,
        strategy: WeightStrategyConfig::default(),
        components: Components::ALL,
    };
    let mut group = c.benchmark_group("epoch_end_update");
    group.sample_size(10);
    for size in [10_000usize, 100_000, 1_000_000] {
        let (records, stats) = loss_records(size, 2);
        group.throughput(Throughput::Elements(size as u64));
        group.bench_function(BenchmarkId::from_parameter(size), |b| {
            b.iter(|| epoch_end_update(&records, &stats, &cfg).expect("valid update"))
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let split = synthetic_split(500, 300, 3);
    let cfg = TrainConfig {
        model: ModelKind::Gmf,
        batch_size: 256,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("gmf_epoch_500x300", |b| {
        b.iter_batched(
            || Trainer::new(&split, &cfg).expect("valid config"),
            |mut trainer| trainer.run_epoch().expect("epoch runs"),
            BatchSize::LargeInput,
        )
    });
    let mut trainer = Trainer::new(&split, &cfg).expect("valid config");
    trainer.run_epoch().expect("epoch runs");
    let model = trainer.into_model();
    group.bench_function("evaluate_500x300", |b| {
        b.iter(|| evaluate_test(&model, &split, &[20, 50]).expect("evaluates"))
    });
    group.finish();
}

criterion_group!(benches, ecdf, update, training);
criterion_main!(benches);
