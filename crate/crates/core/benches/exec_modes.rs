//! Sequential vs. rayon execution of the per-sample hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eedn_core::backbone::{synth_generate, DatasetSplit, LayeredSample, SynthConfig};
use eedn_core::cost::CostTable;
use eedn_core::evaluation::gate_usage_report;
use eedn_core::trainer::{init_model, objective, Bilevel, TrainConfig};
use eedn_core::{ExecMode, ExitModel};

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn fixture() -> (DatasetSplit, CostTable, ExitModel) {
    let data = synth_generate(&SynthConfig::desk_default(0)).expect("synthetic data");
    let costs = CostTable::for_branches(&[1000; 6], &data.meta.dims, data.meta.classes, 92)
        .expect("cost table");
    let model = init_model(&data, &TrainConfig::default());
    (data, costs, model)
}

fn gradients(c: &mut Criterion) {
    let (data, costs, model) = fixture();
    let batch: Vec<&LayeredSample> = data.train.iter().take(1024).collect();
    let mut group = c.benchmark_group("gradients");
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            exec,
            ..TrainConfig::default()
        };
        let trainer = Bilevel::new(model.clone(), &cfg, &costs);
        group.bench_with_input(BenchmarkId::new("gate", name), &batch, |b, batch| {
            b.iter(|| trainer.gate_gradients(batch))
        });
        group.bench_with_input(BenchmarkId::new("im", name), &batch, |b, batch| {
            b.iter(|| trainer.im_gradients(batch))
        });
    }
    group.finish();
}

fn full_set(c: &mut Criterion) {
    let (data, costs, model) = fixture();
    let mut group = c.benchmark_group("full_set");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("objective", name), |b| {
            b.iter(|| objective(&model, &data.train, &costs, 1.0, exec))
        });
        group.bench_function(BenchmarkId::new("gate_usage", name), |b| {
            b.iter(|| gate_usage_report(&model, &data.test, exec).expect("report"))
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, full_set);
criterion_main!(benches);
