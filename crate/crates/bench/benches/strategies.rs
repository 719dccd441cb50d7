use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pegrad_core::dpsgd::{dpsgd_step, DpConfig};
use pegrad_core::strategies::{Mode, Runner};
use pegrad_core::{Model, ModelKind, RngState, Strategy};

const B: usize = 64;

/// Per-example gradients for every supported strategy, compiled graphs.
fn per_example(c: &mut Criterion) {
    for kind in [ModelKind::Fcnn, ModelKind::MnistCnn, ModelKind::Embed] {
        let model = Model::build(kind);
        let mut rng = RngState::new(0, 0);
        let params = model.init::<f32>(&mut rng);
        let (x, y) = model.random_batch::<f32>(B, &mut rng);
        let mut group = c.benchmark_group(format!("per_example/{kind}"));
        group.sample_size(10).measurement_time(Duration::from_secs(3));
        for s in Strategy::ALL.into_iter().filter(|s| s.check_support(kind).is_ok()) {
            let mut runner = Runner::new(model.clone(), s, Mode::Graph).unwrap();
            runner.prepare(B).unwrap();
            group.bench_function(BenchmarkId::from_parameter(s), |b| b.iter(|| black_box(runner.per_example(&params, &x, &y).unwrap())));
        }
        group.finish();
    }
}

/// One DPSGD step on FCNN across the eager/graph and loop/vectorized axes.
fn ablation(c: &mut Criterion) {
    let model = Model::build(ModelKind::Fcnn);
    let mut rng = RngState::new(1, 0);
    let init = model.init::<f32>(&mut rng);
    let (x, y) = model.random_batch::<f32>(128, &mut rng);
    let cfg = DpConfig::default();
    let mut group = c.benchmark_group("dpsgd_step/fcnn/128");
    group.sample_size(10).measurement_time(Duration::from_secs(3));
    for (s, mode) in [(Strategy::Naive, Mode::Eager), (Strategy::Vmap, Mode::Eager), (Strategy::Naive, Mode::Graph), (Strategy::Vmap, Mode::Graph)] {
        let mut runner = Runner::new(model.clone(), s, mode).unwrap();
        runner.prepare(128).unwrap();
        let mut params = init.clone();
        let mut step = 0;
        group.bench_function(format!("{mode:?}/{s}").to_lowercase(), |b| {
            b.iter(|| {
                step += 1;
                black_box(dpsgd_step(&mut runner, &mut params, &x, &y, &cfg, step).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, per_example, ablation);
criterion_main!(benches);
