use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slomo_core::gradsuite::{run_suite, SuiteConfig};
use slomo_core::par::Exec;
use slomo_core::runner::{run_seeds, RunConfig};
use slomo_core::streams::TaskConfig;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gradient_suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradient_suite");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        let cfg = SuiteConfig { seeds: 8, exec, ..SuiteConfig::default() };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| b.iter(|| run_suite(cfg).unwrap()));
    }
    g.finish();
}

fn independent_seeds(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.task = TaskConfig { n_train: 1500, ..cfg.task };
    cfg.source_training.epochs = 8;
    cfg.source_training.required_accuracy = 0.8;
    let seeds: Vec<u64> = (0..4).collect();
    let mut g = c.benchmark_group("independent_seeds");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| b.iter(|| run_seeds(&cfg, &seeds, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, gradient_suite, independent_seeds);
criterion_main!(benches);
