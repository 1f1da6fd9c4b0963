use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zimix::em::{e_step, fit};
use zimix::likelihood::observed_loglik;
use zimix::simulate::{builtin_design, generate_dataset, replicate_study};
use zimix::{Dataset, Execution, FamilyChoice, KRange, MediatorFamily, ModelConfig, ParameterSet};

fn modes() -> Vec<Execution> {
    if cfg!(feature = "parallel") {
        vec![Execution::Sequential, Execution::Parallel]
    } else {
        vec![Execution::Sequential]
    }
}

fn label(e: Execution) -> &'static str {
    match e {
        Execution::Sequential => "sequential",
        Execution::Parallel => "parallel",
    }
}

fn design_data(name: &str, n: usize) -> (Dataset, ParameterSet) {
    let mut design = builtin_design(name).unwrap();
    design.n = n;
    (generate_dataset(&design, 0).unwrap(), design.true_theta)
}

fn likelihood(c: &mut Criterion) {
    let mut group = c.benchmark_group("observed_loglik");
    for name in ["zilonm30", "zipm30", "zinbm30"] {
        let (data, theta) = design_data(name, 4000);
        for exec in modes() {
            let config = ModelConfig {
                execution: exec,
                ..ModelConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(label(exec), name), &data, |b, d| {
                b.iter(|| observed_loglik(black_box(d), &theta, &config).unwrap())
            });
        }
    }
    group.finish();

    let mut group = c.benchmark_group("e_step");
    let (data, theta) = design_data("zilonm50", 4000);
    for exec in modes() {
        let config = ModelConfig {
            execution: exec,
            ..ModelConfig::default()
        };
        group.bench_function(label(exec), |b| b.iter(|| e_step(black_box(&data), &theta, &config).unwrap()));
    }
    group.finish();
}

fn estimation(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_zilonm_k2");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    let (data, _) = design_data("zilonm30", 1000);
    for exec in modes() {
        let config = ModelConfig {
            n_starts: 2,
            execution: exec,
            ..ModelConfig::default()
        };
        group.bench_function(label(exec), |b| {
            b.iter(|| fit(black_box(&data), MediatorFamily::Zilonm, 2, &config).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("replicate_study");
    group.sample_size(10).measurement_time(Duration::from_secs(30));
    let mut design = builtin_design("zipm30").unwrap();
    design.n = 300;
    design.n_reps = 8;
    for exec in modes() {
        let config = ModelConfig {
            family: FamilyChoice::Fixed(MediatorFamily::Zipm),
            k_range: KRange::new(1, 2),
            n_starts: 1,
            execution: exec,
            ..ModelConfig::default()
        };
        group.bench_function(label(exec), |b| b.iter(|| replicate_study(black_box(&design), &config).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, likelihood, estimation);
criterion_main!(benches);
