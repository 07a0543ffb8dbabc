use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use deregime_bench::{repr_batch, student_t_state, windows};
use deregime_core::data::Sample;
use deregime_core::kernels::{BaseKernel, KernelView, MixGram};
use deregime_core::likelihood::{predictive_logdensity, QuadratureRule};
use deregime_core::training::{init_state, TrainConfig};

fn gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("mix_gram");
    let (log_amp, log_len) = (vec![0.0; 8], vec![0.3; 8]);
    let view = KernelView {
        kind: BaseKernel::Rbf,
        log_amp: &log_amp,
        log_len: &log_len,
        log_alpha: &[],
    };
    for n in [64, 256, 1024] {
        let x = repr_batch(n, 8, 4, 1);
        let z = repr_batch(64, 8, 4, 2);
        group.bench_with_input(BenchmarkId::new("n_by_64", n), &n, |b, _| {
            b.iter(|| MixGram::new(black_box(&x), black_box(&z), view))
        });
    }
    group.finish();
}

fn density(c: &mut Criterion) {
    let mut group = c.benchmark_group("predictive_logdensity");
    for q in [10, 20, 40] {
        let rule = QuadratureRule::gauss_hermite(q).unwrap();
        let state = student_t_state(8, 3);
        group.bench_with_input(BenchmarkId::new("r8_q", q), &q, |b, _| {
            b.iter(|| predictive_logdensity(black_box(0.7), &state, &rule).unwrap())
        });
    }
    group.finish();
}

fn objective(c: &mut Criterion) {
    let config: TrainConfig = serde_json::from_value(serde_json::json!({
        "r_max": 8, "inducing": 64, "width": 32, "batch_size": 32
    }))
    .unwrap();
    let samples = windows(32, 96, 24, 1, 4);
    let state = init_state(&config, &samples).unwrap();
    let rule = QuadratureRule::gauss_hermite(config.quadrature_nodes).unwrap();
    let settings = config.settings_at(0, &rule);
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut grad = vec![0.0; state.model.params.len()];
    c.bench_function("objective_with_gradient_b32_h24_m64", |b| {
        b.iter(|| {
            grad.fill(0.0);
            state.model.objective(black_box(&batch), &settings, Some(&mut grad)).unwrap()
        })
    });
    c.bench_function("objective_value_b32_h24_m64", |b| {
        b.iter(|| state.model.objective(black_box(&batch), &settings, None).unwrap())
    });
}

criterion_group!(benches, gram, density, objective);
criterion_main!(benches);
