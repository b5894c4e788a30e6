use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use turbfield::flowfield::{CharacteristicNumbers, ConstantFlow, UniformShear, Vec3};
use turbfield::par::Execution;
use turbfield::sampler::{Model, RealizationFactory, SamplerConfig, Variant};
use turbfield::spectrum::{derived_constants, SpectrumFactory};
use turbfield::stats::{gradient_stats, one_point_stats, Ensemble};
use turbfield::temporal::TemporalKernel;

fn model() -> Arc<Model> {
    Arc::new(Model {
        spectra: SpectrumFactory::new(derived_constants()).unwrap(),
        kernel: TemporalKernel::default(),
        numbers: CharacteristicNumbers::new(1e-3, 0.1).unwrap(),
    })
}

fn ensembles(c: &mut Criterion) {
    let hom = RealizationFactory::new(
        model(),
        Arc::new(ConstantFlow::new(Vec3::new(1.0, 0.0, 0.0), 1.0, 1.0, 1.0).unwrap()),
        SamplerConfig::default(),
    )
    .unwrap();
    let inh = RealizationFactory::new(
        model(),
        Arc::new(UniformShear::new(1.0).with_slopes(0.5, 0.3, 0.0)),
        SamplerConfig { variant: Variant::Inhomogeneous, ..Default::default() },
    )
    .unwrap();
    let x = Vec3::zeros();
    let mut g = c.benchmark_group("ensemble");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let name = format!("{exec:?}");
        g.bench_with_input(BenchmarkId::new("homogeneous-one-point-256", &name), &exec, |b, &e| {
            b.iter(|| one_point_stats(&hom, &x, 0.0, &Ensemble::new(1, 256).with_execution(e)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("inhomogeneous-gradient-64", &name), &exec, |b, &e| {
            b.iter(|| gradient_stats(&inh, &x, 0.0, &Ensemble::new(1, 64).with_execution(e)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, ensembles);
criterion_main!(benches);
