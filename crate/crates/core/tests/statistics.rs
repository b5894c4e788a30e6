use std::sync::Arc;

use turbfield::flowfield::{CharacteristicNumbers, ConstantFlow, Vec3};
use turbfield::sampler::{Model, RealizationFactory, SamplerConfig, Variant};
use turbfield::spectrum::{derived_constants, SpectrumFactory};
use turbfield::stats::{
    collect_samples, ergodic_average, homogeneous_covariance, mat_row_major, two_point_covs, Ensemble,
    ErgodicAverageSpec, EstimatorReport, Quantity,
};
use turbfield::temporal::TemporalKernel;

fn factory(z: f64, delta: f64, modes: usize) -> RealizationFactory {
    let model = Arc::new(Model {
        spectra: SpectrumFactory::new(derived_constants()).unwrap(),
        kernel: TemporalKernel::default(),
        numbers: CharacteristicNumbers::new(z, delta).unwrap(),
    });
    let flow = Arc::new(ConstantFlow::new(Vec3::new(1.0, 0.0, 0.0), 1.0, 1.0, 1.0).unwrap());
    RealizationFactory::new(model, flow, SamplerConfig { modes, ..Default::default() }).unwrap()
}

#[test]
fn standard_error_halves_over_a_fourfold_ladder() {
    let f = factory(1e-3, 0.1, 64);
    let x = Vec3::zeros();
    let se = |n: usize| {
        let s = collect_samples(&f, &Ensemble::new(21, n), |r| Ok(r.velocity(&x, 0.0)?.iter().copied().collect())).unwrap();
        EstimatorReport::from_samples("u", &[3], &s).std_error
    };
    let (a, b, c) = (se(1000), se(4000), se(16000));
    for i in 0..3 {
        for r in [a[i] / b[i], b[i] / c[i]] {
            assert!((1.7..=2.3).contains(&r), "ratio {r}");
        }
    }
}

#[test]
fn ergodic_spread_shrinks_with_radius() {
    let delta = 0.1;
    let f = factory(1e-3, delta, 128);
    let var = |ratio: f64| {
        let vals: Vec<f64> = (0..20)
            .map(|seed| {
                let mut spec = ErgodicAverageSpec::new(Vec3::zeros(), 0.0, ratio * delta, 0.0);
                spec.n_time_nodes = (5.0 * ratio) as usize;
                ergodic_average(&f.realization(seed).unwrap(), &spec, Quantity::Energy, Default::default())
                    .unwrap()
                    .scalar()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / 20.0;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 19.0
    };
    let v: Vec<f64> = [10.0, 50.0, 200.0].into_iter().map(var).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
}

#[test]
fn finite_mode_covariance_is_exact_at_several_lags() {
    // second moments are exact for any mode count, so a small N must pass too
    let f = factory(1e-3, 0.1, 8);
    let x = Vec3::zeros();
    let others = [
        (Vec3::zeros(), 0.0),
        (Vec3::new(0.04, 0.0, 0.0), 0.0),
        (Vec3::new(0.0, 0.0, 0.03), 0.0),
        (Vec3::zeros(), 0.06),
        (Vec3::new(0.02, 0.02, 0.0), 0.03),
    ];
    let reps = two_point_covs(&f, (&x, 0.0), &others, &Ensemble::new(5, 6000)).unwrap();
    let state = f.flow().state_at(&x, 0.0).unwrap();
    for ((y, t), r) in others.iter().zip(reps) {
        let target = homogeneous_covariance(f.model(), &state, &(x - y), -t).unwrap();
        let r = r.with_target(mat_row_major(&target));
        assert!(r.max_abs_z().unwrap() < 4.0, "{y:?} {t}: {:?}", r.z_score);
    }
}

#[test]
fn many_modes_give_gaussian_fourth_moments() {
    let f = factory(1e-3, 0.1, 4096);
    // points several correlation lengths apart contribute nearly independent draws
    let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
    let s = collect_samples(&f, &Ensemble::new(8, 3000), |r| {
        pts.iter().map(|p| r.velocity(p, 0.0)).collect::<Result<Vec<_>, _>>().map(|v| v.iter().flat_map(|u| u.iter().copied()).collect())
    })
    .unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = s.iter().flat_map(|row| (0..4).map(move |p| row[3 * p + c])).collect();
        let n = vals.len() as f64;
        let m2 = vals.iter().map(|v| v * v).sum::<f64>() / n;
        let m4 = vals.iter().map(|v| v.powi(4)).sum::<f64>() / n;
        let kurt = m4 / (m2 * m2);
        assert!((kurt / 3.0 - 1.0).abs() < 0.05, "component {c}: kurtosis {kurt}");
    }
}

#[test]
fn moving_average_variant_matches_energy() {
    let model = factory(1e-3, 0.1, 8).model().clone();
    let flow = Arc::new(ConstantFlow::new(Vec3::zeros(), 0.7, 1.3, 0.9).unwrap());
    let cfg = SamplerConfig { variant: Variant::HomogeneousMovingAverage, modes_per_slice: 32, ..Default::default() };
    let f = RealizationFactory::new(model, flow, cfg).unwrap();
    let s = collect_samples(&f, &Ensemble::new(3, 1500), |r| Ok(vec![0.5 * r.velocity(&Vec3::zeros(), 0.0)?.norm_squared()]))
        .unwrap();
    let r = EstimatorReport::from_samples("energy", &[1], &s).with_target(vec![0.7]);
    assert!(r.max_abs_z().unwrap() < 4.0, "{:?}", r.z_score);
}
