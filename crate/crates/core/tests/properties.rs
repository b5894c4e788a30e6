use std::sync::Arc;

use proptest::prelude::*;
use turbfield::flowfield::{CharacteristicNumbers, ConstantFlow, Mat3, SolidRotation, UniformShear, Vec3};
use turbfield::meanflow::{inverse_check, trajectory_gradient, TrajectoryConfig};
use turbfield::par::Execution;
use turbfield::sampler::{projector, sphere_average, Model, RealizationFactory, SamplerConfig, Variant};
use turbfield::spectrum::{critical_zeta, derived_constants, solve_transitions, SpectrumFactory, SpectrumModel};
use turbfield::stats::{one_point_stats, Ensemble};
use turbfield::temporal::TemporalKernel;

fn model(z: f64, delta: f64) -> Arc<Model> {
    Arc::new(Model {
        spectra: SpectrumFactory::new(derived_constants()).unwrap(),
        kernel: TemporalKernel::default(),
        numbers: CharacteristicNumbers::new(z, delta).unwrap(),
    })
}

fn vec3() -> impl Strategy<Value = Vec3> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn symmetric() -> impl Strategy<Value = Mat3> {
    prop::array::uniform6(-2.0..2.0f64).prop_map(|s| Mat3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_annihilates_and_has_trace_two(k in vec3()) {
        prop_assume!(k.norm() > 1e-6);
        let p = projector(&k);
        prop_assert!((p * k).norm() <= 1e-14 * k.norm());
        prop_assert!((p.trace() - 2.0).abs() < 1e-14);
        prop_assert!((p * p - p).amax() < 1e-14);
        prop_assert!((p - p.transpose()).amax() == 0.0);
    }

    #[test]
    fn sphere_average_identity(s in symmetric()) {
        let want = 7.0 / 15.0 * s + s.trace() / 15.0 * Mat3::identity();
        prop_assert!((sphere_average(&s, 8) - want).amax() < 1e-13);
    }

    #[test]
    fn spectrum_closes_for_admissible_zeta(log_z in -5.0..-0.9f64) {
        let z = 10f64.powf(log_z);
        let c = derived_constants();
        prop_assume!(z < critical_zeta(&c).unwrap());
        let (r0, r2) = SpectrumModel::new(c.clone(), z).unwrap().closure_residuals();
        prop_assert!(r0.abs() < 1e-8 && r2.abs() < 1e-8, "{} {}", r0, r2);
        prop_assert_eq!(solve_transitions(&c, z).unwrap(), solve_transitions(&c, z).unwrap());
    }

    #[test]
    fn kernel_correlation_is_even_and_normalised(s in -1.0..1.0f64) {
        let k = TemporalKernel::default();
        prop_assert!((k.correlation(s) - k.correlation(-s)).abs() < 1e-14);
        prop_assert!(k.correlation(s) <= k.correlation(0.0) + 1e-14);
        prop_assert!((k.correlation(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_inverse_and_gronwall(w in vec3(), x in vec3(), span in -0.5..0.5f64) {
        let p = SolidRotation::new(w);
        let cfg = TrajectoryConfig { step: Some(1e-3), max_span: 1.0 };
        prop_assert!(inverse_check(&p, &x, 0.0, span, &cfg).unwrap() < 1e-11 * (1.0 + x.norm()));
        let (_, g) = trajectory_gradient(&p, &x, 0.0, span, &cfg).unwrap();
        let bound = (w.cross_matrix().norm() * span.abs()).exp() * (1.0 + 1e-6);
        for b in 0..3 {
            prop_assert!(g.column(b).norm() <= bound);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn realizations_are_deterministic_and_order_independent(seed in any::<u64>(), pts in prop::collection::vec(vec3(), 4)) {
        let flow = Arc::new(UniformShear::new(0.5).with_slopes(0.2, 0.1, 0.0));
        let cfg = SamplerConfig { variant: Variant::Inhomogeneous, modes_per_slice: 16, ..Default::default() };
        let f = RealizationFactory::new(model(1e-2, 0.2), flow, cfg).unwrap();
        let pts: Vec<Vec3> = pts.into_iter().map(|p| 0.1 * p).collect();
        let a = f.realization(seed).unwrap();
        let forward: Vec<Vec3> = pts.iter().map(|p| a.velocity(p, 0.0).unwrap()).collect();
        let b = f.realization(seed).unwrap();
        let backward: Vec<Vec3> = pts.iter().rev().map(|p| b.velocity(p, 0.0).unwrap()).collect();
        for (u, v) in forward.iter().zip(backward.iter().rev()) {
            prop_assert_eq!(u, v);
        }
    }

    #[test]
    fn estimates_do_not_depend_on_execution_mode(seed in any::<u64>()) {
        let flow = Arc::new(ConstantFlow::new(Vec3::new(1.0, 0.0, 0.0), 1.0, 1.0, 1.0).unwrap());
        let f = RealizationFactory::new(model(1e-3, 0.1), flow, SamplerConfig { modes: 64, ..Default::default() }).unwrap();
        let x = Vec3::new(0.1, 0.0, 0.0);
        let seq = one_point_stats(&f, &x, 0.0, &Ensemble::new(seed, 50).with_execution(Execution::Sequential)).unwrap();
        let par = turbfield::par::with_threads(3, || one_point_stats(&f, &x, 0.0, &Ensemble::new(seed, 50)).unwrap());
        prop_assert_eq!(seq, par);
    }
}
