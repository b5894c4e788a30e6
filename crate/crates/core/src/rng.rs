//! Seed derivation and the elementary random draws shared by all samplers.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent child seed number `index` of `master`.
#[inline]
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

/// Generator for stream `stream` of `seed`; the streams of one seed are
/// disjoint ChaCha keystreams, so draws depend only on `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform direction on the unit sphere.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    let (s, c) = phi.sin_cos();
    Vector3::new(r * c, r * s, z)
}

/// Complex Gaussian 3-vector as `(re, im)`; every real and imaginary
/// component is an independent N(0, 1/2) variable.
pub fn complex_gaussian3<R: Rng + ?Sized>(rng: &mut R) -> (Vector3<f64>, Vector3<f64>) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut g = || s * rng.sample::<f64, _>(StandardNormal);
    let re = Vector3::new(g(), g(), g());
    let im = Vector3::new(g(), g(), g());
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut r1 = stream_rng(7, 3);
        let mut r2 = stream_rng(7, 3);
        let mut r3 = stream_rng(7, 4);
        let x1: u64 = r1.random();
        assert_eq!(x1, r2.random::<u64>());
        assert_ne!(x1, r3.random::<u64>());
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn complex_gaussian_variance() {
        let mut rng = rng_from_seed(1);
        let n = 100_000;
        let (mut sr, mut si, mut cross) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (re, im) = complex_gaussian3(&mut rng);
            sr += re[0] * re[0];
            si += im[1] * im[1];
            cross += re[2] * im[2];
        }
        let nf = n as f64;
        let se = (0.5f64 * 0.5 * 2.0 / nf).sqrt();
        assert!((sr / nf - 0.5).abs() < 4.0 * se);
        assert!((si / nf - 0.5).abs() < 4.0 * se);
        assert!((cross / nf).abs() < 4.0 * (0.25 / nf).sqrt());
    }

    #[test]
    fn unit_vectors_are_normalised_and_centred() {
        let mut rng = rng_from_seed(2);
        let mut mean = Vector3::zeros();
        let n = 100_000;
        for _ in 0..n {
            let v = unit_vector(&mut rng);
            assert!((v.norm() - 1.0).abs() < 1e-12);
            mean += v;
        }
        mean /= n as f64;
        let se = (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean.amax() < 4.0 * se);
    }
}
