//! Compactly supported time kernel η, its autocorrelation C_t and the
//! temporal spectral density f_t.
//!
//! `η(s) = (a/√s_c)·p(|s|/s_c)` with the quintic `p(z) = 1 − 10z³ + 15z⁴ − 6z⁵`,
//! `a² = 231/181` and `s_c = (362/231)·T_E`, which gives `∫η² = 1` and
//! `∫₀^∞ C_t = T_E`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::invcdf::InverseCdf;
use crate::quad;

pub const DEFAULT_T_E: f64 = 0.3;

#[inline]
pub fn p(z: f64) -> f64 {
    let z3 = z * z * z;
    1.0 + z3 * (-10.0 + z * (15.0 - 6.0 * z))
}

#[inline]
pub fn p_prime(z: f64) -> f64 {
    let w = z * (1.0 - z);
    -30.0 * w * w
}

#[inline]
fn p_second(z: f64) -> f64 {
    -60.0 * z * (1.0 - z) * (1.0 - 2.0 * z)
}

/// ∫₀¹ zⁿ p(z) dz
fn p_moment(n: usize) -> f64 {
    let n = n as f64;
    1.0 / (n + 1.0) - 10.0 / (n + 4.0) + 15.0 / (n + 5.0) - 6.0 / (n + 6.0)
}

/// `g(θ) = ∫₀¹ cos(θz) p(z) dz`, closed form with a series near θ = 0.
pub fn cosine_transform_p(theta: f64) -> f64 {
    let th = theta.abs();
    if th < 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        let t2 = th * th;
        for m in 0..12 {
            if m > 0 {
                term *= -t2 / ((2 * m - 1) as f64 * (2 * m) as f64);
            }
            sum += term * p_moment(2 * m);
        }
        sum
    } else {
        let (s, c) = th.sin_cos();
        let t4 = th.powi(4);
        60.0 * (c - 1.0) / t4 - 360.0 * s / (t4 * th) + 720.0 * (1.0 - c) / (t4 * th * th)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalKernel {
    pub a: f64,
    pub s_c: f64,
    pub t_e: f64,
}

impl Default for TemporalKernel {
    fn default() -> Self {
        Self::new(DEFAULT_T_E).expect("default T_E is valid")
    }
}

impl TemporalKernel {
    pub fn new(t_e: f64) -> Result<Self> {
        if !(t_e > 0.0 && t_e.is_finite()) {
            return Err(Error::InvalidParameter(format!("T_E = {t_e} must be positive")));
        }
        Ok(Self { a: (231.0f64 / 181.0).sqrt(), s_c: 362.0 / 231.0 * t_e, t_e })
    }

    pub fn eta(&self, s: f64) -> f64 {
        let z = s.abs() / self.s_c;
        if z >= 1.0 {
            0.0
        } else {
            self.a / self.s_c.sqrt() * p(z)
        }
    }

    pub fn eta_prime(&self, s: f64) -> f64 {
        let z = s.abs() / self.s_c;
        if z >= 1.0 {
            0.0
        } else {
            self.a / self.s_c.powf(1.5) * p_prime(z) * s.signum()
        }
    }

    pub fn eta_second(&self, s: f64) -> f64 {
        let z = s.abs() / self.s_c;
        if z >= 1.0 {
            0.0
        } else {
            self.a / self.s_c.powf(2.5) * p_second(z)
        }
    }

    /// C_t(s) = ∫ η(s−r)η(r) dr by exact piecewise-polynomial Gauss rules.
    pub fn correlation(&self, s: f64) -> f64 {
        thread_local! {
            static RULE: (Vec<f64>, Vec<f64>) = quad::gauss_legendre(8);
        }
        let tau = s.abs() / self.s_c;
        if tau >= 2.0 {
            return 0.0;
        }
        let lo = (-1.0f64).max(tau - 1.0);
        let hi = 1.0f64.min(tau + 1.0);
        let mut pts = vec![lo, hi];
        for b in [0.0, tau] {
            if b > lo && b < hi {
                pts.push(b);
            }
        }
        pts.sort_by(f64::total_cmp);
        let big_p = |w: f64| if w.abs() >= 1.0 { 0.0 } else { p(w.abs()) };
        RULE.with(|rule| {
            let sum: f64 = pts
                .windows(2)
                .map(|w| quad::gauss_fixed(|x| big_p(tau - x) * big_p(x), w[0], w[1], rule))
                .sum();
            self.a * self.a * sum
        })
    }

    /// f_t(ω) = (2a²s_c/π)·g(ωs_c)².
    pub fn spectral_density(&self, omega: f64) -> f64 {
        let g = cosine_transform_p(omega * self.s_c);
        2.0 * self.a * self.a * self.s_c / PI * g * g
    }

    /// Support half-width of C_t.
    pub fn correlation_support(&self) -> f64 {
        2.0 * self.s_c
    }
}

/// Draws frequencies with density f_t.
#[derive(Clone, Debug)]
pub struct FrequencySampler {
    table: InverseCdf,
}

impl FrequencySampler {
    pub fn new(kernel: &TemporalKernel) -> Self {
        Self::with_nodes(kernel, 2048)
    }

    pub fn with_nodes(kernel: &TemporalKernel, n: usize) -> Self {
        // |ω| tail mass below 1e-10 beyond ≈ 63/s_c (f_t decays like ω⁻⁸)
        let omega_max = 63.0 / kernel.s_c;
        let nodes: Vec<f64> = (0..n).map(|i| omega_max * i as f64 / (n - 1) as f64).collect();
        let table = InverseCdf::from_density(nodes, |w| 2.0 * kernel.spectral_density(w), 0.0);
        Self { table }
    }

    pub fn omega_max(&self) -> f64 {
        self.table.upper()
    }

    /// Quantile of |ω|.
    pub fn magnitude_quantile(&self, u: f64) -> f64 {
        self.table.invert(u)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = self.table.invert(rng.random::<f64>());
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values() {
        let k = TemporalKernel::default();
        let peak = (231.0f64 / 181.0).sqrt() / (362.0 / 231.0 * 0.3f64).sqrt();
        assert!((k.eta(0.0) - peak).abs() < 1e-15);
        assert!((k.eta(0.0) - 1.647_622_749_491_553).abs() < 1e-14);
        assert_eq!(k.eta(k.s_c), 0.0);
        assert_eq!(k.eta(-k.s_c), 0.0);
        assert!((k.eta(0.5 * k.s_c) - 0.5 * peak).abs() < 1e-15);
        assert!((p(0.5) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn exact_rational_identities() {
        let k = TemporalKernel::new(0.3).unwrap();
        assert!((k.a * k.a * k.s_c - 0.6).abs() < 1e-15);
        // ∫₀¹ p² = 181/462
        let ip2 = quad::integrate(|z| p(z) * p(z), 0.0, 1.0, 1e-16, 1e-15);
        assert!((ip2 - 181.0 / 462.0).abs() < 1e-15);
        let i = quad::integrate(|s| k.eta(s).powi(2), -k.s_c, k.s_c, 1e-16, 1e-15);
        assert!((i - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_values() {
        let k = TemporalKernel::default();
        assert!((k.correlation(0.0) - 1.0).abs() < 1e-14);
        assert_eq!(k.correlation(2.0 * k.s_c), 0.0);
        // independent high-precision convolution values
        for (s, v) in [(0.1, 0.921_054_617_210_338_3), (0.3, 0.474_106_012_222_802_3), (0.5, 0.101_243_104_373_538_12), (0.8, 1.191_921_811_314_862_5e-4)] {
            assert!((k.correlation(s) - v).abs() < 1e-14, "s={s}");
            assert_eq!(k.correlation(s), k.correlation(-s));
        }
    }

    #[test]
    fn integral_time_scale() {
        let k = TemporalKernel::default();
        let i = quad::integrate_pieces(|s| k.correlation(s), &[0.0, k.s_c, 2.0 * k.s_c], 1e-15, 1e-14);
        assert!((i - 0.3).abs() < 1e-12);
        assert!((PI * k.spectral_density(0.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cosine_transform_branches_agree() {
        for th in [0.5, 0.999, 1.001, 3.0, 20.0] {
            let q = quad::integrate(|z| (th * z).cos() * p(z), 0.0, 1.0, 1e-16, 1e-15);
            assert!((cosine_transform_p(th) - q).abs() < 1e-12, "θ={th}");
        }
        assert!((cosine_transform_p(3.0) - 0.282_289_493_392_899_3).abs() < 1e-14);
    }

    #[test]
    fn spectral_density_values_and_normalisation() {
        let k = TemporalKernel::default();
        for (w, v) in [(1.0, 0.093_009_619_756_664_52), (5.0, 0.048_218_975_888_735_237), (20.0, 6.834_138_768_284_907_5e-5)] {
            assert!((k.spectral_density(w) - v).abs() < 1e-12 * v.max(1e-3), "ω={w}");
            assert_eq!(k.spectral_density(w), k.spectral_density(-w));
        }
        let mass = 2.0 * quad::integrate(|w| k.spectral_density(w), 0.0, 4000.0, 1e-15, 1e-13);
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn eta_is_twice_continuously_differentiable() {
        let k = TemporalKernel::default();
        let h = 1e-7;
        for s0 in [0.0, k.s_c, -k.s_c] {
            for (f, name) in [
                (&(|s: f64| k.eta(s)) as &dyn Fn(f64) -> f64, "eta"),
                (&|s: f64| k.eta_prime(s), "eta'"),
                (&|s: f64| k.eta_second(s), "eta''"),
            ] {
                let jump = (f(s0 + h) - f(s0 - h)).abs();
                assert!(jump < 1e-4, "{name} jumps by {jump} at {s0}");
            }
        }
        let s = 0.2;
        let fd = (k.eta(s + 1e-6) - k.eta(s - 1e-6)) / 2e-6;
        assert!((fd - k.eta_prime(s)).abs() < 1e-6);
    }

    #[test]
    fn frequency_sampler_moments() {
        let k = TemporalKernel::default();
        let fs = FrequencySampler::new(&k);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let w = fs.sample(&mut rng);
            m1 += w;
            m2 += w * w;
            m4 += w.powi(4);
        }
        let nf = n as f64;
        let (mean, var) = (m1 / nf, m2 / nf);
        assert!(mean.abs() < 3.0 * (var / nf).sqrt());
        // ∫ω² f_t dω from an independent high-precision quadrature
        let target = 16.497_938_108_032_763;
        let se = ((m4 / nf - var * var) / nf).sqrt();
        assert!((var - target).abs() < 3.0 * se, "{var} vs {target} ± {se}");
    }
}
