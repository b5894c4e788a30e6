//! Model energy spectrum E(κ; ζ) with implicitly determined transition wave
//! numbers, its spatial spectral density and a wave-number sampler.
//!
//! The spectrum has three branches: an energy-containing range
//! `E ~ κ⁴` below κ₁, the Kolmogorov range `C_K κ^(−5/3)` between κ₁ and κ₂,
//! and a dissipation range `E ~ κ^(−7)` above κ₂. The transitions are fixed by
//! the two normalisation conditions `∫E dκ = 1` and `∫κ²E dκ = 1/(2ζ)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::error::{Error, Result};
use crate::invcdf::{refine_quantile, InverseCdf};
use crate::quad;

/// Exponents of the low- and high-wave-number polynomial branches.
const A_POW: [i32; 3] = [4, 5, 6];
const B_POW: [i32; 3] = [7, 8, 9];

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumConstants {
    pub ck: f64,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub a_hat1: f64,
    pub a_hat2: f64,
    pub b_hat1: f64,
    pub b_hat2: f64,
}

impl SpectrumConstants {
    /// Constants from a Kolmogorov constant and the branch coefficients
    /// `a = (a₄, a₅, a₆)`, `b = (b₇, b₈, b₉)`.
    pub fn new(ck: f64, a: [f64; 3], b: [f64; 3]) -> Result<Self> {
        if !(ck > 0.0 && ck.is_finite()) {
            return Err(Error::DegenerateConstants(format!("C_K = {ck}")));
        }
        let sum = |c: &[f64; 3], p: &[i32; 3], shift: i32| -> f64 {
            c.iter().zip(p).map(|(&v, &j)| v / (j + shift) as f64).sum()
        };
        let s = Self {
            ck,
            a,
            b,
            a_hat1: 1.5 + sum(&a, &A_POW, 1),
            a_hat2: 0.75 - sum(&a, &A_POW, 3),
            b_hat1: 1.5 - sum(&b, &B_POW, -1),
            b_hat2: 0.75 + sum(&b, &B_POW, -3),
        };
        for (name, v) in [
            ("a_hat1", s.a_hat1),
            ("a_hat2", s.a_hat2),
            ("b_hat1", s.b_hat1),
            ("b_hat2", s.b_hat2),
        ] {
            if !(v > 0.0) {
                return Err(Error::DegenerateConstants(format!("{name} = {v} is not positive")));
            }
        }
        Ok(s)
    }

    /// Continuity defects `(Σa − 1, Σb − 1)` at κ₁ and κ₂.
    pub fn continuity_defects(&self) -> (f64, f64) {
        (self.a.iter().sum::<f64>() - 1.0, self.b.iter().sum::<f64>() - 1.0)
    }
}

impl Default for SpectrumConstants {
    fn default() -> Self {
        derived_constants()
    }
}

/// `C_K = 3/2` with the C²-matching branch coefficients.
pub fn derived_constants() -> SpectrumConstants {
    SpectrumConstants::new(
        1.5,
        [230.0 / 9.0, -391.0 / 9.0, 170.0 / 9.0],
        [209.0 / 9.0, -352.0 / 9.0, 152.0 / 9.0],
    )
    .expect("default constants are valid")
}

/// Upper bound of admissible ζ for which the transition system is solvable.
pub fn critical_zeta(c: &SpectrumConstants) -> Result<f64> {
    let denom = 2.0 * c.ck.powi(3) * (c.b_hat2 - c.a_hat2) * (c.b_hat1 - c.a_hat1).powi(2);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::DegenerateConstants(format!(
            "critical zeta undefined (denominator {denom})"
        )));
    }
    Ok(1.0 / denom)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionWaveNumbers {
    pub zeta: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub y0: f64,
    /// dκ₁/dζ
    pub dkappa1: f64,
    /// dκ₂/dζ
    pub dkappa2: f64,
}

/// Solve for the transition wave numbers at `zeta`.
pub fn solve_transitions(c: &SpectrumConstants, zeta: f64) -> Result<TransitionWaveNumbers> {
    let zeta_crit = critical_zeta(c)?;
    if !(zeta > 0.0 && zeta < zeta_crit) {
        return Err(Error::ZetaOutOfRange { zeta, zeta_crit });
    }
    let big_a = c.a_hat1 * (2.0 * c.ck * c.a_hat2 * zeta).sqrt();
    let big_b = c.b_hat1 * (2.0 * c.ck * c.b_hat2 * zeta).sqrt();
    let c0 = 1.0 / c.ck;
    let a2 = big_a * big_a;
    let f = |y: f64| {
        let q = c0 + big_b * y;
        q * q * (1.0 - y * y) - a2 * y * y
    };
    let fy = |y: f64| {
        let q = c0 + big_b * y;
        2.0 * big_b * q * (1.0 - y * y) - 2.0 * y * q * q - 2.0 * a2 * y
    };
    // f(0) = c0² > 0 and f(1) = −A² < 0.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let mut y = 0.5 * (lo + hi);
    for _ in 0..4 {
        let d = fy(y);
        if d == 0.0 {
            break;
        }
        let next = y - f(y) / d;
        if next > 0.0 && next < 1.0 {
            y = next;
        }
    }
    let residual = f(y).abs();
    if residual > 1e-12 || !(y > 0.0 && y < 1.0) {
        return Err(Error::ConvergenceFailure { zeta, residual });
    }
    let by = big_b * y;
    let kappa1 = (c.a_hat1 / (c0 + by)).powf(1.5);
    let kappa2 = (c.b_hat1 / by).powf(1.5);
    if !(kappa1 > 0.0 && kappa1 < kappa2) {
        return Err(Error::ZetaOutOfRange { zeta, zeta_crit });
    }
    // Implicit differentiation of f(y(ζ), ζ) = 0, using A ∝ √ζ and B ∝ √ζ.
    let q = c0 + by;
    let f_zeta = (q * by * (1.0 - y * y) - a2 * y * y) / zeta;
    let dy = -f_zeta / fy(y);
    let dby = big_b / (2.0 * zeta) * y + big_b * dy;
    Ok(TransitionWaveNumbers {
        zeta,
        kappa1,
        kappa2,
        y0: y,
        dkappa1: -1.5 * kappa1 * dby / q,
        dkappa2: -1.5 * kappa2 * dby / by,
    })
}

/// Spectrum value with its partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumEval {
    pub e: f64,
    pub de_dkappa: f64,
    pub de_dzeta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumModel {
    pub constants: SpectrumConstants,
    pub transitions: TransitionWaveNumbers,
}

#[inline]
fn pow_m53(x: f64) -> f64 {
    let c = x.cbrt();
    1.0 / (x * c * c)
}

impl SpectrumModel {
    pub fn new(constants: SpectrumConstants, zeta: f64) -> Result<Self> {
        let transitions = solve_transitions(&constants, zeta)?;
        Ok(Self { constants, transitions })
    }

    pub fn zeta(&self) -> f64 {
        self.transitions.zeta
    }

    pub fn kappa1(&self) -> f64 {
        self.transitions.kappa1
    }

    pub fn kappa2(&self) -> f64 {
        self.transitions.kappa2
    }

    /// E(κ; ζ); zero for κ ≤ 0.
    pub fn energy(&self, kappa: f64) -> f64 {
        let c = &self.constants;
        let (k1, k2) = (self.kappa1(), self.kappa2());
        if kappa <= 0.0 {
            0.0
        } else if kappa < k1 {
            let r = kappa / k1;
            let r4 = r * r * r * r;
            c.ck * pow_m53(k1) * r4 * (c.a[0] + r * (c.a[1] + r * c.a[2]))
        } else if kappa <= k2 {
            c.ck * pow_m53(kappa)
        } else {
            let s = k2 / kappa;
            let s7 = s.powi(7);
            c.ck * pow_m53(k2) * s7 * (c.b[0] + s * (c.b[1] + s * c.b[2]))
        }
    }

    /// E together with ∂E/∂κ and ∂E/∂ζ (the latter through κ₁(ζ), κ₂(ζ)).
    pub fn energy_with_derivatives(&self, kappa: f64) -> SpectrumEval {
        let c = &self.constants;
        let t = &self.transitions;
        let (k1, k2) = (t.kappa1, t.kappa2);
        if kappa <= 0.0 {
            return SpectrumEval { e: 0.0, de_dkappa: 0.0, de_dzeta: 0.0 };
        }
        if kappa < k1 {
            // E = C_K Σ a_j κ^j κ₁^(−5/3−j)
            let r = kappa / k1;
            let pre = c.ck * pow_m53(k1);
            let (mut e, mut dk, mut dk1) = (0.0, 0.0, 0.0);
            for (&aj, &j) in c.a.iter().zip(&A_POW) {
                let rj = r.powi(j);
                let jf = j as f64;
                e += aj * rj;
                dk += aj * jf * rj / kappa;
                dk1 += aj * (-5.0 / 3.0 - jf) * rj / k1;
            }
            SpectrumEval { e: pre * e, de_dkappa: pre * dk, de_dzeta: pre * dk1 * t.dkappa1 }
        } else if kappa <= k2 {
            let e = c.ck * pow_m53(kappa);
            SpectrumEval { e, de_dkappa: -5.0 / 3.0 * e / kappa, de_dzeta: 0.0 }
        } else {
            // E = C_K Σ b_j κ^(−j) κ₂^(j−5/3)
            let s = k2 / kappa;
            let pre = c.ck * pow_m53(k2);
            let (mut e, mut dk, mut dk2) = (0.0, 0.0, 0.0);
            for (&bj, &j) in c.b.iter().zip(&B_POW) {
                let sj = s.powi(j);
                let jf = j as f64;
                e += bj * sj;
                dk -= bj * jf * sj / kappa;
                dk2 += bj * (jf - 5.0 / 3.0) * sj / k2;
            }
            SpectrumEval { e: pre * e, de_dkappa: pre * dk, de_dzeta: pre * dk2 * t.dkappa2 }
        }
    }

    /// Spatial spectral density f_x(κ) = E(κ)/(4πκ²); the removable limit 0 at κ = 0.
    pub fn spatial_density(&self, kappa: f64) -> f64 {
        if kappa <= 0.0 {
            0.0
        } else {
            self.energy(kappa) / (4.0 * PI * kappa * kappa)
        }
    }

    /// Closed-form CDF ∫₀^κ E.
    pub fn cdf(&self, kappa: f64) -> f64 {
        if kappa <= 0.0 {
            return 0.0;
        }
        if kappa > self.kappa2() {
            return 1.0 - self.tail_mass(kappa);
        }
        let c = &self.constants;
        let (k1, _) = (self.kappa1(), self.kappa2());
        let k1m23 = k1.cbrt().powi(-2);
        if kappa < k1 {
            let r = kappa / k1;
            c.ck * k1m23 * c.a.iter().zip(&A_POW).map(|(&aj, &j)| aj * r.powi(j + 1) / (j + 1) as f64).sum::<f64>()
        } else {
            let low: f64 = c.ck * k1m23 * c.a.iter().zip(&A_POW).map(|(&aj, &j)| aj / (j + 1) as f64).sum::<f64>();
            low + 1.5 * c.ck * (k1m23 - kappa.cbrt().powi(-2))
        }
    }

    /// ∫_κ^∞ E for κ ≥ κ₂, evaluated without cancellation.
    pub fn tail_mass(&self, kappa: f64) -> f64 {
        let c = &self.constants;
        let k2 = self.kappa2();
        if kappa <= k2 {
            return 1.0 - self.cdf(kappa);
        }
        let s = k2 / kappa;
        c.ck * k2.cbrt().powi(-2)
            * c.b.iter().zip(&B_POW).map(|(&bj, &j)| bj * s.powi(j - 1) / (j - 1) as f64).sum::<f64>()
    }

    /// Quadrature residuals `(∫E − 1, 2ζ∫κ²E − 1)`.
    pub fn closure_residuals(&self) -> (f64, f64) {
        let (k1, k2) = (self.kappa1(), self.kappa2());
        let kt = 64.0 * k2;
        let pts = [0.0, k1, k2, 4.0 * k2, 16.0 * k2, kt];
        let c = &self.constants;
        let pre = c.ck * pow_m53(k2);
        // analytic tails beyond kt
        let tail0 = self.tail_mass(kt);
        let tail2: f64 = pre
            * c.b.iter().zip(&B_POW).map(|(&bj, &j)| bj * k2.powi(j) * kt.powi(3 - j) / (j - 3) as f64).sum::<f64>();
        let i0 = quad::integrate_pieces(|k| self.energy(k), &pts, 1e-15, 1e-14) + tail0;
        let i2 = quad::integrate_pieces(|k| k * k * self.energy(k), &pts, 1e-15, 1e-14) + tail2;
        (i0 - 1.0, 2.0 * self.zeta() * i2 - 1.0)
    }
}

/// Draws wave-number magnitudes with density E(·; ζ).
#[derive(Clone, Debug)]
pub struct WavenumberSampler {
    model: SpectrumModel,
    table: InverseCdf,
}

/// Upper truncation of the wave-number distribution.
pub const TAIL_TRUNCATION: f64 = 1e-10;

impl WavenumberSampler {
    pub fn new(model: SpectrumModel) -> Self {
        Self::with_nodes(model, 2048)
    }

    pub fn with_nodes(model: SpectrumModel, n: usize) -> Self {
        let k2 = model.kappa2();
        // κ_max: tail mass equals the truncation level
        let (mut lo, mut hi) = (k2, k2 * 2.0);
        while model.tail_mass(hi) > TAIL_TRUNCATION {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if model.tail_mass(mid) > TAIL_TRUNCATION {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let kmax = hi;
        let kmin = 1e-3 * model.kappa1();
        let (l0, l1) = (kmin.ln(), kmax.ln());
        let nodes: Vec<f64> = (0..n)
            .map(|i| (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp())
            .collect();
        let table = InverseCdf::from_cdf(nodes, |k| model.cdf(k), |k| model.energy(k));
        Self { model, table }
    }

    pub fn model(&self) -> &SpectrumModel {
        &self.model
    }

    pub fn kappa_min(&self) -> f64 {
        self.table.lower()
    }

    pub fn kappa_max(&self) -> f64 {
        self.table.upper()
    }

    /// Quantile function at level `u ∈ [0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return self.kappa_min();
        }
        if u >= self.table.total_mass() {
            return self.kappa_max();
        }
        let x = self.table.invert(u);
        refine_quantile(u, x, self.table.bracket(u), |k| self.model.cdf(k), |k| self.model.energy(k))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }

    /// Quantile from the Hermite table alone, without the exact-CDF
    /// refinement (relative deviation below 1e-8; several times faster).
    pub fn quantile_tabulated(&self, u: f64) -> f64 {
        self.table.invert(u)
    }

    pub fn sample_tabulated<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile_tabulated(rng.random::<f64>())
    }
}

/// Per-ζ memoised spectrum models and samplers.
#[derive(Debug)]
pub struct SpectrumFactory {
    constants: SpectrumConstants,
    zeta_crit: f64,
    models: RwLock<HashMap<u64, Arc<SpectrumModel>>>,
    samplers: RwLock<HashMap<u64, Arc<WavenumberSampler>>>,
}

const CACHE_LIMIT: usize = 4096;

impl SpectrumFactory {
    pub fn new(constants: SpectrumConstants) -> Result<Self> {
        let zeta_crit = critical_zeta(&constants)?;
        Ok(Self {
            constants,
            zeta_crit,
            models: RwLock::new(HashMap::new()),
            samplers: RwLock::new(HashMap::new()),
        })
    }

    pub fn constants(&self) -> &SpectrumConstants {
        &self.constants
    }

    pub fn zeta_crit(&self) -> f64 {
        self.zeta_crit
    }

    /// Model at exactly `zeta`. Entries are keyed by the bit pattern so that
    /// cached and uncached results are identical.
    pub fn model(&self, zeta: f64) -> Result<Arc<SpectrumModel>> {
        let key = zeta.to_bits();
        if let Some(m) = self.models.read().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(SpectrumModel::new(self.constants.clone(), zeta)?);
        let mut w = self.models.write().unwrap();
        if w.len() >= CACHE_LIMIT {
            w.clear();
        }
        Ok(w.entry(key).or_insert(m).clone())
    }

    pub fn sampler(&self, zeta: f64) -> Result<Arc<WavenumberSampler>> {
        let key = zeta.to_bits();
        if let Some(s) = self.samplers.read().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let model = (*self.model(zeta)?).clone();
        let s = Arc::new(WavenumberSampler::new(model));
        Ok(self.samplers.write().unwrap().entry(key).or_insert(s).clone())
    }
}
