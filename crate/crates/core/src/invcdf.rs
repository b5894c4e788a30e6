//! Tabulated inverse-CDF sampling for one-dimensional densities.

use crate::quad;

/// A monotone CDF tabulated at increasing nodes, with the density at each
/// node. Inversion uses the cubic Hermite interpolant of the table.
#[derive(Clone, Debug)]
pub struct InverseCdf {
    x: Vec<f64>,
    c: Vec<f64>,
    p: Vec<f64>,
}

impl InverseCdf {
    /// Build from a closed-form CDF and density.
    pub fn from_cdf(nodes: Vec<f64>, cdf: impl Fn(f64) -> f64, pdf: impl Fn(f64) -> f64) -> Self {
        assert!(nodes.len() >= 2);
        let mut c: Vec<f64> = nodes.iter().map(|&x| cdf(x)).collect();
        enforce_monotone(&mut c);
        let p = nodes.iter().map(|&x| pdf(x)).collect();
        Self { x: nodes, c, p }
    }

    /// Build from a density alone; the CDF is accumulated cell by cell with
    /// adaptive quadrature, starting from `mass_below` at the first node.
    pub fn from_density(nodes: Vec<f64>, pdf: impl Fn(f64) -> f64, mass_below: f64) -> Self {
        assert!(nodes.len() >= 2);
        let mut c = Vec::with_capacity(nodes.len());
        let mut acc = mass_below;
        c.push(acc);
        for w in nodes.windows(2) {
            acc += quad::integrate(&pdf, w[0], w[1], 1e-16, 1e-13);
            c.push(acc);
        }
        enforce_monotone(&mut c);
        let p = nodes.iter().map(|&x| pdf(x)).collect();
        Self { x: nodes, c, p }
    }

    pub fn lower(&self) -> f64 {
        self.x[0]
    }

    pub fn upper(&self) -> f64 {
        *self.x.last().unwrap()
    }

    /// Tabulated CDF value at the last node.
    pub fn total_mass(&self) -> f64 {
        *self.c.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Index `i` of the cell `[x[i], x[i+1]]` containing probability level `u`.
    fn cell(&self, u: f64) -> usize {
        let k = self.c.partition_point(|&ci| ci <= u);
        k.clamp(1, self.c.len() - 1) - 1
    }

    /// Quantile for `u ∈ [0, 1]`; levels outside the tabulated range map to
    /// the end nodes.
    pub fn invert(&self, u: f64) -> f64 {
        if u <= self.c[0] {
            return self.x[0];
        }
        if u >= self.total_mass() {
            return self.upper();
        }
        let i = self.cell(u);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let (c0, c1) = (self.c[i], self.c[i + 1]);
        let h = x1 - x0;
        let (m0, m1) = (self.p[i] * h, self.p[i + 1] * h);
        let herm = |t: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            c0 * (2.0 * t3 - 3.0 * t2 + 1.0)
                + m0 * (t3 - 2.0 * t2 + t)
                + c1 * (-2.0 * t3 + 3.0 * t2)
                + m1 * (t3 - t2)
        };
        let dherm = |t: f64| {
            let t2 = t * t;
            c0 * (6.0 * t2 - 6.0 * t) + m0 * (3.0 * t2 - 4.0 * t + 1.0) + c1 * (-6.0 * t2 + 6.0 * t) + m1 * (3.0 * t2 - 2.0 * t)
        };
        // Safeguarded Newton on a bracket with herm(lo) ≤ u < herm(hi).
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut t = ((u - c0) / (c1 - c0)).clamp(0.0, 1.0);
        for _ in 0..60 {
            let r = herm(t) - u;
            if r <= 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let d = dherm(t);
            let mut next = if d > 0.0 { t - r / d } else { f64::NAN };
            if (next - t).abs() < 1e-15 {
                t = next.clamp(lo, hi);
                break;
            }
            if !(next >= lo && next <= hi) {
                next = 0.5 * (lo + hi);
            }
            t = next;
        }
        x0 + h * t
    }

    /// Cell bracket `[x[i], x[i+1]]` of the level `u`, for callers that refine
    /// against an exact CDF.
    pub fn bracket(&self, u: f64) -> (f64, f64) {
        let i = self.cell(u.clamp(self.c[0], self.total_mass()));
        (self.x[i], self.x[i + 1])
    }
}

fn enforce_monotone(c: &mut [f64]) {
    for i in 1..c.len() {
        if c[i] < c[i - 1] {
            c[i] = c[i - 1];
        }
    }
}

/// Refine a quantile of an exact CDF inside a bracket by safeguarded Newton.
pub fn refine_quantile(
    u: f64,
    mut x: f64,
    (mut lo, mut hi): (f64, f64),
    cdf: impl Fn(f64) -> f64,
    pdf: impl Fn(f64) -> f64,
) -> f64 {
    x = x.clamp(lo, hi);
    for _ in 0..50 {
        let r = cdf(x) - u;
        if r <= 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if r == 0.0 {
            return x;
        }
        let d = pdf(x);
        let mut next = if d > 0.0 { x - r / d } else { f64::NAN };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            return next.clamp(lo, hi);
        }
        if !(next >= lo && next <= hi) {
            next = 0.5 * (lo + hi);
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs() {
            return next;
        }
        x = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_quantiles() {
        let nodes: Vec<f64> = (0..=400).map(|i| i as f64 * 0.1).collect();
        let t = InverseCdf::from_density(nodes, |x| (-x).exp(), 0.0);
        for &u in &[0.01, 0.3, 0.5, 0.9, 0.999] {
            let x = t.invert(u);
            let exact = -(1.0f64 - u).ln();
            assert!((x - exact).abs() < 1e-6, "u={u}: {x} vs {exact}");
        }
        assert_eq!(t.invert(0.0), 0.0);
        assert_eq!(t.invert(1.0), 40.0);
    }

    #[test]
    fn refine_recovers_exact_quantile() {
        let cdf = |x: f64| 1.0 - (-x).exp();
        let pdf = |x: f64| (-x).exp();
        let x = refine_quantile(0.7, 1.0, (0.0, 5.0), cdf, pdf);
        assert!((x - (-(0.3f64).ln())).abs() < 1e-14, "{x}");
    }
}
