//! Macroscopic flow data (ū, k, ε, ν and anisotropy), scaling functions and
//! characteristic numbers.
//!
//! All providers work in dimensionless variables. Positions are 3-vectors,
//! and `grad_u[(i, j)] = ∂ū_i/∂x_j`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceScales {
    pub x0: f64,
    pub nu0: f64,
    pub k0: f64,
    pub eps0: f64,
}

impl ReferenceScales {
    pub fn new(x0: f64, nu0: f64, k0: f64, eps0: f64) -> Result<Self> {
        for (name, v) in [("x0", x0), ("nu0", nu0), ("k0", k0), ("eps0", eps0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("reference scale {name} = {v} must be positive")));
            }
        }
        Ok(Self { x0, nu0, k0, eps0 })
    }

    pub fn u0(&self) -> f64 {
        self.k0.sqrt()
    }

    pub fn t0(&self) -> f64 {
        self.x0 / self.u0()
    }

    pub fn x_mu(&self) -> f64 {
        self.k0.powf(1.5) / self.eps0
    }

    pub fn t_mu(&self) -> f64 {
        self.k0 / self.eps0
    }

    pub fn numbers(&self) -> CharacteristicNumbers {
        CharacteristicNumbers { z: self.eps0 * self.nu0 / (self.k0 * self.k0), delta: self.x_mu() / self.x0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharacteristicNumbers {
    /// inverse turbulent viscosity ratio ε₀ν₀/k₀²
    pub z: f64,
    /// turbulence scale ratio √k₀³/(ε₀x₀)
    pub delta: f64,
}

impl CharacteristicNumbers {
    pub fn new(z: f64, delta: f64) -> Result<Self> {
        if !(z > 0.0 && z.is_finite() && delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("z = {z} and delta = {delta} must be positive")));
        }
        Ok(Self { z, delta })
    }

    /// Human-readable warnings for numbers outside the small-parameter regime.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.z >= 1.0 {
            w.push(format!("z = {} is not small", self.z));
        }
        if self.delta >= 1.0 {
            w.push(format!("delta = {} is not small", self.delta));
        }
        w
    }
}

/// Flow quantities and spatial gradients at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub u_bar: Vec3,
    pub grad_u: Mat3,
    pub k: f64,
    pub eps: f64,
    pub nu: f64,
    pub grad_k: Vec3,
    pub grad_eps: Vec3,
    pub grad_nu: Vec3,
    pub reynolds: Option<Mat3>,
    /// Anisotropy factor L with ‖L‖² = 3.
    pub aniso: Mat3,
    /// ∂L/∂x_b for b = 0, 1, 2.
    pub grad_aniso: [Mat3; 3],
}

impl FlowState {
    pub fn uniform(u_bar: Vec3, k: f64, eps: f64, nu: f64) -> Self {
        Self {
            u_bar,
            grad_u: Mat3::zeros(),
            k,
            eps,
            nu,
            grad_k: Vec3::zeros(),
            grad_eps: Vec3::zeros(),
            grad_nu: Vec3::zeros(),
            reynolds: None,
            aniso: Mat3::identity(),
            grad_aniso: [Mat3::zeros(); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [("k", self.k), ("eps", self.eps), ("nu", self.nu)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveField { field, value, index: 0 });
            }
        }
        if let Some(r) = &self.reynolds {
            check_reynolds(r, self.k)?;
        }
        Ok(())
    }

    /// One-point tensor E[u′⊗u′] implied by k and L.
    pub fn one_point_tensor(&self) -> Mat3 {
        self.k * (7.0 / 15.0 * self.aniso * self.aniso.transpose() + Mat3::identity() / 5.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingEval {
    pub sigma_x: f64,
    pub sigma_t: f64,
    pub sigma_u: f64,
    pub sigma_z: f64,
    pub grad_sigma_x: Vec3,
    pub grad_sigma_t: Vec3,
    pub grad_sigma_u: Vec3,
    pub grad_sigma_z: Vec3,
}

/// σ_x = k^{3/2}/ε, σ_t = k/ε, σ_u = √k, σ_z = εν/k² and their gradients.
pub fn scaling_at(s: &FlowState) -> ScalingEval {
    let (k, e, n) = (s.k, s.eps, s.nu);
    let lk = s.grad_k / k;
    let le = s.grad_eps / e;
    let ln = s.grad_nu / n;
    let sigma_x = k.powf(1.5) / e;
    let sigma_t = k / e;
    let sigma_u = k.sqrt();
    let sigma_z = e * n / (k * k);
    ScalingEval {
        sigma_x,
        sigma_t,
        sigma_u,
        sigma_z,
        grad_sigma_x: sigma_x * (1.5 * lk - le),
        grad_sigma_t: sigma_t * (lk - le),
        grad_sigma_u: 0.5 * sigma_u * lk,
        grad_sigma_z: sigma_z * (le + ln - 2.0 * lk),
    }
}

fn check_reynolds(r: &Mat3, k: f64) -> Result<()> {
    let scale = r.amax().max(k.abs()).max(1e-300);
    if (r - r.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotRealizable("Reynolds tensor is not symmetric".into()));
    }
    if (r.trace() - 2.0 * k).abs() > 1e-10 * scale.max(1.0) {
        return Err(Error::NotRealizable(format!("tr R = {} differs from 2k = {}", r.trace(), 2.0 * k)));
    }
    Ok(())
}

/// Symmetric target M = (15/7)R/k − (3/7)I of L·Lᵀ.
pub fn anisotropy_target(r: &Mat3, k: f64) -> Mat3 {
    15.0 / 7.0 / k * r - 3.0 / 7.0 * Mat3::identity()
}

/// L with L·Lᵀ = (15/7)R/k − (3/7)I: the Cholesky factor when it exists,
/// otherwise the symmetric square root for marginally indefinite M.
pub fn anisotropy_from_reynolds(r: &Mat3, k: f64) -> Result<Mat3> {
    if !(k > 0.0) {
        return Err(Error::NonPositiveField { field: "k", value: k, index: 0 });
    }
    check_reynolds(r, k)?;
    let m = anisotropy_target(r, k);
    let m = 0.5 * (m + m.transpose());
    if let Some(c) = m.cholesky() {
        return Ok(c.l());
    }
    let eig = m.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-12 {
        return Err(Error::NotRealizable(format!("anisotropy target has eigenvalue {min}")));
    }
    let d = Mat3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Derivative of the Cholesky factor along dM: dL = L·Φ(L⁻¹ dM L⁻ᵀ), where Φ
/// keeps the strict lower triangle and halves the diagonal. Zero when L is
/// singular.
pub fn cholesky_derivative(l: &Mat3, dm: &Mat3) -> Mat3 {
    let Some(li) = l.try_inverse() else {
        return Mat3::zeros();
    };
    let x = li * dm * li.transpose();
    let mut phi = Mat3::zeros();
    for i in 0..3 {
        for j in 0..i {
            phi[(i, j)] = x[(i, j)];
        }
        phi[(i, i)] = 0.5 * x[(i, i)];
    }
    l * phi
}

/// Reference quantities a provider can report for choosing sampler defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceHint {
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub sigma_t_min: f64,
}

pub trait FlowProvider: Send + Sync + fmt::Debug {
    fn state_at(&self, x: &Vec3, t: f64) -> Result<FlowState>;

    /// ū and ∇ū only; the trajectory integrator calls this in its inner loop.
    fn velocity(&self, x: &Vec3, t: f64) -> Result<(Vec3, Mat3)> {
        let s = self.state_at(x, t)?;
        Ok((s.u_bar, s.grad_u))
    }

    /// True when k, ε, ν, L are constant and ū is uniform.
    fn is_homogeneous(&self) -> bool {
        false
    }

    /// Domain-wide reference values (median σ_z and σ_x, minimum σ_t) when known.
    fn reference_hint(&self) -> Option<ReferenceHint> {
        None
    }
}

/// Spatially uniform flow.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantFlow {
    pub u_bar: Vec3,
    pub k: f64,
    pub eps: f64,
    pub nu: f64,
    pub aniso: Mat3,
}

impl ConstantFlow {
    pub fn new(u_bar: Vec3, k: f64, eps: f64, nu: f64) -> Result<Self> {
        Self::with_anisotropy(u_bar, k, eps, nu, Mat3::identity())
    }

    pub fn with_anisotropy(u_bar: Vec3, k: f64, eps: f64, nu: f64, aniso: Mat3) -> Result<Self> {
        let f = Self { u_bar, k, eps, nu, aniso };
        f.state().validate()?;
        check_aniso_norm(&aniso)?;
        Ok(f)
    }

    pub fn state(&self) -> FlowState {
        let mut s = FlowState::uniform(self.u_bar, self.k, self.eps, self.nu);
        s.aniso = self.aniso;
        s
    }
}

fn check_aniso_norm(l: &Mat3) -> Result<()> {
    let n = l.norm_squared();
    if (n - 3.0).abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!("anisotropy factor has ‖L‖² = {n}, expected 3")));
    }
    Ok(())
}

impl FlowProvider for ConstantFlow {
    fn state_at(&self, _x: &Vec3, _t: f64) -> Result<FlowState> {
        Ok(self.state())
    }

    fn velocity(&self, _x: &Vec3, _t: f64) -> Result<(Vec3, Mat3)> {
        Ok((self.u_bar, Mat3::zeros()))
    }

    fn is_homogeneous(&self) -> bool {
        true
    }

    fn reference_hint(&self) -> Option<ReferenceHint> {
        let s = scaling_at(&self.state());
        Some(ReferenceHint { sigma_z: s.sigma_z, sigma_x: s.sigma_x, sigma_t_min: s.sigma_t })
    }
}

/// Uniform shear ū = u₀ + (γ x₂, 0, 0) with k, ε, ν optionally modulated as
/// `q₀·exp(slope·x₂)` and a constant anisotropy factor.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformShear {
    pub gamma: f64,
    pub u_offset: Vec3,
    pub k: f64,
    pub eps: f64,
    pub nu: f64,
    pub k_slope: f64,
    pub eps_slope: f64,
    pub nu_slope: f64,
    pub aniso: Mat3,
}

impl UniformShear {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            u_offset: Vec3::zeros(),
            k: 1.0,
            eps: 1.0,
            nu: 1.0,
            k_slope: 0.0,
            eps_slope: 0.0,
            nu_slope: 0.0,
            aniso: Mat3::identity(),
        }
    }

    pub fn with_slopes(mut self, k_slope: f64, eps_slope: f64, nu_slope: f64) -> Self {
        self.k_slope = k_slope;
        self.eps_slope = eps_slope;
        self.nu_slope = nu_slope;
        self
    }

    pub fn with_anisotropy(mut self, aniso: Mat3) -> Result<Self> {
        check_aniso_norm(&aniso)?;
        self.aniso = aniso;
        Ok(self)
    }

    pub fn with_levels(mut self, k: f64, eps: f64, nu: f64) -> Result<Self> {
        self.k = k;
        self.eps = eps;
        self.nu = nu;
        FlowState::uniform(Vec3::zeros(), k, eps, nu).validate()?;
        Ok(self)
    }

    fn grad_u(&self) -> Mat3 {
        let mut g = Mat3::zeros();
        g[(0, 1)] = self.gamma;
        g
    }
}

impl FlowProvider for UniformShear {
    fn state_at(&self, x: &Vec3, _t: f64) -> Result<FlowState> {
        let y = x[1];
        let e2 = Vec3::new(0.0, 1.0, 0.0);
        let k = self.k * (self.k_slope * y).exp();
        let eps = self.eps * (self.eps_slope * y).exp();
        let nu = self.nu * (self.nu_slope * y).exp();
        let u_bar = self.u_offset + Vec3::new(self.gamma * y, 0.0, 0.0);
        Ok(FlowState {
            u_bar,
            grad_u: self.grad_u(),
            k,
            eps,
            nu,
            grad_k: self.k_slope * k * e2,
            grad_eps: self.eps_slope * eps * e2,
            grad_nu: self.nu_slope * nu * e2,
            reynolds: None,
            aniso: self.aniso,
            grad_aniso: [Mat3::zeros(); 3],
        })
    }

    fn velocity(&self, x: &Vec3, _t: f64) -> Result<(Vec3, Mat3)> {
        Ok((self.u_offset + Vec3::new(self.gamma * x[1], 0.0, 0.0), self.grad_u()))
    }

    fn is_homogeneous(&self) -> bool {
        self.gamma == 0.0 && self.k_slope == 0.0 && self.eps_slope == 0.0 && self.nu_slope == 0.0
    }
}

/// Solid-body rotation ū = ω × x with constant turbulence quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct SolidRotation {
    pub omega: Vec3,
    pub k: f64,
    pub eps: f64,
    pub nu: f64,
}

impl SolidRotation {
    pub fn new(omega: Vec3) -> Self {
        Self { omega, k: 1.0, eps: 1.0, nu: 1.0 }
    }

    fn grad_u(&self) -> Mat3 {
        self.omega.cross_matrix()
    }
}

impl FlowProvider for SolidRotation {
    fn state_at(&self, x: &Vec3, _t: f64) -> Result<FlowState> {
        let mut s = FlowState::uniform(self.omega.cross(x), self.k, self.eps, self.nu);
        s.grad_u = self.grad_u();
        Ok(s)
    }

    fn velocity(&self, x: &Vec3, _t: f64) -> Result<(Vec3, Mat3)> {
        Ok((self.omega.cross(x), self.grad_u()))
    }
}

type StateFn = dyn Fn(&Vec3, f64) -> FlowState + Send + Sync;

/// User-supplied closed-form flow; the closure must return consistent gradients.
#[derive(Clone)]
pub struct ClosureFlow {
    f: Arc<StateFn>,
}

impl ClosureFlow {
    pub fn new(f: impl Fn(&Vec3, f64) -> FlowState + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }
}

impl fmt::Debug for ClosureFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ClosureFlow")
    }
}

impl FlowProvider for ClosureFlow {
    fn state_at(&self, x: &Vec3, t: f64) -> Result<FlowState> {
        let s = (self.f)(x, t);
        s.validate()?;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Gridded data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DomainPolicy {
    #[default]
    Error,
    Clamp,
}

/// Regular lattice in (x₁, x₂, x₃, t).
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub nodes: [usize; 4],
    pub origin: [f64; 4],
    pub spacing: [f64; 4],
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row index of node `(i, j, l, m)`; the first axis varies fastest.
    pub fn index(&self, i: [usize; 4]) -> usize {
        let n = self.nodes;
        ((i[3] * n[2] + i[2]) * n[1] + i[1]) * n[0] + i[0]
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + self.spacing[axis] * i as f64
    }

    fn validate(&self) -> Result<()> {
        for a in 0..4 {
            if self.nodes[a] == 0 {
                return Err(Error::GridFormat(format!("axis {a} has no nodes")));
            }
            if !(self.spacing[a] > 0.0 && self.spacing[a].is_finite()) {
                return Err(Error::GridFormat(format!("axis {a} spacing must be positive")));
            }
        }
        Ok(())
    }
}

pub const GRID_FIELDS: [&str; 12] = ["u1", "u2", "u3", "k", "eps", "nu", "r11", "r12", "r13", "r22", "r23", "r33"];
const NV: usize = 12;

/// Node values in the canonical field order of [`GRID_FIELDS`]; the Reynolds
/// entries are present only if `has_reynolds`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub spec: GridSpec,
    pub dimensional: bool,
    pub has_reynolds: bool,
    pub values: Vec<[f64; NV]>,
}

impl RawGrid {
    /// Sample a closed-form field on a lattice.
    pub fn from_fn(spec: GridSpec, has_reynolds: bool, f: impl Fn(&Vec3, f64) -> [f64; NV]) -> Self {
        let mut values = vec![[0.0; NV]; spec.len()];
        for m in 0..spec.nodes[3] {
            for l in 0..spec.nodes[2] {
                for j in 0..spec.nodes[1] {
                    for i in 0..spec.nodes[0] {
                        let x = Vec3::new(spec.coord(0, i), spec.coord(1, j), spec.coord(2, l));
                        values[spec.index([i, j, l, m])] = f(&x, spec.coord(3, m));
                    }
                }
            }
        }
        Self { spec, dimensional: false, has_reynolds, values }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .enumerate()
            .filter(|(_, l)| !l.is_empty());
        let bad = |n: usize, msg: &str| Error::GridFormat(format!("line {}: {msg}", n + 1));
        let mut nodes = None;
        let mut origin = None;
        let mut spacing = None;
        let mut fields: Option<Vec<String>> = None;
        let mut dimensional = false;
        let mut saw_format = false;
        for (n, line) in lines.by_ref() {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or("");
            let rest: Vec<&str> = it.collect();
            match key {
                "format" => {
                    if rest != ["turbfield-grid", "1"] {
                        return Err(bad(n, "expected `format turbfield-grid 1`"));
                    }
                    saw_format = true;
                }
                "units" => match rest.as_slice() {
                    ["dimensionless"] => dimensional = false,
                    ["dimensional"] => dimensional = true,
                    _ => return Err(bad(n, "units must be `dimensional` or `dimensionless`")),
                },
                "axes" => {
                    if rest != ["x", "y", "z", "t"] {
                        return Err(bad(n, "axes must be `x y z t`"));
                    }
                }
                "nodes" => nodes = Some(parse_array::<usize>(&rest).ok_or_else(|| bad(n, "nodes needs 4 integers"))?),
                "origin" => origin = Some(parse_array::<f64>(&rest).ok_or_else(|| bad(n, "origin needs 4 numbers"))?),
                "spacing" => spacing = Some(parse_array::<f64>(&rest).ok_or_else(|| bad(n, "spacing needs 4 numbers"))?),
                "fields" => fields = Some(rest.iter().map(|s| s.to_string()).collect()),
                "data" => break,
                _ => return Err(bad(n, &format!("unknown header key `{key}`"))),
            }
        }
        if !saw_format {
            return Err(Error::GridFormat("missing `format turbfield-grid 1` line".into()));
        }
        let spec = GridSpec {
            nodes: nodes.ok_or_else(|| Error::GridFormat("missing `nodes`".into()))?,
            origin: origin.ok_or_else(|| Error::GridFormat("missing `origin`".into()))?,
            spacing: spacing.ok_or_else(|| Error::GridFormat("missing `spacing`".into()))?,
        };
        spec.validate()?;
        let fields = fields.ok_or_else(|| Error::GridFormat("missing `fields`".into()))?;
        let mut column = [usize::MAX; NV];
        for (c, name) in fields.iter().enumerate() {
            let Some(slot) = GRID_FIELDS.iter().position(|f| f == name) else {
                return Err(Error::GridFormat(format!("unknown field `{name}`")));
            };
            if column[slot] != usize::MAX {
                return Err(Error::GridFormat(format!("field `{name}` listed twice")));
            }
            column[slot] = c;
        }
        if column[..6].contains(&usize::MAX) {
            return Err(Error::GridFormat("fields must include u1 u2 u3 k eps nu".into()));
        }
        let n_r = column[6..].iter().filter(|&&c| c != usize::MAX).count();
        if n_r != 0 && n_r != 6 {
            return Err(Error::GridFormat("Reynolds stress needs all of r11 r12 r13 r22 r23 r33".into()));
        }
        let has_reynolds = n_r == 6;
        let mut values = Vec::with_capacity(spec.len());
        for (n, line) in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(n, "non-numeric value"))?;
            if row.len() != fields.len() {
                return Err(bad(n, &format!("expected {} values, found {}", fields.len(), row.len())));
            }
            let mut v = [0.0; NV];
            for (slot, &c) in column.iter().enumerate() {
                if c != usize::MAX {
                    v[slot] = row[c];
                }
            }
            values.push(v);
        }
        if values.len() != spec.len() {
            return Err(Error::GridFormat(format!("expected {} data rows, found {}", spec.len(), values.len())));
        }
        Ok(Self { spec, dimensional, has_reynolds, values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let nf = if self.has_reynolds { NV } else { 6 };
        let mut out = String::new();
        out.push_str("format turbfield-grid 1\n");
        out.push_str(if self.dimensional { "units dimensional\n" } else { "units dimensionless\n" });
        out.push_str("axes x y z t\n");
        out.push_str(&format!("nodes {} {} {} {}\n", s.nodes[0], s.nodes[1], s.nodes[2], s.nodes[3]));
        out.push_str(&format!("origin {:e} {:e} {:e} {:e}\n", s.origin[0], s.origin[1], s.origin[2], s.origin[3]));
        out.push_str(&format!("spacing {:e} {:e} {:e} {:e}\n", s.spacing[0], s.spacing[1], s.spacing[2], s.spacing[3]));
        out.push_str(&format!("fields {}\n", GRID_FIELDS[..nf].join(" ")));
        out.push_str("data\n");
        for v in &self.values {
            let row: Vec<String> = v[..nf].iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

fn parse_array<T: std::str::FromStr + Copy + Default>(s: &[&str]) -> Option<[T; 4]> {
    if s.len() != 4 {
        return None;
    }
    let mut out = [T::default(); 4];
    for (o, v) in out.iter_mut().zip(s) {
        *o = v.parse().ok()?;
    }
    Some(out)
}

/// Convert a dimensional lattice to dimensionless variables and report the
/// characteristic numbers of the scales.
pub fn nondimensionalize(raw: &RawGrid, scales: &ReferenceScales) -> Result<(RawGrid, CharacteristicNumbers)> {
    let u0 = scales.u0();
    let t0 = scales.t0();
    let mut out = raw.clone();
    out.dimensional = false;
    for a in 0..3 {
        out.spec.origin[a] /= scales.x0;
        out.spec.spacing[a] /= scales.x0;
    }
    out.spec.origin[3] /= t0;
    out.spec.spacing[3] /= t0;
    for (idx, v) in out.values.iter_mut().enumerate() {
        for (field, slot) in [("k", 3usize), ("eps", 4), ("nu", 5)] {
            if !(v[slot] > 0.0) {
                return Err(Error::NonPositiveField { field, value: v[slot], index: idx });
            }
        }
        for c in &mut v[..3] {
            *c /= u0;
        }
        v[3] /= scales.k0;
        v[4] /= scales.eps0;
        v[5] /= scales.nu0;
        for c in &mut v[6..] {
            *c /= scales.k0;
        }
    }
    Ok((out, scales.numbers()))
}

/// Interpolating provider over lattice data: multilinear in (x, t), with
/// node gradients from central differences interpolated the same way.
#[derive(Clone, Debug)]
pub struct GriddedFlow {
    spec: GridSpec,
    has_reynolds: bool,
    values: Vec<[f64; NV]>,
    grads: Vec<[[f64; 3]; NV]>,
    policy: DomainPolicy,
    hint: ReferenceHint,
}

impl GriddedFlow {
    pub fn new(raw: RawGrid, policy: DomainPolicy) -> Result<Self> {
        if raw.dimensional {
            return Err(Error::GridFormat("dimensional grid data must be nondimensionalized first".into()));
        }
        raw.spec.validate()?;
        let spec = raw.spec.clone();
        let mut sz = Vec::with_capacity(raw.values.len());
        let mut sx = Vec::with_capacity(raw.values.len());
        let mut st_min = f64::INFINITY;
        for (idx, v) in raw.values.iter().enumerate() {
            for (field, slot) in [("k", 3usize), ("eps", 4), ("nu", 5)] {
                if !(v[slot] > 0.0 && v[slot].is_finite()) {
                    return Err(Error::NonPositiveField { field, value: v[slot], index: idx });
                }
            }
            if raw.has_reynolds {
                anisotropy_from_reynolds(&reynolds_of(v), v[3])?;
            }
            let (k, e, n) = (v[3], v[4], v[5]);
            sz.push(e * n / (k * k));
            sx.push(k.powf(1.5) / e);
            st_min = st_min.min(k / e);
        }
        let hint = ReferenceHint { sigma_z: median(&mut sz), sigma_x: median(&mut sx), sigma_t_min: st_min };
        let grads = node_gradients(&spec, &raw.values);
        Ok(Self { spec, has_reynolds: raw.has_reynolds, values: raw.values, grads, policy, hint })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Cell indices and weights along each axis, or `None` outside the domain.
    fn locate(&self, x: &Vec3, t: f64) -> Option<[(usize, f64); 4]> {
        let p = [x[0], x[1], x[2], t];
        let mut out = [(0usize, 0.0f64); 4];
        for a in 0..4 {
            let n = self.spec.nodes[a];
            let mut u = (p[a] - self.spec.origin[a]) / self.spec.spacing[a];
            if n == 1 {
                out[a] = (0, 0.0);
                continue;
            }
            let top = (n - 1) as f64;
            if !(u >= -1e-9 && u <= top + 1e-9) {
                if self.policy == DomainPolicy::Error || !u.is_finite() {
                    return None;
                }
            }
            u = u.clamp(0.0, top);
            let i = (u.floor() as usize).min(n - 2);
            out[a] = (i, u - i as f64);
        }
        Some(out)
    }

    fn interpolate(&self, loc: &[(usize, f64); 4]) -> ([f64; NV], [[f64; 3]; NV]) {
        let mut v = [0.0; NV];
        let mut g = [[0.0; 3]; NV];
        for corner in 0..16usize {
            let mut w = 1.0;
            let mut idx = [0usize; 4];
            for a in 0..4 {
                let bit = (corner >> a) & 1;
                let (i, f) = loc[a];
                if self.spec.nodes[a] == 1 {
                    if bit == 1 {
                        w = 0.0;
                    }
                    idx[a] = 0;
                } else {
                    idx[a] = i + bit;
                    w *= if bit == 1 { f } else { 1.0 - f };
                }
            }
            if w == 0.0 {
                continue;
            }
            let n = self.spec.index(idx);
            for c in 0..NV {
                v[c] += w * self.values[n][c];
                for d in 0..3 {
                    g[c][d] += w * self.grads[n][c][d];
                }
            }
        }
        (v, g)
    }
}

fn reynolds_of(v: &[f64; NV]) -> Mat3 {
    Mat3::new(v[6], v[7], v[8], v[7], v[9], v[10], v[8], v[10], v[11])
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn node_gradients(spec: &GridSpec, values: &[[f64; NV]]) -> Vec<[[f64; 3]; NV]> {
    let mut grads = vec![[[0.0; 3]; NV]; values.len()];
    let n = spec.nodes;
    for m in 0..n[3] {
        for l in 0..n[2] {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    let here = [i, j, l, m];
                    let id = spec.index(here);
                    for a in 0..3 {
                        if n[a] == 1 {
                            continue;
                        }
                        let (lo, hi) = (here[a].saturating_sub(1), (here[a] + 1).min(n[a] - 1));
                        let mut ilo = here;
                        let mut ihi = here;
                        ilo[a] = lo;
                        ihi[a] = hi;
                        let h = (hi - lo) as f64 * spec.spacing[a];
                        let (vl, vh) = (&values[spec.index(ilo)], &values[spec.index(ihi)]);
                        for c in 0..NV {
                            grads[id][c][a] = (vh[c] - vl[c]) / h;
                        }
                    }
                }
            }
        }
    }
    grads
}

impl FlowProvider for GriddedFlow {
    fn state_at(&self, x: &Vec3, t: f64) -> Result<FlowState> {
        let loc = self.locate(x, t).ok_or(Error::OutOfDomain { x: [x[0], x[1], x[2]], t })?;
        let (v, g) = self.interpolate(&loc);
        let gv = |c: usize| Vec3::new(g[c][0], g[c][1], g[c][2]);
        let grad_u = Mat3::from_rows(&[gv(0).transpose(), gv(1).transpose(), gv(2).transpose()]);
        let mut s = FlowState {
            u_bar: Vec3::new(v[0], v[1], v[2]),
            grad_u,
            k: v[3],
            eps: v[4],
            nu: v[5],
            grad_k: gv(3),
            grad_eps: gv(4),
            grad_nu: gv(5),
            reynolds: None,
            aniso: Mat3::identity(),
            grad_aniso: [Mat3::zeros(); 3],
        };
        if self.has_reynolds {
            let r = reynolds_of(&v);
            let l = anisotropy_from_reynolds(&r, s.k)?;
            for b in 0..3 {
                let dr = Mat3::new(
                    g[6][b], g[7][b], g[8][b], g[7][b], g[9][b], g[10][b], g[8][b], g[10][b], g[11][b],
                );
                // d/dx_b of (15/7)R/k − (3/7)I
                let dm = 15.0 / 7.0 * (dr / s.k - r * (s.grad_k[b] / (s.k * s.k)));
                s.grad_aniso[b] = cholesky_derivative(&l, &dm);
            }
            s.aniso = l;
            s.reynolds = Some(r);
        }
        Ok(s)
    }

    fn velocity(&self, x: &Vec3, t: f64) -> Result<(Vec3, Mat3)> {
        let s = self.state_at(x, t)?;
        Ok((s.u_bar, s.grad_u))
    }

    fn reference_hint(&self) -> Option<ReferenceHint> {
        Some(self.hint)
    }
}
