//! Field realizations: the frequency-domain homogeneous sum, and the
//! time-slice (moving-average) sum used for both homogeneous and
//! inhomogeneous flows, with exact analytic spatial gradients.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowfield::{scaling_at, CharacteristicNumbers, FlowProvider, FlowState, Mat3, ScalingEval, Vec3};
use crate::meanflow::trajectory_fan;
use crate::rng::{complex_gaussian3, rng_from_seed, stream_rng, unit_vector};
use crate::spectrum::{SpectrumFactory, WavenumberSampler};
use crate::temporal::{FrequencySampler, TemporalKernel};

/// P(κ) = I − κ̂⊗κ̂, with P(0) = I.
pub fn projector(k: &Vec3) -> Mat3 {
    let n2 = k.norm_squared();
    if n2 == 0.0 {
        return Mat3::identity();
    }
    Mat3::identity() - k * k.transpose() / n2
}

#[inline]
fn project(khat: &Vec3, v: &Vec3) -> Vec3 {
    v - khat * khat.dot(v)
}

/// ∫_{S²} P(θ)·S·P(θ) dU(θ) by a product Gauss rule (`n` latitude nodes,
/// `2n` longitudes).
pub fn sphere_average(s: &Mat3, n: usize) -> Mat3 {
    let (mu, w) = crate::quad::gauss_legendre(n);
    let m = 2 * n;
    let mut acc = Mat3::zeros();
    for (z, wz) in mu.iter().zip(&w) {
        let r = (1.0 - z * z).sqrt();
        for l in 0..m {
            let phi = 2.0 * std::f64::consts::PI * (l as f64 + 0.5) / m as f64;
            let th = Vec3::new(r * phi.cos(), r * phi.sin(), *z);
            let p = projector(&th);
            acc += p * s * p * (wz / 2.0 / m as f64);
        }
    }
    acc
}

/// Shared model ingredients of every realization.
#[derive(Debug)]
pub struct Model {
    pub spectra: SpectrumFactory,
    pub kernel: TemporalKernel,
    pub numbers: CharacteristicNumbers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    HomogeneousFrequency,
    HomogeneousMovingAverage,
    Inhomogeneous,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::HomogeneousFrequency => "homogeneous-frequency",
            Variant::HomogeneousMovingAverage => "homogeneous-moving-average",
            Variant::Inhomogeneous => "inhomogeneous",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub variant: Variant,
    /// Mode count N of the frequency-domain variant.
    pub modes: usize,
    /// Wave vectors per time slice N_κ.
    pub modes_per_slice: usize,
    /// Slice spacing Δs; default δ·σ_t,min·s_c/16.
    pub slice_spacing: Option<f64>,
    /// Mean-flow RK4 step; default Δs/2.
    pub trajectory_step: Option<f64>,
    /// Proposal parameters (ζ_ref, σ_x,ref); default from the provider's
    /// reference hint or the reference point.
    pub proposal_zeta: Option<f64>,
    pub proposal_sigma_x: Option<f64>,
    pub reference_point: (Vec3, f64),
    /// Slices kept in a realization's cache.
    pub cache_slices: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::HomogeneousFrequency,
            modes: 1024,
            modes_per_slice: 256,
            slice_spacing: None,
            trajectory_step: None,
            proposal_zeta: None,
            proposal_sigma_x: None,
            reference_point: (Vec3::zeros(), 0.0),
            cache_slices: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomogeneousModeSet {
    pub seed: u64,
    pub kappas: Vec<f64>,
    pub thetas: Vec<Vec3>,
    pub omegas: Vec<f64>,
    pub xi_re: Vec<Vec3>,
    pub xi_im: Vec<Vec3>,
}

impl HomogeneousModeSet {
    pub fn len(&self) -> usize {
        self.kappas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappas.is_empty()
    }
}

/// Independent draws κ ~ E, θ ~ U(S²), ω ~ f_t and complex Gaussian ξ.
pub fn draw_homogeneous_modes(
    spectrum: &WavenumberSampler,
    frequencies: &FrequencySampler,
    n: usize,
    seed: u64,
) -> HomogeneousModeSet {
    let mut rng = rng_from_seed(seed);
    let mut m = HomogeneousModeSet {
        seed,
        kappas: Vec::with_capacity(n),
        thetas: Vec::with_capacity(n),
        omegas: Vec::with_capacity(n),
        xi_re: Vec::with_capacity(n),
        xi_im: Vec::with_capacity(n),
    };
    for _ in 0..n {
        m.kappas.push(spectrum.sample(&mut rng));
        m.thetas.push(unit_vector(&mut rng));
        m.omegas.push(frequencies.sample(&mut rng));
        let (re, im) = complex_gaussian3(&mut rng);
        m.xi_re.push(re);
        m.xi_im.push(im);
    }
    m
}

/// One plane wave of the frequency-domain sum with all constant factors folded in.
#[derive(Clone, Copy, Debug)]
struct PlaneWave {
    k: Vec3,
    w: f64,
    b_re: Vec3,
    b_im: Vec3,
}

/// Reference wave-vector density q(κ) = s³ f_x(s‖κ‖; ζ_ref).
#[derive(Clone, Debug)]
pub struct Proposal {
    sampler: Arc<WavenumberSampler>,
    scale: f64,
}

impl Proposal {
    pub fn new(sampler: Arc<WavenumberSampler>, scale: f64) -> Self {
        Self { sampler, scale }
    }

    pub fn zeta(&self) -> f64 {
        self.sampler.model().zeta()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn density(&self, k: &Vec3) -> f64 {
        let s = self.scale;
        s * s * s * self.sampler.model().spatial_density(s * k.norm())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let r = self.sampler.sample_tabulated(rng) / self.scale;
        r * unit_vector(rng)
    }
}

/// Frozen draws of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub khat: Vec<Vec3>,
    pub knorm: Vec<f64>,
    /// √(2/(N_κ q(κ)))
    pub weight: Vec<f64>,
    pub zeta_re: Vec<Vec3>,
    pub zeta_im: Vec<Vec3>,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.knorm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knorm.is_empty()
    }

    pub fn wave_vector(&self, n: usize) -> Vec3 {
        self.knorm[n] * self.khat[n]
    }
}

/// Lazily materialised per-slice draws; slice j depends only on (seed, j).
#[derive(Debug)]
pub struct SliceModeSet {
    pub seed: u64,
    pub spacing: f64,
    pub modes_per_slice: usize,
    pub proposal: Proposal,
    cache: RwLock<HashMap<i64, Arc<Slice>>>,
    cache_limit: usize,
}

impl SliceModeSet {
    pub fn new(proposal: Proposal, spacing: f64, modes_per_slice: usize, seed: u64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) || modes_per_slice == 0 {
            return Err(Error::InvalidParameter(format!(
                "slice spacing {spacing} and modes per slice {modes_per_slice} must be positive"
            )));
        }
        Ok(Self { seed, spacing, modes_per_slice, proposal, cache: RwLock::new(HashMap::new()), cache_limit: 1024 })
    }

    pub fn with_cache_limit(mut self, limit: usize) -> Self {
        self.cache_limit = limit.max(1);
        self
    }

    /// Draws of slice `j`, independent of evaluation order.
    pub fn slice(&self, j: i64) -> Arc<Slice> {
        if let Some(s) = self.cache.read().unwrap().get(&j) {
            return s.clone();
        }
        let s = Arc::new(self.generate(j));
        let mut w = self.cache.write().unwrap();
        if w.len() >= self.cache_limit {
            w.clear();
        }
        w.entry(j).or_insert(s).clone()
    }

    fn generate(&self, j: i64) -> Slice {
        let stream = ((j << 1) ^ (j >> 63)) as u64;
        let mut rng = stream_rng(self.seed, stream);
        let n = self.modes_per_slice;
        let mut s = Slice {
            khat: Vec::with_capacity(n),
            knorm: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
            zeta_re: Vec::with_capacity(n),
            zeta_im: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let k = self.proposal.sample(&mut rng);
            let (re, im) = complex_gaussian3(&mut rng);
            let q = self.proposal.density(&k);
            let r = k.norm();
            s.khat.push(k / r);
            s.knorm.push(r);
            s.weight.push((2.0 / (n as f64 * q)).sqrt());
            s.zeta_re.push(re);
            s.zeta_im.push(im);
        }
        s
    }
}

/// Builds realizations sharing the model, flow data and samplers.
#[derive(Debug, Clone)]
pub struct RealizationFactory {
    model: Arc<Model>,
    flow: Arc<dyn FlowProvider>,
    cfg: SamplerConfig,
    wave: Option<Arc<WavenumberSampler>>,
    freq: Option<Arc<FrequencySampler>>,
    proposal: Option<Proposal>,
    spacing: f64,
    traj_step: f64,
    homogeneous_state: Option<FlowState>,
}

impl RealizationFactory {
    pub fn new(model: Arc<Model>, flow: Arc<dyn FlowProvider>, cfg: SamplerConfig) -> Result<Self> {
        let (x_ref, t_ref) = cfg.reference_point;
        let ref_state = flow.state_at(&x_ref, t_ref)?;
        ref_state.validate()?;
        let ref_sc = scaling_at(&ref_state);
        let z = model.numbers.z;
        let delta = model.numbers.delta;
        let mut f = Self {
            model: model.clone(),
            flow: flow.clone(),
            cfg: cfg.clone(),
            wave: None,
            freq: None,
            proposal: None,
            spacing: 0.0,
            traj_step: 0.0,
            homogeneous_state: None,
        };
        if cfg.variant != Variant::Inhomogeneous {
            if !flow.is_homogeneous() {
                return Err(Error::InvalidParameter(format!(
                    "the {} sampler needs homogeneous flow data",
                    cfg.variant.name()
                )));
            }
            f.homogeneous_state = Some(ref_state.clone());
        }
        match cfg.variant {
            Variant::HomogeneousFrequency => {
                if cfg.modes == 0 {
                    return Err(Error::InvalidParameter("mode count must be positive".into()));
                }
                let zeta = ref_sc.sigma_z * z;
                f.wave = Some(model.spectra.sampler(zeta).map_err(|e| local_zeta(e, &x_ref, t_ref))?);
                f.freq = Some(Arc::new(FrequencySampler::new(&model.kernel)));
            }
            Variant::HomogeneousMovingAverage | Variant::Inhomogeneous => {
                let hint = flow.reference_hint();
                let zeta_ref = cfg.proposal_zeta.unwrap_or(z * hint.map_or(ref_sc.sigma_z, |h| h.sigma_z));
                let scale = cfg.proposal_sigma_x.unwrap_or(hint.map_or(ref_sc.sigma_x, |h| h.sigma_x));
                let st_min = hint.map_or(ref_sc.sigma_t, |h| h.sigma_t_min);
                let sampler = model.spectra.sampler(zeta_ref)?;
                f.proposal = Some(Proposal::new(sampler, scale));
                f.spacing = cfg.slice_spacing.unwrap_or(delta * st_min * model.kernel.s_c / 16.0);
                if !(f.spacing > 0.0) {
                    return Err(Error::InvalidParameter(format!("slice spacing {} must be positive", f.spacing)));
                }
                f.traj_step = cfg.trajectory_step.unwrap_or(0.5 * f.spacing);
            }
        }
        Ok(f)
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn flow(&self) -> &Arc<dyn FlowProvider> {
        &self.flow
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Δs of the slice variants (0 for the frequency-domain variant).
    pub fn slice_spacing(&self) -> f64 {
        self.spacing
    }

    pub fn trajectory_step(&self) -> f64 {
        self.traj_step
    }

    pub fn realization(&self, seed: u64) -> Result<FieldRealization> {
        let kind = match self.cfg.variant {
            Variant::HomogeneousFrequency => {
                let state = self.homogeneous_state.clone().expect("homogeneous state");
                let modes = draw_homogeneous_modes(
                    self.wave.as_ref().unwrap(),
                    self.freq.as_ref().unwrap(),
                    self.cfg.modes,
                    seed,
                );
                let waves = prepare_waves(&modes, &state, &self.model);
                Kind::Frequency { state, modes, waves }
            }
            _ => {
                let slices = SliceModeSet::new(
                    self.proposal.clone().unwrap(),
                    self.spacing,
                    self.cfg.modes_per_slice,
                    seed,
                )?
                .with_cache_limit(self.cfg.cache_slices);
                Kind::Slices { state: self.homogeneous_state.clone(), slices, traj_step: self.traj_step }
            }
        };
        Ok(FieldRealization { model: self.model.clone(), flow: self.flow.clone(), variant: self.cfg.variant, kind })
    }
}

fn local_zeta(e: Error, x: &Vec3, t: f64) -> Error {
    match e {
        Error::ZetaOutOfRange { zeta, zeta_crit } => Error::UnsolvableZeta { zeta, zeta_crit, x: [x[0], x[1], x[2]], t },
        other => other,
    }
}

fn prepare_waves(m: &HomogeneousModeSet, state: &FlowState, model: &Model) -> Vec<PlaneWave> {
    let sc = scaling_at(state);
    let delta = model.numbers.delta;
    let amp = sc.sigma_u * (2.0 / m.len() as f64).sqrt();
    (0..m.len())
        .map(|n| {
            let th = m.thetas[n];
            PlaneWave {
                k: m.kappas[n] / (sc.sigma_x * delta) * th,
                w: m.omegas[n] / (sc.sigma_t * delta),
                b_re: amp * project(&th, &(state.aniso * m.xi_re[n])),
                b_im: amp * project(&th, &(state.aniso * m.xi_im[n])),
            }
        })
        .collect()
}

#[derive(Debug)]
enum Kind {
    Frequency {
        state: FlowState,
        modes: HomogeneousModeSet,
        waves: Vec<PlaneWave>,
    },
    Slices {
        /// Present for the homogeneous moving-average variant.
        state: Option<FlowState>,
        slices: SliceModeSet,
        traj_step: f64,
    },
}

/// One frozen realization of the velocity fluctuation field.
#[derive(Debug)]
pub struct FieldRealization {
    model: Arc<Model>,
    flow: Arc<dyn FlowProvider>,
    variant: Variant,
    kind: Kind,
}

impl FieldRealization {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn numbers(&self) -> CharacteristicNumbers {
        self.model.numbers
    }

    pub fn flow(&self) -> &Arc<dyn FlowProvider> {
        &self.flow
    }

    pub fn homogeneous_modes(&self) -> Option<&HomogeneousModeSet> {
        match &self.kind {
            Kind::Frequency { modes, .. } => Some(modes),
            _ => None,
        }
    }

    pub fn slice_modes(&self) -> Option<&SliceModeSet> {
        match &self.kind {
            Kind::Slices { slices, .. } => Some(slices),
            _ => None,
        }
    }

    /// Flow state underlying the realization at (x, t).
    pub fn flow_state(&self, x: &Vec3, t: f64) -> Result<FlowState> {
        match &self.kind {
            Kind::Frequency { state, .. } => Ok(state.clone()),
            Kind::Slices { state: Some(s), .. } => Ok(s.clone()),
            Kind::Slices { .. } => self.flow.state_at(x, t),
        }
    }

    /// Mean velocity used for advection at (x, t).
    pub fn mean_velocity(&self, x: &Vec3, t: f64) -> Result<Vec3> {
        Ok(self.flow_state(x, t)?.u_bar)
    }

    pub fn velocity(&self, x: &Vec3, t: f64) -> Result<Vec3> {
        Ok(self.evaluate(x, t, false)?.0)
    }

    /// u′ and its spatial gradient `J[(i, j)] = ∂u′_i/∂x_j`.
    pub fn velocity_gradient(&self, x: &Vec3, t: f64) -> Result<(Vec3, Mat3)> {
        self.evaluate(x, t, true)
    }

    pub fn eval_homogeneous(&self, x: &Vec3, t: f64) -> Result<Vec3> {
        self.expect(Variant::HomogeneousFrequency)?;
        self.velocity(x, t)
    }

    pub fn eval_homogeneous_ma(&self, x: &Vec3, t: f64) -> Result<Vec3> {
        self.expect(Variant::HomogeneousMovingAverage)?;
        self.velocity(x, t)
    }

    pub fn eval_inhomogeneous(&self, x: &Vec3, t: f64) -> Result<Vec3> {
        self.expect(Variant::Inhomogeneous)?;
        self.velocity(x, t)
    }

    pub fn eval_gradient(&self, x: &Vec3, t: f64) -> Result<Mat3> {
        Ok(self.velocity_gradient(x, t)?.1)
    }

    fn expect(&self, v: Variant) -> Result<()> {
        if self.variant == v {
            Ok(())
        } else {
            Err(Error::VariantMismatch { expected: v.name() })
        }
    }

    fn evaluate(&self, x: &Vec3, t: f64, grad: bool) -> Result<(Vec3, Mat3)> {
        match &self.kind {
            Kind::Frequency { state, waves, .. } => Ok(eval_waves(waves, &(x - t * state.u_bar), t, grad)),
            Kind::Slices { state, slices, traj_step } => {
                let st = match state {
                    Some(s) => s.clone(),
                    None => self.flow.state_at(x, t)?,
                };
                self.eval_slices(self.flow.as_ref(), state.is_some(), &st, slices, *traj_step, x, t, grad)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_slices(
        &self,
        flow: &dyn FlowProvider,
        homogeneous: bool,
        st: &FlowState,
        slices: &SliceModeSet,
        traj_step: f64,
        x: &Vec3,
        t: f64,
        grad: bool,
    ) -> Result<(Vec3, Mat3)> {
        let model = &self.model;
        let delta = model.numbers.delta;
        let z = model.numbers.z;
        let sc = scaling_at(st);
        let zeta = sc.sigma_z * z;
        let spec = model.spectra.model(zeta).map_err(|e| local_zeta(e, x, t))?;
        let dst = delta * sc.sigma_t;
        let half = dst * model.kernel.s_c;
        let ds = slices.spacing;
        let j0 = ((t - half) / ds).ceil() as i64;
        let j1 = ((t + half) / ds).floor() as i64;
        if j1 < j0 {
            return Ok((Vec3::zeros(), Mat3::zeros()));
        }
        let times: Vec<f64> = (j0..=j1).map(|j| j as f64 * ds).collect();
        let paths: Vec<(Vec3, Mat3)> = if homogeneous {
            times.iter().map(|&s| (x + (s - t) * st.u_bar, Mat3::identity())).collect()
        } else {
            trajectory_fan(flow, x, t, &times, traj_step)?
        };
        let ctx = SliceContext::new(st, &sc, zeta, delta, z, grad);
        let sqrt_ds = ds.sqrt();
        let mut u = Vec3::zeros();
        let mut jac = Mat3::zeros();
        for (idx, j) in (j0..=j1).enumerate() {
            let tau = t - times[idx];
            let arg = tau / dst;
            let eta = model.kernel.eta(arg);
            let eta_p = model.kernel.eta_prime(arg);
            if eta == 0.0 && eta_p == 0.0 {
                continue;
            }
            let beta = eta / dst.sqrt();
            let w = beta * sqrt_ds;
            let grad_w = if grad {
                -(sc.grad_sigma_t / sc.sigma_t) * (beta / 2.0 + tau / dst.powf(1.5) * eta_p) * sqrt_ds
            } else {
                Vec3::zeros()
            };
            let slice = slices.slice(j);
            let (phi, g) = &paths[idx];
            ctx.accumulate(&spec, &slice, phi, g, w, &grad_w, &mut u, &mut jac);
        }
        Ok((u, jac))
    }
}

fn eval_waves(waves: &[PlaneWave], y: &Vec3, t: f64, grad: bool) -> (Vec3, Mat3) {
    let mut u = Vec3::zeros();
    let mut jac = Mat3::zeros();
    for pw in waves {
        let (s, c) = (pw.k.dot(y) + pw.w * t).sin_cos();
        u += c * pw.b_re - s * pw.b_im;
        if grad {
            jac += (-s * pw.b_re - c * pw.b_im) * pw.k.transpose();
        }
    }
    (u, jac)
}

/// Point-dependent factors of the slice sum.
struct SliceContext<'a> {
    st: &'a FlowState,
    sc: &'a ScalingEval,
    delta: f64,
    z: f64,
    grad: bool,
    pre_f: f64,
    grad_l: bool,
}

impl<'a> SliceContext<'a> {
    fn new(st: &'a FlowState, sc: &'a ScalingEval, _zeta: f64, delta: f64, z: f64, grad: bool) -> Self {
        let grad_l = grad && st.grad_aniso.iter().any(|m| m.amax() != 0.0);
        Self { st, sc, delta, z, grad, pre_f: sc.sigma_x.powf(1.5), grad_l }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn accumulate(
        &self,
        spec: &crate::spectrum::SpectrumModel,
        slice: &Slice,
        phi: &Vec3,
        g: &Mat3,
        w: f64,
        grad_w: &Vec3,
        u: &mut Vec3,
        jac: &mut Mat3,
    ) {
        let sc = self.sc;
        let l = &self.st.aniso;
        let inv_delta = 1.0 / self.delta;
        let four_pi = 4.0 * std::f64::consts::PI;
        for n in 0..slice.len() {
            let khat = slice.khat[n];
            let rho = slice.knorm[n];
            let kx = sc.sigma_x * rho;
            let psi = inv_delta * rho * khat.dot(phi);
            let (s, c) = psi.sin_cos();
            let zr = slice.zeta_re[n];
            let zi = slice.zeta_im[n];
            let re = c * zr - s * zi;
            if !self.grad {
                let e = spec.energy(kx);
                if e <= 0.0 {
                    continue;
                }
                let f = self.pre_f * (e / (four_pi * kx * kx)).sqrt();
                let a = w * slice.weight[n] * f;
                *u += (a * sc.sigma_u) * project(&khat, &(l * re));
                continue;
            }
            let ev = spec.energy_with_derivatives(kx);
            if ev.e <= 0.0 {
                continue;
            }
            let f = self.pre_f * (ev.e / (four_pi * kx * kx)).sqrt();
            let cw = slice.weight[n] * f;
            let a = w * cw;
            let v = project(&khat, &(l * re));
            *u += (a * sc.sigma_u) * v;
            // ∇ ln 𝕗 through σ_x and σ_z
            let dlnf_dk = ev.de_dkappa / ev.e - 2.0 / kx;
            let grad_lnf = (1.5 / sc.sigma_x + 0.5 * dlnf_dk * rho) * sc.grad_sigma_x
                + (0.5 * ev.de_dzeta / ev.e * self.z) * sc.grad_sigma_z;
            let grad_a = cw * (grad_w + w * grad_lnf);
            *jac += (sc.sigma_u * v) * grad_a.transpose() + (a * v) * sc.grad_sigma_u.transpose();
            let im = s * zr + c * zi;
            let vi = project(&khat, &(l * im));
            let grad_psi = (inv_delta * rho) * (g.transpose() * khat);
            *jac -= (a * sc.sigma_u * vi) * grad_psi.transpose();
            if self.grad_l {
                for b in 0..3 {
                    let col = project(&khat, &(self.st.grad_aniso[b] * re)) * (a * sc.sigma_u);
                    jac.column_mut(b).add_assign(&col);
                }
            }
        }
    }
}

use std::ops::AddAssign;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{ConstantFlow, UniformShear};
    use crate::spectrum::derived_constants;

    fn model(z: f64, delta: f64) -> Arc<Model> {
        Arc::new(Model {
            spectra: SpectrumFactory::new(derived_constants()).unwrap(),
            kernel: TemporalKernel::default(),
            numbers: CharacteristicNumbers::new(z, delta).unwrap(),
        })
    }

    #[test]
    fn projector_laws() {
        let k = Vec3::new(0.3, -1.2, 0.5);
        let p = projector(&k);
        assert!((p * k).amax() < 1e-15);
        assert!((p.trace() - 2.0).abs() < 1e-15);
        assert_eq!(projector(&Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn sphere_average_identity() {
        let s = Mat3::new(1.0, 0.2, -0.3, 0.2, 0.5, 0.1, -0.3, 0.1, 2.0);
        let avg = sphere_average(&s, 8);
        let expect = 7.0 / 15.0 * s + s.trace() / 15.0 * Mat3::identity();
        assert!((avg - expect).amax() < 1e-14);
        assert!((sphere_average(&Mat3::identity(), 8) - 2.0 / 3.0 * Mat3::identity()).amax() < 1e-14);
    }

    #[test]
    fn mode_sets_are_reproducible() {
        let m = model(1e-3, 0.1);
        let flow = Arc::new(ConstantFlow::new(Vec3::zeros(), 1.0, 1.0, 1.0).unwrap());
        let f = RealizationFactory::new(m, flow, SamplerConfig { modes: 64, ..Default::default() }).unwrap();
        let a = f.realization(9).unwrap();
        let b = f.realization(9).unwrap();
        assert_eq!(a.homogeneous_modes(), b.homogeneous_modes());
        let x = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(a.velocity(&x, 0.4).unwrap(), b.velocity(&x, 0.4).unwrap());
        for th in &a.homogeneous_modes().unwrap().thetas {
            assert!((th.norm() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(a.eval_inhomogeneous(&x, 0.0), Err(Error::VariantMismatch { .. })));
    }

    #[test]
    fn slices_are_order_independent() {
        let m = model(1e-3, 0.1);
        let flow = Arc::new(ConstantFlow::new(Vec3::zeros(), 1.0, 1.0, 1.0).unwrap());
        let cfg = SamplerConfig { variant: Variant::HomogeneousMovingAverage, modes_per_slice: 16, ..Default::default() };
        let f = RealizationFactory::new(m, flow, cfg).unwrap();
        let a = f.realization(3).unwrap();
        let b = f.realization(3).unwrap();
        let sa = a.slice_modes().unwrap();
        let sb = b.slice_modes().unwrap();
        let first = sa.slice(5);
        let _ = sb.slice(-2);
        assert_eq!(*first, *sb.slice(5));
        assert_eq!(*first, *sa.slice(5));
        assert_ne!(*sa.slice(4), *first);
    }

    #[test]
    fn compact_support_in_time() {
        let m = model(1e-3, 0.1);
        let flow = Arc::new(ConstantFlow::new(Vec3::zeros(), 1.0, 1.0, 1.0).unwrap());
        let cfg = SamplerConfig { variant: Variant::HomogeneousMovingAverage, modes_per_slice: 8, ..Default::default() };
        let f = RealizationFactory::new(m.clone(), flow, cfg).unwrap();
        let r = f.realization(1).unwrap();
        let expected_slices = 2.0 * 0.1 * m.kernel.s_c / f.slice_spacing();
        assert!(expected_slices >= 31.9, "{expected_slices}");
        assert_ne!(r.velocity(&Vec3::zeros(), 0.0).unwrap(), Vec3::zeros());
    }

    fn relative_fd_error(r: &FieldRealization, x: &Vec3, t: f64, h: f64) -> f64 {
        let (_, j) = r.velocity_gradient(x, t).unwrap();
        let mut fd = Mat3::zeros();
        for b in 0..3 {
            let mut e = Vec3::zeros();
            e[b] = h;
            let d = (-r.velocity(&(x + 2.0 * e), t).unwrap() + 8.0 * r.velocity(&(x + e), t).unwrap()
                - 8.0 * r.velocity(&(x - e), t).unwrap()
                + r.velocity(&(x - 2.0 * e), t).unwrap())
                / (12.0 * h);
            fd.set_column(b, &d);
        }
        (fd - j).norm() / j.norm()
    }

    #[test]
    fn frequency_gradient_matches_finite_differences() {
        let m = model(1e-2, 0.5);
        let flow = Arc::new(ConstantFlow::new(Vec3::new(0.5, 0.0, -0.2), 1.3, 0.8, 1.1).unwrap());
        let f = RealizationFactory::new(m, flow, SamplerConfig { modes: 128, ..Default::default() }).unwrap();
        let r = f.realization(17).unwrap();
        let err = relative_fd_error(&r, &Vec3::new(0.3, -0.1, 0.7), 0.2, 1e-4);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn inhomogeneous_gradient_matches_finite_differences() {
        let m = model(1e-2, 0.5);
        let l = Mat3::from_diagonal(&Vec3::new((12.0f64 / 7.0).sqrt(), 1.0, (2.0f64 / 7.0).sqrt()));
        let flow = Arc::new(UniformShear::new(0.8).with_slopes(0.3, -0.2, 0.1).with_anisotropy(l).unwrap());
        let cfg = SamplerConfig { variant: Variant::Inhomogeneous, modes_per_slice: 16, ..Default::default() };
        let f = RealizationFactory::new(m, flow, cfg).unwrap();
        let r = f.realization(4).unwrap();
        let err = relative_fd_error(&r, &Vec3::new(0.2, 0.4, -0.3), 0.1, 1e-4);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn unsolvable_local_zeta_is_reported() {
        let m = model(0.1, 0.5);
        let flow = Arc::new(UniformShear::new(0.0).with_slopes(0.0, 2.0, 0.0));
        let cfg = SamplerConfig { variant: Variant::Inhomogeneous, modes_per_slice: 4, ..Default::default() };
        let f = RealizationFactory::new(m, flow, cfg).unwrap();
        let r = f.realization(1).unwrap();
        assert!(matches!(r.velocity(&Vec3::new(0.0, 1.0, 0.0), 0.0), Err(Error::UnsolvableZeta { .. })));
    }
}
