//! Monte Carlo and space-time-average estimators with standard errors.
//!
//! Ensembles run one realization per seed, seeds derived from a master seed
//! by index. Samples are gathered in index order and reduced sequentially,
//! so reports are bit-identical for any thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::{scaling_at, FlowProvider, FlowState, Mat3, Vec3};
use crate::meanflow::trajectory_fan;
use crate::par::{map_range, Execution};
use crate::quad;
use crate::rng::derive_seed;
use crate::sampler::{FieldRealization, Model, RealizationFactory};
use crate::spectrum::SpectrumModel;

/// Relative floor on standard errors of exactly-vanishing quantities, so
/// that rounding noise does not produce spurious z-scores.
pub const SE_FLOOR: f64 = 1e-10;

/// One estimator result; tensors are stored row-major in `estimate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_score: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EstimatorReport {
    /// Sample means and standard errors of the columns of `samples`.
    pub fn from_samples(name: &str, shape: &[usize], samples: &[Vec<f64>]) -> Self {
        let n = samples.len();
        let dim = shape.iter().product::<usize>().max(1);
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let se = var
            .iter()
            .map(|v| if n > 1 { (v / (n as f64 - 1.0) / n as f64).sqrt() } else { f64::NAN })
            .collect();
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            estimate: mean,
            std_error: se,
            n_samples: n,
            target: None,
            z_score: None,
            passed: None,
            note: None,
        }
    }

    pub fn with_target(mut self, target: Vec<f64>) -> Self {
        assert_eq!(target.len(), self.estimate.len());
        self.z_score = Some(
            self.estimate
                .iter()
                .zip(&self.std_error)
                .zip(&target)
                .map(|((e, se), t)| if *se > 0.0 { (e - t) / se } else if e == t { 0.0 } else { f64::INFINITY })
                .collect(),
        );
        self.target = Some(target);
        self
    }

    /// Raise every standard error to at least `floor`.
    pub fn with_se_floor(mut self, floor: f64) -> Self {
        self.std_error.iter_mut().for_each(|s| *s = s.max(floor));
        if let Some(t) = self.target.take() {
            self = self.with_target(t);
        }
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn scalar(&self) -> f64 {
        self.estimate[0]
    }

    pub fn max_abs_z(&self) -> Option<f64> {
        self.z_score.as_ref().map(|z| z.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
    }

    pub fn tensor(&self) -> Mat3 {
        Mat3::from_row_slice(&self.estimate)
    }

    pub fn tensor_se(&self) -> Mat3 {
        Mat3::from_row_slice(&self.std_error)
    }
}

pub fn mat_row_major(m: &Mat3) -> Vec<f64> {
    (0..3).flat_map(|i| (0..3).map(move |j| m[(i, j)])).collect()
}

/// Seeds, count and execution mode of an ensemble run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ensemble {
    pub master_seed: u64,
    pub n_seeds: usize,
    pub exec: Execution,
}

impl Ensemble {
    pub fn new(master_seed: u64, n_seeds: usize) -> Self {
        Self { master_seed, n_seeds, exec: Execution::default() }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn seed(&self, i: usize) -> u64 {
        derive_seed(self.master_seed, i as u64)
    }

    fn check(&self) -> Result<()> {
        if self.n_seeds < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 seeds, got {}", self.n_seeds)));
        }
        Ok(())
    }
}

/// Per-seed samples from fresh realizations, in seed order.
pub fn collect_samples<F>(f: &RealizationFactory, ens: &Ensemble, sample: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&FieldRealization) -> Result<Vec<f64>> + Sync + Send,
{
    ens.check()?;
    map_range(ens.exec, ens.n_seeds, |i| {
        let r = f.realization(ens.seed(i))?;
        sample(&r)
    })
    .into_iter()
    .collect()
}

/// E‖u′‖²/2 at (x, t).
pub fn kinetic_energy(state: &FlowState) -> f64 {
    state.k
}

/// k[(7/15)LLᵀ + (1/5)I].
pub fn one_point_tensor_target(state: &FlowState) -> Mat3 {
    state.one_point_tensor()
}

/// Mean vector, energy and one-point tensor at (x, t).
pub fn one_point_stats(f: &RealizationFactory, x: &Vec3, t: f64, ens: &Ensemble) -> Result<Vec<EstimatorReport>> {
    let samples = collect_samples(f, ens, |r| {
        let u = r.velocity(x, t)?;
        let mut v = vec![u[0], u[1], u[2], 0.5 * u.norm_squared()];
        v.extend(mat_row_major(&(u * u.transpose())));
        Ok(v)
    })?;
    let state = f.flow().state_at(x, t)?;
    let pick = |lo: usize, hi: usize| -> Vec<Vec<f64>> { samples.iter().map(|s| s[lo..hi].to_vec()).collect() };
    Ok(vec![
        EstimatorReport::from_samples("mean", &[3], &pick(0, 3)).with_target(vec![0.0; 3]),
        EstimatorReport::from_samples("energy", &[1], &pick(3, 4)).with_target(vec![kinetic_energy(&state)]),
        EstimatorReport::from_samples("tensor", &[3, 3], &pick(4, 13))
            .with_target(mat_row_major(&one_point_tensor_target(&state))),
    ])
}

/// (δ²z/2)‖J + Jᵀ‖².
pub fn dissipation_sample(j: &Mat3, delta: f64, z: f64) -> f64 {
    0.5 * delta * delta * z * (j + j.transpose()).norm_squared()
}

/// Dissipation and divergence reports from one ensemble pass.
pub fn gradient_stats(
    f: &RealizationFactory,
    x: &Vec3,
    t: f64,
    ens: &Ensemble,
) -> Result<(EstimatorReport, EstimatorReport)> {
    let n = f.model().numbers;
    let samples = collect_samples(f, ens, |r| {
        let (_, j) = r.velocity_gradient(x, t)?;
        let d = j.trace() * n.delta;
        Ok(vec![dissipation_sample(&j, n.delta, n.z), d * d, n.delta * n.delta * j.norm_squared()])
    })?;
    let state = f.flow().state_at(x, t)?;
    let col = |c: usize| -> Vec<Vec<f64>> { samples.iter().map(|s| vec![s[c]]).collect() };
    let diss = EstimatorReport::from_samples("dissipation", &[1], &col(0)).with_target(vec![state.eps / state.nu]);
    let scale = EstimatorReport::from_samples("", &[1], &col(2)).scalar();
    let div = EstimatorReport::from_samples("divergence", &[1], &col(1))
        .with_target(vec![0.0])
        .with_se_floor(SE_FLOOR * scale);
    Ok((diss, div))
}

pub fn dissipation_stats(f: &RealizationFactory, x: &Vec3, t: f64, ens: &Ensemble) -> Result<EstimatorReport> {
    Ok(gradient_stats(f, x, t, ens)?.0)
}

pub fn divergence_stats(f: &RealizationFactory, x: &Vec3, t: f64, ens: &Ensemble) -> Result<EstimatorReport> {
    Ok(gradient_stats(f, x, t, ens)?.1)
}

/// E[u′(x,t) ⊗ u′(x̃,t̃)], optionally against a target tensor.
pub fn two_point_cov(
    f: &RealizationFactory,
    a: (&Vec3, f64),
    b: (&Vec3, f64),
    ens: &Ensemble,
    target: Option<Mat3>,
) -> Result<EstimatorReport> {
    let samples = collect_samples(f, ens, |r| {
        let u = r.velocity(a.0, a.1)?;
        let v = r.velocity(b.0, b.1)?;
        Ok(mat_row_major(&(u * v.transpose())))
    })?;
    let rep = EstimatorReport::from_samples("two-point", &[3, 3], &samples);
    Ok(match target {
        Some(m) => rep.with_target(mat_row_major(&m)),
        None => rep,
    })
}

/// E[u′(x,t) ⊗ u′(x̃ᵢ,t̃ᵢ)] for several second points, all from the same
/// realizations.
pub fn two_point_covs(
    f: &RealizationFactory,
    a: (&Vec3, f64),
    others: &[(Vec3, f64)],
    ens: &Ensemble,
) -> Result<Vec<EstimatorReport>> {
    let samples = collect_samples(f, ens, |r| {
        let u = r.velocity(a.0, a.1)?;
        let mut out = Vec::with_capacity(9 * others.len());
        for (y, t) in others {
            out.extend(mat_row_major(&(u * r.velocity(y, *t)?.transpose())));
        }
        Ok(out)
    })?;
    Ok((0..others.len())
        .map(|j| {
            let part: Vec<Vec<f64>> = samples.iter().map(|s| s[9 * j..9 * j + 9].to_vec()).collect();
            EstimatorReport::from_samples("two-point", &[3, 3], &part)
        })
        .collect())
}

fn radial_points(m: &SpectrumModel, scale: f64) -> Vec<f64> {
    let (k1, k2) = (m.kappa1() / scale, m.kappa2() / scale);
    vec![0.0, 0.5 * k1, k1, k2, 4.0 * k2, 16.0 * k2, 64.0 * k2]
}

/// ∫₀^∞ E(κ) cos(κ r) dκ.
pub fn spectrum_cosine_transform(m: &SpectrumModel, r: f64) -> f64 {
    let mut pts = radial_points(m, 1.0);
    add_oscillation_points(&mut pts, r);
    quad::integrate_pieces(|k| m.energy(k) * (k * r).cos(), &pts, 1e-13, 1e-11)
}

/// Extra breakpoints every few periods of cos(κ r) inside the energetic range.
fn add_oscillation_points(pts: &mut Vec<f64>, r: f64) {
    let r = r.abs();
    if r == 0.0 {
        return;
    }
    let upper = pts[pts.len() - 2];
    let period = 2.0 * std::f64::consts::PI / r;
    let n = ((upper / (4.0 * period)).ceil() as usize).min(4096);
    for i in 1..n {
        pts.push(i as f64 * 4.0 * period);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
}

/// Isotropic spatial correlation C_x(y) = ∫E(κ)[(j₀ − j₁/x)I − (j₀ − 3j₁/x)ŷŷᵀ]dκ, x = κ‖y‖.
pub fn isotropic_spatial_correlation(m: &SpectrumModel, y: &Vec3) -> Mat3 {
    let r = y.norm();
    if r == 0.0 {
        return 2.0 / 3.0 * Mat3::identity();
    }
    let j0 = |x: f64| if x < 1e-3 { 1.0 - x * x / 6.0 } else { x.sin() / x };
    let j1x = |x: f64| {
        if x < 1e-2 {
            1.0 / 3.0 - x * x / 30.0 + x.powi(4) / 840.0
        } else {
            (x.sin() - x * x.cos()) / (x * x * x)
        }
    };
    let mut pts = radial_points(m, 1.0);
    add_oscillation_points(&mut pts, r);
    let a = quad::integrate_pieces(|k| m.energy(k) * (j0(k * r) - j1x(k * r)), &pts, 1e-13, 1e-11);
    let b = quad::integrate_pieces(|k| m.energy(k) * (j0(k * r) - 3.0 * j1x(k * r)), &pts, 1e-13, 1e-11);
    let yh = y / r;
    a * Mat3::identity() - b * (yh * yh.transpose())
}

/// Product Gauss nodes on S² with weights summing to one.
pub fn sphere_nodes(n: usize) -> Vec<(Vec3, f64)> {
    let (mu, w) = quad::gauss_legendre(n);
    let m = 2 * n;
    let mut out = Vec::with_capacity(n * m);
    for (z, wz) in mu.iter().zip(&w) {
        let r = (1.0 - z * z).sqrt();
        for l in 0..m {
            let phi = 2.0 * std::f64::consts::PI * (l as f64 + 0.5) / m as f64;
            out.push((Vec3::new(r * phi.cos(), r * phi.sin(), *z), wz / 2.0 / m as f64));
        }
    }
    out
}

/// Spatial correlation with anisotropy S = LLᵀ: ∫₀^∞ E(κ) ⨏_{S²} cos(κθ·y) P(θ)SP(θ) dU dκ.
pub fn spatial_correlation(m: &SpectrumModel, y: &Vec3, s: &Mat3) -> Mat3 {
    projected_wave_integral(|k| m.energy(k), &radial_points(m, 1.0), y, s)
}

/// cₙ(r) = ½∫₋₁¹ cos(rx) xⁿ dx for n = 0, 2, 4.
fn cosine_moments(r: f64) -> [f64; 3] {
    let r = r.abs();
    if r < 2.0 {
        let r2 = r * r;
        let mut out = [0.0; 3];
        for (o, n) in out.iter_mut().zip([0.0, 2.0, 4.0]) {
            let mut term = 1.0;
            for k in 0..30 {
                let k = k as f64;
                *o += term / (n + 2.0 * k + 1.0);
                term *= -r2 / ((2.0 * k + 1.0) * (2.0 * k + 2.0));
            }
        }
        return out;
    }
    let (s, c) = r.sin_cos();
    let (r2, r3) = (r * r, r * r * r);
    [
        s / r,
        s / r + 2.0 * c / r2 - 2.0 * s / r3,
        s / r + 4.0 * c / r2 - 12.0 * s / r3 - 24.0 * c / (r2 * r2) + 24.0 * s / (r2 * r3),
    ]
}

/// Coefficients k of ⨏_{S²} cos(rθ·e) P(θ)MP(θ) dU =
/// k₀M + k₁(eeᵀM + Meeᵀ) + k₂(I trM + M + Mᵀ)
/// + k₃(I eᵀMe + Meeᵀ + Mᵀeeᵀ + eeᵀMᵀ + eeᵀM + eeᵀ trM) + k₄eeᵀ eᵀMe, ‖e‖ = 1.
fn projected_wave_coefficients(r: f64) -> [f64; 5] {
    let [c0, c2, c4] = cosine_moments(r);
    let g = (c0 - 2.0 * c2 + c4) / 8.0;
    let l = (c2 - c4) / 2.0 - g;
    [c2, (c0 - 3.0 * c2) / 2.0, g, l, c4 - 3.0 * g - 6.0 * l]
}

fn assemble_projected(k: &[f64; 5], e: &Vec3, m: &Mat3) -> Mat3 {
    let ee = e * e.transpose();
    let i = Mat3::identity();
    let tr = m.trace();
    let eme = e.dot(&(m * e));
    let (me, mte) = (m * e, m.transpose() * e);
    k[0] * m
        + k[1] * (ee * m + m * ee)
        + k[2] * (tr * i + m + m.transpose())
        + k[3] * (eme * i + me * e.transpose() + mte * e.transpose() + e * me.transpose() + e * mte.transpose() + tr * ee)
        + (k[4] * eme) * ee
}

/// ∫₀^∞ w(ρ) ⨏_{S²} cos(ρθ·d) P(θ)MP(θ) dU dρ, with the sphere average in closed form.
fn projected_wave_integral<W: Fn(f64) -> f64>(w: W, pts: &[f64], d: &Vec3, m: &Mat3) -> Mat3 {
    let r = d.norm();
    if r == 0.0 {
        let g = quad::integrate_pieces(&w, pts, 1e-13, 1e-11);
        return assemble_projected(&projected_wave_coefficients(0.0).map(|c| g * c), &Vec3::zeros(), m);
    }
    let mut p = pts.to_vec();
    add_oscillation_points(&mut p, r);
    let mut k = [0.0; 5];
    for (i, ki) in k.iter_mut().enumerate() {
        *ki = quad::integrate_pieces(|rho| w(rho) * projected_wave_coefficients(rho * r)[i], &p, 1e-13, 1e-11);
    }
    assemble_projected(&k, &(d / r), m)
}

/// σ_u²·C_x((Δx − Δt ū)/(δσ_x))·C_t(Δt/(δσ_t)), generalised to L ≠ I.
pub fn homogeneous_covariance(model: &Model, state: &FlowState, dx: &Vec3, dt: f64) -> Result<Mat3> {
    let sc = scaling_at(state);
    let delta = model.numbers.delta;
    let spec = model.spectra.model(sc.sigma_z * model.numbers.z)?;
    let y = (dx - dt * state.u_bar) / (delta * sc.sigma_x);
    let ct = model.kernel.correlation(dt / (delta * sc.sigma_t));
    if ct == 0.0 {
        return Ok(Mat3::zeros());
    }
    let s = state.aniso * state.aniso.transpose();
    let cx = if (s - Mat3::identity()).amax() < 1e-14 {
        isotropic_spatial_correlation(&spec, &y)
    } else {
        spatial_correlation(&spec, &y, &s)
    };
    Ok(sc.sigma_u * sc.sigma_u * ct * cx)
}

/// Covariance of the moving-average field by direct quadrature: slice sum
/// over s_j = jΔs (pass the sampler's Δs for its exact expectation, or a finer
/// one for the continuous-time integral), radial Gauss–Kronrod and the
/// closed-form sphere average.
pub fn inhomogeneous_covariance(
    f: &RealizationFactory,
    a: (&Vec3, f64),
    b: (&Vec3, f64),
    ds: f64,
) -> Result<Mat3> {
    let model = f.model();
    let flow: &dyn FlowProvider = f.flow().as_ref();
    let delta = model.numbers.delta;
    let z = model.numbers.z;
    let st = [flow.state_at(a.0, a.1)?, flow.state_at(b.0, b.1)?];
    let sc = [scaling_at(&st[0]), scaling_at(&st[1])];
    let spec = [model.spectra.model(sc[0].sigma_z * z)?, model.spectra.model(sc[1].sigma_z * z)?];
    let sc_half = |i: usize| delta * sc[i].sigma_t * model.kernel.s_c;
    let lo = (a.1 - sc_half(0)).max(b.1 - sc_half(1));
    let hi = (a.1 + sc_half(0)).min(b.1 + sc_half(1));
    if hi < lo {
        return Ok(Mat3::zeros());
    }
    let (j0, j1) = ((lo / ds).ceil() as i64, (hi / ds).floor() as i64);
    let times: Vec<f64> = (j0..=j1).map(|j| j as f64 * ds).collect();
    let step = f.trajectory_step().max(0.0);
    let step = if step > 0.0 { step.min(ds / 2.0) } else { ds / 2.0 };
    let pa = trajectory_fan(flow, a.0, a.1, &times, step)?;
    let pb = trajectory_fan(flow, b.0, b.1, &times, step)?;
    let m = st[0].aniso * st[1].aniso.transpose();
    let (s0, s1) = (sc[0].sigma_x, sc[1].sigma_x);
    let mut pts = radial_points(&spec[0], s0);
    pts.extend(radial_points(&spec[1], s1));
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.dedup();
    let w = |rho: f64| (spec[0].energy(s0 * rho) * spec[1].energy(s1 * rho)).sqrt();
    let mut cov = Mat3::zeros();
    for (k, &s) in times.iter().enumerate() {
        let beta = |i: usize, t: f64| {
            let dst = delta * sc[i].sigma_t;
            model.kernel.eta((t - s) / dst) / dst.sqrt()
        };
        let wt = beta(0, a.1) * beta(1, b.1) * ds;
        if wt == 0.0 {
            continue;
        }
        let dphi = (pa[k].0 - pb[k].0) / delta;
        cov += wt * projected_wave_integral(w, &pts, &dphi, &m);
    }
    Ok((s0 * s1).sqrt() * sc[0].sigma_u * sc[1].sigma_u * cov)
}

/// Space-time ball average over one realization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErgodicAverageSpec {
    pub x: Vec3,
    pub t: f64,
    /// Time radius R.
    pub r_time: f64,
    /// Space radius R′.
    pub r_space: f64,
    pub n_time_nodes: usize,
    /// Midpoint nodes per axis of the cube enclosing the ball; 5 gives 81 nodes inside.
    pub space_nodes_per_axis: usize,
    pub follow_mean_flow: bool,
}

impl ErgodicAverageSpec {
    pub fn new(x: Vec3, t: f64, r_time: f64, r_space: f64) -> Self {
        Self { x, t, r_time, r_space, n_time_nodes: 9, space_nodes_per_axis: 5, follow_mean_flow: true }
    }

    fn validate(&self) -> Result<()> {
        if !(self.r_time >= 0.0 && self.r_space >= 0.0) || self.n_time_nodes == 0 || self.space_nodes_per_axis == 0 {
            return Err(Error::InvalidParameter("ergodic average radii must be ≥ 0 and node counts ≥ 1".into()));
        }
        Ok(())
    }

    pub fn time_nodes(&self) -> Vec<f64> {
        if self.r_time == 0.0 {
            return vec![self.t];
        }
        let n = self.n_time_nodes;
        let h = 2.0 * self.r_time / n as f64;
        (0..n).map(|i| self.t - self.r_time + (i as f64 + 0.5) * h).collect()
    }

    pub fn space_offsets(&self) -> Vec<Vec3> {
        if self.r_space == 0.0 {
            return vec![Vec3::zeros()];
        }
        let m = self.space_nodes_per_axis;
        let c = |i: usize| -1.0 + (2.0 * i as f64 + 1.0) / m as f64;
        let mut out = Vec::new();
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let p = Vec3::new(c(i), c(j), c(k));
                    if p.norm_squared() <= 1.0 {
                        out.push(self.r_space * p);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Mean,
    Energy,
    Dissipation,
    Tensor,
}

impl Quantity {
    fn shape(&self) -> Vec<usize> {
        match self {
            Quantity::Mean => vec![3],
            Quantity::Energy | Quantity::Dissipation => vec![1],
            Quantity::Tensor => vec![3, 3],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Quantity::Mean => "mean",
            Quantity::Energy => "energy",
            Quantity::Dissipation => "dissipation",
            Quantity::Tensor => "tensor",
        }
    }
}

fn quantity_value(r: &FieldRealization, q: Quantity, y: &Vec3, s: f64) -> Result<Vec<f64>> {
    let n = r.numbers();
    Ok(match q {
        Quantity::Mean => {
            let u = r.velocity(y, s)?;
            vec![u[0], u[1], u[2]]
        }
        Quantity::Energy => vec![0.5 * r.velocity(y, s)?.norm_squared()],
        Quantity::Dissipation => vec![dissipation_sample(&r.velocity_gradient(y, s)?.1, n.delta, n.z)],
        Quantity::Tensor => {
            let u = r.velocity(y, s)?;
            mat_row_major(&(u * u.transpose()))
        }
    })
}

/// ⨏_{B_R(t)} ⨏_{B_R′(center(s))} q(u′(y, s)) dy ds by midpoint quadrature.
/// The standard error treats the per-time-node ball means as independent and
/// is indicative only.
pub fn ergodic_average(
    r: &FieldRealization,
    spec: &ErgodicAverageSpec,
    q: Quantity,
    exec: Execution,
) -> Result<EstimatorReport> {
    spec.validate()?;
    let times = spec.time_nodes();
    let offsets = spec.space_offsets();
    let centers: Vec<Vec3> = if spec.follow_mean_flow {
        let h = if spec.r_time > 0.0 { 2.0 * spec.r_time / spec.n_time_nodes as f64 } else { 1.0 };
        let step = (0.25 * h).min(r.numbers().delta * 0.05).max(1e-6);
        trajectory_fan(r.flow().as_ref(), &spec.x, spec.t, &times, step)?.into_iter().map(|p| p.0).collect()
    } else {
        vec![spec.x; times.len()]
    };
    let per_time: Vec<Vec<f64>> = map_range(exec, times.len(), |i| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; q.shape().iter().product()];
        for o in &offsets {
            let v = quantity_value(r, q, &(centers[i] + o), times[i])?;
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= offsets.len() as f64);
        Ok(acc)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut rep = EstimatorReport::from_samples(&format!("ergodic-{}", q.name()), &q.shape(), &per_time);
    if per_time.len() == 1 {
        rep.std_error = vec![0.0; rep.estimate.len()];
    }
    rep.n_samples = times.len() * offsets.len();
    let st = r.flow_state(&spec.x, spec.t)?;
    let target = match q {
        Quantity::Mean => vec![0.0; 3],
        Quantity::Energy => vec![st.k],
        Quantity::Dissipation => vec![st.eps / st.nu],
        Quantity::Tensor => mat_row_major(&st.one_point_tensor()),
    };
    Ok(rep.with_target(target))
}

/// Particle-tracking experiment for the Lagrangian integral time scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagrangianSpec {
    pub n_particles: usize,
    pub horizon: f64,
    pub dt: f64,
    pub master_seed: u64,
    /// Keep particles at rest (Eulerian analogue).
    pub frozen: bool,
    pub exec: Execution,
}

impl LagrangianSpec {
    /// dt = min(0.02, T_E/20).
    pub fn new(n_particles: usize, horizon: f64, t_e: f64, master_seed: u64) -> Self {
        Self {
            n_particles,
            horizon,
            dt: 0.02f64.min(t_e / 20.0),
            master_seed,
            frozen: false,
            exec: Execution::default(),
        }
    }
}

/// Correlogram E[v(0,0)·v(x(s),s)] and its standard errors on the step grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlogram {
    pub lags: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// T_L = ∫₀^{s*} R(s) ds / R(0), with R truncated at the first lag s* where
/// it falls below 2 SE; SE by the delta method for the ratio estimator.
pub fn lagrangian_timescale(f: &RealizationFactory, spec: &LagrangianSpec) -> Result<(EstimatorReport, Correlogram)> {
    if !f.flow().is_homogeneous() {
        return Err(Error::InvalidParameter("the Lagrangian time scale needs a homogeneous configuration".into()));
    }
    if spec.n_particles < 2 || !(spec.dt > 0.0) || !(spec.horizon > spec.dt) {
        return Err(Error::InvalidParameter("need ≥ 2 particles and 0 < dt < horizon".into()));
    }
    let steps = (spec.horizon / spec.dt).round() as usize;
    let dt = spec.horizon / steps as f64;
    let ens = Ensemble { master_seed: spec.master_seed, n_seeds: spec.n_particles, exec: spec.exec };
    let paths = collect_samples(f, &ens, |r| {
        let mut x = Vec3::zeros();
        let v0 = r.velocity(&x, 0.0)?;
        let mut v = v0;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(v0.dot(&v0));
        for k in 0..steps {
            let s = k as f64 * dt;
            if spec.frozen {
                v = r.velocity(&x, s + dt)?;
            } else {
                let xp = x + dt * v;
                let vp = r.velocity(&xp, s + dt)?;
                x += 0.5 * dt * (v + vp);
                v = r.velocity(&x, s + dt)?;
            }
            out.push(v0.dot(&v));
        }
        Ok(out)
    })?;
    let n = paths.len() as f64;
    let corr = EstimatorReport::from_samples("correlogram", &[steps + 1], &paths);
    let cut = (1..=steps).find(|&k| corr.estimate[k] < 2.0 * corr.std_error[k]);
    let Some(cut) = cut else {
        return Err(Error::HorizonTooShort { horizon: spec.horizon });
    };
    let weight = |k: usize| if k == 0 || k == cut { 0.5 * dt } else { dt };
    let a: Vec<f64> = paths.iter().map(|p| (0..=cut).map(|k| weight(k) * p[k]).sum()).collect();
    let am = a.iter().sum::<f64>() / n;
    let bm = corr.estimate[0];
    let tl = am / bm;
    let var = paths.iter().zip(&a).map(|(p, ai)| (ai - tl * p[0]).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt() / bm;
    let rep = EstimatorReport {
        name: if spec.frozen { "eulerian-timescale" } else { "lagrangian-timescale" }.to_string(),
        shape: vec![1],
        estimate: vec![tl],
        std_error: vec![se],
        n_samples: paths.len(),
        target: None,
        z_score: None,
        passed: None,
        note: Some(format!("correlogram truncated at s = {}", cut as f64 * dt)),
    };
    let lags = (0..=steps).map(|k| k as f64 * dt).collect();
    Ok((rep, Correlogram { lags, mean: corr.estimate, std_error: corr.std_error }))
}

/// Estimates over a sequence of δ with common seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSweep {
    pub deltas: Vec<f64>,
    pub dissipation: Vec<EstimatorReport>,
    pub divergence: Vec<EstimatorReport>,
    /// |dissipation − ε/ν| per δ.
    pub distance: Vec<f64>,
    /// Divergence ratio between consecutive δ.
    pub divergence_ratios: Vec<f64>,
    pub monotone: bool,
    pub ratios_ok: bool,
}

impl DeltaSweep {
    pub fn passed(&self) -> bool {
        self.monotone && self.ratios_ok
    }
}

/// Dissipation and divergence at (x, t) for each δ (descending), built by
/// `build(δ)`. The same master seed is used at every δ, so with the default
/// Δs ∝ δ the ensembles share their noise draws.
pub fn delta_sweep<F>(build: F, deltas: &[f64], x: &Vec3, t: f64, ens: &Ensemble, min_ratio: f64) -> Result<DeltaSweep>
where
    F: Fn(f64) -> Result<RealizationFactory>,
{
    let mut out = DeltaSweep {
        deltas: deltas.to_vec(),
        dissipation: vec![],
        divergence: vec![],
        distance: vec![],
        divergence_ratios: vec![],
        monotone: true,
        ratios_ok: true,
    };
    for &d in deltas {
        let f = build(d)?;
        let (diss, div) = gradient_stats(&f, x, t, ens)?;
        out.distance.push((diss.scalar() - diss.target.as_ref().unwrap()[0]).abs());
        out.dissipation.push(diss);
        out.divergence.push(div);
    }
    for i in 1..deltas.len() {
        out.monotone &= out.distance[i] < out.distance[i - 1];
        let r = out.divergence[i - 1].scalar() / out.divergence[i].scalar();
        out.ratios_ok &= r >= min_ratio;
        out.divergence_ratios.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{CharacteristicNumbers, ConstantFlow};
    use crate::sampler::{projector, SamplerConfig, Variant};
    use crate::spectrum::{derived_constants, SpectrumFactory};
    use crate::temporal::TemporalKernel;
    use std::sync::Arc;

    fn model(z: f64, delta: f64) -> Arc<Model> {
        Arc::new(Model {
            spectra: SpectrumFactory::new(derived_constants()).unwrap(),
            kernel: TemporalKernel::default(),
            numbers: CharacteristicNumbers::new(z, delta).unwrap(),
        })
    }

    #[test]
    fn report_statistics() {
        let s: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| vec![*v]).collect();
        let r = EstimatorReport::from_samples("x", &[1], &s).with_target(vec![2.0]);
        assert_eq!(r.scalar(), 2.5);
        let se = (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((r.std_error[0] - se).abs() < 1e-15);
        assert!((r.z_score.as_ref().unwrap()[0] - 0.5 / se).abs() < 1e-14);
        let f = EstimatorReport::from_samples("y", &[1], &[vec![0.0], vec![0.0]]).with_target(vec![0.0]).with_se_floor(1e-3);
        assert_eq!(f.std_error[0], 1e-3);
        assert_eq!(f.max_abs_z(), Some(0.0));
    }

    #[test]
    fn isotropic_correlation_limits_and_general_form() {
        let m = SpectrumModel::new(derived_constants(), 1e-2).unwrap();
        let c0 = isotropic_spatial_correlation(&m, &Vec3::zeros());
        assert_eq!(c0, 2.0 / 3.0 * Mat3::identity());
        let tiny = isotropic_spatial_correlation(&m, &Vec3::new(1e-7, 0.0, 0.0));
        assert!((tiny - c0).amax() < 1e-9);
        let y = Vec3::new(0.3, -0.2, 0.4);
        let iso = isotropic_spatial_correlation(&m, &y);
        let gen = spatial_correlation(&m, &y, &Mat3::identity());
        assert!((iso - gen).amax() < 1e-9, "{iso} vs {gen}");
        // longitudinal correlation decays and stays below the transverse one at moderate lag
        let yh = y / y.norm();
        let long = (yh.transpose() * iso * yh)[0];
        assert!(long > 0.0 && long < 2.0 / 3.0);
    }

    #[test]
    fn closed_form_sphere_average_matches_quadrature() {
        let m = Mat3::new(0.3, -1.2, 0.5, 0.7, 1.1, -0.4, 0.2, 0.9, -0.6);
        let e = Vec3::new(0.3, -0.5, 0.8).normalize();
        for r in [0.0, 1e-4, 0.7, 1.99, 2.0, 2.7, 9.0] {
            let closed = assemble_projected(&projected_wave_coefficients(r), &e, &m);
            let mut quad = Mat3::zeros();
            for (th, w) in sphere_nodes(40) {
                let p = projector(&th);
                quad += (w * (r * th.dot(&e)).cos()) * (p * m * p);
            }
            assert!((closed - quad).amax() < 1e-12, "r = {r}: {closed} vs {quad}");
        }
        // anisotropic correlation keeps trace and symmetry of the isotropic one at y = 0
        let sm = SpectrumModel::new(derived_constants(), 1e-2).unwrap();
        let s = Mat3::new(1.5, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 0.5);
        let c = spatial_correlation(&sm, &Vec3::zeros(), &s);
        assert!((c.trace() - 2.0 / 3.0 * s.trace()).abs() < 1e-9);
        let y = Vec3::new(0.2, 0.1, -0.3);
        let cy = spatial_correlation(&sm, &y, &s);
        let mut quad = Mat3::zeros();
        for (th, w) in sphere_nodes(24) {
            let p = projector(&th);
            quad += (w * spectrum_cosine_transform(&sm, th.dot(&y))) * (p * s * p);
        }
        assert!((cy - quad).amax() < 1e-8, "{cy} vs {quad}");
    }

    #[test]
    fn ergodic_degenerate_average_is_pointwise() {
        let m = model(1e-2, 0.1);
        let flow = Arc::new(ConstantFlow::new(Vec3::new(1.0, 0.0, 0.0), 1.0, 1.0, 1.0).unwrap());
        let f = RealizationFactory::new(m, flow, SamplerConfig { modes: 32, ..Default::default() }).unwrap();
        let r = f.realization(5).unwrap();
        let x = Vec3::new(0.1, 0.2, 0.3);
        let spec = ErgodicAverageSpec::new(x, 0.4, 0.0, 0.0);
        let e = ergodic_average(&r, &spec, Quantity::Energy, Execution::Sequential).unwrap();
        assert_eq!(e.scalar(), 0.5 * r.velocity(&x, 0.4).unwrap().norm_squared());
        assert_eq!(ErgodicAverageSpec::new(x, 0.0, 1.0, 1.0).space_offsets().len(), 81);
    }

    #[test]
    fn inhomogeneous_target_reduces_to_homogeneous() {
        let m = model(1e-2, 0.2);
        let flow = Arc::new(ConstantFlow::new(Vec3::new(0.5, 0.0, 0.0), 1.0, 1.0, 1.0).unwrap());
        let cfg = SamplerConfig { variant: Variant::HomogeneousMovingAverage, modes_per_slice: 4, ..Default::default() };
        let f = RealizationFactory::new(m.clone(), flow.clone(), cfg).unwrap();
        let a = Vec3::zeros();
        let b = Vec3::new(0.05, 0.03, 0.0);
        let fine = f.slice_spacing() / 8.0;
        let inh = inhomogeneous_covariance(&f, (&a, 0.0), (&b, 0.02), fine).unwrap();
        let hom = homogeneous_covariance(&m, &flow.state(), &(a - b), -0.02).unwrap();
        assert!((inh - hom).amax() < 1e-5, "{inh} vs {hom}");
        let zero = inhomogeneous_covariance(&f, (&a, 0.0), (&a, 2.0 * 0.2 * m.kernel.s_c), f.slice_spacing()).unwrap();
        assert_eq!(zero, Mat3::zeros());
    }
}
