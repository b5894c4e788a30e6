//! Mean-flow trajectories φ(s; x, t) with dφ/ds = ū(φ, s), φ(t) = x, and
//! their spatial Jacobians from the co-integrated variational equation.
//!
//! Both are advanced by the same fixed-step classical RK4 scheme, so the
//! Jacobian is the exact derivative of the discrete trajectory map.

use crate::error::{Error, Result};
use crate::flowfield::{FlowProvider, Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryConfig {
    /// Fixed step; `None` uses |s − t|/32.
    pub step: Option<f64>,
    pub max_span: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { step: None, max_span: f64::INFINITY }
    }
}

pub const DEFAULT_STEPS: usize = 32;

fn step_count(span: f64, cfg: &TrajectoryConfig) -> Result<usize> {
    if span.abs() > cfg.max_span {
        return Err(Error::InvalidParameter(format!(
            "trajectory span {} exceeds the configured maximum {}",
            span.abs(),
            cfg.max_span
        )));
    }
    Ok(match cfg.step {
        Some(h) if h > 0.0 => ((span.abs() / h).ceil() as usize).max(1),
        Some(h) => return Err(Error::InvalidParameter(format!("trajectory step {h} must be positive"))),
        None => DEFAULT_STEPS,
    })
}

/// One RK4 step of the augmented system (φ, ∂φ).
#[inline]
fn rk4_step<P: FlowProvider + ?Sized>(p: &P, x: &mut Vec3, g: &mut Mat3, s: f64, h: f64) -> Result<()> {
    let (k1, d1) = p.velocity(x, s)?;
    let g1 = d1 * *g;
    let x2 = *x + 0.5 * h * k1;
    let (k2, d2) = p.velocity(&x2, s + 0.5 * h)?;
    let g2 = d2 * (*g + 0.5 * h * g1);
    let x3 = *x + 0.5 * h * k2;
    let (k3, d3) = p.velocity(&x3, s + 0.5 * h)?;
    let g3 = d3 * (*g + 0.5 * h * g2);
    let x4 = *x + h * k3;
    let (k4, d4) = p.velocity(&x4, s + h)?;
    let g4 = d4 * (*g + h * g3);
    *x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    *g += h / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4);
    Ok(())
}

/// Advance `(x, g)` from time `from` to `to` in `n` equal steps.
fn advance<P: FlowProvider + ?Sized>(p: &P, x: &mut Vec3, g: &mut Mat3, from: f64, to: f64, n: usize) -> Result<()> {
    let h = (to - from) / n as f64;
    for i in 0..n {
        rk4_step(p, x, g, from + i as f64 * h, h)?;
    }
    Ok(())
}

/// φ(s; x, t).
pub fn trajectory<P: FlowProvider + ?Sized>(p: &P, x: &Vec3, t: f64, s: f64, cfg: &TrajectoryConfig) -> Result<Vec3> {
    Ok(trajectory_gradient(p, x, t, s, cfg)?.0)
}

/// φ(s; x, t) together with ∂φ/∂x.
pub fn trajectory_gradient<P: FlowProvider + ?Sized>(
    p: &P,
    x: &Vec3,
    t: f64,
    s: f64,
    cfg: &TrajectoryConfig,
) -> Result<(Vec3, Mat3)> {
    let n = step_count(s - t, cfg)?;
    let mut y = *x;
    let mut g = Mat3::identity();
    if s != t {
        advance(p, &mut y, &mut g, t, s, n)?;
    }
    Ok((y, g))
}

/// ‖φ(t; φ(s; x, t), s) − x‖.
pub fn inverse_check<P: FlowProvider + ?Sized>(p: &P, x: &Vec3, t: f64, s: f64, cfg: &TrajectoryConfig) -> Result<f64> {
    let y = trajectory(p, x, t, s, cfg)?;
    let back = trajectory(p, &y, s, t, cfg)?;
    Ok((back - x).norm())
}

/// Trajectory states at an ascending list of times, integrated outward from
/// `t` on a grid fixed by `step`: each gap between consecutive requested
/// times (and the gap from `t` to the nearest one) uses ⌈gap/step⌉ steps.
pub fn trajectory_fan<P: FlowProvider + ?Sized>(
    p: &P,
    x: &Vec3,
    t: f64,
    times: &[f64],
    step: f64,
) -> Result<Vec<(Vec3, Mat3)>> {
    debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
    let mut out = vec![(*x, Mat3::identity()); times.len()];
    let split = times.partition_point(|&s| s < t);
    let count = |gap: f64| ((gap.abs() / step).ceil() as usize).max(1);
    // forward
    let (mut y, mut g, mut at) = (*x, Mat3::identity(), t);
    for i in split..times.len() {
        if times[i] != at {
            advance(p, &mut y, &mut g, at, times[i], count(times[i] - at))?;
            at = times[i];
        }
        out[i] = (y, g);
    }
    // backward
    let (mut y, mut g, mut at) = (*x, Mat3::identity(), t);
    for i in (0..split).rev() {
        if times[i] != at {
            advance(p, &mut y, &mut g, at, times[i], count(times[i] - at))?;
            at = times[i];
        }
        out[i] = (y, g);
    }
    Ok(out)
}
