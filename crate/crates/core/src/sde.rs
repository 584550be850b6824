//! Time discretization, SDE model definitions and the Euler-Maruyama
//! integrator.
//!
//! The dynamics are read as
//!
//! ```text
//! dx_t = f(x_t, t) dt + g(t) dβ_t,    x_0 ~ π_0
//! ```
//!
//! and discretized with left-endpoint Euler-Maruyama steps
//! `x_{j+1} = x_j + f(x_j, t_j) Δ_j + g(t_j) sqrt(Δ_j) ε`, `ε ~ N(0, I)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Uniform discretization `t0 = t_0 < t_1 < ... < t_{N_T} = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    deltas: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with step `dt`. `(t_end - t0) / dt` must be an integer
    /// to within 1e-9.
    pub fn uniform(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite() && dt.is_finite()) || t_end <= t0 || dt <= 0.0 {
            return Err(Error::Config(format!(
                "invalid time grid (t0={t0}, T={t_end}, dt={dt}): need T > t0 and dt > 0"
            )));
        }
        let ratio = (t_end - t0) / dt;
        let n_steps = ratio.round();
        if (ratio - n_steps).abs() > 1e-9 || n_steps < 1.0 {
            return Err(Error::Config(format!(
                "time grid (t0={t0}, T={t_end}, dt={dt}) has non-integer step count {ratio}"
            )));
        }
        let n_steps = n_steps as usize;
        let mut times: Vec<f64> = (0..=n_steps).map(|j| t0 + j as f64 * dt).collect();
        times[n_steps] = t_end;
        Ok(TimeGrid { times, deltas: vec![dt; n_steps] })
    }

    pub fn n_steps(&self) -> usize {
        self.deltas.len()
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// Step length `Δ_j = t_{j+1} - t_j`.
    pub fn delta(&self, j: usize) -> f64 {
        self.deltas[j]
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Nearest grid index to `t`; fails when `t` is more than half a step
    /// away from every grid point.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let dt = self.deltas[0];
        let guess = ((t - self.t0()) / dt).round();
        if guess < 0.0 || guess > self.n_steps() as f64 || !guess.is_finite() {
            return Err(Error::Contract(format!(
                "time {t} lies outside the grid [{}, {}]",
                self.t0(),
                self.t_end()
            )));
        }
        let j = guess as usize;
        if (t - self.times[j]).abs() > dt / 2.0 + 1e-12 {
            return Err(Error::Contract(format!("time {t} does not snap to a grid point")));
        }
        Ok(j)
    }
}

/// Diffusion coefficient `g(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionSchedule {
    Constant { value: f64 },
    /// Linear interpolation between `(time, value)` breakpoints, clamped
    /// outside the first and last breakpoint.
    PiecewiseLinear { breakpoints: Vec<(f64, f64)> },
}

impl DiffusionSchedule {
    pub fn constant(value: f64) -> Self {
        DiffusionSchedule::Constant { value }
    }

    pub fn piecewise_linear(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        let s = DiffusionSchedule::PiecewiseLinear { breakpoints };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DiffusionSchedule::Constant { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return Err(Error::Config(format!("diffusion value {value} must be finite and >= 0")));
                }
            }
            DiffusionSchedule::PiecewiseLinear { breakpoints } => {
                if breakpoints.is_empty() {
                    return Err(Error::Config("piecewise-linear schedule needs at least one breakpoint".into()));
                }
                for w in breakpoints.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::Config("schedule breakpoint times must be strictly increasing".into()));
                    }
                }
                if let Some(&(t, v)) = breakpoints.iter().find(|(t, v)| !(t.is_finite() && v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Config(format!("invalid schedule breakpoint ({t}, {v})")));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            DiffusionSchedule::Constant { value } => *value,
            DiffusionSchedule::PiecewiseLinear { breakpoints } => {
                let first = breakpoints[0];
                let last = breakpoints[breakpoints.len() - 1];
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let k = breakpoints.partition_point(|&(bt, _)| bt <= t);
                let (ta, va) = breakpoints[k - 1];
                let (tb, vb) = breakpoints[k];
                va + (vb - va) * (t - ta) / (tb - ta)
            }
        }
    }
}

/// A drift function `f(x, t)`.
pub trait Drift: Send + Sync {
    /// Writes `f(x, t)` into `out`; `out.len() == x.len()`.
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDrift;

impl Drift for ZeroDrift {
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `f(x) = 4 x (1 - x^2)` applied coordinate-wise; wells at ±1.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleWellDrift;

impl Drift for DoubleWellDrift {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = 4.0 * xi * (1.0 - xi * xi);
        }
    }
}

/// `f(x) = A x` with `A` row-major `d × d`.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearDrift {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Contract(format!("linear drift needs {} entries, got {}", dim * dim, matrix.len())));
        }
        Ok(LinearDrift { dim, matrix })
    }

    pub fn scalar(a: f64) -> Self {
        LinearDrift { dim: 1, matrix: vec![a] }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl Drift for LinearDrift {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[r * self.dim..(r + 1) * self.dim];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// Adapter for closures.
pub struct FnDrift<F>(pub F);

impl<F> Drift for FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.0)(x, t, out)
    }
}

/// Initial distribution `π_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSampler {
    PointMass { point: Vec<f64> },
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Uniform draw from a finite set of points.
    Empirical { points: Vec<Vec<f64>> },
}

impl InitSampler {
    pub fn dim(&self) -> usize {
        match self {
            InitSampler::PointMass { point } => point.len(),
            InitSampler::Gaussian { mean, .. } => mean.len(),
            InitSampler::Empirical { points } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = match self {
            InitSampler::PointMass { point } => point.len() == dim,
            InitSampler::Gaussian { mean, std } => {
                mean.len() == dim && std.len() == dim && std.iter().all(|s| s.is_finite() && *s >= 0.0)
            }
            InitSampler::Empirical { points } => !points.is_empty() && points.iter().all(|p| p.len() == dim),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("initial distribution does not match state dimension {dim}")))
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitSampler::PointMass { point } => out.copy_from_slice(point),
            InitSampler::Gaussian { mean, std } => {
                for ((o, m), s) in out.iter_mut().zip(mean).zip(std) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = m + s * z;
                }
            }
            InitSampler::Empirical { points } => {
                let k = rng.random_range(0..points.len());
                out.copy_from_slice(&points[k]);
            }
        }
    }

    /// `n` draws from `π_0`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..n)
            .map(|_| {
                let mut v = vec![0.0; d];
                self.sample_into(rng, &mut v);
                v
            })
            .collect()
    }
}

/// SDE `dx = f(x,t) dt + g(t) dβ` with initial law `π_0`.
#[derive(Clone)]
pub struct SdeModel {
    pub drift: Arc<dyn Drift>,
    pub diffusion: DiffusionSchedule,
    pub dim: usize,
    pub init: InitSampler,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("dim", &self.dim)
            .field("diffusion", &self.diffusion)
            .field("init", &self.init)
            .finish_non_exhaustive()
    }
}

impl SdeModel {
    pub fn new(drift: Arc<dyn Drift>, diffusion: DiffusionSchedule, dim: usize, init: InitSampler) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        diffusion.validate()?;
        init.validate(dim)?;
        Ok(SdeModel { drift, diffusion, dim, init })
    }

    /// Evaluate the drift, failing on non-finite output.
    pub fn drift_checked(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.drift.eval(x, t, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence { t, x: x.to_vec() })
        }
    }
}

/// One path on a grid: `(N_T + 1) × d` states, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Arc<TimeGrid>,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: Arc<TimeGrid>, dim: usize, states: Vec<f64>) -> Result<Self> {
        if states.len() != grid.len() * dim {
            return Err(Error::Contract(format!(
                "trajectory has {} values, expected {} rows of dimension {dim}",
                states.len(),
                grid.len()
            )));
        }
        Ok(Trajectory { grid, dim, states })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Euler-Maruyama update written into `out`. `drift_buf` is scratch space.
pub fn em_step_into(
    model: &SdeModel,
    x: &[f64],
    t: f64,
    dt: f64,
    noise: &[f64],
    drift_buf: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    model.drift_checked(x, t, drift_buf)?;
    let scale = model.diffusion.eval(t) * dt.sqrt();
    for k in 0..x.len() {
        out[k] = x[k] + drift_buf[k] * dt + scale * noise[k];
    }
    Ok(())
}

/// `x + f(x,t) dt + g(t) sqrt(dt) noise`, with `noise ~ N(0, I)`.
pub fn em_step(model: &SdeModel, x: &[f64], t: f64, dt: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("step length {dt} must be positive")));
    }
    if x.len() != model.dim || noise.len() != model.dim {
        return Err(Error::Contract(format!(
            "state/noise dimensions ({}, {}) do not match model dimension {}",
            x.len(),
            noise.len(),
            model.dim
        )));
    }
    let mut drift = vec![0.0; model.dim];
    let mut out = vec![0.0; model.dim];
    em_step_into(model, x, t, dt, noise, &mut drift, &mut out)?;
    Ok(out)
}

/// Log-density of `N(x_next; mean, var I)` summed over coordinates.
pub(crate) fn gaussian_logpdf_iso(x_next: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = x_next.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * x_next.len() as f64 * (2.0 * PI * var).ln() - 0.5 * sq / var
}

/// Euler-Maruyama transition log-density
/// `log N(x_next; x_prev + f(x_prev,t) dt, g(t)^2 dt I)`.
pub fn transition_logpdf(model: &SdeModel, x_prev: &[f64], x_next: &[f64], t: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("step length {dt} must be positive")));
    }
    let g = model.diffusion.eval(t);
    if g == 0.0 {
        return Err(Error::DegenerateTransition { t });
    }
    let mut mean = vec![0.0; model.dim];
    model.drift_checked(x_prev, t, &mut mean)?;
    for (m, xp) in mean.iter_mut().zip(x_prev) {
        *m = xp + *m * dt;
    }
    Ok(gaussian_logpdf_iso(x_next, &mean, g * g * dt))
}

/// Simulate `n_paths` independent Euler-Maruyama paths. Path `p` draws from
/// its own random stream, so the output does not depend on scheduling.
pub fn simulate(model: &SdeModel, grid: &Arc<TimeGrid>, n_paths: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n_paths == 0 {
        return Err(Error::Contract("simulate needs at least one path".into()));
    }
    (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_path(model, grid, &mut rng::stream(seed, &[domain::SIMULATE, p as u64])))
        .collect()
}

fn simulate_path<R: Rng + ?Sized>(model: &SdeModel, grid: &Arc<TimeGrid>, rng: &mut R) -> Result<Trajectory> {
    let d = model.dim;
    let mut states = vec![0.0; grid.len() * d];
    model.init.sample_into(rng, &mut states[..d]);
    let mut noise = vec![0.0; d];
    let mut drift = vec![0.0; d];
    for j in 0..grid.n_steps() {
        noise.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
        let (head, tail) = states.split_at_mut((j + 1) * d);
        em_step_into(model, &head[j * d..], grid.time(j), grid.delta(j), &noise, &mut drift, &mut tail[..d])?;
    }
    Trajectory::new(grid.clone(), d, states)
}
