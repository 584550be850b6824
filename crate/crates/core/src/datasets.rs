//! Synthetic experiment setups and CSV ingestion of marginal samples.
//!
//! Each generator returns a [`Dataset`]: the model parameters, observation
//! slots with their points and likelihood parameters, and (where one exists)
//! a held-out ground-truth path. Generation is seed-deterministic.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::observations::{ObservationSet, ObservationSlot};
use crate::rng::{self, domain};
use crate::sde::{simulate, DiffusionSchedule, DoubleWellDrift, Drift, InitSampler, SdeModel, TimeGrid, Trajectory, ZeroDrift};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    DoubleWell,
    TwoCircles,
    VehicleSynthetic,
    MarginalTransport,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] =
        [ExperimentName::DoubleWell, ExperimentName::TwoCircles, ExperimentName::VehicleSynthetic, ExperimentName::MarginalTransport];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::DoubleWell => "double_well",
            ExperimentName::TwoCircles => "two_circles",
            ExperimentName::VehicleSynthetic => "vehicle_synthetic",
            ExperimentName::MarginalTransport => "marginal_transport",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown experiment {s:?} (expected one of double_well, two_circles, vehicle_synthetic, marginal_transport)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Zero,
    DoubleWell,
}

impl DriftKind {
    pub fn build(self) -> Arc<dyn Drift> {
        match self {
            DriftKind::Zero => Arc::new(ZeroDrift),
            DriftKind::DoubleWell => Arc::new(DoubleWellDrift),
        }
    }
}

/// Everything needed to rebuild the prior SDE and its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    pub t_end: f64,
    pub dt: f64,
    pub diffusion: DiffusionSchedule,
    pub drift: DriftKind,
    pub init: InitSampler,
}

impl ModelParams {
    pub fn grid(&self) -> Result<Arc<TimeGrid>> {
        TimeGrid::uniform(0.0, self.t_end, self.dt).map(Arc::new)
    }

    pub fn build(&self) -> Result<SdeModel> {
        SdeModel::new(self.drift.build(), self.diffusion.clone(), self.dim, self.init.clone())
    }
}

/// Likelihood parameters of one slot. `neighbors = None` is a single-point
/// slot, `Some(h)` a nearest-neighbour slot over `h` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotParams {
    pub time: f64,
    pub sigma_obs: f64,
    #[serde(default)]
    pub neighbors: Option<usize>,
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSlot {
    pub params: SlotParams,
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: ExperimentName,
    pub seed: u64,
    pub model: ModelParams,
    pub slots: Vec<ObservedSlot>,
    /// Held-out ground-truth path, when the setup has one.
    pub truth: Option<Trajectory>,
    /// Generator parameters, echoed into `spec.json`.
    pub generator: serde_json::Value,
}

/// Slot times are snapped to the grid; a slot flagged terminal is inserted
/// as the terminal-distribution slot.
pub fn build_observation_set(grid: &TimeGrid, dim: usize, slots: &[ObservedSlot]) -> Result<ObservationSet> {
    let mut set = ObservationSet::new(dim);
    for s in slots {
        let j = grid.index_of(s.params.time)?;
        let slot = match s.params.neighbors {
            None => {
                if s.points.len() != 1 {
                    return Err(Error::Config(format!(
                        "slot at t={} has {} points but no neighbor count",
                        s.params.time,
                        s.points.len()
                    )));
                }
                ObservationSlot::single(j, s.points[0].clone(), s.params.sigma_obs)?
            }
            Some(h) => ObservationSlot::knn(j, s.points.clone(), s.params.sigma_obs, h)?,
        };
        if s.params.terminal {
            set.insert_terminal(slot)?;
        } else {
            set.insert(slot)?;
        }
    }
    Ok(set)
}

#[derive(Serialize)]
struct SpecManifest<'a> {
    name: ExperimentName,
    seed: u64,
    model: &'a ModelParams,
    slots: Vec<SlotSummary<'a>>,
    has_truth: bool,
    generator: &'a serde_json::Value,
}

#[derive(Serialize)]
struct SlotSummary<'a> {
    #[serde(flatten)]
    params: &'a SlotParams,
    n_points: usize,
}

impl Dataset {
    pub fn grid(&self) -> Result<Arc<TimeGrid>> {
        self.model.grid()
    }

    pub fn sde(&self) -> Result<SdeModel> {
        self.model.build()
    }

    pub fn observation_set(&self) -> Result<ObservationSet> {
        build_observation_set(&*self.grid()?, self.model.dim, &self.slots)
    }

    /// `(t, y)` rows of every slot, times snapped to the grid.
    pub fn observation_rows(&self) -> Result<Vec<(f64, Vec<f64>)>> {
        let grid = self.grid()?;
        let mut rows = Vec::new();
        for s in &self.slots {
            let t = grid.time(grid.index_of(s.params.time)?);
            rows.extend(s.points.iter().map(|p| (t, p.clone())));
        }
        Ok(rows)
    }

    pub fn slot_params(&self) -> Vec<SlotParams> {
        self.slots.iter().map(|s| s.params.clone()).collect()
    }

    /// Write `observations.csv`, `truth.csv` (if any) and `spec.json` into
    /// `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_points_csv(&dir.join("observations.csv"), &self.observation_rows()?)?;
        if let Some(truth) = &self.truth {
            io::write_trajectories_csv(&dir.join("truth.csv"), std::slice::from_ref(truth))?;
        }
        let manifest = SpecManifest {
            name: self.name,
            seed: self.seed,
            model: &self.model,
            slots: self.slots.iter().map(|s| SlotSummary { params: &s.params, n_points: s.points.len() }).collect(),
            has_truth: self.truth.is_some(),
            generator: &self.generator,
        };
        let path = dir.join("spec.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleWellParams {
    pub t_end: f64,
    pub dt: f64,
    pub g: f64,
    pub n_obs: usize,
    pub sigma_obs: f64,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        DoubleWellParams { t_end: 40.0, dt: 0.01, g: 1.0, n_obs: 50, sigma_obs: 0.1, init_mean: 0.0, init_std: 0.5 }
    }
}

/// One ground-truth path of `dx = 4x(1 - x²) dt + g dβ`, observed with
/// Gaussian noise at `n_obs` evenly spaced grid times (the last one at `T`).
pub fn gen_double_well(p: &DoubleWellParams, seed: u64) -> Result<Dataset> {
    if p.n_obs == 0 {
        return Err(Error::Config("double_well needs n_obs >= 1".into()));
    }
    let model = ModelParams {
        dim: 1,
        t_end: p.t_end,
        dt: p.dt,
        diffusion: DiffusionSchedule::constant(p.g),
        drift: DriftKind::DoubleWell,
        init: InitSampler::Gaussian { mean: vec![p.init_mean], std: vec![p.init_std] },
    };
    let grid = model.grid()?;
    if p.n_obs > grid.n_steps() {
        return Err(Error::Config(format!("n_obs {} exceeds the {} grid steps", p.n_obs, grid.n_steps())));
    }
    let truth = simulate(&model.build()?, &grid, 1, rng::derive_seed(seed, &[domain::DATASET, 0]))?.remove(0);
    let mut rng = rng::stream(seed, &[domain::DATASET, 1]);
    let n_t = grid.n_steps();
    let slots = (1..=p.n_obs)
        .map(|k| {
            let j = ((k * n_t) as f64 / p.n_obs as f64).round() as usize;
            let y = truth.state(j)[0] + p.sigma_obs * normal(&mut rng);
            ObservedSlot {
                params: SlotParams { time: grid.time(j), sigma_obs: p.sigma_obs, neighbors: None, terminal: false },
                points: vec![vec![y]],
            }
        })
        .collect();
    Ok(Dataset {
        name: ExperimentName::DoubleWell,
        seed,
        model,
        slots,
        truth: Some(truth),
        generator: serde_json::to_value(p)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoCirclesParams {
    pub t_end: f64,
    pub dt: f64,
    pub n_terminal: usize,
    /// Inner-to-outer radius ratio.
    pub factor: f64,
    /// Standard deviation of the Gaussian jitter added to circle points.
    pub noise: f64,
    /// Outer radius.
    pub scale: f64,
    pub n_mid: usize,
    /// Midpoint circle radius; `None` means halfway between the two rings.
    pub mid_radius: Option<f64>,
    pub sigma_mid: f64,
    pub neighbors_mid: usize,
    /// Terminal `σ_obs` is `sigma_mid · terminal_sigma_scale`.
    pub terminal_sigma_scale: f64,
    pub neighbors_terminal: usize,
    pub g_high: f64,
    pub g_low: f64,
    pub init_std: f64,
}

impl Default for TwoCirclesParams {
    fn default() -> Self {
        TwoCirclesParams {
            t_end: 3.0,
            dt: 0.01,
            n_terminal: 1000,
            factor: 0.5,
            noise: 0.05,
            scale: 1.0,
            n_mid: 10,
            mid_radius: None,
            sigma_mid: 0.5,
            neighbors_mid: 3,
            terminal_sigma_scale: 0.01,
            neighbors_terminal: 5,
            g_high: 5.0,
            g_low: 0.01,
            init_std: 1.0,
        }
    }
}

impl TwoCirclesParams {
    pub fn mid_radius(&self) -> f64 {
        self.mid_radius.unwrap_or(0.5 * (1.0 + self.factor) * self.scale)
    }
}

/// Two concentric noisy circles: `n / 2` points on the outer ring of radius
/// `scale`, the rest on the inner ring of radius `factor · scale`, evenly
/// spaced in angle.
pub fn make_circles<R: Rng + ?Sized>(n: usize, factor: f64, noise: f64, scale: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let n_out = n / 2;
    let n_in = n - n_out;
    let ring = |count: usize, radius: f64| {
        (0..count).map(move |k| {
            let a = 2.0 * PI * k as f64 / count as f64;
            (radius * a.cos(), radius * a.sin())
        })
    };
    ring(n_out, 1.0)
        .chain(ring(n_in, factor))
        .map(|(x, y)| vec![scale * (x + noise * normal(rng)), scale * (y + noise * normal(rng))])
        .collect()
}

/// Zero-drift bridge from a Gaussian to the two-circles distribution with
/// ten points on a single circle observed at `T/2`.
pub fn gen_two_circles(p: &TwoCirclesParams, seed: u64) -> Result<Dataset> {
    if p.n_terminal < 10 {
        return Err(Error::Config(format!("two_circles needs n_terminal >= 10, got {}", p.n_terminal)));
    }
    let half = 0.5 * p.t_end;
    let model = ModelParams {
        dim: 2,
        t_end: p.t_end,
        dt: p.dt,
        diffusion: DiffusionSchedule::piecewise_linear(vec![(0.0, p.g_high), (half, p.g_high), (p.t_end, p.g_low)])?,
        drift: DriftKind::Zero,
        init: InitSampler::Gaussian { mean: vec![0.0; 2], std: vec![p.init_std; 2] },
    };
    let grid = model.grid()?;
    let mut rng = rng::stream(seed, &[domain::DATASET, 0]);
    let target = make_circles(p.n_terminal, p.factor, p.noise, p.scale, &mut rng);
    let r = p.mid_radius();
    let mid: Vec<Vec<f64>> = (0..p.n_mid)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / p.n_mid as f64;
            vec![r * a.cos(), r * a.sin()]
        })
        .collect();
    let slots = vec![
        ObservedSlot {
            params: SlotParams {
                time: grid.time(grid.index_of(half)?),
                sigma_obs: p.sigma_mid,
                neighbors: Some(p.neighbors_mid),
                terminal: false,
            },
            points: mid,
        },
        ObservedSlot {
            params: SlotParams {
                time: grid.t_end(),
                sigma_obs: p.sigma_mid * p.terminal_sigma_scale,
                neighbors: Some(p.neighbors_terminal),
                terminal: true,
            },
            points: target,
        },
    ];
    Ok(Dataset { name: ExperimentName::TwoCircles, seed, model, slots, truth: None, generator: serde_json::to_value(p)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub dt: f64,
    pub n_points: usize,
    pub every: usize,
    pub sigma_obs: f64,
    pub g: f64,
    /// Sinusoidal components per coordinate.
    pub n_harmonics: usize,
    pub amplitude: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Standard deviation of the jitter added to every dense point but the
    /// first.
    pub track_noise: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            dt: 0.01,
            n_points: 1000,
            every: 50,
            sigma_obs: 0.1,
            g: 0.1,
            n_harmonics: 3,
            amplitude: 0.1,
            omega_min: 0.3,
            omega_max: 0.8,
            track_noise: 0.05,
        }
    }
}

/// A smooth 2D track through the origin, sampled at `n_points` grid times;
/// every `every`-th point (starting with the first) is observed exactly.
pub fn gen_vehicle_synthetic(p: &VehicleParams, seed: u64) -> Result<Dataset> {
    if p.n_points < 2 || p.every == 0 {
        return Err(Error::Config("vehicle_synthetic needs n_points >= 2 and every >= 1".into()));
    }
    if !(p.omega_min > 0.0 && p.omega_max >= p.omega_min) {
        return Err(Error::Config("vehicle_synthetic needs 0 < omega_min <= omega_max".into()));
    }
    let model = ModelParams {
        dim: 2,
        t_end: (p.n_points - 1) as f64 * p.dt,
        dt: p.dt,
        diffusion: DiffusionSchedule::constant(p.g),
        drift: DriftKind::Zero,
        init: InitSampler::PointMass { point: vec![0.0, 0.0] },
    };
    let grid = model.grid()?;
    let mut rng = rng::stream(seed, &[domain::DATASET, 0]);
    // (amplitude, frequency, phase) per coordinate and harmonic
    let comps: Vec<Vec<(f64, f64, f64)>> = (0..2)
        .map(|_| {
            (0..p.n_harmonics)
                .map(|_| {
                    (
                        p.amplitude * rng.random_range(0.5..1.5),
                        rng.random_range(p.omega_min..=p.omega_max),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect()
        })
        .collect();
    let mut states = Vec::with_capacity(grid.len() * 2);
    for (j, &t) in grid.times().iter().enumerate() {
        for c in &comps {
            let smooth: f64 = c.iter().map(|&(a, w, ph)| a * ((w * t + ph).sin() - ph.sin())).sum();
            let jitter = if j == 0 { 0.0 } else { p.track_noise * normal(&mut rng) };
            states.push(smooth + jitter);
        }
    }
    let truth = Trajectory::new(grid.clone(), 2, states)?;
    let slots = (0..grid.len())
        .step_by(p.every)
        .map(|j| ObservedSlot {
            params: SlotParams { time: grid.time(j), sigma_obs: p.sigma_obs, neighbors: None, terminal: false },
            points: vec![truth.state(j).to_vec()],
        })
        .collect();
    Ok(Dataset {
        name: ExperimentName::VehicleSynthetic,
        seed,
        model,
        slots,
        truth: Some(truth),
        generator: serde_json::to_value(p)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginalParams {
    pub dim: usize,
    pub t_end: f64,
    pub dt: f64,
    pub g: f64,
    pub sigma_obs: f64,
    pub neighbors: usize,
    /// Observation times; used with `files` or for the synthetic marginals.
    pub times: Vec<f64>,
    /// One CSV of samples per entry of `times`. Empty selects the built-in
    /// synthetic marginals.
    pub files: Vec<PathBuf>,
    /// Samples per synthetic marginal.
    pub n_per_time: usize,
}

impl Default for MarginalParams {
    fn default() -> Self {
        MarginalParams {
            dim: 5,
            t_end: 4.0,
            dt: 0.01,
            g: 1.0,
            sigma_obs: 0.3,
            neighbors: 5,
            times: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            files: Vec::new(),
            n_per_time: 500,
        }
    }
}

/// One nearest-neighbour slot per file at the matching time; the slot at
/// the grid's final time is the terminal slot.
pub fn load_marginals_csv(
    paths: &[PathBuf],
    times: &[f64],
    grid: &TimeGrid,
    sigma_obs: f64,
    neighbors: usize,
) -> Result<ObservationSet> {
    let slots = read_marginal_files(paths, times, grid, sigma_obs, neighbors)?;
    let dim = slots[0].points[0].len();
    build_observation_set(grid, dim, &slots)
}

fn read_marginal_files(
    paths: &[PathBuf],
    times: &[f64],
    grid: &TimeGrid,
    sigma_obs: f64,
    neighbors: usize,
) -> Result<Vec<ObservedSlot>> {
    if paths.is_empty() || paths.len() != times.len() {
        return Err(Error::Config(format!("{} marginal files for {} times", paths.len(), times.len())));
    }
    let mut slots: Vec<ObservedSlot> = Vec::new();
    let mut dim = None;
    for (path, &t) in paths.iter().zip(times) {
        let table = io::read_numeric_csv(path)?;
        if table.rows.is_empty() {
            return Err(Error::Parse { path: path.clone(), line: 1, msg: "no samples in file".into() });
        }
        let d = table.header.len();
        if *dim.get_or_insert(d) != d {
            return Err(Error::Parse { path: path.clone(), line: 1, msg: format!("expected {} columns, found {d}", dim.unwrap_or(d)) });
        }
        let j = grid.index_of(t)?;
        if slots.iter().any(|s| grid.index_of(s.params.time).ok() == Some(j)) {
            return Err(Error::Config(format!("duplicate marginal time {t} ({})", path.display())));
        }
        slots.push(ObservedSlot {
            params: SlotParams { time: grid.time(j), sigma_obs, neighbors: Some(neighbors), terminal: j == grid.n_steps() },
            points: table.rows.into_iter().map(|(_, r)| r).collect(),
        });
    }
    Ok(slots)
}

/// Samples of a branching 5-D-style population: each point follows one of
/// two drifting Gaussian clusters that separate over time.
fn synthetic_marginal<R: Rng + ?Sized>(t: f64, dim: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let branch = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let spread = 0.3 + 0.05 * t;
            (0..dim)
                .map(|k| {
                    let centre = match k {
                        0 => 0.8 * t,
                        1 => 0.3 * branch * t,
                        2 => 0.2 * (t * PI / 2.0).sin(),
                        _ => 0.0,
                    };
                    centre + spread * normal(rng)
                })
                .collect()
        })
        .collect()
}

/// Marginal-only observations under Brownian motion with `g` constant. The
/// initial law is the empirical distribution of the samples at `t = 0`.
pub fn gen_marginal_transport(p: &MarginalParams, seed: u64) -> Result<Dataset> {
    let grid = TimeGrid::uniform(0.0, p.t_end, p.dt)?;
    let slots = if p.files.is_empty() {
        if p.dim == 0 || p.n_per_time < p.neighbors {
            return Err(Error::Config("marginal_transport needs dim >= 1 and n_per_time >= neighbors".into()));
        }
        let mut out = Vec::new();
        for (k, &t) in p.times.iter().enumerate() {
            let j = grid.index_of(t)?;
            let mut rng = rng::stream(seed, &[domain::DATASET, k as u64]);
            out.push(ObservedSlot {
                params: SlotParams {
                    time: grid.time(j),
                    sigma_obs: p.sigma_obs,
                    neighbors: Some(p.neighbors),
                    terminal: j == grid.n_steps(),
                },
                points: synthetic_marginal(grid.time(j), p.dim, p.n_per_time, &mut rng),
            });
        }
        out
    } else {
        read_marginal_files(&p.files, &p.times, &grid, p.sigma_obs, p.neighbors)?
    };
    let first = slots.iter().min_by(|a, b| a.params.time.total_cmp(&b.params.time));
    let init = match first {
        Some(s) if grid.index_of(s.params.time)? == 0 => InitSampler::Empirical { points: s.points.clone() },
        _ => return Err(Error::Config("marginal_transport needs a marginal at t = 0 for the initial law".into())),
    };
    let dim = slots[0].points[0].len();
    let model = ModelParams { dim, t_end: p.t_end, dt: p.dt, diffusion: DiffusionSchedule::constant(p.g), drift: DriftKind::Zero, init };
    Ok(Dataset {
        name: ExperimentName::MarginalTransport,
        seed,
        model,
        slots,
        truth: None,
        generator: serde_json::to_value(p)?,
    })
}
