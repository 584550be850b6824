//! Particle smoothing by iterated conditional particle filtering with
//! ancestor sampling (CPF-AS).
//!
//! A chain starts from a reference path drawn from a bootstrap particle
//! filter (`init_reference`), then repeatedly runs `cpfas_sweep`: a particle
//! filter in which the last particle is pinned to the current reference and
//! its ancestor is resampled with probability proportional to
//! `w_j^i · p(z_{j+1} | x_j^i)`. The path selected by the terminal weights
//! becomes the next reference. Post-burn-in references are draws from the
//! smoothing distribution.
//!
//! Every sweep also records, per particle and step, the mean-change target
//! `x^diff_j = (x_{j+1} - x_j) + Δ_j (f(x_{j+1}, t_j) - f(x_j, t_j))` along
//! the particle's own lineage. Genealogies are stored as ancestor tables and
//! traced back at the end of the sweep, which yields exactly the histories
//! that per-step copying from ancestors would produce.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observations::{normalize_log_weights, ObservationSet, StepWeights};
use crate::rng::{self, domain, StreamRng};
use crate::sde::{em_step_into, gaussian_logpdf_iso, Drift, SdeModel, TimeGrid, Trajectory};

/// How ancestor indices are drawn from normalized weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub seed: u64,
    #[serde(default)]
    pub resampling: Resampling,
}

impl ChainConfig {
    /// Burn-in defaults to half the chain.
    pub fn new(n_particles: usize, n_iterations: usize, n_chains: usize, seed: u64) -> Self {
        ChainConfig {
            n_particles,
            n_iterations,
            burn_in: n_iterations / 2,
            n_chains,
            seed,
            resampling: Resampling::Multinomial,
        }
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_iterations == 0 || self.n_chains == 0 {
            return Err(Error::Config(format!(
                "particle, iteration and chain counts must be >= 1 (got {}, {}, {})",
                self.n_particles, self.n_iterations, self.n_chains
            )));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        Ok(())
    }

    /// Seed of chain `c` in a parallel run.
    pub fn chain_seed(&self, chain: usize) -> u64 {
        rng::derive_seed(self.seed, &[domain::CHAIN, chain as u64])
    }
}

/// A retained path and its mean-change records.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub states: Trajectory,
    /// `N_T × d` row-major; row `j` belongs to the step `t_j → t_{j+1}`.
    pub diffs: Vec<f64>,
    /// Particle index occupied by this path at each grid point during the
    /// sweep that produced it. Empty when built outside a sweep.
    pub lineage: Vec<usize>,
}

impl ReferenceTrajectory {
    /// Wrap a path, computing its diffs under `drift`.
    pub fn from_states(states: Trajectory, drift: &dyn Drift) -> Self {
        let d = states.dim();
        let grid = states.grid().clone();
        let mut diffs = vec![0.0; grid.n_steps() * d];
        let mut scratch = vec![0.0; 2 * d];
        for j in 0..grid.n_steps() {
            record_diff_into(
                states.state(j),
                states.state(j + 1),
                drift,
                grid.time(j),
                grid.delta(j),
                &mut scratch,
                &mut diffs[j * d..(j + 1) * d],
            );
        }
        ReferenceTrajectory { states, diffs, lineage: Vec::new() }
    }

    pub fn diff(&self, j: usize) -> &[f64] {
        let d = self.states.dim();
        &self.diffs[j * d..(j + 1) * d]
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        self.states.grid()
    }
}

fn record_diff_into(x_j: &[f64], x_j1: &[f64], f: &dyn Drift, t_j: f64, dt: f64, scratch: &mut [f64], out: &mut [f64]) {
    let d = x_j.len();
    let (f_j, f_j1) = scratch.split_at_mut(d);
    f.eval(x_j, t_j, f_j);
    f.eval(x_j1, t_j, f_j1);
    for k in 0..d {
        out[k] = (x_j1[k] - x_j[k]) + dt * (f_j1[k] - f_j[k]);
    }
}

/// Mean-change record `(x_{j+1} - x_j) + dt·(f(x_{j+1}, t_j) - f(x_j, t_j))`.
/// Both drift evaluations use `t_j`.
pub fn record_diff(x_j: &[f64], x_j1: &[f64], f: &dyn Drift, t_j: f64, dt: f64) -> Vec<f64> {
    let mut scratch = vec![0.0; 2 * x_j.len()];
    let mut out = vec![0.0; x_j.len()];
    record_diff_into(x_j, x_j1, f, t_j, dt, &mut scratch, &mut out);
    out
}

/// Per-sweep particle system: `N` particles over the whole grid, stored as
/// per-step state blocks plus ancestor tables.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    n: usize,
    dim: usize,
    /// `(N_T + 1) × N × d`.
    states: Vec<f64>,
    /// `N_T × N`; `ancestors[j][i]` is the index at step `j` of particle `i`
    /// at step `j + 1`.
    ancestors: Vec<usize>,
    /// `N_T × N × d`; mean-change record of particle `i` for step `j → j+1`.
    diffs: Vec<f64>,
    /// Log-weights after the most recent step (`None` = uniform).
    log_weights: Option<Vec<f64>>,
    /// Steps filled so far (grid points with states).
    filled: usize,
}

impl ParticleEnsemble {
    fn new(n: usize, dim: usize, n_steps: usize) -> Self {
        ParticleEnsemble {
            n,
            dim,
            states: vec![0.0; (n_steps + 1) * n * dim],
            ancestors: vec![0; n_steps * n],
            diffs: vec![0.0; n_steps * n * dim],
            log_weights: None,
            filled: 0,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.n
    }

    /// States of all particles at step `j`, `N × d`.
    pub fn step_states(&self, j: usize) -> &[f64] {
        let block = self.n * self.dim;
        &self.states[j * block..(j + 1) * block]
    }

    pub fn state(&self, j: usize, i: usize) -> &[f64] {
        let off = (j * self.n + i) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn ancestor(&self, j: usize, i: usize) -> usize {
        self.ancestors[j * self.n + i]
    }

    pub fn log_weights(&self) -> Option<&[f64]> {
        self.log_weights.as_deref()
    }

    /// Particle indices of the path ending at particle `i` of the last
    /// filled step, from step 0 forward.
    pub fn lineage(&self, i: usize) -> Vec<usize> {
        let last = self.filled - 1;
        let mut idx = vec![0; last + 1];
        idx[last] = i;
        for j in (0..last).rev() {
            idx[j] = self.ancestor(j, idx[j + 1]);
        }
        idx
    }

    /// Full state history of particle `i` (rows `0..filled`).
    pub fn trajectory(&self, i: usize) -> Vec<f64> {
        self.lineage(i).iter().enumerate().flat_map(|(j, &k)| self.state(j, k).iter().copied()).collect()
    }

    /// Mean-change history of particle `i` (rows `0..filled-1`).
    pub fn diff_history(&self, i: usize) -> Vec<f64> {
        let lin = self.lineage(i);
        (0..lin.len() - 1)
            .flat_map(|j| {
                let off = (j * self.n + lin[j + 1]) * self.dim;
                self.diffs[off..off + self.dim].iter().copied()
            })
            .collect()
    }

    fn into_reference(self, grid: &Arc<TimeGrid>, i: usize) -> Result<ReferenceTrajectory> {
        let lineage = self.lineage(i);
        let states = self.trajectory(i);
        let diffs = self.diff_history(i);
        Ok(ReferenceTrajectory { states: Trajectory::new(grid.clone(), self.dim, states)?, diffs, lineage })
    }
}

fn probabilities(weights: &StepWeights, n: usize, step: usize) -> Result<Option<Vec<f64>>> {
    match weights {
        StepWeights::Uniform => Ok(None),
        StepWeights::Log(lw) => {
            debug_assert_eq!(lw.len(), n);
            normalize_log_weights(lw).map(Some).map_err(|e| e.at_step(step))
        }
    }
}

fn categorical<R: Rng + ?Sized>(probs: Option<&[f64]>, n: usize, rng: &mut R) -> usize {
    match probs {
        None => rng.random_range(0..n),
        Some(p) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            // rounding left u above the last partial sum
            p.iter().rposition(|&pi| pi > 0.0).unwrap_or(n - 1)
        }
    }
}

/// Draw `count` ancestor indices from `probs` (`None` = uniform over `n`).
fn resample<R: Rng + ?Sized>(scheme: Resampling, probs: Option<&[f64]>, n: usize, count: usize, rng: &mut R, out: &mut Vec<usize>) {
    out.clear();
    if count == 0 {
        return;
    }
    let Some(p) = probs else {
        match scheme {
            Resampling::Multinomial => out.extend((0..count).map(|_| rng.random_range(0..n))),
            _ => {
                let uniform = vec![1.0 / n as f64; n];
                resample(scheme, Some(&uniform), n, count, rng, out);
            }
        }
        return;
    };
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &pi in p {
        acc += pi;
        cdf.push(acc);
    }
    let last_positive = p.iter().rposition(|&pi| pi > 0.0).unwrap_or(n - 1);
    let locate = |u: f64| cdf.partition_point(|&c| c <= u).min(last_positive);
    match scheme {
        Resampling::Multinomial => {
            for _ in 0..count {
                let u: f64 = rng.random::<f64>() * acc;
                out.push(locate(u));
            }
        }
        Resampling::Systematic => {
            let u0: f64 = rng.random();
            for k in 0..count {
                out.push(locate(acc * (k as f64 + u0) / count as f64));
            }
        }
        Resampling::Stratified => {
            for k in 0..count {
                let u: f64 = rng.random();
                out.push(locate(acc * (k as f64 + u) / count as f64));
            }
        }
    }
}

/// Result of a bootstrap filter run.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub reference: ReferenceTrajectory,
    /// Weighted particle mean at every grid point, `(N_T + 1) × d`.
    pub filter_means: Vec<f64>,
    pub ensemble: ParticleEnsemble,
}

fn weighted_mean(states: &[f64], probs: Option<&[f64]>, n: usize, d: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        let w = probs.map_or(1.0 / n as f64, |p| p[i]);
        for k in 0..d {
            out[k] += w * states[i * d + k];
        }
    }
}

/// Shared body of the bootstrap filter and the conditional sweep.
fn run_filter<R: Rng + ?Sized>(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    n: usize,
    reference: Option<&ReferenceTrajectory>,
    scheme: Resampling,
    rng: &mut R,
    mut filter_means: Option<&mut Vec<f64>>,
) -> Result<ParticleEnsemble> {
    let d = model.dim;
    if n == 0 {
        return Err(Error::Config("need at least one particle".into()));
    }
    if obs.state_dim() != d {
        return Err(Error::Contract(format!(
            "observation set expects state dimension {}, model has {d}",
            obs.state_dim()
        )));
    }
    if let Some(r) = reference {
        if r.states.grid().as_ref() != grid.as_ref() || r.states.dim() != d {
            return Err(Error::Contract("reference trajectory is not defined on the sweep's grid".into()));
        }
    }
    let n_steps = grid.n_steps();
    let n_free = if reference.is_some() { n - 1 } else { n };
    let mut ens = ParticleEnsemble::new(n, d, n_steps);

    for i in 0..n_free {
        model.init.sample_into(rng, &mut ens.states[i * d..(i + 1) * d]);
    }
    if let Some(r) = reference {
        ens.states[(n - 1) * d..n * d].copy_from_slice(r.states.state(0));
    }
    ens.filled = 1;
    let mut weights = obs.weights_at(0, ens.step_states(0))?;
    let mut probs = probabilities(&weights, n, 0)?;
    if let Some(m) = filter_means.as_deref_mut() {
        m.resize(grid.len() * d, 0.0);
        weighted_mean(ens.step_states(0), probs.as_deref(), n, d, &mut m[..d]);
    }

    let mut ancestors = Vec::with_capacity(n);
    let mut noise = vec![0.0; d];
    let mut drift_buf = vec![0.0; d];
    let mut scratch = vec![0.0; 2 * d];
    let mut mean = vec![0.0; d];
    let block = n * d;

    for j in 0..n_steps {
        let t = grid.time(j);
        let dt = grid.delta(j);

        // ancestor of the pinned reference particle
        let ref_ancestor = match reference {
            Some(r) if n > 1 => {
                let z_next = r.states.state(j + 1);
                let g = model.diffusion.eval(t);
                if g == 0.0 {
                    return Err(Error::DegenerateTransition { t });
                }
                let var = g * g * dt;
                let prev = &ens.states[j * block..(j + 1) * block];
                let mut lp = Vec::with_capacity(n);
                for i in 0..n {
                    let x = &prev[i * d..(i + 1) * d];
                    model.drift_checked(x, t, &mut mean)?;
                    for k in 0..d {
                        mean[k] = x[k] + mean[k] * dt;
                    }
                    let lw = match &weights {
                        StepWeights::Uniform => 0.0,
                        StepWeights::Log(v) => v[i],
                    };
                    lp.push(lw + gaussian_logpdf_iso(z_next, &mean, var));
                }
                let p = normalize_log_weights(&lp).map_err(|e| e.at_step(j + 1))?;
                Some(categorical(Some(&p), n, rng))
            }
            Some(_) => Some(0),
            None => None,
        };

        resample(scheme, probs.as_deref(), n, n_free, rng, &mut ancestors);
        if let Some(a) = ref_ancestor {
            ancestors.push(a);
        }
        ens.ancestors[j * n..(j + 1) * n].copy_from_slice(&ancestors);

        let (past, future) = ens.states.split_at_mut((j + 1) * block);
        let prev = &past[j * block..];
        let next = &mut future[..block];
        let diffs = &mut ens.diffs[j * block..(j + 1) * block];
        for i in 0..n_free {
            let a = ancestors[i];
            noise.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
            let x_prev = &prev[a * d..(a + 1) * d];
            em_step_into(model, x_prev, t, dt, &noise, &mut drift_buf, &mut next[i * d..(i + 1) * d])?;
            record_diff_into(x_prev, &next[i * d..(i + 1) * d], model.drift.as_ref(), t, dt, &mut scratch, &mut diffs[i * d..(i + 1) * d]);
        }
        if let (Some(r), Some(a)) = (reference, ref_ancestor) {
            let i = n - 1;
            next[i * d..(i + 1) * d].copy_from_slice(r.states.state(j + 1));
            let x_prev = &prev[a * d..(a + 1) * d];
            record_diff_into(x_prev, r.states.state(j + 1), model.drift.as_ref(), t, dt, &mut scratch, &mut diffs[i * d..(i + 1) * d]);
        }
        ens.filled = j + 2;

        weights = obs.weights_at(j + 1, ens.step_states(j + 1))?;
        probs = probabilities(&weights, n, j + 1)?;
        if let Some(m) = filter_means.as_deref_mut() {
            weighted_mean(ens.step_states(j + 1), probs.as_deref(), n, d, &mut m[(j + 1) * d..(j + 2) * d]);
        }
    }
    ens.log_weights = match weights {
        StepWeights::Uniform => None,
        StepWeights::Log(v) => Some(v),
    };
    Ok(ens)
}

fn select_terminal<R: Rng + ?Sized>(ens: &ParticleEnsemble, rng: &mut R) -> Result<usize> {
    let n = ens.n;
    let probs = match &ens.log_weights {
        None => None,
        Some(lw) => Some(normalize_log_weights(lw).map_err(|e| e.at_step(ens.filled - 1))?),
    };
    Ok(categorical(probs.as_deref(), n, rng))
}

/// Bootstrap particle filter with per-step resampling. Returns the sampled
/// reference path together with filtering means and the full ensemble.
pub fn bootstrap_filter<R: Rng + ?Sized>(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    n_particles: usize,
    scheme: Resampling,
    rng: &mut R,
) -> Result<FilterRun> {
    let mut means = Vec::new();
    let ens = run_filter(model, obs, grid, n_particles, None, scheme, rng, Some(&mut means))?;
    let k = select_terminal(&ens, rng)?;
    let reference = ens.clone().into_reference(grid, k)?;
    Ok(FilterRun { reference, filter_means: means, ensemble: ens })
}

/// Initial reference path from a bootstrap filter.
pub fn init_reference<R: Rng + ?Sized>(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ReferenceTrajectory> {
    let ens = run_filter(model, obs, grid, cfg.n_particles, None, cfg.resampling, rng, None)?;
    let k = select_terminal(&ens, rng)?;
    ens.into_reference(grid, k)
}

/// One conditional sweep pinned to `reference`; returns the next reference.
pub fn cpfas_sweep<R: Rng + ?Sized>(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    reference: &ReferenceTrajectory,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ReferenceTrajectory> {
    cpfas_sweep_ensemble(model, obs, grid, reference, cfg, rng).map(|(r, _)| r)
}

/// Like [`cpfas_sweep`], also returning the particle system of the sweep.
pub fn cpfas_sweep_ensemble<R: Rng + ?Sized>(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    reference: &ReferenceTrajectory,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<(ReferenceTrajectory, ParticleEnsemble)> {
    let ens = run_filter(model, obs, grid, cfg.n_particles, Some(reference), cfg.resampling, rng, None)?;
    let k = select_terminal(&ens, rng)?;
    let next = ens.clone().into_reference(grid, k)?;
    Ok((next, ens))
}

/// Post-burn-in output of one chain.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub chain_id: usize,
    pub seed: u64,
    pub references: Vec<ReferenceTrajectory>,
    /// Fraction of sweeps whose output path differs from its input path.
    pub change_rate: f64,
}

/// Progress callback: `(chain_id, iterations_done, n_iterations)`.
pub type Progress<'a> = &'a (dyn Fn(usize, usize, usize) + Sync);

/// `init_reference` followed by `n_iterations` sweeps, keeping the
/// references produced after `burn_in`. Uses `cfg.seed` as the chain seed.
pub fn run_chain(model: &SdeModel, obs: &ObservationSet, grid: &Arc<TimeGrid>, cfg: &ChainConfig) -> Result<ChainRun> {
    run_chain_seeded(model, obs, grid, cfg, 0, cfg.seed, None)
}

fn run_chain_seeded(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    cfg: &ChainConfig,
    chain_id: usize,
    seed: u64,
    progress: Option<Progress<'_>>,
) -> Result<ChainRun> {
    cfg.validate()?;
    let mut rng: StreamRng = rng::stream(seed, &[domain::CHAIN]);
    let mut reference = init_reference(model, obs, grid, cfg, &mut rng)?;
    let mut kept = Vec::with_capacity(cfg.n_iterations - cfg.burn_in);
    let mut changes = 0usize;
    for m in 0..cfg.n_iterations {
        let next = cpfas_sweep(model, obs, grid, &reference, cfg, &mut rng)?;
        if next.states != reference.states {
            changes += 1;
        }
        reference = next;
        if m >= cfg.burn_in {
            kept.push(reference.clone());
        }
        if let Some(p) = progress {
            p(chain_id, m + 1, cfg.n_iterations);
        }
    }
    Ok(ChainRun { chain_id, seed, references: kept, change_rate: changes as f64 / cfg.n_iterations as f64 })
}

/// `cfg.n_chains` independent chains with seeds derived from
/// `(cfg.seed, chain_index)`, returned in chain order.
pub fn run_chains_parallel(
    model: &SdeModel,
    obs: &ObservationSet,
    grid: &Arc<TimeGrid>,
    cfg: &ChainConfig,
    progress: Option<Progress<'_>>,
) -> Result<Vec<ChainRun>> {
    cfg.validate()?;
    (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            run_chain_seeded(model, obs, grid, cfg, c, cfg.chain_seed(c), progress)
                .map_err(|e| Error::Chain { chain: c, source: Box::new(e) })
        })
        .collect()
}

/// The same chains run one after another.
pub fn run_chains_sequential(model: &SdeModel, obs: &ObservationSet, grid: &Arc<TimeGrid>, cfg: &ChainConfig) -> Result<Vec<ChainRun>> {
    cfg.validate()?;
    (0..cfg.n_chains)
        .map(|c| {
            run_chain_seeded(model, obs, grid, cfg, c, cfg.chain_seed(c), None)
                .map_err(|e| Error::Chain { chain: c, source: Box::new(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observations::ObservationSlot;
    use crate::sde::{DiffusionSchedule, InitSampler, LinearDrift, ZeroDrift};

    fn bm_model(g: f64) -> SdeModel {
        SdeModel::new(Arc::new(ZeroDrift), DiffusionSchedule::constant(g), 1, InitSampler::PointMass { point: vec![0.0] }).unwrap()
    }

    fn grid(t: f64, dt: f64) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(0.0, t, dt).unwrap())
    }

    fn obs_1d(slots: &[(usize, f64)], sigma: f64) -> ObservationSet {
        let mut o = ObservationSet::new(1);
        for &(j, y) in slots {
            o.insert(ObservationSlot::single(j, vec![y], sigma).unwrap()).unwrap();
        }
        o
    }

    #[test]
    fn record_diff_examples() {
        let x = [0.3, -1.2];
        let y = [0.5, 2.0];
        assert_eq!(record_diff(&x, &y, &ZeroDrift, 0.0, 0.1), vec![0.5 - 0.3, 2.0 - -1.2]);
        assert_eq!(record_diff(&x, &x, &crate::sde::DoubleWellDrift, 0.0, 0.1), vec![0.0, 0.0]);
        // f(x) = a x: (x1 - x0)(1 + a dt)
        let a = -0.7;
        let lin = LinearDrift::scalar(a);
        let got = record_diff(&[0.4], &[1.1], &lin, 0.0, 0.05)[0];
        assert!((got - (1.1 - 0.4) * (1.0 + a * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn chain_config_validation() {
        assert!(ChainConfig::new(10, 10, 1, 0).validate().is_ok());
        assert_eq!(ChainConfig::new(10, 10, 1, 0).burn_in, 5);
        assert!(ChainConfig::new(10, 10, 1, 0).with_burn_in(10).validate().is_err());
        assert!(ChainConfig::new(0, 10, 1, 0).validate().is_err());
        assert!(ChainConfig::new(1, 10, 0, 0).validate().is_err());
    }

    #[test]
    fn deterministic_reference_without_noise_or_observations() {
        let model = SdeModel::new(
            Arc::new(crate::sde::DoubleWellDrift),
            DiffusionSchedule::constant(0.0),
            1,
            InitSampler::PointMass { point: vec![0.3] },
        )
        .unwrap();
        let g = grid(1.0, 0.01);
        let cfg = ChainConfig::new(16, 2, 1, 3);
        let r = init_reference(&model, &ObservationSet::new(1), &g, &cfg, &mut rng::stream(1, &[])).unwrap();
        let euler = crate::sde::simulate(&model, &g, 1, 0).unwrap().remove(0);
        assert_eq!(r.states, euler);
    }

    #[test]
    fn single_particle_filter_is_the_simulated_path() {
        let model = bm_model(1.0);
        let g = grid(1.0, 0.1);
        let obs = obs_1d(&[(5, 3.0)], 0.1);
        let cfg = ChainConfig::new(1, 2, 1, 0);
        let mut rng = rng::stream(4, &[]);
        let run = bootstrap_filter(&model, &obs, &g, 1, Resampling::Multinomial, &mut rng).unwrap();
        assert_eq!(run.reference.lineage, vec![0; g.len()]);
        let r = init_reference(&model, &obs, &g, &cfg, &mut rng).unwrap();
        assert_eq!(r.states.len(), g.len());
    }

    #[test]
    fn single_particle_sweep_is_identity() {
        let model = bm_model(1.0);
        let g = grid(1.0, 0.01);
        let obs = obs_1d(&[(20, 0.5), (70, -0.4)], 0.3);
        let cfg = ChainConfig::new(1, 4, 1, 9);
        let mut rng = rng::stream(2, &[]);
        let r0 = init_reference(&model, &obs, &g, &ChainConfig::new(50, 4, 1, 9), &mut rng).unwrap();
        let r1 = cpfas_sweep(&model, &obs, &g, &r0, &cfg, &mut rng).unwrap();
        assert_eq!(r1.states, r0.states);
        assert_eq!(r1.diffs, r0.diffs);
    }

    #[test]
    fn lineage_histories_are_consistent() {
        let model = SdeModel::new(
            Arc::new(crate::sde::DoubleWellDrift),
            DiffusionSchedule::constant(0.8),
            1,
            InitSampler::Gaussian { mean: vec![0.0], std: vec![0.5] },
        )
        .unwrap();
        let g = grid(2.0, 0.02);
        let obs = obs_1d(&[(25, 1.0), (50, -1.0), (100, 0.9)], 0.2);
        let cfg = ChainConfig::new(32, 3, 1, 1);
        let mut rng = rng::stream(11, &[]);
        let r0 = init_reference(&model, &obs, &g, &cfg, &mut rng).unwrap();
        let (r1, ens) = cpfas_sweep_ensemble(&model, &obs, &g, &r0, &cfg, &mut rng).unwrap();
        for r in [&r0, &r1] {
            let expect = ReferenceTrajectory::from_states(r.states.clone(), model.drift.as_ref());
            assert_eq!(r.diffs, expect.diffs);
            assert_eq!(r.lineage.len(), g.len());
        }
        // every particle's history is its ancestor's history plus one state
        for i in 0..cfg.n_particles {
            let lin = ens.lineage(i);
            let traj = ens.trajectory(i);
            let last = g.n_steps();
            let a = ens.ancestor(last - 1, i);
            let lin_a: Vec<usize> = {
                let mut v = vec![0; last];
                v[last - 1] = a;
                for j in (0..last - 1).rev() {
                    v[j] = ens.ancestor(j, v[j + 1]);
                }
                v
            };
            assert_eq!(&lin[..last], &lin_a[..]);
            assert_eq!(&traj[last..], ens.state(last, i));
            let hist = ens.diff_history(i);
            for j in 0..last {
                let want = record_diff(&traj[j..j + 1], &traj[j + 1..j + 2], model.drift.as_ref(), g.time(j), g.delta(j));
                assert_eq!(hist[j], want[0]);
            }
        }
        // reference particle sits on the input path
        let n = cfg.n_particles;
        for j in 0..g.len() {
            assert_eq!(ens.state(j, n - 1), r0.states.state(j));
        }
    }

    #[test]
    fn uniform_steps_keep_n_lineages() {
        let model = bm_model(1.0);
        let g = grid(0.5, 0.05);
        let cfg = ChainConfig::new(7, 2, 1, 0);
        let mut rng = rng::stream(5, &[]);
        let r0 = init_reference(&model, &ObservationSet::new(1), &g, &cfg, &mut rng).unwrap();
        let (_, ens) = cpfas_sweep_ensemble(&model, &ObservationSet::new(1), &g, &r0, &cfg, &mut rng).unwrap();
        assert!(ens.log_weights().is_none());
        for j in 0..g.len() {
            assert_eq!(ens.step_states(j).len(), 7);
        }
    }

    #[test]
    fn degenerate_transition_is_reported() {
        let model = bm_model(0.0);
        let g = grid(0.5, 0.05);
        let cfg = ChainConfig::new(4, 2, 1, 0);
        let mut rng = rng::stream(5, &[]);
        let r0 = init_reference(&model, &ObservationSet::new(1), &g, &cfg, &mut rng).unwrap();
        assert!(matches!(
            cpfas_sweep(&model, &ObservationSet::new(1), &g, &r0, &cfg, &mut rng),
            Err(Error::DegenerateTransition { .. })
        ));
    }

    #[test]
    fn chain_keeps_post_burn_in_references() {
        let model = bm_model(1.0);
        let g = grid(0.5, 0.05);
        let obs = obs_1d(&[(5, 0.2)], 0.3);
        let cfg = ChainConfig::new(10, 1, 1, 3).with_burn_in(0);
        let run = run_chain(&model, &obs, &g, &cfg).unwrap();
        assert_eq!(run.references.len(), 1);
        let mut rng = rng::stream(3, &[domain::CHAIN]);
        let r0 = init_reference(&model, &obs, &g, &cfg, &mut rng).unwrap();
        let r1 = cpfas_sweep(&model, &obs, &g, &r0, &cfg, &mut rng).unwrap();
        assert_eq!(run.references[0], r1);

        let cfg = ChainConfig::new(10, 40, 1, 3);
        let run = run_chain(&model, &obs, &g, &cfg).unwrap();
        assert_eq!(run.references.len(), 20);
        assert!(run.change_rate > 0.5);
    }

    #[test]
    fn parallel_chains_match_sequential() {
        let model = bm_model(1.0);
        let g = grid(0.5, 0.05);
        let obs = obs_1d(&[(5, 0.2), (10, -0.3)], 0.3);
        let cfg = ChainConfig::new(12, 10, 3, 77);
        let par = run_chains_parallel(&model, &obs, &g, &cfg, None).unwrap();
        let seq = run_chains_sequential(&model, &obs, &g, &cfg).unwrap();
        assert_eq!(par.len(), 3);
        for (a, b) in par.iter().zip(&seq) {
            assert_eq!(a.chain_id, b.chain_id);
            assert_eq!(a.references, b.references);
        }
        assert_ne!(par[0].references, par[1].references);
    }

    #[test]
    fn resampling_schemes_are_valid() {
        let p = [0.1, 0.0, 0.6, 0.3];
        let mut rng = rng::stream(8, &[]);
        let mut out = Vec::new();
        for scheme in [Resampling::Multinomial, Resampling::Systematic, Resampling::Stratified] {
            let mut counts = [0usize; 4];
            for _ in 0..2000 {
                resample(scheme, Some(&p), 4, 10, &mut rng, &mut out);
                assert_eq!(out.len(), 10);
                for &a in &out {
                    counts[a] += 1;
                }
            }
            assert_eq!(counts[1], 0, "{scheme:?}");
            let total = 20_000.0;
            for k in [0, 2, 3] {
                assert!((counts[k] as f64 / total - p[k]).abs() < 0.02, "{scheme:?} {counts:?}");
            }
        }
    }

    #[test]
    fn degenerate_weights_carry_step() {
        let model = bm_model(1.0);
        let g = grid(0.5, 0.05);
        let mut obs = ObservationSet::new(1);
        // a knn slot far away with tiny noise underflows every weight to zero only
        // through -inf; emulate with an infinite-distance observation
        obs.insert(ObservationSlot::single(3, vec![1e300], 1e-300).unwrap()).unwrap();
        let cfg = ChainConfig::new(5, 2, 1, 0);
        let err = init_reference(&model, &obs, &g, &cfg, &mut rng::stream(1, &[])).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights { step: Some(3) }), "{err}");
    }
}
