//! Mean-matching training of a [`DriftNet`] on smoother output, and
//! sampling from the learned SDE.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::net::{DriftNet, TrainingBatch};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::sde::{DiffusionSchedule, InitSampler, TimeGrid, Trajectory};
use crate::smoother::ReferenceTrajectory;

/// Every `(x_{t_j}, t_j, Δ_j, x^diff_j)` tuple of a set of references.
#[derive(Debug, Clone)]
pub struct TrainingPool {
    samples: TrainingBatch,
}

impl TrainingPool {
    pub fn from_references(refs: &[ReferenceTrajectory]) -> Result<Self> {
        let first = refs.first().ok_or_else(|| Error::Contract("no reference trajectories to train on".into()))?;
        let d = first.states.dim();
        let mut samples = TrainingBatch::new(d);
        for r in refs {
            if r.states.dim() != d {
                return Err(Error::Contract("reference trajectories differ in dimension".into()));
            }
            let grid = r.grid();
            for j in 0..grid.n_steps() {
                samples.push(r.states.state(j), grid.time(j), grid.delta(j), r.diff(j));
            }
        }
        Ok(TrainingPool { samples })
    }

    pub fn from_batch(samples: TrainingBatch) -> Self {
        TrainingPool { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim
    }

    pub fn as_batch(&self) -> &TrainingBatch {
        &self.samples
    }

    fn gather(&self, idx: &[usize], out: &mut TrainingBatch) {
        let d = self.samples.dim;
        out.clear();
        for &i in idx {
            let s = &self.samples;
            out.push(&s.xs[i * d..(i + 1) * d], s.ts[i], s.deltas[i], &s.targets[i * d..(i + 1) * d]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on the whole pool before the first update.
    pub initial_loss: f64,
    /// Loss on the whole pool after the last update.
    pub final_loss: f64,
    /// Mean mini-batch loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub n_samples: usize,
    pub n_updates: usize,
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl OptState {
    fn apply(&mut self, opt: Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        match opt {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for k in 0..params.len() {
                    let g = grad[k];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    let mh = self.m[k] / c1;
                    let vh = self.v[k] / c2;
                    params[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Epoch callback: `(epoch, mean batch loss)`.
pub type EpochProgress<'a> = &'a (dyn Fn(usize, f64) + Sync);

/// Train on every tuple of `refs`.
pub fn train(net: DriftNet, refs: &[ReferenceTrajectory], opts: &TrainOptions) -> Result<(DriftNet, TrainReport)> {
    let pool = TrainingPool::from_references(refs)?;
    train_on_pool(net, &pool, opts, None)
}

/// Mini-batch descent on the mean-matching loss. Epoch `e` visits the pool
/// in an order drawn from `(seed, e)`; the last batch of an epoch may be
/// short.
pub fn train_on_pool(
    mut net: DriftNet,
    pool: &TrainingPool,
    opts: &TrainOptions,
    progress: Option<EpochProgress<'_>>,
) -> Result<(DriftNet, TrainReport)> {
    opts.validate()?;
    if pool.is_empty() {
        return Err(Error::Contract("empty training pool".into()));
    }
    if pool.dim() != net.dim() {
        return Err(Error::Contract(format!("pool dimension {} does not match network dimension {}", pool.dim(), net.dim())));
    }
    let initial_loss = net.loss(pool.as_batch())?;
    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = TrainingBatch::new(pool.dim());
    let mut state = OptState { m: vec![0.0; net.n_params()], v: vec![0.0; net.n_params()], step: 0 };
    let mut loss_curve = Vec::with_capacity(opts.epochs);
    let mut n_updates = 0;
    for epoch in 0..opts.epochs {
        let mut rng = rng::stream(opts.seed, &[domain::TRAIN_SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n_batches = 0;
        for (b, idx) in order.chunks(opts.batch_size).enumerate() {
            pool.gather(idx, &mut batch);
            let (loss, grad) = net.loss_and_grad(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, batch: b, loss });
            }
            if opts.learning_rate > 0.0 {
                state.apply(opts.optimizer, opts.learning_rate, net.params_mut(), &grad);
            }
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, batch: b, loss });
            }
            sum += loss;
            n_batches += 1;
            n_updates += 1;
        }
        let mean = sum / n_batches as f64;
        loss_curve.push(mean);
        if let Some(p) = progress {
            p(epoch, mean);
        }
    }
    let final_loss = net.loss(pool.as_batch())?;
    Ok((net, TrainReport { initial_loss, final_loss, loss_curve, n_samples: n, n_updates }))
}

/// Euler-Maruyama paths of `dx = f_θ(x,t) dt + g(t) dβ`. All paths advance
/// together through batched network calls; path `p` draws from its own
/// stream, so the result equals `sde::simulate` with the network as drift.
pub fn sample_learned(
    net: &DriftNet,
    diffusion: &DiffusionSchedule,
    init: &InitSampler,
    grid: &Arc<TimeGrid>,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_paths == 0 {
        return Err(Error::Contract("sampling needs at least one path".into()));
    }
    let d = net.dim();
    init.validate(d)?;
    diffusion.validate()?;
    let mut rngs: Vec<_> = (0..n_paths).map(|p| rng::stream(seed, &[domain::SIMULATE, p as u64])).collect();
    let mut paths = vec![vec![0.0; grid.len() * d]; n_paths];
    let mut current = vec![0.0; n_paths * d];
    for (p, r) in rngs.iter_mut().enumerate() {
        init.sample_into(r, &mut current[p * d..(p + 1) * d]);
        paths[p][..d].copy_from_slice(&current[p * d..(p + 1) * d]);
    }
    for j in 0..grid.n_steps() {
        let (t, dt) = (grid.time(j), grid.delta(j));
        let ts = vec![t; n_paths];
        let f = net.forward_batch(&current, &ts)?;
        let scale = diffusion.eval(t) * dt.sqrt();
        for (p, r) in rngs.iter_mut().enumerate() {
            for k in 0..d {
                let z: f64 = r.sample(StandardNormal);
                let i = p * d + k;
                if !f[i].is_finite() {
                    return Err(Error::Divergence { t, x: current[p * d..(p + 1) * d].to_vec() });
                }
                current[i] = current[i] + f[i] * dt + scale * z;
            }
            paths[p][(j + 1) * d..(j + 2) * d].copy_from_slice(&current[p * d..(p + 1) * d]);
        }
    }
    paths.into_iter().map(|s| Trajectory::new(grid.clone(), d, s)).collect()
}
