//! Particle filter and CPF-AS chains against exact Kalman / RTS moments.

#[path = "support/kalman.rs"]
mod kalman;

use std::sync::Arc;

use cpfas_core::observations::ObservationSlot;
use cpfas_core::rng;
use cpfas_core::sde::{LinearDrift, ZeroDrift};
use cpfas_core::smoother::{bootstrap_filter, run_chains_parallel, run_chains_sequential, ChainRun, Resampling};
use cpfas_core::{ChainConfig, DiffusionSchedule, Drift, InitSampler, ObservationSet, SdeModel, TimeGrid};
use kalman::LinearGaussian1d;

const DT: f64 = 0.01;
const SIGMA: f64 = 0.5;

fn setup(drift: Arc<dyn Drift>, obs: &[(usize, f64)]) -> (SdeModel, ObservationSet, Arc<TimeGrid>) {
    let model = SdeModel::new(
        drift,
        DiffusionSchedule::constant(1.0),
        1,
        InitSampler::Gaussian { mean: vec![0.0], std: vec![1.0] },
    )
    .unwrap();
    let mut set = ObservationSet::new(1);
    for &(j, y) in obs {
        set.insert(ObservationSlot::single(j, vec![y], SIGMA).unwrap()).unwrap();
    }
    (model, set, Arc::new(TimeGrid::uniform(0.0, 1.0, DT).unwrap()))
}

fn oracle(a: f64, obs: &[(usize, f64)]) -> LinearGaussian1d {
    LinearGaussian1d { a, q: vec![DT; 100], m0: 0.0, p0: 1.0, obs: obs.to_vec(), r: SIGMA * SIGMA }
}

const OBS: [(usize, f64); 5] = [(20, 0.4), (40, -0.3), (60, 0.6), (80, 1.1), (100, 0.7)];

#[test]
fn bootstrap_filter_means_match_kalman() {
    let (model, obs, grid) = setup(Arc::new(ZeroDrift), &OBS);
    let kf = oracle(1.0, &OBS).filter();
    let reps = 8;
    let runs: Vec<Vec<f64>> = (0..reps)
        .map(|r| {
            let mut g = rng::stream(11, &[r]);
            bootstrap_filter(&model, &obs, &grid, 2000, Resampling::Multinomial, &mut g).unwrap().filter_means
        })
        .collect();
    for &(j, _) in &OBS {
        let vals: Vec<f64> = runs.iter().map(|m| m[j]).collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - kf.mean[j]).abs() <= 4.0 * se + 1e-3, "slot {j}: {mean} vs {} (se {se})", kf.mean[j]);
    }
}

#[test]
fn systematic_and_stratified_filters_agree_with_kalman() {
    let (model, obs, grid) = setup(Arc::new(ZeroDrift), &OBS);
    let kf = oracle(1.0, &OBS).filter();
    for scheme in [Resampling::Systematic, Resampling::Stratified] {
        let mut g = rng::stream(5, &[]);
        let run = bootstrap_filter(&model, &obs, &grid, 20_000, scheme, &mut g).unwrap();
        for &(j, _) in &OBS {
            // 20k particles: Monte Carlo error well under 0.02 at these variances
            assert!((run.filter_means[j] - kf.mean[j]).abs() < 0.03, "{scheme:?} slot {j}");
        }
    }
}

/// Pooled mean/variance per grid index and a batch-means standard error
/// of the mean.
fn pooled(runs: &[ChainRun], j: usize) -> (f64, f64, f64) {
    let mut batch_means = Vec::new();
    let mut all = Vec::new();
    for run in runs {
        let xs: Vec<f64> = run.references.iter().map(|r| r.states.state(j)[0]).collect();
        let bs = xs.len() / 10;
        for b in xs.chunks_exact(bs) {
            batch_means.push(b.iter().sum::<f64>() / bs as f64);
        }
        all.extend(xs);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let k = batch_means.len() as f64;
    let bm = batch_means.iter().sum::<f64>() / k;
    let se = (batch_means.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
    (mean, var, se)
}

fn check_against_rts(drift: Arc<dyn Drift>, a: f64) {
    let (model, obs, grid) = setup(drift, &OBS);
    let rts = oracle(a, &OBS).smoother();
    let cfg = ChainConfig::new(64, 700, 3, 21).with_burn_in(100);
    let runs = run_chains_parallel(&model, &obs, &grid, &cfg, None).unwrap();
    for j in [0, 10, 20, 50, 80, 100] {
        let (mean, var, se) = pooled(&runs, j);
        assert!((mean - rts.mean[j]).abs() <= 4.0 * se.max(0.01), "j={j}: mean {mean} vs {} (se {se})", rts.mean[j]);
        assert!((var / rts.var[j] - 1.0).abs() < 0.2, "j={j}: var {var} vs {}", rts.var[j]);
    }
}

#[test]
fn cpfas_marginals_match_rts_for_brownian_motion() {
    check_against_rts(Arc::new(ZeroDrift), 1.0);
}

#[test]
fn cpfas_marginals_match_rts_for_ornstein_uhlenbeck() {
    check_against_rts(Arc::new(LinearDrift::scalar(-2.0)), 1.0 - 2.0 * DT);
}

#[test]
fn longer_chains_get_closer_to_rts() {
    let two = [(30, 0.8), (100, -0.5)];
    let (model, obs, grid) = setup(Arc::new(ZeroDrift), &two);
    let rts = oracle(1.0, &two).smoother();
    let err = |m: usize| {
        let cfg = ChainConfig::new(50, m, 4, 8).with_burn_in(m / 5);
        let runs = run_chains_parallel(&model, &obs, &grid, &cfg, None).unwrap();
        let mut e = 0.0;
        for run in &runs {
            for &(j, _) in &two {
                let mean = run.references.iter().map(|r| r.states.state(j)[0]).sum::<f64>() / run.references.len() as f64;
                e += (mean - rts.mean[j]).abs();
            }
        }
        e / runs.len() as f64
    };
    let (e100, e1000) = (err(100), err(1000));
    assert!(e1000 <= e100, "error grew: M=100 {e100}, M=1000 {e1000}");
}

#[test]
fn parallel_and_sequential_chains_are_identical() {
    let (model, obs, grid) = setup(Arc::new(ZeroDrift), &OBS);
    let cfg = ChainConfig::new(16, 20, 3, 99);
    let a = run_chains_parallel(&model, &obs, &grid, &cfg, None).unwrap();
    let b = run_chains_sequential(&model, &obs, &grid, &cfg).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.references, y.references);
    }
    assert_ne!(a[0].references, a[1].references);
}

#[test]
fn terminal_samples_pin_the_endpoint() {
    let model = SdeModel::new(Arc::new(ZeroDrift), DiffusionSchedule::constant(1.0), 1, InitSampler::PointMass { point: vec![0.0] }).unwrap();
    let grid = Arc::new(TimeGrid::uniform(0.0, 1.0, DT).unwrap());
    let mut obs = ObservationSet::new(1);
    let target: Vec<Vec<f64>> = (0..40).map(|k| vec![if k % 2 == 0 { -1.0 } else { 1.0 }]).collect();
    obs.insert_terminal(ObservationSlot::knn(100, target, 0.02, 5).unwrap()).unwrap();
    let cfg = ChainConfig::new(100, 200, 2, 4);
    let runs = run_chains_parallel(&model, &obs, &grid, &cfg, None).unwrap();
    let ends: Vec<f64> = runs.iter().flat_map(|r| r.references.iter().map(|z| z.states.state(100)[0])).collect();
    assert!(ends.iter().all(|x| (x.abs() - 1.0).abs() < 0.1), "{ends:?}");
    assert!(ends.iter().any(|&x| x > 0.0) && ends.iter().any(|&x| x < 0.0));
}
