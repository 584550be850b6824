//! Statistical properties of the synthetic experiment generators.

use std::sync::Arc;

use cpfas_core::datasets::{gen_double_well, gen_two_circles, gen_vehicle_synthetic, make_circles, DoubleWellParams, TwoCirclesParams, VehicleParams};
use cpfas_core::sde::{simulate, DoubleWellDrift};
use cpfas_core::{DiffusionSchedule, Drift, InitSampler, SdeModel, TimeGrid};

#[test]
fn double_well_drift_zeros() {
    let mut out = [0.0];
    for x in [-1.0, 0.0, 1.0] {
        DoubleWellDrift.eval(&[x], 0.0, &mut out);
        assert_eq!(out[0], 0.0);
    }
}

#[test]
fn double_well_long_run_is_bimodal_near_plus_minus_one() {
    let model = SdeModel::new(Arc::new(DoubleWellDrift), DiffusionSchedule::constant(1.0), 1, InitSampler::PointMass { point: vec![0.0] }).unwrap();
    let grid = Arc::new(TimeGrid::uniform(0.0, 200.0, 0.01).unwrap());
    let path = simulate(&model, &grid, 1, 17).unwrap().remove(0);
    // histogram on [-2, 2] with bins of 0.1
    let mut hist = [0usize; 40];
    for x in path.states().iter().skip(1000) {
        let b = ((x + 2.0) / 0.1).floor();
        if (0.0..40.0).contains(&b) {
            hist[b as usize] += 1;
        }
    }
    let centre = |range: std::ops::Range<usize>| {
        let k = range.clone().max_by_key(|&k| hist[k]).unwrap();
        -2.0 + 0.1 * (k as f64 + 0.5)
    };
    let (left, right) = (centre(0..20), centre(20..40));
    assert!((left + 1.0).abs() <= 0.2, "left mode at {left}");
    assert!((right - 1.0).abs() <= 0.2, "right mode at {right}");
    // the barrier bin is much emptier than either peak
    assert!(hist[19] + hist[20] < hist[(left + 2.0) as usize * 10] / 2);
}

#[test]
fn double_well_observations_track_the_truth() {
    let p = DoubleWellParams::default();
    let ds = gen_double_well(&p, 4).unwrap();
    let grid = ds.grid().unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let resid: Vec<f64> = ds
        .slots
        .iter()
        .map(|s| s.points[0][0] - truth.state(grid.index_of(s.params.time).unwrap())[0])
        .collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!(sd > 0.5 * p.sigma_obs && sd < 1.5 * p.sigma_obs, "residual sd {sd}");
}

#[test]
fn two_circles_radius_ratio() {
    let mut rng = cpfas_core::rng::stream(1, &[]);
    let pts = make_circles(2000, 0.5, 0.05, 1.0, &mut rng);
    let mut radii: Vec<f64> = pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
    radii.sort_by(f64::total_cmp);
    let inner = radii[..1000].iter().sum::<f64>() / 1000.0;
    let outer = radii[1000..].iter().sum::<f64>() / 1000.0;
    assert!((inner / outer - 0.5).abs() < 0.02, "ratio {}", inner / outer);
    assert!(radii[999] < 0.8 && radii[1000] > 0.7);
    let ds = gen_two_circles(&TwoCirclesParams::default(), 2).unwrap();
    assert_eq!(ds.slots[1].points.len(), 1000);
}

#[test]
fn vehicle_track_is_smooth_plus_jitter() {
    let p = VehicleParams::default();
    let smooth = gen_vehicle_synthetic(&VehicleParams { track_noise: 0.0, ..p.clone() }, 6).unwrap().truth.unwrap();
    // |velocity| per coordinate is at most n_harmonics · 1.5 · amplitude · omega_max
    let bound = p.n_harmonics as f64 * 1.5 * p.amplitude * p.omega_max * p.dt * 2f64.sqrt();
    let max_step = smooth.rows().zip(smooth.rows().skip(1)).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).fold(0.0, f64::max);
    assert!(max_step <= bound, "max step {max_step} > {bound}");
    let spread = smooth.rows().map(|r| r[0].abs().max(r[1].abs())).fold(0.0, f64::max);
    assert!(spread > 0.05, "track barely moves: {spread}");
    // same seed: the default track is the smooth one plus iid jitter
    let noisy = gen_vehicle_synthetic(&p, 6).unwrap().truth.unwrap();
    let resid: Vec<f64> = noisy.states().iter().zip(smooth.states()).skip(2).map(|(a, b)| a - b).collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd / p.track_noise - 1.0).abs() < 0.1, "jitter sd {sd}");
}
