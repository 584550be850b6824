//! Observation slots and particle log-weights.
//!
//! A slot holds the observations attached to one grid index. `Single` slots
//! use the Gaussian likelihood `N(y; H x, σ² I)` of one point; `Knn` slots
//! hold a whole sample set (a partially observed marginal, or samples of a
//! terminal distribution) and score a particle by the squared distances to
//! its `h` nearest points:
//!
//! ```text
//! log w = -1/(2σ²) Σ_{h=1}^{H} ||y_h - x||²
//! ```
//!
//! Constant terms are dropped everywhere; weights are normalized downstream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotMode {
    Single,
    Knn { neighbors: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSlot {
    time_index: usize,
    points: Vec<Vec<f64>>,
    sigma_obs: f64,
    mode: SlotMode,
}

impl ObservationSlot {
    pub fn new(time_index: usize, points: Vec<Vec<f64>>, sigma_obs: f64, mode: SlotMode) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Contract(format!("observation slot at index {time_index} has no points")));
        };
        let d = first.len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Contract(format!(
                "observation slot at index {time_index} has points of mixed or zero dimension"
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("observation slot at index {time_index} has non-finite values")));
        }
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(Error::Config(format!("sigma_obs must be positive, got {sigma_obs}")));
        }
        match mode {
            SlotMode::Single if points.len() != 1 => {
                return Err(Error::Contract(format!(
                    "single-mode slot at index {time_index} needs exactly one point, got {}",
                    points.len()
                )))
            }
            SlotMode::Knn { neighbors } if neighbors == 0 || neighbors > points.len() => {
                return Err(Error::Contract(format!(
                    "slot at index {time_index}: neighbor count {neighbors} must lie in 1..={}",
                    points.len()
                )))
            }
            _ => {}
        }
        Ok(ObservationSlot { time_index, points, sigma_obs, mode })
    }

    pub fn single(time_index: usize, point: Vec<f64>, sigma_obs: f64) -> Result<Self> {
        Self::new(time_index, vec![point], sigma_obs, SlotMode::Single)
    }

    pub fn knn(time_index: usize, points: Vec<Vec<f64>>, sigma_obs: f64, neighbors: usize) -> Result<Self> {
        Self::new(time_index, points, sigma_obs, SlotMode::Knn { neighbors })
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn sigma_obs(&self) -> f64 {
        self.sigma_obs
    }

    pub fn mode(&self) -> SlotMode {
        self.mode
    }

    pub fn obs_dim(&self) -> usize {
        self.points[0].len()
    }

    /// Same slot with a rescaled noise level.
    pub fn with_sigma(mut self, sigma_obs: f64) -> Result<Self> {
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(Error::Config(format!("sigma_obs must be positive, got {sigma_obs}")));
        }
        self.sigma_obs = sigma_obs;
        Ok(self)
    }

    fn check_dim(&self, x_proj: &[f64]) -> Result<()> {
        if x_proj.len() == self.obs_dim() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "projected state has dimension {}, slot expects {}",
                x_proj.len(),
                self.obs_dim()
            )))
        }
    }

    /// Dispatch on the slot mode.
    pub fn log_weight(&self, x_proj: &[f64]) -> Result<f64> {
        match self.mode {
            SlotMode::Single => log_weight_single(self, x_proj),
            SlotMode::Knn { .. } => log_weight_knn(self, x_proj),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `-||y - x||² / (2σ²)` for a single-point slot.
pub fn log_weight_single(slot: &ObservationSlot, x_proj: &[f64]) -> Result<f64> {
    if slot.mode != SlotMode::Single {
        return Err(Error::Contract("log_weight_single called on a knn slot".into()));
    }
    slot.check_dim(x_proj)?;
    Ok(-sq_dist(&slot.points[0], x_proj) / (2.0 * slot.sigma_obs * slot.sigma_obs))
}

/// KNN log-weight. Ties between equidistant points go to the lower index;
/// the selected distances are summed in ascending order, so the result does
/// not depend on the order of `slot.points`.
pub fn log_weight_knn(slot: &ObservationSlot, x_proj: &[f64]) -> Result<f64> {
    let SlotMode::Knn { neighbors } = slot.mode else {
        return Err(Error::Contract("log_weight_knn called on a single-mode slot".into()));
    };
    slot.check_dim(x_proj)?;
    let mut d2: Vec<(f64, usize)> = slot.points.iter().enumerate().map(|(i, y)| (sq_dist(y, x_proj), i)).collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if neighbors < d2.len() {
        d2.select_nth_unstable_by(neighbors - 1, by_dist);
        d2.truncate(neighbors);
    }
    d2.sort_unstable_by(by_dist);
    let total: f64 = d2.iter().map(|(v, _)| v).sum();
    Ok(-total / (2.0 * slot.sigma_obs * slot.sigma_obs))
}

/// All observation slots of a run, keyed by grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    state_dim: usize,
    obs_dim: usize,
    /// `obs_dim × state_dim`, row-major; `None` is the identity.
    obs_matrix: Option<Vec<f64>>,
    slots: BTreeMap<usize, ObservationSlot>,
    terminal: Option<usize>,
}

/// Per-particle weights at one step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepWeights {
    /// No slot at this step.
    Uniform,
    Log(Vec<f64>),
}

impl ObservationSet {
    /// Empty set with identity observation matrix.
    pub fn new(state_dim: usize) -> Self {
        ObservationSet { state_dim, obs_dim: state_dim, obs_matrix: None, slots: BTreeMap::new(), terminal: None }
    }

    /// Empty set observing `matrix · x` (`obs_dim × state_dim`, row-major).
    pub fn with_matrix(state_dim: usize, obs_dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != obs_dim * state_dim {
            return Err(Error::Contract(format!(
                "observation matrix has {} entries, expected {obs_dim}x{state_dim}",
                matrix.len()
            )));
        }
        if matrix_rank(&matrix, obs_dim, state_dim) < obs_dim {
            return Err(Error::Contract("observation matrix must have full row rank".into()));
        }
        Ok(ObservationSet { state_dim, obs_dim, obs_matrix: Some(matrix), slots: BTreeMap::new(), terminal: None })
    }

    pub fn insert(&mut self, slot: ObservationSlot) -> Result<()> {
        if slot.obs_dim() != self.obs_dim {
            return Err(Error::Contract(format!(
                "slot at index {} has dimension {}, set expects {}",
                slot.time_index,
                slot.obs_dim(),
                self.obs_dim
            )));
        }
        if self.slots.contains_key(&slot.time_index) {
            return Err(Error::Contract(format!("duplicate observation slot at grid index {}", slot.time_index)));
        }
        self.slots.insert(slot.time_index, slot);
        Ok(())
    }

    /// Insert the slot built from samples of the terminal distribution.
    pub fn insert_terminal(&mut self, slot: ObservationSlot) -> Result<()> {
        let j = slot.time_index;
        self.insert(slot)?;
        self.terminal = Some(j);
        Ok(())
    }

    pub fn terminal_index(&self) -> Option<usize> {
        self.terminal
    }

    pub fn slot(&self, j: usize) -> Option<&ObservationSlot> {
        self.slots.get(&j)
    }

    pub fn slots(&self) -> impl Iterator<Item = &ObservationSlot> {
        self.slots.values()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn obs_matrix(&self) -> Option<&[f64]> {
        self.obs_matrix.as_deref()
    }

    /// `H x` written into `out`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.obs_matrix {
            None => out.copy_from_slice(x),
            Some(m) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o = m[r * self.state_dim..(r + 1) * self.state_dim].iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    /// Log-weights for `particles` (`N × state_dim`, row-major) at grid
    /// index `j`, or `Uniform` when no slot sits at `j`.
    pub fn weights_at(&self, j: usize, particles: &[f64]) -> Result<StepWeights> {
        let Some(slot) = self.slots.get(&j) else {
            return Ok(StepWeights::Uniform);
        };
        if particles.len() % self.state_dim != 0 {
            return Err(Error::Contract("particle buffer is not a whole number of states".into()));
        }
        let mut proj = vec![0.0; self.obs_dim];
        particles
            .chunks_exact(self.state_dim)
            .map(|x| {
                self.project_into(x, &mut proj);
                slot.log_weight(&proj)
            })
            .collect::<Result<Vec<_>>>()
            .map(StepWeights::Log)
    }
}

fn matrix_rank(m: &[f64], rows: usize, cols: usize) -> usize {
    let mut a = m.to_vec();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).max_by(|&i, &k| a[i * cols + c].abs().total_cmp(&a[k * cols + c].abs()));
        let Some(p) = pivot else { break };
        if a[p * cols + c].abs() <= 1e-12 * scale {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, p * cols + k);
        }
        for i in rank + 1..rows {
            let f = a[i * cols + c] / a[rank * cols + c];
            for k in c..cols {
                a[i * cols + k] -= f * a[rank * cols + k];
            }
        }
        rank += 1;
    }
    rank
}

/// `p_i = exp(lw_i - logsumexp(lw))`.
pub fn normalize_log_weights(lw: &[f64]) -> Result<Vec<f64>> {
    let max = lw.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || lw.is_empty() {
        return Err(Error::DegenerateWeights { step: None });
    }
    if max == f64::INFINITY {
        return Err(Error::Contract("log-weights contain +inf".into()));
    }
    let mut p: Vec<f64> = lw.iter().map(|&v| if v.is_nan() { 0.0 } else { (v - max).exp() }).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_examples() {
        let s = ObservationSlot::single(0, vec![1.0, 0.0], 1.0).unwrap();
        assert_eq!(log_weight_single(&s, &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(log_weight_single(&s, &[0.0, 0.0]).unwrap(), -0.5);
        let s = ObservationSlot::single(0, vec![1.0, 0.0], 0.1).unwrap();
        assert!((log_weight_single(&s, &[0.0, 0.0]).unwrap() + 50.0).abs() < 1e-9);
        assert!(log_weight_single(&s, &[0.0]).is_err());
    }

    #[test]
    fn knn_examples() {
        let s = ObservationSlot::knn(0, vec![vec![1.0], vec![-2.0]], 1.0, 1).unwrap();
        assert_eq!(log_weight_knn(&s, &[0.0]).unwrap(), -0.5);
        let s = ObservationSlot::knn(0, vec![vec![1.0], vec![-1.0]], 1.0, 2).unwrap();
        assert_eq!(log_weight_knn(&s, &[0.0]).unwrap(), -1.0);
    }

    #[test]
    fn knn_circle_center() {
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 10.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let s = ObservationSlot::knn(0, pts.clone(), 0.5, 3).unwrap();
        let lw = log_weight_knn(&s, &[0.0, 0.0]).unwrap();
        // brute force: sort all squared distances and take the three smallest
        let mut d: Vec<f64> = pts.iter().map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        d.sort_by(f64::total_cmp);
        let brute = -(d[0] + d[1] + d[2]) / (2.0 * 0.25);
        assert!((lw - brute).abs() < 1e-12);
        assert!((lw + 6.0).abs() < 1e-12);
    }

    #[test]
    fn slot_construction_errors() {
        assert!(ObservationSlot::knn(0, vec![vec![1.0]], 1.0, 2).is_err());
        assert!(ObservationSlot::knn(0, vec![vec![1.0]], 1.0, 0).is_err());
        assert!(ObservationSlot::knn(0, vec![], 1.0, 1).is_err());
        assert!(ObservationSlot::single(0, vec![1.0], 0.0).is_err());
        assert!(ObservationSlot::new(0, vec![vec![1.0], vec![2.0]], 1.0, SlotMode::Single).is_err());
        assert!(ObservationSlot::knn(0, vec![vec![1.0], vec![1.0, 2.0]], 1.0, 1).is_err());
    }

    #[test]
    fn weights_at_dispatch() {
        let mut obs = ObservationSet::new(2);
        obs.insert(ObservationSlot::single(3, vec![0.0, 0.0], 1.0).unwrap()).unwrap();
        assert_eq!(obs.weights_at(2, &[1.0, 1.0]).unwrap(), StepWeights::Uniform);
        match obs.weights_at(3, &[1.0, 0.0, 0.0, -1.0]).unwrap() {
            StepWeights::Log(lw) => assert_eq!(lw[0], lw[1]),
            StepWeights::Uniform => panic!("expected log weights"),
        }
        assert!(obs.insert(ObservationSlot::single(3, vec![1.0, 0.0], 1.0).unwrap()).is_err());
    }

    #[test]
    fn weights_at_knn_matches_per_particle_loop() {
        let pts: Vec<Vec<f64>> = (0..40).map(|k| vec![(k as f64 * 0.37).sin(), (k as f64 * 0.91).cos()]).collect();
        let slot = ObservationSlot::knn(7, pts, 0.5 * 0.01, 5).unwrap();
        let mut obs = ObservationSet::new(2);
        obs.insert_terminal(slot.clone()).unwrap();
        assert_eq!(obs.terminal_index(), Some(7));
        let particles: Vec<f64> = (0..30).map(|k| (k as f64 * 0.13).sin()).collect();
        let StepWeights::Log(lw) = obs.weights_at(7, &particles).unwrap() else { panic!() };
        for (i, x) in particles.chunks(2).enumerate() {
            assert_eq!(lw[i], log_weight_knn(&slot, x).unwrap());
        }
    }

    #[test]
    fn observation_matrix_projection() {
        assert!(ObservationSet::with_matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).is_err());
        let mut obs = ObservationSet::with_matrix(2, 1, vec![0.0, 1.0]).unwrap();
        obs.insert(ObservationSlot::single(0, vec![1.0], 1.0).unwrap()).unwrap();
        let StepWeights::Log(lw) = obs.weights_at(0, &[5.0, 1.0, -3.0, 0.0]).unwrap() else { panic!() };
        assert_eq!(lw, vec![0.0, -0.5]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_log_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = normalize_log_weights(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let lw = [-0.5, -2.25, 1.0];
        let shifted: Vec<f64> = lw.iter().map(|v| v + 1000.0).collect();
        assert_eq!(normalize_log_weights(&lw).unwrap(), normalize_log_weights(&shifted).unwrap());
        assert!(matches!(
            normalize_log_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::DegenerateWeights { .. })
        ));
        let p = normalize_log_weights(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn knn_is_permutation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..20),
            x in prop::collection::vec(-3.0f64..3.0, 2),
            h_frac in 0.0f64..1.0,
            rot in 0usize..20,
        ) {
            let h = 1 + ((pts.len() - 1) as f64 * h_frac) as usize;
            let a = ObservationSlot::knn(0, pts.clone(), 0.7, h).unwrap();
            let mut rotated = pts.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            let b = ObservationSlot::knn(0, rotated, 0.7, h).unwrap();
            prop_assert_eq!(log_weight_knn(&a, &x).unwrap(), log_weight_knn(&b, &x).unwrap());
        }

        #[test]
        fn knn_with_all_points_is_full_sum(
            pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..15),
            x in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let s = ObservationSlot::knn(0, pts.clone(), 1.3, pts.len()).unwrap();
            let brute: f64 = pts.iter().map(|y| sq_dist(y, &x)).sum::<f64>() / (-2.0 * 1.3 * 1.3);
            prop_assert!((log_weight_knn(&s, &x).unwrap() - brute).abs() <= 1e-12 * brute.abs().max(1.0));
        }

        #[test]
        fn sigma_scaling_and_sharpening(
            pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1), 3..10),
            xs in prop::collection::vec(-2.0f64..2.0, 4..12),
            c in 0.1f64..0.95,
        ) {
            let h = 2.min(pts.len());
            let wide = ObservationSlot::knn(0, pts.clone(), 1.0, h).unwrap();
            let narrow = wide.clone().with_sigma(c).unwrap();
            let lw_wide: Vec<f64> = xs.iter().map(|x| log_weight_knn(&wide, &[*x]).unwrap()).collect();
            let lw_narrow: Vec<f64> = xs.iter().map(|x| log_weight_knn(&narrow, &[*x]).unwrap()).collect();
            for (a, b) in lw_wide.iter().zip(&lw_narrow) {
                prop_assert!((b - a / (c * c)).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            let pw = normalize_log_weights(&lw_wide).unwrap();
            let pn = normalize_log_weights(&lw_narrow).unwrap();
            let best = (0..pw.len()).max_by(|&i, &k| lw_wide[i].total_cmp(&lw_wide[k])).unwrap();
            prop_assert!(pn[best] >= pw[best] - 1e-12);
        }

        #[test]
        fn normalize_is_shift_invariant(
            quarters in prop::collection::vec(-200i32..200, 1..30),
            shift in -1000i32..1000,
        ) {
            // dyadic inputs and integer shifts are exact in f64, so equality is exact
            let lw: Vec<f64> = quarters.iter().map(|&q| q as f64 * 0.25).collect();
            let shifted: Vec<f64> = lw.iter().map(|v| v + shift as f64).collect();
            let p = normalize_log_weights(&lw).unwrap();
            prop_assert_eq!(&p, &normalize_log_weights(&shifted).unwrap());
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
