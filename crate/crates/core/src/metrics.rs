//! Evaluation metrics: exact earth mover's distance between point clouds and
//! trajectory errors.
//!
//! EMD uses Euclidean ground cost. Equal-size uniform sets are solved as an
//! assignment problem (Hungarian method, `O(n³)`); everything else as a
//! transportation problem by successive shortest paths.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observations::{ObservationSet, SlotMode};
use crate::rng::{self, domain};
use crate::sde::Trajectory;

/// Default cap on points per side before subsampling.
pub const DEFAULT_MAX_POINTS: usize = 2000;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("EMD needs two non-empty point sets".into()));
    }
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::Contract("EMD point sets disagree in dimension".into()));
    }
    Ok(d)
}

fn cost_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let m = b.len();
    let mut c = vec![0.0; a.len() * m];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            c[i * m + j] = euclid(p, q);
        }
    }
    c
}

/// Minimum-cost perfect assignment of an `n × n` cost matrix. Returns
/// `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials u (rows) and v (columns), 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Minimum-cost transport plan between `supply` (rows) and `demand`
/// (columns) of a dense `cost` matrix; totals must agree. Returns the cost.
fn transport(cost: &[f64], supply: &[f64], demand: &[f64], tol: f64) -> f64 {
    let (na, nb) = (supply.len(), demand.len());
    let nv = na + nb;
    let mut sup = supply.to_vec();
    let mut dem = demand.to_vec();
    let mut flow = vec![0.0; na * nb];
    let mut pot = vec![0.0; nv];
    let mut dist = vec![0.0; nv];
    let mut prev = vec![usize::MAX; nv];
    let mut done = vec![false; nv];
    loop {
        if sup.iter().all(|&s| s <= tol) {
            break;
        }
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        for i in 0..na {
            if sup[i] > tol {
                dist[i] = 0.0;
            }
        }
        // dense Dijkstra on reduced costs; nodes 0..na are sources, na.. sinks
        let mut target = usize::MAX;
        loop {
            let mut best = f64::INFINITY;
            let mut u = usize::MAX;
            for (k, &dk) in dist.iter().enumerate() {
                if !done[k] && dk < best {
                    best = dk;
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= na && dem[u - na] > tol {
                target = u;
                break;
            }
            if u < na {
                for j in 0..nb {
                    let w = na + j;
                    if done[w] {
                        continue;
                    }
                    let nd = best + cost[u * nb + j] + pot[u] - pot[w];
                    if nd < dist[w] {
                        dist[w] = nd;
                        prev[w] = u;
                    }
                }
            } else {
                let j = u - na;
                for i in 0..na {
                    if done[i] || flow[i * nb + j] <= tol {
                        continue;
                    }
                    let nd = best - cost[i * nb + j] + pot[u] - pot[i];
                    if nd < dist[i] {
                        dist[i] = nd;
                        prev[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            break;
        }
        let dt = dist[target];
        for k in 0..nv {
            pot[k] += dist[k].min(dt);
        }
        // bottleneck along the path
        let mut amount = dem[target - na];
        let mut w = target;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u >= na {
                amount = amount.min(flow[w * nb + (u - na)]);
            }
            w = u;
        }
        amount = amount.min(sup[w]);
        let mut w = target;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u < na {
                flow[u * nb + (w - na)] += amount;
            } else {
                flow[w * nb + (u - na)] -= amount;
            }
            w = u;
        }
        sup[w] -= amount;
        dem[target - na] -= amount;
    }
    flow.iter().zip(cost).map(|(f, c)| f * c).sum()
}

/// EMD between two uniformly weighted point sets, computed exactly.
pub fn emd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let cost = cost_matrix(a, b);
    if a.len() == b.len() {
        let n = a.len();
        let assign = hungarian(&cost, n);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok(total / n as f64);
    }
    // integer masses n_b per source and n_a per sink keep the flow exact
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = transport(&cost, &vec![nb; a.len()], &vec![na; b.len()], 0.5);
    Ok(total / (na * nb))
}

/// EMD between weighted point sets. Weights are normalized to sum to one.
pub fn emd_weighted(a: &[Vec<f64>], wa: &[f64], b: &[Vec<f64>], wb: &[f64]) -> Result<f64> {
    check_sets(a, b)?;
    if wa.len() != a.len() || wb.len() != b.len() {
        return Err(Error::Contract("weights do not match point counts".into()));
    }
    let (sa, sb): (f64, f64) = (wa.iter().sum(), wb.iter().sum());
    if wa.iter().chain(wb).any(|w| !(*w >= 0.0) || !w.is_finite()) || !(sa > 0.0) || !(sb > 0.0) {
        return Err(Error::Contract("weights must be finite, non-negative and not all zero".into()));
    }
    let supply: Vec<f64> = wa.iter().map(|w| w / sa).collect();
    let mut demand: Vec<f64> = wb.iter().map(|w| w / sb).collect();
    // absorb normalization roundoff so totals agree exactly
    let gap = supply.iter().sum::<f64>() - demand.iter().sum::<f64>();
    if let Some(k) = (0..demand.len()).max_by(|&x, &y| demand[x].total_cmp(&demand[y])) {
        demand[k] += gap;
    }
    Ok(transport(&cost_matrix(a, b), &supply, &demand, 1e-13))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmdOptions {
    pub max_points: usize,
    pub seed: u64,
}

impl Default for EmdOptions {
    fn default() -> Self {
        EmdOptions { max_points: DEFAULT_MAX_POINTS, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmdResult {
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub subsampled: bool,
}

fn subsample(points: &[Vec<f64>], cap: usize, seed: u64, side: u64) -> Vec<Vec<f64>> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut rng = rng::stream(seed, &[domain::SUBSAMPLE, side]);
    let mut idx = index::sample(&mut rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

/// EMD with each side subsampled without replacement to at most
/// `opts.max_points`. `n_a`, `n_b` report the sizes actually used.
pub fn emd_capped(a: &[Vec<f64>], b: &[Vec<f64>], opts: &EmdOptions) -> Result<EmdResult> {
    if opts.max_points == 0 {
        return Err(Error::Config("max_points must be positive".into()));
    }
    let sa = subsample(a, opts.max_points, opts.seed, 0);
    let sb = subsample(b, opts.max_points, opts.seed, 1);
    let subsampled = sa.len() < a.len() || sb.len() < b.len();
    let value = emd(&sa, &sb)?;
    Ok(EmdResult { value, n_a: sa.len(), n_b: sb.len(), subsampled })
}

/// States of every path at grid index `j`.
pub fn states_at(paths: &[Trajectory], j: usize) -> Vec<Vec<f64>> {
    paths.iter().map(|p| p.state(j).to_vec()).collect()
}

/// Pointwise mean over paths on a common grid, `(N_T + 1) × d` row-major.
pub fn mean_trajectory(paths: &[Trajectory]) -> Result<Vec<f64>> {
    let first = paths.first().ok_or_else(|| Error::Contract("mean of zero trajectories".into()))?;
    let n = first.states().len();
    if paths.iter().any(|p| p.states().len() != n || p.grid() != first.grid()) {
        return Err(Error::Contract("trajectories live on different grids".into()));
    }
    let mut mean = vec![0.0; n];
    for p in paths {
        for (m, x) in mean.iter_mut().zip(p.states()) {
            *m += x;
        }
    }
    let k = paths.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Mean squared error per coordinate between a path (`(N_T+1) × d`) and
/// targets `(grid index, point)`.
pub fn mse_at(path: &[f64], dim: usize, targets: &[(usize, Vec<f64>)]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Contract("no targets to compare against".into()));
    }
    let mut sum = 0.0;
    for (j, y) in targets {
        let x = path
            .get(j * dim..(j + 1) * dim)
            .ok_or_else(|| Error::Contract(format!("grid index {j} is outside the trajectory")))?;
        if y.len() != dim {
            return Err(Error::Contract("target dimension differs from trajectory dimension".into()));
        }
        sum += x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / (targets.len() * dim) as f64)
}

/// MSE of a path against every single-point slot of `obs`, after projecting
/// the path through the observation matrix.
pub fn trajectory_mse(path: &[f64], obs: &ObservationSet) -> Result<f64> {
    let dx = obs.state_dim();
    let dy = obs.obs_dim();
    let mut proj_path = Vec::new();
    let mut targets = Vec::new();
    let mut buf = vec![0.0; dy];
    for slot in obs.slots() {
        if slot.mode() != SlotMode::Single {
            continue;
        }
        let j = slot.time_index();
        let x = path
            .get(j * dx..(j + 1) * dx)
            .ok_or_else(|| Error::Contract(format!("grid index {j} is outside the trajectory")))?;
        obs.project_into(x, &mut buf);
        targets.push((targets.len(), slot.points()[0].clone()));
        proj_path.extend_from_slice(&buf);
    }
    if targets.is_empty() {
        return Err(Error::Contract("observation set has no single-point slots".into()));
    }
    mse_at(&proj_path, dy, &targets)
}

/// One evaluation result as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    /// Grid time the metric refers to, if any.
    pub time: Option<f64>,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub subsampled: bool,
    pub seed: u64,
}
