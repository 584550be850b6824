//! Exact Kalman filter and Rauch-Tung-Striebel smoother for the scalar
//! Euler-Maruyama chain `x_{j+1} = a x_j + sqrt(q_j) ε_j` observed as
//! `y = x + N(0, r)` at selected grid indices.

#![allow(dead_code)]

pub struct LinearGaussian1d {
    /// `1 + λ Δ` for drift `λ x`.
    pub a: f64,
    /// Process variance per step, `g(t_j)² Δ_j`.
    pub q: Vec<f64>,
    pub m0: f64,
    pub p0: f64,
    /// `(grid index, observed value)`, any order.
    pub obs: Vec<(usize, f64)>,
    pub r: f64,
}

pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl LinearGaussian1d {
    pub fn brownian(n_steps: usize, dt: f64, g: f64, m0: f64, p0: f64, obs: Vec<(usize, f64)>, r: f64) -> Self {
        LinearGaussian1d { a: 1.0, q: vec![g * g * dt; n_steps], m0, p0, obs, r }
    }

    fn observation(&self, j: usize) -> Option<f64> {
        self.obs.iter().find(|(k, _)| *k == j).map(|&(_, y)| y)
    }

    fn update(&self, j: usize, m: &mut f64, p: &mut f64) {
        if let Some(y) = self.observation(j) {
            let k = *p / (*p + self.r);
            *m += k * (y - *m);
            *p *= 1.0 - k;
        }
    }

    /// Filtered moments at every grid index, plus the one-step predictions.
    fn run_filter(&self) -> (Moments, Moments) {
        let n = self.q.len() + 1;
        let mut filt = Moments { mean: vec![0.0; n], var: vec![0.0; n] };
        let mut pred = Moments { mean: vec![0.0; n], var: vec![0.0; n] };
        let (mut m, mut p) = (self.m0, self.p0);
        pred.mean[0] = m;
        pred.var[0] = p;
        self.update(0, &mut m, &mut p);
        filt.mean[0] = m;
        filt.var[0] = p;
        for j in 1..n {
            m *= self.a;
            p = self.a * self.a * p + self.q[j - 1];
            pred.mean[j] = m;
            pred.var[j] = p;
            self.update(j, &mut m, &mut p);
            filt.mean[j] = m;
            filt.var[j] = p;
        }
        (filt, pred)
    }

    pub fn filter(&self) -> Moments {
        self.run_filter().0
    }

    pub fn smoother(&self) -> Moments {
        let (filt, pred) = self.run_filter();
        let n = filt.mean.len();
        let mut sm = Moments { mean: filt.mean.clone(), var: filt.var.clone() };
        for j in (0..n - 1).rev() {
            let c = filt.var[j] * self.a / pred.var[j + 1];
            sm.mean[j] = filt.mean[j] + c * (sm.mean[j + 1] - pred.mean[j + 1]);
            sm.var[j] = filt.var[j] + c * c * (sm.var[j + 1] - pred.var[j + 1]);
        }
        sm
    }
}

#[cfg(test)]
mod self_check {
    use super::*;

    #[test]
    fn no_observations_is_the_prior() {
        let m = LinearGaussian1d::brownian(100, 0.01, 1.0, 0.5, 0.25, vec![], 1.0);
        let s = m.smoother();
        assert!((s.var[100] - 1.25).abs() < 1e-12);
        assert!(s.mean.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn brownian_bridge_midpoint() {
        // pinned (r → 0) at both ends: variance at the middle is t(T-t)/T
        let m = LinearGaussian1d::brownian(100, 0.01, 1.0, 0.0, 0.0, vec![(100, 2.0)], 1e-14);
        let s = m.smoother();
        assert!((s.mean[50] - 1.0).abs() < 1e-9);
        assert!((s.var[50] - 0.25).abs() < 1e-9);
    }
}
