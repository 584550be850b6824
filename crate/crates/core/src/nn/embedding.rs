use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// `t ↦ [sin(ω_1 t), cos(ω_1 t), ..., sin(ω_K t), cos(ω_K t)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalEmbedding {
    frequencies: Vec<f64>,
}

impl SinusoidalEmbedding {
    pub fn new(frequencies: Vec<f64>) -> Self {
        SinusoidalEmbedding { frequencies }
    }

    /// `n_freqs` angular frequencies whose periods run geometrically from
    /// `max_period` down to `min_period`.
    pub fn geometric(n_freqs: usize, max_period: f64, min_period: f64) -> Self {
        let frequencies = (0..n_freqs)
            .map(|k| {
                let frac = if n_freqs > 1 { k as f64 / (n_freqs - 1) as f64 } else { 0.0 };
                let period = max_period * (min_period / max_period).powf(frac);
                2.0 * PI / period
            })
            .collect();
        SinusoidalEmbedding { frequencies }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn n_freqs(&self) -> usize {
        self.frequencies.len()
    }

    pub fn out_dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn embed_into(&self, t: f64, out: &mut [f64]) {
        for (k, &w) in self.frequencies.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.embed_into(t, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_at_zero() {
        let e = SinusoidalEmbedding::geometric(16, 160.0, 0.01);
        let v = e.embed(0.0);
        assert_eq!(v.len(), 32);
        for k in 0..16 {
            assert_eq!(v[2 * k], 0.0);
            assert_eq!(v[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn embedding_single_frequency() {
        let e = SinusoidalEmbedding::new(vec![PI]);
        let v = e.embed(0.5);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15);
    }

    #[test]
    fn embedding_bounded_and_ladder_endpoints() {
        let e = SinusoidalEmbedding::geometric(16, 4.0 * 40.0, 0.01);
        let f = e.frequencies();
        assert!((f[0] - 2.0 * PI / 160.0).abs() < 1e-12);
        assert!((f[15] - 2.0 * PI / 0.01).abs() < 1e-9);
        for t in [-3.0, 0.123, 17.5, 40.0] {
            assert!(e.embed(t).iter().all(|v| v.abs() <= 1.0));
        }
    }
}
