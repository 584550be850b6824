//! Feed-forward drift network `f_θ(x, t)` with hand-written backprop.
//!
//! Input is `[x, embed(t)]`; `depth` hidden layers of `width` units with SiLU
//! activations; linear output of dimension `d_x`. Parameters live in one flat
//! vector, layer by layer, each layer as a row-major `out × in` weight block
//! followed by its bias.
//!
//! Every sample is evaluated by the same sequence of floating-point
//! operations no matter how samples are grouped, so batched and single
//! evaluations agree bit for bit.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embedding::SinusoidalEmbedding;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::sde::Drift;

/// Samples per gradient partial sum. Fixed so the reduction order never
/// depends on the thread count.
const GRAD_CHUNK: usize = 128;
/// Samples sharing one pass over a weight row.
const BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
}

impl Architecture {
    pub fn new(dim: usize) -> Self {
        Architecture { dim, width: 128, depth: 4 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
pub struct DriftNet {
    arch: Architecture,
    embedding: SinusoidalEmbedding,
    params: Vec<f64>,
    layers: Vec<Layer>,
}

/// Mini-batch of mean-matching targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    pub dim: usize,
    /// `B × d` states `x_{t_j}`.
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    /// Step lengths `Δ_j`.
    pub deltas: Vec<f64>,
    /// `B × d` mean-change records.
    pub targets: Vec<f64>,
}

impl TrainingBatch {
    pub fn new(dim: usize) -> Self {
        TrainingBatch { dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn push(&mut self, x: &[f64], t: f64, delta: f64, target: &[f64]) {
        self.xs.extend_from_slice(x);
        self.ts.push(t);
        self.deltas.push(delta);
        self.targets.extend_from_slice(target);
    }

    pub fn clear(&mut self) {
        self.xs.clear();
        self.ts.clear();
        self.deltas.clear();
        self.targets.clear();
    }

    fn check(&self) -> Result<()> {
        let b = self.ts.len();
        if self.xs.len() != b * self.dim || self.targets.len() != b * self.dim || self.deltas.len() != b {
            return Err(Error::Contract("training batch fields are misaligned".into()));
        }
        Ok(())
    }
}

fn layout(arch: &Architecture, emb_dim: usize) -> (Vec<Layer>, usize) {
    let mut sizes = vec![arch.dim + emb_dim];
    sizes.extend(std::iter::repeat(arch.width).take(arch.depth));
    sizes.push(arch.dim);
    let mut off = 0;
    let layers = sizes
        .windows(2)
        .map(|w| {
            let l = Layer { n_in: w[0], n_out: w[1], w_off: off, b_off: off + w[0] * w[1] };
            off += w[0] * w[1] + w[1];
            l
        })
        .collect();
    (layers, off)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dot(row, x_s)` for four inputs in one pass over `row`, with exactly the
/// per-sample arithmetic of [`dot`].
#[inline]
fn dot4(row: &[f64], x: [&[f64]; 4]) -> [f64; 4] {
    let n = row.len();
    let main = n - n % 4;
    let mut acc = [[0.0f64; 4]; 4];
    let mut i = 0;
    while i < main {
        let r = &row[i..i + 4];
        for s in 0..4 {
            let xs = &x[s][i..i + 4];
            acc[s][0] += r[0] * xs[0];
            acc[s][1] += r[1] * xs[1];
            acc[s][2] += r[2] * xs[2];
            acc[s][3] += r[3] * xs[3];
        }
        i += 4;
    }
    let mut out = [0.0; 4];
    for s in 0..4 {
        let mut tail = 0.0;
        for k in main..n {
            tail += row[k] * x[s][k];
        }
        out[s] = (acc[s][0] + acc[s][1]) + (acc[s][2] + acc[s][3]) + tail;
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Four successive `axpy` updates fused into one pass; the additions to each
/// element happen in the same order as the unfused calls.
#[inline]
fn axpy4(y: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] = y[i] + a[0] * x0[i] + a[1] * x1[i] + a[2] * x2[i] + a[3] * x3[i];
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Per-chunk activations.
struct Workspace {
    /// `acts[l]` is the input of layer `l`, `bs × n_in`; the last entry is
    /// the network output.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl DriftNet {
    /// Fresh network with fan-in scaled uniform initialization.
    pub fn new(arch: Architecture, embedding: SinusoidalEmbedding, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch, embedding)?;
        let mut rng = rng::stream(seed, &[domain::TRAIN_INIT]);
        for l in net.layers.clone() {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut net.params[l.w_off..l.b_off + l.n_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(arch: Architecture, embedding: SinusoidalEmbedding) -> Result<Self> {
        if arch.dim == 0 || arch.width == 0 {
            return Err(Error::Config("network dimension and width must be positive".into()));
        }
        let (layers, n) = layout(&arch, embedding.out_dim());
        Ok(DriftNet { arch, embedding, params: vec![0.0; n], layers })
    }

    /// Rebuild from stored parts, validating the parameter vector.
    pub fn from_parts(arch: Architecture, embedding: SinusoidalEmbedding, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(arch, embedding)?;
        if params.len() != net.params.len() {
            return Err(Error::CorruptModel(format!(
                "expected {} parameters for {:?}, found {}",
                net.params.len(),
                arch,
                params.len()
            )));
        }
        if let Some(k) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::CorruptModel(format!("parameter {k} is not finite")));
        }
        if net.embedding.frequencies().iter().any(|w| !w.is_finite()) {
            return Err(Error::CorruptModel("embedding frequency is not finite".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn embedding(&self) -> &SinusoidalEmbedding {
        &self.embedding
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    /// Offset of the output-layer bias in the parameter vector.
    pub fn output_bias_offset(&self) -> usize {
        self.layers.last().map(|l| l.b_off).unwrap_or(0)
    }

    fn check_params(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(k) => Err(Error::CorruptModel(format!("parameter {k} is not finite"))),
            None => Ok(()),
        }
    }

    fn workspace(&self, bs: usize) -> Workspace {
        let mut acts = vec![vec![0.0; bs * self.layers[0].n_in]];
        let mut pre = Vec::new();
        for l in &self.layers {
            acts.push(vec![0.0; bs * l.n_out]);
        }
        for l in &self.layers[..self.layers.len() - 1] {
            pre.push(vec![0.0; bs * l.n_out]);
        }
        Workspace { acts, pre }
    }

    /// Forward `bs` samples through the network into `ws`.
    fn forward_ws(&self, xs: &[f64], ts: &[f64], ws: &mut Workspace) {
        let d = self.arch.dim;
        let bs = ts.len();
        let n_in = self.layers[0].n_in;
        for s in 0..bs {
            let row = &mut ws.acts[0][s * n_in..(s + 1) * n_in];
            row[..d].copy_from_slice(&xs[s * d..(s + 1) * d]);
            self.embedding.embed_into(ts[s], &mut row[d..]);
        }
        let n_layers = self.layers.len();
        for (li, l) in self.layers.iter().enumerate() {
            let w = &self.params[l.w_off..l.b_off];
            let b = &self.params[l.b_off..l.b_off + l.n_out];
            let (inputs, outputs) = ws.acts.split_at_mut(li + 1);
            let input = &inputs[li];
            let out = &mut outputs[0];
            for s0 in (0..bs).step_by(BLOCK) {
                let s1 = (s0 + BLOCK).min(bs);
                let xin = |s: usize| &input[s * l.n_in..(s + 1) * l.n_in];
                for o in 0..l.n_out {
                    let row = &w[o * l.n_in..(o + 1) * l.n_in];
                    if s1 - s0 == BLOCK {
                        let v = dot4(row, [xin(s0), xin(s0 + 1), xin(s0 + 2), xin(s0 + 3)]);
                        for (k, vk) in v.iter().enumerate() {
                            out[(s0 + k) * l.n_out + o] = b[o] + vk;
                        }
                    } else {
                        for s in s0..s1 {
                            out[s * l.n_out + o] = b[o] + dot(row, xin(s));
                        }
                    }
                }
            }
            if li + 1 < n_layers {
                ws.pre[li].copy_from_slice(out);
                out.iter_mut().for_each(|v| *v = silu(*v));
            }
        }
    }

    /// `f_θ(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward_batch(x, &[t])
    }

    /// `B` samples at once; `xs` is `B × d`. Identical to `B` single calls.
    pub fn forward_batch(&self, xs: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        if xs.len() != ts.len() * self.arch.dim {
            return Err(Error::Contract(format!(
                "forward: {} state values for {} times at dimension {}",
                xs.len(),
                ts.len(),
                self.arch.dim
            )));
        }
        self.check_params()?;
        let d = self.arch.dim;
        let chunks: Vec<Vec<f64>> = ts
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, tc)| {
                let mut ws = self.workspace(tc.len());
                let start = c * GRAD_CHUNK;
                self.forward_ws(&xs[start * d..(start + tc.len()) * d], tc, &mut ws);
                ws.acts.pop().unwrap_or_default()
            })
            .collect();
        Ok(chunks.concat())
    }

    /// Per-sample losses `||f_θ(x,t) Δ - z||²` for one chunk; when `grad`
    /// is given, accumulates `scale · ∂loss/∂θ` into it.
    fn chunk_loss(&self, batch: &TrainingBatch, range: std::ops::Range<usize>, scale: f64, grad: Option<&mut [f64]>) -> Vec<f64> {
        let d = self.arch.dim;
        let bs = range.len();
        let mut ws = self.workspace(bs);
        self.forward_ws(&batch.xs[range.start * d..range.end * d], &batch.ts[range.clone()], &mut ws);
        let out = ws.acts.last().expect("output layer").clone();
        let mut losses = vec![0.0; bs];
        let mut dout = vec![0.0; bs * d];
        for s in 0..bs {
            let g = range.start + s;
            let delta = batch.deltas[g];
            let mut l = 0.0;
            for k in 0..d {
                let r = out[s * d + k] * delta - batch.targets[g * d + k];
                l += r * r;
                dout[s * d + k] = scale * 2.0 * delta * r;
            }
            losses[s] = l;
        }
        let Some(grad) = grad else { return losses };

        let mut delta_out = dout;
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let input = &ws.acts[li];
            let (gw, gb) = grad[l.w_off..l.b_off + l.n_out].split_at_mut(l.n_in * l.n_out);
            let xin = |s: usize| &input[s * l.n_in..(s + 1) * l.n_in];
            for o in 0..l.n_out {
                let grow = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                let g = |s: usize| delta_out[s * l.n_out + o];
                let mut s = 0;
                while s + 4 <= bs {
                    axpy4(grow, [g(s), g(s + 1), g(s + 2), g(s + 3)], [xin(s), xin(s + 1), xin(s + 2), xin(s + 3)]);
                    s += 4;
                }
                for s in s..bs {
                    axpy(grow, g(s), xin(s));
                }
                for s in 0..bs {
                    gb[o] += g(s);
                }
            }
            if li == 0 {
                break;
            }
            let w = &self.params[l.w_off..l.b_off];
            let mut delta_in = vec![0.0; bs * l.n_in];
            let row = |o: usize| &w[o * l.n_in..(o + 1) * l.n_in];
            for s in 0..bs {
                let di = &mut delta_in[s * l.n_in..(s + 1) * l.n_in];
                let a = &delta_out[s * l.n_out..(s + 1) * l.n_out];
                let mut o = 0;
                while o + 4 <= l.n_out {
                    axpy4(di, [a[o], a[o + 1], a[o + 2], a[o + 3]], [row(o), row(o + 1), row(o + 2), row(o + 3)]);
                    o += 4;
                }
                for o in o..l.n_out {
                    axpy(di, a[o], row(o));
                }
            }
            for (di, &z) in delta_in.iter_mut().zip(&ws.pre[li - 1]) {
                *di *= silu_grad(z);
            }
            delta_out = delta_in;
        }
        losses
    }

    fn reduce_losses(mut per_sample: Vec<f64>) -> f64 {
        // summing in sorted order makes the mean independent of sample order
        let n = per_sample.len() as f64;
        per_sample.sort_unstable_by(f64::total_cmp);
        per_sample.iter().sum::<f64>() / n
    }

    /// Mean-matching loss `mean_b ||f_θ(x_b, t_b) Δ_b - z_b||²`.
    pub fn loss(&self, batch: &TrainingBatch) -> Result<f64> {
        batch.check()?;
        if batch.is_empty() {
            return Err(Error::Contract("loss of an empty batch".into()));
        }
        self.check_params()?;
        let n = batch.len();
        let losses: Vec<Vec<f64>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|c| self.chunk_loss(batch, c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n), 0.0, None))
            .collect();
        Ok(Self::reduce_losses(losses.concat()))
    }

    /// Loss and its gradient with respect to the flat parameter vector.
    pub fn loss_and_grad(&self, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)> {
        batch.check()?;
        if batch.is_empty() {
            return Err(Error::Contract("loss of an empty batch".into()));
        }
        self.check_params()?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; self.params.len()];
                let l = self.chunk_loss(batch, c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n), scale, Some(&mut g));
                (l, g)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut losses = Vec::with_capacity(n);
        for (l, g) in parts {
            losses.extend(l);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((Self::reduce_losses(losses), grad))
    }
}

impl Drift for DriftNet {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let mut ws = self.workspace(1);
        self.forward_ws(x, &[t], &mut ws);
        out.copy_from_slice(ws.acts.last().expect("output layer"));
    }
}
