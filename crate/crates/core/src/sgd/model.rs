//! A one-hidden-layer MLP with softmax cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collectives::GradientBuffer;
use crate::dimd::{CLASSES, FEATURES};

pub const INPUTS: usize = FEATURES;
pub const HIDDEN: usize = 8;
pub const OUTPUTS: usize = CLASSES;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUTS;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + OUTPUTS * HIDDEN;
/// Total parameter count.
pub const N_PARAMS: usize = B2 + OUTPUTS;

/// One training example.
pub type Sample = ([f32; INPUTS], u32);

/// Flat weights: `W1` (hidden × inputs, row major), `b1`, `W2`
/// (outputs × hidden), `b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub weights: Vec<f32>,
}

/// Sum of per-sample gradients plus loss and hit counts.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSum {
    pub grad: Vec<f32>,
    pub loss_sum: f64,
    pub correct: usize,
}

impl ToyModel {
    /// Uniform Glorot-style initialization, identical for identical seeds.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0f32; N_PARAMS];
        let a1 = (6.0 / (INPUTS + HIDDEN) as f32).sqrt();
        let a2 = (6.0 / (HIDDEN + OUTPUTS) as f32).sqrt();
        for w in &mut weights[W1..B1] {
            *w = rng.gen_range(-a1..a1);
        }
        for w in &mut weights[W2..B2] {
            *w = rng.gen_range(-a2..a2);
        }
        Self { weights }
    }

    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; N_PARAMS],
        }
    }

    /// Mean loss gradient over `batch` (empty batch gives zeros).
    pub fn grad(&self, batch: &[Sample]) -> GradientBuffer {
        let g = grad_f64(&to_f64(&self.weights), batch);
        let n = batch.len().max(1) as f64;
        g.grad.iter().map(|x| (x / n) as f32).collect::<Vec<_>>().into()
    }

    /// Summed gradient, loss and correct count. Accumulates in `f64` and
    /// rounds once, so the result only depends on the samples' order.
    pub fn grad_sum(&self, batch: &[Sample]) -> GradSum {
        let g = grad_f64(&to_f64(&self.weights), batch);
        GradSum {
            grad: g.grad.iter().map(|&x| x as f32).collect(),
            loss_sum: g.loss,
            correct: g.correct,
        }
    }

    /// Mean loss over `batch`.
    pub fn loss(&self, batch: &[Sample]) -> f64 {
        loss_f64(&to_f64(&self.weights), batch) / batch.len().max(1) as f64
    }

    pub fn predict(&self, x: &[f32; INPUTS]) -> u32 {
        let (_, z) = forward(&to_f64(&self.weights), x);
        argmax(&z) as u32
    }

    pub fn accuracy(&self, batch: &[Sample]) -> f64 {
        let hits = batch.iter().filter(|(x, y)| self.predict(x) == *y).count();
        hits as f64 / batch.len().max(1) as f64
    }
}

fn to_f64(w: &[f32]) -> Vec<f64> {
    w.iter().map(|&x| x as f64).collect()
}

fn forward(w: &[f64], x: &[f32; INPUTS]) -> ([f64; HIDDEN], [f64; OUTPUTS]) {
    let mut h = [0.0f64; HIDDEN];
    for (j, hj) in h.iter_mut().enumerate() {
        let row = &w[W1 + j * INPUTS..W1 + (j + 1) * INPUTS];
        let pre = w[B1 + j] + row.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>();
        *hj = pre.tanh();
    }
    let mut z = [0.0f64; OUTPUTS];
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &w[W2 + o * HIDDEN..W2 + (o + 1) * HIDDEN];
        *zo = w[B2 + o] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
    }
    (h, z)
}

fn softmax(z: &[f64; OUTPUTS]) -> [f64; OUTPUTS] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - max).exp());
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Summed loss at `f64` weights `w`; for finite-difference checks.
pub fn loss_f64(w: &[f64], batch: &[Sample]) -> f64 {
    batch
        .iter()
        .map(|(x, y)| {
            let (_, z) = forward(w, x);
            -softmax(&z)[*y as usize].ln()
        })
        .sum()
}

/// Summed analytic gradient at `f64` weights `w`.
pub fn grad_sum_f64(w: &[f64], batch: &[Sample]) -> Vec<f64> {
    grad_f64(w, batch).grad
}

struct GradF64 {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub correct: usize,
}

fn grad_f64(w: &[f64], batch: &[Sample]) -> GradF64 {
    let mut g = vec![0.0f64; N_PARAMS];
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, y) in batch {
        let y = *y as usize;
        let (h, z) = forward(w, x);
        let p = softmax(&z);
        loss -= p[y].ln();
        if argmax(&z) == y {
            correct += 1;
        }
        let mut dz = p;
        dz[y] -= 1.0;
        let mut dh = [0.0f64; HIDDEN];
        for o in 0..OUTPUTS {
            g[B2 + o] += dz[o];
            for j in 0..HIDDEN {
                g[W2 + o * HIDDEN + j] += dz[o] * h[j];
                dh[j] += w[W2 + o * HIDDEN + j] * dz[o];
            }
        }
        for j in 0..HIDDEN {
            let dpre = dh[j] * (1.0 - h[j] * h[j]);
            g[B1 + j] += dpre;
            for (i, &xi) in x.iter().enumerate() {
                g[W1 + j * INPUTS + i] += dpre * xi as f64;
            }
        }
    }
    GradF64 {
        grad: g,
        loss,
        correct,
    }
}
