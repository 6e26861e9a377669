//! Logistic-regression model, per-sample binary cross-entropy, prediction
//! thresholding, and plain (untracked) SGD/Adam optimizers used by every
//! non-bilevel training path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ModelParams {
    /// Uniform init in [-1/sqrt(m), 1/sqrt(m)] for weights and bias.
    pub fn init(m: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (m as f64).sqrt();
        let weights = (0..m).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = rng.gen_range(-bound..bound);
        ModelParams { weights, bias }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// sigma(X w + b) for each row of X.
pub fn forward(params: &ModelParams, x: &[Vec<f64>]) -> Vec<f64> {
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), params.weights.len(), "feature dimension mismatch");
            let mut z = 0.0;
            for (a, b) in row.iter().zip(&params.weights) {
                z += a * b;
            }
            sigmoid(z + params.bias)
        })
        .collect()
}

/// -[t ln p + (1-t) ln(1-p)] per sample, with p clamped away from 0 and 1.
pub fn bce_per_sample(probs: &[f64], targets: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), targets.len());
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| -(t * p.max(BCE_EPS).ln() + (1.0 - t) * (1.0 - p).max(BCE_EPS).ln()))
        .collect()
}

pub fn mean_bce(probs: &[f64], targets: &[f64]) -> f64 {
    let v = bce_per_sample(probs, targets);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Hard labels: 1 iff probability >= threshold.
pub fn predict(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Threshold maximizing balanced accuracy over a 200-point grid on
/// [0.01, 0.99]; ties keep the earliest grid point.
pub fn tuned_threshold(probs: &[f64], labels: &[f64]) -> f64 {
    let mut best_t = 0.5;
    let mut best_b = -1.0;
    for i in 0..200 {
        let t = 0.01 + i as f64 * (0.99 - 0.01) / 199.0;
        let (mut tp, mut fn_, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &y) in probs.iter().zip(labels) {
            let pred = p >= t;
            match (pred, y == 1.0) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
            }
        }
        let b = 0.5 * (tp as f64 / (tp + fn_).max(1) as f64 + tn as f64 / (tn + fp).max(1) as f64);
        if b > best_b {
            best_b = b;
            best_t = t;
        }
    }
    best_t
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-correction reciprocals 1/(1 - beta^t), shared by the plain and the
/// tracked optimizer so their updates agree bit-for-bit.
#[inline]
pub fn bias_corrections(beta1: f64, beta2: f64, t: u32) -> (f64, f64) {
    (1.0 / (1.0 - beta1.powi(t as i32)), 1.0 / (1.0 - beta2.powi(t as i32)))
}

#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step: u32,
    },
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        OptimizerState::Sgd { lr }
    }

    /// `shapes` holds the length of each parameter group (scalars are length 1).
    pub fn adam(lr: f64, shapes: &[usize]) -> Self {
        OptimizerState::Adam {
            lr,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// In-place update of parameter groups. The Adam arithmetic mirrors the
    /// tracked optimizer exactly: one epsilon added inside the square root.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for (p, g) in params.iter().zip(grads) {
            assert_eq!(p.len(), g.len(), "optimizer shape mismatch");
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training("non-finite gradient".into()));
            }
        }
        match self {
            OptimizerState::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(*g) {
                        *pi = *pi - *lr * *gi;
                    }
                }
            }
            OptimizerState::Adam { lr, m, v, step } => {
                *step += 1;
                let (r1, r2) = bias_corrections(ADAM_BETA1, ADAM_BETA2, *step);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[k][i] = ADAM_BETA1 * m[k][i] + (1.0 - ADAM_BETA1) * gi;
                        v[k][i] = ADAM_BETA2 * v[k][i] + (1.0 - ADAM_BETA2) * (gi * gi);
                        let mhat = r1 * m[k][i];
                        let vhat = r2 * v[k][i];
                        let denom = (vhat + ADAM_EPS).sqrt();
                        let upd = mhat / denom;
                        p[i] -= *lr * upd;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Closed-form gradient of weighted mean BCE for logistic regression:
/// (X'[(p - y) .* w] / B, sum((p - y) .* w) / B).
pub fn weighted_bce_grad(
    x: &[Vec<f64>],
    y: &[f64],
    probs: &[f64],
    sample_w: Option<&[f64]>,
) -> (Vec<f64>, f64) {
    let bsz = y.len();
    let m = x[0].len();
    let mut gw = vec![0.0; m];
    let mut gb = 0.0;
    for i in 0..bsz {
        let mut r = probs[i] - y[i];
        if let Some(w) = sample_w {
            r *= w[i];
        }
        for (j, xj) in x[i].iter().enumerate() {
            gw[j] += xj * r;
        }
        gb += r;
    }
    for g in &mut gw {
        *g /= bsz as f64;
    }
    (gw, gb / bsz as f64)
}

/// Serialized model checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub encoder_hash: String,
}
