//! Helpers shared by the property and acceptance test targets: synthetic
//! datasets with a controllable group bias, and a miniature version of the
//! bilevel pipeline whose hypergradients can be checked against finite
//! differences and closed forms.

// each test target compiles this module separately and uses its own subset
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

use fairtrain::autodiff::{unrolled_inner_loop, InnerBatch, InnerOpt, Mat, NodeId, Tape, TrackedOptimizer};
use fairtrain::dataset::{stream_rng, DataSplits, Encoder, TabularDataset};
use fairtrain::fairness::{fairness_loss, fairness_loss_value, FairnessKind};
use fairtrain::model::sigmoid;
use fairtrain::trainers::{bilevel_outer_loss, TrainConfig};
use fairtrain::Result;

/// Synthetic binary rows where one latent direction drives the label and the
/// group attribute shifts it, so a plain fit picks up a measurable parity gap.
pub fn biased_rows(n: usize, seed: u64, group_shift: f64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u8>) {
    let mut rng = stream_rng(seed, 177);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let si = u8::from(rng.gen_bool(0.5));
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        let logit = 2.0 * a + 1.5 * b + group_shift * (2.0 * si as f64 - 1.0);
        x.push(vec![a, b]);
        y.push(f64::from(rng.gen_bool(sigmoid(2.0 * logit))));
        s.push(si);
    }
    (x, y, s)
}

fn plain_encoder() -> Encoder {
    Encoder {
        feature_names: vec!["a".into(), "b".into()],
        vocabs: BTreeMap::new(),
        standardize: BTreeMap::new(),
    }
}

fn slice_dataset(x: &[Vec<f64>], y: &[f64], s: &[u8], range: std::ops::Range<usize>) -> TabularDataset {
    TabularDataset::from_parts(
        x[range.clone()].to_vec(),
        y[range.clone()].to_vec(),
        s[range.clone()].to_vec(),
        vec![true; range.len()],
    )
    .expect("consistent synthetic columns")
}

/// 60/20/20 split of `biased_rows` with every group attribute known.
pub fn toy_splits(n: usize, seed: u64, group_shift: f64) -> DataSplits {
    let (x, y, s) = biased_rows(n, seed, group_shift);
    let a = n * 6 / 10;
    let b = n * 8 / 10;
    DataSplits {
        train: slice_dataset(&x, &y, &s, 0..a),
        validation: slice_dataset(&x, &y, &s, a..b),
        test: slice_dataset(&x, &y, &s, b..n),
        encoder: plain_encoder(),
        seed,
    }
}

/// Splits whose every part holds exactly `k` rows per (s, y) cell, making the
/// reweighing correction factors all exactly 1.
pub fn balanced_splits(k: usize, seed: u64) -> DataSplits {
    let mut rng = stream_rng(seed, 178);
    let mut part = |cells: usize| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut s = Vec::new();
        for (sv, yv) in [(1u8, 1.0), (1, 0.0), (0, 1.0), (0, 0.0)] {
            for _ in 0..cells {
                x.push(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                y.push(yv);
                s.push(sv);
            }
        }
        let n = x.len();
        TabularDataset::from_parts(x, y, s, vec![true; n]).expect("balanced part")
    };
    DataSplits {
        train: part(k),
        validation: part(k / 2 + 1),
        test: part(k / 2 + 1),
        encoder: plain_encoder(),
        seed,
    }
}

/// A small fixed-size instance of the bilevel pipeline: raw per-sample weight
/// logits v feed `inner_steps` tracked optimizer steps, then a fairness loss
/// on a held demographic batch is read off the unrolled parameters.
pub struct HyperToy {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub batches: Vec<Vec<usize>>,
    pub dem_x: Vec<Vec<f64>>,
    pub dem_y: Vec<f64>,
    pub dem_s: Vec<u8>,
    pub theta_w: Vec<f64>,
    pub theta_b: f64,
    pub kind: FairnessKind,
    pub lambda: f64,
}

pub const HYPER_N: usize = 12;
const HYPER_M: usize = 3;
const HYPER_B: usize = 4;
const HYPER_DEM: usize = 12;

pub fn random_hyper_toy(seed: u64, inner_steps: usize, kind: FairnessKind, lambda: f64) -> HyperToy {
    let mut rng = stream_rng(seed, 179);
    let mut x = Vec::with_capacity(HYPER_N);
    let mut y = Vec::with_capacity(HYPER_N);
    for _ in 0..HYPER_N {
        x.push((0..HYPER_M).map(|_| rng.gen_range(-1.5..1.5)).collect());
        y.push(f64::from(rng.gen_bool(0.5)));
    }
    let batches = (0..inner_steps)
        .map(|_| rand::seq::index::sample(&mut rng, HYPER_N, HYPER_B).into_vec())
        .collect();
    let mut dem_x = Vec::with_capacity(HYPER_DEM);
    let mut dem_y = Vec::with_capacity(HYPER_DEM);
    let mut dem_s = Vec::with_capacity(HYPER_DEM);
    for i in 0..HYPER_DEM {
        dem_x.push((0..HYPER_M).map(|_| rng.gen_range(-1.5..1.5)).collect());
        // the first four rows pin one sample in every (s, y) cell
        let (sv, yv) = match i {
            0 => (1, 1.0),
            1 => (1, 0.0),
            2 => (0, 1.0),
            3 => (0, 0.0),
            _ => (u8::from(rng.gen_bool(0.5)), f64::from(rng.gen_bool(0.5))),
        };
        dem_s.push(sv);
        dem_y.push(yv);
    }
    HyperToy {
        x,
        y,
        batches,
        dem_x,
        dem_y,
        dem_s,
        theta_w: (0..HYPER_M).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        theta_b: rng.gen_range(-0.5..0.5),
        kind,
        lambda,
    }
}

fn build_outer(
    tape: &mut Tape,
    toy: &HyperToy,
    opt: InnerOpt,
    v: &[f64],
    fairness_only: bool,
) -> Result<(NodeId, NodeId, NodeId)> {
    let v_leaf = tape.leaf_vector(v.to_vec());
    let tw0 = tape.vector(toy.theta_w.clone());
    let tb0 = tape.scalar(toy.theta_b);
    let mut inner = Vec::with_capacity(toy.batches.len());
    for idx in &toy.batches {
        let picked = tape.gather(v_leaf, idx.clone());
        let soft = tape.softplus(picked);
        let mean = tape.mean(soft);
        let weights = tape.div(soft, mean);
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| toy.x[i].clone()).collect();
        inner.push(InnerBatch {
            x: Mat::from_rows(&rows),
            y: idx.iter().map(|&i| toy.y[i]).collect(),
            weights,
        });
    }
    let mut tracked = TrackedOptimizer::new(opt);
    let (tw, tb, _) = unrolled_inner_loop(tape, tw0, tb0, &inner, &mut tracked)?;
    let xd = tape.matrix(Mat::from_rows(&toy.dem_x));
    let xw = tape.matvec(xd, tw);
    let logits = tape.add(xw, tb);
    let probs = tape.sigmoid(logits);
    let root = if fairness_only {
        fairness_loss(tape, probs, &toy.dem_y, &toy.dem_s, toy.kind, false)?
    } else {
        let cfg = TrainConfig { lambda: toy.lambda, fairness: toy.kind, ..TrainConfig::default() };
        bilevel_outer_loss(tape, probs, &toy.dem_y, &toy.dem_s, &cfg)?
    };
    Ok((root, v_leaf, probs))
}

/// Forward value of the outer loss at `v`.
pub fn outer_value(toy: &HyperToy, opt: InnerOpt, v: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let (root, _, _) = build_outer(&mut tape, toy, opt, v, false)?;
    Ok(tape.value(root).as_scalar())
}

/// Outer loss, its gradient w.r.t. v, and the demographic-batch probabilities
/// at the unrolled parameters (used to rule out kink-adjacent instances).
pub fn outer_grad(toy: &HyperToy, opt: InnerOpt, v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let (root, v_leaf, probs) = build_outer(&mut tape, toy, opt, v, false)?;
    let value = tape.value(root).as_scalar();
    let dem_probs = tape.value(probs).as_vector().to_vec();
    let grads = tape.backward(root)?;
    Ok((value, grads.vector(v_leaf, &tape), dem_probs))
}

/// Same pipeline rooted at the bare fairness loss, ignoring the utility
/// weight entirely; the zero-lambda reduction identity compares against it.
pub fn outer_grad_fairness_only(toy: &HyperToy, opt: InnerOpt, v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (root, v_leaf, _) = build_outer(&mut tape, toy, opt, v, true)?;
    let value = tape.value(root).as_scalar();
    let grads = tape.backward(root)?;
    Ok((value, grads.vector(v_leaf, &tape)))
}

/// Central finite differences of the outer loss w.r.t. every v coordinate.
pub fn fd_grad(toy: &HyperToy, opt: InnerOpt, v: &[f64], delta: f64) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        let mut hi = v.to_vec();
        hi[i] += delta;
        let mut lo = v.to_vec();
        lo[i] -= delta;
        g.push((outer_value(toy, opt, &hi)? - outer_value(toy, opt, &lo)?) / (2.0 * delta));
    }
    Ok(g)
}

/// True when every absolute-value term inside the chosen parity loss sits at
/// least `margin` away from its kink, so central differences stay one-sided.
pub fn away_from_kinks(probs: &[f64], y: &[f64], s: &[u8], kind: FairnessKind, margin: f64) -> bool {
    let value = |k: FairnessKind| fairness_loss_value(probs, y, s, k, false);
    match kind {
        FairnessKind::Eod | FairnessKind::Spd => value(kind).map(|l| l > margin).unwrap_or(false),
        FairnessKind::Aod => match (value(FairnessKind::Aod), value(FairnessKind::Eod)) {
            (Ok(aod), Ok(eod)) => eod > margin && aod - eod > margin,
            _ => false,
        },
    }
}

/// A single full-batch instance for the closed-form one-step check.
pub struct OneStepToy {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub dem_x: Vec<Vec<f64>>,
    pub dem_y: Vec<f64>,
    pub dem_s: Vec<u8>,
    pub theta_w: Vec<f64>,
    pub theta_b: f64,
    pub kind: FairnessKind,
}

pub fn random_one_step_toy(seed: u64, kind: FairnessKind) -> OneStepToy {
    let hyper = random_hyper_toy(seed, 1, kind, 0.0);
    OneStepToy {
        x: hyper.x,
        y: hyper.y,
        dem_x: hyper.dem_x,
        dem_y: hyper.dem_y,
        dem_s: hyper.dem_s,
        theta_w: hyper.theta_w,
        theta_b: hyper.theta_b,
        kind,
    }
}

/// dL_f/dw through the tape for one SGD step whose batch weights are the raw
/// leaf values (no softplus, no normalization).
pub fn one_step_hypergrad(toy: &OneStepToy, lr: f64, w: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w_leaf = tape.leaf_vector(w.to_vec());
    let tw0 = tape.vector(toy.theta_w.clone());
    let tb0 = tape.scalar(toy.theta_b);
    let batch = InnerBatch { x: Mat::from_rows(&toy.x), y: toy.y.clone(), weights: w_leaf };
    let mut tracked = TrackedOptimizer::new(InnerOpt::Sgd { lr });
    let (tw, tb, _) = unrolled_inner_loop(&mut tape, tw0, tb0, &[batch], &mut tracked)?;
    let xd = tape.matrix(Mat::from_rows(&toy.dem_x));
    let xw = tape.matvec(xd, tw);
    let logits = tape.add(xw, tb);
    let probs = tape.sigmoid(logits);
    let fair = fairness_loss(&mut tape, probs, &toy.dem_y, &toy.dem_s, toy.kind, false)?;
    let grads = tape.backward(fair)?;
    Ok(grads.vector(w_leaf, &tape))
}

/// The same quantity from the closed form
/// dL_f/dw_i = -lr * g_i(theta_0)^T grad L_f(theta_1), where g_i is sample
/// i's contribution to the weighted BCE gradient and theta_1 the stepped
/// parameters. Only grad L_f comes from a (separate, single-layer) tape.
pub fn one_step_oracle(toy: &OneStepToy, lr: f64, w: &[f64]) -> Result<Vec<f64>> {
    let n = toy.y.len();
    let m = toy.theta_w.len();
    let p0: Vec<f64> = toy
        .x
        .iter()
        .map(|row| {
            let z: f64 = row.iter().zip(&toy.theta_w).map(|(a, b)| a * b).sum();
            sigmoid(z + toy.theta_b)
        })
        .collect();
    // per-sample pieces of the weighted gradient, and the stepped parameters
    let mut gw_i = vec![vec![0.0; m]; n];
    let mut gb_i = vec![0.0; n];
    let mut theta1_w = toy.theta_w.clone();
    let mut theta1_b = toy.theta_b;
    for i in 0..n {
        let r = (p0[i] - toy.y[i]) / n as f64;
        for j in 0..m {
            gw_i[i][j] = r * toy.x[i][j];
            theta1_w[j] -= lr * w[i] * gw_i[i][j];
        }
        gb_i[i] = r;
        theta1_b -= lr * w[i] * r;
    }
    let mut tape = Tape::new();
    let tw1 = tape.leaf_vector(theta1_w);
    let tb1 = tape.leaf_scalar(theta1_b);
    let xd = tape.matrix(Mat::from_rows(&toy.dem_x));
    let xw = tape.matvec(xd, tw1);
    let logits = tape.add(xw, tb1);
    let probs = tape.sigmoid(logits);
    let fair = fairness_loss(&mut tape, probs, &toy.dem_y, &toy.dem_s, toy.kind, false)?;
    let grads = tape.backward(fair)?;
    let gw_f = grads.vector(tw1, &tape);
    let gb_f = grads.scalar(tb1, &tape);
    Ok((0..n)
        .map(|i| {
            let dot: f64 = gw_i[i].iter().zip(&gw_f).map(|(a, b)| a * b).sum();
            -lr * (dot + gb_i[i] * gb_f)
        })
        .collect())
}

/// max(|a - b|) relative check used across the gradient properties.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}
