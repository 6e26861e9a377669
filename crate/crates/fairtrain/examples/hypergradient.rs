//! The differentiation core on a toy problem small enough to eyeball: build
//! the two-level graph by hand, read d(fairness)/d(weight logits) off one
//! backward pass, and confirm a coordinate against central differences.
//!
//! The same construction runs inside the bilevel trainer; here the pieces
//! are laid out flat so the tape API is visible.

use fairtrain::autodiff::{unrolled_inner_loop, InnerBatch, InnerOpt, Mat, Tape, TrackedOptimizer};
use fairtrain::fairness::{fairness_loss, FairnessKind};

const X: [[f64; 2]; 6] = [
    [0.8, -0.3],
    [-1.2, 0.5],
    [0.4, 1.1],
    [-0.6, -0.9],
    [1.3, 0.2],
    [-0.2, 0.7],
];
const Y: [f64; 6] = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
// demographic batch: one row in every (group, label) cell
const DEM_X: [[f64; 2]; 4] = [[0.9, 0.1], [-0.5, 0.4], [0.3, -0.8], [-1.0, -0.2]];
const DEM_Y: [f64; 4] = [1.0, 0.0, 1.0, 0.0];
const DEM_S: [u8; 4] = [1, 1, 0, 0];

/// Outer fairness loss after two weighted Adam steps, with the gradient on
/// the weight logits when `want_grad` is set.
fn outer(v: &[f64], want_grad: bool) -> fairtrain::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let v_leaf = tape.leaf_vector(v.to_vec());

    // weights enter each inner step positive and batch-mean 1
    let soft = tape.softplus(v_leaf);
    let mean = tape.mean(soft);
    let weights = tape.div(soft, mean);

    let theta_w = tape.vector(vec![0.1, -0.2]);
    let theta_b = tape.scalar(0.05);
    let batch = InnerBatch { x: Mat::from_rows(&X.map(Vec::from)), y: Y.to_vec(), weights };
    let mut opt = TrackedOptimizer::new(InnerOpt::adam(0.1));
    let (tw, tb, _) = unrolled_inner_loop(&mut tape, theta_w, theta_b, &[batch.clone(), batch], &mut opt)?;

    let xd = tape.matrix(Mat::from_rows(&DEM_X.map(Vec::from)));
    let xw = tape.matvec(xd, tw);
    let logits = tape.add(xw, tb);
    let probs = tape.sigmoid(logits);
    let loss = fairness_loss(&mut tape, probs, &DEM_Y, &DEM_S, FairnessKind::Aod, false)?;

    let value = tape.value(loss).as_scalar();
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.vector(v_leaf, &tape)))
}

fn main() -> fairtrain::Result<()> {
    let v = vec![0.3, -0.5, 0.1, 0.7, -0.2, 0.4];
    let (value, grad) = outer(&v, true)?;
    println!("outer fairness loss  {value:.6}");
    println!("hypergradient dL/dv  {:?}", grad.iter().map(|g| (g * 1e4).round() / 1e4).collect::<Vec<_>>());

    let delta = 1e-5;
    let mut hi = v.clone();
    hi[2] += delta;
    let mut lo = v.clone();
    lo[2] -= delta;
    let fd = (outer(&hi, false)?.0 - outer(&lo, false)?.0) / (2.0 * delta);
    println!("coordinate 2: reverse mode {:.8}, central differences {:.8}", grad[2], fd);
    Ok(())
}
