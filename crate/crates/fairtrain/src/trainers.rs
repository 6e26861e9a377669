//! The training algorithms: an unconstrained baseline, reweighing, a
//! regularized learner that penalizes group-dependent predictions,
//! adversarially reweighted learning, an imputation wrapper for partially
//! known demographics, and a bilevel trainer that learns per-sample weights
//! from a small demographically labeled subset.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{unrolled_inner_loop, InnerBatch, InnerOpt, Mat, NodeId, Tape, TrackedOptimizer};
use crate::dataset::{stream_rng, streams, DataSplits};
use crate::error::{Error, Result};
use crate::fairness::{cell_indices, fairness_loss, fairness_loss_value, FairnessKind};
use crate::harness::EarlyStop;
use crate::model::{
    bce_per_sample, forward, mean_bce, weighted_bce_grad, ModelParams, OptimizerState,
};

/// Hyperparameters shared by every trainer. Fields irrelevant to a given
/// algorithm are ignored by it (e.g. `lambda` outside the bilevel path).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Outer budget in epochs; one epoch is ceil(n / batch_size) steps.
    pub max_epochs: usize,
    /// Tracked inner steps per outer iteration of the bilevel trainer.
    pub inner_steps: usize,
    pub batch_size: usize,
    /// Cap on the stratified demographic batch (clamped to |D_dem|).
    pub dem_batch_size: usize,
    pub lr_theta: f64,
    pub lr_weights: f64,
    pub lr_adversary: f64,
    /// Weight of the utility term in the bilevel outer loss; 0 disables it.
    pub lambda: f64,
    pub fairness: FairnessKind,
    /// Replace the unfavorable-outcome term of the odds loss by the
    /// privileged-favorable vs unprivileged-unfavorable gap.
    pub aod_mixed_term: bool,
    /// Weight of the group-dependence regularizer.
    pub prejudice_eta: f64,
    pub patience: usize,
    /// Adam steps used to fit the group-attribute predictor when imputing.
    pub impute_steps: usize,
    /// Impute soft group probabilities instead of hard 0/1 fills.
    pub soft_impute: bool,
    /// Tune the decision threshold on validation instead of using 0.5.
    pub tuned_threshold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_epochs: 200,
            inner_steps: 2,
            batch_size: 256,
            dem_batch_size: 256,
            lr_theta: 1e-3,
            lr_weights: 0.5,
            lr_adversary: 1e-3,
            lambda: 0.0,
            fairness: FairnessKind::Aod,
            aod_mixed_term: false,
            prejudice_eta: 2.0,
            patience: 5,
            impute_steps: 1000,
            soft_impute: false,
            tuned_threshold: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Training(format!("{name} must be positive, got {v}")))
            }
        }
        if self.max_epochs == 0 {
            return Err(Error::Training("max_epochs must be at least 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Training("inner_steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.dem_batch_size == 0 {
            return Err(Error::Training("batch sizes must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Training("patience must be at least 1".into()));
        }
        if self.impute_steps == 0 {
            return Err(Error::Training("impute_steps must be at least 1".into()));
        }
        positive("lr_theta", self.lr_theta)?;
        positive("lr_weights", self.lr_weights)?;
        positive("lr_adversary", self.lr_adversary)?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Training(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.prejudice_eta.is_finite() || self.prejudice_eta < 0.0 {
            return Err(Error::Training(format!(
                "prejudice_eta must be >= 0, got {}",
                self.prejudice_eta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Unconstrained,
    Reweigh,
    Prejudice,
    Arl,
    Bilevel,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Unconstrained,
        Algorithm::Reweigh,
        Algorithm::Prejudice,
        Algorithm::Arl,
        Algorithm::Bilevel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Unconstrained => "unconstrained",
            Algorithm::Reweigh => "reweigh",
            Algorithm::Prejudice => "prejudice",
            Algorithm::Arl => "arl",
            Algorithm::Bilevel => "bilevel",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        match s {
            "unconstrained" => Ok(Algorithm::Unconstrained),
            "reweigh" => Ok(Algorithm::Reweigh),
            "prejudice" => Ok(Algorithm::Prejudice),
            "arl" => Ok(Algorithm::Arl),
            "bilevel" => Ok(Algorithm::Bilevel),
            other => Err(Error::Training(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Result of one training run: restored best parameters plus bookkeeping
/// for the run manifest.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Outer iterations whose demographic batch missed a required (s, y) cell.
    pub skipped_outer_steps: usize,
    /// Held-out accuracy of the group-attribute predictor, when one was fit.
    pub imputation_accuracy: Option<f64>,
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

fn gather_rows(x: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| x[i].clone()).collect()
}

fn gather_f64(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Epoch-wise shuffled minibatch indices; reshuffles when exhausted, the
/// last chunk of an epoch may be short.
struct BatchStream {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, mut rng: ChaCha8Rng) -> BatchStream {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        BatchStream { rng, perm, batch_size, pos: 0 }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.perm.len());
        let batch = self.perm[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn step_params(opt: &mut OptimizerState, params: &mut ModelParams, gw: &[f64], gb: f64) -> Result<()> {
    let mut bias = [params.bias];
    opt.step(&mut [&mut params.weights[..], &mut bias[..]], &[gw, &[gb]])?;
    params.bias = bias[0];
    Ok(())
}

/// Early stopping plus best-parameter snapshotting on a validation value.
struct Monitor {
    early: EarlyStop,
    best: ModelParams,
}

impl Monitor {
    fn new(patience: usize, init: &ModelParams) -> Monitor {
        Monitor { early: EarlyStop::new(patience), best: init.clone() }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, validation_value: f64, params: &ModelParams) -> Result<bool> {
        if !validation_value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite validation value {validation_value} at epoch {}",
                self.early.epochs() + 1
            )));
        }
        let decision = self.early.observe(validation_value);
        if decision.improved {
            self.best = params.clone();
        }
        Ok(decision.stop)
    }

    fn into_outcome(self, skipped_outer_steps: usize) -> TrainOutcome {
        TrainOutcome {
            params: self.best,
            epochs_run: self.early.epochs(),
            best_epoch: self.early.best_epoch(),
            skipped_outer_steps,
            imputation_accuracy: None,
        }
    }
}

/// What the plain (non-bilevel) minibatch loop minimizes.
enum PlainObjective {
    Bce,
    /// Fixed per-train-sample weights multiplying the per-sample loss.
    Weighted(Vec<f64>),
    /// Mean BCE plus eta times the group-dependence regularizer, with a
    /// per-sample privileged-membership degree in [0, 1].
    Prejudice { membership: Vec<f64>, eta: f64 },
}

fn validation_value(objective: &PlainObjective, params: &ModelParams, splits: &DataSplits) -> Result<f64> {
    let probs = forward(params, &splits.validation.x);
    let mut value = mean_bce(&probs, &splits.validation.y);
    if let PlainObjective::Prejudice { eta, .. } = objective {
        let s = splits.validation.s_full()?;
        let membership: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        value += eta * prejudice_value(&probs, &membership);
    }
    Ok(value)
}

fn train_plain(splits: &DataSplits, cfg: &TrainConfig, objective: PlainObjective) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tr = &splits.train;
    let (n, m) = (tr.n(), tr.m());
    if n == 0 || m == 0 {
        return Err(Error::Training("empty train split".into()));
    }
    if let PlainObjective::Weighted(w) = &objective {
        if w.len() != n {
            return Err(Error::Training("sample weight length mismatch".into()));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Training("sample weights must be finite and nonnegative".into()));
        }
    }
    let mut init_rng = stream_rng(cfg.seed, streams::INIT);
    let mut params = ModelParams::init(m, &mut init_rng);
    let mut opt = OptimizerState::adam(cfg.lr_theta, &[m, 1]);
    let mut stream = BatchStream::new(n, cfg.batch_size, stream_rng(cfg.seed, streams::BATCH));
    let steps_per_epoch = div_ceil(n, cfg.batch_size);
    let mut monitor = Monitor::new(cfg.patience, &params);
    for _ in 0..cfg.max_epochs {
        for _ in 0..steps_per_epoch {
            let idx = stream.next_batch();
            let xb = gather_rows(&tr.x, &idx);
            let yb = gather_f64(&tr.y, &idx);
            match &objective {
                PlainObjective::Bce => {
                    let probs = forward(&params, &xb);
                    let (gw, gb) = weighted_bce_grad(&xb, &yb, &probs, None);
                    step_params(&mut opt, &mut params, &gw, gb)?;
                }
                PlainObjective::Weighted(w) => {
                    let wb = gather_f64(w, &idx);
                    let probs = forward(&params, &xb);
                    let (gw, gb) = weighted_bce_grad(&xb, &yb, &probs, Some(&wb));
                    step_params(&mut opt, &mut params, &gw, gb)?;
                }
                PlainObjective::Prejudice { membership, eta } => {
                    let cb = gather_f64(membership, &idx);
                    prejudice_step(&mut opt, &mut params, &xb, &yb, &cb, *eta)?;
                }
            }
        }
        let value = validation_value(&objective, &params, splits)?;
        if monitor.observe(value, &params)? {
            break;
        }
    }
    Ok(monitor.into_outcome(0))
}

/// Minibatch Adam on mean BCE with early stopping on validation BCE.
pub fn train_unconstrained(splits: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_plain(splits, cfg, PlainObjective::Bce)
}

/// Reweighing, generalized to fractional group membership: expected cell
/// counts replace hard counts and each sample mixes the two group weights by
/// its membership probability. At 0/1 membership this is exactly the hard
/// scheme w(s, y) = [n_s * n_y / n] / n_{s,y}, which makes label and group
/// independent under the weighted empirical distribution. Cells with zero
/// (expected) mass keep weight 1.
pub fn reweigh_weights_soft(y: &[f64], membership: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), membership.len());
    let n = y.len() as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for (&yi, &ci) in y.iter().zip(membership) {
        let yv = usize::from(yi == 1.0);
        joint[1][yv] += ci;
        joint[0][yv] += 1.0 - ci;
    }
    let ns = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let ny = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut cell = [[1.0f64; 2]; 2];
    for sv in 0..2 {
        for yv in 0..2 {
            if joint[sv][yv] > 0.0 {
                cell[sv][yv] = ns[sv] * ny[yv] / (n * joint[sv][yv]);
            }
        }
    }
    y.iter()
        .zip(membership)
        .map(|(&yi, &ci)| {
            let yv = usize::from(yi == 1.0);
            ci * cell[1][yv] + (1.0 - ci) * cell[0][yv]
        })
        .collect()
}

/// Hard reweighing: w_i = pr_expected(s_i, y_i) / pr_observed(s_i, y_i).
pub fn reweigh_weights(y: &[f64], s: &[u8]) -> Vec<f64> {
    let membership: Vec<f64> = s.iter().map(|&v| v as f64).collect();
    reweigh_weights_soft(y, &membership)
}

/// Unconstrained training with reweighing weights multiplying the loss.
/// Requires the sensitive attribute on every train row.
pub fn train_reweigh(splits: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let s = splits.train.s_full()?;
    let weights = reweigh_weights(&splits.train.y, s);
    train_plain(splits, cfg, PlainObjective::Weighted(weights))
}

/// Tracked regularizer penalizing mutual information between the prediction
/// and the group: R = (1/B) sum_i sum_{yhat} M(yhat|x_i) ln(P(yhat|s_i) / P(yhat)),
/// where P(yhat|s) and P(yhat) are the batch estimates of the prediction
/// rates. `membership` is the per-sample degree of belonging to the
/// privileged group; with 0/1 entries this is the usual grouped estimate.
/// Returns None when the batch has (expected) mass in only one group, where
/// the regularizer is undefined.
pub fn prejudice_regularizer(tape: &mut Tape, probs: NodeId, membership: &[f64]) -> Option<NodeId> {
    let bsz = membership.len() as f64;
    let mass: f64 = membership.iter().sum();
    if mass < 1e-12 || bsz - mass < 1e-12 {
        return None;
    }
    let sum_p = tape.sum(probs);
    let pbar = tape.scalar_mul(sum_p, 1.0 / bsz);
    let one = tape.scalar(1.0);
    let one_minus_pbar = tape.sub(one, pbar);
    let unpriv: Vec<f64> = membership.iter().map(|&c| 1.0 - c).collect();
    let mut total: Option<NodeId> = None;
    for (degrees, group_mass) in [(membership.to_vec(), mass), (unpriv, bsz - mass)] {
        let c = tape.vector(degrees);
        let cp = tape.mul(c, probs);
        let num = tape.sum(cp);
        let pc = tape.scalar_mul(num, 1.0 / group_mass);
        let one_minus_pc = tape.sub(one, pc);
        let ratio_fav = tape.div(pc, pbar);
        let log_fav = tape.log(ratio_fav);
        let ratio_unfav = tape.div(one_minus_pc, one_minus_pbar);
        let log_unfav = tape.log(ratio_unfav);
        let fav_term = tape.mul(num, log_fav);
        let mass_node = tape.scalar(group_mass);
        let rest = tape.sub(mass_node, num);
        let unfav_term = tape.mul(rest, log_unfav);
        let term = tape.add(fav_term, unfav_term);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.map(|t| tape.scalar_mul(t, 1.0 / bsz))
}

/// Plain value of the regularizer (0 when it is skipped), evaluated through
/// the same tape ops so the two paths cannot drift apart.
pub fn prejudice_value(probs: &[f64], membership: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.vector(probs.to_vec());
    match prejudice_regularizer(&mut tape, p, membership) {
        Some(r) => tape.value(r).as_scalar(),
        None => 0.0,
    }
}

fn prejudice_step(
    opt: &mut OptimizerState,
    params: &mut ModelParams,
    xb: &[Vec<f64>],
    yb: &[f64],
    membership: &[f64],
    eta: f64,
) -> Result<()> {
    let mut tape = Tape::new();
    let tw = tape.leaf_vector(params.weights.clone());
    let tb = tape.leaf_scalar(params.bias);
    let x = tape.matrix(Mat::from_rows(xb));
    let xw = tape.matvec(x, tw);
    let logits = tape.add(xw, tb);
    let probs = tape.sigmoid(logits);
    let bce = tape.bce(probs, yb);
    let mut loss = tape.mean(bce);
    if let Some(reg) = prejudice_regularizer(&mut tape, probs, membership) {
        let scaled = tape.scalar_mul(reg, eta);
        loss = tape.add(loss, scaled);
    }
    tape.check_finite(loss)?;
    let grads = tape.backward(loss)?;
    let gw = grads.vector(tw, &tape);
    let gb = grads.scalar(tb, &tape);
    step_params(opt, params, &gw, gb)
}

/// Mean BCE plus eta times the group-dependence regularizer. Early stopping
/// monitors the same objective on validation. Requires the sensitive
/// attribute on every train row.
pub fn train_prejudice(splits: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let s = splits.train.s_full()?;
    let membership: Vec<f64> = s.iter().map(|&v| v as f64).collect();
    train_plain(
        splits,
        cfg,
        PlainObjective::Prejudice { membership, eta: cfg.prejudice_eta },
    )
}

/// lambda_i = 1 + B * sigma(f_i) / sum_j sigma(f_j); always >= 1 with mean 2.
fn arl_lambdas(scores: &[f64]) -> Vec<f64> {
    let b = scores.len() as f64;
    let total: f64 = scores.iter().sum();
    scores.iter().map(|&f| 1.0 + b * f / total).collect()
}

fn adversary_step(
    opt: &mut OptimizerState,
    adversary: &mut ModelParams,
    xadv: &[Vec<f64>],
    losses: &[f64],
) -> Result<()> {
    let bsz = losses.len() as f64;
    let mut tape = Tape::new();
    let wa = tape.leaf_vector(adversary.weights.clone());
    let ba = tape.leaf_scalar(adversary.bias);
    let x = tape.matrix(Mat::from_rows(xadv));
    let xw = tape.matvec(x, wa);
    let logits = tape.add(xw, ba);
    let f = tape.sigmoid(logits);
    let total = tape.sum(f);
    let frac = tape.div(f, total);
    let scaled = tape.scalar_mul(frac, bsz);
    let ones = tape.vector(vec![1.0; losses.len()]);
    let lam = tape.add(ones, scaled);
    let frozen = tape.vector(losses.to_vec());
    let weighted = tape.mul(frozen, lam);
    let mean = tape.mean(weighted);
    let objective = tape.scalar_mul(mean, -1.0);
    tape.check_finite(objective)?;
    let grads = tape.backward(objective)?;
    let gw = grads.vector(wa, &tape);
    let gb = grads.scalar(ba, &tape);
    step_params(opt, adversary, &gw, gb)
}

/// Adversarially reweighted learning. The learner minimizes
/// mean(lambda_i * BCE_i); a linear adversary over [x; y] produces the
/// scores behind lambda and ascends the same weighted loss (on per-sample
/// losses frozen at the current learner). One Adam step each per batch.
/// Never reads the sensitive attribute.
pub fn train_arl(splits: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tr = &splits.train;
    let (n, m) = (tr.n(), tr.m());
    if n == 0 || m == 0 {
        return Err(Error::Training("empty train split".into()));
    }
    let mut init_rng = stream_rng(cfg.seed, streams::INIT);
    let mut learner = ModelParams::init(m, &mut init_rng);
    let mut adv_rng = stream_rng(cfg.seed, streams::ADVERSARY);
    let mut adversary = ModelParams::init(m + 1, &mut adv_rng);
    let mut lopt = OptimizerState::adam(cfg.lr_theta, &[m, 1]);
    let mut aopt = OptimizerState::adam(cfg.lr_adversary, &[m + 1, 1]);
    let mut stream = BatchStream::new(n, cfg.batch_size, stream_rng(cfg.seed, streams::BATCH));
    let steps_per_epoch = div_ceil(n, cfg.batch_size);
    let mut monitor = Monitor::new(cfg.patience, &learner);
    for _ in 0..cfg.max_epochs {
        for _ in 0..steps_per_epoch {
            let idx = stream.next_batch();
            let xb = gather_rows(&tr.x, &idx);
            let yb = gather_f64(&tr.y, &idx);
            let xadv: Vec<Vec<f64>> = xb
                .iter()
                .zip(&yb)
                .map(|(row, &yv)| {
                    let mut v = row.clone();
                    v.push(yv);
                    v
                })
                .collect();
            let scores = forward(&adversary, &xadv);
            let lambdas = arl_lambdas(&scores);
            let probs = forward(&learner, &xb);
            let losses = bce_per_sample(&probs, &yb);
            let (gw, gb) = weighted_bce_grad(&xb, &yb, &probs, Some(&lambdas));
            step_params(&mut lopt, &mut learner, &gw, gb)?;
            adversary_step(&mut aopt, &mut adversary, &xadv, &losses)?;
        }
        let probs = forward(&learner, &splits.validation.x);
        let value = mean_bce(&probs, &splits.validation.y);
        if monitor.observe(value, &learner)? {
            break;
        }
    }
    Ok(monitor.into_outcome(0))
}

/// A completed copy of the splits plus what is known about the fill quality.
#[derive(Clone, Debug)]
pub struct Imputation {
    pub splits: DataSplits,
    /// Held-out accuracy estimate of the group predictor; None when nothing
    /// was imputed.
    pub accuracy: Option<f64>,
    /// Per-train-row privileged probability (known rows pinned to 0/1),
    /// present only with `soft_impute`.
    pub probabilities: Option<Vec<f64>>,
}

fn fit_group_predictor(x: &[Vec<f64>], s01: &[f64], cfg: &TrainConfig) -> Result<ModelParams> {
    let (n, m) = (x.len(), x[0].len());
    let mut rng = stream_rng(cfg.seed, streams::IMPUTE_INIT);
    let mut params = ModelParams::init(m, &mut rng);
    let mut opt = OptimizerState::adam(cfg.lr_theta, &[m, 1]);
    let batch = cfg.batch_size.min(n);
    let mut stream = BatchStream::new(n, batch, stream_rng(cfg.seed, streams::IMPUTE_BATCH));
    for _ in 0..cfg.impute_steps {
        let idx = stream.next_batch();
        let xb = gather_rows(x, &idx);
        let sb = gather_f64(s01, &idx);
        let probs = forward(&params, &xb);
        let (gw, gb) = weighted_bce_grad(&xb, &sb, &probs, None);
        step_params(&mut opt, &mut params, &gw, gb)?;
    }
    Ok(params)
}

/// Held-out accuracy of the group predictor fit on (x, s01): leave-one-out
/// below 100 samples, a shuffled 80/20 split otherwise. Never touches rows
/// outside the demographically labeled subset.
fn estimate_imputation_accuracy(x: &[Vec<f64>], s01: &[f64], cfg: &TrainConfig) -> Result<f64> {
    let n = x.len();
    if n < 100 {
        let mut correct = 0usize;
        for k in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&i| i != k).collect();
            let xf = gather_rows(x, &keep);
            let sf = gather_f64(s01, &keep);
            let params = fit_group_predictor(&xf, &sf, cfg)?;
            let p = forward(&params, std::slice::from_ref(&x[k]))[0];
            if (p >= 0.5) == (s01[k] == 1.0) {
                correct += 1;
            }
        }
        Ok(correct as f64 / n as f64)
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, streams::IMPUTE_BATCH));
        let n_fit = ((0.8 * n as f64).round() as usize).clamp(1, n - 1);
        let (fit, hold) = order.split_at(n_fit);
        let xf = gather_rows(x, fit);
        let sf = gather_f64(s01, fit);
        let params = fit_group_predictor(&xf, &sf, cfg)?;
        let mut correct = 0usize;
        for &i in hold {
            let p = forward(&params, std::slice::from_ref(&x[i]))[0];
            if (p >= 0.5) == (s01[i] == 1.0) {
                correct += 1;
            }
        }
        Ok(correct as f64 / hold.len() as f64)
    }
}

/// Fit a logistic group-attribute predictor on the demographically labeled
/// train rows and fill the masked rows with its hard 0.5-threshold
/// predictions (known rows are never overwritten). Returns the splits
/// unchanged when nothing is masked.
pub fn impute_demographics(splits: &DataSplits, cfg: &TrainConfig) -> Result<Imputation> {
    cfg.validate()?;
    let tr = &splits.train;
    if tr.dem_count() == tr.n() {
        return Ok(Imputation { splits: splits.clone(), accuracy: None, probabilities: None });
    }
    let didx = tr.dem_indices();
    if didx.len() < 2 {
        return Err(Error::Training(format!(
            "cannot impute from {} demographically labeled sample(s)",
            didx.len()
        )));
    }
    let x_dem = gather_rows(&tr.x, &didx);
    let s_dem: Vec<f64> = didx
        .iter()
        .map(|&i| tr.s_at(i).expect("dem_indices row") as f64)
        .collect();
    if s_dem.iter().all(|&v| v == s_dem[0]) {
        return Err(Error::Training(
            "demographically labeled subset contains a single group; cannot fit a predictor".into(),
        ));
    }
    let predictor = fit_group_predictor(&x_dem, &s_dem, cfg)?;
    let probs_all = forward(&predictor, &tr.x);
    let mut completed = splits.clone();
    completed.train.fill_masked_s(|i| u8::from(probs_all[i] >= 0.5));
    let accuracy = Some(estimate_imputation_accuracy(&x_dem, &s_dem, cfg)?);
    let probabilities = if cfg.soft_impute {
        Some(
            (0..tr.n())
                .map(|i| match tr.s_at(i) {
                    Some(v) => v as f64,
                    None => probs_all[i],
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Imputation { splits: completed, accuracy, probabilities })
}

/// Base trainer run on imputed data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseTrainer {
    Reweigh,
    Prejudice,
}

/// Impute missing group labels, then run the chosen base trainer on the
/// completed data. With full demographics this is exactly the base trainer.
/// With `soft_impute` the base trainer consumes membership probabilities
/// instead of hard fills.
pub fn train_imputed(splits: &DataSplits, cfg: &TrainConfig, base: BaseTrainer) -> Result<TrainOutcome> {
    let imputation = impute_demographics(splits, cfg)?;
    let mut outcome = match (base, &imputation.probabilities) {
        (BaseTrainer::Reweigh, Some(ps)) => {
            let weights = reweigh_weights_soft(&imputation.splits.train.y, ps);
            train_plain(&imputation.splits, cfg, PlainObjective::Weighted(weights))
        }
        (BaseTrainer::Reweigh, None) => train_reweigh(&imputation.splits, cfg),
        (BaseTrainer::Prejudice, Some(ps)) => train_plain(
            &imputation.splits,
            cfg,
            PlainObjective::Prejudice { membership: ps.clone(), eta: cfg.prejudice_eta },
        ),
        (BaseTrainer::Prejudice, None) => train_prejudice(&imputation.splits, cfg),
    }?;
    outcome.imputation_accuracy = imputation.accuracy;
    Ok(outcome)
}

/// Proportional stratified sample over the four (s, y) cells: quotas by
/// largest remainder (ties broken in fixed cell order), drawn without
/// replacement within each cell. Returns everything (in order, no RNG
/// consumed) when the pool fits the budget.
fn stratified_dem_batch(y: &[f64], s: &[u8], budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = y.len();
    if n <= budget {
        return (0..n).collect();
    }
    let cells = cell_indices(y, s);
    let quotas: Vec<f64> = cells
        .iter()
        .map(|c| budget as f64 * c.len() as f64 / n as f64)
        .collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = take.iter().sum();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - take[a] as f64;
        let fb = quotas[b] - take[b] as f64;
        fb.partial_cmp(&fa).unwrap()
    });
    for &c in order.iter().take(budget - assigned) {
        take[c] += 1;
    }
    let mut out = Vec::with_capacity(budget);
    for (cell, &k) in cells.iter().zip(&take) {
        let k = k.min(cell.len());
        if k == 0 {
            continue;
        }
        let picks = rand::seq::index::sample(rng, cell.len(), k);
        for j in picks.iter() {
            out.push(cell[j]);
        }
    }
    out
}

/// Whether the demographic batch supports the chosen fairness loss: the
/// odds and parity losses need all four (s, y) cells, the opportunity loss
/// needs both favorable cells.
fn cells_present(y: &[f64], s: &[u8], kind: FairnessKind) -> bool {
    let cells = cell_indices(y, s);
    match kind {
        FairnessKind::Eod => !cells[0].is_empty() && !cells[2].is_empty(),
        FairnessKind::Aod | FairnessKind::Spd => cells.iter().all(|c| !c.is_empty()),
    }
}

/// Outer objective of the bilevel trainer on a demographic batch: the
/// fairness relaxation plus lambda times mean BCE against the true labels.
/// The utility term is built even at lambda = 0 so the graph shape does not
/// depend on the configuration.
pub fn bilevel_outer_loss(
    tape: &mut Tape,
    probs: NodeId,
    y: &[f64],
    s: &[u8],
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let fair = fairness_loss(tape, probs, y, s, cfg.fairness, cfg.aod_mixed_term)?;
    let bce = tape.bce(probs, y);
    let utility = tape.mean(bce);
    let scaled = tape.scalar_mul(utility, cfg.lambda);
    Ok(tape.add(fair, scaled))
}

/// Bilevel training of per-sample weights. Each outer iteration unrolls
/// `inner_steps` tracked Adam steps of weighted BCE on fresh train batches
/// (weights = softplus of free parameters, renormalized to batch mean 1
/// inside the graph), evaluates the outer loss on a stratified demographic
/// batch at the resulting parameters, backpropagates through the unroll to
/// the weight parameters touched this iteration, and takes one plain Adam
/// step on them. Model parameters persist across outer iterations and still
/// advance when the demographic batch cannot support the fairness loss (the
/// outer step is skipped and counted). Inner optimizer moments restart with
/// every unroll; the tape is dropped after each outer iteration. Early
/// stopping monitors the validation fairness loss plus max(lambda, 1) times
/// validation BCE.
pub fn train_bilevel(splits: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tr = &splits.train;
    let (n, m) = (tr.n(), tr.m());
    if n == 0 || m == 0 {
        return Err(Error::Training("empty train split".into()));
    }
    let didx = tr.dem_indices();
    if didx.is_empty() {
        return Err(Error::Training("bilevel training needs demographically labeled samples".into()));
    }
    let x_dem = gather_rows(&tr.x, &didx);
    let y_dem = gather_f64(&tr.y, &didx);
    let s_dem: Vec<u8> = didx.iter().map(|&i| tr.s_at(i).expect("dem_indices row")).collect();
    let dem_budget = cfg.dem_batch_size.min(didx.len());
    let val_s = splits.validation.s_full()?.to_vec();

    let mut init_rng = stream_rng(cfg.seed, streams::INIT);
    let mut params = ModelParams::init(m, &mut init_rng);
    // softplus(v) = 1: iteration zero matches unconstrained training
    let mut v = vec![(std::f64::consts::E - 1.0).ln(); n];
    let mut weight_opt = OptimizerState::adam(cfg.lr_weights, &[n]);
    let mut stream = BatchStream::new(n, cfg.batch_size, stream_rng(cfg.seed, streams::BATCH));
    let mut dem_rng = stream_rng(cfg.seed, streams::DEM_BATCH);
    let steps_per_epoch = div_ceil(n, cfg.batch_size);
    let mut monitor = Monitor::new(cfg.patience, &params);
    let mut skipped = 0usize;

    for _ in 0..cfg.max_epochs {
        for _ in 0..steps_per_epoch {
            let mut tape = Tape::new();
            let v_leaf = tape.leaf_vector(v.clone());
            let tw = tape.leaf_vector(params.weights.clone());
            let tb = tape.leaf_scalar(params.bias);
            let mut batches = Vec::with_capacity(cfg.inner_steps);
            for _ in 0..cfg.inner_steps {
                let idx = stream.next_batch();
                let x = Mat::from_rows(&gather_rows(&tr.x, &idx));
                let y = gather_f64(&tr.y, &idx);
                let raw = tape.gather(v_leaf, idx);
                let pos = tape.softplus(raw);
                let mean = tape.mean(pos);
                let weights = tape.div(pos, mean);
                batches.push(InnerBatch { x, y, weights });
            }
            let mut inner_opt = TrackedOptimizer::new(InnerOpt::adam(cfg.lr_theta));
            let (tw1, tb1, _) = unrolled_inner_loop(&mut tape, tw, tb, &batches, &mut inner_opt)?;
            params.weights = tape.value(tw1).as_vector().to_vec();
            params.bias = tape.value(tb1).as_scalar();

            let bidx = stratified_dem_batch(&y_dem, &s_dem, dem_budget, &mut dem_rng);
            let yb = gather_f64(&y_dem, &bidx);
            let sb: Vec<u8> = bidx.iter().map(|&i| s_dem[i]).collect();
            if !cells_present(&yb, &sb, cfg.fairness) {
                skipped += 1;
                continue;
            }
            let xb = tape.matrix(Mat::from_rows(&gather_rows(&x_dem, &bidx)));
            let xw = tape.matvec(xb, tw1);
            let logits = tape.add(xw, tb1);
            let probs = tape.sigmoid(logits);
            let loss = bilevel_outer_loss(&mut tape, probs, &yb, &sb, cfg)?;
            tape.check_finite(loss)?;
            let grads = tape.backward(loss)?;
            let gv = grads.vector(v_leaf, &tape);
            weight_opt.step(&mut [&mut v[..]], &[&gv])?;
        }
        let probs = forward(&params, &splits.validation.x);
        let fair = fairness_loss_value(&probs, &splits.validation.y, &val_s, cfg.fairness, cfg.aod_mixed_term)?;
        let utility = mean_bce(&probs, &splits.validation.y);
        let value = fair + cfg.lambda.max(1.0) * utility;
        if monitor.observe(value, &params)? {
            break;
        }
    }
    Ok(monitor.into_outcome(skipped))
}

/// Dispatch on algorithm. Trainers that need full demographics go through
/// imputation, which is the identity when nothing is masked.
pub fn run_algorithm(algorithm: Algorithm, splits: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match algorithm {
        Algorithm::Unconstrained => train_unconstrained(splits, cfg),
        Algorithm::Reweigh => train_imputed(splits, cfg, BaseTrainer::Reweigh),
        Algorithm::Prejudice => train_imputed(splits, cfg, BaseTrainer::Prejudice),
        Algorithm::Arl => train_arl(splits, cfg),
        Algorithm::Bilevel => train_bilevel(splits, cfg),
    }
}
