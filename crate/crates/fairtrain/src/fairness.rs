//! Group bias metrics over hard predictions and their differentiable
//! relaxations used as outer objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessKind {
    Aod,
    Eod,
    Spd,
}

impl std::str::FromStr for FairnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<FairnessKind> {
        match s.to_ascii_lowercase().as_str() {
            "aod" => Ok(FairnessKind::Aod),
            "eod" => Ok(FairnessKind::Eod),
            "spd" => Ok(FairnessKind::Spd),
            other => Err(Error::Fairness(format!("unknown fairness kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for FairnessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FairnessKind::Aod => "aod",
            FairnessKind::Eod => "eod",
            FairnessKind::Spd => "spd",
        };
        f.write_str(s)
    }
}

/// Confusion counts and rates for one demographic group. Rates with a zero
/// denominator are reported as 0 and flagged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub tnr: f64,
    pub selection_rate: f64,
    pub zero_denominator: bool,
}

fn rate(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn group_stats(y: &[f64], yhat: &[u8], keep: impl Fn(usize) -> bool) -> GroupStats {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut n = 0usize;
    for i in 0..y.len() {
        if !keep(i) {
            continue;
        }
        n += 1;
        match (yhat[i] == 1, y[i] == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut zero = false;
    GroupStats {
        n,
        tp,
        fp,
        tn,
        fn_,
        tpr: rate(tp, tp + fn_, &mut zero),
        fpr: rate(fp, fp + tn, &mut zero),
        tnr: rate(tn, tn + fp, &mut zero),
        selection_rate: rate(tp + fp, n, &mut zero),
        zero_denominator: zero,
    }
}

/// Bias summary of hard predictions: global accuracy measures plus the three
/// parity gaps between the privileged (s=1) and unprivileged (s=0) groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasReport {
    pub privileged: GroupStats,
    pub unprivileged: GroupStats,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// 0.5 * (|FPR gap| + |TPR gap|)
    pub aod: f64,
    /// |TPR gap|
    pub eod: f64,
    /// |selection-rate gap|
    pub spd: f64,
    /// true when any contributing rate had an empty denominator
    pub degenerate: bool,
}

pub fn bias_report(y: &[f64], yhat: &[u8], s: &[u8]) -> Result<BiasReport> {
    if y.len() != yhat.len() || y.len() != s.len() {
        return Err(Error::Fairness(format!(
            "length mismatch: y={}, yhat={}, s={}",
            y.len(),
            yhat.len(),
            s.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Fairness("empty evaluation set".into()));
    }
    let privileged = group_stats(y, yhat, |i| s[i] == 1);
    let unprivileged = group_stats(y, yhat, |i| s[i] == 0);
    let global = group_stats(y, yhat, |_| true);
    let correct = global.tp + global.tn;
    Ok(BiasReport {
        accuracy: correct as f64 / global.n as f64,
        balanced_accuracy: 0.5 * (global.tpr + global.tnr),
        aod: 0.5 * ((privileged.fpr - unprivileged.fpr).abs() + (privileged.tpr - unprivileged.tpr).abs()),
        eod: (privileged.tpr - unprivileged.tpr).abs(),
        spd: (privileged.selection_rate - unprivileged.selection_rate).abs(),
        degenerate: privileged.zero_denominator || unprivileged.zero_denominator || global.zero_denominator,
        privileged,
        unprivileged,
    })
}

/// Index sets of the four (s, y) cells: privileged/favorable,
/// privileged/unfavorable, unprivileged/favorable, unprivileged/unfavorable.
pub fn cell_indices(y: &[f64], s: &[u8]) -> [Vec<usize>; 4] {
    let mut cells: [Vec<usize>; 4] = Default::default();
    for i in 0..y.len() {
        let k = match (s[i], y[i] == 1.0) {
            (1, true) => 0,
            (1, false) => 1,
            (0, true) => 2,
            (0, false) => 3,
            _ => panic!("sensitive attribute must be 0 or 1"),
        };
        cells[k].push(i);
    }
    cells
}

fn require(cell: &[usize], name: &str) -> Result<()> {
    if cell.is_empty() {
        Err(Error::Fairness(format!("batch has no {name} samples")))
    } else {
        Ok(())
    }
}

/// Differentiable relaxation of a parity gap, built on the tape from the
/// model's probability node. Group rates are replaced by group-mean
/// cross-entropies; errors out when a required (s, y) cell is empty so the
/// caller can skip the step.
///
/// With `aod_mixed_term` the second odds term compares the
/// privileged/favorable mean against the unprivileged/unfavorable mean, a
/// published variant kept behind a flag; the default compares matching cells.
pub fn fairness_loss(
    tape: &mut Tape,
    probs: NodeId,
    y: &[f64],
    s: &[u8],
    kind: FairnessKind,
    aod_mixed_term: bool,
) -> Result<NodeId> {
    let [p_fav, p_unfav, up_fav, up_unfav] = cell_indices(y, s);
    match kind {
        FairnessKind::Aod => {
            let bce = tape.bce(probs, y);
            require(&p_fav, "privileged favorable")?;
            require(&up_fav, "unprivileged favorable")?;
            require(&up_unfav, "unprivileged unfavorable")?;
            let m_p_fav = tape.mean_idx(bce, p_fav);
            let m_up_fav = tape.mean_idx(bce, up_fav);
            let m_up_unfav = tape.mean_idx(bce, up_unfav);
            let second = if aod_mixed_term {
                let d = tape.sub(m_p_fav, m_up_unfav);
                tape.abs(d)
            } else {
                require(&p_unfav, "privileged unfavorable")?;
                let m_p_unfav = tape.mean_idx(bce, p_unfav);
                let d = tape.sub(m_p_unfav, m_up_unfav);
                tape.abs(d)
            };
            let d_fav = tape.sub(m_p_fav, m_up_fav);
            let first = tape.abs(d_fav);
            Ok(tape.add(second, first))
        }
        FairnessKind::Eod => {
            let bce = tape.bce(probs, y);
            require(&p_fav, "privileged favorable")?;
            require(&up_fav, "unprivileged favorable")?;
            let m_p = tape.mean_idx(bce, p_fav);
            let m_up = tape.mean_idx(bce, up_fav);
            let d = tape.sub(m_p, m_up);
            Ok(tape.abs(d))
        }
        FairnessKind::Spd => {
            let priv_idx: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 1).collect();
            let unpriv_idx: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 0).collect();
            require(&priv_idx, "privileged")?;
            require(&unpriv_idx, "unprivileged")?;
            let favorable = vec![1.0; y.len()];
            let bce = tape.bce(probs, &favorable);
            let m_p = tape.mean_idx(bce, priv_idx);
            let m_up = tape.mean_idx(bce, unpriv_idx);
            let d = tape.sub(m_p, m_up);
            Ok(tape.abs(d))
        }
    }
}

/// Plain (untracked) value of the same relaxation, for per-epoch validation
/// monitoring where no gradient is needed. Mirrors `fairness_loss` exactly,
/// including the cross-entropy clamping.
pub fn fairness_loss_value(
    probs: &[f64],
    y: &[f64],
    s: &[u8],
    kind: FairnessKind,
    aod_mixed_term: bool,
) -> Result<f64> {
    let [p_fav, p_unfav, up_fav, up_unfav] = cell_indices(y, s);
    let sub_mean = |vals: &[f64], idx: &[usize]| {
        let mut acc = 0.0;
        for &i in idx {
            acc += vals[i];
        }
        acc / idx.len() as f64
    };
    match kind {
        FairnessKind::Aod => {
            let bce = crate::model::bce_per_sample(probs, y);
            require(&p_fav, "privileged favorable")?;
            require(&up_fav, "unprivileged favorable")?;
            require(&up_unfav, "unprivileged unfavorable")?;
            let m_p_fav = sub_mean(&bce, &p_fav);
            let m_up_fav = sub_mean(&bce, &up_fav);
            let m_up_unfav = sub_mean(&bce, &up_unfav);
            let second = if aod_mixed_term {
                (m_p_fav - m_up_unfav).abs()
            } else {
                require(&p_unfav, "privileged unfavorable")?;
                (sub_mean(&bce, &p_unfav) - m_up_unfav).abs()
            };
            Ok(second + (m_p_fav - m_up_fav).abs())
        }
        FairnessKind::Eod => {
            let bce = crate::model::bce_per_sample(probs, y);
            require(&p_fav, "privileged favorable")?;
            require(&up_fav, "unprivileged favorable")?;
            Ok((sub_mean(&bce, &p_fav) - sub_mean(&bce, &up_fav)).abs())
        }
        FairnessKind::Spd => {
            let priv_idx: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 1).collect();
            let unpriv_idx: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 0).collect();
            require(&priv_idx, "privileged")?;
            require(&unpriv_idx, "unprivileged")?;
            let favorable = vec![1.0; y.len()];
            let bce = crate::model::bce_per_sample(probs, &favorable);
            Ok((sub_mean(&bce, &priv_idx) - sub_mean(&bce, &unpriv_idx)).abs())
        }
    }
}

/// Metric value of `kind` read from a report.
pub fn metric_of(report: &BiasReport, kind: FairnessKind) -> f64 {
    match kind {
        FairnessKind::Aod => report.aod,
        FairnessKind::Eod => report.eod,
        FairnessKind::Spd => report.spd,
    }
}
