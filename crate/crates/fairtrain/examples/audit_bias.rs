//! Fit a plain classifier and audit it: per-group confusion counts, the three
//! parity gaps, and what the gaps look like after swapping in the bilevel
//! trainer under the same seed and budget.

use std::path::Path;

use fairtrain::fairness::GroupStats;
use fairtrain::harness::{evaluate, resolve_dataset};
use fairtrain::dataset::prepare;
use fairtrain::trainers::{train_bilevel, train_unconstrained, TrainConfig};

fn group_line(label: &str, g: &GroupStats) {
    println!(
        "  {label:<12} n {:>6}  tp {:>5} fp {:>5} tn {:>6} fn {:>5}  tpr {:.3} fpr {:.3} selection {:.3}",
        g.n, g.tp, g.fp, g.tn, g.fn_, g.tpr, g.fpr, g.selection_rate
    );
}

fn main() -> fairtrain::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let (schema, path) = resolve_dataset("adult", &data)?;
    let splits = prepare(&path, &schema, 0, 1.0, 0.0)?;
    let cfg = TrainConfig::default();

    for (name, outcome) in [
        ("unconstrained", train_unconstrained(&splits, &cfg)?),
        ("bilevel", train_bilevel(&splits, &cfg)?),
    ] {
        let (threshold, report) = evaluate(&outcome.params, &splits, &cfg)?;
        println!("== {name} (threshold {threshold:.3}) ==");
        group_line("privileged", &report.privileged);
        group_line("unprivileged", &report.unprivileged);
        println!(
            "  balanced accuracy {:.4}   AOD {:.4}   EOD {:.4}   SPD {:.4}\n",
            report.balanced_accuracy, report.aod, report.eod, report.spd
        );
    }
    Ok(())
}
