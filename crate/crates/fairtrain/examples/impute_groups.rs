//! The strawman route to fairness with scarce demographics: predict the
//! missing protected attributes from the other features, then hand the
//! completed data to a standard fair trainer. Works when groups are easy to
//! predict, and its ceiling is exactly that predictability.

use std::path::Path;

use fairtrain::dataset::{mask_demographics, prepare};
use fairtrain::harness::{evaluate, resolve_dataset};
use fairtrain::trainers::{
    impute_demographics, train_imputed, train_unconstrained, BaseTrainer, TrainConfig,
};

fn main() -> fairtrain::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let (schema, path) = resolve_dataset("adult", &data)?;
    let splits = prepare(&path, &schema, 0, 1.0, 0.0)?;
    let cfg = TrainConfig::default();

    // keep the protected attribute on 0.1% of train rows, about 20 samples
    let masked = mask_demographics(&splits, 0.001, cfg.seed)?;
    println!(
        "labeled demographic rows: {} of {}",
        masked.train.dem_count(),
        masked.train.n()
    );

    let imputation = impute_demographics(&masked, &cfg)?;
    if let Some(acc) = imputation.accuracy {
        println!("group predictor held-out accuracy: {acc:.3}");
    }

    let plain = train_unconstrained(&masked, &cfg)?;
    let (_, before) = evaluate(&plain.params, &masked, &cfg)?;
    let strawman = train_imputed(&masked, &cfg, BaseTrainer::Reweigh)?;
    let (_, after) = evaluate(&strawman.params, &masked, &cfg)?;

    println!(
        "unconstrained        AOD {:.4}  balanced accuracy {:.4}",
        before.aod, before.balanced_accuracy
    );
    println!(
        "imputed reweighing   AOD {:.4}  balanced accuracy {:.4}",
        after.aod, after.balanced_accuracy
    );
    Ok(())
}
