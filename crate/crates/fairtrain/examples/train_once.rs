//! Run the bilevel trainer once on the census dataset with only 0.1% of the
//! training rows keeping their protected attribute, then print the manifest
//! the harness would archive. Identical invocations print identical bytes.

use std::path::Path;

use fairtrain::harness::{manifest_to_json, run_once, RunSpec};
use fairtrain::trainers::{Algorithm, TrainConfig};

fn main() -> fairtrain::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let spec = RunSpec {
        dataset: "adult".into(),
        algorithm: Algorithm::Bilevel,
        dem_fraction: 0.001,
        label_noise: 0.0,
        train: TrainConfig::default(),
    };
    let manifest = run_once(&spec, &data)?;
    println!("{}", manifest_to_json(&manifest));
    eprintln!(
        "\nstopped after epoch {} (best {}), {} outer steps skipped, test AOD {:.4}, balanced accuracy {:.4}",
        manifest.epochs_run,
        manifest.early_stop_epoch,
        manifest.skipped_outer_steps,
        manifest.report.aod,
        manifest.report.balanced_accuracy,
    );
    Ok(())
}
