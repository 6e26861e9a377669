//! Stress test under label corruption: half of the unprotected training
//! labels are flipped, only the 0.1% demographically labeled subset is
//! trusted clean. The weighted inner problem lets the bilevel trainer
//! down-weight poisoned rows; plain training collapses to coin flipping.

use std::path::Path;

use fairtrain::harness::{run_once, RunSpec};
use fairtrain::trainers::{Algorithm, TrainConfig};

fn main() -> fairtrain::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    for algorithm in [Algorithm::Unconstrained, Algorithm::Bilevel] {
        let spec = RunSpec {
            dataset: "adult".into(),
            algorithm,
            dem_fraction: 0.001,
            label_noise: 0.5,
            // the utility term on the clean subset is what rescues training
            train: TrainConfig { lambda: 1.0, ..TrainConfig::default() },
        };
        let m = run_once(&spec, &data)?;
        println!(
            "{:<14} balanced accuracy {:.4}  AOD {:.4}",
            algorithm.as_str(),
            m.report.balanced_accuracy,
            m.report.aod
        );
    }
    Ok(())
}
