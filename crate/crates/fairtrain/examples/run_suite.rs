//! A small multi-seed sweep through the harness: three algorithms at two
//! demographic fractions, three seeds each. Manifests land under a temp
//! directory and finished runs are skipped on a rerun, so interrupting and
//! restarting is cheap.

use std::path::Path;

use fairtrain::harness::{render_table, run_suite, ExperimentPlan};
use fairtrain::trainers::Algorithm;

fn main() -> fairtrain::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let out = std::env::temp_dir().join("fairtrain_example_suite");
    let plan = ExperimentPlan {
        algorithms: vec![Algorithm::Unconstrained, Algorithm::Reweigh, Algorithm::Bilevel],
        dem_fractions: vec![1.0, 0.01],
        seeds: (0..3).collect(),
        ..ExperimentPlan::default()
    };
    let outcome = run_suite(&plan, &data, &out)?;
    print!("{}", render_table(&outcome.cells));
    for failure in &outcome.failures {
        eprintln!("failed: {} ({})", failure.file_name, failure.error);
    }
    println!(
        "\n{} manifests under {}\ncsv: {}",
        outcome.manifests.len(),
        out.join("manifests").display(),
        outcome.csv_path.display()
    );
    Ok(())
}
