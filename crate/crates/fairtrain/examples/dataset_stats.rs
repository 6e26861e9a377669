//! Load both bundled datasets and print the group statistics that motivate
//! fair training: the favorable-outcome rate conditioned on the protected
//! attribute, and the joint (group, label) frequencies.

use std::path::Path;

use fairtrain::dataset::{dataset_stats, prepare, CELL_ORDER};
use fairtrain::harness::{full_dataset_stats, resolve_dataset};

fn main() -> fairtrain::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    for name in ["adult", "bank"] {
        let (schema, path) = resolve_dataset(name, &data)?;
        let splits = prepare(&path, &schema, 0, 1.0, 0.0)?;
        let stats = full_dataset_stats(&splits)?;
        println!("== {name} ({} rows after cleaning) ==", stats.n);
        println!("  favorable rate        {:.4}", stats.label_base_rate);
        println!("  privileged share      {:.4}", stats.privileged_base_rate);
        println!("  P(favorable | priv)   {:.4}", stats.p_fav_given_priv);
        println!("  P(favorable | unpriv) {:.4}", stats.p_fav_given_unpriv);
        for (cell, freq) in CELL_ORDER.iter().zip(&stats.joint) {
            println!("  P(s={}, y={})          {:.4}", cell.0, cell.1, freq);
        }
        let train = dataset_stats(&splits.train)?;
        let test = dataset_stats(&splits.test)?;
        println!(
            "  split sizes train/val/test  {}/{}/{}  (train fav rate {:.4}, test fav rate {:.4})",
            splits.train.n(),
            splits.validation.n(),
            splits.test.n(),
            train.label_base_rate,
            test.label_base_rate,
        );
        println!();
    }
    Ok(())
}
