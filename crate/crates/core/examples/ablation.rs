//! Gamma sweep with one-epoch runs; tables and figures land in the output dir.
//!
//! cargo run --release --example ablation -- out/ablation

use std::path::PathBuf;

use dualcorenet::train::ablation::{run_ablation, AblationAxis};
use dualcorenet::train::{Dataset, ExperimentConfig};

fn main() -> dualcorenet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/ablation".into()));
    let mut base = ExperimentConfig {
        output_dir: Some(out.clone()),
        ..ExperimentConfig::default()
    };
    base.optimizer.epochs = 1;
    base.data.synthetic.count = 30;
    let data = Dataset::load(&base)?;
    let report = run_ablation(&base, AblationAxis::GammaSweep, &data)?;
    print!("{}", report.table_csv());
    println!("figures in {}", out.display());
    Ok(())
}
