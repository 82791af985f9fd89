//! ROC/AUC, dice and the figure writers on hand-made scores.
//!
//! cargo run --example evaluation -- out/plots

use std::path::PathBuf;

use dualcorenet::metrics::{dice_coefficient, roc_auc, EvalReport, SampleRecord};
use dualcorenet::plots::roc_figure;

fn main() -> dualcorenet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/plots".into()));
    std::fs::create_dir_all(&out).map_err(|e| dualcorenet::Error::io(&out, e))?;

    let labels = [1, 1, 0, 1, 0, 0, 1, 0];
    let sharp = [0.95, 0.9, 0.2, 0.7, 0.4, 0.1, 0.8, 0.3];
    let blunt = [0.6, 0.4, 0.5, 0.7, 0.6, 0.3, 0.5, 0.2];
    let a = roc_auc(&sharp, &labels)?;
    let b = roc_auc(&blunt, &labels)?;
    println!("auc {:.3} vs {:.3}", a.auc, b.auc);

    let truth = [true, true, true, false, false, false];
    let guess = [true, true, false, true, false, false];
    println!("dice {:.3}", dice_coefficient(&guess, &truth)?);

    let records = labels
        .iter()
        .zip(sharp)
        .enumerate()
        .map(|(i, (&label, p))| SampleRecord {
            index: i,
            patient_id: format!("P{i}"),
            label,
            p_malignant: p,
            dice: 0.9 - 0.01 * i as f64,
            dice_cnn: 0.88 - 0.01 * i as f64,
        })
        .collect();
    let report = EvalReport::from_samples(records)?;
    println!("mean dice {:.3} +- {:.3}, accuracy {:.2}", report.mean_dice, report.std_dice, report.accuracy());

    let (svg, csv) = roc_figure(&[("sharp".into(), &a), ("blunt".into(), &b)]).write(&out, "roc")?;
    println!("wrote {} and {}", svg.display(), csv.display());
    Ok(())
}
