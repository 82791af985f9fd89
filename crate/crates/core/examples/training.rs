//! Short tiny-mode training run on synthetic data.
//!
//! cargo run --release --example training -- 5

use dualcorenet::train::{train, Dataset, ExperimentConfig};

fn main() -> dualcorenet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let mut config = ExperimentConfig {
        progress: true,
        ..ExperimentConfig::default()
    };
    config.optimizer.epochs = epochs;
    config.optimizer.learning_rate = 5e-4;
    config.data.synthetic.count = 60;

    let data = Dataset::load(&config)?;
    println!("{} train / {} test samples", data.train.len(), data.test.len());
    let report = train(&config, &data)?.report;
    if let Some(m) = &report.test_metrics {
        println!("test dice {:.3} +- {:.3}, auc {:?}", m.mean_dice, m.std_dice, m.auc);
    }
    println!("best epoch {:?}, {:.0}s", report.best_epoch, report.wall_clock_seconds);
    Ok(())
}
