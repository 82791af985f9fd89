//! Fused benign/malignant probabilities from a randomly initialized tiny model.

use dualcorenet::model::{DualCoreNet, ModelConfig, ModelInput};
use dualcorenet::roi::{extract_roi, RoiConfig};
use dualcorenet::synthetic::{generate_dataset, SyntheticConfig};

fn main() -> dualcorenet::Result<()> {
    let model = DualCoreNet::new(&ModelConfig::tiny(), 1)?;
    let roi = RoiConfig {
        size: model.config.cgl.input_size,
        ..RoiConfig::default()
    };
    for record in generate_dataset(&SyntheticConfig::default(), 4, 9)? {
        let input = ModelInput::from_sample(&extract_roi(&record, &roi)?, &model.config)?;
        let d = model.predict(&input)?.diagnosis;
        println!(
            "label {} -> p(benign) {:.3} p(malignant) {:.3}, embeddings {} + {}",
            record.label,
            d.probs[0],
            d.probs[1],
            d.lpl_embedding.len(),
            d.cgl_embedding.len()
        );
    }
    Ok(())
}
