//! Both segmentation heads of an untrained tiny path on a synthetic crop.

use dualcorenet::cgl::{CglConfig, CglPath};
use dualcorenet::metrics::dice_from_probs;
use dualcorenet::nn::{Initializer, ParamBuilder, ParamStore};
use dualcorenet::roi::{extract_roi, RoiConfig};
use dualcorenet::synthetic::{generate_dataset, SyntheticConfig};
use dualcorenet::FeatureMap;

fn main() -> dualcorenet::Result<()> {
    let config = CglConfig::tiny();
    let n = config.input_size;
    let mut params = ParamStore::new();
    let mut init = Initializer::new(7);
    let path = CglPath::new(&mut ParamBuilder::new(&mut params, &mut init), &config)?;

    let record = &generate_dataset(&SyntheticConfig::default(), 1, 3)?[0];
    let sample = extract_roi(record, &RoiConfig { size: n, ..RoiConfig::default() })?;
    let out = path.infer(&params, &FeatureMap::from_plane(n, n, sample.cgl_image.data.clone())?)?;

    println!("CNN head dice {:.3}", dice_from_probs(&out.cnn_probs, &sample.cgl_mask.data)?);
    println!("CRF head dice {:.3}", dice_from_probs(&out.crf_probs, &sample.cgl_mask.data)?);
    println!("latent field {:?}", out.latent_softmax.shape());
    Ok(())
}
