//! Layer schedule and parameter budget of the classification path.

use std::time::Instant;

use dualcorenet::lpl::{parameter_count, LplConfig, LplPath};
use dualcorenet::nn::{Initializer, ParamBuilder, ParamStore};
use dualcorenet::FeatureMap;

fn main() -> dualcorenet::Result<()> {
    let config = LplConfig::full();
    for (i, (h, w, c)) in config.layer_shapes()?.iter().enumerate() {
        println!("layer {:2}: {h}x{w}x{c}", i + 1);
    }
    println!("parameters: {}", parameter_count(&config));

    let mut params = ParamStore::new();
    let mut init = Initializer::new(0);
    let path = LplPath::new(&mut ParamBuilder::new(&mut params, &mut init), &config)?;
    let image = FeatureMap::from_plane(224, 224, vec![0.5; 224 * 224])?;
    let start = Instant::now();
    let out = path.infer(&params, &image)?;
    println!(
        "trunk {:?}, p(malignant) {:.3}, {:.2}s",
        out.trunk.dims(),
        out.probabilities()[1],
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
