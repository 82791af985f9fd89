//! Dense CRF refinement of label-flipped blob unaries.

use dualcorenet::crf::{refine_foreground, CrfParams};
use dualcorenet::metrics::{binarize, dice_coefficient};
use dualcorenet::synthetic::noisy_blob;

fn main() -> dualcorenet::Result<()> {
    let params = CrfParams::default();
    for flip in [0.1, 0.2, 0.3] {
        let (mut before, mut after) = (0.0, 0.0);
        for trial in 0..10 {
            let blob = noisy_blob(32, flip, 0.7, trial);
            let truth = binarize(&blob.mask.data);
            let refined = refine_foreground(&blob.noisy_probs.data, &blob.image.data, 32, 32, &params)?;
            before += dice_coefficient(&binarize(&blob.noisy_probs.data), &truth)?;
            after += dice_coefficient(&binarize(&refined), &truth)?;
        }
        println!("flip {flip:.1}: dice {:.3} -> {:.3}", before / 10.0, after / 10.0);
    }
    Ok(())
}
