//! Analytic versus central-difference gradients of the three objectives
//! on micro configurations.

use dualcorenet::cgl::{cgl_loss_on_tape, CglConfig, CglPath};
use dualcorenet::lpl::{LplConfig, LplPath};
use dualcorenet::model::{DualCoreNet, LossWeights, ModelConfig, ModelInput};
use dualcorenet::nn::{Gradients, Initializer, ParamBuilder, ParamStore, Tape};
use dualcorenet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::max_relative_error;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn random_image(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![1, n, n], (0..n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub fn disc_mask(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    (0..n * n)
        .map(|i| {
            let (r, col) = ((i / n) as f64, (i % n) as f64);
            f64::from((r - c).powi(2) + (col - c).powi(2) <= (n as f64 / 3.0).powi(2))
        })
        .collect()
}

/// Nudge every parameter off zero so biases and kinks are exercised.
fn jitter(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
}

struct Lpl {
    path: LplPath,
    params: ParamStore,
    x: Tensor,
    label: usize,
}

fn lpl_loss(s: &Lpl) -> (f64, Gradients) {
    let mut tape = Tape::new(&s.params);
    let x = tape.input(s.x.clone());
    let out = s.path.forward(&mut tape, x, None);
    let loss = tape.cross_entropy(out.probs, s.label);
    (tape.value(loss).item(), tape.backward(loss))
}

/// Classification cross-entropy on a `size` x `size` input.
pub fn lpl_error(size: usize) -> (f64, String) {
    let mut params = ParamStore::new();
    let mut init = Initializer::new(3);
    let path = LplPath::new(&mut ParamBuilder::new(&mut params, &mut init), &LplConfig::micro(size)).unwrap();
    jitter(&mut params, 4);
    let mut s = Lpl {
        path,
        params,
        x: random_image(size, 5),
        label: 1,
    };
    let (_, grads) = lpl_loss(&s);
    max_relative_error(&mut s, |s| &mut s.params, |s| lpl_loss(s).0, &grads, H)
}

struct Cgl {
    path: CglPath,
    params: ParamStore,
    x: Tensor,
    mask: Vec<f64>,
}

fn cgl_loss(s: &Cgl) -> (f64, Gradients) {
    let crf = s.path.build_crf(&s.x).unwrap();
    let mut tape = Tape::new(&s.params);
    let x = tape.input(s.x.clone());
    let out = s.path.forward(&mut tape, x, &crf);
    let loss = cgl_loss_on_tape(&mut tape, &out, &s.mask, 0.7);
    (tape.value(loss).item(), tape.backward(loss))
}

/// Dual dice loss through three mean-field iterations on 16x16.
pub fn cgl_error() -> (f64, String) {
    let n = 16;
    let config = CglConfig::micro(n);
    assert_eq!(config.crf.num_iterations, 3);
    let mut params = ParamStore::new();
    let mut init = Initializer::new(8);
    let path = CglPath::new(&mut ParamBuilder::new(&mut params, &mut init), &config).unwrap();
    jitter(&mut params, 9);
    let mut s = Cgl {
        path,
        params,
        x: random_image(n, 10),
        mask: disc_mask(n),
    };
    let (_, grads) = cgl_loss(&s);
    max_relative_error(&mut s, |s| &mut s.params, |s| cgl_loss(s).0, &grads, H)
}

/// Joint objective of the whole micro model.
pub fn total_error() -> (f64, String) {
    let config = ModelConfig::micro(8, 16);
    let mut model = DualCoreNet::new(&config, 11).unwrap();
    jitter(&mut model.params, 12);
    let input = ModelInput {
        lpl_image: random_image(8, 13),
        cgl_image: random_image(16, 14),
        mask: disc_mask(16),
        label: 0,
    };
    let w = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.42,
    };
    let (_, grads) = model.sample_gradients(&input, &w, None).unwrap();
    max_relative_error(
        &mut model,
        |m| &mut m.params,
        |m| m.sample_loss(&input, &w).unwrap().total,
        &grads,
        H,
    )
}
