#![allow(dead_code)]

pub mod crf;
pub mod gradients;
pub mod golden;
pub mod metrics;

use dualcorenet::nn::{Gradients, ParamStore};

/// Worst relative error between analytic and central-difference
/// gradients over every scalar of every parameter, with the name of the
/// offending parameter.
pub fn max_relative_error<T>(
    state: &mut T,
    params: impl Fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T) -> f64,
    grads: &Gradients,
    h: f64,
) -> (f64, String) {
    let ids: Vec<_> = params(state).ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let n = params(state).get(id).numel();
        for off in 0..n {
            let orig = *params(state).scalar_mut(id, off);
            *params(state).scalar_mut(id, off) = orig + h;
            let up = loss(state);
            *params(state).scalar_mut(id, off) = orig - h;
            let down = loss(state);
            *params(state).scalar_mut(id, off) = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.scalar(id, off);
            let rel = relative_error(analytic, numeric);
            if rel > worst.0 {
                let name = params(state).name(id).to_string();
                worst = (rel, format!("{name}[{off}] analytic {analytic:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
