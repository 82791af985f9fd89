//! Parameterised layers recorded onto a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::kernels::Window;
use crate::nn::params::{Initializer, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Initializer,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Initializer) -> Self {
        Self {
            store,
            init,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            init: self.init,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.init.he(shape, fan_in);
        let full = self.full(name);
        self.store.insert(full, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, value)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, win: Window) -> Conv {
        self.conv_scaled(name, cin, cout, win, 1.0)
    }

    /// He init multiplied by `gain`.
    pub fn conv_scaled(&mut self, name: &str, cin: usize, cout: usize, win: Window, gain: f64) -> Conv {
        let mut s = self.scope(name);
        let fan_in = cin * win.kernel_h * win.kernel_w;
        let shape = [cout, cin, win.kernel_h, win.kernel_w];
        let w = s.he("weight", &shape, fan_in);
        s.store.get_mut(w).scale_assign(gain);
        let b = s.zeros("bias", &[cout]);
        Conv { w, b: Some(b), win }
    }

    pub fn conv_no_bias(&mut self, name: &str, cin: usize, cout: usize, win: Window) -> Conv {
        let mut s = self.scope(name);
        let fan_in = cin * win.kernel_h * win.kernel_w;
        let w = s.he("weight", &[cout, cin, win.kernel_h, win.kernel_w], fan_in);
        Conv { w, b: None, win }
    }

    pub fn separable(&mut self, name: &str, cin: usize, cout: usize, win: Window) -> SeparableConv {
        let mut s = self.scope(name);
        let depthwise = s.he(
            "depthwise",
            &[cin, 1, win.kernel_h, win.kernel_w],
            win.kernel_h * win.kernel_w,
        );
        let pointwise = s.he("pointwise", &[cout, cin, 1, 1], cin);
        let bias = s.zeros("bias", &[cout]);
        SeparableConv {
            depthwise,
            pointwise,
            bias,
            win,
        }
    }

    pub fn dense(&mut self, name: &str, input: usize, output: usize) -> Dense {
        self.dense_scaled(name, input, output, 1.0)
    }

    pub fn dense_scaled(&mut self, name: &str, input: usize, output: usize, gain: f64) -> Dense {
        let mut s = self.scope(name);
        let w = s.he("weight", &[output, input], input);
        s.store.get_mut(w).scale_assign(gain);
        let b = s.zeros("bias", &[output]);
        Dense { w, b }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub win: Window,
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.win)
    }
}

/// Per-channel spatial filter followed by a 1x1 channel mix.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
    pub win: Window,
}

impl SeparableConv {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let dw = tape.param(self.depthwise);
        let spatial = tape.depthwise_conv2d(x, dw, None, self.win);
        let pw = tape.param(self.pointwise);
        let b = tape.param(self.bias);
        tape.conv2d(spatial, pw, Some(b), Window::square(1, 1, 0))
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, b)
    }
}

/// Inverted dropout: zero with probability `rate`, rescale survivors.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else {
        return x;
    };
    if rate <= 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, Tensor::new(shape, mask).unwrap())
}
