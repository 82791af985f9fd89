//! Locality preserving learner: the classification path.
//!
//! Eleven layers on the contextual ROI:
//!
//! | layer | op                       | output (full config) |
//! |-------|--------------------------|----------------------|
//! | 1     | 3x3 conv + ReLU          | 224 x 224 x 16       |
//! | 2     | 2x2 max pool             | 112 x 112 x 16       |
//! | 3     | reduction module D       | 56 x 56 x 128        |
//! | 4     | reduction module D       | 28 x 28 x 728        |
//! | 5-6   | module A (residual)      | 28 x 28 x 728        |
//! | 7-8   | module B (residual)      | 28 x 28 x 728        |
//! | 9-10  | module C (residual)      | 28 x 28 x 728        |
//! | 11    | GAP, dropout, dense      | 2 logits             |
//!
//! Modules A-C split the trunk evenly over four branches of separable
//! convolutions, concatenate the branch outputs and project back to the
//! trunk width with a 1x1 convolution; the projection is added to the
//! module input when the module is residual.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{self, Window};
use crate::nn::layers::{dropout, Conv, Dense, ParamBuilder, SeparableConv};
use crate::nn::{ParamStore, Tape, Var};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    /// 5x5 receptive field from two stacked 3x3 convolutions.
    A,
    /// 7x7 receptive field from 1x7 / 7x1 factorizations.
    B,
    /// Expanded 1x3 / 3x1 filter bank plus an 8x8 receptive-field branch.
    C,
    /// Spatial reduction by two.
    D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    pub residual: bool,
    /// Output channels; equal to the input for A, B and C.
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Stem { channels: usize },
    MaxPool,
    Module(ModuleSpec),
    Head { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LplConfig {
    pub input_size: usize,
    pub trunk_channels: usize,
    pub dropout_rate: f64,
    pub layers: Vec<LayerSpec>,
}

impl LplConfig {
    /// The eleven-layer sequence with the given widths.
    pub fn standard(
        input_size: usize,
        stem_channels: usize,
        reduction_channels: usize,
        trunk_channels: usize,
        residual: bool,
    ) -> Self {
        let block = |kind| {
            LayerSpec::Module(ModuleSpec {
                kind,
                residual,
                out_channels: trunk_channels,
            })
        };
        let reduce = |out_channels| {
            LayerSpec::Module(ModuleSpec {
                kind: ModuleKind::D,
                residual,
                out_channels,
            })
        };
        Self {
            input_size,
            trunk_channels,
            dropout_rate: 0.5,
            layers: vec![
                LayerSpec::Stem {
                    channels: stem_channels,
                },
                LayerSpec::MaxPool,
                reduce(reduction_channels),
                reduce(trunk_channels),
                block(ModuleKind::A),
                block(ModuleKind::A),
                block(ModuleKind::B),
                block(ModuleKind::B),
                block(ModuleKind::C),
                block(ModuleKind::C),
                LayerSpec::Head { classes: 2 },
            ],
        }
    }

    pub fn full() -> Self {
        Self::standard(224, 16, 128, 728, true)
    }

    /// Desk-scale variant: 64x64 input, 64-channel trunk.
    pub fn tiny() -> Self {
        Self::standard(64, 16, 32, 64, true)
    }

    /// Smallest variant for finite-difference checks.
    pub fn micro(input_size: usize) -> Self {
        Self::standard(input_size, 4, 4, 4, true)
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        for layer in &mut self.layers {
            if let LayerSpec::Module(m) = layer {
                m.residual = residual;
            }
        }
        self
    }

    /// `(height, width, channels)` after every layer; the head reports
    /// `(1, 1, classes)`.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = (self.input_size, self.input_size, 1);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Stem { channels } => (shape.0, shape.1, channels),
                LayerSpec::MaxPool => {
                    if shape.0 < 2 || shape.1 < 2 {
                        return Err(Error::shape(format!("layer {}: pool on {shape:?}", i + 1)));
                    }
                    (shape.0 / 2, shape.1 / 2, shape.2)
                }
                LayerSpec::Module(m) => module_output_shape(&m, shape)
                    .map_err(|e| Error::shape(format!("layer {}: {e}", i + 1)))?,
                LayerSpec::Head { classes } => (1, 1, classes),
            };
            out.push(shape);
        }
        Ok(out)
    }
}

fn module_output_shape(
    m: &ModuleSpec,
    (h, w, c): (usize, usize, usize),
) -> std::result::Result<(usize, usize, usize), String> {
    match m.kind {
        ModuleKind::D => {
            if m.out_channels % 2 != 0 || m.out_channels == 0 {
                return Err(format!("module D needs even output width, got {}", m.out_channels));
            }
            Ok((h.div_ceil(2), w.div_ceil(2), m.out_channels))
        }
        _ => {
            if c != m.out_channels {
                return Err(format!("module {:?} maps {c} channels to {}", m.kind, m.out_channels));
            }
            if c % 4 != 0 {
                return Err(format!("module {:?} needs a width divisible by 4, got {c}", m.kind));
            }
            Ok((h, w, c))
        }
    }
}

/// Init scale of the last convolution of a residual branch.
const RESIDUAL_GAIN: f64 = 0.2;
/// Init scale of classification layers.
pub(crate) const HEAD_GAIN: f64 = 0.1;

fn pw(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Conv {
    b.conv(name, cin, cout, Window::square(1, 1, 0))
}

/// One branch: a chain of convolutions, each followed by ReLU, optionally
/// starting with a 3x3 average pool.
#[derive(Clone, Debug)]
enum Step {
    Pointwise(Conv),
    Separable(SeparableConv),
    AvgPool,
    /// Parallel separable convs on the same input, concatenated.
    Bank(Vec<SeparableConv>),
}

#[derive(Clone, Debug)]
struct Branch {
    steps: Vec<Step>,
}

impl Branch {
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for step in &self.steps {
            h = match step {
                Step::Pointwise(c) => {
                    let y = c.forward(tape, h);
                    tape.relu(y)
                }
                Step::Separable(s) => {
                    let y = s.forward(tape, h);
                    tape.relu(y)
                }
                Step::AvgPool => tape.avg_pool(h, Window::square(3, 1, 1)),
                Step::Bank(convs) => {
                    let outs: Vec<Var> = convs
                        .iter()
                        .map(|s| {
                            let y = s.forward(tape, h);
                            tape.relu(y)
                        })
                        .collect();
                    tape.concat(&outs)
                }
            };
        }
        h
    }
}

/// A built convolution module (kinds A-D).
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub spec: ModuleSpec,
    pub in_channels: usize,
    branches: Vec<Branch>,
    /// Max-pool branch of the reduction module.
    pool_branch: bool,
    projection: Conv,
    shortcut: Option<Conv>,
}

impl ConvModule {
    pub fn new(b: &mut ParamBuilder, spec: ModuleSpec, in_channels: usize) -> Result<Self> {
        module_output_shape(&spec, (8, 8, in_channels)).map_err(Error::ShapeMismatch)?;
        let sep = |b: &mut ParamBuilder, name: &str, c: usize, kh: usize, kw: usize| {
            b.separable(name, c, c, Window::same(kh, kw))
        };
        let (branches, pool_branch, concat_width) = match spec.kind {
            ModuleKind::A => {
                let c = in_channels;
                let w = c / 4;
                let branches = vec![
                    Branch {
                        steps: vec![Step::Pointwise(pw(b, "b1.pw", c, w))],
                    },
                    Branch {
                        steps: vec![
                            Step::Pointwise(pw(b, "b2.pw", c, w)),
                            Step::Separable(sep(b, "b2.sep3x3", w, 3, 3)),
                        ],
                    },
                    Branch {
                        steps: vec![
                            Step::Pointwise(pw(b, "b3.pw", c, w)),
                            Step::Separable(sep(b, "b3.sep3x3a", w, 3, 3)),
                            Step::Separable(sep(b, "b3.sep3x3b", w, 3, 3)),
                        ],
                    },
                    Branch {
                        steps: vec![Step::AvgPool, Step::Pointwise(pw(b, "b4.pw", c, w))],
                    },
                ];
                (branches, false, 4 * w)
            }
            ModuleKind::B => {
                let c = in_channels;
                let w = c / 4;
                let branches = vec![
                    Branch {
                        steps: vec![Step::Pointwise(pw(b, "b1.pw", c, w))],
                    },
                    Branch {
                        steps: vec![
                            Step::Pointwise(pw(b, "b2.pw", c, w)),
                            Step::Separable(sep(b, "b2.sep1x7", w, 1, 7)),
                            Step::Separable(sep(b, "b2.sep7x1", w, 7, 1)),
                        ],
                    },
                    Branch {
                        steps: vec![
                            Step::Pointwise(pw(b, "b3.pw", c, w)),
                            Step::Separable(sep(b, "b3.sep7x1a", w, 7, 1)),
                            Step::Separable(sep(b, "b3.sep1x7a", w, 1, 7)),
                            Step::Separable(sep(b, "b3.sep7x1b", w, 7, 1)),
                            Step::Separable(sep(b, "b3.sep1x7b", w, 1, 7)),
                        ],
                    },
                    Branch {
                        steps: vec![Step::AvgPool, Step::Pointwise(pw(b, "b4.pw", c, w))],
                    },
                ];
                (branches, false, 4 * w)
            }
            ModuleKind::C => {
                let c = in_channels;
                let w = c / 4;
                let bank = |b: &mut ParamBuilder, name: &str| {
                    Step::Bank(vec![
                        sep(b, &format!("{name}.sep1x3"), w, 1, 3),
                        sep(b, &format!("{name}.sep3x1"), w, 3, 1),
                    ])
                };
                let branches = vec![
                    Branch {
                        steps: vec![Step::Pointwise(pw(b, "b1.pw", c, w))],
                    },
                    Branch {
                        steps: vec![Step::Pointwise(pw(b, "b2.pw", c, w)), bank(b, "b2")],
                    },
                    Branch {
                        // 3 + 2 + 2 + 1: an 8x8 receptive field
                        steps: vec![
                            Step::Pointwise(pw(b, "b3.pw", c, w)),
                            Step::Separable(sep(b, "b3.sep3x3a", w, 3, 3)),
                            Step::Separable(sep(b, "b3.sep3x3b", w, 3, 3)),
                            Step::Separable(sep(b, "b3.sep3x3c", w, 3, 3)),
                            Step::Separable(sep(b, "b3.sep2x2", w, 2, 2)),
                        ],
                    },
                    Branch {
                        steps: vec![Step::AvgPool, Step::Pointwise(pw(b, "b4.pw", c, w))],
                    },
                ];
                (branches, false, 5 * w)
            }
            ModuleKind::D => {
                let half = spec.out_channels / 2;
                let down = Window::square(3, 2, 1);
                let branches = vec![
                    Branch {
                        steps: vec![
                            Step::Pointwise(pw(b, "b2.pw", in_channels, half)),
                            Step::Separable(b.separable("b2.sep3x3s2", half, half, down)),
                        ],
                    },
                    Branch {
                        steps: vec![
                            Step::Pointwise(pw(b, "b3.pw", in_channels, half)),
                            Step::Separable(sep(b, "b3.sep3x3", half, 3, 3)),
                            Step::Separable(b.separable("b3.sep3x3s2", half, half, down)),
                        ],
                    },
                ];
                (branches, true, in_channels + 2 * half)
            }
        };
        let gain = if spec.residual { RESIDUAL_GAIN } else { 1.0 };
        let projection = b.conv_scaled(
            "project",
            concat_width,
            spec.out_channels,
            Window::square(1, 1, 0),
            gain,
        );
        let shortcut = (spec.residual && spec.kind == ModuleKind::D).then(|| {
            b.conv_no_bias(
                "shortcut",
                in_channels,
                spec.out_channels,
                Window {
                    kernel_h: 1,
                    kernel_w: 1,
                    stride: 2,
                    pad: [0; 4],
                },
            )
        });
        Ok(Self {
            spec,
            in_channels,
            branches,
            pool_branch,
            projection,
            shortcut,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        if self.pool_branch {
            outs.push(tape.max_pool(x, Window::square(3, 2, 1)));
        }
        for br in &self.branches {
            outs.push(br.forward(tape, x));
        }
        let cat = tape.concat(&outs);
        let fx = self.projection.forward(tape, cat);
        if !self.spec.residual {
            return fx;
        }
        match &self.shortcut {
            Some(s) => {
                let sx = s.forward(tape, x);
                tape.add(fx, sx)
            }
            None => tape.add(fx, x),
        }
    }

    /// Run the module on a concrete feature map.
    pub fn apply(&self, params: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "module {:?} built for {} channels, got {}",
                self.spec.kind,
                self.in_channels,
                x.channels()
            )));
        }
        let expected = module_output_shape(&self.spec, x.dims()).map_err(Error::ShapeMismatch)?;
        let mut tape = Tape::new(params);
        let xv = tape.input(x.tensor().clone());
        let y = self.forward(&mut tape, xv);
        let out = FeatureMap::new(tape.value(y).clone())?;
        debug_assert_eq!(out.dims(), expected);
        Ok(out)
    }
}

/// Closed-form trainable parameter counts.
pub mod counts {
    use super::{ModuleKind, ModuleSpec};

    pub fn conv(cin: usize, cout: usize, kh: usize, kw: usize, bias: bool) -> usize {
        cin * cout * kh * kw + if bias { cout } else { 0 }
    }

    /// Depthwise `kh x kw` (no bias) then pointwise `cin -> cout` with bias.
    pub fn separable(cin: usize, cout: usize, kh: usize, kw: usize) -> usize {
        cin * kh * kw + cin * cout + cout
    }

    pub fn dense(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn module(spec: &ModuleSpec, cin: usize) -> usize {
        let pw = |a, b| conv(a, b, 1, 1, true);
        match spec.kind {
            ModuleKind::A => {
                let w = cin / 4;
                4 * pw(cin, w) + 3 * separable(w, w, 3, 3) + pw(4 * w, cin)
            }
            ModuleKind::B => {
                let w = cin / 4;
                4 * pw(cin, w) + 6 * separable(w, w, 1, 7) + pw(4 * w, cin)
            }
            ModuleKind::C => {
                let w = cin / 4;
                4 * pw(cin, w)
                    + 2 * separable(w, w, 1, 3)
                    + 3 * separable(w, w, 3, 3)
                    + separable(w, w, 2, 2)
                    + pw(5 * w, cin)
            }
            ModuleKind::D => {
                let half = spec.out_channels / 2;
                2 * pw(cin, half)
                    + 3 * separable(half, half, 3, 3)
                    + pw(cin + 2 * half, spec.out_channels)
                    + if spec.residual {
                        conv(cin, spec.out_channels, 1, 1, false)
                    } else {
                        0
                    }
            }
        }
    }
}

/// Exact number of trainable parameters of a configuration.
pub fn parameter_count(config: &LplConfig) -> usize {
    let mut channels = 1;
    let mut total = 0;
    for layer in &config.layers {
        match *layer {
            LayerSpec::Stem { channels: c } => {
                total += counts::conv(channels, c, 3, 3, true);
                channels = c;
            }
            LayerSpec::MaxPool => {}
            LayerSpec::Module(m) => {
                total += counts::module(&m, channels);
                channels = m.out_channels;
            }
            LayerSpec::Head { classes } => total += counts::dense(channels, classes),
        }
    }
    total
}

#[derive(Clone, Debug)]
enum Layer {
    Stem(Conv),
    MaxPool,
    Module(ConvModule),
    Head(Dense),
}

/// Tape handles produced by [`LplPath::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LplOutput {
    pub logits: Var,
    pub probs: Var,
    /// Layer-1 output.
    pub stem: Var,
    /// Last feature map before the head (layer 10).
    pub trunk: Var,
}

#[derive(Clone, Debug)]
pub struct LplPath {
    pub config: LplConfig,
    layers: Vec<Layer>,
}

impl LplPath {
    pub fn new(b: &mut ParamBuilder, config: &LplConfig) -> Result<Self> {
        config.layer_shapes()?;
        if !matches!(config.layers.last(), Some(LayerSpec::Head { .. })) {
            return Err(Error::InvalidConfig("LPL must end with a head".into()));
        }
        let mut channels = 1;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, spec) in config.layers.iter().enumerate() {
            let mut s = b.scope(&format!("layer{:02}", i + 1));
            layers.push(match *spec {
                LayerSpec::Stem { channels: c } => {
                    let conv = s.conv("conv", channels, c, Window::square(3, 1, 1));
                    channels = c;
                    Layer::Stem(conv)
                }
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Module(m) => {
                    let module = ConvModule::new(&mut s, m, channels)?;
                    channels = m.out_channels;
                    Layer::Module(module)
                }
                LayerSpec::Head { classes } => Layer::Head(s.dense_scaled("dense", channels, classes, HEAD_GAIN)),
            });
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// `rng` enables dropout (training mode).
    pub fn forward(&self, tape: &mut Tape, x: Var, mut rng: Option<&mut ChaCha8Rng>) -> LplOutput {
        let mut h = x;
        let mut stem = x;
        let mut trunk = x;
        let mut logits = x;
        for layer in &self.layers {
            match layer {
                Layer::Stem(conv) => {
                    let y = conv.forward(tape, h);
                    h = tape.relu(y);
                    stem = h;
                }
                Layer::MaxPool => h = tape.max_pool(h, Window::square(2, 2, 0)),
                Layer::Module(m) => h = m.forward(tape, h),
                Layer::Head(dense) => {
                    trunk = h;
                    let pooled = tape.global_avg_pool(h);
                    let dropped = dropout(tape, pooled, self.config.dropout_rate, rng.as_deref_mut());
                    logits = dense.forward(tape, dropped);
                }
            }
        }
        let probs = tape.softmax(logits);
        LplOutput {
            logits,
            probs,
            stem,
            trunk,
        }
    }

    /// Inference on one `input_size x input_size` image in `[0, 1]`.
    pub fn infer(&self, params: &ParamStore, image: &FeatureMap) -> Result<LplInference> {
        let n = self.config.input_size;
        if image.dims() != (n, n, 1) {
            return Err(Error::shape(format!(
                "LPL expects {n}x{n}x1, got {:?}",
                image.dims()
            )));
        }
        let mut tape = Tape::new(params);
        let x = tape.input(image.tensor().clone());
        let out = self.forward(&mut tape, x, None);
        Ok(LplInference {
            logits: [tape.value(out.logits).data()[0], tape.value(out.logits).data()[1]],
            stem: FeatureMap::new(tape.value(out.stem).clone())?,
            trunk: FeatureMap::new(tape.value(out.trunk).clone())?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LplInference {
    pub logits: [f64; 2],
    pub stem: FeatureMap,
    pub trunk: FeatureMap,
}

impl LplInference {
    pub fn probabilities(&self) -> [f64; 2] {
        softmax2(self.logits)
    }
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let t = Tensor::new(vec![2, 1, 1], logits.to_vec()).unwrap();
    let p = kernels::softmax_channels(&t);
    [p.data()[0], p.data()[1]]
}

/// Summed categorical cross-entropy of logits against labels.
pub fn lpl_loss(logits: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    cross_entropy_sum(logits.iter().map(|&l| softmax2(l)), labels)
}

pub(crate) fn cross_entropy_sum(
    probs: impl ExactSizeIterator<Item = [f64; 2]>,
    labels: &[u8],
) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(z) = labels.iter().find(|&&z| z > 1) {
        return Err(Error::InvalidConfig(format!("label {z} is not 0 or 1")));
    }
    Ok(probs
        .zip(labels)
        .map(|(p, &z)| {
            let pz = p[z as usize].clamp(crate::nn::tape::CE_FLOOR, 1.0 - crate::nn::tape::CE_FLOOR);
            -pz.ln()
        })
        .sum())
}
