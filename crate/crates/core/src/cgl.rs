//! Conditional graph learner: the segmentation path.
//!
//! A four-stage encoder/decoder with skip concatenations. At a quarter of
//! the input resolution a two-class softmax `h(x)` drives a mean-field CRF
//! layer; the refined marginals are bilinearly upsampled to the input size
//! (the CRF head) and concatenated with the last decoder stage to form the
//! features handed to the fusion module. A separate 1x1 head on the last
//! decoder stage gives the pure CNN prediction.

use serde::{Deserialize, Serialize};

use crate::crf::{CrfParams, DenseCrf, NodeFeatures};
use crate::error::{Error, Result};
use crate::nn::kernels::{self, Window};
use crate::nn::layers::{Conv, ParamBuilder};
use crate::nn::tape::DICE_EPS;
use crate::nn::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{FeatureMap, Tensor};

/// Number of 2x down-sampling stages of the encoder.
pub const STAGES: usize = 4;
/// Down-sampling factor between the input and the CRF lattice.
pub const CRF_DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CglConfig {
    pub input_size: usize,
    /// Width of the first stage; stage `s` has `base_channels << s`.
    pub base_channels: usize,
    /// Weight of the CRF dice term.
    pub gamma: f64,
    pub residual: bool,
    pub crf: CrfParams,
}

impl CglConfig {
    pub fn full() -> Self {
        Self {
            input_size: 224,
            base_channels: 32,
            gamma: 0.42,
            residual: true,
            crf: CrfParams::default(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            input_size: 80,
            base_channels: 4,
            ..Self::full()
        }
    }

    pub fn micro(input_size: usize) -> Self {
        Self {
            input_size,
            base_channels: 2,
            crf: CrfParams {
                num_iterations: 3,
                ..CrfParams::default()
            },
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1 << STAGES;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "CGL input size must be a positive multiple of {div}, got {}",
                self.input_size
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("CGL base channels must be positive".into()));
        }
        self.crf.validate()
    }

    /// Side of the lattice the CRF runs on.
    pub fn crf_resolution(&self) -> usize {
        self.input_size / CRF_DOWNSAMPLE
    }

    /// Channels of the features handed to fusion.
    pub fn feature_channels(&self) -> usize {
        self.base_channels + 2
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
    residual: bool,
}

impl ConvBlock {
    fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, residual: bool) -> Self {
        let mut s = b.scope(name);
        let conv1 = s.conv("conv1", cin, cout, Window::square(3, 1, 1));
        let conv2 = s.conv("conv2", cout, cout, Window::square(3, 1, 1));
        let shortcut = (residual && cin != cout)
            .then(|| s.conv_no_bias("shortcut", cin, cout, Window::square(1, 1, 0)));
        Self {
            conv1,
            conv2,
            shortcut,
            residual,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.conv1.forward(tape, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h);
        let h = if self.residual {
            let skip = match &self.shortcut {
                Some(s) => s.forward(tape, x),
                None => x,
            };
            tape.add(h, skip)
        } else {
            h
        };
        tape.relu(h)
    }
}

/// Tape handles produced by [`CglPath::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CglOutput {
    /// `[2, H, W]` softmax of the CNN head.
    pub cnn_probs: Var,
    /// `[2, H, W]` upsampled CRF marginals.
    pub crf_probs: Var,
    /// `[2, H/4, W/4]` latent unary scores.
    pub unary: Var,
    /// `[2, H/4, W/4]` CRF marginals.
    pub crf_marginals: Var,
    /// `[C + 2, H, W]` last decoder stage with the CRF head appended.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct CglPath {
    pub config: CglConfig,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    decoder: Vec<ConvBlock>,
    unary_head: Conv,
    cnn_head: Conv,
    pub crf_weights: ParamId,
}

impl CglPath {
    pub fn new(b: &mut ParamBuilder, config: &CglConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let r = config.residual;
        let widths: Vec<usize> = (0..STAGES).map(|s| c << s).collect();
        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = 1;
        for (s, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(b, &format!("enc{}", s + 1), cin, w, r));
            cin = w;
        }
        let deepest = widths[STAGES - 1];
        let bottleneck = ConvBlock::new(b, "bottleneck", deepest, deepest, r);
        let mut decoder = Vec::with_capacity(STAGES);
        let mut below = deepest;
        for s in (0..STAGES).rev() {
            let out = if s == 0 { c } else { widths[s - 1] };
            decoder.push(ConvBlock::new(
                b,
                &format!("dec{}", s + 1),
                below + widths[s],
                out,
                r,
            ));
            below = out;
        }
        // Decoder stage that sits at a quarter of the input resolution.
        let latent_width = widths[CRF_DOWNSAMPLE.trailing_zeros() as usize - 1];
        let unary_head = b.conv("unary_head", latent_width, 2, Window::square(1, 1, 0));
        let cnn_head = b.conv("cnn_head", c, 2, Window::square(1, 1, 0));
        let crf_weights = b.constant(
            "crf.kernel_weights",
            Tensor::from_vec(config.crf.kernel_weights.to_vec()),
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            bottleneck,
            decoder,
            unary_head,
            cnn_head,
            crf_weights,
        })
    }

    /// Kernels for one input image; shared by forward passes on that image.
    pub fn build_crf(&self, image: &Tensor) -> Result<DenseCrf> {
        let (_, h, w) = image.chw();
        let f = CRF_DOWNSAMPLE;
        let plane = kernels::area_downsample(image.channel(0), h, w, f);
        let features = NodeFeatures::lattice(h / f, w / f, plane)?;
        DenseCrf::new(&features, &self.config.crf)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, crf: &DenseCrf) -> CglOutput {
        let (_, h, w) = tape.value(x).chw();
        let mut skips = Vec::with_capacity(STAGES);
        let mut cur = x;
        for block in &self.encoder {
            let e = block.forward(tape, cur);
            skips.push(e);
            cur = tape.max_pool(e, Window::square(2, 2, 0));
        }
        cur = self.bottleneck.forward(tape, cur);
        let mut latent = cur;
        let latent_stage = STAGES - CRF_DOWNSAMPLE.trailing_zeros() as usize;
        for (i, block) in self.decoder.iter().enumerate() {
            let up = tape.upsample_nearest(cur, 2);
            let skip = skips[STAGES - 1 - i];
            let cat = tape.concat(&[up, skip]);
            cur = block.forward(tape, cat);
            if i + 1 == latent_stage {
                latent = cur;
            }
        }
        let unary = self.unary_head.forward(tape, latent);
        let wv = tape.param(self.crf_weights);
        let crf_marginals = tape.crf(unary, wv, crf);
        let crf_probs = tape.bilinear(crf_marginals, h, w);
        let cnn_logits = self.cnn_head.forward(tape, cur);
        let cnn_probs = tape.softmax(cnn_logits);
        let features = tape.concat(&[cur, crf_probs]);
        CglOutput {
            cnn_probs,
            crf_probs,
            unary,
            crf_marginals,
            features,
        }
    }

    /// Inference on one `input_size x input_size` image in `[0, 1]`.
    pub fn infer(&self, params: &ParamStore, image: &FeatureMap) -> Result<SegmentationOutput> {
        let n = self.config.input_size;
        if image.dims() != (n, n, 1) {
            return Err(Error::shape(format!(
                "CGL expects {n}x{n}x1, got {:?}",
                image.dims()
            )));
        }
        let crf = self.build_crf(image.tensor())?;
        let mut tape = Tape::new(params);
        let x = tape.input(image.tensor().clone());
        let out = self.forward(&mut tape, x, &crf);
        Ok(SegmentationOutput::from_tape(&tape, &out))
    }
}

/// Concrete values of a CGL forward pass.
#[derive(Clone, Debug)]
pub struct SegmentationOutput {
    pub height: usize,
    pub width: usize,
    /// Foreground probability of the CNN head, row-major.
    pub cnn_probs: Vec<f64>,
    /// Foreground probability of the CRF head, row-major.
    pub crf_probs: Vec<f64>,
    /// `softmax(unary)` at the CRF lattice: `[2, H/4, W/4]`.
    pub latent_softmax: Tensor,
    pub latent_features: FeatureMap,
}

impl SegmentationOutput {
    pub fn from_tape(tape: &Tape, out: &CglOutput) -> Self {
        let cnn = tape.value(out.cnn_probs);
        let (_, h, w) = cnn.chw();
        Self {
            height: h,
            width: w,
            cnn_probs: cnn.channel(1).to_vec(),
            crf_probs: tape.value(out.crf_probs).channel(1).to_vec(),
            latent_softmax: kernels::softmax_channels(tape.value(out.unary)),
            latent_features: FeatureMap::new(tape.value(out.features).clone()).unwrap(),
        }
    }
}

/// Soft dice `(2 sum y p + eps) / (sum y + sum p + eps)`; two empty maps
/// score 1.
pub fn dice(y: &[f64], p: &[f64]) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::shape(format!("dice of {} vs {} pixels", y.len(), p.len())));
    }
    let inter: f64 = y.iter().zip(p).map(|(a, b)| a * b).sum();
    let total: f64 = y.iter().sum::<f64>() + p.iter().sum::<f64>();
    Ok((2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

/// `(1 - dice(y, cnn)) + gamma * (1 - dice(y, crf))`.
pub fn cgl_loss(output: &SegmentationOutput, y: &[f64], gamma: f64) -> Result<f64> {
    Ok(dual_dice_loss(dice(y, &output.cnn_probs)?, dice(y, &output.crf_probs)?, gamma))
}

pub fn dual_dice_loss(dice_cnn: f64, dice_crf: f64, gamma: f64) -> f64 {
    (1.0 - dice_cnn) + gamma * (1.0 - dice_crf)
}

/// Record the dual dice loss on a tape.
pub fn cgl_loss_on_tape(tape: &mut Tape, out: &CglOutput, mask: &[f64], gamma: f64) -> Var {
    let d_cnn = tape.soft_dice(out.cnn_probs, mask);
    let d_crf = tape.soft_dice(out.crf_probs, mask);
    let t_cnn = tape.scale(d_cnn, -1.0);
    let t_cnn = tape.add_const(t_cnn, 1.0);
    let t_crf = tape.scale(d_crf, -gamma);
    let t_crf = tape.add_const(t_crf, gamma);
    tape.add(t_cnn, t_crf)
}
