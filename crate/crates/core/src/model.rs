//! The assembled dual-path network.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgl::{cgl_loss_on_tape, CglConfig, CglOutput, CglPath, SegmentationOutput};
use crate::crf::DenseCrf;
use crate::error::{Error, Result};
use crate::fusion::{diagnosis_from_tape, DiagnosisOutput, FusionConfig, FusionHead, FusionOutput};
use crate::lpl::{LplConfig, LplOutput, LplPath};
use crate::nn::{Gradients, Initializer, ParamBuilder, ParamStore, Tape, Var};
use crate::roi::{resize, Interpolation, Plane, RoiSample};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lpl: LplConfig,
    pub cgl: CglConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        let lpl = LplConfig::full();
        let cgl = CglConfig::full();
        let fusion = FusionConfig::new(lpl.trunk_channels, cgl.feature_channels(), 128, 32);
        Self { lpl, cgl, fusion }
    }

    pub fn tiny() -> Self {
        let lpl = LplConfig::tiny();
        let cgl = CglConfig::tiny();
        let fusion = FusionConfig::new(lpl.trunk_channels, cgl.feature_channels(), 16, 8);
        Self { lpl, cgl, fusion }
    }

    /// Smallest variant for finite-difference checks.
    pub fn micro(lpl_size: usize, cgl_size: usize) -> Self {
        let lpl = LplConfig::micro(lpl_size);
        let cgl = CglConfig::micro(cgl_size);
        let mut fusion = FusionConfig::new(lpl.trunk_channels, cgl.feature_channels(), 2, 2);
        for block in [&mut fusion.lpl_block, &mut fusion.cgl_block] {
            block.hidden_width = 4;
            block.embedding_width = 3;
        }
        Self { lpl, cgl, fusion }
    }

    /// Rebuild the fusion block inputs after editing either path.
    pub fn sync_fusion_inputs(&mut self) {
        self.fusion.lpl_block.in_channels = self.lpl.trunk_channels;
        self.fusion.cgl_block.in_channels = self.cgl.feature_channels();
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.lpl = self.lpl.with_residual(residual);
        self.cgl.residual = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.lpl.layer_shapes()?;
        self.cgl.validate()?;
        self.fusion.validate()?;
        if self.fusion.lpl_block.in_channels != self.lpl.trunk_channels
            || self.fusion.cgl_block.in_channels != self.cgl.feature_channels()
        {
            return Err(Error::InvalidConfig(
                "fusion block inputs do not match the path outputs".into(),
            ));
        }
        Ok(())
    }
}

/// Which path losses join the fusion loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossConfig {
    FusionLpl,
    FusionCgl,
    FusionBoth,
}

impl LossConfig {
    pub const ALL: [LossConfig; 3] = [LossConfig::FusionLpl, LossConfig::FusionCgl, LossConfig::FusionBoth];

    pub fn name(&self) -> &'static str {
        match self {
            LossConfig::FusionLpl => "fusion+lpl",
            LossConfig::FusionCgl => "fusion+cgl",
            LossConfig::FusionBoth => "fusion+both",
        }
    }

    /// Effective `(alpha, beta)`.
    pub fn weights(&self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            LossConfig::FusionLpl => (alpha, 0.0),
            LossConfig::FusionCgl => (0.0, beta),
            LossConfig::FusionBoth => (alpha, beta),
        }
    }
}

impl std::str::FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossConfig::ALL
            .into_iter()
            .find(|c| c.name() == s || format!("{c:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss configuration {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Model-ready tensors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[1, L, L]` contextual crop.
    pub lpl_image: Tensor,
    /// `[1, C, C]` tight crop.
    pub cgl_image: Tensor,
    /// `C * C` binary mask.
    pub mask: Vec<f64>,
    pub label: u8,
}

fn plane_tensor(p: &Plane, size: usize, method: Interpolation) -> Result<Tensor> {
    let p = if (p.height, p.width) == (size, size) {
        p.clone()
    } else {
        let mut r = resize(p, size, size, method)?;
        if method == Interpolation::Bicubic {
            r.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        r
    };
    Tensor::new(vec![1, size, size], p.data)
}

impl ModelInput {
    /// Resample a sample to the model input sizes when they differ.
    pub fn from_sample(sample: &RoiSample, config: &ModelConfig) -> Result<Self> {
        let c = config.cgl.input_size;
        Ok(Self {
            lpl_image: plane_tensor(&sample.lpl_image, config.lpl.input_size, Interpolation::Bicubic)?,
            cgl_image: plane_tensor(&sample.cgl_image, c, Interpolation::Bicubic)?,
            mask: plane_tensor(&sample.cgl_mask, c, Interpolation::Nearest)?.into_data(),
            label: sample.label,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub lpl: LplOutput,
    pub cgl: CglOutput,
    pub fusion: FusionOutput,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub fusion: Var,
    pub lpl: Var,
    pub cgl: Var,
    pub total: Var,
}

/// Per-sample loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fusion: f64,
    pub lpl: f64,
    pub cgl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.fusion += other.fusion;
        self.lpl += other.lpl;
        self.cgl += other.cgl;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> LossBreakdown {
        LossBreakdown {
            fusion: self.fusion * factor,
            lpl: self.lpl * factor,
            cgl: self.cgl * factor,
            total: self.total * factor,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.fusion, self.lpl, self.cgl, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub diagnosis: DiagnosisOutput,
    pub segmentation: SegmentationOutput,
}

#[derive(Clone, Debug)]
pub struct DualCoreNet {
    pub config: ModelConfig,
    pub lpl: LplPath,
    pub cgl: CglPath,
    pub fusion: FusionHead,
    pub params: ParamStore,
}

impl DualCoreNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let mut b = ParamBuilder::new(&mut params, &mut init);
        let lpl = LplPath::new(&mut b.scope("lpl"), &config.lpl)?;
        let cgl = CglPath::new(&mut b.scope("cgl"), &config.cgl)?;
        let fusion = FusionHead::new(&mut b.scope("fusion"), &config.fusion)?;
        Ok(Self {
            config: config.clone(),
            lpl,
            cgl,
            fusion,
            params,
        })
    }

    /// Build the architecture and adopt `loaded` weights, which must match
    /// it name for name and shape for shape.
    pub fn from_weights(config: &ModelConfig, loaded: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut mismatched = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, tensor) in loaded {
            match model.params.id(&name) {
                Some(id) if model.params.get(id).shape() == tensor.shape() => {
                    *model.params.get_mut(id) = tensor;
                    seen.insert(name);
                }
                Some(id) => mismatched.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    tensor.shape(),
                    model.params.get(id).shape()
                )),
                None => mismatched.push(format!("{name}: not in model")),
            }
        }
        for (name, _) in model.params.iter() {
            if !seen.contains(name) && !mismatched.iter().any(|m| m.starts_with(&format!("{name}:"))) {
                mismatched.push(format!("{name}: missing from checkpoint"));
            }
        }
        if mismatched.is_empty() {
            Ok(model)
        } else {
            Err(Error::LayerMismatch(mismatched))
        }
    }

    pub fn build_crf(&self, input: &ModelInput) -> Result<DenseCrf> {
        self.cgl.build_crf(&input.cgl_image)
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let (l, c) = (self.config.lpl.input_size, self.config.cgl.input_size);
        if input.lpl_image.shape() != [1, l, l]
            || input.cgl_image.shape() != [1, c, c]
            || input.mask.len() != c * c
        {
            return Err(Error::shape(format!(
                "inputs {:?} / {:?} / {} mask pixels, model expects [1, {l}, {l}] / [1, {c}, {c}]",
                input.lpl_image.shape(),
                input.cgl_image.shape(),
                input.mask.len()
            )));
        }
        Ok(())
    }

    /// `rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        crf: &DenseCrf,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> ModelOutput {
        let xl = tape.input(input.lpl_image.clone());
        let xc = tape.input(input.cgl_image.clone());
        let lpl = self.lpl.forward(tape, xl, rng.as_deref_mut());
        let cgl = self.cgl.forward(tape, xc, crf);
        let fusion = self.fusion.forward(tape, lpl.trunk, cgl.features, rng);
        ModelOutput { lpl, cgl, fusion }
    }

    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        out: &ModelOutput,
        input: &ModelInput,
        weights: &LossWeights,
    ) -> LossVars {
        let label = input.label as usize;
        let fusion = tape.cross_entropy(out.fusion.probs, label);
        let lpl = tape.cross_entropy(out.lpl.probs, label);
        let cgl = cgl_loss_on_tape(tape, &out.cgl, &input.mask, weights.gamma);
        let a = tape.scale(lpl, weights.alpha);
        let b = tape.scale(cgl, weights.beta);
        let total = tape.add_all(&[fusion, a, b]);
        LossVars { fusion, lpl, cgl, total }
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradients(
        &self,
        input: &ModelInput,
        weights: &LossWeights,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossBreakdown, Gradients)> {
        self.check_input(input)?;
        let crf = self.build_crf(input)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, input, &crf, rng);
        let loss = self.loss_on_tape(&mut tape, &out, input, weights);
        let breakdown = breakdown(&tape, &loss);
        let grads = tape.backward(loss.total);
        Ok((breakdown, grads))
    }

    /// Inference-mode loss of one sample.
    pub fn sample_loss(&self, input: &ModelInput, weights: &LossWeights) -> Result<LossBreakdown> {
        self.check_input(input)?;
        let crf = self.build_crf(input)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, input, &crf, None);
        let loss = self.loss_on_tape(&mut tape, &out, input, weights);
        Ok(breakdown(&tape, &loss))
    }

    /// Inference-mode loss together with the prediction.
    pub fn evaluate_sample(
        &self,
        input: &ModelInput,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Prediction)> {
        self.check_input(input)?;
        let crf = self.build_crf(input)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, input, &crf, None);
        let loss = self.loss_on_tape(&mut tape, &out, input, weights);
        let prediction = Prediction {
            diagnosis: diagnosis_from_tape(&tape, &out.fusion),
            segmentation: SegmentationOutput::from_tape(&tape, &out.cgl),
        };
        Ok((breakdown(&tape, &loss), prediction))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Prediction> {
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        Ok(self.evaluate_sample(input, &weights)?.1)
    }

    /// Segmentation of a lone tight crop.
    pub fn segment(&self, image: &FeatureMap) -> Result<SegmentationOutput> {
        self.cgl.infer(&self.params, image)
    }
}

fn breakdown(tape: &Tape, loss: &LossVars) -> LossBreakdown {
    LossBreakdown {
        fusion: tape.value(loss.fusion).item(),
        lpl: tape.value(loss.lpl).item(),
        cgl: tape.value(loss.cgl).item(),
        total: tape.value(loss.total).item(),
    }
}
