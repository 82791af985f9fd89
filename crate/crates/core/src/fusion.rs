//! Fusion of the two paths into the final diagnosis, and the total loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpl::{cross_entropy_sum, softmax2, HEAD_GAIN};
use crate::nn::kernels::Window;
use crate::nn::layers::{dropout, Conv, Dense, ParamBuilder};
use crate::nn::{ParamStore, Tape, Var};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub in_channels: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub hidden_width: usize,
    pub embedding_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lpl_block: TransformSpec,
    pub cgl_block: TransformSpec,
    pub dropout_rate: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl FusionConfig {
    pub fn new(lpl_channels: usize, cgl_channels: usize, lpl_conv: usize, cgl_conv: usize) -> Self {
        let block = |in_channels, conv_channels| TransformSpec {
            in_channels,
            conv_channels,
            conv_layers: 2,
            hidden_width: 256,
            embedding_width: 64,
        };
        Self {
            lpl_block: block(lpl_channels, lpl_conv),
            cgl_block: block(cgl_channels, cgl_conv),
            dropout_rate: 0.5,
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lpl_block.embedding_width != self.cgl_block.embedding_width {
            return Err(Error::InvalidConfig(
                "both transformation blocks must emit the same embedding width".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidConfig("alpha and beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Convolutions, global average pooling and two dense layers.
#[derive(Clone, Debug)]
pub struct TransformBlock {
    pub spec: TransformSpec,
    convs: Vec<Conv>,
    hidden: Dense,
    embed: Dense,
}

impl TransformBlock {
    pub fn new(b: &mut ParamBuilder, spec: &TransformSpec) -> Self {
        let mut convs = Vec::with_capacity(spec.conv_layers);
        let mut cin = spec.in_channels;
        for i in 0..spec.conv_layers {
            convs.push(b.conv(&format!("conv{}", i + 1), cin, spec.conv_channels, Window::square(3, 1, 1)));
            cin = spec.conv_channels;
        }
        let hidden = b.dense("dense1", cin, spec.hidden_width);
        let embed = b.dense_scaled("dense2", spec.hidden_width, spec.embedding_width, HEAD_GAIN);
        Self {
            spec: spec.clone(),
            convs,
            hidden,
            embed,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(tape, h);
            h = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(h);
        let hid = self.hidden.forward(tape, pooled);
        let hid = tape.relu(hid);
        self.embed.forward(tape, hid)
    }

    /// Embed one concrete feature map.
    pub fn transform_path(&self, params: &ParamStore, features: &FeatureMap) -> Result<Vec<f64>> {
        if features.channels() != self.spec.in_channels {
            return Err(Error::shape(format!(
                "transformation block expects {} channels, got {}",
                self.spec.in_channels,
                features.channels()
            )));
        }
        let mut tape = Tape::new(params);
        let x = tape.input(features.tensor().clone());
        let e = self.forward(&mut tape, x);
        Ok(tape.value(e).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosisOutput {
    /// `[benign, malignant]`.
    pub probs: [f64; 2],
    pub logits: [f64; 2],
    pub lpl_embedding: Vec<f64>,
    pub cgl_embedding: Vec<f64>,
}

impl DiagnosisOutput {
    pub fn predicted_label(&self) -> u8 {
        u8::from(self.probs[1] > self.probs[0])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub lpl_embedding: Var,
    pub cgl_embedding: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub config: FusionConfig,
    pub lpl_block: TransformBlock,
    pub cgl_block: TransformBlock,
    pub classifier: Dense,
}

impl FusionHead {
    pub fn new(b: &mut ParamBuilder, config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        let lpl_block = TransformBlock::new(&mut b.scope("lpl_transform"), &config.lpl_block);
        let cgl_block = TransformBlock::new(&mut b.scope("cgl_transform"), &config.cgl_block);
        let width = config.lpl_block.embedding_width + config.cgl_block.embedding_width;
        let classifier = b.dense_scaled("classifier", width, 2, HEAD_GAIN);
        Ok(Self {
            config: config.clone(),
            lpl_block,
            cgl_block,
            classifier,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        lpl_features: Var,
        cgl_features: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> FusionOutput {
        let lpl_embedding = self.lpl_block.forward(tape, lpl_features);
        let cgl_embedding = self.cgl_block.forward(tape, cgl_features);
        self.classify(tape, lpl_embedding, cgl_embedding, rng)
    }

    /// Concatenate, dense layer, softmax.
    pub fn classify(
        &self,
        tape: &mut Tape,
        lpl_embedding: Var,
        cgl_embedding: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> FusionOutput {
        let cat = tape.concat(&[lpl_embedding, cgl_embedding]);
        let cat = dropout(tape, cat, self.config.dropout_rate, rng);
        let logits = self.classifier.forward(tape, cat);
        let probs = tape.softmax(logits);
        FusionOutput {
            lpl_embedding,
            cgl_embedding,
            logits,
            probs,
        }
    }

    /// Inference-mode classification of two concrete embeddings.
    pub fn fuse_and_classify(
        &self,
        params: &ParamStore,
        lpl_embedding: &[f64],
        cgl_embedding: &[f64],
    ) -> Result<DiagnosisOutput> {
        let (lw, cw) = (
            self.config.lpl_block.embedding_width,
            self.config.cgl_block.embedding_width,
        );
        if lpl_embedding.len() != lw || cgl_embedding.len() != cw {
            return Err(Error::shape(format!(
                "embeddings of width {} and {}, expected {lw} and {cw}",
                lpl_embedding.len(),
                cgl_embedding.len()
            )));
        }
        let mut tape = Tape::new(params);
        let a = tape.input(crate::tensor::Tensor::from_vec(lpl_embedding.to_vec()));
        let c = tape.input(crate::tensor::Tensor::from_vec(cgl_embedding.to_vec()));
        let out = self.classify(&mut tape, a, c, None);
        Ok(diagnosis_from_tape(&tape, &out))
    }
}

pub fn diagnosis_from_tape(tape: &Tape, out: &FusionOutput) -> DiagnosisOutput {
    let l = tape.value(out.logits).data();
    let logits = [l[0], l[1]];
    DiagnosisOutput {
        probs: softmax2(logits),
        logits,
        lpl_embedding: tape.value(out.lpl_embedding).data().to_vec(),
        cgl_embedding: tape.value(out.cgl_embedding).data().to_vec(),
    }
}

/// Summed cross-entropy of fused class probabilities.
pub fn fusion_loss(probs: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    cross_entropy_sum(probs.iter().copied(), labels)
}

/// `fusion + alpha * lpl + beta * cgl`.
pub fn total_loss(l_fusion: f64, l_lpl: f64, l_cgl: f64, alpha: f64, beta: f64) -> f64 {
    l_fusion + alpha * l_lpl + beta * l_cgl
}
