//! Optimization loop, pre-train / fine-tune protocol and checkpointing.

pub mod ablation;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{dice_from_probs, EvalReport, SampleRecord};
use crate::model::{DualCoreNet, LossBreakdown, LossConfig, LossWeights, ModelConfig, ModelInput};
use crate::nn::{Gradients, ParamStore};
use crate::roi::io::load_roi_dataset;
use crate::roi::{augment, derive_seed, extract_roi, split_patients, AugmentConfig, RoiConfig, RoiSample, Split};
use crate::synthetic::{generate_dataset, SyntheticConfig};
use crate::tensor::Tensor;

const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_INIT: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Defaults to 8, or 4 in tiny mode.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: None,
            epochs: 100,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub count: usize,
    pub seed: u64,
    /// Generate from the shifted domain.
    pub shifted: bool,
    pub generator: SyntheticConfig,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            shifted: false,
            generator: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest written by `roi-extract`; synthetic data when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticData,
    /// Patient share of the training split for synthetic data.
    pub train_ratio: f64,
    pub roi: Option<RoiConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticData::default(),
            train_ratio: 0.8,
            roi: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tiny: bool,
    pub loss_config: LossConfig,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub residual: bool,
    pub optimizer: OptimizerConfig,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Share of training patients held out for validation.
    pub validation_fraction: f64,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
    /// Weight decay of the residual arm in the residual ablation.
    pub residual_weight_decay: f64,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tiny: true,
            loss_config: LossConfig::FusionBoth,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.42,
            residual: true,
            optimizer: OptimizerConfig::default(),
            augment: true,
            augmentation: AugmentConfig::default(),
            validation_fraction: 0.1,
            pretrain_checkpoint: None,
            data: DataConfig::default(),
            output_dir: None,
            residual_weight_decay: 1e-4,
            progress: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            config.data.manifest.as_mut(),
            config.pretrain_checkpoint.as_mut(),
            config.output_dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if self.batch_size() == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::InvalidConfig("moment decays must lie in [0, 1)".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("alpha, beta and gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.optimizer
            .batch_size
            .unwrap_or(if self.tiny { 4 } else { 8 })
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = if self.tiny {
            ModelConfig::tiny()
        } else {
            ModelConfig::full()
        }
        .with_residual(self.residual);
        m.cgl.gamma = self.gamma;
        m
    }

    pub fn loss_weights(&self) -> LossWeights {
        let (alpha, beta) = self.loss_config.weights(self.alpha, self.beta);
        LossWeights {
            alpha,
            beta,
            gamma: self.gamma,
        }
    }

    pub fn roi_config(&self) -> RoiConfig {
        self.data.roi.clone().unwrap_or_else(|| RoiConfig {
            size: self.model_config().cgl.input_size,
            ..RoiConfig::default()
        })
    }

    /// Stable FNV-1a hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Train and test samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<RoiSample>,
    pub test: Vec<RoiSample>,
}

impl Dataset {
    /// Patient-level split of extracted samples.
    pub fn split(samples: Vec<RoiSample>, train_ratio: f64, seed: u64) -> Result<Self> {
        let split = split_patients(samples.iter().map(|s| s.patient_id.as_str()), train_ratio, seed)?;
        let (train, test) = samples
            .into_iter()
            .partition(|s| split.of(&s.patient_id) == Split::Train);
        Ok(Self { train, test })
    }

    /// Synthetic records pushed through ROI extraction.
    pub fn synthetic(data: &SyntheticData, roi: &RoiConfig, train_ratio: f64) -> Result<Self> {
        let generator = if data.shifted {
            data.generator.shifted()
        } else {
            data.generator.clone()
        };
        let samples = generate_dataset(&generator, data.count, data.seed)?
            .iter()
            .map(|r| extract_roi(r, roi))
            .collect::<Result<Vec<_>>>()?;
        Self::split(samples, train_ratio, data.seed)
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let mut out = Self::default();
        for (s, split) in load_roi_dataset(path)? {
            match split {
                Split::Train => out.train.push(s),
                Split::Test => out.test.push(s),
            }
        }
        Ok(out)
    }

    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        match &config.data.manifest {
            Some(p) => Self::from_manifest(p),
            None => Self::synthetic(&config.data.synthetic, &config.roi_config(), config.data.train_ratio),
        }
    }
}

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: &OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config: config.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply `scale * grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, scale: f64) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i] * scale) + c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                p[i] -= c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
            }
        }
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DualCoreNet,
    pub optimizer: Adam,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(model: DualCoreNet, optimizer: &OptimizerConfig, weights: LossWeights) -> Self {
        let optimizer = Adam::new(optimizer, &model.params);
        Self {
            model,
            optimizer,
            weights,
        }
    }

    /// Mean loss and summed gradients of a batch; `dropout_seeds` enables
    /// dropout with one stream per sample.
    pub fn batch_gradients(
        &self,
        batch: &[ModelInput],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut total = LossBreakdown::default();
        let mut grads = Gradients::zeros_like(&self.model.params);
        for (i, input) in batch.iter().enumerate() {
            let mut rng = dropout_seeds.map(|s| ChaCha8Rng::seed_from_u64(s[i]));
            let (l, g) = self.model.sample_gradients(input, &self.weights, rng.as_mut())?;
            total.add(&l);
            grads.merge(g);
        }
        Ok((total.scaled(1.0 / batch.len() as f64), grads))
    }

    /// One optimizer step on the batch mean loss.
    pub fn step(&mut self, batch: &[ModelInput], dropout_seeds: Option<&[u64]>) -> Result<LossBreakdown> {
        let (loss, grads) = self.batch_gradients(batch, dropout_seeds)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        self.optimizer
            .step(&mut self.model.params, &grads, 1.0 / batch.len() as f64);
        // kernel weights stay nonnegative
        let w = self.model.cgl.crf_weights;
        for v in self.model.params.get_mut(w).data_mut() {
            *v = v.max(0.0);
        }
        Ok(loss)
    }

    /// Inference-mode mean loss.
    pub fn mean_loss(&self, inputs: &[ModelInput]) -> Result<LossBreakdown> {
        let mut total = LossBreakdown::default();
        for input in inputs {
            total.add(&self.model.sample_loss(input, &self.weights)?);
        }
        Ok(total.scaled(1.0 / inputs.len().max(1) as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
    pub validation_auc: Option<f64>,
    /// `weight_decay / 2 * |theta|^2` at the end of the epoch.
    pub weight_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub loss_config: LossConfig,
    pub epochs: Vec<EpochRecord>,
    /// Validation before the first update.
    pub initial_validation: Option<LossBreakdown>,
    pub initial_validation_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
    pub stopped_early: bool,
    pub wall_clock_seconds: f64,
    pub train_metrics: Option<EvalReport>,
    pub test_metrics: Option<EvalReport>,
}

impl TrainReport {
    /// First epoch whose validation AUC reaches `target`, 0 when the
    /// initial weights already do.
    pub fn epochs_to_validation_auc(&self, target: f64) -> Option<usize> {
        if self.initial_validation_auc.is_some_and(|a| a >= target) {
            return Some(0);
        }
        self.epochs
            .iter()
            .find(|e| e.validation_auc.is_some_and(|a| a >= target))
            .map(|e| e.epoch)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Per-epoch loss components as CSV.
    pub fn save_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "train_fusion",
            "train_lpl",
            "train_cgl",
            "train_total",
            "val_fusion",
            "val_lpl",
            "val_cgl",
            "val_total",
            "val_auc",
            "weight_penalty",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        for e in &self.epochs {
            let v = e.validation;
            w.write_record([
                e.epoch.to_string(),
                format!("{:.9e}", e.train.fusion),
                format!("{:.9e}", e.train.lpl),
                format!("{:.9e}", e.train.cgl),
                format!("{:.9e}", e.train.total),
                opt(v.map(|v| v.fusion)),
                opt(v.map(|v| v.lpl)),
                opt(v.map(|v| v.cgl)),
                opt(v.map(|v| v.total)),
                opt(e.validation_auc),
                format!("{:.9e}", e.weight_penalty),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DualCoreNet,
    pub report: TrainReport,
}

/// Segmentation and diagnosis metrics of a model on samples.
pub fn evaluate(model: &DualCoreNet, samples: &[RoiSample]) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let input = ModelInput::from_sample(s, &model.config)?;
        let p = model.predict(&input)?;
        records.push(SampleRecord {
            index: i,
            patient_id: s.patient_id.clone(),
            label: s.label,
            p_malignant: p.diagnosis.probs[1],
            dice: dice_from_probs(&p.segmentation.crf_probs, &input.mask)?,
            dice_cnn: dice_from_probs(&p.segmentation.cnn_probs, &input.mask)?,
        });
    }
    EvalReport::from_samples(records)
}

fn weight_penalty(params: &ParamStore, decay: f64) -> f64 {
    if decay == 0.0 {
        return 0.0;
    }
    0.5 * decay
        * params
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
}

fn validation_pass(model: &DualCoreNet, inputs: &[ModelInput], weights: &LossWeights) -> Result<(LossBreakdown, Option<f64>)> {
    let mut total = LossBreakdown::default();
    let mut scores = Vec::with_capacity(inputs.len());
    let mut labels = Vec::with_capacity(inputs.len());
    for input in inputs {
        let (l, p) = model.evaluate_sample(input, weights)?;
        total.add(&l);
        scores.push(p.diagnosis.probs[1]);
        labels.push(input.label);
    }
    let auc = crate::metrics::roc_auc(&scores, &labels).ok().map(|r| r.auc);
    Ok((total.scaled(1.0 / inputs.len() as f64), auc))
}

/// Train a freshly initialized model (or the configured pre-trained
/// checkpoint).
pub fn train(config: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let model = match &config.pretrain_checkpoint {
        Some(p) => DualCoreNet::from_weights(&config.model_config(), Checkpoint::load(p)?.tensors)?,
        None => DualCoreNet::new(&config.model_config(), derive_seed(config.seed, STREAM_INIT, 0))?,
    };
    train_model(model, config, data)
}

/// Continue training from pre-trained weights, which must match the
/// configured architecture layer for layer.
pub fn fine_tune(pretrained: &Checkpoint, config: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let model = DualCoreNet::from_weights(&config.model_config(), pretrained.tensors.clone())?;
    train_model(model, config, data)
}

/// The training loop proper.
pub fn train_model(model: DualCoreNet, config: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let weights = config.loss_weights();

    // patient-level validation hold-out
    let (fit, held): (Vec<&RoiSample>, Vec<&RoiSample>) = if config.validation_fraction > 0.0 {
        let split = split_patients(
            data.train.iter().map(|s| s.patient_id.as_str()),
            1.0 - config.validation_fraction,
            derive_seed(config.seed, STREAM_VALIDATION, 0),
        )?;
        data.train
            .iter()
            .partition(|s| split.of(&s.patient_id) == Split::Train)
    } else {
        (data.train.iter().collect(), Vec::new())
    };
    if fit.is_empty() {
        return Err(Error::EmptyInput);
    }
    let validation: Vec<ModelInput> = held
        .iter()
        .map(|s| ModelInput::from_sample(s, &model.config))
        .collect::<Result<_>>()?;
    let plain: Vec<ModelInput> = fit
        .iter()
        .map(|s| ModelInput::from_sample(s, &model.config))
        .collect::<Result<_>>()?;

    let (initial_validation, initial_validation_auc) = if validation.is_empty() {
        (None, None)
    } else {
        let (l, auc) = validation_pass(&model, &validation, &weights)?;
        (Some(l), auc)
    };
    let mut trainer = Trainer::new(model, &config.optimizer, weights);
    let batch_size = config.batch_size();
    let mut epochs = Vec::with_capacity(config.optimizer.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let best_path = config.output_dir.as_ref().map(|d| d.join("best.ckpt"));
    if let Some(d) = &config.output_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    for epoch in 1..=config.optimizer.epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_ORDER, epoch as u64)));
        let mut sum = LossBreakdown::default();
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let key = |stream: u64, i: usize| {
                derive_seed(derive_seed(config.seed, stream, epoch as u64), 0, i as u64)
            };
            let batch: Vec<ModelInput> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        let s = augment(fit[i], &config.augmentation, key(STREAM_AUGMENT, i))?;
                        ModelInput::from_sample(&s, &trainer.model.config)
                    } else {
                        Ok(plain[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = chunk.iter().map(|&i| key(STREAM_DROPOUT, i)).collect();
            let loss = trainer.step(&batch, Some(&seeds)).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            sum.add(&loss.scaled(chunk.len() as f64));
        }
        let train_loss = sum.scaled(1.0 / fit.len() as f64);
        let (val, val_auc) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, auc) = validation_pass(&trainer.model, &validation, &weights)?;
            (Some(l), auc)
        };
        if config.progress {
            eprintln!(
                "epoch {epoch:4}  train {:.4} (fusion {:.4} lpl {:.4} cgl {:.4})  val {}  auc {}  {:.0}s",
                train_loss.total,
                train_loss.fusion,
                train_loss.lpl,
                train_loss.cgl,
                val.map_or("-".into(), |v| format!("{:.4}", v.total)),
                val_auc.map_or("-".into(), |a| format!("{a:.3}")),
                start.elapsed().as_secs_f64()
            );
        }
        if let Some(v) = &val {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            validation: val,
            validation_auc: val_auc,
            weight_penalty: weight_penalty(&trainer.model.params, config.optimizer.weight_decay),
        });
        if let Some(v) = val {
            if best.as_ref().map_or(true, |b| v.total < b.1) {
                best = Some((epoch, v.total, trainer.model.params.clone()));
                since_best = 0;
                if let Some(p) = &best_path {
                    trainer.model.save(p)?;
                }
            } else {
                since_best += 1;
                if since_best >= config.optimizer.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let mut model = trainer.model;
    let (best_epoch, best_validation) = match best {
        Some((e, v, params)) => {
            model.params = params;
            (Some(e), Some(v))
        }
        None => (None, None),
    };
    let train_samples: Vec<RoiSample> = fit.iter().map(|s| (*s).clone()).collect();
    let train_metrics = Some(evaluate(&model, &train_samples)?);
    let test_metrics = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.test)?)
    };
    let report = TrainReport {
        config_hash: config.hash(),
        loss_config: config.loss_config,
        epochs,
        initial_validation,
        initial_validation_auc,
        best_epoch,
        best_validation,
        stopped_early,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        train_metrics,
        test_metrics,
    };
    if let Some(d) = &config.output_dir {
        model.save(&d.join("final.ckpt"))?;
        report.save_json(&d.join("report.json"))?;
        report.save_curves_csv(&d.join("curves.csv"))?;
    }
    Ok(TrainOutcome { model, report })
}
