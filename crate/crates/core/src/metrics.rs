//! Hard dice, ROC analysis and evaluation summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binarization threshold for evaluation masks.
pub const THRESHOLD: f64 = 0.5;

pub fn binarize(p: &[f64]) -> Vec<bool> {
    p.iter().map(|&v| v >= THRESHOLD).collect()
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_coefficient(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "dice of {} vs {} pixels",
            pred.len(),
            truth.len()
        )));
    }
    let inter = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count();
    let total = pred.iter().filter(|v| **v).count() + truth.iter().filter(|v| **v).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Dice of a probability map thresholded at 0.5 against a 0/1 mask.
pub fn dice_from_probs(probs: &[f64], mask: &[f64]) -> Result<f64> {
    let truth: Vec<bool> = mask.iter().map(|&v| v > 0.5).collect();
    dice_coefficient(&binarize(probs), &truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)`, from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Threshold reached at each point after the first (score >= t is
    /// positive); the first point uses `+inf`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

/// Sweep thresholds over the distinct scores in decreasing order; tied
/// scores cross together, giving a diagonal segment.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        thresholds.push(t);
    }
    let auc = RocCurve::trapezoid(&points);
    Ok(RocCurve { points, thresholds, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub patient_id: String,
    pub label: u8,
    pub p_malignant: f64,
    pub dice: f64,
    pub dice_cnn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_dice_cnn: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub roc: Option<RocCurve>,
    pub samples: Vec<SampleRecord>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleRecord>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dice: Vec<f64> = samples.iter().map(|s| s.dice).collect();
        let (mean_dice, std_dice) = mean_std(&dice);
        let cnn: Vec<f64> = samples.iter().map(|s| s.dice_cnn).collect();
        let scores: Vec<f64> = samples.iter().map(|s| s.p_malignant).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let roc = match roc_auc(&scores, &labels) {
            Ok(r) => Some(r),
            Err(Error::DegenerateLabels { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mean_dice,
            std_dice,
            mean_dice_cnn: mean_std(&cnn).0,
            auc: roc.as_ref().map(|r| r.auc),
            roc,
            samples,
        })
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self
            .samples
            .iter()
            .filter(|s| u8::from(s.p_malignant > 0.5) == s.label)
            .count();
        correct as f64 / self.samples.len() as f64
    }
}
