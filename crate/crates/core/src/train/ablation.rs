//! Ablation axes: loss configuration, gamma sweep, residual vs vanilla.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, Dataset, ExperimentConfig, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::RocCurve;
use crate::model::LossConfig;
use crate::plots::{gamma_sweep_figure, roc_figure, validation_loss_figure, Figure};

pub const GAMMA_SWEEP: [f64; 4] = [0.0, 0.42, 0.65, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    LossConfig,
    GammaSweep,
    Residual,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-config" => Ok(Self::LossConfig),
            "gamma-sweep" | "gamma" => Ok(Self::GammaSweep),
            "residual" => Ok(Self::Residual),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation axis {other:?} (loss-config, gamma-sweep, residual)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub config: ExperimentConfig,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub runs: Vec<AblationRun>,
}

/// The settings an axis spans, derived from `base`.
pub fn ablation_settings(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let sub = |label: &str| base.output_dir.as_ref().map(|d| d.join(label.replace(['+', '.'], "_")));
    match axis {
        AblationAxis::LossConfig => LossConfig::ALL
            .iter()
            .map(|&lc| {
                let label = lc.name().to_string();
                let config = ExperimentConfig {
                    loss_config: lc,
                    output_dir: sub(&label),
                    ..base.clone()
                };
                (label, config)
            })
            .collect(),
        AblationAxis::GammaSweep => GAMMA_SWEEP
            .iter()
            .map(|&gamma| {
                let label = format!("gamma={gamma}");
                let config = ExperimentConfig {
                    gamma,
                    output_dir: sub(&label),
                    ..base.clone()
                };
                (label, config)
            })
            .collect(),
        AblationAxis::Residual => [true, false]
            .iter()
            .map(|&residual| {
                let label = if residual { "residual" } else { "vanilla" }.to_string();
                let mut config = ExperimentConfig {
                    residual,
                    output_dir: sub(&label),
                    ..base.clone()
                };
                config.optimizer.weight_decay = if residual { base.residual_weight_decay } else { 0.0 };
                (label, config)
            })
            .collect(),
    }
}

pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis, data: &Dataset) -> Result<AblationReport> {
    let runs = ablation_settings(base, axis)
        .into_iter()
        .map(|(label, config)| {
            let report = train(&config, data)?.report;
            Ok(AblationRun { label, config, report })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AblationReport { axis, runs };
    if let Some(dir) = &base.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

impl AblationReport {
    /// The comparison figure of this axis.
    pub fn figure(&self) -> Figure {
        match self.axis {
            AblationAxis::LossConfig => {
                let curves: Vec<(String, &RocCurve)> = self
                    .runs
                    .iter()
                    .filter_map(|r| {
                        r.report
                            .test_metrics
                            .as_ref()
                            .and_then(|m| m.roc.as_ref())
                            .map(|c| (r.label.clone(), c))
                    })
                    .collect();
                roc_figure(&curves)
            }
            AblationAxis::GammaSweep => {
                let points: Vec<(f64, f64)> = self
                    .runs
                    .iter()
                    .filter_map(|r| {
                        r.report
                            .test_metrics
                            .as_ref()
                            .or(r.report.train_metrics.as_ref())
                            .map(|m| (r.config.gamma, m.mean_dice))
                    })
                    .collect();
                gamma_sweep_figure("test dice", &points)
            }
            AblationAxis::Residual => {
                let reports: Vec<(String, &TrainReport)> =
                    self.runs.iter().map(|r| (r.label.clone(), &r.report)).collect();
                validation_loss_figure(&reports)
            }
        }
    }

    /// One row per setting: label, gamma, dice, auc, best validation loss.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("setting,gamma,mean_dice,std_dice,auc,best_validation\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.runs {
            let m = r.report.test_metrics.as_ref().or(r.report.train_metrics.as_ref());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label,
                r.config.gamma,
                f(m.map(|m| m.mean_dice)),
                f(m.map(|m| m.std_dice)),
                f(m.and_then(|m| m.auc)),
                f(r.report.best_validation),
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = match self.axis {
            AblationAxis::LossConfig => "loss_config_roc",
            AblationAxis::GammaSweep => "gamma_sweep",
            AblationAxis::Residual => "residual_validation_loss",
        };
        self.figure().write(dir, stem)?;
        let table = dir.join(format!("{stem}_table.csv"));
        std::fs::write(&table, self.table_csv()).map_err(|e| Error::io(&table, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}
