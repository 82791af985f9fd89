use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use dualcorenet::crf::{refine_foreground, CrfParams};
use dualcorenet::metrics::{dice_from_probs, EvalReport, SampleRecord};
use dualcorenet::model::{DualCoreNet, ModelInput};
use dualcorenet::nn::kernels::area_downsample;
use dualcorenet::plots::roc_figure;
use dualcorenet::roi::io::{
    extract_dataset, load_roi_dataset, read_gray_png, write_gray16_png, write_mask_png,
};
use dualcorenet::roi::{resize, Interpolation, Plane, RoiConfig, RoiSample, Split};
use dualcorenet::train::ablation::{run_ablation, AblationAxis};
use dualcorenet::train::{train, Dataset, ExperimentConfig};
use dualcorenet::{Error, Result};

#[derive(Parser)]
#[command(name = "dualcorenet", version, about = "Dual-path mass segmentation and diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract two-scale ROIs from a raw manifest.
    RoiExtract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        pad: usize,
        #[arg(long, default_value_t = 2.0)]
        context_factor: f64,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_ratio: f64,
    },
    /// Segment a tight-crop PNG.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        /// Write the CNN head instead of the CRF head.
        #[arg(long)]
        emit_cnn_head: bool,
    },
    /// Mean-field refinement of a foreground probability map.
    CrfRefine {
        /// PNG or CSV foreground probabilities.
        #[arg(long)]
        unary: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0])]
        weights: Vec<f64>,
        /// Area-downsampling factor applied before inference.
        #[arg(long, default_value_t = 1)]
        downsample: usize,
        /// Refined probabilities (16-bit PNG); a `_mask` PNG is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnose one lesion from its two crops.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_context: PathBuf,
        #[arg(long)]
        image_tight: PathBuf,
    },
    /// Train from a TOML experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one ablation axis: loss-config, gamma-sweep or residual.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on an extracted ROI manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// `train`, `test` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn read_probabilities(path: &Path) -> Result<Plane> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("ragged probability CSV"));
        }
        Plane::new(rows.len(), w, rows.concat())
    } else {
        read_gray_png(path)
    }
}

fn fit(p: &Plane, size: usize, method: Interpolation) -> Result<Plane> {
    let mut r = resize(p, size, size, method)?;
    r.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(r)
}

fn write_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).unwrap());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RoiExtract {
            manifest,
            out,
            pad,
            context_factor,
            size,
            seed,
            train_ratio,
        } => {
            let config = RoiConfig {
                pad,
                context_factor,
                size,
            };
            let entries = extract_dataset(&manifest, &out, &config, train_ratio, seed)?;
            let train = entries.iter().filter(|e| e.split == Split::Train).count();
            write_json(&json!({
                "samples": entries.len(),
                "train": train,
                "test": entries.len() - train,
                "manifest": out.join(dualcorenet::roi::io::ROI_MANIFEST),
            }));
        }
        Command::Segment {
            checkpoint,
            image,
            out_mask,
            emit_cnn_head,
        } => {
            let model = DualCoreNet::load(&checkpoint)?;
            let img = read_gray_png(&image)?;
            let n = model.config.cgl.input_size;
            let x = fit(&img, n, Interpolation::Bicubic)?;
            let fm = dualcorenet::FeatureMap::from_plane(n, n, x.data)?;
            let seg = model.segment(&fm)?;
            let probs = if emit_cnn_head { seg.cnn_probs } else { seg.crf_probs };
            let mask = Plane::new(n, n, probs.iter().map(|&p| f64::from(p >= 0.5)).collect())?;
            let mask = resize(&mask, img.height, img.width, Interpolation::Nearest)?;
            write_mask_png(&out_mask, &mask)?;
        }
        Command::CrfRefine {
            unary,
            image,
            iters,
            weights,
            downsample,
            out,
        } => {
            if weights.len() != 2 || downsample == 0 {
                return Err(Error::InvalidConfig("need two kernel weights and downsample >= 1".into()));
            }
            let probs = read_probabilities(&unary)?;
            let img = read_gray_png(&image)?;
            if (probs.height, probs.width) != (img.height, img.width) {
                return Err(Error::shape("unary and image sizes differ"));
            }
            let (h, w) = (img.height / downsample, img.width / downsample);
            let (p, i) = if downsample == 1 {
                (probs.data, img.data)
            } else {
                (
                    area_downsample(&probs.data, img.height, img.width, downsample),
                    area_downsample(&img.data, img.height, img.width, downsample),
                )
            };
            let params = CrfParams {
                kernel_weights: [weights[0], weights[1]],
                num_iterations: iters,
                ..CrfParams::default()
            };
            params.validate()?;
            let refined = Plane::new(h, w, refine_foreground(&p, &i, h, w, &params)?)?;
            write_gray16_png(&out, &refined)?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("refined");
            let mask_path = out.with_file_name(format!("{stem}_mask.png"));
            let mask = Plane {
                data: refined.data.iter().map(|&v| f64::from(v >= 0.5)).collect(),
                ..refined.clone()
            };
            write_mask_png(&mask_path, &mask)?;
        }
        Command::Classify {
            checkpoint,
            image_context,
            image_tight,
        } => {
            let model = DualCoreNet::load(&checkpoint)?;
            let tight = read_gray_png(&image_tight)?;
            let sample = RoiSample {
                lpl_image: read_gray_png(&image_context)?,
                cgl_mask: Plane::zeros(tight.height, tight.width),
                cgl_image: tight,
                label: 0,
                patient_id: String::new(),
            };
            let input = ModelInput::from_sample(&sample, &model.config)?;
            let d = model.predict(&input)?.diagnosis;
            write_json(&json!({
                "p_benign": d.probs[0],
                "p_malignant": d.probs[1],
                "predicted_label": d.predicted_label(),
            }));
        }
        Command::Train { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.output_dir.get_or_insert_with(|| PathBuf::from("runs/train"));
            let data = Dataset::load(&cfg)?;
            let report = train(&cfg, &data)?.report;
            write_json(&json!({
                "output_dir": cfg.output_dir,
                "epochs": report.epochs.len(),
                "best_epoch": report.best_epoch,
                "test_dice": report.test_metrics.as_ref().map(|m| m.mean_dice),
                "test_auc": report.test_metrics.as_ref().and_then(|m| m.auc),
            }));
        }
        Command::Ablate { axis, config } => {
            let axis: AblationAxis = axis.parse()?;
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.output_dir.get_or_insert_with(|| PathBuf::from("runs/ablation"));
            let data = Dataset::load(&cfg)?;
            let report = run_ablation(&cfg, axis, &data)?;
            print!("{}", report.table_csv());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            split,
        } => {
            let model = DualCoreNet::load(&checkpoint)?;
            let keep = |s: Split| match split.as_str() {
                "all" => true,
                "train" => s == Split::Train,
                _ => s == Split::Test,
            };
            let mut records = Vec::new();
            for (i, (sample, s)) in load_roi_dataset(&manifest)?.into_iter().enumerate() {
                if !keep(s) {
                    continue;
                }
                let input = ModelInput::from_sample(&sample, &model.config)?;
                let p = model.predict(&input)?;
                records.push(SampleRecord {
                    index: i,
                    patient_id: sample.patient_id,
                    label: sample.label,
                    p_malignant: p.diagnosis.probs[1],
                    dice: dice_from_probs(&p.segmentation.crf_probs, &input.mask)?,
                    dice_cnn: dice_from_probs(&p.segmentation.cnn_probs, &input.mask)?,
                });
            }
            let report = EvalReport::from_samples(records)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            if let Some(roc) = &report.roc {
                let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
                roc_figure(&[("model".to_string(), roc)]).write(dir, &format!("{stem}_roc"))?;
            }
            write_json(&json!({
                "mean_dice": report.mean_dice,
                "std_dice": report.std_dice,
                "auc": report.auc,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
