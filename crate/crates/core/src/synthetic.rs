//! Synthetic mammogram-like records.
//!
//! Benign lesions are smooth ellipses; malignant ones are spiculated star
//! polygons. Both sit on a blurred random texture with additive noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{derive_seed, resize, Interpolation, MammogramRecord, Plane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Lesion brightness above the background.
    pub contrast: f64,
    pub noise_std: f64,
    /// Amplitude of the background texture.
    pub texture: f64,
    /// Grid of the random texture before smooth upsampling.
    pub texture_cells: usize,
    /// Star arms of malignant lesions.
    pub min_spikes: usize,
    pub max_spikes: usize,
    /// Inner/outer radius ratio of the stars.
    pub spike_depth: f64,
    /// Lesions per patient.
    pub lesions_per_patient: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_radius: 12.0,
            max_radius: 24.0,
            contrast: 0.35,
            noise_std: 0.04,
            texture: 0.15,
            texture_cells: 8,
            min_spikes: 5,
            max_spikes: 9,
            spike_depth: 0.5,
            lesions_per_patient: 1,
        }
    }
}

impl SyntheticConfig {
    /// A second acquisition domain: lower contrast, more noise, coarser
    /// texture.
    pub fn shifted(&self) -> Self {
        Self {
            contrast: self.contrast * 0.7,
            noise_std: self.noise_std * 1.5,
            texture: self.texture * 1.4,
            texture_cells: (self.texture_cells / 2).max(2),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 16
            && self.min_radius >= 2.0
            && self.max_radius >= self.min_radius
            && 2.0 * self.max_radius < self.image_size as f64
            && self.min_spikes >= 3
            && self.max_spikes >= self.min_spikes
            && (0.0..1.0).contains(&self.spike_depth)
            && self.texture_cells >= 2
            && self.lesions_per_patient >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("synthetic config {self:?}")))
        }
    }
}

/// Lesion shape as a polar radius function around its centre.
#[derive(Clone, Debug)]
enum Shape {
    Ellipse { a: f64, b: f64, angle: f64 },
    Star { outer: f64, inner: f64, spikes: usize, phase: f64 },
}

impl Shape {
    fn contains(&self, dy: f64, dx: f64) -> bool {
        match *self {
            Shape::Ellipse { a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Star {
                outer,
                inner,
                spikes,
                phase,
            } => {
                let r = dy.hypot(dx);
                let theta = (dy.atan2(dx) - phase).rem_euclid(2.0 * PI);
                let sector = PI / spikes as f64;
                // 0 at a tip, 1 at a notch
                let t = (theta % (2.0 * sector)) / sector;
                let t = if t > 1.0 { 2.0 - t } else { t };
                r <= outer + (inner - outer) * t
            }
        }
    }
}

fn texture(rng: &mut ChaCha8Rng, n: usize, cells: usize) -> Plane {
    let coarse = Plane::from_fn(cells, cells, |_, _| 0.0);
    let coarse = Plane {
        data: coarse.data.iter().map(|_| rng.gen::<f64>()).collect(),
        ..coarse
    };
    resize(&coarse, n, n, Interpolation::Bicubic).unwrap()
}

/// One record with the given label.
pub fn generate_record(config: &SyntheticConfig, label: u8, patient_id: &str, seed: u64) -> Result<MammogramRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.image_size;
    let radius = rng.gen_range(config.min_radius..=config.max_radius);
    let shape = if label == 0 {
        let ratio = rng.gen_range(0.6..=1.0);
        Shape::Ellipse {
            a: radius,
            b: radius * ratio,
            angle: rng.gen_range(0.0..PI),
        }
    } else {
        Shape::Star {
            outer: radius,
            inner: radius * config.spike_depth,
            spikes: rng.gen_range(config.min_spikes..=config.max_spikes),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    };
    let margin = radius + 2.0;
    let cy = rng.gen_range(margin..n as f64 - margin);
    let cx = rng.gen_range(margin..n as f64 - margin);
    let mask = Plane::from_fn(n, n, |r, c| f64::from(shape.contains(r as f64 - cy, c as f64 - cx)));
    let bg = texture(&mut rng, n, config.texture_cells);
    let lesion_tex = texture(&mut rng, n, config.texture_cells * 2);
    let noise = Normal::new(0.0, config.noise_std).unwrap();
    let base = 0.3;
    let image = Plane {
        data: (0..n * n)
            .map(|i| {
                let lesion = mask.data[i] * config.contrast * (0.8 + 0.4 * lesion_tex.data[i]);
                base + config.texture * bg.data[i] + lesion + noise.sample(&mut rng)
            })
            .collect(),
        ..mask.clone()
    };
    Ok(MammogramRecord {
        image,
        mask,
        label,
        patient_id: patient_id.to_string(),
    })
}

/// `count` records with alternating labels, `lesions_per_patient` per
/// patient id.
pub fn generate_dataset(config: &SyntheticConfig, count: usize, seed: u64) -> Result<Vec<MammogramRecord>> {
    (0..count)
        .map(|i| {
            let patient = format!("P{:04}", i / config.lesions_per_patient);
            generate_record(config, (i % 2) as u8, &patient, derive_seed(seed, 0x5e, i as u64))
        })
        .collect()
}

/// A clean disc mask, an intensity image of it, and soft foreground
/// probabilities from a label-flipped copy of the mask.
#[derive(Clone, Debug)]
pub struct NoisyBlob {
    pub mask: Plane,
    pub image: Plane,
    pub noisy_probs: Plane,
}

/// `flip_rate` of the labels are flipped; the flipped labels map to
/// probabilities `confidence` and `1 - confidence`.
pub fn noisy_blob(size: usize, flip_rate: f64, confidence: f64, seed: u64) -> NoisyBlob {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let radius = rng.gen_range(0.2 * n..0.3 * n);
    let cy = rng.gen_range(radius + 1.0..n - radius - 1.0);
    let cx = rng.gen_range(radius + 1.0..n - radius - 1.0);
    let mask = Plane::from_fn(size, size, |r, c| {
        f64::from((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= radius * radius)
    });
    let noise = Normal::new(0.0, 0.05).unwrap();
    let image = Plane {
        data: mask
            .data
            .iter()
            .map(|&m| (0.3 + 0.4 * m + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect(),
        ..mask.clone()
    };
    let noisy_probs = Plane {
        data: mask
            .data
            .iter()
            .map(|&m| {
                let label = if rng.gen::<f64>() < flip_rate { 1.0 - m } else { m };
                if label > 0.5 {
                    confidence
                } else {
                    1.0 - confidence
                }
            })
            .collect(),
        ..mask.clone()
    };
    NoisyBlob {
        mask,
        image,
        noisy_probs,
    }
}
