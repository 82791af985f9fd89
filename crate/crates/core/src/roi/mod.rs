//! Two-scale ROI extraction.
//!
//! Each lesion yields a tight crop (bounding box plus a pixel margin,
//! clamped to the image) for segmentation and a contextual crop (a
//! multiple of the bounding box, centred on it, zero-padded outside the
//! image) for classification. Both are resized to a common square size:
//! bicubic for intensities, nearest neighbour for masks.

pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Sub-array `rows x cols` (inclusive ranges, must lie inside).
    pub fn crop(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Plane {
        Plane::from_fn(r1 - r0 + 1, c1 - c0 + 1, |r, c| self.get(r0 + r, c0 + c))
    }

    pub fn flip_horizontal(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flip_vertical(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MammogramRecord {
    pub image: Plane,
    pub mask: Plane,
    pub label: u8,
    pub patient_id: String,
}

impl MammogramRecord {
    pub fn validate(&self) -> Result<()> {
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width) {
            return Err(Error::shape(format!(
                "image {}x{} vs mask {}x{}",
                self.image.height, self.image.width, self.mask.height, self.mask.width
            )));
        }
        if self.mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        if self.label > 1 {
            return Err(Error::InvalidConfig(format!("label {} is not 0/1", self.label)));
        }
        Ok(())
    }
}

/// A resized two-scale training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    /// Contextual crop for the classification path.
    pub lpl_image: Plane,
    /// Tight crop for the segmentation path.
    pub cgl_image: Plane,
    pub cgl_mask: Plane,
    pub label: u8,
    pub patient_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    pub pad: usize,
    pub context_factor: f64,
    pub size: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            pad: 5,
            context_factor: 2.0,
            size: 224,
        }
    }
}

pub fn compute_bounding_box(mask: &Plane) -> Result<BBox> {
    let mut bb: Option<BBox> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) != 0.0 {
                bb = Some(match bb {
                    None => BBox { r0: r, r1: r, c0: c, c1: c },
                    Some(b) => BBox {
                        r0: b.r0.min(r),
                        r1: b.r1.max(r),
                        c0: b.c0.min(c),
                        c1: b.c1.max(c),
                    },
                });
            }
        }
    }
    bb.ok_or(Error::NoForeground)
}

/// Bounding box grown by `pad` on every side, clamped to the image.
pub fn tight_box(mask: &Plane, pad: usize) -> Result<BBox> {
    let b = compute_bounding_box(mask)?;
    Ok(BBox {
        r0: b.r0.saturating_sub(pad),
        r1: (b.r1 + pad).min(mask.height - 1),
        c0: b.c0.saturating_sub(pad),
        c1: (b.c1 + pad).min(mask.width - 1),
    })
}

pub fn crop_tight(image: &Plane, mask: &Plane, pad: usize) -> Result<(Plane, Plane)> {
    let b = tight_box(mask, pad)?;
    Ok((image.crop(b.r0, b.r1, b.c0, b.c1), mask.crop(b.r0, b.r1, b.c0, b.c1)))
}

/// Crop window of the contextual ROI in source coordinates (may extend
/// past the image): `(top, left, height, width)`.
pub fn context_window(bbox: &BBox, factor: f64) -> (isize, isize, usize, usize) {
    let grow = |extent: usize| ((extent as f64) * factor).round().max(extent as f64) as usize;
    let (h, w) = (grow(bbox.height()), grow(bbox.width()));
    let top = bbox.r0 as isize - ((h - bbox.height()) / 2) as isize;
    let left = bbox.c0 as isize - ((w - bbox.width()) / 2) as isize;
    (top, left, h, w)
}

pub fn crop_context(image: &Plane, mask: &Plane, factor: f64) -> Result<(Plane, Plane)> {
    if !(factor >= 1.0) {
        return Err(Error::InvalidConfig(format!("context factor must be >= 1, got {factor}")));
    }
    let b = compute_bounding_box(mask)?;
    let (top, left, h, w) = context_window(&b, factor);
    let sample = |p: &Plane| {
        Plane::from_fn(h, w, |r, c| {
            let (sr, sc) = (top + r as isize, left + c as isize);
            if sr < 0 || sc < 0 || sr as usize >= p.height || sc as usize >= p.width {
                0.0
            } else {
                p.get(sr as usize, sc as usize)
            }
        })
    };
    Ok((sample(image), sample(mask)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bicubic,
    Nearest,
}

/// Keys cubic convolution weight with `a = -0.5`.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

struct CubicTaps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

fn cubic_taps(src: usize, dst: usize) -> CubicTaps {
    let scale = src as f64 / dst as f64;
    let mut taps = CubicTaps {
        index: Vec::with_capacity(dst),
        weight: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let pos = (o as f64 + 0.5) * scale - 0.5;
        let base = pos.floor();
        let t = pos - base;
        let mut idx = [0; 4];
        let mut w = [0.0; 4];
        for k in 0..4 {
            let s = base as isize + k as isize - 1;
            idx[k] = s.clamp(0, src as isize - 1) as usize;
            w[k] = cubic_weight(t - (k as f64 - 1.0));
        }
        taps.index.push(idx);
        taps.weight.push(w);
    }
    taps
}

/// Nearest source index with half-pixel centres.
pub fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    ((((o as f64) + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

pub fn resize(plane: &Plane, height: usize, width: usize, method: Interpolation) -> Result<Plane> {
    if plane.is_empty() || height == 0 || width == 0 {
        return Err(Error::EmptyInput);
    }
    match method {
        Interpolation::Nearest => Ok(Plane::from_fn(height, width, |r, c| {
            plane.get(
                nearest_index(r, plane.height, height),
                nearest_index(c, plane.width, width),
            )
        })),
        Interpolation::Bicubic => {
            let ty = cubic_taps(plane.height, height);
            let tx = cubic_taps(plane.width, width);
            // rows first, then columns
            let mut tmp = vec![0.0; plane.height * width];
            for r in 0..plane.height {
                for c in 0..width {
                    let (idx, w) = (&tx.index[c], &tx.weight[c]);
                    tmp[r * width + c] = (0..4).map(|k| w[k] * plane.get(r, idx[k])).sum();
                }
            }
            let mut out = vec![0.0; height * width];
            for r in 0..height {
                let (idx, w) = (&ty.index[r], &ty.weight[r]);
                for c in 0..width {
                    out[r * width + c] = (0..4).map(|k| w[k] * tmp[idx[k] * width + c]).sum();
                }
            }
            Plane::new(height, width, out)
        }
    }
}

/// Per-image min-max scaling to `[0, 1]`; constant images map to zero.
pub fn normalize_min_max(plane: &Plane) -> Plane {
    let (lo, hi) = plane
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let data = if span > 0.0 {
        plane.data.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; plane.data.len()]
    };
    Plane {
        height: plane.height,
        width: plane.width,
        data,
    }
}

fn resize_image(p: &Plane, size: usize) -> Result<Plane> {
    let mut out = resize(p, size, size, Interpolation::Bicubic)?;
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn resize_mask(p: &Plane, size: usize) -> Result<Plane> {
    let mut out = resize(p, size, size, Interpolation::Nearest)?;
    out.data.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
    Ok(out)
}

/// Normalize, crop at both scales and resize one record.
pub fn extract_roi(record: &MammogramRecord, config: &RoiConfig) -> Result<RoiSample> {
    record.validate()?;
    let image = normalize_min_max(&record.image);
    let (tight_img, tight_mask) = crop_tight(&image, &record.mask, config.pad)?;
    let (ctx_img, _) = crop_context(&image, &record.mask, config.context_factor)?;
    Ok(RoiSample {
        lpl_image: resize_image(&ctx_img, config.size)?,
        cgl_image: resize_image(&tight_img, config.size)?,
        cgl_mask: resize_mask(&tight_mask, config.size)?,
        label: record.label,
        patient_id: record.patient_id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub crop_prob: f64,
    /// Side of the random crop relative to the sample.
    pub crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop_prob: 0.5,
            crop_fraction: 0.9,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn flips_only() -> Self {
        Self {
            crop_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Joint random flips and crop of all three planes of a sample.
pub fn augment(sample: &RoiSample, config: &AugmentConfig, seed: u64) -> Result<RoiSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hflip = rng.gen::<f64>() < config.hflip_prob;
    let vflip = rng.gen::<f64>() < config.vflip_prob;
    let crop = rng.gen::<f64>() < config.crop_prob;
    let size = sample.cgl_image.height;
    let side = ((size as f64 * config.crop_fraction).round() as usize).clamp(1, size);
    let (top, left) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));

    let mut planes = [
        sample.lpl_image.clone(),
        sample.cgl_image.clone(),
        sample.cgl_mask.clone(),
    ];
    for (i, p) in planes.iter_mut().enumerate() {
        if hflip {
            *p = p.flip_horizontal();
        }
        if vflip {
            *p = p.flip_vertical();
        }
        if crop {
            let window = p.crop(top, top + side - 1, left, left + side - 1);
            *p = if i == 2 {
                resize_mask(&window, p.height)?
            } else {
                resize_image(&window, p.height)?
            };
        }
    }
    let [lpl_image, cgl_image, cgl_mask] = planes;
    Ok(RoiSample {
        lpl_image,
        cgl_image,
        cgl_mask,
        label: sample.label,
        patient_id: sample.patient_id.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path_image: String,
    pub path_mask: String,
    pub label: u8,
    pub patient_id: String,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Assignment of every patient to one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl PatientSplit {
    pub fn of(&self, patient: &str) -> Split {
        if self.train.contains(patient) {
            Split::Train
        } else {
            Split::Test
        }
    }
}

/// Shuffle the sorted distinct patient ids and give the first
/// `round(ratio * n)` (at least one, at most `n - 1`) to training.
pub fn split_patients<'a>(
    patients: impl IntoIterator<Item = &'a str>,
    ratio: f64,
    seed: u64,
) -> Result<PatientSplit> {
    let unique: BTreeSet<&str> = patients.into_iter().collect();
    let n = unique.len();
    if n < 2 {
        return Err(Error::InsufficientPatients(n));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    Ok(PatientSplit {
        train: ids[..n_train].iter().map(|s| s.to_string()).collect(),
        test: ids[n_train..].iter().map(|s| s.to_string()).collect(),
    })
}

pub fn split_by_patient(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    let split = split_patients(manifest.entries.iter().map(|e| e.patient_id.as_str()), ratio, seed)?;
    Ok(DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntry {
                split: Some(split.of(&e.patient_id)),
                ..e.clone()
            })
            .collect(),
    })
}

/// Records of each patient, in first-appearance order.
pub fn group_by_patient<T>(items: &[T], patient: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(patient(it).to_string()).or_default().push(i);
    }
    groups
}

/// Order-independent per-item seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
