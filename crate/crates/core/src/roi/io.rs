//! PNG planes and CSV manifests.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use super::{
    extract_roi, split_by_patient, DatasetManifest, ManifestEntry, MammogramRecord, Plane, RoiConfig,
    RoiSample, Split,
};
use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Grayscale PNG scaled to `[0, 1]` by the bit depth's maximum.
pub fn read_gray_png(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    };
    Plane::new(h, w, data)
}

/// Any nonzero pixel is foreground.
pub fn read_mask_png(path: &Path) -> Result<Plane> {
    let mut p = read_gray_png(path)?;
    p.data.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
    Ok(p)
}

pub fn write_gray16_png(path: &Path, plane: &Plane) -> Result<()> {
    let raw: Vec<u16> = plane
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(plane.width as u32, plane.height as u32, raw)
            .ok_or_else(|| Error::shape("plane buffer size"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn write_gray8_png(path: &Path, plane: &Plane) -> Result<()> {
    let raw: Vec<u8> = plane
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(plane.width as u32, plane.height as u32, raw)
            .ok_or_else(|| Error::shape("plane buffer size"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Binary mask as 8-bit `{0, 255}`.
pub fn write_mask_png(path: &Path, mask: &Plane) -> Result<()> {
    let bin = Plane {
        data: mask.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
        ..mask.clone()
    };
    write_gray8_png(path, &bin)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::Reader::from_path(path)?;
    let entries = rdr.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
    Ok(DatasetManifest { entries })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in &manifest.entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load the raw records a manifest points to (paths relative to it).
pub fn load_records(manifest_path: &Path, manifest: &DatasetManifest) -> Result<Vec<MammogramRecord>> {
    let base = base_dir(manifest_path);
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(MammogramRecord {
                image: read_gray_png(&resolve(&base, &e.path_image))?,
                mask: read_mask_png(&resolve(&base, &e.path_mask))?,
                label: e.label,
                patient_id: e.patient_id.clone(),
            })
        })
        .collect()
}

/// One row of the manifest written by [`extract_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub sample_id: String,
    pub lpl_image: String,
    pub cgl_image: String,
    pub cgl_mask: String,
    pub label: u8,
    pub patient_id: String,
    pub split: Split,
}

pub const ROI_MANIFEST: &str = "manifest.csv";

pub fn read_roi_manifest(path: &Path) -> Result<Vec<RoiEntry>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<RoiEntry>, _>>()?)
}

/// Samples of an extracted ROI manifest with their split tags.
pub fn load_roi_dataset(path: &Path) -> Result<Vec<(RoiSample, Split)>> {
    let base = base_dir(path);
    read_roi_manifest(path)?
        .into_iter()
        .map(|e| {
            Ok((
                RoiSample {
                    lpl_image: read_gray_png(&resolve(&base, &e.lpl_image))?,
                    cgl_image: read_gray_png(&resolve(&base, &e.cgl_image))?,
                    cgl_mask: read_mask_png(&resolve(&base, &e.cgl_mask))?,
                    label: e.label,
                    patient_id: e.patient_id,
                },
                e.split,
            ))
        })
        .collect()
}

pub fn write_roi_sample(dir: &Path, id: &str, sample: &RoiSample, split: Split) -> Result<RoiEntry> {
    let entry = RoiEntry {
        sample_id: id.to_string(),
        lpl_image: format!("{id}_lpl.png"),
        cgl_image: format!("{id}_cgl.png"),
        cgl_mask: format!("{id}_mask.png"),
        label: sample.label,
        patient_id: sample.patient_id.clone(),
        split,
    };
    write_gray16_png(&dir.join(&entry.lpl_image), &sample.lpl_image)?;
    write_gray16_png(&dir.join(&entry.cgl_image), &sample.cgl_image)?;
    write_mask_png(&dir.join(&entry.cgl_mask), &sample.cgl_mask)?;
    Ok(entry)
}

pub fn write_roi_manifest(path: &Path, entries: &[RoiEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Extract every record of a raw manifest into `out_dir`, keeping a
/// split column if every entry has one and splitting by patient
/// otherwise. Returns the written manifest rows.
pub fn extract_dataset(
    manifest_path: &Path,
    out_dir: &Path,
    config: &RoiConfig,
    split_ratio: f64,
    seed: u64,
) -> Result<Vec<RoiEntry>> {
    let mut manifest = read_manifest(manifest_path)?;
    if manifest.entries.iter().any(|e| e.split.is_none()) {
        manifest = split_by_patient(&manifest, split_ratio, seed)?;
    }
    let records = load_records(manifest_path, &manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, (rec, e)) in records.iter().zip(&manifest.entries).enumerate() {
        let sample = extract_roi(rec, config)?;
        let id = format!("roi_{i:04}");
        entries.push(write_roi_sample(out_dir, &id, &sample, e.split.unwrap())?);
    }
    write_roi_manifest(&out_dir.join(ROI_MANIFEST), &entries)?;
    Ok(entries)
}
