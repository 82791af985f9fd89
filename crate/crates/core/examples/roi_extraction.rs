//! Cut the two crops of each synthetic lesion and write them as PNGs.
//!
//! cargo run --example roi_extraction -- out/rois

use std::path::PathBuf;

use dualcorenet::roi::io::write_roi_sample;
use dualcorenet::roi::{extract_roi, split_patients, RoiConfig};
use dualcorenet::synthetic::{generate_dataset, SyntheticConfig};

fn main() -> dualcorenet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/rois".into()));
    std::fs::create_dir_all(&out).map_err(|e| dualcorenet::Error::io(&out, e))?;

    let records = generate_dataset(&SyntheticConfig::default(), 6, 1)?;
    let split = split_patients(records.iter().map(|r| r.patient_id.as_str()), 0.8, 1)?;
    let config = RoiConfig::default();
    for (i, record) in records.iter().enumerate() {
        let sample = extract_roi(record, &config)?;
        let fg = sample.cgl_mask.data.iter().filter(|&&v| v > 0.5).count();
        println!(
            "{} label {} split {:?}: crops {}x{}, foreground {:.1}%",
            record.patient_id,
            record.label,
            split.of(&record.patient_id),
            sample.cgl_image.height,
            sample.cgl_image.width,
            100.0 * fg as f64 / sample.cgl_mask.data.len() as f64
        );
        write_roi_sample(&out, &format!("roi_{i:04}"), &sample, split.of(&record.patient_id))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
