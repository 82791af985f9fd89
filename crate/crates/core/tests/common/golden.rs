//! The checked-in raw ROI fixture and the hashes of its extraction.

use std::path::{Path, PathBuf};
use std::process::Command;

use dualcorenet::roi::io::{extract_dataset, read_roi_manifest};
use dualcorenet::roi::RoiConfig;
use sha2::{Digest, Sha256};

pub const BIN: &str = env!("CARGO_BIN_EXE_dualcorenet");
pub const ROI_SIZE: usize = 64;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/roi")
}

pub fn sha256(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `(hash, file)` pairs of a sha256sum listing.
pub fn listing(path: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (h, f) = l.split_once("  ").unwrap();
            (h.to_string(), f.to_string())
        })
        .collect()
}

pub fn run(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn extract_with_cli(out: &Path) {
    let manifest = fixtures().join("raw_manifest.csv");
    let size = ROI_SIZE.to_string();
    run(&[
        "roi-extract",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--size",
        &size,
        "--seed",
        "7",
    ]);
}

/// Every deviation from the golden extraction: changed inputs, files
/// whose hash differs in either of two CLI runs or a library run, and
/// masks holding values other than 0 and 255.
pub fn golden_mismatches(scratch: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    for (hash, file) in listing(&fixtures().join("inputs.sha256")) {
        if sha256(&fixtures().join(&file)) != hash {
            problems.push(format!("input {file} changed"));
        }
    }

    let (a, b, lib) = (scratch.join("cli_a"), scratch.join("cli_b"), scratch.join("lib"));
    extract_with_cli(&a);
    extract_with_cli(&b);
    let config = RoiConfig {
        size: ROI_SIZE,
        ..RoiConfig::default()
    };
    extract_dataset(&fixtures().join("raw_manifest.csv"), &lib, &config, 0.8, 7).unwrap();

    let expected = listing(&fixtures().join("expected_roi.sha256"));
    let mut written: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    let names: Vec<String> = expected.iter().map(|e| e.1.clone()).collect();
    if written != names {
        problems.push(format!("wrote {written:?}, expected {names:?}"));
    }
    for (hash, file) in &expected {
        for out in [&a, &b, &lib] {
            let path = out.join(file);
            if !path.exists() || &sha256(&path) != hash {
                problems.push(format!("{} differs", path.display()));
            }
        }
    }

    for e in read_roi_manifest(&a.join("manifest.csv")).unwrap() {
        let mask = image::open(a.join(&e.cgl_mask)).unwrap().to_luma8();
        if mask.dimensions() != (ROI_SIZE as u32, ROI_SIZE as u32) {
            problems.push(format!("{} is {:?}", e.cgl_mask, mask.dimensions()));
        }
        if !mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255) {
            problems.push(format!("{} is not binary", e.cgl_mask));
        }
        if !mask.pixels().any(|p| p.0[0] == 255) {
            problems.push(format!("{} is empty", e.cgl_mask));
        }
    }
    problems
}
