//! Listings of misclassified samples with copies of their images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::metrics::PredictionRecord;
use crate::harness::Manifest;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FalseCase {
    pub id: usize,
    pub path: PathBuf,
    pub probability: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FalseCaseReport {
    pub false_positives: Vec<FalseCase>,
    pub false_negatives: Vec<FalseCase>,
    /// Images that could not be copied.
    pub skipped: usize,
}

/// Splits misclassified records into false positives and false negatives.
/// `preds[i].id` indexes `manifest.rows`.
pub fn false_cases(preds: &[PredictionRecord], manifest: &Manifest) -> Result<FalseCaseReport> {
    let mut report = FalseCaseReport::default();
    for r in preds.iter().filter(|r| !r.is_correct()) {
        let row = manifest
            .rows
            .get(r.id)
            .ok_or_else(|| Error::Join(format!("sample {} is not in the manifest", r.id)))?;
        let case = FalseCase {
            id: r.id,
            path: row.path.clone(),
            probability: r.p,
        };
        if r.predicted.is_positive() {
            report.false_positives.push(case);
        } else {
            report.false_negatives.push(case);
        }
    }
    Ok(report)
}

fn write_listing(path: &Path, cases: &[FalseCase]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for c in cases {
        w.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
    }
    if cases.is_empty() {
        w.write_record(["id", "path", "probability"]).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `false_positives.csv` and `false_negatives.csv` under `out`, and
/// copies each image into `out/false_positive/` or `out/false_negative/`.
/// Images that cannot be copied are logged and counted in `skipped`.
pub fn false_case_report(preds: &[PredictionRecord], manifest: &Manifest, out: &Path) -> Result<FalseCaseReport> {
    let mut report = false_cases(preds, manifest)?;
    fs::create_dir_all(out)?;
    write_listing(&out.join("false_positives.csv"), &report.false_positives)?;
    write_listing(&out.join("false_negatives.csv"), &report.false_negatives)?;
    for (dir, cases) in [("false_positive", &report.false_positives), ("false_negative", &report.false_negatives)] {
        let target = out.join(dir);
        fs::create_dir_all(&target)?;
        for c in cases {
            let src = manifest.base.join(&c.path);
            let name = format!(
                "{:06}_{}",
                c.id,
                c.path.file_name().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned())
            );
            if let Err(e) = fs::copy(&src, target.join(name)) {
                log::warn!("could not copy {}: {e}", src.display());
                report.skipped += 1;
            }
        }
    }
    Ok(report)
}
