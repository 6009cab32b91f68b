//! Dataset index files: `path,label,patient_id`, paths relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Label;

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "patient_id"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Label,
    pub patient_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    /// Directory that relative row paths are resolved against.
    pub base: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Manifest {
        Manifest { base: base.into(), rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// `(uninfected, parasitized)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.rows.iter().filter(|r| r.label.is_positive()).count();
        (self.rows.len() - pos, pos)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base.join(&row.path)
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            base: self.base.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            let path = r.path.to_str().ok_or_else(|| Error::Format(format!("non-UTF-8 path {:?}", r.path)))?;
            w.write_record([path, r.label.token(), r.patient_id.as_str()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Parses manifest text. Line numbers in errors are 1-based file lines
/// (the header is line 1).
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Ingest {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.is_empty() || header.iter().next() == Some("") {
        return Err(Error::Ingest {
            line: 1,
            reason: "empty manifest".into(),
        });
    }
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Ingest {
            line: 1,
            reason: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Ingest { line, reason: e.to_string() })?;
        if rec.len() != 3 {
            return Err(Error::Ingest {
                line,
                reason: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let label = Label::parse(&rec[1]).ok_or_else(|| Error::Ingest {
            line,
            reason: format!("unknown label `{}`", &rec[1]),
        })?;
        if rec[0].is_empty() {
            return Err(Error::Ingest {
                line,
                reason: "empty path".into(),
            });
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(Error::Ingest {
                line,
                reason: format!("duplicate path `{}`", &rec[0]),
            });
        }
        let patient_id = if rec[2].is_empty() { "unknown".to_string() } else { rec[2].to_string() };
        rows.push(ManifestRow {
            path: PathBuf::from(&rec[0]),
            label,
            patient_id,
        });
    }
    if rows.is_empty() {
        return Err(Error::Ingest {
            line: 2,
            reason: "manifest has no rows".into(),
        });
    }
    Ok(Manifest::new(base, rows))
}

/// Reads a manifest and checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        line: 0,
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, &base)?;
    for (i, row) in m.rows.iter().enumerate() {
        if !m.resolve(row).is_file() {
            return Err(Error::Ingest {
                line: i + 2,
                reason: format!("image `{}` not found", row.path.display()),
            });
        }
    }
    let (neg, pos) = m.class_counts();
    log::info!("manifest {}: {} rows ({pos} parasitized, {neg} uninfected)", path.display(), m.len());
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(n: usize) -> String {
        let mut s = String::from("path,label,patient_id\n");
        for i in 0..n {
            let l = if i % 2 == 0 { "parasitized" } else { "uninfected" };
            s.push_str(&format!("cells/{i}.png,{l},P{}\n", i / 10));
        }
        s
    }

    #[test]
    fn nih_shaped() {
        let m = parse_manifest(&text(27_558), Path::new("")).unwrap();
        assert_eq!(m.len(), 27_558);
        assert_eq!(m.class_counts(), (13_779, 13_779));
        let again = parse_manifest(&m.to_csv().unwrap(), Path::new("")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn errors_cite_lines() {
        assert!(matches!(parse_manifest("", Path::new("")), Err(Error::Ingest { .. })));
        assert!(matches!(parse_manifest("path,label,patient_id\n", Path::new("")), Err(Error::Ingest { .. })));
        let bad = "path,label,patient_id\na.png,parasitized,P1\nb.png,infected,P1\n";
        match parse_manifest(bad, Path::new("")) {
            Err(Error::Ingest { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("infected"));
            }
            r => panic!("{r:?}"),
        }
        let dup = "path,label,patient_id\na.png,parasitized,P1\na.png,uninfected,P2\n";
        assert!(matches!(parse_manifest(dup, Path::new("")), Err(Error::Ingest { line: 3, .. })));
    }

    #[test]
    fn missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, "path,label,patient_id\nnope.png,uninfected,P1\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Ingest { line: 2, .. })));
        assert!(matches!(load_manifest(&dir.path().join("absent.csv")), Err(Error::Ingest { .. })));
    }
}
