//! Manifest CSV: `id,label,path_0.5,path_1.0,path_2.0,path_4.0`.
//!
//! Paths are relative to the manifest's directory unless absolute; label
//! `-1` marks an unlabeled sample.

use std::fs::File;
use std::path::{Path, PathBuf};

use super::pgm::{read_pgm, Image};
use crate::error::{Error, Result, RowError};

pub const HEADER: [&str; 6] = ["id", "label", "path_0.5", "path_1.0", "path_2.0", "path_4.0"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Real,
    Synthetic,
}

/// One glitch: a view per duration, shortest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GlitchSample {
    pub id: String,
    pub views: Vec<Image>,
    pub label: Option<usize>,
    pub source: Source,
}

/// A manifest row before its images are read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: Option<usize>,
    pub paths: [PathBuf; 4],
}

fn parse_label(s: &str) -> std::result::Result<Option<usize>, String> {
    match s.trim().parse::<i64>() {
        Ok(-1) => Ok(None),
        Ok(v) if v >= 0 => Ok(Some(v as usize)),
        _ => Err(format!("bad label {s:?}")),
    }
}

/// Parses the manifest without touching the images.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                bad.push(RowError { line, msg: e.to_string() });
                continue;
            }
        };
        if i == 0 {
            if record.iter().ne(HEADER) {
                return Err(Error::format(path, format!("header must be {}", HEADER.join(","))));
            }
            continue;
        }
        if record.len() != 6 {
            bad.push(RowError { line, msg: format!("expected 6 fields, found {}", record.len()) });
            continue;
        }
        let label = match parse_label(&record[1]) {
            Ok(l) => l,
            Err(msg) => {
                bad.push(RowError { line, msg });
                continue;
            }
        };
        let resolve = |k: usize| {
            let p = Path::new(record[k].trim());
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        rows.push(ManifestRow { id: record[0].to_string(), label, paths: [resolve(2), resolve(3), resolve(4), resolve(5)] });
    }
    if bad.is_empty() { Ok(rows) } else { Err(Error::Rows { path: path.to_path_buf(), rows: bad }) }
}

/// Loads every sample in manifest order. Any bad row fails the whole load,
/// with every rejected row listed.
pub fn load_dataset(path: &Path) -> Result<Vec<GlitchSample>> {
    let rows = read_manifest(path)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut bad = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        let mut views = Vec::with_capacity(4);
        for p in &row.paths {
            match read_pgm(p) {
                Ok(img) => views.push(img),
                Err(e) => {
                    bad.push(RowError { line: i + 2, msg: format!("sample {}: {e}", row.id) });
                    break;
                }
            }
        }
        if views.len() == 4 {
            samples.push(GlitchSample { id: row.id, views, label: row.label, source: Source::Real });
        }
    }
    if bad.is_empty() { Ok(samples) } else { Err(Error::Rows { path: path.to_path_buf(), rows: bad }) }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(HEADER).map_err(fail)?;
    for row in rows {
        let label = row.label.map_or("-1".to_string(), |l| l.to_string());
        let rel: Vec<String> = row.paths.iter().map(|p| p.strip_prefix(base).unwrap_or(p).display().to_string()).collect();
        w.write_record([row.id.as_str(), label.as_str(), &rel[0], &rel[1], &rel[2], &rel[3]]).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
