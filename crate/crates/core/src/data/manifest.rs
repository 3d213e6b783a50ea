use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub subject_id: usize,
    pub expression: usize,
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub classes: usize,
    pub class_counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>, classes: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut class_counts = vec![0; classes];
        for r in &records {
            if r.expression >= classes {
                return Err(input_err!("{}: expression {} outside [0, {classes})", r.path.display(), r.expression));
            }
            if !seen.insert(&r.path) {
                return Err(input_err!("duplicate path {}", r.path.display()));
            }
            class_counts[r.expression] += 1;
        }
        Ok(DatasetManifest { root: root.into(), records, classes, class_counts })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Distinct subject ids, ascending.
    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.records.iter().map(|r| r.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["path", "subject_id", "expression", "synthetic"]).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                &r.subject_id.to_string(),
                &r.expression.to_string(),
                if r.synthetic { "1" } else { "0" },
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Ingest { path: path.to_path_buf(), line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" => Some(false),
        "1" | "true" => Some(true),
        _ => None,
    }
}

/// Read a `path,subject_id,expression[,synthetic]` CSV. Image paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path, classes: usize) -> Result<DatasetManifest> {
    let ingest = |line: usize, message: String| Error::Ingest { path: path.to_path_buf(), line, message };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| ingest(0, format!("cannot open manifest: {e}")))?;
    let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[..3] != ["path", "subject_id", "expression"] {
        return Err(ingest(1, format!("expected header path,subject_id,expression, got {}", cols.join(","))));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_io(path, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() < 3 || row.len() > 4 {
            return Err(ingest(line, format!("expected 3 or 4 fields, got {}", row.len())));
        }
        let subject_id = row[1].parse().map_err(|_| ingest(line, format!("bad subject_id {:?}", &row[1])))?;
        let expression: usize = row[2].parse().map_err(|_| ingest(line, format!("bad expression {:?}", &row[2])))?;
        if expression >= classes {
            return Err(ingest(line, format!("expression {expression} outside [0, {classes})")));
        }
        let synthetic = match row.get(3) {
            None => false,
            Some(s) => parse_flag(s).ok_or_else(|| ingest(line, format!("bad synthetic flag {s:?}")))?,
        };
        if row[0].is_empty() {
            return Err(ingest(line, "empty path".into()));
        }
        let p = PathBuf::from(&row[0]);
        if !seen.insert(p.clone()) {
            return Err(ingest(line, format!("duplicate path {}", p.display())));
        }
        records.push(Record { path: p, subject_id, expression, synthetic });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(root, records, classes)
}
