//! Dataset manifests: a header line followed by one JSON record per line.
//!
//! ```text
//! {"name":"synthetic-7","seed":7}
//! {"id":"plate_00000","path":"images/plate_00000.png","label":"ABC1234","width_px":120,"height_px":50,"tags":["synthetic","single_line"]}
//! ```
//!
//! Image paths are relative to the directory holding the manifest.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use plate_core::PlateLabel;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PlateLabel>,
    pub width_px: u32,
    pub height_px: u32,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    /// Ground truth for images showing several plates, in no particular order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plates: Vec<PlateLabel>,
}

impl ImageRecord {
    /// All ground-truth plates of the image: `plates` if given, else `label`.
    pub fn truth_plates(&self) -> Vec<PlateLabel> {
        if self.plates.is_empty() {
            self.label.iter().cloned().collect()
        } else {
            self.plates.clone()
        }
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t.eq_ignore_ascii_case(tag))
    }

    fn validate(&self) -> Result<(), ManifestError> {
        let bad = |message: &str| ManifestError::InvalidRecord {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(bad("width_px and height_px must be >= 1"));
        }
        let p = Path::new(&self.path);
        if self.path.is_empty()
            || p.components()
                .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
        {
            return Err(bad("path must be relative to the manifest directory without `..`"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: Option<u64>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(ManifestError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Directory that record paths are relative to.
pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parse = |line: usize, message: String| ManifestError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(
                serde_json::from_str(&line)
                    .map_err(|e| parse(lineno, format!("header: {e}")))?,
            );
            continue;
        }
        let record: ImageRecord =
            serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        records.push(record);
    }
    let header = header.ok_or_else(|| parse(1, "missing header line".into()))?;
    let manifest = DatasetManifest {
        name: header.name,
        seed: header.seed,
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    manifest.validate()?;
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        name: manifest.name.clone(),
        seed: manifest.seed,
    };
    let to_io = |e: serde_json::Error| io(std::io::Error::other(e));
    serde_json::to_writer(&mut out, &header).map_err(to_io)?;
    out.write_all(b"\n").map_err(io)?;
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r).map_err(to_io)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use plate_core::normalize_label;

    fn record(id: &str) -> ImageRecord {
        ImageRecord {
            id: id.to_string(),
            path: format!("images/{id}.png"),
            label: Some(normalize_label("ABC1234")),
            width_px: 120,
            height_px: 50,
            tags: ["synthetic".to_string()].into(),
            plates: Vec::new(),
        }
    }

    #[test]
    fn round_trip_600() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut m = DatasetManifest::new("six-hundred");
        m.seed = Some(7);
        m.records = (0..600).map(|i| record(&format!("p{i}"))).collect();
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = DatasetManifest::new("empty");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = DatasetManifest::new("dup");
        m.records = vec![record("p1"), record("p1")];
        assert!(matches!(save_manifest(&m, &path), Err(ManifestError::DuplicateId(id)) if id == "p1"));
        std::fs::write(
            &path,
            format!(
                "{{\"name\":\"dup\"}}\n{}\n{}\n",
                serde_json::to_string(&record("p1")).unwrap(),
                serde_json::to_string(&record("p1")).unwrap()
            ),
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::DuplicateId(_))));
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"name\":\"x\"}\n{\"id\":\"a\",\"path\":\"a.png\",\"width_px\":\"wide\"}\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, ManifestError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn rejects_escaping_paths_and_zero_sizes() {
        let mut r = record("a");
        r.path = "../outside.png".into();
        assert!(r.validate().is_err());
        let mut r = record("a");
        r.path = "/abs.png".into();
        assert!(r.validate().is_err());
        let mut r = record("a");
        r.width_px = 0;
        assert!(r.validate().is_err());
    }
}
