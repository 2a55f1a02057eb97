use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Label, Modality};

/// One labeled, modality-tagged sample on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub modality: Modality,
    pub subset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<u32>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<String>,
        label: Label,
        modality: Modality,
        subset: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label,
            modality,
            subset: subset.into(),
            frame_index: None,
            frame_count: None,
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        if self.subset.is_empty() {
            return Err("subset must be non-empty".into());
        }
        if self.frame_count == Some(0) {
            return Err("frame_count must be positive".into());
        }
        if let (Some(i), Some(n)) = (self.frame_index, self.frame_count) {
            if i >= n {
                return Err(format!("frame_index {i} must be < frame_count {n}"));
            }
        }
        Ok(())
    }
}

/// Ordered, id-unique list of sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub source_path: String,
}

impl Manifest {
    /// Validates and wraps records built in memory.
    pub fn from_records(records: Vec<SampleRecord>, source_path: impl Into<String>) -> Result<Self, DataError> {
        let source_path = source_path.into();
        if records.is_empty() {
            return Err(DataError::EmptyManifest(PathBuf::from(&source_path)));
        }
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            r.check()
                .map_err(|message| DataError::InvalidRecord { line: i + 1, message })?;
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records, source_path })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Directory that relative record paths are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        Path::new(&self.source_path)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    /// Resolves a record's path relative to the manifest file's directory.
    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    /// First `n` records in manifest order.
    pub fn truncated(&self, n: usize) -> Manifest {
        Manifest {
            records: self.records.iter().take(n.max(1)).cloned().collect(),
            source_path: self.source_path.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads a JSON-Lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based physical lines.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest_str(&text, &path.to_string_lossy())
}

pub(crate) fn parse_manifest_str(text: &str, source_path: &str) -> Result<Manifest, DataError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| DataError::MalformedLine {
            line,
            message: e.to_string(),
        })?;
        if let Some(label) = value.get("label").and_then(|v| v.as_str()) {
            if Label::parse(label).is_none() {
                return Err(DataError::UnknownLabel {
                    line,
                    value: label.to_string(),
                });
            }
        }
        if let Some(m) = value.get("modality").and_then(|v| v.as_str()) {
            if Modality::parse(m).is_none() {
                return Err(DataError::UnknownModality {
                    line,
                    value: m.to_string(),
                });
            }
        }
        let record: SampleRecord = serde_json::from_value(value).map_err(|e| DataError::MalformedLine {
            line,
            message: e.to_string(),
        })?;
        record
            .check()
            .map_err(|message| DataError::InvalidRecord { line, message })?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId(record.id));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(DataError::EmptyManifest(PathBuf::from(source_path)));
    }
    Ok(Manifest {
        records,
        source_path: source_path.to_string(),
    })
}
