//! Dataset manifests: one UTF-8 line per segment,
//! `<segment_id>\t<feature_path>[\t<posterior_path>]`. Paths are resolved
//! relative to the manifest's own directory, so a dataset directory can be
//! moved as a unit.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::calibration::RawPosteriors;
use crate::error::{Error, Result};
use crate::io::bytes::{read_text, write_text};
use crate::io::{feature, posterior};
use crate::model::SegmentFeatures;
use crate::reduce;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub segment_id: String,
    /// Path exactly as written in the file.
    pub feature: String,
    pub posterior: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    /// Directory the relative paths resolve against.
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.dir.join(&entry.feature)
    }

    pub fn posterior_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.posterior.as_ref().map(|p| self.dir.join(p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_features(&self) -> Result<Vec<SegmentFeatures>> {
        reduce::par_map(&self.entries, |e| {
            feature::read_features(&self.feature_path(e), &e.segment_id)
        })
    }

    /// Requires a posterior column for every segment.
    pub fn load_posteriors(&self) -> Result<Vec<RawPosteriors>> {
        reduce::par_map(&self.entries, |e| {
            let path = self.posterior_path(e).ok_or_else(|| {
                Error::Manifest(format!(
                    "segment {:?} has no posterior file listed",
                    e.segment_id
                ))
            })?;
            posterior::read_posteriors(&path, &e.segment_id)
        })
    }

    pub fn has_posteriors(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.posterior.is_some())
    }
}

fn validate_field(value: &str, what: &str, line: u64, path: &Path) -> Result<()> {
    if value.is_empty() {
        return Err(Error::format(path, line, format!("empty {what}")));
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = (lineno + 1) as u64;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::format(
                path,
                line_num,
                format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        validate_field(fields[0], "segment id", line_num, path)?;
        validate_field(fields[1], "feature path", line_num, path)?;
        if let Some(p) = fields.get(2) {
            validate_field(p, "posterior path", line_num, path)?;
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::format(
                path,
                line_num,
                format!("duplicate segment id {:?}", fields[0]),
            ));
        }
        entries.push(ManifestEntry {
            segment_id: fields[0].to_string(),
            feature: fields[1].to_string(),
            posterior: fields.get(2).map(|s| s.to_string()),
        });
    }
    let manifest = Manifest { dir, entries };
    for e in &manifest.entries {
        let f = manifest.feature_path(e);
        if !f.is_file() {
            return Err(Error::Manifest(format!(
                "segment {:?}: feature file {} does not exist",
                e.segment_id,
                f.display()
            )));
        }
        if let Some(p) = manifest.posterior_path(e) {
            if !p.is_file() {
                return Err(Error::Manifest(format!(
                    "segment {:?}: posterior file {} does not exist",
                    e.segment_id,
                    p.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Writes entries with the paths exactly as given (normally relative to the
/// manifest's directory).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    let mut seen = BTreeSet::new();
    for e in entries {
        for (v, what) in [(&e.segment_id, "segment id"), (&e.feature, "feature path")] {
            if v.is_empty() || v.contains(['\t', '\n', '\r']) {
                return Err(Error::Manifest(format!(
                    "{what} {v:?} is empty or contains separators"
                )));
            }
        }
        if let Some(p) = &e.posterior {
            if p.is_empty() || p.contains(['\t', '\n', '\r']) {
                return Err(Error::Manifest(format!(
                    "posterior path {p:?} is empty or contains separators"
                )));
            }
        }
        if !seen.insert(e.segment_id.clone()) {
            return Err(Error::Manifest(format!(
                "duplicate segment id {:?}",
                e.segment_id
            )));
        }
        out.push_str(&e.segment_id);
        out.push('\t');
        out.push_str(&e.feature);
        if let Some(p) = &e.posterior {
            out.push('\t');
            out.push_str(p);
        }
        out.push('\n');
    }
    write_text(path, &out)
}
