//! Dataset manifests.
//!
//! One video per line, tab-separated: `video_id`, feature path relative to
//! the manifest, comma-separated class names (possibly empty). Lines
//! starting with `#` are comments, except the directives
//! `# classes: a,b,c`, `# split: train` and `# feature_dim: 2048`.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data_io::{read_features, FeatureSequence, VideoLabelSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
    pub split: Option<String>,
    pub feature_dim: Option<usize>,
    /// Directory feature paths are resolved against.
    pub base_dir: PathBuf,
}

/// A video with its features and video-level labels.
#[derive(Debug, Clone)]
pub struct LabeledVideo {
    pub seq: FeatureSequence,
    pub labels: VideoLabelSet,
}

/// Loaded dataset: features in memory, labels as class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<LabeledVideo>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.seq.d())
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let d = self.feature_dim();
        for v in &self.videos {
            if !ids.insert(v.seq.video_id.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate video id {}",
                    v.seq.video_id
                )));
            }
            if Some(v.seq.d()) != d {
                return Err(Error::shape(format!(
                    "video {} has feature dimension {}, dataset uses {}",
                    v.seq.video_id,
                    v.seq.d(),
                    d.unwrap_or(0)
                )));
            }
            if let Some(c) = v.labels.iter().find(|&c| c >= self.classes.len()) {
                return Err(Error::invalid(format!(
                    "video {} has label index {c} outside {} classes",
                    v.seq.video_id,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(split) = &self.split {
            let _ = writeln!(out, "# split: {split}");
        }
        let _ = writeln!(out, "# classes: {}", self.classes.join(","));
        if let Some(d) = self.feature_dim {
            let _ = writeln!(out, "# feature_dim: {d}");
        }
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                e.video_id,
                e.path.display(),
                e.labels.join(",")
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads every feature file and checks it against the manifest.
    pub fn load(&self) -> Result<Dataset> {
        let mut videos = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let path = self.resolve(e);
            let mut seq = read_features(&path)?;
            seq.video_id = e.video_id.clone();
            if let Some(d) = self.feature_dim {
                if seq.d() != d {
                    return Err(Error::shape(format!(
                        "{}: feature dimension {} does not match manifest dimension {d}",
                        path.display(),
                        seq.d()
                    )));
                }
            }
            let labels = e
                .labels
                .iter()
                .map(|l| self.class_index(l).expect("validated at parse time"))
                .collect();
            videos.push(LabeledVideo { seq, labels });
        }
        let ds = Dataset {
            classes: self.classes.clone(),
            videos,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut m = DatasetManifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ..Default::default()
    };
    let mut declared: Option<Vec<String>> = None;
    let mut ids = HashSet::new();
    let mut entry_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "classes" => declared = Some(split_names(value)),
                    "split" => m.split = Some(value.to_string()),
                    "feature_dim" => {
                        m.feature_dim = Some(value.parse().map_err(|_| {
                            err(lineno, format!("bad feature_dim {value:?}"))
                        })?)
                    }
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(err(
                lineno,
                format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let video_id = fields[0].trim().to_string();
        if video_id.is_empty() {
            return Err(err(lineno, "empty video id".into()));
        }
        if !ids.insert(video_id.clone()) {
            return Err(err(lineno, format!("duplicate video id {video_id}")));
        }
        let labels = fields.get(2).map(|s| split_names(s)).unwrap_or_default();
        entry_lines.push(lineno);
        m.entries.push(ManifestEntry {
            video_id,
            path: PathBuf::from(fields[1].trim()),
            labels,
        });
    }
    m.classes = match declared {
        Some(classes) => {
            for (e, &lineno) in m.entries.iter().zip(&entry_lines) {
                if let Some(bad) = e.labels.iter().find(|l| !classes.contains(l)) {
                    return Err(err(lineno, format!("label {bad:?} not in class vocabulary")));
                }
            }
            classes
        }
        None => m
            .entries
            .iter()
            .flat_map(|e| e.labels.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

fn split_names(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}
