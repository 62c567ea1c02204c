//! Dataset manifests.
//!
//! ```toml
//! classes = ["walk", "wave"]
//!
//! [[videos]]
//! id = "clip01"             # optional, defaults to the file stem
//! path = "videos/clip01.rgv" # relative to the manifest directory
//! labels = ["walk"]
//! split = "train"           # or "test"
//! format = "rgv"            # optional: "rgv" or "pgm"; inferred when absent
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::video::{load_video, GrayVideo, VideoFormat};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    Rgv,
    Pgm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub path: PathBuf,
    pub labels: Vec<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<FormatName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub videos: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A manifest entry with resolved id, path, format and class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub path: PathBuf,
    pub format: VideoFormat,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl VideoRecord {
    pub fn load(&self) -> Result<GrayVideo, Error> {
        Ok(load_video(&self.path, self.format)?)
    }

    /// First label, used as the single-label ground truth.
    pub fn primary_label(&self) -> usize {
        self.labels[0]
    }
}

impl DatasetManifest {
    pub fn from_toml(text: &str, root: &Path) -> Result<Self, Error> {
        let mut m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &root)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.classes.is_empty() {
            return bad("no classes declared".into());
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.is_empty() || c.contains(',') {
                return bad(format!("class name {c:?} must be nonempty and contain no comma"));
            }
            if !seen.insert(c) {
                return bad(format!("duplicate class {c:?}"));
            }
        }
        let mut ids = HashSet::new();
        for (i, v) in self.videos.iter().enumerate() {
            if v.labels.is_empty() {
                return bad(format!("video {i} ({}) has no labels", v.path.display()));
            }
            for l in &v.labels {
                if !seen.contains(l) {
                    return bad(format!("video {i} ({}) has undeclared label {l:?}", v.path.display()));
                }
            }
            let id = entry_id(v);
            if id.is_empty() || id.contains(',') {
                return bad(format!("video {i} id {id:?} must be nonempty and contain no comma"));
            }
            if !ids.insert(id.clone()) {
                return bad(format!("duplicate video id {id:?}"));
            }
        }
        for split in [Split::Train, Split::Test] {
            if !self.videos.iter().any(|v| v.split == split) {
                return bad(format!("{split:?} split is empty").to_lowercase());
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Resolved records in manifest order.
    pub fn records(&self) -> Vec<VideoRecord> {
        self.videos
            .iter()
            .map(|v| {
                let path = self.root.join(&v.path);
                let format = match v.format {
                    Some(FormatName::Rgv) => VideoFormat::Rgv,
                    Some(FormatName::Pgm) => VideoFormat::PgmSequence,
                    None if path.is_dir() => VideoFormat::PgmSequence,
                    None => VideoFormat::Rgv,
                };
                VideoRecord {
                    id: entry_id(v),
                    path,
                    format,
                    labels: v.labels.iter().filter_map(|l| self.class_index(l)).collect(),
                    split: v.split,
                }
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<VideoRecord> {
        self.records().into_iter().filter(|r| r.split == split).collect()
    }
}

fn entry_id(v: &ManifestEntry) -> String {
    match &v.id {
        Some(id) => id.clone(),
        None => v
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
classes = ["a", "b"]

[[videos]]
path = "v/one.rgv"
labels = ["a"]
split = "train"

[[videos]]
id = "two"
path = "v/frames"
labels = ["b", "a"]
split = "test"
format = "pgm"
"#;

    #[test]
    fn parses_and_resolves() {
        let m = DatasetManifest::from_toml(SAMPLE, Path::new("/data")).unwrap();
        let r = m.records();
        assert_eq!(r[0].id, "one");
        assert_eq!(r[0].path, Path::new("/data/v/one.rgv"));
        assert_eq!(r[0].format, VideoFormat::Rgv);
        assert_eq!(r[1].labels, vec![1, 0]);
        assert_eq!(r[1].format, VideoFormat::PgmSequence);
        assert_eq!(m.split(Split::Test).len(), 1);
    }

    #[test]
    fn round_trips() {
        let m = DatasetManifest::from_toml(SAMPLE, Path::new("/data")).unwrap();
        let back = DatasetManifest::from_toml(&m.to_toml(), Path::new("/data")).unwrap();
        assert_eq!(m, back);
    }

    fn reject(text: &str) -> String {
        match DatasetManifest::from_toml(text, Path::new(".")) {
            Err(Error::Manifest(m)) => m,
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_undeclared_label() {
        let t = SAMPLE.replace("labels = [\"a\"]", "labels = [\"c\"]");
        assert!(reject(&t).contains("undeclared label"));
    }

    #[test]
    fn rejects_empty_split() {
        let t = SAMPLE.replace("split = \"test\"", "split = \"train\"");
        assert!(reject(&t).contains("test split is empty"));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let t = SAMPLE.replace("id = \"two\"", "id = \"one\"");
        assert!(reject(&t).contains("duplicate video id"));
    }

    #[test]
    fn rejects_unknown_split() {
        let t = SAMPLE.replace("split = \"test\"", "split = \"val\"");
        reject(&t);
    }
}
