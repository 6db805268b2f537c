use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    #[serde(rename = "single-label", alias = "single")]
    Single,
    #[serde(rename = "multi-label", alias = "multi")]
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    /// Indices into `classes`.
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub pixel_resolution_um: f64,
    pub label_mode: LabelMode,
    pub classes: Vec<String>,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_resolution_um > 0.0 && self.pixel_resolution_um.is_finite()) {
            return Err(Error::Data(format!(
                "manifest '{}': pixel_resolution_um must be positive",
                self.name
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Data(format!("manifest '{}': no classes", self.name)));
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.path.as_str()) {
                return Err(Error::Data(format!("image '{}' listed more than once", img.path)));
            }
            match (self.label_mode, img.labels.len()) {
                (LabelMode::Single, 1) => {}
                (LabelMode::Single, n) => {
                    return Err(Error::Data(format!("image '{}': single-label needs 1 label, has {n}", img.path)))
                }
                (LabelMode::Multi, 0) => {
                    return Err(Error::Data(format!("image '{}': no labels", img.path)))
                }
                _ => {}
            }
            if let Some(&bad) = img.labels.iter().find(|&&l| l >= self.classes.len()) {
                return Err(Error::Data(format!(
                    "image '{}': label {bad} out of range for {} classes",
                    img.path,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = crate::io::read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn count(&self, split: Split) -> usize {
        self.images.iter().filter(|i| i.split == split).count()
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(move |i| i.split == split)
    }
}

/// Resolves an entry path against the directory holding its manifest.
pub fn resolve_path(manifest_dir: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub source_path: String,
    pub tile_x: usize,
    pub tile_y: usize,
    pub width: usize,
    pub height: usize,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_reason: Option<String>,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Output file relative to the patch manifest, for kept patches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub images_in: usize,
    pub patches_total: usize,
    pub patches_kept: usize,
    pub patches_filtered: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizeSummary {
    pub splits: BTreeMap<Split, SplitCounts>,
    pub errors: Vec<FileError>,
}

impl StandardizeSummary {
    pub fn totals(&self) -> SplitCounts {
        self.splits.values().fold(SplitCounts::default(), |a, c| SplitCounts {
            images_in: a.images_in + c.images_in,
            patches_total: a.patches_total + c.patches_total,
            patches_kept: a.patches_kept + c.patches_kept,
            patches_filtered: a.patches_filtered + c.patches_filtered,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const JSON: &str = r#"{
        "name": "tiny", "pixel_resolution_um": 0.42, "label_mode": "multi-label",
        "classes": ["a", "b"], "extra": 1,
        "images": [{"path": "x.png", "labels": [0, 1], "split": "train", "note": "ignored"}]
    }"#;

    #[test]
    fn parses_and_ignores_unknown_keys() {
        let m: DatasetManifest = serde_json::from_str(JSON).unwrap();
        m.validate().unwrap();
        assert_eq!(m.label_mode, LabelMode::Multi);
        assert_eq!(m.count(Split::Train), 1);
    }

    #[test]
    fn rejects_bad_labels() {
        let mut m: DatasetManifest = serde_json::from_str(JSON).unwrap();
        m.images[0].labels = vec![2];
        assert!(m.validate().is_err());
        m.images[0].labels = vec![];
        assert!(m.validate().is_err());
        m.label_mode = LabelMode::Single;
        m.images[0].labels = vec![0, 1];
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_image_in_two_splits() {
        let mut m: DatasetManifest = serde_json::from_str(JSON).unwrap();
        let mut dup = m.images[0].clone();
        dup.split = Split::Test;
        m.images.push(dup);
        assert!(m.validate().is_err());
    }
}
