use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{LabeledSet, Targets};
use crate::standardize::manifest::resolve_path;
use crate::standardize::{DatasetManifest, ImageRgb, LabelMode, Split};

/// A manifest with all three splits decoded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub manifest_path: PathBuf,
    pub label_mode: LabelMode,
    pub classes: Vec<String>,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let train = load_split(&manifest, dir, Split::Train)?;
        let val = load_split(&manifest, dir, Split::Val)?;
        let test = load_split(&manifest, dir, Split::Test)?;
        for (split, set) in [(Split::Val, &val), (Split::Test, &test)] {
            if !set.is_empty() && !train.is_empty() && set.dims != train.dims {
                return Err(Error::Data(format!(
                    "{}: {split} samples are {:?} but train samples are {:?}",
                    manifest.name, set.dims, train.dims
                )));
            }
        }
        Ok(Self {
            name: manifest.name.clone(),
            manifest_path: manifest_path.to_path_buf(),
            label_mode: manifest.label_mode,
            classes: manifest.classes,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &LabeledSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// `(height, width, channels)` of every sample.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.train.dims
    }

    /// Fails unless every split has at least one sample.
    pub fn require_splits(&self) -> Result<()> {
        for s in Split::ALL {
            if self.split(s).is_empty() {
                return Err(Error::Data(format!("dataset '{}' has an empty {s} split", self.name)));
            }
        }
        Ok(())
    }
}

/// Decodes one split into `[0, 1]` inputs, in manifest order.
pub fn load_split(manifest: &DatasetManifest, dir: &Path, split: Split) -> Result<LabeledSet> {
    let classes = manifest.classes.len();
    let mut ids = Vec::new();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dims = (0, 0, 3);
    for entry in manifest.entries(split) {
        let img = ImageRgb::load_png(&resolve_path(dir, &entry.path), manifest.pixel_resolution_um)?;
        if ids.is_empty() {
            dims = (img.height, img.width, 3);
        } else if (img.height, img.width) != (dims.0, dims.1) {
            return Err(Error::Data(format!(
                "{}: image is {}x{}, expected {}x{}",
                entry.path, img.width, img.height, dims.1, dims.0
            )));
        }
        inputs.extend(img.pixels.iter().flatten().map(|&v| v as f32 / 255.0));
        ids.push(entry.path.clone());
        match manifest.label_mode {
            LabelMode::Single => labels.push(entry.labels[0]),
            LabelMode::Multi => {
                let mut row = vec![0.0f32; classes];
                entry.labels.iter().for_each(|&l| row[l] = 1.0);
                values.extend(row);
            }
        }
    }
    let targets = match manifest.label_mode {
        LabelMode::Single => Targets::Single { classes, labels },
        LabelMode::Multi => Targets::Multi { classes, values },
    };
    Ok(LabeledSet {
        ids,
        dims,
        inputs,
        targets,
    })
}
