use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::pool::parallel_map;
use crate::standardize::contrast::{is_low_contrast, DEFAULT_HI_PCT, DEFAULT_LO_PCT, DEFAULT_SPAN_FRAC};
use crate::standardize::image::ImageRgb;
use crate::standardize::manifest::{
    resolve_path, DatasetManifest, FileError, ImageEntry, PatchRecord, Split, SplitCounts, StandardizeSummary,
};
use crate::standardize::rescale::rescale_image;
use crate::standardize::tiling::{extract_patches, reflection_wrap, validate_tiling};

pub const DEFAULT_PATCH: usize = 272;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_TARGET_UM: f64 = 1.0;
pub const PATCH_MANIFEST_FILE: &str = "patch_manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOW_CONTRAST: &str = "low_contrast";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandardizeParams {
    pub target_resolution_um: f64,
    pub patch: usize,
    pub overlap_frac: f64,
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub frac: f64,
}

impl Default for StandardizeParams {
    fn default() -> Self {
        Self {
            target_resolution_um: DEFAULT_TARGET_UM,
            patch: DEFAULT_PATCH,
            overlap_frac: DEFAULT_OVERLAP,
            lo_pct: DEFAULT_LO_PCT,
            hi_pct: DEFAULT_HI_PCT,
            frac: DEFAULT_SPAN_FRAC,
        }
    }
}

impl StandardizeParams {
    pub fn validate(&self) -> Result<()> {
        validate_tiling(self.patch, self.overlap_frac)?;
        if !(self.target_resolution_um > 0.0 && self.target_resolution_um.is_finite()) {
            return Err(Error::InvalidArgument("target resolution must be positive".into()));
        }
        if !(0.0 <= self.lo_pct && self.lo_pct <= self.hi_pct && self.hi_pct <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "percentiles must satisfy 0 <= lo <= hi <= 100, got {} and {}",
                self.lo_pct, self.hi_pct
            )));
        }
        Ok(())
    }
}

/// Dataset manifest over the kept patches, plus every patch record.
/// Readable as a plain [`DatasetManifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    #[serde(flatten)]
    pub dataset: DatasetManifest,
    pub params: StandardizeParams,
    pub patches: Vec<PatchRecord>,
}

/// Patches cut from one image, before anything is written.
#[derive(Debug, Clone)]
pub struct ImagePatches {
    pub records: Vec<PatchRecord>,
    pub images: Vec<ImageRgb>,
}

fn stem_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

pub fn patch_file_name(stem: &str, tile_x: usize, tile_y: usize) -> String {
    format!("{stem}_x{tile_x}_y{tile_y}.png")
}

/// Rescale, wrap, tile and filter one in-memory image.
pub fn standardize_image(img: &ImageRgb, entry: &ImageEntry, params: &StandardizeParams) -> Result<ImagePatches> {
    let rescaled = rescale_image(img, params.target_resolution_um)?;
    let wrapped = reflection_wrap(&rescaled, params.patch, params.patch);
    let stem = stem_of(&entry.path);
    let mut out = ImagePatches {
        records: Vec::new(),
        images: Vec::new(),
    };
    for (x, y, tile) in extract_patches(&wrapped, params.patch, params.overlap_frac)? {
        let low = is_low_contrast(&tile, params.lo_pct, params.hi_pct, params.frac);
        out.records.push(PatchRecord {
            source_path: entry.path.clone(),
            tile_x: x,
            tile_y: y,
            width: tile.width,
            height: tile.height,
            kept: !low,
            filter_reason: low.then(|| LOW_CONTRAST.to_string()),
            labels: entry.labels.clone(),
            split: entry.split,
            file: (!low).then(|| format!("{}/{}", entry.split, patch_file_name(&stem, x, y))),
        });
        if !low {
            out.images.push(tile);
        }
    }
    Ok(out)
}

fn process_entry(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    entry: &ImageEntry,
    out_dir: &Path,
    params: &StandardizeParams,
) -> Result<Vec<PatchRecord>> {
    let src = resolve_path(manifest_dir, &entry.path);
    let img = ImageRgb::load_png(&src, manifest.pixel_resolution_um)?;
    let patches = standardize_image(&img, entry, params)?;
    let kept = patches.records.iter().filter(|r| r.kept);
    for (rec, tile) in kept.zip(&patches.images) {
        let rel = rec.file.as_ref().expect("kept patches carry a file name");
        write_atomic(&out_dir.join(rel), &tile.encode_png()?)?;
    }
    Ok(patches.records)
}

/// Runs the full pipeline over a manifest, writing patch PNGs, the patch
/// manifest and a summary under `out_dir`. Unreadable images are reported
/// in the summary and skipped.
pub fn standardize_dataset(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    out_dir: &Path,
    params: &StandardizeParams,
    workers: usize,
) -> Result<(PatchManifest, StandardizeSummary)> {
    manifest.validate()?;
    params.validate()?;
    let mut stems = HashSet::new();
    for e in &manifest.images {
        if !stems.insert((e.split, stem_of(&e.path))) {
            return Err(Error::Data(format!(
                "two {} images share the file stem '{}'",
                e.split,
                stem_of(&e.path)
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let results = parallel_map(manifest.images.len(), workers, |i| {
        process_entry(manifest, manifest_dir, &manifest.images[i], out_dir, params)
    });

    let mut summary = StandardizeSummary {
        splits: Split::ALL.iter().map(|&s| (s, SplitCounts::default())).collect::<BTreeMap<_, _>>(),
        errors: Vec::new(),
    };
    let mut patches = Vec::new();
    for (entry, result) in manifest.images.iter().zip(results) {
        let counts = summary.splits.get_mut(&entry.split).expect("all splits present");
        counts.images_in += 1;
        match result {
            Ok(records) => {
                for r in &records {
                    counts.patches_total += 1;
                    if r.kept {
                        counts.patches_kept += 1;
                    } else {
                        counts.patches_filtered += 1;
                    }
                }
                patches.extend(records);
            }
            Err(e) => summary.errors.push(FileError {
                path: entry.path.clone(),
                message: e.to_string(),
            }),
        }
    }

    let images = patches
        .iter()
        .filter_map(|r| {
            r.file.as_ref().map(|f| ImageEntry {
                path: f.clone(),
                labels: r.labels.clone(),
                split: r.split,
            })
        })
        .collect();
    let out = PatchManifest {
        dataset: DatasetManifest {
            name: manifest.name.clone(),
            pixel_resolution_um: params.target_resolution_um,
            label_mode: manifest.label_mode,
            classes: manifest.classes.clone(),
            images,
        },
        params: *params,
        patches,
    };
    write_json_atomic(&out_dir.join(PATCH_MANIFEST_FILE), &out)?;
    write_json_atomic(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok((out, summary))
}
