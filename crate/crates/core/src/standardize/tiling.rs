use crate::error::{Error, Result};
use crate::standardize::image::ImageRgb;
use crate::standardize::rescale::reflect_index;

/// Padding added on each side by [`reflection_wrap`]: `(left, right, top, bottom)`.
pub fn wrap_padding(width: usize, height: usize, min_w: usize, min_h: usize) -> (usize, usize, usize, usize) {
    let split = |have: usize, want: usize| {
        let total = want.saturating_sub(have);
        (total / 2, total - total / 2)
    };
    let (l, r) = split(width, min_w);
    let (t, b) = split(height, min_h);
    (l, r, t, b)
}

/// Mirror-pads each axis shorter than the minimum, edge pixel repeated.
/// The odd pixel of an uneven split goes to the right or bottom.
pub fn reflection_wrap(img: &ImageRgb, min_w: usize, min_h: usize) -> ImageRgb {
    if img.width >= min_w && img.height >= min_h {
        return img.clone();
    }
    let (l, r, t, b) = wrap_padding(img.width, img.height, min_w, min_h);
    let (w, h) = (img.width + l + r, img.height + t + b);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = reflect_index(y as isize - t as isize, img.height);
        for x in 0..w {
            let sx = reflect_index(x as isize - l as isize, img.width);
            pixels.push(img.at(sx, sy));
        }
    }
    ImageRgb {
        width: w,
        height: h,
        pixels,
        resolution_um: img.resolution_um,
    }
}

/// Stride for a patch size and overlap fraction, at least 1.
pub fn tile_stride(patch: usize, overlap_frac: f64) -> usize {
    ((patch as f64 * (1.0 - overlap_frac)).round() as usize).max(1)
}

/// Tile origins along one axis, ending with an edge-aligned origin.
pub fn axis_anchors(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut anchors = Vec::new();
    let mut pos = 0;
    while pos + patch <= dim {
        anchors.push(pos);
        pos += stride;
    }
    if dim >= patch && anchors.last() != Some(&(dim - patch)) {
        anchors.push(dim - patch);
    }
    anchors
}

pub fn validate_tiling(patch: usize, overlap_frac: f64) -> Result<()> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {overlap_frac}")));
    }
    Ok(())
}

/// Cuts `patch x patch` tiles in row-major order, each tagged with its origin.
pub fn extract_patches(img: &ImageRgb, patch: usize, overlap_frac: f64) -> Result<Vec<(usize, usize, ImageRgb)>> {
    validate_tiling(patch, overlap_frac)?;
    if img.width < patch || img.height < patch {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than patch {patch}; wrap it first",
            img.width, img.height
        )));
    }
    let stride = tile_stride(patch, overlap_frac);
    let xs = axis_anchors(img.width, patch, stride);
    let ys = axis_anchors(img.height, patch, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push((x, y, img.crop(x, y, patch, patch)?));
        }
    }
    Ok(out)
}
