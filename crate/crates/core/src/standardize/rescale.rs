use crate::error::{Error, Result};
use crate::standardize::image::ImageRgb;

/// `floor(v + 0.5)`, clamped to at least 1.
pub fn rescaled_extent(dim: usize, from_um: f64, to_um: f64) -> usize {
    ((dim as f64 * from_um / to_um + 0.5).floor() as usize).max(1)
}

/// Resamples `img` to `target_resolution_um` microns per pixel.
///
/// Bilinear interpolation on pixel centers; when an axis shrinks by a factor
/// `f > 1`, that axis is first smoothed with a Gaussian of sigma `(f - 1) / 2`.
pub fn rescale_image(img: &ImageRgb, target_resolution_um: f64) -> Result<ImageRgb> {
    if !(target_resolution_um > 0.0 && target_resolution_um.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target resolution must be positive, got {target_resolution_um}"
        )));
    }
    let out_w = rescaled_extent(img.width, img.resolution_um, target_resolution_um);
    let out_h = rescaled_extent(img.height, img.resolution_um, target_resolution_um);
    if out_w == img.width && out_h == img.height {
        let mut same = img.clone();
        same.resolution_um = target_resolution_um;
        return Ok(same);
    }
    let fx = img.width as f64 / out_w as f64;
    let fy = img.height as f64 / out_h as f64;

    let mut planes: [Vec<f64>; 3] = std::array::from_fn(|ch| {
        img.pixels.iter().map(|p| p[ch] as f64).collect()
    });
    let sigma_x = ((fx - 1.0) / 2.0).max(0.0);
    let sigma_y = ((fy - 1.0) / 2.0).max(0.0);
    for plane in planes.iter_mut() {
        if sigma_x > 0.0 {
            *plane = blur_rows(plane, img.width, img.height, sigma_x);
        }
        if sigma_y > 0.0 {
            *plane = blur_cols(plane, img.width, img.height, sigma_y);
        }
    }

    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_pos(x, fx, img.width)).collect();
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_pos(y, fy, img.height)).collect();
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let mut px = [0u8; 3];
            for (ch, plane) in planes.iter().enumerate() {
                let at = |x: usize, y: usize| plane[y * img.width + x];
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                px[ch] = to_u8(top * (1.0 - ty) + bottom * ty);
            }
            pixels.push(px);
        }
    }
    ImageRgb::new(out_w, out_h, pixels, target_resolution_um)
}

fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Source neighbours and weight for output index `o` at scale factor `f`.
fn sample_pos(o: usize, f: f64, extent: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * f - 0.5).clamp(0.0, (extent - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, src - i0 as f64)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5).floor() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn blur_rows(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * row[reflect_index(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    out
}

fn blur_cols(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * plane[reflect_index(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_dims() {
        assert_eq!(rescaled_extent(272, 1.0, 1.0), 272);
        assert_eq!(rescaled_extent(96, 0.972, 1.0), 93);
        assert_eq!(rescaled_extent(2048, 0.42, 1.0), 860);
        assert_eq!(rescaled_extent(1536, 0.42, 1.0), 645);
        assert_eq!(rescaled_extent(1, 0.1, 1.0), 1);
    }

    #[test]
    fn identity_scale_is_exact_copy() {
        let img = ImageRgb::from_fn(13, 7, 1.0, |x, y| [x as u8 * 9, y as u8 * 30, 77]).unwrap();
        let out = rescale_image(&img, 1.0).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageRgb::filled(96, 96, [200, 10, 130], 0.972).unwrap();
        let out = rescale_image(&img, 1.0).unwrap();
        assert_eq!((out.width, out.height), (93, 93));
        assert!(out.pixels.iter().all(|&p| p == [200, 10, 130]));
        let up = rescale_image(&ImageRgb::filled(10, 5, [9, 9, 9], 2.0).unwrap(), 1.0).unwrap();
        assert_eq!((up.width, up.height), (20, 10));
        assert!(up.pixels.iter().all(|&p| p == [9, 9, 9]));
    }

    #[test]
    fn downscale_suppresses_checkerboard_aliasing() {
        // A 1-pixel checkerboard has no low-frequency content; halving it
        // must give mid-gray rather than a copy of one phase.
        let img = ImageRgb::from_fn(64, 64, 0.5, |x, y| {
            if (x + y) % 2 == 0 { [255; 3] } else { [0; 3] }
        })
        .unwrap();
        let out = rescale_image(&img, 1.0).unwrap();
        assert_eq!((out.width, out.height), (32, 32));
        for p in &out.pixels {
            assert!((p[0] as i32 - 128).abs() <= 40, "{p:?}");
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]);
    }
}
