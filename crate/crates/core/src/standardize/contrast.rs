use crate::standardize::image::ImageRgb;

pub const DEFAULT_LO_PCT: f64 = 5.0;
pub const DEFAULT_HI_PCT: f64 = 99.0;
pub const DEFAULT_SPAN_FRAC: f64 = 0.05;

pub fn luma(p: [u8; 3]) -> f64 {
    0.2125 * p[0] as f64 + 0.7154 * p[1] as f64 + 0.0721 * p[2] as f64
}

/// Linearly interpolated percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Fraction of the 0..255 range covered between the two luma percentiles.
pub fn luma_span(img: &ImageRgb, lo_pct: f64, hi_pct: f64) -> f64 {
    let mut ys: Vec<f64> = img.pixels.iter().map(|&p| luma(p)).collect();
    ys.sort_by(f64::total_cmp);
    (percentile_sorted(&ys, hi_pct) - percentile_sorted(&ys, lo_pct)) / 255.0
}

pub fn is_low_contrast(img: &ImageRgb, lo_pct: f64, hi_pct: f64, frac: f64) -> bool {
    luma_span(img, lo_pct, hi_pct) < frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> ImageRgb {
        ImageRgb::from_fn(w, h, 1.0, |x, y| [f(x, y); 3]).unwrap()
    }

    #[test]
    fn constant_is_filtered() {
        for v in [0, 128, 255] {
            assert!(is_low_contrast(&gray(16, 16, |_, _| v), 5.0, 99.0, 0.05));
        }
    }

    #[test]
    fn narrow_band_is_filtered() {
        let img = gray(11, 20, |x, _| 100 + x as u8);
        assert!(luma_span(&img, 5.0, 99.0) <= 10.0 / 255.0 + 1e-12);
        assert!(is_low_contrast(&img, 5.0, 99.0, 0.05));
    }

    #[test]
    fn ramp_is_kept() {
        let img = gray(256, 1, |x, _| x as u8);
        let span = luma_span(&img, 5.0, 99.0);
        assert!((span - (252.45 - 12.75) / 255.0).abs() < 1e-9, "{span}");
        assert!(!is_low_contrast(&img, 5.0, 99.0, 0.05));
    }

    #[test]
    fn percentile_matches_hand_values() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 100.0), 4.0);
        assert!((percentile_sorted(&v, 50.0) - 2.5).abs() < 1e-12);
        assert!((percentile_sorted(&v, 10.0) - 1.3).abs() < 1e-12);
    }
}
