use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster with its physical pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<[u8; 3]>,
    /// Microns per pixel.
    pub resolution_um: f64,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>, resolution_um: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if !(resolution_um > 0.0 && resolution_um.is_finite()) {
            return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution_um}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            resolution_um,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3], resolution_um: f64) -> Result<Self> {
        Self::new(width, height, vec![color; width * height], resolution_um)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        resolution_um: f64,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels, resolution_um)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Copy of the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageRgb> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        ImageRgb::new(w, h, pixels, self.resolution_um)
    }

    pub fn load_png(path: &Path, resolution_um: f64) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let pixels = rgb.pixels().map(|p| p.0).collect();
        Self::new(w, h, pixels, resolution_um)
    }

    /// Non-interlaced 8-bit RGB PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(out.into_inner())
    }
}
