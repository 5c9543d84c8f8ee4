//! Pixel-level image plumbing: the pinned bilinear resampler, PNG round
//! trips, and a float image buffer used by the augmentation chain.
//!
//! The resampling convention is fixed once for the whole tool: half-pixel
//! centers without corner alignment, i.e. `src = (dst + 0.5) * scale - 0.5`,
//! clamped to the source rectangle. Golden trigger files and crop resizing
//! both rely on this single convention.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

/// Source coordinate for a destination index under the pinned convention.
#[inline]
fn src_coord(dst: usize, scale: f32) -> f32 {
    (dst as f32 + 0.5) * scale - 0.5
}

#[inline]
fn split_coord(v: f32, max_index: usize) -> (usize, usize, f32) {
    let v = v.clamp(0.0, max_index as f32);
    let lo = (v.floor() as usize).min(max_index);
    let hi = (lo + 1).min(max_index);
    (lo, hi, v - lo as f32)
}

/// Bilinear resize of an 8-bit RGB image. Interpolates in f32 and rounds to
/// nearest when converting back to 8-bit.
pub fn bilinear_resize_rgb8(src: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    assert!(out_w > 0 && out_h > 0, "zero-sized resize target");
    let (sw, sh) = (src.width() as usize, src.height() as usize);
    let scale_x = sw as f32 / out_w as f32;
    let scale_y = sh as f32 / out_h as f32;
    let data = src.as_raw();
    let mut out = vec![0u8; (out_w * out_h * 3) as usize];
    for oy in 0..out_h as usize {
        let (y0, y1, fy) = split_coord(src_coord(oy, scale_y), sh - 1);
        for ox in 0..out_w as usize {
            let (x0, x1, fx) = split_coord(src_coord(ox, scale_x), sw - 1);
            for c in 0..3 {
                let p00 = data[(y0 * sw + x0) * 3 + c] as f32;
                let p01 = data[(y0 * sw + x1) * 3 + c] as f32;
                let p10 = data[(y1 * sw + x0) * 3 + c] as f32;
                let p11 = data[(y1 * sw + x1) * 3 + c] as f32;
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                let v = top + (bot - top) * fy;
                out[(oy * out_w as usize + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(out_w, out_h, out).expect("buffer sized above")
}

/// Float RGB image in HWC layout with values nominally in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageF32 {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` values, row-major, channel innermost.
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn from_rgb8(src: &RgbImage) -> Self {
        ImageF32 {
            width: src.width() as usize,
            height: src.height() as usize,
            data: src.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ImageF32 {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }

    /// Crop `(x, y, w, h)` and bilinearly resize to `out_side` square.
    pub fn crop_resize(&self, x: usize, y: usize, w: usize, h: usize, out_side: usize) -> ImageF32 {
        assert!(w > 0 && h > 0 && x + w <= self.width && y + h <= self.height);
        let mut out = ImageF32::zeros(out_side, out_side);
        let scale_x = w as f32 / out_side as f32;
        let scale_y = h as f32 / out_side as f32;
        for oy in 0..out_side {
            let (y0, y1, fy) = split_coord(src_coord(oy, scale_y), h - 1);
            for ox in 0..out_side {
                let (x0, x1, fx) = split_coord(src_coord(ox, scale_x), w - 1);
                let mut px = [0.0f32; 3];
                for (c, slot) in px.iter_mut().enumerate() {
                    let p00 = self.data[((y + y0) * self.width + x + x0) * 3 + c];
                    let p01 = self.data[((y + y0) * self.width + x + x1) * 3 + c];
                    let p10 = self.data[((y + y1) * self.width + x + x0) * 3 + c];
                    let p11 = self.data[((y + y1) * self.width + x + x1) * 3 + c];
                    let top = p00 + (p01 - p00) * fx;
                    let bot = p10 + (p11 - p10) * fx;
                    *slot = top + (bot - top) * fy;
                }
                out.set_pixel(ox, oy, px);
            }
        }
        out
    }

    pub fn flip_horizontal(&mut self) {
        for y in 0..self.height {
            for x in 0..self.width / 2 {
                let a = self.pixel(x, y);
                let b = self.pixel(self.width - 1 - x, y);
                self.set_pixel(x, y, b);
                self.set_pixel(self.width - 1 - x, y, a);
            }
        }
    }
}

pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.into_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Image dimensions without decoding pixel data.
pub fn read_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(side: u32) -> RgbImage {
        RgbImage::from_fn(side, side, |x, y| {
            if (x + y) % 2 == 0 {
                image::Rgb([255, 0, 128])
            } else {
                image::Rgb([0, 255, 32])
            }
        })
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = checker(6);
        let out = bilinear_resize_rgb8(&img, 6, 6);
        assert_eq!(img.as_raw(), out.as_raw());
    }

    #[test]
    fn resize_of_constant_field_is_constant() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([87, 87, 87]));
        for side in [4u32, 7, 16, 50] {
            let out = bilinear_resize_rgb8(&img, side, side);
            assert!(out.pixels().all(|p| p.0 == [87, 87, 87]), "side {side}");
        }
    }

    #[test]
    fn crop_resize_identity_roundtrip() {
        let img = checker(8);
        let f = ImageF32::from_rgb8(&img);
        let out = f.crop_resize(0, 0, 8, 8, 8);
        for (a, b) in f.data.iter().zip(out.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = checker(5);
        let mut f = ImageF32::from_rgb8(&img);
        let orig = f.data.clone();
        f.flip_horizontal();
        f.flip_horizontal();
        assert_eq!(orig, f.data);
    }
}
