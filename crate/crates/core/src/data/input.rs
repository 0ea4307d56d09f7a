//! Model input preparation: letterbox resize preserving aspect ratio with
//! gray padding, pixel scaling to [0, 1], and the matching box transform.

use super::DataError;
use crate::geometry::BBox;
use image::{imageops, Rgb, RgbImage};
use ndarray::Array3;

/// The affine map applied by a letterbox resize, sufficient to carry boxes
/// into model coordinates and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: u32,
    pub orig_h: u32,
    pub resolution: u32,
}

impl LetterboxTransform {
    pub fn new(orig_w: u32, orig_h: u32, resolution: u32) -> Self {
        let scale = resolution as f64 / orig_w.max(orig_h) as f64;
        let new_w = (orig_w as f64 * scale).round();
        let new_h = (orig_h as f64 * scale).round();
        LetterboxTransform {
            scale,
            pad_x: (resolution as f64 - new_w) / 2.0,
            pad_y: (resolution as f64 - new_h) / 2.0,
            orig_w,
            orig_h,
            resolution,
        }
    }

    /// Map a normalized box in original-image coordinates into normalized
    /// letterboxed coordinates.
    pub fn apply_box(&self, b: &BBox) -> BBox {
        let r = self.resolution as f64;
        BBox::new(
            (b.cx * self.orig_w as f64 * self.scale + self.pad_x) / r,
            (b.cy * self.orig_h as f64 * self.scale + self.pad_y) / r,
            (b.w * self.orig_w as f64 * self.scale / r).min(1.0),
            (b.h * self.orig_h as f64 * self.scale / r).min(1.0),
            b.class_id,
        )
    }

    /// Inverse of [`apply_box`], clamped back into the unit square.
    pub fn invert_box(&self, b: &BBox) -> BBox {
        let r = self.resolution as f64;
        BBox::new(
            ((b.cx * r - self.pad_x) / self.scale / self.orig_w as f64).clamp(0.0, 1.0),
            ((b.cy * r - self.pad_y) / self.scale / self.orig_h as f64).clamp(0.0, 1.0),
            (b.w * r / self.scale / self.orig_w as f64).min(1.0),
            (b.h * r / self.scale / self.orig_h as f64).min(1.0),
            b.class_id,
        )
    }
}

/// Convert an RGB image to a (3, H, W) array scaled to [0, 1].
pub fn to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

/// Letterbox an image to a square model input. The resolution must be
/// divisible by the backbone stride.
pub fn prepare_input(
    img: &RgbImage,
    resolution: u32,
    stride: usize,
) -> Result<(Array3<f64>, LetterboxTransform), DataError> {
    if resolution as usize % stride != 0 {
        return Err(DataError::Invalid(format!(
            "input resolution {resolution} not divisible by backbone stride {stride}"
        )));
    }
    let (w, h) = img.dimensions();
    let t = LetterboxTransform::new(w, h, resolution);
    let canvas = if w == h && w == resolution {
        img.clone()
    } else {
        let new_w = ((w as f64) * t.scale).round() as u32;
        let new_h = ((h as f64) * t.scale).round() as u32;
        let resized = imageops::resize(img, new_w.max(1), new_h.max(1), imageops::FilterType::Triangle);
        let mut canvas = RgbImage::from_pixel(resolution, resolution, Rgb([128, 128, 128]));
        imageops::overlay(&mut canvas, &resized, t.pad_x.round() as i64, t.pad_y.round() as i64);
        canvas
    };
    Ok((to_array(&canvas), t))
}
