//! 8-bit RGB images: PNG files, tensor conversion and simple drawing.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use smgeo_core::Tensor;

use crate::error::{Error, Result};

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("cannot write PNG: {e}")))
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|d| d.to_rgb8())
        .map_err(|e| format!("invalid PNG: {e}"))
}

/// Appends the image as planar `[3, H, W]` values in `[0, 1]`.
pub fn push_chw(img: &RgbImage, out: &mut Vec<f64>) {
    for c in 0..3 {
        out.extend(img.pixels().map(|p| p.0[c] as f64 / 255.0));
    }
}

/// Stacks equally sized images into a `[B, 3, H, W]` tensor.
pub fn batch_tensor<'a>(imgs: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in imgs {
        let d = (img.height() as usize, img.width() as usize);
        if *dims.get_or_insert(d) != d {
            return Err(Error::Validation(format!("mixed image extents {:?} and {d:?} in one batch", dims.unwrap())));
        }
        push_chw(img, &mut data);
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::Validation("empty batch".into()))?;
    Ok(Tensor::new(&[n, 3, h, w], data)?)
}

pub fn blend(a: Rgb<u8>, b: Rgb<u8>, t: f64) -> Rgb<u8> {
    Rgb(std::array::from_fn(|c| (a.0[c] as f64 * (1.0 - t) + b.0[c] as f64 * t).round().clamp(0.0, 255.0) as u8))
}

/// Outline of the pixel-snapped rectangle `[x1, x2) × [y1, y2)`.
pub fn draw_rect(img: &mut RgbImage, rect: [f64; 4], color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let snap = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x1, y1, x2, y2) = (snap(rect[0], w), snap(rect[1], h), snap(rect[2] - 1.0, w), snap(rect[3] - 1.0, h));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, color);
        img.put_pixel(x as u32, y2 as u32, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, color);
        img.put_pixel(x2 as u32, y as u32, color);
    }
}

/// Small plus-shaped marker centered on pixel `(x, y)`.
pub fn draw_marker(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    for d in -2..=2i64 {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && py >= 0 && px < img.width() as i64 && py < img.height() as i64 {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}
