//! Conversions between tensors and PNG images.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// `[3, H, W]` in `[-1, 1]` to an 8-bit image.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.size();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1] as u32, s[2] as u32);
    let bytes = ((image.to_kind(Kind::Float).clamp(-1.0, 1.0) + 1.0) * 127.5)
        .round()
        .to_kind(Kind::Uint8)
        .permute([1, 2, 0])
        .contiguous()
        .reshape([-1]);
    let data = Vec::<u8>::try_from(&bytes)?;
    Ok(RgbImage::from_raw(w, h, data).expect("buffer matches dimensions"))
}

/// `[H, W]` integer labels to a color-coded image.
pub fn labels_to_rgb(labels: &Tensor, palette: &[[u8; 3]]) -> Result<RgbImage> {
    let s = labels.size();
    if s.len() != 2 {
        return Err(Error::Shape(format!("labels must be [H, W], got {s:?}")));
    }
    let values = Vec::<i64>::try_from(labels.to_kind(Kind::Int64).contiguous().reshape([-1]))?;
    let (h, w) = (s[0] as u32, s[1] as u32);
    let mut img = RgbImage::new(w, h);
    for (pixel, &label) in img.pixels_mut().zip(&values) {
        let color = palette
            .get(label as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("label {label} has no palette entry")))?;
        *pixel = Rgb(*color);
    }
    Ok(img)
}

/// Tiles equally sized images row-major into a grid with `cols` columns.
pub fn image_grid(images: &[RgbImage], cols: usize) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to tile".into()))?;
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(Error::Shape("grid images must share one size".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut grid = RgbImage::new(w * cols as u32, h * rows as u32);
    for (i, img) in images.iter().enumerate() {
        let (x, y) = ((i % cols) as i64 * w as i64, (i / cols) as i64 * h as i64);
        image::imageops::replace(&mut grid, img, x, y);
    }
    Ok(grid)
}

pub fn png_bytes(image: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

pub fn png_base64(image: &RgbImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(png_bytes(image))
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
