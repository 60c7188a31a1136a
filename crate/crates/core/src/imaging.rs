//! Pixel-level helpers: content hashing, PNG codecs, resizing.

use std::io::Cursor;
use std::path::Path;

use image::{imageops, ImageBuffer, Luma, RgbImage};
use ndarray::Array2;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("unreadable image {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over dimensions and raw RGB bytes. Independent of PNG encoding.
pub fn image_hash(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(b"rgb8");
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

pub fn mask_hash(mask: &Array2<bool>) -> String {
    let mut h = Sha256::new();
    h.update(b"mask1");
    h.update((mask.ncols() as u32).to_le_bytes());
    h.update((mask.nrows() as u32).to_le_bytes());
    h.update(mask.iter().map(|&b| b as u8).collect::<Vec<_>>());
    hex::encode(h.finalize())
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

pub fn decode_image(bytes: &[u8], label: &str) -> Result<RgbImage, ImageIoError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| ImageIoError::Unreadable {
            path: label.to_string(),
            reason: e.to_string(),
        })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageIoError> {
    let bytes = std::fs::read(path).map_err(|e| ImageIoError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    decode_image(&bytes, &path.display().to_string())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_png(image)).map_err(|e| ImageIoError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// 1-bit grayscale PNG.
pub fn encode_mask_png(mask: &Array2<bool>) -> Vec<u8> {
    let (h, w) = mask.dim();
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().expect("valid PNG header");
        writer
            .write_image_data(&packed)
            .expect("in-memory PNG encoding cannot fail");
    }
    out
}

pub fn decode_mask_png(bytes: &[u8], label: &str) -> Result<Array2<bool>, ImageIoError> {
    let gray = image::load_from_memory(bytes)
        .map_err(|e| ImageIoError::Unreadable {
            path: label.to_string(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// 16-bit grayscale PNG of a map with values in [0, 1].
pub fn encode_depth_png(depth: &Array2<f64>) -> Vec<u8> {
    let (h, w) = depth.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = depth[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

/// Center-crops to the target aspect ratio, then resizes.
pub fn center_crop_resize(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    if (w, h) == (width, height) {
        return image.clone();
    }
    // Largest window with the target aspect ratio.
    let (crop_w, crop_h) = if (w as u64) * (height as u64) > (h as u64) * (width as u64) {
        (((h as u64 * width as u64) / height as u64) as u32, h)
    } else {
        (w, ((w as u64 * height as u64) / width as u64) as u32)
    };
    let x0 = (w - crop_w) / 2;
    let y0 = (h - crop_h) / 2;
    let cropped = imageops::crop_imm(image, x0, y0, crop_w, crop_h).to_image();
    imageops::resize(&cropped, width, height, imageops::FilterType::Triangle)
}

pub fn luminance(p: &image::Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}
