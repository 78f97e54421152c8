//! PNG and flat-binary file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{DisparityMap, ImageGrid, LabelMask};

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit image as RGB in `[0, 1]`. Grayscale files are expanded.
pub fn read_rgb(path: &Path) -> Result<ImageGrid> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageGrid::new(h as usize, w as usize, 3, data).map_err(|e| image_err(path, e))
}

/// Writes an RGB (or grayscale, expanded) image as 8-bit PNG.
pub fn write_rgb(path: &Path, img: &ImageGrid) -> Result<()> {
    let (h, w, c) = img.shape();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(quantize(img.get(y, x, ch.min(c - 1))));
            }
        }
    }
    let out = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

/// Reads a single-channel label image; every value must be a class index.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    if img.color().channel_count() != 1 {
        return Err(image_err(path, format!("mask must be single-channel, found {:?}", img.color())));
    }
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    LabelMask::new(h as usize, w as usize, img.into_raw()).map_err(|e| image_err(path, e))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.shape();
    let out = GrayImage::from_raw(w as u32, h as u32, mask.labels().to_vec()).expect("buffer size");
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

/// Writes a boolean mask as an 8-bit PNG (0 or 255).
pub fn write_binary_mask(path: &Path, h: usize, w: usize, valid: &[bool]) -> Result<()> {
    let buf = valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let out = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn read_binary_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|v| v >= 128).collect()))
}

/// Flat disparity file: `u32` height, `u32` width, then `f32` values in
/// row-major order, all little-endian.
pub fn write_disparity(path: &Path, d: &DisparityMap) -> Result<()> {
    let (h, w) = d.shape();
    let mut buf = Vec::with_capacity(8 + 4 * h * w);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in d.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Writes a colour visualisation of `d`: values are scaled by `d_max` and
/// mapped from dark blue (0) through green to yellow (`d_max`).
pub fn write_disparity_png(path: &Path, d: &DisparityMap, d_max: f64) -> Result<()> {
    let (h, w) = d.shape();
    let mut buf = Vec::with_capacity(3 * h * w);
    for &v in d.data() {
        let t = (v / d_max).clamp(0.0, 1.0);
        let rgb = [
            (255.0 * (1.5 * t - 0.5).clamp(0.0, 1.0)).round() as u8,
            (255.0 * (1.2 * t).min(1.0)).round() as u8,
            (255.0 * (0.5 - 0.5 * t)).round() as u8,
        ];
        buf.extend_from_slice(&rgb);
    }
    let out = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn read_disparity(path: &Path) -> Result<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(vec![format!("{}: {m}", path.display())]);
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 4 * h * w {
        return Err(bad(&format!("expected {} payload bytes for {h}x{w}, found {}", 4 * h * w, bytes.len() - 8)));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    DisparityMap::new(h, w, data)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Writes to a temporary sibling, syncs it and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
