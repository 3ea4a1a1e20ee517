//! PNG reading and writing for images (8-bit RGB) and masks (8-bit class index).

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskTensor};

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Quantizes to 8 bits with round-to-nearest.
pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::shape("image buffer size does not match its dimensions"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single-channel mask whose pixel values are class indices.
pub fn read_mask(path: &Path, classes: usize) -> Result<MaskTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let labels = img.into_raw();
    if let Some(bad) = labels.iter().find(|l| **l as usize >= classes) {
        return Err(Error::InvalidParam(format!(
            "{}: class index {bad} out of range for {classes} classes",
            path.display()
        )));
    }
    MaskTensor::from_labels(h as usize, w as usize, classes, &labels)
}

/// Writes the argmax labels of `mask`.
pub fn write_mask(path: &Path, mask: &MaskTensor) -> Result<()> {
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels())
        .ok_or_else(|| Error::shape("mask buffer size does not match its dimensions"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}
