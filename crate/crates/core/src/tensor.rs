//! Pixel containers shared by every stage of the pipeline.
//!
//! Images are stored interleaved (`H x W x 3`, row-major) as `f32` in `[0, 1]`.
//! Masks are stored interleaved as `H x W x C` and are either exact one-hot
//! ground truth or per-pixel probability vectors.

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest side length accepted for images (the SSIM window is 11 px).
pub const MIN_IMAGE_SIDE: usize = 16;

/// Tolerance on probability-vector sums.
pub const PROB_SUM_TOL: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_image_dims(height, width)?;
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::shape(format!(
                "image buffer holds {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Contract(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * Self::CHANNELS])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    /// Copies one channel into a planar buffer.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(Self::CHANNELS)
            .copied()
            .collect()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the pixel bits; equal digests mean bitwise-equal images.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        to_hex(&h.finalize())
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::stack(std::slice::from_ref(self), dtype, device)
    }

    /// Stacks images of equal size into an `N x 3 x H x W` tensor.
    pub fn stack(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("image batch".into()))?;
        let (h, w) = first.dims();
        let mut planar: Vec<f32> = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            first.same_shape(img)?;
            for c in 0..Self::CHANNELS {
                planar.extend(img.data.iter().skip(c).step_by(Self::CHANNELS));
            }
        }
        let t = Tensor::from_vec(planar, (images.len(), Self::CHANNELS, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an `N x 3 x H x W` tensor back into images, clamping into `[0, 1]`.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = t.dims4()?;
        if c != Self::CHANNELS {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let planar = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        (0..n)
            .map(|i| {
                let base = i * c * plane;
                let mut data = vec![0f32; plane * c];
                for ch in 0..c {
                    for p in 0..plane {
                        data[p * c + ch] = planar[base + ch * plane + p];
                    }
                }
                ImageTensor::from_clamped(h, w, data)
            })
            .collect()
    }
}

fn check_image_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(Error::shape(format!(
            "image is {height}x{width}; both sides must be at least {MIN_IMAGE_SIDE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    OneHot,
    Probability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    classes: usize,
    kind: MaskKind,
    data: Vec<f32>,
}

impl MaskTensor {
    pub fn from_labels(height: usize, width: usize, classes: usize, labels: &[u8]) -> Result<Self> {
        check_mask_dims(height, width, classes)?;
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        let mut data = vec![0f32; height * width * classes];
        for (p, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::Contract(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            data[p * classes + l] = 1.0;
        }
        Ok(Self {
            height,
            width,
            classes,
            kind: MaskKind::OneHot,
            data,
        })
    }

    pub fn one_hot(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        check_mask_dims(height, width, classes)?;
        check_mask_len(height, width, classes, &data)?;
        for px in data.chunks_exact(classes) {
            let ones = px.iter().filter(|v| **v == 1.0).count();
            let zeros = px.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || zeros != classes - 1 {
                return Err(Error::Contract(format!(
                    "pixel {px:?} is not one-hot"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            kind: MaskKind::OneHot,
            data,
        })
    }

    pub fn probability(
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_mask_dims(height, width, classes)?;
        check_mask_len(height, width, classes, &data)?;
        for px in data.chunks_exact(classes) {
            let sum: f32 = px.iter().sum();
            if px.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Contract(format!(
                    "pixel {px:?} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            kind: MaskKind::Probability,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let p = (y * self.width + x) * self.classes;
        &self.data[p..p + self.classes]
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn labels(&self) -> Vec<u8> {
        self.data
            .chunks_exact(self.classes)
            .map(|px| {
                let mut best = 0;
                for (c, v) in px.iter().enumerate() {
                    if *v > px[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Argmax-discretized copy, always of kind `OneHot`.
    pub fn to_one_hot(&self) -> MaskTensor {
        if self.kind == MaskKind::OneHot {
            return self.clone();
        }
        MaskTensor::from_labels(self.height, self.width, self.classes, &self.labels())
            .expect("labels come from a valid mask")
    }

    /// Fraction of pixels whose argmax is `class`.
    pub fn class_fraction(&self, class: usize) -> f64 {
        let labels = self.labels();
        labels.iter().filter(|l| **l as usize == class).count() as f64 / labels.len() as f64
    }

    pub fn same_shape(&self, other: &MaskTensor) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::shape(format!(
                "class count {} vs {}",
                self.classes, other.classes
            )));
        }
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        to_hex(&h.finalize())
    }

    /// Stacks masks into an `N x C x H x W` tensor.
    pub fn stack(masks: &[MaskTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Empty("mask batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.classes);
        let mut planar: Vec<f32> = Vec::with_capacity(masks.len() * h * w * c);
        for m in masks {
            first.same_shape(m)?;
            for ch in 0..c {
                planar.extend(m.data.iter().skip(ch).step_by(c));
            }
        }
        let t = Tensor::from_vec(planar, (masks.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an `N x C x H x W` probability tensor into masks, renormalizing
    /// each pixel to absorb rounding from reduced-precision arithmetic.
    pub fn unstack_probability(t: &Tensor) -> Result<Vec<MaskTensor>> {
        let (n, c, h, w) = t.dims4()?;
        let planar = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        (0..n)
            .map(|i| {
                let base = i * c * plane;
                let mut data = vec![0f32; plane * c];
                for p in 0..plane {
                    let mut sum = 0f32;
                    for ch in 0..c {
                        let v = planar[base + ch * plane + p].max(0.0);
                        data[p * c + ch] = v;
                        sum += v;
                    }
                    if sum > 0.0 {
                        data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v /= sum);
                    } else {
                        data[p * c..(p + 1) * c].fill(1.0 / c as f32);
                    }
                }
                MaskTensor::probability(h, w, c, data)
            })
            .collect()
    }
}

fn check_mask_dims(height: usize, width: usize, classes: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::shape("mask must be non-empty"));
    }
    if classes < 2 {
        return Err(Error::shape(format!(
            "mask needs at least 2 classes, got {classes}"
        )));
    }
    Ok(())
}

fn check_mask_len(height: usize, width: usize, classes: usize, data: &[f32]) -> Result<()> {
    if data.len() != height * width * classes {
        return Err(Error::shape(format!(
            "mask buffer holds {} values, expected {height}x{width}x{classes}",
            data.len()
        )));
    }
    Ok(())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
