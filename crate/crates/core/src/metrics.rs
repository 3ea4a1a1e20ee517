//! Full-reference image fidelity (SSIM, PSNR) and mask overlap (DICE, IoU).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskTensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized images.
pub const DATA_RANGE: f64 = 1.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "valid" Gaussian filtering of a planar `h x w` buffer.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = win.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over channels and all valid 11x11 windows.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = a.dims();
    let win = gaussian_window();
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..ImageTensor::CHANNELS {
        let pa: Vec<f64> = a.channel(ch).into_iter().map(f64::from).collect();
        let pb: Vec<f64> = b.channel(ch).into_iter().map(f64::from).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&aa, h, w, &win);
        let e_bb = filter_valid(&bb, h, w, &win);
        let e_ab = filter_valid(&ab, h, w, &win);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; `f64::INFINITY` when
/// the images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_shape(b)?;
    let mse = mse(a, b);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
}

impl Overlap {
    pub fn mean_dice(&self) -> f64 {
        mean(&self.dice)
    }

    pub fn mean_iou(&self) -> f64 {
        mean(&self.iou)
    }
}

/// Per-class DICE and IoU after argmax discretization of both masks.
/// A class absent from both masks scores 1.0.
pub fn dice_iou(pred: &MaskTensor, reference: &MaskTensor) -> Result<Overlap> {
    pred.same_shape(reference)?;
    let classes = pred.classes();
    let mut inter = vec![0usize; classes];
    let mut p_count = vec![0usize; classes];
    let mut r_count = vec![0usize; classes];
    for (p, r) in pred.labels().into_iter().zip(reference.labels()) {
        p_count[p as usize] += 1;
        r_count[r as usize] += 1;
        if p == r {
            inter[p as usize] += 1;
        }
    }
    let mut dice = Vec::with_capacity(classes);
    let mut iou = Vec::with_capacity(classes);
    for c in 0..classes {
        let (i, p, r) = (inter[c] as f64, p_count[c] as f64, r_count[c] as f64);
        if p + r == 0.0 {
            dice.push(1.0);
            iou.push(1.0);
        } else {
            dice.push(2.0 * i / (p + r));
            iou.push(i / (p + r - i));
        }
    }
    Ok(Overlap { dice, iou })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Metrics for one (prediction, reference) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub ssim: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<Overlap>,
}

impl SampleMetrics {
    pub fn compute(
        enhanced: &ImageTensor,
        reference: &ImageTensor,
        masks: Option<(&MaskTensor, &MaskTensor)>,
    ) -> Result<Self> {
        Ok(Self {
            ssim: ssim(enhanced, reference)?,
            psnr: psnr(enhanced, reference)?,
            overlap: masks.map(|(p, r)| dice_iou(p, r)).transpose()?,
        })
    }
}

/// Aggregate of [`SampleMetrics`]; every field is the arithmetic mean of the
/// per-sample values. A single identical pair drives the PSNR mean to infinity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<ClassMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<ClassMeans>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

impl MetricReport {
    pub fn from_samples(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("metric report needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let ssim = samples.iter().map(|s| s.ssim).sum::<f64>() / n;
        let psnr = samples.iter().map(|s| s.psnr).sum::<f64>() / n;
        let overlaps: Option<Vec<&Overlap>> = samples.iter().map(|s| s.overlap.as_ref()).collect();
        let (dice, iou) = match overlaps {
            Some(ov) => {
                let classes = ov[0].dice.len();
                if ov.iter().any(|o| o.dice.len() != classes) {
                    return Err(Error::shape("samples disagree on class count"));
                }
                let per_class = |pick: fn(&Overlap) -> &Vec<f64>| -> ClassMeans {
                    let per_class: Vec<f64> = (0..classes)
                        .map(|c| ov.iter().map(|o| pick(o)[c]).sum::<f64>() / n)
                        .collect();
                    let mean = ov.iter().map(|o| mean(pick(o))).sum::<f64>() / n;
                    ClassMeans { per_class, mean }
                };
                (Some(per_class(|o| &o.dice)), Some(per_class(|o| &o.iou)))
            }
            None => (None, None),
        };
        Ok(Self {
            ssim,
            psnr,
            dice,
            iou,
            n_samples: samples.len(),
        })
    }

    pub fn mean_dice(&self) -> Option<f64> {
        self.dice.as_ref().map(|d| d.mean)
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.iou.as_ref().map(|d| d.mean)
    }
}

/// JSON has no infinity, so the identical-image PSNR is written as `"inf"`.
pub mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub const INFINITY_SENTINEL: &str = "inf";

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str(INFINITY_SENTINEL)
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == INFINITY_SENTINEL => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
        }
    }
}
