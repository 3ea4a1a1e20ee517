//! Low-quality image synthesis from clean references.
//!
//! A degradation is a fixed pipeline `blur -> illumination -> artifacts ->
//! haze -> speckle`, followed by a single clamp into `[0, 1]`. Each stage runs
//! only when its kind is listed in [`DegradationParams::modes`], and every
//! stage is the exact identity at zero strength.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationKind {
    Blur,
    Illumination,
    Artifact,
    CataractHaze,
    Speckle,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Blur,
        DegradationKind::Illumination,
        DegradationKind::Artifact,
        DegradationKind::CataractHaze,
        DegradationKind::Speckle,
    ];
}

/// Named groups of degradation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationFamily {
    /// Blur, uneven illumination and bright/dark artifacts.
    Interference,
    /// Blur under a bright veiling haze.
    Cataract,
}

impl DegradationFamily {
    pub fn kinds(self) -> Vec<DegradationKind> {
        match self {
            DegradationFamily::Interference => vec![
                DegradationKind::Blur,
                DegradationKind::Illumination,
                DegradationKind::Artifact,
            ],
            DegradationFamily::Cataract => {
                vec![DegradationKind::Blur, DegradationKind::CataractHaze]
            }
        }
    }

    pub fn default_ranges(self) -> ParamRanges {
        match self {
            DegradationFamily::Interference => ParamRanges {
                blur_sigma: (0.5, 2.0),
                illum_gain: (0.6, 1.3),
                illum_offset: (-0.15, 0.15),
                artifact_count: (1, 4),
                ..ParamRanges::zero()
            },
            DegradationFamily::Cataract => ParamRanges {
                blur_sigma: (1.0, 2.5),
                haze_alpha: (0.3, 0.55),
                haze_color: [(0.85, 1.0), (0.8, 0.95), (0.7, 0.9)],
                ..ParamRanges::zero()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub modes: Vec<DegradationKind>,
    pub blur_sigma: f32,
    pub illum_gain: f32,
    pub illum_offset: f32,
    pub artifact_count: u32,
    pub haze_alpha: f32,
    pub haze_color: [f32; 3],
    pub speckle_var: f32,
    pub rng_seed: u64,
}

impl DegradationParams {
    pub const MAX_BLUR_SIGMA: f32 = 16.0;
    pub const MAX_ARTIFACTS: u32 = 64;

    /// All stages enabled at zero strength.
    pub fn identity(rng_seed: u64) -> Self {
        Self {
            modes: DegradationKind::ALL.to_vec(),
            blur_sigma: 0.0,
            illum_gain: 1.0,
            illum_offset: 0.0,
            artifact_count: 0,
            haze_alpha: 0.0,
            haze_color: [1.0, 1.0, 1.0],
            speckle_var: 0.0,
            rng_seed,
        }
    }

    pub fn has(&self, kind: DegradationKind) -> bool {
        self.modes.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.blur_sigma,
            self.illum_gain,
            self.illum_offset,
            self.haze_alpha,
            self.speckle_var,
        ]
        .iter()
        .chain(&self.haze_color)
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("degradation parameters must be finite"));
        }
        if !(0.0..=Self::MAX_BLUR_SIGMA).contains(&self.blur_sigma) {
            return Err(Error::param(format!(
                "blur_sigma {} outside [0, {}]",
                self.blur_sigma,
                Self::MAX_BLUR_SIGMA
            )));
        }
        if self.illum_gain <= 0.0 {
            return Err(Error::param(format!("illum_gain {} must be > 0", self.illum_gain)));
        }
        if self.artifact_count > Self::MAX_ARTIFACTS {
            return Err(Error::param(format!(
                "artifact_count {} exceeds {}",
                self.artifact_count,
                Self::MAX_ARTIFACTS
            )));
        }
        if !(0.0..=1.0).contains(&self.haze_alpha) {
            return Err(Error::param(format!("haze_alpha {} outside [0, 1]", self.haze_alpha)));
        }
        if self.haze_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::param("haze_color components must lie in [0, 1]"));
        }
        if self.speckle_var < 0.0 {
            return Err(Error::param(format!("speckle_var {} must be >= 0", self.speckle_var)));
        }
        Ok(())
    }
}

/// Sampling intervals for [`DegradationParams`]; `(lo, hi)` is inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub blur_sigma: (f32, f32),
    pub illum_gain: (f32, f32),
    pub illum_offset: (f32, f32),
    pub artifact_count: (u32, u32),
    pub haze_alpha: (f32, f32),
    pub haze_color: [(f32, f32); 3],
    pub speckle_var: (f32, f32),
}

impl ParamRanges {
    /// Every range collapsed onto its identity value.
    pub fn zero() -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            illum_gain: (1.0, 1.0),
            illum_offset: (0.0, 0.0),
            artifact_count: (0, 0),
            haze_alpha: (0.0, 0.0),
            haze_color: [(1.0, 1.0); 3],
            speckle_var: (0.0, 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let spans = [
            self.blur_sigma,
            self.illum_gain,
            self.illum_offset,
            self.haze_alpha,
            self.speckle_var,
        ];
        if spans
            .iter()
            .chain(&self.haze_color)
            .any(|(lo, hi)| !(lo <= hi))
            || self.artifact_count.0 > self.artifact_count.1
        {
            return Err(Error::param("every range must satisfy lo <= hi"));
        }
        Ok(())
    }

    pub fn sample(&self, modes: &[DegradationKind], rng: &mut impl Rng) -> DegradationParams {
        fn draw(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
        DegradationParams {
            modes: modes.to_vec(),
            blur_sigma: draw(rng, self.blur_sigma),
            illum_gain: draw(rng, self.illum_gain),
            illum_offset: draw(rng, self.illum_offset),
            artifact_count: rng.random_range(self.artifact_count.0..=self.artifact_count.1),
            haze_alpha: draw(rng, self.haze_alpha),
            haze_color: [
                draw(rng, self.haze_color[0]),
                draw(rng, self.haze_color[1]),
                draw(rng, self.haze_color[2]),
            ],
            speckle_var: draw(rng, self.speckle_var),
            rng_seed: rng.random(),
        }
    }
}

/// Applies one degradation to a clean image.
pub fn degrade_one(y: &ImageTensor, params: &DegradationParams) -> Result<ImageTensor> {
    params.validate()?;
    let (h, w) = y.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut px = y.data().to_vec();

    if params.has(DegradationKind::Blur) && params.blur_sigma > 0.0 {
        px = gaussian_blur(&px, h, w, params.blur_sigma);
    }
    if params.has(DegradationKind::Illumination) {
        let (g, o) = (params.illum_gain, params.illum_offset);
        px.iter_mut().for_each(|v| *v = *v * g + o);
    }
    if params.has(DegradationKind::Artifact) {
        for _ in 0..params.artifact_count {
            paint_artifact(&mut px, h, w, &mut rng);
        }
    }
    if params.has(DegradationKind::CataractHaze) {
        let a = params.haze_alpha;
        for p in px.chunks_exact_mut(3) {
            for (v, c) in p.iter_mut().zip(params.haze_color) {
                *v = (1.0 - a) * *v + a * c;
            }
        }
    }
    if params.has(DegradationKind::Speckle) && params.speckle_var > 0.0 {
        let noise = Normal::new(0.0f32, params.speckle_var.sqrt())
            .map_err(|e| Error::param(e.to_string()))?;
        px.iter_mut().for_each(|v| *v *= 1.0 + noise.sample(&mut rng));
    }
    ImageTensor::from_clamped(h, w, px)
}

/// Soft-edged disc alpha-blended toward white or black.
fn paint_artifact(px: &mut [f32], h: usize, w: usize, rng: &mut impl Rng) {
    let side = h.min(w) as f32;
    let cy = rng.random_range(0.0..h as f32);
    let cx = rng.random_range(0.0..w as f32);
    let radius = rng.random_range(0.04..0.12) * side;
    let strength = rng.random_range(0.3f32..0.7);
    let tone = if rng.random::<bool>() { 1.0 } else { 0.0 };
    let inner = 0.5 * radius;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil() as usize).min(h);
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(w);
    for yy in y0..y1 {
        for xx in x0..x1 {
            let d = ((yy as f32 + 0.5 - cy).powi(2) + (xx as f32 + 0.5 - cx).powi(2)).sqrt();
            if d >= radius {
                continue;
            }
            let t = if d <= inner { 1.0 } else { (radius - d) / (radius - inner) };
            let a = strength * t * t * (3.0 - 2.0 * t);
            for v in &mut px[(yy * w + xx) * 3..(yy * w + xx) * 3 + 3] {
                *v = (1.0 - a) * *v + a * tone;
            }
        }
    }
}

pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of an interleaved RGB buffer with replicated borders.
pub(crate) fn gaussian_blur(px: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; px.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = clampi(x as isize + i as isize - r, w);
                    acc += kv * px[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; px.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = clampi(y as isize + i as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

/// A synthesized source-domain triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSample {
    /// Degraded input.
    pub x: ImageTensor,
    /// Clean reference.
    pub y: ImageTensor,
    /// Ground-truth structure mask.
    pub m: MaskTensor,
    pub params: DegradationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub modes: Vec<DegradationKind>,
    pub ranges: ParamRanges,
}

impl SynthConfig {
    pub fn family(family: DegradationFamily) -> Self {
        Self {
            modes: family.kinds(),
            ranges: family.default_ranges(),
        }
    }
}

/// Draws `per_image` degradations of every clean pair.
///
/// Sample `i` (row-major over `clean x per_image`) draws its parameters from a
/// generator seeded with `seed + i`, so any sample can be regenerated alone.
pub fn synthesize_dataset(
    clean: &[(ImageTensor, MaskTensor)],
    per_image: usize,
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<SourceSample>> {
    if clean.is_empty() {
        return Err(Error::Empty("no clean images to degrade".into()));
    }
    if per_image == 0 {
        return Err(Error::param("per_image must be at least 1"));
    }
    config.ranges.validate()?;
    let mut out = Vec::with_capacity(clean.len() * per_image);
    for (idx, (y, m)) in clean.iter().enumerate() {
        if y.dims() != m.dims() {
            return Err(Error::shape(format!("clean pair {idx}: image and mask sizes differ")));
        }
        for j in 0..per_image {
            let sample_index = (idx * per_image + j) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(sample_index));
            let params = config.ranges.sample(&config.modes, &mut rng);
            let x = degrade_one(y, &params)?;
            out.push(SourceSample {
                x,
                y: y.clone(),
                m: m.clone(),
                params,
            });
        }
    }
    Ok(out)
}
