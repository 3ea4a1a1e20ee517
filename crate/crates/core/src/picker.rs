//! Pseudo-label picker: an image quality assessor and an irregular-structure
//! detector, trained offline and frozen, combined with an AND gate.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive, FORMAT_VERSION};
use crate::enhancer::cross_entropy_t;
use crate::error::{Error, Result};
use crate::nn::{init_rng, silu, Conv, Linear, ParamStore};
use crate::tensor::{ImageTensor, MaskKind, MaskTensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MIN_ISD_MASKS: usize = 8;
pub const LATENT_DIM: usize = 64;

const IQA_WIDTHS: [usize; 3] = [8, 16, 32];
const ISD_WIDTHS: [usize; 3] = [8, 16, 32];

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::param(format!("threshold {t} must lie in (0, 1)")));
    }
    Ok(())
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: &Tensor) -> Result<Tensor> {
    Ok((z.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against constant `label`.
fn bce_logits_const(logits: &Tensor, label: bool) -> Result<Tensor> {
    let z = if label { logits.neg()? } else { logits.clone() };
    Ok(softplus(&z)?.mean_all()?)
}

/// Stride-2 convolution stack, global average pool and a linear logit.
struct Classifier {
    convs: Vec<Conv>,
    out: Linear,
}

impl Classifier {
    fn new(ps: &mut ParamStore, prefix: &str, cin: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(widths.len());
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv::new(ps, &format!("{prefix}.conv{i}"), c, w, 3, 2, rng)?);
            c = w;
        }
        let out = Linear::new(ps, &format!("{prefix}.out"), c, 1, rng)?;
        Ok(Self { convs, out })
    }

    /// `N x C x H x W -> N` logits.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = silu(&c.forward(&h)?)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.out.forward(&pooled)?.squeeze(1)?)
    }

    fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let p = candle_nn::ops::sigmoid(&self.logits(&x.detach())?)?;
        Ok(p.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for IqaConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

/// Binary image-quality classifier: score near 1 means high quality.
pub struct QualityAssessor {
    params: ParamStore,
    net: Classifier,
    pub threshold: f64,
}

impl QualityAssessor {
    pub fn new(seed: u64, threshold: f64, device: &Device) -> Result<Self> {
        check_threshold(threshold)?;
        let mut ps = ParamStore::new(DType::F32, device);
        let mut rng = init_rng(seed);
        let net = Classifier::new(&mut ps, "iqa", 3, &IQA_WIDTHS, &mut rng)?;
        Ok(Self {
            params: ps,
            net,
            threshold,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    pub fn score(&self, x: &ImageTensor) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(x))?[0])
    }

    /// Scores images; images of different sizes are scored one at a time.
    pub fn score_batch(&self, xs: &[ImageTensor]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        if xs.iter().all(|x| x.dims() == xs[0].dims()) {
            let t = ImageTensor::stack(xs, DType::F32, self.params.device())?;
            return self.net.scores(&t);
        }
        xs.iter().map(|x| self.score(x)).collect()
    }

    /// Fraction of samples whose thresholded score matches the label.
    pub fn accuracy(&self, labeled: &[(ImageTensor, bool)]) -> Result<f64> {
        if labeled.is_empty() {
            return Err(Error::Empty("no labeled samples".into()));
        }
        let xs: Vec<ImageTensor> = labeled.iter().map(|(x, _)| x.clone()).collect();
        let mut hits = 0usize;
        for chunk in xs.chunks(64).zip(labeled.chunks(64)) {
            for (s, (_, q)) in self.score_batch(chunk.0)?.into_iter().zip(chunk.1) {
                hits += usize::from((s >= self.threshold) == *q);
            }
        }
        Ok(hits as f64 / labeled.len() as f64)
    }
}

/// Trains the assessor with binary cross-entropy on `(image, is_high_quality)`.
pub fn train_iqa(labeled: &[(ImageTensor, bool)], cfg: &IqaConfig, device: &Device) -> Result<QualityAssessor> {
    let positives = labeled.iter().filter(|(_, q)| *q).count();
    if positives == 0 || positives == labeled.len() {
        return Err(Error::InvalidParam(format!(
            "quality labels must include both classes ({positives} of {} positive)",
            labeled.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size must be positive"));
    }
    let dims = labeled[0].0.dims();
    if labeled.iter().any(|(x, _)| x.dims() != dims) {
        return Err(Error::shape("quality training images must share one size"));
    }
    let model = QualityAssessor::new(cfg.seed, cfg.threshold, device)?;
    let mut opt = adam(model.params.vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<ImageTensor> = chunk.iter().map(|&i| labeled[i].0.clone()).collect();
            let q: Vec<f32> = chunk.iter().map(|&i| f32::from(u8::from(labeled[i].1))).collect();
            let x = ImageTensor::stack(&xs, DType::F32, device)?;
            let q = Tensor::from_vec(q, chunk.len(), device)?;
            let z = model.net.logits(&x)?;
            // softplus(z) - q z is the cross-entropy of sigmoid(z) against q.
            let loss = (softplus(&z)? - (&q * &z)?)?.mean_all()?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NumericFailure { epoch, batch });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        log::debug!("iqa epoch {epoch}: loss {:.4}", total / batches as f64);
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub adv_weight: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for IsdConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            kl_weight: 1.0,
            adv_weight: 0.1,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

/// Discriminator over one-hot masks: score near 1 means a plausible structure.
pub struct StructureDetector {
    params: ParamStore,
    net: Classifier,
    classes: usize,
    pub threshold: f64,
}

impl StructureDetector {
    pub fn new(classes: usize, seed: u64, threshold: f64, device: &Device) -> Result<Self> {
        check_threshold(threshold)?;
        if classes < 2 {
            return Err(Error::param("structure detector needs at least 2 classes"));
        }
        let mut ps = ParamStore::new(DType::F32, device);
        let mut rng = init_rng(seed);
        let net = Classifier::new(&mut ps, "isd", classes, &ISD_WIDTHS, &mut rng)?;
        Ok(Self {
            params: ps,
            net,
            classes,
            threshold,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    /// Scores the argmax-discretized version of `m`.
    pub fn score(&self, m: &MaskTensor) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(m))?[0])
    }

    pub fn score_batch(&self, ms: &[MaskTensor]) -> Result<Vec<f64>> {
        if ms.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(m) = ms.iter().find(|m| m.classes() != self.classes) {
            return Err(Error::shape(format!(
                "mask has {} classes, detector expects {}",
                m.classes(),
                self.classes
            )));
        }
        if ms.iter().all(|m| m.dims() == ms[0].dims()) {
            let hard: Vec<MaskTensor> = ms.iter().map(MaskTensor::to_one_hot).collect();
            let t = MaskTensor::stack(&hard, DType::F32, self.params.device())?;
            return self.net.scores(&t);
        }
        ms.iter().map(|m| self.score(m)).collect()
    }
}

/// Training-only convolutional VAE that generates masks from a latent code.
struct MaskVae {
    enc: [Conv; 2],
    mu: Linear,
    logvar: Linear,
    dec_in: Linear,
    dec: [Conv; 2],
    grid: (usize, usize),
}

const VAE_WIDTHS: [usize; 2] = [8, 16];

impl MaskVae {
    fn new(ps: &mut ParamStore, classes: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let grid = (h / 4, w / 4);
        let flat = VAE_WIDTHS[1] * grid.0 * grid.1;
        Ok(Self {
            enc: [
                Conv::new(ps, "vae.enc0", classes, VAE_WIDTHS[0], 3, 2, rng)?,
                Conv::new(ps, "vae.enc1", VAE_WIDTHS[0], VAE_WIDTHS[1], 3, 2, rng)?,
            ],
            mu: Linear::new(ps, "vae.mu", flat, LATENT_DIM, rng)?,
            logvar: Linear::new(ps, "vae.logvar", flat, LATENT_DIM, rng)?,
            dec_in: Linear::new(ps, "vae.dec_in", LATENT_DIM, flat, rng)?,
            dec: [
                Conv::new(ps, "vae.dec0", VAE_WIDTHS[1], VAE_WIDTHS[0], 3, 1, rng)?,
                Conv::new(ps, "vae.dec1", VAE_WIDTHS[0], classes, 3, 1, rng)?,
            ],
            grid,
        })
    }

    fn encode(&self, m: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = silu(&self.enc[0].forward(m)?)?;
        let h = silu(&self.enc[1].forward(&h)?)?.flatten_from(1)?;
        Ok((self.mu.forward(&h)?, self.logvar.forward(&h)?.clamp(-8.0, 8.0)?))
    }

    /// Latent codes to per-pixel class probabilities.
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dim(0)?;
        let (gh, gw) = self.grid;
        let h = silu(&self.dec_in.forward(z)?)?.reshape((n, VAE_WIDTHS[1], gh, gw))?;
        let h = h.upsample_nearest2d(gh * 2, gw * 2)?;
        let h = silu(&self.dec[0].forward(&h)?)?.upsample_nearest2d(gh * 4, gw * 4)?;
        Ok(candle_nn::ops::softmax(&self.dec[1].forward(&h)?, 1)?)
    }
}

fn normal_tensor(shape: (usize, usize), rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = (0..shape.0 * shape.1).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

/// One-hot of the per-pixel argmax, passing gradients straight through to `soft`.
fn straight_through_one_hot(soft: &Tensor) -> Result<Tensor> {
    let c = soft.dim(1)?;
    let idx = soft.argmax_keepdim(1)?;
    let classes = Tensor::arange(0u32, c as u32, soft.device())?.reshape((1, c, 1, 1))?;
    let hard = idx.broadcast_eq(&classes)?.to_dtype(soft.dtype())?;
    Ok(((hard + soft)? - soft.detach())?)
}

/// Adversarial training of a mask VAE against the detector; returns the
/// frozen detector and discards the VAE.
pub fn train_isd(masks: &[MaskTensor], cfg: &IsdConfig, device: &Device) -> Result<StructureDetector> {
    if masks.len() < MIN_ISD_MASKS {
        return Err(Error::InvalidParam(format!(
            "structure detector needs at least {MIN_ISD_MASKS} masks, got {}",
            masks.len()
        )));
    }
    if let Some(i) = masks.iter().position(|m| m.kind() != MaskKind::OneHot) {
        return Err(Error::Contract(format!("mask {i} is not a ground-truth one-hot mask")));
    }
    let (h, w) = masks[0].dims();
    let classes = masks[0].classes();
    if masks.iter().any(|m| m.dims() != (h, w) || m.classes() != classes) {
        return Err(Error::shape("structure training masks must share size and class count"));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("mask size {h}x{w} must be a multiple of 4")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size must be positive"));
    }

    let detector = StructureDetector::new(classes, cfg.seed, cfg.threshold, device)?;
    let mut vae_ps = ParamStore::new(DType::F32, device);
    let mut rng = init_rng(cfg.seed.wrapping_add(1));
    let vae = MaskVae::new(&mut vae_ps, classes, h, w, &mut rng)?;
    let mut d_opt = adam(detector.params.vars(), cfg.lr)?;
    let mut g_opt = adam(vae_ps.vars(), cfg.lr)?;
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let pixels = (h * w) as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut d_total, mut g_total, mut batches) = (0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n = chunk.len();
            let real: Vec<MaskTensor> = chunk.iter().map(|&i| masks[i].clone()).collect();
            let real = MaskTensor::stack(&real, DType::F32, device)?;

            // Generator: reconstruction + KL on real masks, adversarial term on prior samples.
            let (mu, logvar) = vae.encode(&real)?;
            let eps = normal_tensor((n, LATENT_DIM), &mut rng, device)?;
            let z = (&mu + ((&logvar * 0.5)?.exp()? * eps)?)?;
            let recon = vae.decode(&z)?;
            let rec_loss = cross_entropy_t(&recon, &real)?;
            let kl = ((mu.sqr()? + logvar.exp()? - &logvar)? - 1.0)?
                .sum(1)?
                .mean_all()?
                .affine(0.5 / pixels, 0.0)?;
            let prior = normal_tensor((n, LATENT_DIM), &mut rng, device)?;
            let fake = straight_through_one_hot(&vae.decode(&prior)?)?;
            let adv = bce_logits_const(&detector.net.logits(&fake)?, true)?;
            let g_loss = ((rec_loss + (kl * cfg.kl_weight)?)? + (adv * cfg.adv_weight)?)?;

            // Discriminator: -[log D(m) + log(1 - D(m_fake))].
            let d_loss = (bce_logits_const(&detector.net.logits(&real)?, true)?
                + bce_logits_const(&detector.net.logits(&fake.detach())?, false)?)?;

            let (gv, dv) = (g_loss.to_scalar::<f32>()? as f64, d_loss.to_scalar::<f32>()? as f64);
            if !gv.is_finite() || !dv.is_finite() {
                return Err(Error::NumericFailure { epoch, batch });
            }
            g_opt.backward_step(&g_loss)?;
            d_opt.backward_step(&d_loss)?;
            d_total += dv;
            g_total += gv;
            batches += 1;
        }
        log::debug!(
            "isd epoch {epoch}: d {:.4}, g {:.4}",
            d_total / batches as f64,
            g_total / batches as f64
        );
    }
    Ok(detector)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickVerdict {
    pub quality_score: f64,
    pub structure_score: f64,
    pub picked: bool,
}

impl PickVerdict {
    pub fn from_scores(quality_score: f64, structure_score: f64, quality_threshold: f64, structure_threshold: f64) -> Self {
        Self {
            quality_score,
            structure_score,
            picked: quality_score >= quality_threshold && structure_score >= structure_threshold,
        }
    }
}

pub fn pick(assessor: &QualityAssessor, detector: &StructureDetector, y: &ImageTensor, m: &MaskTensor) -> Result<PickVerdict> {
    Ok(PickVerdict::from_scores(
        assessor.score(y)?,
        detector.score(m)?,
        assessor.threshold,
        detector.threshold,
    ))
}

/// Decides which teacher outputs become pseudo-labels.
pub trait PseudoLabelPicker {
    fn verdicts(&self, ys: &[ImageTensor], ms: &[MaskTensor]) -> Result<Vec<PickVerdict>>;

    /// Fingerprint of the picker's parameters.
    fn digest(&self) -> Result<String>;
}

/// The frozen assessor/detector pair.
pub struct Picker {
    pub assessor: QualityAssessor,
    pub detector: StructureDetector,
}

impl PseudoLabelPicker for Picker {
    fn verdicts(&self, ys: &[ImageTensor], ms: &[MaskTensor]) -> Result<Vec<PickVerdict>> {
        if ys.len() != ms.len() {
            return Err(Error::shape(format!("{} images vs {} masks", ys.len(), ms.len())));
        }
        let q = self.assessor.score_batch(ys)?;
        let s = self.detector.score_batch(ms)?;
        Ok(q.into_iter()
            .zip(s)
            .map(|(q, s)| PickVerdict::from_scores(q, s, self.assessor.threshold, self.detector.threshold))
            .collect())
    }

    fn digest(&self) -> Result<String> {
        Ok(format!("{}:{}", self.assessor.digest()?, self.detector.digest()?))
    }
}

/// Admits every candidate.
pub struct AcceptAll;

impl PseudoLabelPicker for AcceptAll {
    fn verdicts(&self, ys: &[ImageTensor], _ms: &[MaskTensor]) -> Result<Vec<PickVerdict>> {
        Ok(vec![PickVerdict::from_scores(1.0, 1.0, DEFAULT_THRESHOLD, DEFAULT_THRESHOLD); ys.len()])
    }

    fn digest(&self) -> Result<String> {
        Ok("accept-all".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PickerMeta {
    format_version: u32,
    kind: String,
    quality_threshold: f64,
    structure_threshold: f64,
    classes: usize,
    iqa_widths: Vec<usize>,
    isd_widths: Vec<usize>,
}

const PICKER_KIND: &str = "picker";

impl Picker {
    /// Saves both networks and thresholds; the training-only VAE is never part of it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = self.assessor.params.tensors();
        tensors.extend(self.detector.params.tensors());
        let meta = PickerMeta {
            format_version: FORMAT_VERSION,
            kind: PICKER_KIND.into(),
            quality_threshold: self.assessor.threshold,
            structure_threshold: self.detector.threshold,
            classes: self.detector.classes,
            iqa_widths: IQA_WIDTHS.to_vec(),
            isd_widths: ISD_WIDTHS.to_vec(),
        };
        write_archive(path, &tensors, &meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta): (HashMap<String, Tensor>, PickerMeta) = read_archive(path, device)?;
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if meta.kind != PICKER_KIND || meta.format_version != FORMAT_VERSION {
            return Err(fail(format!(
                "expected picker format {FORMAT_VERSION}, found {} format {}",
                meta.kind, meta.format_version
            )));
        }
        if meta.iqa_widths != IQA_WIDTHS || meta.isd_widths != ISD_WIDTHS {
            return Err(fail("network widths do not match this build".into()));
        }
        let assessor = QualityAssessor::new(0, meta.quality_threshold, device).map_err(|e| fail(e.to_string()))?;
        let detector =
            StructureDetector::new(meta.classes, 0, meta.structure_threshold, device).map_err(|e| fail(e.to_string()))?;
        let (isd, iqa): (HashMap<String, Tensor>, HashMap<String, Tensor>) =
            tensors.into_iter().partition(|(k, _)| k.starts_with("isd."));
        assessor.params.load_tensors(&iqa).map_err(|e| fail(e.to_string()))?;
        detector.params.load_tensors(&isd).map_err(|e| fail(e.to_string()))?;
        Ok(Self { assessor, detector })
    }
}
