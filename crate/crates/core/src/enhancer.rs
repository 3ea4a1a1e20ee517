//! Skip-connected encoder/decoder enhancer with an attached segmenter.
//!
//! ```text
//! x ─ E0 ─ E1 ─ … ─ E(L-1)
//!     │    │          │
//!     D0 ─ D1 ─ … ─ D(L-1)      decoder, skip-connected to the encoder
//!     │    │          │
//!     S0 ─ S1 ─ … ─ S(L-1)      segmenter, lateral taps on every decoder level
//! ```
//!
//! The enhancement head predicts a correction in logit space on top of the
//! input, bounded by a sigmoid; the segmentation head is a per-pixel softmax.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_rng, silu, Conv, ParamStore};
use crate::tensor::{ImageTensor, MaskKind, MaskTensor};

/// Probability floor applied before taking logs in the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-7;
/// Input clamp used when mapping pixels into logit space.
const INPUT_LOGIT_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancerConfig {
    /// Number of resolution levels.
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
}

impl EnhancerConfig {
    pub fn paper_scale() -> Self {
        Self {
            depth: 5,
            base_channels: 64,
            num_classes: 2,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            depth: 2,
            base_channels: 16,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::param(format!("depth {} outside 1..=8", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::param("base_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Source,
    Adapted,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Source => "source",
            Stage::Adapted => "adapted",
        })
    }
}

/// Provenance carried alongside the parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
}

struct UpBlock {
    reduce: Conv,
    fuse: Conv,
}

impl UpBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(Self {
            reduce: Conv::new(ps, &format!("{name}.reduce"), cin, cout, 3, 1, rng)?,
            fuse: Conv::new(ps, &format!("{name}.fuse"), 2 * cout, cout, 3, 1, rng)?,
        })
    }

    /// Reduces `below` at its own resolution, upsamples 2x, and fuses with `lateral`.
    fn forward(&self, below: &Tensor, lateral: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = lateral.dims4()?;
        let up = silu(&self.reduce.forward(below)?)?.upsample_nearest2d(h, w)?;
        silu(&self.fuse.forward(&Tensor::cat(&[&up, lateral], 1)?)?)
    }
}

struct EncoderLevel {
    first: Conv,
    second: Conv,
}

pub struct EnhancerModel {
    config: EnhancerConfig,
    pub info: ModelInfo,
    params: ParamStore,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<UpBlock>,
    enhance_head: Conv,
    seg_bottom: Conv,
    segmenter: Vec<UpBlock>,
    seg_head: Conv,
}

impl std::fmt::Debug for EnhancerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnhancerModel")
            .field("config", &self.config)
            .field("info", &self.info)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

/// Enhanced image and predicted structure probabilities for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceOutput {
    pub enhanced: ImageTensor,
    pub mask_pred: MaskTensor,
}

/// Anything that maps a degraded image to an [`EnhanceOutput`].
pub trait Enhance {
    fn enhance_batch(&self, xs: &[ImageTensor]) -> Result<Vec<EnhanceOutput>>;

    fn enhance(&self, x: &ImageTensor) -> Result<EnhanceOutput> {
        Ok(self
            .enhance_batch(std::slice::from_ref(x))?
            .pop()
            .expect("one output per input"))
    }
}

impl EnhancerModel {
    pub fn new(config: EnhancerConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut ps = ParamStore::new(dtype, device);
        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let c = config.channels(level);
            let (cin, stride) = if level == 0 { (3, 1) } else { (config.channels(level - 1), 2) };
            encoder.push(EncoderLevel {
                first: Conv::new(&mut ps, &format!("enc{level}.a"), cin, c, 3, stride, &mut rng)?,
                second: Conv::new(&mut ps, &format!("enc{level}.b"), c, c, 3, 1, &mut rng)?,
            });
        }
        let mut decoder = Vec::new();
        let mut segmenter = Vec::new();
        for level in 0..config.depth - 1 {
            let (cin, cout) = (config.channels(level + 1), config.channels(level));
            decoder.push(UpBlock::new(&mut ps, &format!("dec{level}"), cin, cout, &mut rng)?);
            segmenter.push(UpBlock::new(&mut ps, &format!("seg{level}"), cin, cout, &mut rng)?);
        }
        let bottom = config.channels(config.depth - 1);
        let c0 = config.base_channels;
        let enhance_head = Conv::new(&mut ps, "enhance_head", c0, 3, 1, 1, &mut rng)?;
        let seg_bottom = Conv::new(&mut ps, "seg_bottom", bottom, bottom, 3, 1, &mut rng)?;
        let seg_head = Conv::new(&mut ps, "seg_head", c0, config.num_classes, 1, 1, &mut rng)?;
        Ok(Self {
            config,
            info: ModelInfo {
                stage: Stage::Source,
                seed,
                epoch: 0,
            },
            params: ps,
            encoder,
            decoder,
            enhance_head,
            seg_bottom,
            segmenter,
            seg_head,
        })
    }

    pub fn config(&self) -> &EnhancerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    /// Independent model with bitwise-equal parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        let copy = Self::new(self.config, self.info.seed, self.dtype(), self.device())?;
        copy.params.copy_from(&self.params)?;
        Ok(Self {
            info: self.info.clone(),
            ..copy
        })
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} must be a multiple of {m} in both dimensions for depth {}",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// `xs: N x 3 x H x W` in `[0, 1]` to `(enhanced N x 3 x H x W, probabilities N x C x H x W)`.
    pub fn forward_t(&self, xs: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = xs.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        self.check_input(h, w)?;
        let xs = xs.to_dtype(self.dtype())?;

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut feat = xs.clone();
        for level in &self.encoder {
            feat = silu(&level.first.forward(&feat)?)?;
            feat = silu(&level.second.forward(&feat)?)?;
            skips.push(feat.clone());
        }

        // Decoder levels, coarsest first.
        let mut dec = vec![skips[self.config.depth - 1].clone()];
        for level in (0..self.config.depth - 1).rev() {
            let below = dec.last().expect("non-empty");
            dec.push(self.decoder[level].forward(below, &skips[level])?);
        }
        let d0 = dec.last().expect("non-empty");

        let clamped = xs.clamp(INPUT_LOGIT_EPS, 1.0 - INPUT_LOGIT_EPS)?;
        let input_logit = (clamped.log()? - (clamped.affine(-1.0, 1.0)?).log()?)?;
        let enhanced = candle_nn::ops::sigmoid(&(self.enhance_head.forward(d0)? + input_logit)?)?;

        let mut seg = silu(&self.seg_bottom.forward(&dec[0])?)?;
        for (i, level) in (0..self.config.depth - 1).rev().enumerate() {
            seg = self.segmenter[level].forward(&seg, &dec[i + 1])?;
        }
        let probs = candle_nn::ops::softmax(&self.seg_head.forward(&seg)?, 1)?;
        Ok((enhanced, probs))
    }

    pub fn forward(&self, x: &ImageTensor) -> Result<EnhanceOutput> {
        self.enhance(x)
    }
}

impl Enhance for EnhancerModel {
    fn enhance_batch(&self, xs: &[ImageTensor]) -> Result<Vec<EnhanceOutput>> {
        let t = ImageTensor::stack(xs, self.dtype(), self.device())?;
        let (enh, probs) = self.forward_t(&t.detach())?;
        let images = ImageTensor::unstack(&enh)?;
        let masks = MaskTensor::unstack_probability(&probs)?;
        Ok(images
            .into_iter()
            .zip(masks)
            .map(|(enhanced, mask_pred)| EnhanceOutput {
                enhanced,
                mask_pred,
            })
            .collect())
    }
}

/// Mean absolute error over all elements.
pub fn l1_loss_t(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Pixel-mean of `-sum_c target_c * log(pred_c)` over `N x C x H x W` tensors.
pub fn cross_entropy_t(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    let (n, _, h, w) = pred.dims4()?;
    let logp = pred.clamp(LOG_CLAMP, 1.0)?.log()?;
    Ok(((target * logp)?.sum_all()? * (-1.0 / (n * h * w) as f64))?)
}

/// `l1 + weight * ce`.
pub fn weighted_sum_t(l1: &Tensor, ce: &Tensor, weight: f64) -> Result<Tensor> {
    if weight < 0.0 || !weight.is_finite() {
        return Err(Error::param(format!("loss weight {weight} must be finite and >= 0")));
    }
    if weight == 0.0 {
        return Ok(l1.clone());
    }
    Ok((l1 + (ce * weight)?)?)
}

/// Mean absolute difference between two images.
pub fn loss_enhance(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    pred.same_shape(target)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .sum::<f64>()
        / n)
}

/// Pixel-mean cross-entropy of a probability mask against one-hot ground truth.
pub fn loss_structure(pred: &MaskTensor, target: &MaskTensor) -> Result<f64> {
    pred.same_shape(target)?;
    if target.kind() != MaskKind::OneHot {
        return Err(Error::Contract("structure target must be one-hot".into()));
    }
    let c = pred.classes();
    let pixels = (pred.height() * pred.width()) as f64;
    let total: f64 = pred
        .data()
        .chunks_exact(c)
        .zip(target.data().chunks_exact(c))
        .map(|(p, t)| {
            -p.iter()
                .zip(t)
                .map(|(pv, tv)| f64::from(*tv) * f64::from(*pv).clamp(LOG_CLAMP, 1.0).ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / pixels)
}

/// `loss_enhance + lambda_s * loss_structure`.
pub fn loss_source(out: &EnhanceOutput, y: &ImageTensor, m: &MaskTensor, lambda_s: f64) -> Result<f64> {
    if lambda_s < 0.0 || !lambda_s.is_finite() {
        return Err(Error::param(format!("lambda_s {lambda_s} must be finite and >= 0")));
    }
    let l1 = loss_enhance(&out.enhanced, y)?;
    let ce = loss_structure(&out.mask_pred, m)?;
    Ok(combine(l1, ce, lambda_s))
}

pub(crate) fn combine(l1: f64, ce: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        l1
    } else {
        l1 + lambda * ce
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _, _| rng.random::<f32>()).unwrap()
    }

    fn tiny() -> EnhancerModel {
        EnhancerModel::new(
            EnhancerConfig {
                depth: 3,
                base_channels: 4,
                num_classes: 3,
            },
            7,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_activation_bounds() {
        let model = tiny();
        let x = random_image(1, 32, 48);
        let out = model.forward(&x).unwrap();
        assert_eq!(out.enhanced.dims(), (32, 48));
        assert_eq!(out.mask_pred.dims(), (32, 48));
        assert_eq!(out.mask_pred.classes(), 3);
        assert_eq!(out.mask_pred.kind(), MaskKind::Probability);
        assert!(out.enhanced.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for px in out.mask_pred.data().chunks_exact(3) {
            assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn indivisible_input_names_the_multiple() {
        let model = tiny();
        let x = random_image(1, 30, 32);
        let err = model.forward(&x).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
    }

    #[test]
    fn full_scale_preset_preserves_shape() {
        let model = EnhancerModel::new(
            EnhancerConfig {
                base_channels: 4,
                ..EnhancerConfig::paper_scale()
            },
            1,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        for s in [64, 128] {
            let out = model.forward(&random_image(2, s, s)).unwrap();
            assert_eq!(out.enhanced.dims(), (s, s));
        }
        assert!(model.forward(&random_image(2, 40, 40)).is_err());
    }

    #[test]
    fn same_seed_same_outputs_and_deep_copy_matches() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let x = random_image(3, 16, 16);
        let oa = a.forward(&x).unwrap();
        assert_eq!(oa.enhanced.digest(), b.forward(&x).unwrap().enhanced.digest());
        let c = a.deep_copy().unwrap();
        let oc = c.forward(&x).unwrap();
        assert_eq!(oa.enhanced.digest(), oc.enhanced.digest());
        assert_eq!(oa.mask_pred.digest(), oc.mask_pred.digest());
        // A copy is independent of its origin.
        c.params().ema_from(&EnhancerModel::new(*a.config(), 99, DType::F32, &Device::Cpu).unwrap().params, 0.0).unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn enhance_loss_known_values() {
        let a = random_image(4, 16, 16);
        assert_eq!(loss_enhance(&a, &a).unwrap(), 0.0);
        let zeros = ImageTensor::filled(16, 16, 0.0).unwrap();
        let ones = ImageTensor::filled(16, 16, 1.0).unwrap();
        assert_eq!(loss_enhance(&zeros, &ones).unwrap(), 1.0);
        // Half of the pixels differ by 0.4.
        let half = ImageTensor::from_fn(16, 16, |y, _, _| if y < 8 { 0.5 } else { 0.9 }).unwrap();
        let base = ImageTensor::filled(16, 16, 0.5).unwrap();
        let brute: f64 = half
            .data()
            .iter()
            .zip(base.data())
            .map(|(p, q)| (f64::from(*p) - f64::from(*q)).abs())
            .sum::<f64>()
            / half.data().len() as f64;
        let got = loss_enhance(&half, &base).unwrap();
        assert_eq!(got, brute);
        assert!((got - 0.2).abs() < 1e-6);
        assert!(loss_enhance(&a, &random_image(4, 16, 32)).is_err());
    }

    #[test]
    fn structure_loss_known_values() {
        let target = MaskTensor::from_labels(2, 2, 2, &[0, 1, 1, 0]).unwrap();
        let perfect = MaskTensor::probability(2, 2, 2, target.data().to_vec()).unwrap();
        assert!(loss_structure(&perfect, &target).unwrap() <= 1e-6);
        let uniform = MaskTensor::probability(2, 2, 2, vec![0.5; 8]).unwrap();
        assert!((loss_structure(&uniform, &target).unwrap() - 2f64.ln()).abs() < 1e-9);
        let quarter = MaskTensor::probability(
            2,
            2,
            2,
            target.data().iter().map(|v| if *v == 1.0 { 0.25 } else { 0.75 }).collect(),
        )
        .unwrap();
        assert!((loss_structure(&quarter, &target).unwrap() - 1.3863).abs() < 1e-4);
        assert!(matches!(loss_structure(&uniform, &uniform), Err(Error::Contract(_))));
    }

    #[test]
    fn source_loss_combination() {
        assert!((combine(0.2, 0.5, 0.3) - 0.35).abs() < 1e-12);
        assert_eq!(combine(0.2, 0.5, 0.0), 0.2);
        let model = tiny();
        let x = random_image(5, 16, 16);
        let out = model.forward(&x).unwrap();
        let m = MaskTensor::from_labels(16, 16, 3, &vec![1; 256]).unwrap();
        let l1 = loss_enhance(&out.enhanced, &x).unwrap();
        assert_eq!(loss_source(&out, &x, &m, 0.0).unwrap(), l1);
        assert!(loss_source(&out, &x, &m, -1.0).is_err());
        assert!(loss_source(&out, &x, &m, 0.3).unwrap() >= 0.0);
    }

    #[test]
    fn tensor_losses_agree_with_scalar_versions() {
        let model = tiny();
        let x = random_image(6, 16, 16);
        let y = random_image(7, 16, 16);
        let labels: Vec<u8> = (0..256).map(|i| (i % 3) as u8).collect();
        let m = MaskTensor::from_labels(16, 16, 3, &labels).unwrap();
        let out = model.forward(&x).unwrap();
        let (enh, probs) = model.forward_t(&x.to_tensor(DType::F32, &Device::Cpu).unwrap()).unwrap();
        let yt = y.to_tensor(DType::F32, &Device::Cpu).unwrap();
        let mt = MaskTensor::stack(&[m.clone()], DType::F32, &Device::Cpu).unwrap();
        let l1 = l1_loss_t(&enh, &yt).unwrap().to_scalar::<f32>().unwrap() as f64;
        let ce = cross_entropy_t(&probs, &mt).unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((l1 - loss_enhance(&out.enhanced, &y).unwrap()).abs() < 1e-5);
        assert!((ce - loss_structure(&out.mask_pred, &m).unwrap()).abs() < 1e-4);
    }
}
