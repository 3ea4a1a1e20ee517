//! Supervised training of the source enhancer on synthesized pairs.

use std::time::Instant;

use candle_core::{Device, DType};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::SourceSample;
use crate::enhancer::{cross_entropy_t, l1_loss_t, weighted_sum_t, Enhance, EnhancerConfig, EnhancerModel, Stage};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, SampleMetrics};
use crate::tensor::{ImageTensor, MaskTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub scale_set: Vec<usize>,
    pub batch_size: usize,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_s: f64,
    pub hflip: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            crop_size: 256,
            scale_set: vec![286, 306, 326, 346],
            batch_size: 8,
            epochs_flat: 150,
            epochs_decay: 50,
            lr0: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            lambda_s: 0.3,
            hflip: true,
            seed: 0,
        }
    }

    /// 64 px crops with the same scale-to-crop ratios as the full protocol.
    pub fn desk_scale() -> Self {
        Self {
            crop_size: 64,
            scale_set: vec![72, 77, 82, 87],
            epochs_flat: 5,
            epochs_decay: 2,
            ..Self::paper_scale()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr0, self.epochs_flat, self.epochs_decay, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_set.is_empty() {
            return Err(Error::param("scale_set must not be empty"));
        }
        if self.scale_set.iter().any(|s| *s < self.crop_size) {
            return Err(Error::param(format!(
                "every scale in {:?} must be at least crop_size {}",
                self.scale_set, self.crop_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::param(format!("lr0 {} must be finite and >= 0", self.lr0)));
        }
        if self.lambda_s < 0.0 {
            return Err(Error::param("lambda_s must be >= 0"));
        }
        Ok(())
    }
}

/// Constant `lr0` for `epoch < flat`, then linear decay reaching 0 at `flat + decay`.
pub fn lr_schedule(lr0: f64, flat: usize, decay: usize, epoch: usize) -> f64 {
    if epoch < flat {
        return lr0;
    }
    if decay == 0 {
        return 0.0;
    }
    let remaining = (flat + decay).saturating_sub(epoch);
    lr0 * remaining as f64 / decay as f64
}

pub(crate) fn adam(model: &EnhancerModel, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Samples `(src_offset, weight)` for the bilinear taps of one output coordinate.
fn bilinear_taps(dst: usize, scale: f64, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

fn nearest_tap(dst: usize, scale: f64, len: usize) -> usize {
    (((dst as f64 + 0.5) * scale).floor() as usize).min(len - 1)
}

/// Geometry shared by all three members of a training triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointTransform {
    pub scale: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub crop: usize,
    pub flip: bool,
}

impl JointTransform {
    pub fn sample(config: &TrainConfig, rng: &mut impl Rng) -> Self {
        let scale = config.scale_set[rng.random_range(0..config.scale_set.len())];
        let slack = scale - config.crop_size;
        Self {
            scale,
            offset_y: rng.random_range(0..=slack),
            offset_x: rng.random_range(0..=slack),
            crop: config.crop_size,
            flip: config.hflip && rng.random::<bool>(),
        }
    }

    fn source_col(&self, j: usize) -> usize {
        let j = if self.flip { self.crop - 1 - j } else { j };
        j + self.offset_x
    }

    /// Bilinear resize to `scale x scale`, then crop and optional flip.
    pub fn apply_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (h, w) = img.dims();
        let sy = h as f64 / self.scale as f64;
        let sx = w as f64 / self.scale as f64;
        let mut out = Vec::with_capacity(self.crop * self.crop * 3);
        for i in 0..self.crop {
            let (y0, y1, fy) = bilinear_taps(i + self.offset_y, sy, h);
            for j in 0..self.crop {
                let (x0, x1, fx) = bilinear_taps(self.source_col(j), sx, w);
                for c in 0..3 {
                    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                    let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        ImageTensor::from_clamped(self.crop, self.crop, out)
    }

    /// Nearest-neighbour counterpart of [`Self::apply_image`].
    pub fn apply_mask(&self, m: &MaskTensor) -> Result<MaskTensor> {
        let (h, w) = m.dims();
        let labels = m.labels();
        let sy = h as f64 / self.scale as f64;
        let sx = w as f64 / self.scale as f64;
        let mut out = Vec::with_capacity(self.crop * self.crop);
        for i in 0..self.crop {
            let y = nearest_tap(i + self.offset_y, sy, h);
            for j in 0..self.crop {
                let x = nearest_tap(self.source_col(j), sx, w);
                out.push(labels[y * w + x]);
            }
        }
        MaskTensor::from_labels(self.crop, self.crop, m.classes(), &out)
    }
}

/// Random rescale + shared crop (+ optional flip) of a training triple.
pub fn augment(
    x: &ImageTensor,
    y: &ImageTensor,
    m: &MaskTensor,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ImageTensor, MaskTensor)> {
    let t = JointTransform::sample(config, rng);
    Ok((t.apply_image(x)?, t.apply_image(y)?, t.apply_mask(m)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub model: EnhancerModel,
    pub log: Vec<EpochRecord>,
}

/// Trains a freshly initialized enhancer on `samples`.
pub fn train_source(
    samples: &[SourceSample],
    model_config: EnhancerConfig,
    config: &TrainConfig,
    device: &Device,
) -> Result<TrainOutcome> {
    let model = EnhancerModel::new(model_config, config.seed, DType::F32, device)?;
    train_source_from(model, samples, config)
}

/// Runs the source-training loop on an already constructed model.
pub fn train_source_from(
    mut model: EnhancerModel,
    samples: &[SourceSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("no source samples to train on".into()))?;
    for (i, s) in samples.iter().enumerate() {
        if s.x.dims() != first.x.dims() || s.y.dims() != s.x.dims() || s.m.dims() != s.x.dims() {
            return Err(Error::shape(format!("sample {i} differs in size from sample 0")));
        }
        if s.m.classes() != model.config().num_classes {
            return Err(Error::shape(format!(
                "sample {i} has {} classes, model predicts {}",
                s.m.classes(),
                model.config().num_classes
            )));
        }
    }
    model.check_input(config.crop_size, config.crop_size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = adam(&model, config.lr0, config.beta1, config.beta2)?;
    let (dtype, device) = (model.dtype(), model.device().clone());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.total_epochs());
    let start = Instant::now();

    for epoch in 0..config.total_epochs() {
        let lr = config.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            let mut ms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let (x, y, m) = augment(&s.x, &s.y, &s.m, config, &mut rng)?;
                xs.push(x);
                ys.push(y);
                ms.push(m);
            }
            let xt = ImageTensor::stack(&xs, dtype, &device)?;
            let yt = ImageTensor::stack(&ys, dtype, &device)?;
            let mt = MaskTensor::stack(&ms, dtype, &device)?;
            let (enh, probs) = model.forward_t(&xt)?;
            let loss = weighted_sum_t(&l1_loss_t(&enh, &yt)?, &cross_entropy_t(&probs, &mt)?, config.lambda_s)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NumericFailure { epoch, batch });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            mean_loss: total / batches as f64,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!("source epoch {epoch}: lr {lr:.2e}, loss {:.5}", rec.mean_loss);
        log.push(rec);
        if !model.params().all_finite()? {
            return Err(Error::NumericFailure {
                epoch,
                batch: batches.saturating_sub(1),
            });
        }
    }
    model.info.stage = Stage::Source;
    model.info.epoch = config.total_epochs();
    Ok(TrainOutcome { model, log })
}

/// One evaluation item: input, clean reference, optional reference mask.
pub struct EvalItem<'a> {
    pub x: &'a ImageTensor,
    pub y: &'a ImageTensor,
    pub m: Option<&'a MaskTensor>,
}

/// Metrics of `model` over `items`, plus the per-sample rows.
pub fn evaluate<E: Enhance + ?Sized>(
    model: &E,
    items: &[EvalItem<'_>],
) -> Result<(MetricReport, Vec<SampleMetrics>)> {
    if items.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    const CHUNK: usize = 16;
    let mut rows = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let xs: Vec<ImageTensor> = chunk.iter().map(|it| it.x.clone()).collect();
        let outs = model.enhance_batch(&xs)?;
        for (it, out) in chunk.iter().zip(outs) {
            rows.push(SampleMetrics::compute(
                &out.enhanced,
                it.y,
                it.m.map(|m| (&out.mask_pred, m)),
            )?);
        }
    }
    Ok((MetricReport::from_samples(&rows)?, rows))
}

/// SSIM/PSNR of enhanced vs clean and DICE/IoU of predicted vs true masks.
pub fn evaluate_source<E: Enhance + ?Sized>(model: &E, heldout: &[SourceSample]) -> Result<MetricReport> {
    let items: Vec<EvalItem<'_>> = heldout
        .iter()
        .map(|s| EvalItem {
            x: &s.x,
            y: &s.y,
            m: Some(&s.m),
        })
        .collect();
    Ok(evaluate(model, &items)?.0)
}
