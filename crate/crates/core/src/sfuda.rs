//! Source-free adaptation: a mean-teacher distillation loop on unlabeled
//! target images, with picker-gated pseudo-labels and perturbed student inputs.

use candle_core::DType;
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{cross_entropy_t, l1_loss_t, weighted_sum_t, Enhance, EnhancerModel, Stage};
use crate::error::{Error, Result};
use crate::metrics::ssim;
use crate::picker::{PickVerdict, PseudoLabelPicker};
use crate::tensor::{ImageTensor, MaskTensor};
use crate::train::{adam, lr_schedule};

/// Magnitudes of the photometric perturbation applied to student inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Additive brightness offset drawn from `[-d, d]`.
    pub brightness_delta: f32,
    /// Contrast factor drawn from `[1 - r, 1 + r]`.
    pub contrast_range: f32,
    /// Per-channel color offset drawn from `[-j, j]`.
    pub color_jitter: f32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 0.1,
            contrast_range: 0.1,
            color_jitter: 0.05,
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        Self {
            brightness_delta: 0.0,
            contrast_range: 0.0,
            color_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.brightness_delta, self.contrast_range, self.color_jitter];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.contrast_range >= 1.0 {
            return Err(Error::param(format!("invalid perturbation magnitudes {self:?}")));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> PerturbDraw {
        let mut sym = |m: f32| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        PerturbDraw {
            brightness: sym(self.brightness_delta),
            contrast: 1.0 + sym(self.contrast_range),
            color: [sym(self.color_jitter), sym(self.color_jitter), sym(self.color_jitter)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbDraw {
    pub brightness: f32,
    pub contrast: f32,
    pub color: [f32; 3],
}

impl PerturbDraw {
    /// `clamp(contrast * (x + color_c) + brightness)`.
    pub fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| self.contrast * (v + self.color[i % 3]) + self.brightness)
            .collect();
        ImageTensor::from_clamped(x.height(), x.width(), data)
    }
}

pub fn perturb(x: &ImageTensor, cfg: &PerturbConfig, rng: &mut impl Rng) -> Result<ImageTensor> {
    cfg.draw(rng).apply(x)
}

/// A target image whose teacher output the picker admitted.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyRecord {
    pub x_omega: ImageTensor,
    pub y_omega: ImageTensor,
    /// Teacher mask after argmax re-one-hotting.
    pub m_omega: MaskTensor,
    pub verdict: PickVerdict,
}

const INFERENCE_CHUNK: usize = 16;

/// Runs the teacher on every target and keeps the picked outputs.
pub fn build_proxy<E: Enhance + ?Sized, P: PseudoLabelPicker + ?Sized>(
    teacher: &E,
    picker: &P,
    targets: &[ImageTensor],
) -> Result<Vec<ProxyRecord>> {
    let mut proxy = Vec::new();
    for chunk in targets.chunks(INFERENCE_CHUNK) {
        let outs = teacher.enhance_batch(chunk)?;
        let (ys, ms): (Vec<ImageTensor>, Vec<MaskTensor>) =
            outs.into_iter().map(|o| (o.enhanced, o.mask_pred)).unzip();
        let verdicts = picker.verdicts(&ys, &ms)?;
        for (((x, y), m), verdict) in chunk.iter().zip(ys).zip(ms).zip(verdicts) {
            if verdict.picked {
                proxy.push(ProxyRecord {
                    x_omega: x.clone(),
                    y_omega: y,
                    m_omega: m.to_one_hot(),
                    verdict,
                });
            }
        }
    }
    Ok(proxy)
}

/// `teacher <- decay * teacher + (1 - decay) * student` for every parameter.
pub fn ema_update(teacher: &EnhancerModel, student: &EnhancerModel, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::param(format!("EMA decay {decay} must lie in [0, 1]")));
    }
    teacher.params().ema_from(student.params(), decay)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Share of the epoch budget over which the learning rate decays linearly to 0.
    pub decay_fraction: f64,
    pub ema_decay: f64,
    pub lambda_ce: f64,
    pub perturb: PerturbConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            decay_fraction: 0.25,
            ema_decay: 0.999,
            lambda_ce: 0.3,
            perturb: PerturbConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn decay_epochs(&self) -> usize {
        (self.epochs as f64 * self.decay_fraction).round() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay = self.decay_epochs();
        lr_schedule(self.lr, self.epochs - decay, decay, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::param("decay_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::param(format!("EMA decay {} must lie in [0, 1]", self.ema_decay)));
        }
        if self.lambda_ce < 0.0 {
            return Err(Error::param("lambda_ce must be >= 0"));
        }
        self.perturb.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub epoch: usize,
    pub proxy_size: usize,
    pub mean_student_loss: f64,
    pub lr: f64,
}

/// State visible to an observer after each student step and its EMA update.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub student: &'a EnhancerModel,
    pub teacher: &'a EnhancerModel,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    /// The EMA teacher, tagged as adapted.
    pub model: EnhancerModel,
    pub log: Vec<AdaptRecord>,
}

/// Adapts `source` to `targets` without any source-domain data.
pub fn adapt<P: PseudoLabelPicker + ?Sized>(
    source: &EnhancerModel,
    targets: &[ImageTensor],
    picker: &P,
    cfg: &AdaptConfig,
    mut observer: Option<&mut dyn FnMut(&StepEvent<'_>)>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Empty("no target images to adapt on".into()));
    }
    for (i, x) in targets.iter().enumerate() {
        source.check_input(x.height(), x.width()).map_err(|e| {
            Error::shape(format!("target {i}: {e}"))
        })?;
    }
    let mut teacher = source.deep_copy()?;
    let student = source.deep_copy()?;
    let mut opt = adam(&student, cfg.lr, cfg.beta1, cfg.beta2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dtype, device) = (student.dtype(), student.device().clone());
    let mut proxy: Vec<ProxyRecord> = Vec::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let fresh = build_proxy(&teacher, picker, targets)?;
        if fresh.is_empty() {
            if epoch == 0 {
                return Err(Error::EmptyProxy {
                    candidates: targets.len(),
                });
            }
            log::warn!(
                "epoch {epoch}: picker admitted none of {} targets; reusing the previous {} pseudo-labels",
                targets.len(),
                proxy.len()
            );
        } else {
            proxy = fresh;
        }
        let lr = cfg.lr_at(epoch);
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..proxy.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xs.push(perturb(&proxy[i].x_omega, &cfg.perturb, &mut rng)?);
            }
            let ys: Vec<ImageTensor> = chunk.iter().map(|&i| proxy[i].y_omega.clone()).collect();
            let ms: Vec<MaskTensor> = chunk.iter().map(|&i| proxy[i].m_omega.clone()).collect();
            let xt = ImageTensor::stack(&xs, dtype, &device)?;
            let yt = ImageTensor::stack(&ys, dtype, &device)?;
            let mt = MaskTensor::stack(&ms, dtype, &device)?;
            let (enh, probs) = student.forward_t(&xt)?;
            let loss = weighted_sum_t(&l1_loss_t(&enh, &yt)?, &cross_entropy_t(&probs, &mt)?, cfg.lambda_ce)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NumericFailure { epoch, batch });
            }
            opt.backward_step(&loss)?;
            ema_update(&teacher, &student, cfg.ema_decay)?;
            if let Some(obs) = observer.as_mut() {
                obs(&StepEvent {
                    epoch,
                    step,
                    loss: value,
                    student: &student,
                    teacher: &teacher,
                });
            }
            total += value;
            batches += 1;
            step += 1;
        }
        let rec = AdaptRecord {
            epoch,
            proxy_size: proxy.len(),
            mean_student_loss: total / batches.max(1) as f64,
            lr,
        };
        log::info!(
            "adapt epoch {epoch}: proxy {}/{}, loss {:.5}, lr {lr:.2e}",
            rec.proxy_size,
            targets.len(),
            rec.mean_student_loss
        );
        log.push(rec);
    }
    teacher.info.stage = Stage::Adapted;
    teacher.info.epoch = cfg.epochs;
    Ok(AdaptOutcome { model: teacher, log })
}

/// Deltas at or below this magnitude count as unchanged.
pub const UNCHANGED_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub index: usize,
    pub ssim_before: f64,
    pub ssim_after: f64,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaCounts {
    pub improved: usize,
    pub unchanged: usize,
    pub regressed: usize,
}

impl DeltaCounts {
    pub fn tally(rows: &[DeltaRow]) -> Self {
        let mut c = Self::default();
        for r in rows {
            if r.delta > UNCHANGED_TOL {
                c.improved += 1;
            } else if r.delta < -UNCHANGED_TOL {
                c.regressed += 1;
            } else {
                c.unchanged += 1;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub rows: Vec<DeltaRow>,
    pub counts: DeltaCounts,
}

/// Sample-wise SSIM change between two models on `(input, reference)` pairs.
pub fn adapt_report<B: Enhance + ?Sized, A: Enhance + ?Sized>(
    before: &B,
    after: &A,
    targets_with_refs: &[(ImageTensor, ImageTensor)],
) -> Result<AdaptReport> {
    let mut rows = Vec::with_capacity(targets_with_refs.len());
    for chunk in targets_with_refs.chunks(INFERENCE_CHUNK) {
        let xs: Vec<ImageTensor> = chunk.iter().map(|(x, _)| x.clone()).collect();
        let b = before.enhance_batch(&xs)?;
        let a = after.enhance_batch(&xs)?;
        for ((ob, oa), (_, y)) in b.iter().zip(&a).zip(chunk) {
            let (sb, sa) = (ssim(&ob.enhanced, y)?, ssim(&oa.enhanced, y)?);
            rows.push(DeltaRow {
                index: rows.len(),
                ssim_before: sb,
                ssim_after: sa,
                delta: sa - sb,
            });
        }
    }
    let counts = DeltaCounts::tally(&rows);
    Ok(AdaptReport { rows, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhancer::{EnhanceOutput, EnhancerConfig};
    use crate::picker::{AcceptAll, DEFAULT_THRESHOLD};
    use candle_core::Device;

    #[test]
    fn zero_perturbation_is_bitwise_identity() {
        let x = crate::toy::make_toy_corpus(1, 64, 0).unwrap().remove(0).0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&x, &PerturbConfig::none(), &mut rng).unwrap(), x);
    }

    #[test]
    fn perturbation_formula_and_clamp() {
        let draw = PerturbDraw {
            brightness: 0.1,
            contrast: 1.0,
            color: [0.0; 3],
        };
        let half = ImageTensor::filled(16, 16, 0.5).unwrap();
        assert!(draw.apply(&half).unwrap().data().iter().all(|v| (v - 0.6).abs() < 1e-7));
        let high = ImageTensor::filled(16, 16, 0.95).unwrap();
        assert!(draw.apply(&high).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn draws_stay_within_magnitudes() {
        let cfg = PerturbConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = cfg.draw(&mut rng);
            assert!(d.brightness.abs() <= 0.1);
            assert!((0.9..=1.1).contains(&d.contrast));
            assert!(d.color.iter().all(|c| c.abs() <= 0.05));
        }
    }

    /// Teacher stub that copies the input and predicts class 0 everywhere.
    struct Copycat;

    impl Enhance for Copycat {
        fn enhance_batch(&self, xs: &[ImageTensor]) -> Result<Vec<EnhanceOutput>> {
            xs.iter()
                .map(|x| {
                    let mut p = vec![0.0f32; x.height() * x.width() * 2];
                    p.iter_mut().step_by(2).for_each(|v| *v = 0.9);
                    p.iter_mut().skip(1).step_by(2).for_each(|v| *v = 0.1);
                    Ok(EnhanceOutput {
                        enhanced: x.clone(),
                        mask_pred: MaskTensor::probability(x.height(), x.width(), 2, p)?,
                    })
                })
                .collect()
        }
    }

    /// Quality score read off the first pixel's red value; structure always passes.
    struct ScoreByPixel;

    impl PseudoLabelPicker for ScoreByPixel {
        fn verdicts(&self, ys: &[ImageTensor], _ms: &[MaskTensor]) -> Result<Vec<PickVerdict>> {
            Ok(ys
                .iter()
                .map(|y| PickVerdict::from_scores(y.get(0, 0, 0) as f64, 1.0, DEFAULT_THRESHOLD, DEFAULT_THRESHOLD))
                .collect())
        }

        fn digest(&self) -> Result<String> {
            Ok("score-by-pixel".into())
        }
    }

    struct RejectAll;

    impl PseudoLabelPicker for RejectAll {
        fn verdicts(&self, ys: &[ImageTensor], _ms: &[MaskTensor]) -> Result<Vec<PickVerdict>> {
            Ok(vec![PickVerdict::from_scores(0.0, 0.0, DEFAULT_THRESHOLD, DEFAULT_THRESHOLD); ys.len()])
        }

        fn digest(&self) -> Result<String> {
            Ok("reject-all".into())
        }
    }

    fn constants(values: &[f32]) -> Vec<ImageTensor> {
        values.iter().map(|v| ImageTensor::filled(16, 16, *v).unwrap()).collect()
    }

    #[test]
    fn proxy_follows_the_picker() {
        let targets = constants(&[0.2, 0.8, 0.9]);
        assert_eq!(build_proxy(&Copycat, &AcceptAll, &targets).unwrap().len(), 3);
        assert!(build_proxy(&Copycat, &RejectAll, &targets).unwrap().is_empty());
        let mixed = build_proxy(&Copycat, &ScoreByPixel, &targets).unwrap();
        assert_eq!(mixed.len(), 2);
        for r in &mixed {
            assert!(r.verdict.picked);
            assert_eq!(r.m_omega.kind(), crate::tensor::MaskKind::OneHot);
            assert_eq!(r.m_omega.labels(), vec![0u8; 256]);
        }
    }

    fn tiny_model(seed: u64) -> EnhancerModel {
        let cfg = EnhancerConfig {
            depth: 2,
            base_channels: 4,
            num_classes: 2,
        };
        EnhancerModel::new(cfg, seed, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn ema_algebra() {
        let (t, s) = (tiny_model(1), tiny_model(2));
        let before = t.digest().unwrap();
        ema_update(&t, &s, 1.0).unwrap();
        assert_eq!(t.digest().unwrap(), before);
        ema_update(&t, &s, 0.0).unwrap();
        assert_eq!(t.digest().unwrap(), s.digest().unwrap());
        assert!(ema_update(&t, &s, 1.5).is_err());

        let wide = EnhancerModel::new(EnhancerConfig::desk_scale(), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(ema_update(&t, &wide, 0.5).is_err());
    }

    #[test]
    fn empty_inputs_and_first_refresh_errors() {
        let m = tiny_model(0);
        let cfg = AdaptConfig {
            epochs: 1,
            ..AdaptConfig::default()
        };
        assert!(matches!(adapt(&m, &[], &AcceptAll, &cfg, None), Err(Error::Empty(_))));
        let targets = constants(&[0.3, 0.4]);
        let err = adapt(&m, &targets, &RejectAll, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::EmptyProxy { candidates: 2 }));
        assert!(err.to_string().contains("relax"));
    }

    /// Admits everything on the first call only.
    struct OnlyFirst(std::cell::Cell<bool>);

    impl PseudoLabelPicker for OnlyFirst {
        fn verdicts(&self, ys: &[ImageTensor], ms: &[MaskTensor]) -> Result<Vec<PickVerdict>> {
            if self.0.replace(false) {
                AcceptAll.verdicts(ys, ms)
            } else {
                RejectAll.verdicts(ys, ms)
            }
        }

        fn digest(&self) -> Result<String> {
            Ok("only-first".into())
        }
    }

    #[test]
    fn later_empty_refresh_reuses_previous_proxy() {
        let m = tiny_model(0);
        let cfg = AdaptConfig {
            epochs: 3,
            batch_size: 2,
            ..AdaptConfig::default()
        };
        let targets = constants(&[0.3, 0.4, 0.5]);
        let out = adapt(&m, &targets, &OnlyFirst(std::cell::Cell::new(true)), &cfg, None).unwrap();
        assert!(out.log.iter().all(|r| r.proxy_size == 3));
        assert_eq!(out.model.info.stage, Stage::Adapted);
    }

    #[test]
    fn schedule_decays_over_final_quarter() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.lr_at(149), 1e-3);
        assert!(cfg.lr_at(175) < 1e-3);
        assert_eq!(cfg.lr_at(200), 0.0);
    }

    #[test]
    fn report_counts_match_rows() {
        let pairs: Vec<(ImageTensor, ImageTensor)> = constants(&[0.2, 0.5, 0.7])
            .into_iter()
            .zip(constants(&[0.25, 0.5, 0.6]))
            .collect();
        let same = adapt_report(&Copycat, &Copycat, &pairs).unwrap();
        assert_eq!(same.rows.len(), 3);
        assert!(same.rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(same.counts.unchanged, 3);
    }
}
