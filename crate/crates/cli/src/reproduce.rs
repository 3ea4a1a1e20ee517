//! Self-contained cross-domain experiment: train on one degradation family,
//! adapt to another without source data, and compare both models on the target.

use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use sfuda_core::degrade::{synthesize_dataset, SynthConfig};
use sfuda_core::enhancer::EnhancerModel;
use sfuda_core::metrics::MetricReport;
use sfuda_core::picker::{train_isd, train_iqa, AcceptAll, IqaConfig, IsdConfig, Picker, PseudoLabelPicker};
use sfuda_core::sfuda::{adapt, adapt_report, AdaptRecord, DeltaCounts};
use sfuda_core::toy::make_toy_corpus;
use sfuda_core::train::{evaluate, train_source, EpochRecord, EvalItem};
use sfuda_core::{ImageTensor, MaskTensor};

use crate::config::PipelineConfig;

/// Where a pipeline failure happened.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: sfuda_core::Error,
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> StageExt<T> for sfuda_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Which parts of the adaptation objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Enhancement distillation plus mask cross-entropy, picker on.
    Full,
    /// Enhancement distillation only.
    L1Only,
    /// Every teacher output is admitted.
    NoPicker,
}

/// State shared by every adaptation variant of one seed.
pub struct Prepared {
    pub source: EnhancerModel,
    pub picker: Picker,
    pub targets: Vec<ImageTensor>,
    pub references: Vec<(ImageTensor, MaskTensor)>,
    pub source_report: MetricReport,
    pub train_log: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub ssim: f64,
    #[serde(with = "sfuda_core::metrics::psnr_serde")]
    pub psnr: f64,
    pub dice: f64,
    pub iou: f64,
}

impl ReportRow {
    fn new(model: &str, r: &MetricReport) -> Self {
        Self {
            model: model.into(),
            ssim: r.ssim,
            psnr: r.psnr,
            dice: r.mean_dice().unwrap_or(f64::NAN),
            iou: r.mean_iou().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub seed: u64,
    pub variant: Variant,
    pub rows: Vec<ReportRow>,
    pub counts: DeltaCounts,
    pub adapt_log: Vec<AdaptRecord>,
    pub wall_time: f64,
}

impl ReproduceReport {
    pub fn source(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn adapted(&self) -> &ReportRow {
        &self.rows[1]
    }
}

fn eval_on(model: &EnhancerModel, targets: &[ImageTensor], refs: &[(ImageTensor, MaskTensor)]) -> sfuda_core::Result<MetricReport> {
    let items: Vec<EvalItem<'_>> = targets
        .iter()
        .zip(refs)
        .map(|(x, (y, m))| EvalItem { x, y, m: Some(m) })
        .collect();
    Ok(evaluate(model, &items)?.0)
}

/// Labeled quality data: clean images score 1, heavily degraded copies 0.
pub fn quality_dataset(clean: &[(ImageTensor, MaskTensor)], negatives: &SynthConfig, seed: u64) -> sfuda_core::Result<Vec<(ImageTensor, bool)>> {
    let bad = synthesize_dataset(clean, 1, negatives, seed)?;
    Ok(clean
        .iter()
        .map(|(y, _)| (y.clone(), true))
        .chain(bad.into_iter().map(|s| (s.x, false)))
        .collect())
}

/// Trains the assessor/detector pair from clean images and masks.
pub fn train_picker(
    clean: &[(ImageTensor, MaskTensor)],
    negatives: &SynthConfig,
    iqa: &IqaConfig,
    isd: &IsdConfig,
    seed: u64,
    device: &Device,
) -> sfuda_core::Result<Picker> {
    let labeled = quality_dataset(clean, negatives, seed)?;
    let assessor = train_iqa(&labeled, iqa, device)?;
    let masks: Vec<MaskTensor> = clean.iter().map(|(_, m)| m.clone()).collect();
    let detector = train_isd(&masks, isd, device)?;
    Ok(Picker { assessor, detector })
}

/// Builds the target domain: clean toy pairs degraded by the target family.
pub fn target_domain(cfg: &PipelineConfig) -> sfuda_core::Result<(Vec<ImageTensor>, Vec<(ImageTensor, MaskTensor)>)> {
    let clean = make_toy_corpus(cfg.target_count, cfg.image_size, cfg.stream(2))?;
    let synth = SynthConfig::family(cfg.target_family);
    let samples = synthesize_dataset(&clean, 1, &synth, cfg.stream(12))?;
    Ok(samples.into_iter().map(|s| (s.x, (s.y, s.m))).unzip())
}

/// Source training, picker training and target synthesis.
pub fn prepare(cfg: &PipelineConfig, device: &Device) -> Result<Prepared, StageError> {
    let clean = make_toy_corpus(cfg.clean_count, cfg.image_size, cfg.stream(1)).stage("toy-corpus")?;
    let source_data = synthesize_dataset(&clean, cfg.per_image, &SynthConfig::family(cfg.source_family), cfg.stream(11))
        .stage("synth")?;
    let trained = train_source(&source_data, cfg.model, &cfg.train, device).stage("train-source")?;
    drop(source_data);

    let picker_clean = make_toy_corpus(cfg.picker_clean_count, cfg.image_size, cfg.stream(3)).stage("toy-corpus")?;
    let picker = train_picker(&picker_clean, &cfg.quality_negatives, &cfg.iqa, &cfg.isd, cfg.stream(13), device)
        .stage("train-picker")?;

    let (targets, references) = target_domain(cfg).stage("synth")?;
    let source_report = eval_on(&trained.model, &targets, &references).stage("eval")?;
    Ok(Prepared {
        source: trained.model,
        picker,
        targets,
        references,
        source_report,
        train_log: trained.log,
    })
}

/// Adapts the prepared source model under `variant` and reports both rows.
pub fn run_variant(prep: &Prepared, cfg: &PipelineConfig, variant: Variant) -> Result<(ReproduceReport, EnhancerModel), StageError> {
    let start = Instant::now();
    let mut acfg = cfg.adapt.clone();
    if variant == Variant::L1Only {
        acfg.lambda_ce = 0.0;
    }
    let picker: &dyn PseudoLabelPicker = match variant {
        Variant::NoPicker => &AcceptAll,
        _ => &prep.picker,
    };
    let out = adapt(&prep.source, &prep.targets, picker, &acfg, None).stage("adapt")?;
    let adapted_report = eval_on(&out.model, &prep.targets, &prep.references).stage("eval")?;
    let pairs: Vec<(ImageTensor, ImageTensor)> = prep
        .targets
        .iter()
        .zip(&prep.references)
        .map(|(x, (y, _))| (x.clone(), y.clone()))
        .collect();
    let delta = adapt_report(&prep.source, &out.model, &pairs).stage("eval")?;
    let report = ReproduceReport {
        seed: cfg.seed,
        variant,
        rows: vec![
            ReportRow::new("source", &prep.source_report),
            ReportRow::new("adapted", &adapted_report),
        ],
        counts: delta.counts,
        adapt_log: out.log,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((report, out.model))
}

/// The full pipeline for one seed and variant.
pub fn reproduce(cfg: &PipelineConfig, variant: Variant, device: &Device) -> Result<ReproduceReport, StageError> {
    let prep = prepare(cfg, device)?;
    Ok(run_variant(&prep, cfg, variant)?.0)
}

/// Degraded-input baseline: metrics of the targets themselves against their references.
pub fn input_baseline(targets: &[ImageTensor], refs: &[(ImageTensor, MaskTensor)]) -> sfuda_core::Result<f64> {
    let mut total = 0.0;
    for (x, (y, _)) in targets.iter().zip(refs) {
        total += sfuda_core::metrics::ssim(x, y)?;
    }
    Ok(total / targets.len() as f64)
}
