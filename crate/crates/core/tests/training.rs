use candle_core::Device;

use sfuda_core::degrade::{synthesize_dataset, DegradationFamily, SynthConfig};
use sfuda_core::enhancer::{EnhancerConfig, Stage};
use sfuda_core::metrics::psnr;
use sfuda_core::toy::make_toy_corpus;
use sfuda_core::train::{evaluate, train_source, EvalItem, TrainConfig};

fn desk_samples(clean: usize, per_image: usize, seed: u64) -> Vec<sfuda_core::degrade::SourceSample> {
    let pairs = make_toy_corpus(clean, 64, seed).unwrap();
    let synth = SynthConfig::family(DegradationFamily::Interference);
    synthesize_dataset(&pairs, per_image, &synth, seed + 100).unwrap()
}

#[test]
fn desk_training_lowers_the_loss_and_is_deterministic() {
    let samples = desk_samples(4, 4, 1);
    assert_eq!(samples.len(), 16);
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::desk_scale()
    };
    let a = train_source(&samples, EnhancerConfig::desk_scale(), &cfg, &Device::Cpu).unwrap();
    assert_eq!(a.log.len(), 7);
    let (first, last) = (a.log[0].mean_loss, a.log[6].mean_loss);
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(a.model.info.stage, Stage::Source);
    assert_eq!(a.model.info.epoch, 7);

    let b = train_source(&samples, EnhancerConfig::desk_scale(), &cfg, &Device::Cpu).unwrap();
    assert_eq!(a.model.digest().unwrap(), b.model.digest().unwrap());
    let losses = |log: &[sfuda_core::train::EpochRecord]| log.iter().map(|r| r.mean_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a.log), losses(&b.log));
}

#[test]
fn trained_model_lowers_held_out_error_below_the_degraded_input() {
    let samples = desk_samples(12, 8, 2);
    let cfg = TrainConfig {
        seed: 4,
        ..TrainConfig::desk_scale()
    };
    let trained = train_source(&samples, EnhancerConfig::desk_scale(), &cfg, &Device::Cpu).unwrap();

    let held_out = desk_samples(12, 1, 900);
    let items: Vec<EvalItem<'_>> = held_out
        .iter()
        .map(|s| EvalItem { x: &s.x, y: &s.y, m: Some(&s.m) })
        .collect();
    let (report, rows) = evaluate(&trained.model, &items).unwrap();
    assert_eq!(rows.len(), held_out.len());
    let baseline = held_out.iter().map(|s| psnr(&s.x, &s.y).unwrap()).sum::<f64>() / held_out.len() as f64;
    assert!(report.psnr > baseline, "enhanced {} dB vs input {baseline} dB", report.psnr);
}
