//! End-to-end acceptance gate: one PASS/FAIL line per criterion, nonzero exit
//! if any criterion fails. Runs the desk-scale reproduction on three seeds, so
//! expect it to take a while on a CPU.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};

use sfuda_cli::commands::write_reproduction;
use sfuda_cli::config::PipelineConfig;
use sfuda_cli::reproduce::{prepare, Prepared, ReproduceReport, Variant};
use sfuda_core::checkpoint::save_enhancer;
use sfuda_core::enhancer::{
    cross_entropy_t, l1_loss_t, loss_enhance, loss_source, loss_structure, weighted_sum_t, Enhance,
    EnhanceOutput, EnhancerConfig, EnhancerModel,
};
use sfuda_core::io::write_image;
use sfuda_core::metrics::{dice_iou, psnr, ssim};
use sfuda_core::picker::{PickVerdict, PseudoLabelPicker, DEFAULT_THRESHOLD};
use sfuda_core::sfuda::{adapt, ema_update, AdaptConfig, StepEvent};
use sfuda_core::{ImageTensor, MaskTensor};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = Result<Verdict, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn wave_image(h: usize, w: usize, phase: f32) -> ImageTensor {
    ImageTensor::from_fn(h, w, |y, x, c| 0.5 + 0.4 * ((y * 7 + x * 3 + c * 5) as f32 * 0.37 + phase).sin()).unwrap()
}

fn striped_mask(h: usize, w: usize, classes: usize) -> MaskTensor {
    let labels: Vec<u8> = (0..h * w).map(|i| ((i * 7919 / 13) % classes) as u8).collect();
    MaskTensor::from_labels(h, w, classes, &labels).unwrap()
}

fn loss_identities() -> Check {
    let a = wave_image(16, 16, 0.0);
    let b = wave_image(16, 16, 1.0);
    let m = striped_mask(16, 16, 2);
    let enhance_zero = loss_enhance(&a, &a).map_err(err)?;
    let structure = loss_structure(&m, &m).map_err(err)?;

    let dev = Device::Cpu;
    let at = a.to_tensor(DType::F64, &dev).map_err(err)?.unsqueeze(0).map_err(err)?;
    let bt = b.to_tensor(DType::F64, &dev).map_err(err)?.unsqueeze(0).map_err(err)?;
    let mt = MaskTensor::stack(&[m.clone()], DType::F64, &dev).map_err(err)?;
    let probs = MaskTensor::stack(&[striped_mask(16, 16, 2)], DType::F64, &dev).map_err(err)?;
    let l1 = l1_loss_t(&at, &bt).map_err(err)?;
    let reduced = weighted_sum_t(&l1, &cross_entropy_t(&probs, &mt).map_err(err)?, 0.0).map_err(err)?;
    let (l1v, rv) = (scalar(&l1)?, scalar(&reduced)?);

    let out = EnhanceOutput {
        enhanced: b.clone(),
        mask_pred: m.clone(),
    };
    let source_at_zero = loss_source(&out, &a, &m, 0.0).map_err(err)?;
    let enhance_only = loss_enhance(&b, &a).map_err(err)?;
    let pass = enhance_zero == 0.0 && structure <= 1e-6 && l1v == rv && source_at_zero == enhance_only;
    Ok(Verdict::new(
        pass,
        format!("L1(A,A)={enhance_zero}, CE(one-hot)={structure:.2e}, weight-0 total equals L1: {}", l1v == rv && source_at_zero == enhance_only),
    ))
}

fn scalar(t: &Tensor) -> Result<f64, String> {
    t.to_dtype(DType::F64).map_err(err)?.to_scalar::<f64>().map_err(err)
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let dev = Device::Cpu;
    let cfg = EnhancerConfig {
        depth: 2,
        base_channels: 4,
        num_classes: 2,
    };
    let model = EnhancerModel::new(cfg, 17, DType::F64, &dev).map_err(err)?;
    let (h, w) = (16, 16);
    let x: Vec<f64> = (0..3 * h * w).map(|i| 0.5 + 0.4 * (i as f64 * 0.731).sin()).collect();
    let x = Tensor::from_vec(x, (1, 3, h, w), &dev).map_err(err)?;
    let (enh, _) = model.forward_t(&x).map_err(err)?;
    let y: Vec<f64> = enh
        .flatten_all()
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(err)?
        .into_iter()
        .map(|p| if p < 0.5 { p + 0.2 } else { p - 0.2 })
        .collect();
    let y = Tensor::from_vec(y, (1, 3, h, w), &dev).map_err(err)?;
    let mut m = vec![0f64; 2 * h * w];
    for p in 0..h * w {
        m[((p * 31 / 7) % 2) * h * w + p] = 1.0;
    }
    let m = Tensor::from_vec(m, (1, 2, h, w), &dev).map_err(err)?;
    let loss = || -> Result<Tensor, String> {
        let (enh, probs) = model.forward_t(&x).map_err(err)?;
        let l1 = l1_loss_t(&enh, &y).map_err(err)?;
        weighted_sum_t(&l1, &cross_entropy_t(&probs, &m).map_err(err)?, 0.3).map_err(err)
    };
    let grads = loss()?.backward().map_err(err)?;
    let step = 1e-4;
    let mut worst = 0f64;
    let mut checked = 0usize;
    for (name, var) in model.params().iter() {
        let analytic = grads
            .get(var.as_tensor())
            .ok_or(format!("no gradient for {name}"))?
            .flatten_all()
            .and_then(|t| t.to_vec1::<f64>())
            .map_err(err)?;
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(err)?;
        for i in 0..base.len() {
            let eval_at = |v: f64| -> Result<f64, String> {
                let mut moved = base.clone();
                moved[i] = v;
                var.set(&Tensor::from_vec(moved, shape.clone(), &dev).map_err(err)?).map_err(err)?;
                scalar(&loss()?)
            };
            let numeric = (eval_at(base[i] + step)? - eval_at(base[i] - step)?) / (2.0 * step);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
        var.set(&Tensor::from_vec(base, shape, &dev).map_err(err)?).map_err(err)?;
    }
    let all = checked == model.params().num_scalars();
    Ok(Verdict::new(
        all && worst < 1e-3,
        format!(
            "{checked} parameters, worst relative error {worst:.2e}, {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn metric_oracles() -> Check {
    let a = wave_image(32, 32, 0.3);
    let same = ssim(&a, &a).map_err(err)?;
    let zero = ImageTensor::filled(16, 16, 0.0).map_err(err)?;
    let one = ImageTensor::filled(16, 16, 1.0).map_err(err)?;
    let extremes = ssim(&zero, &one).map_err(err)?;
    let half = ImageTensor::filled(16, 16, 0.5).map_err(err)?;
    let db = psnr(&zero, &half).map_err(err)?;

    let (h, w) = (16, 16);
    let mut p = vec![0u8; h * w];
    let mut r = vec![0u8; h * w];
    for i in [0, 1, 2, 3] {
        p[i] = 1;
    }
    for i in [2, 3, 4, 5] {
        r[i] = 1;
    }
    let pm = MaskTensor::from_labels(h, w, 2, &p).map_err(err)?;
    let rm = MaskTensor::from_labels(h, w, 2, &r).map_err(err)?;
    let o = dice_iou(&pm, &rm).map_err(err)?;
    let pass = same == 1.0
        && (extremes - 9.999e-5).abs() <= 1e-6
        && (db - 6.0206).abs() <= 1e-3
        && o.dice[1] == 0.5
        && o.iou[1] == 1.0 / 3.0;
    Ok(Verdict::new(
        pass,
        format!(
            "SSIM(A,A)={same}, SSIM(0,1)={extremes:.4e}, PSNR(0.5)={db:.4} dB, DICE={}, IoU={:.6}",
            o.dice[1], o.iou[1]
        ),
    ))
}

fn miniature(seed: u64) -> Result<EnhancerModel, String> {
    let cfg = EnhancerConfig {
        depth: 2,
        base_channels: 4,
        num_classes: 2,
    };
    EnhancerModel::new(cfg, seed, DType::F32, &Device::Cpu).map_err(err)
}

fn ema_algebra() -> Check {
    let teacher = miniature(1)?;
    let student = miniature(2)?;
    let t0 = teacher.params().snapshot().map_err(err)?;
    let s0 = student.params().snapshot().map_err(err)?;

    ema_update(&teacher, &student, 1.0).map_err(err)?;
    let keep = teacher.params().snapshot().map_err(err)? == t0;
    ema_update(&teacher, &student, 0.0).map_err(err)?;
    let copy = teacher.params().snapshot().map_err(err)? == s0;

    let zero = miniature(3)?;
    let target = miniature(4)?;
    let zeros: std::collections::HashMap<String, Tensor> = zero
        .params()
        .tensors()
        .into_iter()
        .map(|(k, t)| (k, t.zeros_like().unwrap()))
        .collect();
    zero.params().load_tensors(&zeros).map_err(err)?;
    let ones: std::collections::HashMap<String, Tensor> = target
        .params()
        .tensors()
        .into_iter()
        .map(|(k, t)| (k, t.ones_like().unwrap()))
        .collect();
    target.params().load_tensors(&ones).map_err(err)?;
    ema_update(&zero, &target, 0.999).map_err(err)?;
    let single = zero
        .params()
        .snapshot()
        .map_err(err)?
        .iter()
        .flatten()
        .all(|v| (v - (1.0 - 0.999)).abs() <= 1e-7);

    let source = miniature(5)?;
    let targets: Vec<ImageTensor> = (0..3).map(|i| wave_image(16, 16, i as f32)).collect();
    let cfg = AdaptConfig {
        epochs: 1,
        batch_size: 1,
        ema_decay: 0.9,
        seed: 2,
        ..AdaptConfig::default()
    };
    let mut students = Vec::new();
    let mut teachers = Vec::new();
    let mut record = |e: &StepEvent<'_>| {
        students.push(e.student.params().snapshot().unwrap());
        teachers.push(e.teacher.params().snapshot().unwrap());
    };
    adapt(&source, &targets, &sfuda_core::picker::AcceptAll, &cfg, Some(&mut record)).map_err(err)?;
    let mut replay = source.params().snapshot().map_err(err)?;
    let mut worst = 0f64;
    for (s, t) in students.iter().zip(&teachers) {
        for ((r, sv), tv) in replay.iter_mut().zip(s).zip(t) {
            for ((rv, s1), t1) in r.iter_mut().zip(sv).zip(tv) {
                *rv = 0.9 * *rv + 0.1 * s1;
                worst = worst.max((*rv - t1).abs());
            }
        }
    }
    let replayed = students.len() == 3 && worst < 1e-6;
    Ok(Verdict::new(
        keep && copy && single && replayed,
        format!(
            "decay 1 keeps: {keep}, decay 0 copies: {copy}, 0.999 step gives (1-d): {single}, {}-step replay error {worst:.1e}",
            students.len()
        ),
    ))
}

fn picker_gate(prep: &Prepared, digest_before: &str) -> Check {
    let tau = DEFAULT_THRESHOLD;
    let (low, high) = (tau - 0.25, tau + 0.25);
    let mut picked_cells = Vec::new();
    for (q, qn) in [(low, "low"), (high, "high")] {
        for (s, sn) in [(low, "irregular"), (high, "regular")] {
            if PickVerdict::from_scores(q, s, tau, tau).picked {
                picked_cells.push(format!("({qn}, {sn})"));
            }
        }
    }
    let at_threshold = PickVerdict::from_scores(tau, tau, tau, tau).picked;
    let after = prep.picker.digest().map_err(err)?;
    let gate = picked_cells == ["(high, regular)"] && at_threshold;
    let frozen = after == digest_before;
    Ok(Verdict::new(
        gate && frozen,
        format!("picked cells {picked_cells:?}, picker digest unchanged across adaptation: {frozen}"),
    ))
}

fn source_freedom(prep: &Prepared, cfg: &PipelineConfig) -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    save_enhancer(&prep.source, &root.join("source.ckpt")).map_err(err)?;
    prep.picker.save(&root.join("picker.ckpt")).map_err(err)?;
    std::fs::create_dir_all(root.join("targets")).map_err(err)?;
    for (i, x) in prep.targets.iter().enumerate() {
        write_image(&root.join("targets").join(format!("t{i:03}.png")), x).map_err(err)?;
    }
    let before = listing(root)?;
    let has_pairs = before.iter().any(|p| p.contains("/x/") || p.contains("/y/") || p.contains("/m/"));

    let out = Command::new(env!("CARGO_BIN_EXE_sfuda"))
        .current_dir(root)
        .env_clear()
        .args(["--seed", &cfg.seed.to_string(), "--log-level", "warn"])
        .args([
            "adapt", "--source", "source.ckpt", "--picker", "picker.ckpt", "--target-dir", "targets",
            "--out", "adapted.ckpt", "--epochs", "1", "--log", "adapt.jsonl",
        ])
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Ok(Verdict::new(false, format!("adapt failed: {}", String::from_utf8_lossy(&out.stderr))));
    }
    let after = listing(root)?;
    let created: BTreeSet<String> = after.difference(&before).cloned().collect();
    let expected: BTreeSet<String> = ["adapted.ckpt", "adapted.ckpt.json", "adapted.ckpt.run.json", "adapt.jsonl"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("adapted.ckpt.run.json")).map_err(err)?).map_err(err)?;
    let inputs: BTreeSet<String> = snap["paths"]
        .as_object()
        .map(|m| m.keys().filter(|k| *k != "out").cloned().collect())
        .unwrap_or_default();
    let expected_inputs: BTreeSet<String> = ["source", "picker", "target_dir"].iter().map(|s| s.to_string()).collect();
    let pass = !has_pairs && created == expected && inputs == expected_inputs;
    Ok(Verdict::new(
        pass,
        format!(
            "sandbox held {} files (source.ckpt, picker.ckpt, {} targets); recorded inputs {inputs:?}; created {created:?}",
            before.len(),
            prep.targets.len()
        ),
    ))
}

fn listing(root: &Path) -> Result<BTreeSet<String>, String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    Ok(out)
}

struct SeedRun {
    full: ReproduceReport,
    l1_only: ReproduceReport,
    no_picker: ReproduceReport,
}

fn headline(run: &SeedRun) -> Check {
    let (s, a) = (run.full.source(), run.full.adapted());
    let gain = a.ssim - s.ssim;
    let dice_drop = s.dice - a.dice;
    Ok(Verdict::new(
        gain >= 0.005 && dice_drop <= 0.01,
        format!(
            "SSIM {:.4} -> {:.4} ({gain:+.4}, need >= +0.005); DICE {:.4} -> {:.4} ({:+.4}, floor -0.01); improved/unchanged/regressed {}/{}/{}",
            s.ssim, a.ssim, s.dice, a.dice, -dice_drop,
            run.full.counts.improved, run.full.counts.unchanged, run.full.counts.regressed
        ),
    ))
}

fn ablations(runs: &[(u64, SeedRun)]) -> Check {
    let mut ce_ok = true;
    let mut picker_ok = true;
    let mut rows = Vec::new();
    for (seed, r) in runs {
        let (full, l1, open) = (r.full.adapted(), r.l1_only.adapted(), r.no_picker.adapted());
        ce_ok &= l1.dice <= full.dice;
        picker_ok &= open.ssim <= full.ssim;
        rows.push(format!(
            "seed {seed}: DICE full {:.4} / L1-only {:.4}, SSIM full {:.4} / no-picker {:.4}",
            full.dice, l1.dice, full.ssim, open.ssim
        ));
    }
    Ok(Verdict::new(
        ce_ok && picker_ok,
        format!("(a) L1-only never beats full DICE: {ce_ok}; (b) no-picker SSIM <= full: {picker_ok}; {}", rows.join("; ")),
    ))
}

fn no_op_identities(prep: &Prepared, cfg: &PipelineConfig) -> Check {
    let source = prep.source.digest().map_err(err)?;
    let zero = AdaptConfig {
        epochs: 0,
        ..cfg.adapt.clone()
    };
    let a = adapt(&prep.source, &prep.targets, &prep.picker, &zero, None).map_err(err)?;
    let frozen = AdaptConfig {
        epochs: 2,
        lr: 0.0,
        ema_decay: 1.0,
        ..cfg.adapt.clone()
    };
    let b = adapt(&prep.source, &prep.targets, &prep.picker, &frozen, None).map_err(err)?;
    let (da, db) = (a.model.digest().map_err(err)?, b.model.digest().map_err(err)?);
    let same_outputs = a.model.enhance(&prep.targets[0]).map_err(err)? == prep.source.enhance(&prep.targets[0]).map_err(err)?;
    Ok(Verdict::new(
        da == source && db == source && same_outputs,
        format!("epochs=0 digest equal: {}; lr=0 with decay=1 digest equal: {}", da == source, db == source),
    ))
}

fn report(id: u8, name: &str, check: Check, failures: &mut usize) {
    let (tag, detail) = match check {
        Ok(v) if v.pass => ("PASS", v.detail),
        Ok(v) => ("FAIL", v.detail),
        Err(e) => ("FAIL", format!("error: {e}")),
    };
    if tag == "FAIL" {
        *failures += 1;
    }
    println!("[{tag}] {id} {name}: {detail}");
}

fn main() {
    let mut failures = 0usize;
    report(1, "loss identities", loss_identities(), &mut failures);
    report(2, "gradient check", gradient_check(), &mut failures);
    report(3, "metric oracles", metric_oracles(), &mut failures);
    report(4, "EMA algebra", ema_algebra(), &mut failures);

    let device = Device::Cpu;
    let out_root = tempfile::tempdir().expect("temp dir");
    let mut runs: Vec<(u64, SeedRun)> = Vec::new();
    let mut first: Option<(Prepared, PipelineConfig, String)> = None;
    let mut pipeline_error = None;
    for seed in SEEDS {
        let start = Instant::now();
        let cfg = PipelineConfig::desk_scale(seed);
        let prep = match prepare(&cfg, &device) {
            Ok(p) => p,
            Err(e) => {
                pipeline_error = Some(format!("seed {seed}: {e}"));
                break;
            }
        };
        let digest = prep.picker.digest().expect("picker digest");
        let variants = [Variant::Full, Variant::L1Only, Variant::NoPicker];
        match write_reproduction(&prep, &cfg, &variants, &out_root.path().join(format!("seed-{seed}"))) {
            Ok(mut reports) => {
                let no_picker = reports.pop().unwrap();
                let l1_only = reports.pop().unwrap();
                let full = reports.pop().unwrap();
                eprintln!("seed {seed} reproduced in {:.0}s", start.elapsed().as_secs_f64());
                runs.push((seed, SeedRun { full, l1_only, no_picker }));
            }
            Err(e) => {
                pipeline_error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
        if first.is_none() {
            first = Some((prep, cfg, digest));
        }
    }
    let missing = || Err::<Verdict, String>(pipeline_error.clone().unwrap_or_else(|| "pipeline did not run".into()));

    match &first {
        Some((prep, _, digest)) => report(5, "picker gate", picker_gate(prep, digest), &mut failures),
        None => report(5, "picker gate", missing(), &mut failures),
    }
    match &first {
        Some((prep, cfg, _)) => report(6, "source-freedom audit", source_freedom(prep, cfg), &mut failures),
        None => report(6, "source-freedom audit", missing(), &mut failures),
    }
    match runs.first() {
        Some((_, r)) => report(7, "headline reproduction (seed 0, desk scale)", headline(r), &mut failures),
        None => report(7, "headline reproduction (seed 0, desk scale)", missing(), &mut failures),
    }
    if runs.len() == SEEDS.len() {
        report(8, "ablation directions (seeds 0, 1, 2)", ablations(&runs), &mut failures);
    } else {
        report(8, "ablation directions (seeds 0, 1, 2)", missing(), &mut failures);
    }
    match &first {
        Some((prep, cfg, _)) => report(9, "no-op identities", no_op_identities(prep, cfg), &mut failures),
        None => report(9, "no-op identities", missing(), &mut failures),
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
