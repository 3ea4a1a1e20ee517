//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::Serialize;

use sfuda_core::checkpoint::{load_enhancer, save_enhancer};
use sfuda_core::degrade::{synthesize_dataset, SourceSample, SynthConfig};
use sfuda_core::enhancer::Enhance;
use sfuda_core::io::{file_name, list_pngs, read_image, read_mask, write_image, write_mask};
use sfuda_core::metrics::{MetricReport, SampleMetrics};
use sfuda_core::picker::{AcceptAll, Picker, PseudoLabelPicker};
use sfuda_core::sfuda::adapt;
use sfuda_core::toy::make_toy_corpus;
use sfuda_core::train::train_source;
use sfuda_core::{ImageTensor, MaskTensor};

use crate::cli::{CleanSource, Cli, Command};
use crate::config::{PipelineConfig, RunSnapshot};
use crate::error::CliError;
use crate::reproduce::{prepare, run_variant, train_picker, Prepared, ReproduceReport, Variant};

/// Appends `.run.json` to a file output, or names `run.json` inside a directory output.
pub fn snapshot_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

struct Ctx {
    cli_seed: u64,
    preset: crate::config::Preset,
    overrides: Vec<String>,
    config: PipelineConfig,
    device: Device,
}

impl Ctx {
    fn snapshot(&self, command: &str, paths: &[(&str, &Path)], at: &Path) -> Result<(), CliError> {
        self.snapshot_with(&self.config, command, paths, at)
    }

    fn snapshot_with(&self, config: &PipelineConfig, command: &str, paths: &[(&str, &Path)], at: &Path) -> Result<(), CliError> {
        RunSnapshot {
            command: command.into(),
            preset: self.preset,
            seed: self.cli_seed,
            paths: paths
                .iter()
                .map(|(k, p)| (k.to_string(), p.to_path_buf()))
                .collect::<BTreeMap<_, _>>(),
            overrides: self.overrides.clone(),
            config: config.clone(),
        }
        .write(at)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let config = PipelineConfig::resolve(g.preset, g.seed, g.config.as_deref(), &g.overrides)?;
    let ctx = Ctx {
        cli_seed: g.seed,
        preset: g.preset,
        overrides: g.overrides.clone(),
        config,
        device: Device::Cpu,
    };
    let name = cli.command.name();
    match &cli.command {
        Command::Synth {
            clean,
            out_dir,
            family,
            per_image,
        } => cmd_synth(&ctx, clean, out_dir, (*family).into(), *per_image),
        Command::TrainSource { data_dir, out, log } => cmd_train_source(&ctx, data_dir, out, log.as_deref()),
        Command::TrainPicker { clean, out } => cmd_train_picker(&ctx, clean, out),
        Command::Adapt {
            source,
            picker,
            target_dir,
            out,
            epochs,
            ema,
            log,
            no_picker,
        } => cmd_adapt(
            &ctx,
            AdaptArgs {
                source,
                picker: if *no_picker { None } else { picker.as_deref() },
                target_dir,
                out,
                epochs: *epochs,
                ema: *ema,
                log: log.as_deref(),
            },
        ),
        Command::Enhance {
            model,
            input_dir,
            output_dir,
            masks,
        } => cmd_enhance(&ctx, model, input_dir, output_dir, *masks).map(|_| ()),
        Command::Eval {
            dir_a,
            dir_b,
            mask_dir_a,
            mask_dir_b,
            classes,
            table,
        } => {
            let masks = mask_dir_a.as_deref().zip(mask_dir_b.as_deref());
            let report = cmd_eval(dir_a, dir_b, masks, *classes, table)?;
            ctx.snapshot(name, &[("dir_a", dir_a), ("dir_b", dir_b), ("table", table)], &snapshot_path(table, false))?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(())
        }
        Command::Reproduce { out_dir, variants } => {
            let variants: Vec<Variant> = variants.iter().map(|v| (*v).into()).collect();
            let reports = cmd_reproduce(&ctx.config, &variants, out_dir, &ctx.device)?;
            ctx.snapshot(name, &[("out_dir", out_dir)], &snapshot_path(out_dir, true))?;
            for r in &reports {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
            }
            Ok(())
        }
    }
}

fn load_clean(ctx: &Ctx, src: &CleanSource, stream: u64) -> Result<Vec<(String, ImageTensor, MaskTensor)>, CliError> {
    if let Some(n) = src.toy {
        let corpus = make_toy_corpus(n, ctx.config.image_size, ctx.config.stream(stream))?;
        return Ok(corpus
            .into_iter()
            .enumerate()
            .map(|(i, (y, m))| (format!("toy_{i:04}.png"), y, m))
            .collect());
    }
    let (Some(clean_dir), Some(mask_dir)) = (&src.clean_dir, &src.mask_dir) else {
        return Err(CliError::Usage("pass --clean-dir with --mask-dir, or --toy N".into()));
    };
    let classes = ctx.config.model.num_classes;
    let mut out = Vec::new();
    for p in list_pngs(clean_dir)? {
        let name = file_name(&p);
        let y = read_image(&p)?;
        let m = read_mask(&mask_dir.join(&name), classes)?;
        out.push((name, y, m));
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("no inputs: {} holds no PNG files", clean_dir.display())));
    }
    Ok(out)
}

fn cmd_synth(
    ctx: &Ctx,
    clean: &CleanSource,
    out_dir: &Path,
    family: sfuda_core::degrade::DegradationFamily,
    per_image: Option<usize>,
) -> Result<(), CliError> {
    let items = load_clean(ctx, clean, 1)?;
    let per_image = per_image.unwrap_or(ctx.config.per_image);
    let pairs: Vec<(ImageTensor, MaskTensor)> = items.iter().map(|(_, y, m)| (y.clone(), m.clone())).collect();
    let samples = synthesize_dataset(&pairs, per_image, &SynthConfig::family(family), ctx.config.stream(11))?;
    for sub in ["x", "y", "m"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    #[derive(Serialize)]
    struct ParamsRow<'a> {
        file: String,
        source: &'a str,
        #[serde(flatten)]
        params: &'a sfuda_core::degrade::DegradationParams,
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (src_name, _, _) = &items[i / per_image];
        let stem = src_name.trim_end_matches(".png").trim_end_matches(".PNG");
        let file = format!("{stem}_{:02}.png", i % per_image);
        write_image(&out_dir.join("x").join(&file), &s.x)?;
        write_image(&out_dir.join("y").join(&file), &s.y)?;
        write_mask(&out_dir.join("m").join(&file), &s.m)?;
        rows.push(ParamsRow {
            file,
            source: src_name,
            params: &s.params,
        });
    }
    write_jsonl(&out_dir.join("params.jsonl"), &rows)?;
    ctx.snapshot("synth", &[("out_dir", out_dir)], &snapshot_path(out_dir, true))?;
    log::info!("wrote {} samples to {}", samples.len(), out_dir.display());
    Ok(())
}

fn read_triples(data_dir: &Path, classes: usize) -> Result<Vec<SourceSample>, CliError> {
    let mut out = Vec::new();
    for p in list_pngs(&data_dir.join("x"))? {
        let name = file_name(&p);
        out.push(SourceSample {
            x: read_image(&p)?,
            y: read_image(&data_dir.join("y").join(&name))?,
            m: read_mask(&data_dir.join("m").join(&name), classes)?,
            params: sfuda_core::degrade::DegradationParams::identity(0),
        });
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("no inputs: {}/x holds no PNG files", data_dir.display())));
    }
    Ok(out)
}

fn cmd_train_source(ctx: &Ctx, data_dir: &Path, out: &Path, log_path: Option<&Path>) -> Result<(), CliError> {
    let samples = read_triples(data_dir, ctx.config.model.num_classes)?;
    let trained = train_source(&samples, ctx.config.model, &ctx.config.train, &ctx.device)?;
    save_enhancer(&trained.model, out)?;
    if let Some(p) = log_path {
        write_jsonl(p, &trained.log)?;
    }
    ctx.snapshot("train-source", &[("data_dir", data_dir), ("out", out)], &snapshot_path(out, false))?;
    Ok(())
}

fn cmd_train_picker(ctx: &Ctx, clean: &CleanSource, out: &Path) -> Result<(), CliError> {
    let items = load_clean(ctx, clean, 3)?;
    let pairs: Vec<(ImageTensor, MaskTensor)> = items.into_iter().map(|(_, y, m)| (y, m)).collect();
    let c = &ctx.config;
    let picker = train_picker(&pairs, &c.quality_negatives, &c.iqa, &c.isd, c.stream(13), &ctx.device)?;
    picker.save(out)?;
    ctx.snapshot("train-picker", &[("out", out)], &snapshot_path(out, false))?;
    Ok(())
}

struct AdaptArgs<'a> {
    source: &'a Path,
    picker: Option<&'a Path>,
    target_dir: &'a Path,
    out: &'a Path,
    epochs: Option<usize>,
    ema: Option<f64>,
    log: Option<&'a Path>,
}

fn read_images(dir: &Path) -> Result<Vec<ImageTensor>, CliError> {
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!("no inputs: {} holds no PNG files", dir.display())));
    }
    paths.iter().map(|p| Ok(read_image(p)?)).collect()
}

fn cmd_adapt(ctx: &Ctx, a: AdaptArgs<'_>) -> Result<(), CliError> {
    let source = load_enhancer(a.source, &ctx.device)?;
    let targets = read_images(a.target_dir)?;
    let mut cfg = ctx.config.adapt.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = a.ema {
        cfg.ema_decay = d;
    }
    let loaded;
    let picker: &dyn PseudoLabelPicker = match a.picker {
        Some(p) => {
            loaded = Picker::load(p, &ctx.device)?;
            &loaded
        }
        None => &AcceptAll,
    };
    let out = adapt(&source, &targets, picker, &cfg, None)?;
    save_enhancer(&out.model, a.out)?;
    if let Some(p) = a.log {
        write_jsonl(p, &out.log)?;
    }
    let mut paths = vec![("source", a.source), ("target_dir", a.target_dir), ("out", a.out)];
    if let Some(p) = a.picker {
        paths.push(("picker", p));
    }
    let mut resolved = ctx.config.clone();
    resolved.adapt = cfg;
    ctx.snapshot_with(&resolved, "adapt", &paths, &snapshot_path(a.out, false))
}

/// Enhances every readable PNG; returns the number written.
fn cmd_enhance(ctx: &Ctx, model: &Path, input_dir: &Path, output_dir: &Path, masks: bool) -> Result<usize, CliError> {
    let model = load_enhancer(model, &ctx.device)?;
    let paths = list_pngs(input_dir)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!("no inputs: {} holds no PNG files", input_dir.display())));
    }
    std::fs::create_dir_all(output_dir)?;
    if masks {
        std::fs::create_dir_all(output_dir.join("masks"))?;
    }
    let mut written = 0usize;
    for p in &paths {
        let x = match read_image(p) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                continue;
            }
        };
        let out = match model.enhance(&x) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                continue;
            }
        };
        let name = file_name(p);
        write_image(&output_dir.join(&name), &out.enhanced)?;
        if masks {
            write_mask(&output_dir.join("masks").join(&name), &out.mask_pred)?;
        }
        written += 1;
    }
    if written == 0 {
        return Err(CliError::Data(format!("none of the {} inputs could be enhanced", paths.len())));
    }
    ctx.snapshot(
        "enhance",
        &[("input_dir", input_dir), ("output_dir", output_dir)],
        &snapshot_path(output_dir, true),
    )?;
    Ok(written)
}

#[derive(Serialize)]
struct EvalRow {
    file: String,
    #[serde(flatten)]
    metrics: SampleMetrics,
}

fn names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    Ok(list_pngs(dir)?.iter().map(|p| file_name(p)).collect())
}

/// Per-file and mean metrics between two directories with matching file names.
pub fn cmd_eval(
    dir_a: &Path,
    dir_b: &Path,
    masks: Option<(&Path, &Path)>,
    classes: usize,
    table: &Path,
) -> Result<MetricReport, CliError> {
    let (na, nb) = (names(dir_a)?, names(dir_b)?);
    if na != nb {
        let only_a: Vec<&String> = na.difference(&nb).collect();
        let only_b: Vec<&String> = nb.difference(&na).collect();
        return Err(CliError::Data(format!(
            "file names differ: only in {}: {only_a:?}; only in {}: {only_b:?}",
            dir_a.display(),
            dir_b.display()
        )));
    }
    if na.is_empty() {
        return Err(CliError::Data(format!("no inputs: {} holds no PNG files", dir_a.display())));
    }
    let mut rows = Vec::with_capacity(na.len());
    for name in &na {
        let a = read_image(&dir_a.join(name))?;
        let b = read_image(&dir_b.join(name))?;
        let mm = match masks {
            Some((ma, mb)) => Some((read_mask(&ma.join(name), classes)?, read_mask(&mb.join(name), classes)?)),
            None => None,
        };
        let metrics = SampleMetrics::compute(&a, &b, mm.as_ref().map(|(p, r)| (p, r)))?;
        rows.push(EvalRow {
            file: name.clone(),
            metrics,
        });
    }
    let samples: Vec<SampleMetrics> = rows.iter().map(|r| r.metrics.clone()).collect();
    let report = MetricReport::from_samples(&samples)?;
    write_jsonl(table, &rows)?;
    Ok(report)
}

/// Runs every requested variant on one shared preparation.
pub fn cmd_reproduce(
    cfg: &PipelineConfig,
    variants: &[Variant],
    out_dir: &Path,
    device: &Device,
) -> Result<Vec<ReproduceReport>, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let prep = prepare(cfg, device)?;
    write_reproduction(&prep, cfg, variants, out_dir)
}

/// Adapts an existing preparation under every variant and writes all artifacts.
pub fn write_reproduction(
    prep: &Prepared,
    cfg: &PipelineConfig,
    variants: &[Variant],
    out_dir: &Path,
) -> Result<Vec<ReproduceReport>, CliError> {
    std::fs::create_dir_all(out_dir)?;
    save_enhancer(&prep.source, &out_dir.join("source.ckpt"))?;
    prep.picker.save(&out_dir.join("picker.ckpt"))?;
    write_jsonl(&out_dir.join("train.jsonl"), &prep.train_log)?;
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let (report, model) = run_variant(prep, cfg, *v)?;
        let tag = serde_json::to_value(v).expect("variant serializes");
        let tag = tag.as_str().expect("unit variant");
        save_enhancer(&model, &out_dir.join(format!("adapted-{tag}.ckpt")))?;
        write_jsonl(&out_dir.join(format!("report-{tag}.jsonl")), &report.rows)?;
        write_jsonl(&out_dir.join(format!("adapt-{tag}.jsonl")), &report.adapt_log)?;
        log::info!(
            "{tag}: SSIM {:.4} -> {:.4}, DICE {:.4} -> {:.4}, improved/unchanged/regressed {}/{}/{}",
            report.source().ssim,
            report.adapted().ssim,
            report.source().dice,
            report.adapted().dice,
            report.counts.improved,
            report.counts.unchanged,
            report.counts.regressed
        );
        reports.push(report);
    }
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    Ok(reports)
}
