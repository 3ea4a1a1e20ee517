use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sfuda_core::degrade::DegradationFamily;

use crate::config::Preset;
use crate::reproduce::Variant;

#[derive(Parser, Debug)]
#[command(name = "sfuda", version, about = "Source-free adaptive image enhancement pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = Preset::DeskScale)]
    pub preset: Preset,

    /// JSON file whose fields override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dotted-path override such as `adapt.epochs=50`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Interference,
    Cataract,
}

impl From<FamilyArg> for DegradationFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Interference => DegradationFamily::Interference,
            FamilyArg::Cataract => DegradationFamily::Cataract,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    L1Only,
    NoPicker,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::L1Only => Variant::L1Only,
            VariantArg::NoPicker => Variant::NoPicker,
        }
    }
}

/// Clean images with masks, from directories or generated.
#[derive(Args, Debug, Clone)]
pub struct CleanSource {
    /// Directory of clean RGB PNGs.
    #[arg(long, requires = "mask_dir", conflicts_with = "toy")]
    pub clean_dir: Option<PathBuf>,

    /// Directory of class-index mask PNGs named like the clean images.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,

    /// Generate this many procedural clean images instead.
    #[arg(long)]
    pub toy: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Degrade clean images into (x, y, m) training triples.
    Synth {
        #[command(flatten)]
        clean: CleanSource,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = FamilyArg::Interference)]
        family: FamilyArg,
        /// Degradations per clean image; defaults to the preset's value.
        #[arg(long)]
        per_image: Option<usize>,
    },
    /// Train the source enhancer on a synthesized dataset.
    TrainSource {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the quality assessor and structure detector.
    TrainPicker {
        #[command(flatten)]
        clean: CleanSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source model to unlabeled target images.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, required_unless_present = "no_picker")]
        picker: Option<PathBuf>,
        #[arg(long)]
        target_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ema: Option<f64>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Admit every teacher output as a pseudo-label.
        #[arg(long)]
        no_picker: bool,
    },
    /// Enhance every PNG in a directory.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Also write predicted class-index masks to `<output_dir>/masks`.
        #[arg(long)]
        masks: bool,
    },
    /// Compare two directories of images (and optionally masks).
    Eval {
        #[arg(long)]
        dir_a: PathBuf,
        #[arg(long)]
        dir_b: PathBuf,
        #[arg(long, requires = "mask_dir_b")]
        mask_dir_a: Option<PathBuf>,
        #[arg(long, requires = "mask_dir_a")]
        mask_dir_b: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long)]
        table: PathBuf,
    },
    /// Run the self-contained cross-domain experiment end to end.
    Reproduce {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "full")]
        variants: Vec<VariantArg>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainSource { .. } => "train-source",
            Command::TrainPicker { .. } => "train-picker",
            Command::Adapt { .. } => "adapt",
            Command::Enhance { .. } => "enhance",
            Command::Eval { .. } => "eval",
            Command::Reproduce { .. } => "reproduce",
        }
    }
}
