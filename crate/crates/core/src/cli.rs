//! Command-line front end. Exit codes: 0 success, 1 invalid input or
//! configuration, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOptions};
use crate::material::{bicubic_resample_set, load_material_set, save_material_set, save_png, BitDepth, DatasetIndex, MapKind, Split};
use crate::model::ModelConfig;
use crate::render::{fibonacci_hemisphere, linear_to_srgb, render_set, LightSet, ShadingParams};
use crate::train::{load_pairs, run_training, TrainConfig};

pub const THREADS_ENV: &str = "MUJICA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mujica", version, about = "Joint super-resolution of PBR material maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write bicubic LR trees `<material>/lr_x{s}/` next to each HR material.
    Prepare(PrepareArgs),
    /// Train the adapter on a dataset root.
    Train(TrainArgs),
    /// Upscale one LR material directory.
    Upscale(UpscaleArgs),
    /// Render a material under point lights.
    Render(RenderArgs),
    /// Score a checkpoint against HR materials and the bicubic baseline.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4])]
    pub scales: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON with optional `model`, `train`, `data` and `out` entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct UpscaleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Must equal the checkpoint's scale when given.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub tile_overlap: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "light_file")]
    pub lights: Option<usize>,
    /// JSON light set: `{"lights": [{"direction": [x, y, z], "intensity": i}]}`.
    #[arg(long)]
    pub light_file: Option<PathBuf>,
    #[arg(long)]
    pub srgb: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Bicubic,
    None,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub gt_substitute: bool,
    #[arg(long, value_enum, default_value = "bicubic")]
    pub baseline: Baseline,
    #[arg(long, default_value_t = 6)]
    pub lights: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Contents of `train --config`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::MissingMap { .. } | Error::Resolution(_) => 1,
        _ => 2,
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a),
        Command::Upscale(a) => upscale(&a),
        Command::Render(a) => render(&a),
        Command::Eval(a) => eval(&a),
    }
}

/// Immediate subdirectories of `root` holding at least one map.
fn material_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for e in fs::read_dir(root)? {
        let p = e?.path();
        if p.is_dir() && MapKind::ALL.iter().any(|k| p.join(k.file_name()).exists()) {
            v.push(p);
        }
    }
    if v.is_empty() {
        return Err(Error::Invalid(format!("no material directories under {}", root.display())));
    }
    v.sort();
    Ok(v)
}

/// Every material directory under `root` gets one LR tree per scale.
/// Failures are reported per material and scale; the first is returned
/// after all others have been attempted.
pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let mut first_err = None;
    for dir in material_dirs(&a.root)? {
        let hr = match load_material_set(&dir, &[]) {
            Ok((s, _)) => s,
            Err(e) => {
                eprintln!("{}: {e}", dir.display());
                first_err.get_or_insert(e);
                continue;
            }
        };
        for &s in &a.scales {
            let res = hr
                .resolution()
                .filter(|&(h, w)| h % s == 0 && w % s == 0)
                .ok_or_else(|| Error::Resolution(format!("{} is not divisible by {s}", dir.display())))
                .and_then(|_| bicubic_resample_set(&hr, 1.0 / s as f64))
                .and_then(|lr| save_material_set(&lr, &dir.join(format!("lr_x{s}")), BitDepth::Sixteen));
            if let Err(e) = res {
                eprintln!("{} x{s}: {e}", dir.display());
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(v) = a.seed {
        c.train.seed = v;
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        c.train.steps_per_epoch = v;
    }
    if let Some(v) = a.lr0 {
        c.train.lr0 = v;
    }
    if let Some(v) = a.warmup_steps {
        c.train.warmup_steps = v;
    }
    let data = a.data.clone().or(c.data).ok_or_else(|| Error::Config("no dataset root (--data)".into()))?;
    let out = a.out.clone().or(c.out).ok_or_else(|| Error::Config("no output directory (--out)".into()))?;
    c.model.validate()?;
    c.train.validate(&c.model)?;
    let pairs = load_pairs(&DatasetIndex::open(&data, Split::Train)?, &c.model)?;
    let outcome = run_training(&pairs, c.model, c.train, &out, a.resume.as_deref())?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

pub fn upscale(a: &UpscaleArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.checkpoint)?;
    if let Some(s) = a.scale {
        if s != model.config.scale {
            return Err(Error::Config(format!("--scale {s} but the checkpoint upscales by {}", model.config.scale)));
        }
    }
    let (lr, _) = load_material_set(&a.input, &model.config.fused_kinds())?;
    let sr = match a.tile {
        Some(t) => model.upscale_tiled(&lr, t, a.tile_overlap)?,
        None => model.upscale(&lr)?,
    };
    save_material_set(&sr, &a.out, BitDepth::Sixteen)
}

fn load_lights(a: &RenderArgs) -> Result<LightSet> {
    match (&a.light_file, a.lights) {
        (Some(p), _) => LightSet::from_json(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("light file {}: {e}", p.display()))),
        (None, n) => fibonacci_hemisphere(n.unwrap_or(3)),
    }
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let lights = load_lights(a)?;
    let (set, _) = load_material_set(&a.input, &[MapKind::Basecolor, MapKind::Normal, MapKind::Roughness])?;
    fs::create_dir_all(&a.out)?;
    for (i, img) in render_set(&set, &lights, &ShadingParams::default())?.into_iter().enumerate() {
        let img = if a.srgb { img.map(linear_to_srgb) } else { img };
        save_png(&img, &a.out.join(format!("render_{i:02}.png")), BitDepth::Eight, false)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.checkpoint)?;
    let index = DatasetIndex::open(&a.data, a.split.into())?;
    let pairs = load_pairs(&index, &model.config)?;
    let opts = EvalOptions {
        gt_substitute: a.gt_substitute,
        baseline_bicubic: a.baseline == Baseline::Bicubic,
        lights_n: a.lights,
    };
    fs::create_dir_all(&a.out)?;
    let report = evaluate_model(&model, &pairs, &opts, &ShadingParams::default(), Some(&a.out))?;
    fs::write(a.out.join("report.json"), report.to_json())?;
    report.write_csv(&a.out.join("report.csv"))?;
    println!("mean render psnr {:.3} dB", report.mean_render_psnr);
    if let Some(b) = report.mean_baseline_render_psnr {
        println!("bicubic render psnr {b:.3} dB");
    }
    Ok(())
}
