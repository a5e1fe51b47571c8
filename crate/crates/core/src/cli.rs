//! Command-line surface: `split`, `degrade`, `train`, `eval`, `infer` and
//! `export-maps`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, CONFIG_KEYS};
use crate::data::{self, DatasetManifest, Split};
use crate::encoder::LoraConfig;
use crate::error::{bail_arg, Error, Result};
use crate::srnet::{SrModel, Variant};
use crate::trainer::{self, EvalOptions};

#[derive(Debug, Parser)]
#[command(name = "semguide", version, about = "Semantic-guided image super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition a class-per-directory image tree into train/test lists.
    #[command(after_help = CONFIG_KEYS)]
    Split(SplitArgs),
    /// Write bicubic LR counterparts of every image in a tree.
    #[command(after_help = CONFIG_KEYS)]
    Degrade(DegradeArgs),
    /// Train a model from a config file.
    #[command(after_help = CONFIG_KEYS)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    #[command(after_help = CONFIG_KEYS)]
    Eval(EvalArgs),
    /// Super-resolve images with a checkpoint.
    #[command(after_help = CONFIG_KEYS)]
    Infer(InferArgs),
    /// Write the per-unit guidance maps of each input image.
    #[command(name = "export-maps", after_help = CONFIG_KEYS)]
    ExportMaps(InferArgs),
}

fn parse_ratio(s: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected TRAIN:TEST, got {s:?}"))?;
    let a: u32 = a.trim().parse().map_err(|_| format!("bad ratio part {a:?}"))?;
    let b: u32 = b.trim().parse().map_err(|_| format!("bad ratio part {b:?}"))?;
    if a == 0 || b == 0 {
        return Err("ratio parts must be positive".into());
    }
    Ok((a, b))
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Directory with one subdirectory per class.
    #[arg(long)]
    pub root: PathBuf,
    /// Train:test ratio.
    #[arg(long, default_value = "3:1", value_parser = parse_ratio)]
    pub ratio: (u32, u32),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale recorded in the manifest.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Output manifest path.
    #[arg(long, default_value = "manifest.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `trainer.total_iters`.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Overrides `trainer.base_lr`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides `trainer.batch`.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Overrides `trainer.patch`.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Overrides `trainer.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `trainer.output_dir`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides `model.scale`.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Overrides `model.units`.
    #[arg(long)]
    pub units: Option<usize>,
    /// Overrides `model.variant` (baseline, sfem, sfem_lmm, full).
    #[arg(long)]
    pub variant: Option<String>,
    /// Overrides `model.encoder.lora.rank`.
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Restrict to a class (repeatable).
    #[arg(long = "class")]
    pub classes: Vec<String>,
    /// PSNR/SSIM on BT.601 luma.
    #[arg(long)]
    pub y_channel: bool,
    #[arg(long)]
    pub no_lpips: bool,
    #[arg(long)]
    pub no_clipscore: bool,
    #[arg(long)]
    pub class_balanced: bool,
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Report directory (`report.csv`, `report.json`).
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories of images.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// 0 success, 2 non-finite loss, 3 configuration error, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(a) => cmd_split(&a),
        Command::Degrade(a) => cmd_degrade(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::ExportMaps(a) => cmd_export_maps(&a),
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(Error::Config(vec![format!("{what} {} is not a directory", p.display())]));
    }
    Ok(())
}

pub fn cmd_split(a: &SplitArgs) -> Result<()> {
    require_dir(&a.root, "dataset root")?;
    let mut m = data::split_dataset(&a.root, a.ratio, a.seed)?;
    m.scale = a.scale;
    m.save(&a.out)?;
    for c in &m.classes {
        println!("{:<24} {:>6} {:>6}", c.name, c.train.len(), c.test.len());
    }
    println!(
        "{:<24} {:>6} {:>6}",
        "total",
        m.count(Split::Train),
        m.count(Split::Test)
    );
    Ok(())
}

pub fn cmd_degrade(a: &DegradeArgs) -> Result<()> {
    require_dir(&a.root, "image root")?;
    let n = data::degrade_tree(&a.root, &a.out, a.scale)?;
    println!("wrote {n} images to {}", a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.trainer;
    if let Some(v) = a.iters {
        t.total_iters = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.patch {
        t.patch = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = &a.output {
        t.output_dir = v.clone();
    }
    if let Some(v) = &a.manifest {
        cfg.data.manifest = v.clone();
    }
    let m = &mut cfg.model;
    if let Some(v) = a.scale {
        m.scale = v;
    }
    if let Some(v) = a.units {
        m.units = v;
        if m.backbone.total_blocks % v != 0 {
            m.backbone.total_blocks = v;
        }
    }
    if let Some(v) = &a.variant {
        m.variant = serde_json::from_value(serde_json::Value::String(v.clone()))
            .map_err(|_| Error::Config(vec![format!("unknown variant {v:?}")]))?;
    }
    if let Some(r) = a.rank {
        let targets = m.encoder.lora.map(|l| l.targets).unwrap_or(crate::encoder::LoraTargets::AttentionFfn);
        m.encoder.lora = Some(LoraConfig { rank: r, targets });
    }
    cfg.validate()
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut cfg, a)?;
    let out = &cfg.trainer.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out, e))?;
    if cfg.method == Method::Bicubic {
        let p = out.join("last.safetensors");
        trainer::save_reference_checkpoint(&cfg, &p)?;
        println!("bicubic reference checkpoint: {}", p.display());
        return Ok(());
    }
    let outcome = trainer::train(&cfg, a.resume.as_deref())?;
    if let Some(r) = outcome.records.last() {
        println!("iter {} loss {:.6} lr {:.3e}", r.iter, r.loss, r.lr);
    }
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    if let Some(b) = &outcome.best_checkpoint {
        println!("best checkpoint: {}", b.display());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ck = trainer::load_checkpoint(&a.checkpoint)?;
    let mut opts = EvalOptions::from_config(&ck.config, a.split.parse()?);
    if !a.classes.is_empty() {
        opts.classes = Some(a.classes.clone());
    }
    opts.y_channel |= a.y_channel;
    opts.lpips &= !a.no_lpips;
    opts.clipscore &= !a.no_clipscore;
    opts.class_balanced |= a.class_balanced;
    if a.max_images.is_some() {
        opts.max_images = a.max_images;
    }
    let report = trainer::evaluate_model(&ck.upscaler(), &ck.config, &manifest, &opts)?;
    report.write(&a.out, "report")?;
    println!("{:<24} {:>6} {:>9} {:>7}", "class", "images", "psnr", "ssim");
    for (name, s) in &report.per_class {
        println!("{:<24} {:>6} {:>9.4} {:>7.4}", name, s.count, s.psnr.unwrap_or(f64::INFINITY), s.ssim);
    }
    let o = &report.overall;
    println!("{:<24} {:>6} {:>9.4} {:>7.4}", "overall", o.count, o.psnr.unwrap_or(f64::INFINITY), o.ssim);
    Ok(())
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.is_file()
                        && f.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| data::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail_arg!("no input images");
    }
    Ok(out)
}

/// Crops an LR image so the model accepts it.
fn fit_input(img: &data::Image, model: Option<&SrModel>) -> Result<data::Image> {
    let multiple = match model.and_then(|m| m.encoder().map(|e| (m.scale(), e.patch_size()))) {
        Some((s, p)) => p / gcd(p, s),
        None => 1,
    };
    let out = data::crop_to_multiple(&img.view(), multiple)?;
    if out.dim() != img.dim() {
        log::warn!("cropped input {:?} to {:?} for the encoder patch grid", img.dim(), out.dim());
    }
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ck = trainer::load_checkpoint(&a.checkpoint)?;
    let up = ck.upscaler();
    for p in collect_inputs(&a.input)? {
        let lr = fit_input(&data::load_image(&p)?, ck.model.as_ref())?;
        let sr = up.upscale(&lr)?;
        let dst = a.out.join(format!("{}_x{}.png", stem(&p), up.scale()));
        data::save_png(&dst, &sr.view())?;
        println!("{}", dst.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MapInfo {
    unit: usize,
    file: String,
    min: f32,
    max: f32,
}

#[derive(Debug, Serialize)]
struct MapSidecar {
    source: String,
    height: usize,
    width: usize,
    /// Stored pixel value `v` maps back to `v / 255 · 2 − 1`.
    encoding: &'static str,
    maps: Vec<MapInfo>,
}

pub fn cmd_export_maps(a: &InferArgs) -> Result<()> {
    let ck = trainer::load_checkpoint(&a.checkpoint)?;
    let model = match &ck.model {
        Some(m) if m.config().variant == Variant::Full => m,
        _ => return Err(Error::Config(vec!["export-maps needs a checkpoint of the full variant".into()])),
    };
    for p in collect_inputs(&a.input)? {
        let lr = fit_input(&data::load_image(&p)?, Some(model))?;
        let x = data::to_batch(&[&lr], &candle_core::Device::Cpu)?;
        let maps = model.guidance(&x)?.expect("full variant has maps");
        let (_, h, w) = lr.dim();
        let mut infos = Vec::new();
        for i in 0..maps.len() {
            let m = data::from_batch(&maps.unit(i)?)?.remove(0);
            let min = m.iter().copied().fold(f32::INFINITY, f32::min);
            let max = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let file = format!("{}_unit{i}.png", stem(&p));
            data::save_png(&a.out.join(&file), &m.mapv(|v| (v + 1.0) / 2.0).view())?;
            infos.push(MapInfo { unit: i, file, min, max });
        }
        let sidecar = MapSidecar {
            source: p.display().to_string(),
            height: h,
            width: w,
            encoding: "[-1, 1] -> [0, 255]",
            maps: infos,
        };
        let json = a.out.join(format!("{}_maps.json", stem(&p)));
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&json, e))?;
        println!("{}", json.display());
    }
    Ok(())
}
