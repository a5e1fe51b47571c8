//! Optimization loop: Adam with a milestone-halved learning rate, L1 loss
//! on sampled patches, periodic evaluation, checkpoints and exact resume.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdamSection, ExperimentConfig, Method, TrainerSection};
use crate::container::{HostTensor, TensorFile};
use crate::data::{self, DatasetManifest, Image, ImageCache, SampleSpec, Split};
use crate::encoder::SemanticEncoder;
use crate::error::{bail_arg, Error, Result};
use crate::metrics::{self, ConvFeatureNet, FeatureNet, ImageScores, MetricReport};
use crate::nn;
use crate::srnet::SrModel;

pub const CHECKPOINT_FORMAT: &str = "semguide-checkpoint/1";

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub total_iters: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, factor: f64, total_iters: usize) -> Result<Self> {
        if !milestones.windows(2).all(|w| w[0] < w[1]) {
            bail_arg!("milestones {milestones:?} must be strictly increasing");
        }
        if milestones.last().is_some_and(|&m| m >= total_iters) {
            bail_arg!("milestones {milestones:?} must be below total_iters {total_iters}");
        }
        Ok(Self {
            base_lr,
            milestones,
            factor,
            total_iters,
        })
    }

    pub fn from_section(t: &TrainerSection) -> Result<Self> {
        Self::new(t.base_lr, t.milestones.clone(), t.factor, t.total_iters)
    }
}

/// `base_lr · factor^(milestones ≤ iteration)`.
pub fn lr_at(schedule: &Schedule, iteration: usize) -> Result<f64> {
    if iteration >= schedule.total_iters {
        bail_arg!("iteration {iteration} outside [0, {})", schedule.total_iters);
    }
    let passed = schedule.milestones.iter().filter(|&&m| m <= iteration).count();
    Ok(schedule.base_lr * schedule.factor.powi(passed as i32))
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Debug)]
pub struct Adam {
    pub hyper: AdamSection,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(hyper: AdamSection) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn update(&mut self, vars: &[(String, Var)], grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamSection { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in vars {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let delta = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (delta * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn export(&self, file: &mut TensorFile) -> Result<()> {
        for (name, t) in &self.m {
            file.insert(format!("optim.m.{name}"), HostTensor::from_tensor(t)?);
        }
        for (name, t) in &self.v {
            file.insert(format!("optim.v.{name}"), HostTensor::from_tensor(t)?);
        }
        Ok(())
    }

    fn import(&mut self, file: &TensorFile, dtype: DType) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (key, t) in &file.tensors {
            if let Some(name) = key.strip_prefix("optim.m.") {
                self.m.insert(name.to_string(), t.to_tensor(dtype, &Device::Cpu)?);
            } else if let Some(name) = key.strip_prefix("optim.v.") {
                self.v.insert(name.to_string(), t.to_tensor(dtype, &Device::Cpu)?);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub best: bool,
}

/// Model, optimizer, sampling stream and progress of one run.
#[derive(Debug)]
pub struct Trainer {
    cfg: ExperimentConfig,
    model: SrModel,
    adam: Adam,
    schedule: Schedule,
    rng: ChaCha8Rng,
    iteration: usize,
    best_psnr: Option<f64>,
    manifest: Option<DatasetManifest>,
    cache: ImageCache,
    last_grad_norms: BTreeMap<String, f64>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.method != Method::Network {
            return Err(Error::Config(vec!["training needs method = \"network\"".into()]));
        }
        Ok(Self {
            cfg: cfg.clone(),
            model: SrModel::new(&cfg.model, DType::F32)?,
            adam: Adam::new(cfg.trainer.adam.clone()),
            schedule: Schedule::from_section(&cfg.trainer)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.trainer.seed),
            iteration: 0,
            best_psnr: None,
            manifest: None,
            cache: ImageCache::new(),
            last_grad_norms: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SrModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut SrModel {
        &mut self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn best_psnr(&self) -> Option<f64> {
        self.best_psnr
    }

    pub fn set_manifest(&mut self, manifest: DatasetManifest) {
        self.manifest = Some(manifest);
    }

    /// Per-parameter gradient L2 norms of the most recent step.
    pub fn last_grad_norms(&self) -> &BTreeMap<String, f64> {
        &self.last_grad_norms
    }

    /// L1 loss and named gradients for one batch, without updating.
    pub fn gradients(&self, lr: &Tensor, hr: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let pred = self.model.forward(lr)?;
        let loss = nn::l1_loss(&pred, hr)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Ok((value, BTreeMap::new()));
        }
        let store: GradStore = loss.backward()?;
        let grads = self
            .model
            .trainable_vars()
            .into_iter()
            .filter_map(|(n, v)| store.get(v.as_tensor()).map(|g| (n, g.clone())))
            .collect();
        Ok((value, grads))
    }

    /// One optimizer step on an explicit batch `(B, 3, P, P)` / `(B, 3, sP, sP)`.
    pub fn step_on(&mut self, lr_batch: &Tensor, hr_batch: &Tensor) -> Result<StepRecord> {
        let lr = lr_at(&self.schedule, self.iteration)?;
        let (loss, mut grads) = self.gradients(lr_batch, hr_batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                loss,
            });
        }
        self.last_grad_norms = grads
            .iter()
            .map(|(n, g)| Ok((n.clone(), g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt())))
            .collect::<Result<_>>()?;
        if let Some(max) = self.cfg.trainer.grad_clip {
            let total = self.last_grad_norms.values().map(|n| n * n).sum::<f64>().sqrt();
            if total > max {
                let k = max / (total + 1e-6);
                for g in grads.values_mut() {
                    *g = (&*g * k)?;
                }
            }
        }
        let vars = self.model.trainable_vars();
        self.adam.update(&vars, &grads, lr)?;
        let rec = StepRecord {
            iter: self.iteration,
            loss,
            lr,
        };
        self.iteration += 1;
        Ok(rec)
    }

    /// One optimizer step on a batch sampled from the manifest.
    pub fn step(&mut self) -> Result<StepRecord> {
        let Some(manifest) = &self.manifest else {
            bail_arg!("no dataset manifest attached to the trainer");
        };
        let t = &self.cfg.trainer;
        let spec = SampleSpec {
            patch: t.patch,
            batch: t.batch,
            scale: self.cfg.model.scale,
            augment: t.augment,
        };
        let samples = data::sample_batch(manifest, &mut self.cache, spec, &mut self.rng)?;
        let (lr, hr) = data::collate(&samples, &Device::Cpu)?;
        self.step_on(&lr, &hr)
    }

    pub fn checkpoint(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        self.model.export(&mut file)?;
        self.adam.export(&mut file)?;
        let meta = &mut file.metadata;
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("iteration".into(), self.iteration.to_string());
        meta.insert("adam_step".into(), self.adam.step.to_string());
        meta.insert("adam".into(), serde_json::to_string(&self.adam.hyper)?);
        meta.insert("rng".into(), serde_json::to_string(&self.rng)?);
        meta.insert("best_psnr".into(), serde_json::to_string(&self.best_psnr)?);
        Ok(file)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Restores a run. The model section and seeds of `cfg` must match the
    /// checkpoint; schedule length and output settings may differ.
    pub fn resume(cfg: &ExperimentConfig, path: &Path) -> Result<Self> {
        let file = TensorFile::load(path)?;
        let stored = stored_config(&file, path)?;
        let mut diffs = Vec::new();
        if stored.model != cfg.model {
            diffs.push("model".to_string());
        }
        if stored.trainer.seed != cfg.trainer.seed {
            diffs.push("trainer.seed".into());
        }
        if stored.trainer.adam != cfg.trainer.adam {
            diffs.push("trainer.adam".into());
        }
        if !diffs.is_empty() {
            return Err(Error::Config(
                diffs
                    .into_iter()
                    .map(|d| format!("{d} differs from checkpoint {}", path.display()))
                    .collect(),
            ));
        }
        let mut t = Self::new(cfg)?;
        t.model.import(&file)?;
        t.adam.import(&file, DType::F32)?;
        let meta = |key: &str| -> Result<&String> {
            file.metadata
                .get(key)
                .ok_or_else(|| Error::format(path, format!("checkpoint lacks {key}")))
        };
        let parse_err = |key: &str| Error::format(path, format!("bad {key} entry"));
        t.iteration = meta("iteration")?.parse().map_err(|_| parse_err("iteration"))?;
        t.adam.step = meta("adam_step")?.parse().map_err(|_| parse_err("adam_step"))?;
        t.rng = serde_json::from_str(meta("rng")?)?;
        t.best_psnr = serde_json::from_str(meta("best_psnr")?)?;
        Ok(t)
    }
}

fn stored_config(file: &TensorFile, path: &Path) -> Result<ExperimentConfig> {
    if file.metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::format(path, "not a checkpoint (format tag missing)"));
    }
    let text = file
        .metadata
        .get("config")
        .ok_or_else(|| Error::format(path, "checkpoint lacks config"))?;
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log: PathBuf,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn append_line(file: &mut File, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) a training run described by `cfg` and writes
/// `train_log.jsonl`, `eval_log.jsonl` and checkpoints under the output directory.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = match resume {
        Some(p) => Trainer::resume(cfg, p)?,
        None => Trainer::new(cfg)?,
    };
    let manifest = DatasetManifest::load(&cfg.data.manifest)?;
    t.set_manifest(manifest.clone());
    let out = &cfg.trainer.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.jsonl");
    let eval_path = out.join("eval_log.jsonl");
    let open = |p: &Path| -> Result<File> {
        let mut o = OpenOptions::new();
        o.create(true);
        if resume.is_some() {
            o.append(true);
        } else {
            o.write(true).truncate(true);
        }
        o.open(p).map_err(|e| Error::io(p, e))
    };
    let mut log = open(&log_path)?;
    let mut eval_log = open(&eval_path)?;

    let best_path = out.join("best.safetensors");
    let mut best_checkpoint = best_path.exists().then(|| best_path.clone());
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let interval = cfg.trainer.eval_interval();
    let opts = EvalOptions::from_config(cfg, Split::Test);
    while t.iteration < cfg.trainer.total_iters {
        let rec = match t.step() {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                t.save_checkpoint(&out.join("nan_abort.safetensors"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        append_line(&mut log, &log_path, &rec)?;
        records.push(rec);
        let done = t.iteration;
        if done % cfg.trainer.checkpoint_every == 0 {
            t.save_checkpoint(&out.join(format!("iter_{done:08}.safetensors")))?;
        }
        let at_end = done == cfg.trainer.total_iters;
        if interval > 0 && (done % interval == 0 || at_end) && manifest.count(Split::Test) > 0 {
            let report = evaluate_model(&Upscaler::Network(&t.model), cfg, &manifest, &opts)?;
            let psnr = report.overall.psnr;
            let best = match (psnr, t.best_psnr) {
                (Some(p), Some(b)) => p > b,
                (Some(_), None) => true,
                _ => false,
            };
            if best {
                t.best_psnr = psnr;
                t.save_checkpoint(&best_path)?;
                best_checkpoint = Some(best_path.clone());
            }
            let e = EvalRecord {
                iter: done,
                psnr,
                ssim: report.overall.ssim,
                best,
            };
            append_line(&mut eval_log, &eval_path, &e)?;
            evals.push(e);
        }
    }
    let last_checkpoint = out.join("last.safetensors");
    t.save_checkpoint(&last_checkpoint)?;
    Ok(TrainOutcome {
        last_checkpoint,
        best_checkpoint,
        log: log_path,
        records,
        evals,
    })
}

// ---------------------------------------------------------------- evaluation

/// Something that maps an LR image to an SR image.
#[derive(Debug)]
pub enum Upscaler<'a> {
    Network(&'a SrModel),
    Bicubic { scale: usize },
}

impl Upscaler<'_> {
    pub fn scale(&self) -> usize {
        match self {
            Upscaler::Network(m) => m.scale(),
            Upscaler::Bicubic { scale } => *scale,
        }
    }

    /// Unclamped SR output.
    pub fn upscale(&self, lr: &Image) -> Result<Image> {
        match self {
            Upscaler::Network(m) => {
                let x = data::to_batch(&[lr], &Device::Cpu)?;
                Ok(data::from_batch(&m.forward(&x)?)?.remove(0))
            }
            Upscaler::Bicubic { scale } => {
                let (_, h, w) = lr.dim();
                data::bicubic_resize(&lr.view(), h * scale, w * scale)
            }
        }
    }
}

/// A loaded checkpoint: the configuration plus, for network runs, the model.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub config: ExperimentConfig,
    pub model: Option<SrModel>,
    pub iteration: usize,
}

impl LoadedCheckpoint {
    pub fn upscaler(&self) -> Upscaler<'_> {
        match &self.model {
            Some(m) => Upscaler::Network(m),
            None => Upscaler::Bicubic {
                scale: self.config.model.scale,
            },
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = TensorFile::load(path)?;
    let config = stored_config(&file, path)?;
    let iteration = file
        .metadata
        .get("iteration")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let model = match config.method {
        Method::Network => {
            let m = SrModel::new(&config.model, DType::F32)?;
            m.import(&file)?;
            Some(m)
        }
        Method::Bicubic => None,
    };
    Ok(LoadedCheckpoint {
        config,
        model,
        iteration,
    })
}

/// Writes a parameter-free checkpoint for `method = "bicubic"` configs.
pub fn save_reference_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut file = TensorFile::new();
    file.metadata.insert("format".into(), CHECKPOINT_FORMAT.into());
    file.metadata.insert("config".into(), serde_json::to_string(cfg)?);
    file.metadata.insert("iteration".into(), "0".into());
    file.save(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    /// Restrict to these classes; an empty selection is an error.
    pub classes: Option<Vec<String>>,
    pub y_channel: bool,
    pub lpips: bool,
    pub lpips_weights: Option<PathBuf>,
    pub clipscore: bool,
    pub class_balanced: bool,
    pub max_images: Option<usize>,
}

impl EvalOptions {
    pub fn from_config(cfg: &ExperimentConfig, split: Split) -> Self {
        let m = &cfg.metrics;
        Self {
            split,
            classes: None,
            y_channel: m.y_channel,
            lpips: m.lpips,
            lpips_weights: m.lpips_weights.clone(),
            clipscore: m.clipscore,
            class_balanced: m.class_balanced,
            max_images: cfg.trainer.eval_max_images,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Full-image evaluation: each HR image is cropped to a multiple of
/// `lcm(scale, patch)`, degraded, upscaled, clamped to `[0, 1]` and scored.
pub fn evaluate_model(
    up: &Upscaler<'_>,
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let mut entries = manifest.entries(opts.split);
    if let Some(classes) = &opts.classes {
        entries.retain(|e| classes.contains(&e.class_name));
        if entries.is_empty() {
            bail_arg!(
                "no {:?} images for classes {:?}; valid classes: {}",
                opts.split,
                classes,
                manifest.class_names().join(", ")
            );
        }
    }
    if entries.is_empty() {
        bail_arg!("the {:?} split is empty", opts.split);
    }
    if let Some(n) = opts.max_images {
        entries.truncate(n);
    }
    let s = up.scale();
    let p = cfg.model.encoder.patch_size.max(1);
    let multiple = s * p / gcd(s, p);

    let stub_encoder;
    let encoder: Option<&SemanticEncoder> = if opts.clipscore {
        match up {
            Upscaler::Network(m) if m.encoder().is_some() => m.encoder(),
            _ => {
                let mut e = SemanticEncoder::new(&cfg.model.encoder.architecture(), DType::F32)?;
                if let Some(w) = &cfg.model.encoder.weights {
                    e.load_pretrained(crate::resolve_weights_path(w))?;
                }
                stub_encoder = e;
                Some(&stub_encoder)
            }
        }
    } else {
        None
    };
    let lpips_net: Option<Box<dyn FeatureNet>> = match (opts.lpips, &opts.lpips_weights) {
        (false, _) => None,
        (true, Some(w)) => Some(Box::new(ConvFeatureNet::load(&crate::resolve_weights_path(w))?)),
        (true, None) => Some(Box::new(ConvFeatureNet::stub(&[8, 16], 0)?)),
    };

    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        let hr = data::crop_to_multiple(&data::load_image(&e.path)?.view(), multiple)?;
        let lr = data::degrade(&hr.view(), s)?;
        let sr = up.upscale(&lr)?.mapv(|v| v.clamp(0.0, 1.0));
        let (a, b) = if opts.y_channel {
            (metrics::to_luma(&sr.view())?, metrics::to_luma(&hr.view())?)
        } else {
            (sr.clone(), hr.clone())
        };
        let rel = e.path.strip_prefix(&manifest.root).unwrap_or(&e.path);
        rows.push(ImageScores {
            path: rel.display().to_string(),
            class_name: e.class_name.clone(),
            psnr: metrics::psnr(&a.view(), &b.view(), 1.0)?,
            ssim: metrics::ssim(&a.view(), &b.view())?,
            lpips: match &lpips_net {
                Some(n) => Some(metrics::lpips(&sr.view(), &hr.view(), n.as_ref())?),
                None => None,
            },
            clipscore: match encoder {
                Some(enc) => Some(metrics::clipscore(&sr.view(), &hr.view(), enc)?),
                None => None,
            },
        });
    }
    Ok(MetricReport::new(rows, opts.class_balanced))
}

/// Loads a checkpoint and evaluates it on a manifest split.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<MetricReport> {
    let ck = load_checkpoint(checkpoint)?;
    evaluate_model(&ck.upscaler(), &ck.config, manifest, opts)
}
