//! Experiment configuration: one TOML file per run. Every key is optional;
//! unknown keys are rejected all at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::srnet::{ModelConfig, UnitStyle};

/// Documentation of every configuration key, shown by `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (TOML; every key optional, defaults in brackets)
  method                          network | bicubic [network]
  [model]
  scale                           upscaling factor: 2, 3 or 4 [4]
  units                           SR unit count k [6]
  channels                        feature channels C_f [60]
  variant                         baseline | sfem | sfem_lmm | full [full]
  seed                            parameter init seed [0]
  [model.backbone]
  style                           residual | channel_attention | hybrid_attention [hybrid_attention]
  total_blocks                    blocks split evenly over the units [6]
  [model.backbone.options]
  res_scale blocks_per_group reduction hybrid_blocks window heads
  mlp_ratio shift conv_scale conv_compress      unit internals [1.0 2 4 2 8 6 2 true 0.01 3]
  [model.encoder]
  weights                         pretrained container, relative to $SEMGUIDE_HOME if set [stub]
  patch_size width depth heads mlp_dim grid      [16 64 4 2 128 4]
  projection_dim                  embedding head width [none]
  seed                            stub weight seed [0]
  [model.encoder.lora]
  rank                            adapter rank r [32]
  targets                         attention | attention_ffn [attention_ffn]
  [model.localization]
  attention_heads shared_fusion cosine_eps      [1 true 1e-8]
  unit_descriptors global_descriptor global_feature   SLM ablation switches [true true true]
  [model.modulation]
  kernel shared_trunk             [3 true]
  [data]
  root                            class-per-directory image tree
  manifest                        split manifest path [manifest.json]
  ratio                           [train, test] parts [[3, 1]]
  seed                            split seed [0]
  [trainer]
  total_iters milestones base_lr factor         [80000 [50000] 1e-4 0.5]
  batch patch augment             batch size, LR patch side, dihedral augmentation [4 64 true]
  checkpoint_every                [5000]
  eval_every                      0 disables; unset = total_iters/10
  eval_max_images                 cap on evaluated test images [all]
  grad_clip                       max global gradient norm [off]
  seed                            sampling seed [0]
  output_dir                      [runs/default]
  [trainer.adam]
  beta1 beta2 eps                 [0.9 0.999 1e-8]
  [metrics]
  y_channel                       PSNR/SSIM on BT.601 luma [false]
  lpips clipscore                 [true true]
  lpips_weights                   feature-net container [seeded stub]
  class_balanced                  overall = mean of class means [false]
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Network,
    /// Parameter-free bicubic upsampling, used as a reference.
    Bicubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub manifest: PathBuf,
    pub ratio: (u32, u32),
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            manifest: PathBuf::from("manifest.json"),
            ratio: (3, 1),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerSection {
    pub total_iters: usize,
    pub milestones: Vec<usize>,
    pub base_lr: f64,
    pub factor: f64,
    pub batch: usize,
    pub patch: usize,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub eval_every: Option<usize>,
    pub eval_max_images: Option<usize>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub adam: AdamSection,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            total_iters: 80_000,
            milestones: vec![50_000],
            base_lr: 1e-4,
            factor: 0.5,
            batch: 4,
            patch: 64,
            augment: true,
            checkpoint_every: 5_000,
            eval_every: None,
            eval_max_images: None,
            grad_clip: None,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            adam: AdamSection::default(),
        }
    }
}

impl TrainerSection {
    /// 120k iterations halved at 60k and 100k.
    pub fn aid() -> Self {
        Self {
            total_iters: 120_000,
            milestones: vec![60_000, 100_000],
            ..Self::default()
        }
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or((self.total_iters / 10).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub y_channel: bool,
    pub lpips: bool,
    pub lpips_weights: Option<PathBuf>,
    pub clipscore: bool,
    pub class_balanced: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            y_channel: false,
            lpips: true,
            lpips_weights: None,
            clipscore: true,
            class_balanced: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub data: DataSection,
    pub trainer: TrainerSection,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Network,
            model: ModelConfig::default(),
            data: DataSection::default(),
            trainer: TrainerSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys and invalid values are all
    /// reported in one error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
        if !unknown.is_empty() {
            return Err(Error::Config(
                unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(list) => Error::Config(
                list.into_iter().map(|m| format!("{}: {m}", path.display())).collect(),
            ),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let m = &self.model;
        if !matches!(m.scale, 2..=4) {
            bad.push(format!("model.scale = {} (expected 2, 3 or 4)", m.scale));
        }
        if m.units == 0 {
            bad.push("model.units must be positive".into());
        }
        if m.channels == 0 {
            bad.push("model.channels must be positive".into());
        }
        if m.units > 0 && m.backbone.total_blocks % m.units != 0 {
            bad.push(format!(
                "model.backbone.total_blocks = {} is not divisible by model.units = {}",
                m.backbone.total_blocks, m.units
            ));
        }
        let o = &m.backbone.options;
        if m.backbone.style == UnitStyle::HybridAttention && (o.heads == 0 || m.channels % o.heads != 0) {
            bad.push(format!(
                "model.channels = {} is not divisible by model.backbone.options.heads = {}",
                m.channels, o.heads
            ));
        }
        if self.method == Method::Network && m.variant.uses_encoder() {
            if let Err(e) = m.encoder.architecture().validate() {
                bad.push(format!("model.encoder: {e}"));
            }
        }
        let t = &self.trainer;
        if t.total_iters == 0 {
            bad.push("trainer.total_iters must be positive".into());
        }
        if !t.milestones.windows(2).all(|w| w[0] < w[1]) {
            bad.push(format!("trainer.milestones {:?} must be strictly increasing", t.milestones));
        }
        if t.milestones.last().is_some_and(|&l| l >= t.total_iters) {
            bad.push(format!(
                "trainer.milestones {:?} must be below total_iters = {}",
                t.milestones, t.total_iters
            ));
        }
        if !(t.base_lr > 0.0) || !(t.factor > 0.0) {
            bad.push("trainer.base_lr and trainer.factor must be positive".into());
        }
        if t.batch == 0 {
            bad.push("trainer.batch must be positive".into());
        }
        if t.patch < 8 {
            bad.push(format!("trainer.patch = {} is below the 8-pixel minimum", t.patch));
        }
        let p = m.encoder.patch_size;
        if self.method == Method::Network && m.variant.uses_encoder() && p > 0 && (t.patch * m.scale) % p != 0 {
            bad.push(format!(
                "trainer.patch × model.scale = {} is not divisible by model.encoder.patch_size = {p}",
                t.patch * m.scale
            ));
        }
        if t.checkpoint_every == 0 {
            bad.push("trainer.checkpoint_every must be positive".into());
        }
        if t.grad_clip.is_some_and(|g| !(g > 0.0)) {
            bad.push("trainer.grad_clip must be positive".into());
        }
        let a = &t.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            bad.push("trainer.adam needs 0 ≤ beta < 1 and eps > 0".into());
        }
        if self.data.ratio.0 == 0 || self.data.ratio.1 == 0 {
            bad.push(format!("data.ratio {:?} must have positive parts", self.data.ratio));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srnet::Variant;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.units, 6);
        assert_eq!(cfg.model.encoder.lora.unwrap().rank, 32);
        assert_eq!(cfg.trainer.base_lr, 1e-4);
        assert_eq!((cfg.trainer.batch, cfg.trainer.patch), (4, 64));
    }

    #[test]
    fn partial_tables_merge_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "[model]\nscale = 2\nvariant = \"sfem\"\n[model.encoder.lora]\nrank = 4\ntargets = \"attention\"\n",
        )
        .unwrap();
        assert_eq!(cfg.model.scale, 2);
        assert_eq!(cfg.model.variant, Variant::Sfem);
        assert_eq!(cfg.model.units, 6);
        assert_eq!(cfg.model.encoder.width, 64);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = ExperimentConfig::from_toml_str("bogus = 1\n[model]\nunitz = 3\n[trainer.adam]\nbeta3 = 0.5\n")
            .unwrap_err();
        let Error::Config(list) = err else { panic!("{err}") };
        assert_eq!(list.len(), 3, "{list:?}");
        for key in ["bogus", "model.unitz", "trainer.adam.beta3"] {
            assert!(list.iter().any(|l| l.contains(key)), "{key} missing from {list:?}");
        }
    }

    #[test]
    fn invalid_values_are_all_reported() {
        let err = ExperimentConfig::from_toml_str(
            "[model]\nscale = 5\n[trainer]\nmilestones = [10, 5]\ntotal_iters = 4\nbatch = 0\n",
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!("{err}") };
        assert!(list.len() >= 4, "{list:?}");
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.trainer = TrainerSection::aid();
        cfg.trainer.grad_clip = Some(1.0);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
