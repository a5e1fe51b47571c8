//! The semantic-guided SR network.
//!
//! ```text
//! F_shallow = Conv(X)
//! F_i       = unit_i(F_{i-1}^out)            F_0^out = F_shallow
//! F_i^out   = modulate(F_i, M_i)
//! Ŷ         = Conv(Up(F_k^out + F_shallow))  Up = (conv + pixel shuffle)+
//! ```
//!
//! The guidance maps `M_i` come from the encoder + localization stages run
//! on the bilinearly upsampled input. Ablation variants swap out the
//! semantic path (see [`Variant`]).

pub mod units;

use std::path::PathBuf;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::encoder::{EncoderConfig, LoraConfig, LoraTargets, SemanticEncoder, SemanticFeatures};
use crate::error::{bail_arg, bail_shape, Result};
use crate::localization::{DescriptorBank, GuidanceMapSet, LocalizationConfig, SlmComponents, COSINE_EPS};
use crate::modulation::{ModulationParams, LN_EPS};

/// Subtracted from LR pixels before the shallow conv and added back to the output.
pub const PIXEL_MEAN: f64 = 0.5;
use crate::nn::{self, Conv2d, Linear};
use crate::params::{Init, ParamStore, Selection};

pub use units::{build_units, SrUnit, UnitOptions, UnitStyle};

/// Which semantic components are wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain SR body, no semantics.
    Baseline,
    /// Per-unit projection of the local features added to each unit output.
    Sfem,
    /// Projected local features drive a modulator per unit.
    SfemLmm,
    /// Localization embeddings, guidance maps and modulation.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Sfem, Variant::SfemLmm, Variant::Full];

    pub fn uses_encoder(self) -> bool {
        self != Variant::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sfem => "sfem",
            Variant::SfemLmm => "sfem_lmm",
            Variant::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub style: UnitStyle,
    /// Building blocks split evenly across the units.
    pub total_blocks: usize,
    pub options: UnitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    /// Pretrained weight container; the seeded stub is used when absent.
    pub weights: Option<PathBuf>,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub grid: usize,
    pub projection_dim: Option<usize>,
    pub lora: Option<LoraConfig>,
    pub seed: u64,
}

impl EncoderSection {
    pub fn architecture(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            mlp_dim: self.mlp_dim,
            grid: self.grid,
            projection_dim: self.projection_dim,
            lora: self.lora,
            seed: self.seed,
        }
    }

    pub fn from_architecture(cfg: &EncoderConfig) -> Self {
        Self {
            weights: None,
            patch_size: cfg.patch_size,
            width: cfg.width,
            depth: cfg.depth,
            heads: cfg.heads,
            mlp_dim: cfg.mlp_dim,
            grid: cfg.grid,
            projection_dim: cfg.projection_dim,
            lora: cfg.lora,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlmOptions {
    pub attention_heads: usize,
    pub shared_fusion: bool,
    pub cosine_eps: Option<f64>,
    pub unit_descriptors: bool,
    pub global_descriptor: bool,
    pub global_feature: bool,
}

impl Default for SlmOptions {
    fn default() -> Self {
        Self {
            attention_heads: 1,
            shared_fusion: true,
            cosine_eps: Some(COSINE_EPS),
            unit_descriptors: true,
            global_descriptor: true,
            global_feature: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModulationOptions {
    pub kernel: usize,
    pub shared_trunk: bool,
}

impl Default for ModulationOptions {
    fn default() -> Self {
        Self {
            kernel: 3,
            shared_trunk: true,
        }
    }
}

/// Missing keys take the [`ModelConfig::desk`] values at scale 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub scale: usize,
    /// SR unit count `k`.
    pub units: usize,
    /// Feature channels `C_f`.
    pub channels: usize,
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub encoder: EncoderSection,
    pub localization: SlmOptions,
    pub modulation: ModulationOptions,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        ModelConfig::desk(4).backbone
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        ModelConfig::desk(4).encoder
    }
}

impl ModelConfig {
    /// Desk-scale defaults: hybrid units, `k = 6`, `C_f = 60`, stub encoder
    /// with rank-32 adapters.
    pub fn desk(scale: usize) -> Self {
        let mut encoder = EncoderConfig::stub(64, 4, 16);
        encoder.lora = Some(LoraConfig {
            rank: 32,
            targets: LoraTargets::AttentionFfn,
        });
        Self {
            scale,
            units: 6,
            channels: 60,
            variant: Variant::Full,
            backbone: BackboneConfig {
                style: UnitStyle::HybridAttention,
                total_blocks: 6,
                options: UnitOptions {
                    heads: 6,
                    ..UnitOptions::default()
                },
            },
            encoder: EncoderSection::from_architecture(&encoder),
            localization: SlmOptions::default(),
            modulation: ModulationOptions::default(),
            seed: 0,
        }
    }

    /// Tiny configuration used by smoke runs and tests.
    pub fn smoke(scale: usize, channels: usize, units: usize) -> Self {
        let mut encoder = EncoderConfig::stub(32, 2, 8);
        encoder.lora = Some(LoraConfig {
            rank: 4,
            targets: LoraTargets::AttentionFfn,
        });
        Self {
            scale,
            units,
            channels,
            variant: Variant::Full,
            backbone: BackboneConfig {
                style: UnitStyle::HybridAttention,
                total_blocks: units,
                options: UnitOptions {
                    hybrid_blocks: 1,
                    heads: 2,
                    shift: false,
                    ..UnitOptions::default()
                },
            },
            encoder: EncoderSection::from_architecture(&encoder),
            localization: SlmOptions::default(),
            modulation: ModulationOptions::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 1..=4) {
            bail_arg!("scale {} unsupported (use 2 or 4; 3 also works)", self.scale);
        }
        if self.units == 0 || self.channels == 0 {
            bail_arg!("units and channels must be positive");
        }
        units::blocks_per_unit(self.backbone.total_blocks, self.units)?;
        if self.variant.uses_encoder() {
            self.encoder.architecture().validate()?;
        }
        Ok(())
    }

    fn localization_config(&self) -> LocalizationConfig {
        let o = &self.localization;
        LocalizationConfig {
            units: self.units,
            width: self.encoder.width,
            attention_heads: o.attention_heads,
            shared_fusion: o.shared_fusion,
            cosine_eps: o.cosine_eps,
            components: SlmComponents {
                unit_descriptors: o.unit_descriptors,
                global_descriptor: o.global_descriptor,
                global_feature: o.global_feature,
            },
        }
    }
}

/// Conv + pixel shuffle stages followed by the 3-channel output conv.
#[derive(Debug)]
struct Upsampler {
    stages: Vec<(Conv2d, usize)>,
    last: Conv2d,
}

impl Upsampler {
    fn new(ps: &mut ParamStore, c: usize, scale: usize) -> Result<Self> {
        let factors: Vec<usize> = match scale {
            1 => vec![],
            2 => vec![2],
            3 => vec![3],
            4 => vec![2, 2],
            s => bail_arg!("unsupported scale {s}"),
        };
        let stages = factors
            .into_iter()
            .enumerate()
            .map(|(i, f)| Ok((Conv2d::new(ps, &format!("upsample.{i}"), c, c * f * f, 3, true)?, f)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            // small output init so training starts near the pixel mean
            last: Conv2d::with_init(
                ps,
                "upsample.out",
                c,
                3,
                3,
                Init::Uniform {
                    bound: 0.1 / ((c * 9) as f64).sqrt(),
                },
                Some(Init::Zeros),
            )?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, f) in &self.stages {
            h = nn::pixel_shuffle(&conv.forward(&h)?, *f)?;
        }
        self.last.forward(&h)
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Tensor,
    pub shallow: Tensor,
    /// `F_i` before modulation.
    pub unit_outputs: Vec<Tensor>,
    /// `F_i^out`.
    pub modulated: Vec<Tensor>,
    pub upsampler_input: Tensor,
    pub features: Option<SemanticFeatures>,
    pub maps: Option<GuidanceMapSet>,
}

#[derive(Debug)]
pub struct SrModel {
    cfg: ModelConfig,
    store: ParamStore,
    shallow: Conv2d,
    units: Vec<Box<dyn SrUnit>>,
    modulators: Vec<ModulationParams>,
    projections: Vec<Linear>,
    upsampler: Upsampler,
    encoder: Option<SemanticEncoder>,
    bank: Option<DescriptorBank>,
    bare_norm: bool,
}

impl SrModel {
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, cfg.seed);
        let c = cfg.channels;
        let k = cfg.units;
        let shallow = Conv2d::new(&mut store, "shallow", 3, c, 3, true)?;
        let units = build_units(
            &mut store,
            cfg.backbone.style,
            cfg.backbone.total_blocks,
            k,
            c,
            &cfg.backbone.options,
        )?;

        let encoder = if cfg.variant.uses_encoder() {
            let mut enc = SemanticEncoder::new(&cfg.encoder.architecture(), dtype)?;
            if let Some(path) = &cfg.encoder.weights {
                enc.load_pretrained(crate::resolve_weights_path(path))?;
            }
            Some(enc)
        } else {
            None
        };
        let enc_width = cfg.encoder.width;

        let projections = match cfg.variant {
            Variant::Sfem | Variant::SfemLmm => (0..k)
                .map(|i| Linear::new(&mut store, &format!("semantic_proj.{i}"), enc_width, c, true))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let map_channels = match cfg.variant {
            Variant::SfemLmm => Some(c),
            Variant::Full => Some(1),
            _ => None,
        };
        let modulators = match map_channels {
            Some(mc) => (0..k)
                .map(|i| {
                    ModulationParams::new(
                        &mut store,
                        &format!("modulators.{i}"),
                        mc,
                        c,
                        cfg.modulation.kernel,
                        cfg.modulation.shared_trunk,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let upsampler = Upsampler::new(&mut store, c, cfg.scale)?;
        let bank = if cfg.variant == Variant::Full {
            Some(DescriptorBank::new(
                &cfg.localization_config(),
                ParamStore::new(dtype, cfg.seed.wrapping_add(1)),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            shallow,
            units,
            modulators,
            projections,
            upsampler,
            encoder,
            bank,
            bare_norm: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn scale(&self) -> usize {
        self.cfg.scale
    }

    pub fn units(&self) -> usize {
        self.units.len()
    }

    pub fn encoder(&self) -> Option<&SemanticEncoder> {
        self.encoder.as_ref()
    }

    pub fn encoder_mut(&mut self) -> Option<&mut SemanticEncoder> {
        self.encoder.as_mut()
    }

    pub fn bank(&self) -> Option<&DescriptorBank> {
        self.bank.as_ref()
    }

    pub fn modulators(&self) -> &[ModulationParams] {
        &self.modulators
    }

    /// Replaces every modulator by a bare channel layer norm (for
    /// side-by-side checks against the modulated network).
    pub fn set_bare_norm(&mut self, on: bool) {
        self.bare_norm = on;
    }

    /// Parameter stores with their checkpoint prefixes.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut out = vec![("net.", &self.store)];
        if let Some(e) = &self.encoder {
            out.push(("encoder.", e.store()));
        }
        if let Some(b) = &self.bank {
            out.push(("slm.", b.store()));
        }
        out
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.stores()
            .into_iter()
            .flat_map(|(prefix, s)| {
                s.trainable_vars()
                    .into_iter()
                    .map(move |(n, v)| (format!("{prefix}{n}"), v.clone()))
            })
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.stores().iter().map(|(_, s)| s.num_trainable()).sum()
    }

    pub fn num_total(&self) -> usize {
        self.stores().iter().map(|(_, s)| s.num_total()).sum()
    }

    /// Digest of every frozen tensor (the encoder's pretrained weights).
    pub fn frozen_digest(&self) -> Result<String> {
        match &self.encoder {
            Some(e) => e.params().frozen_digest(),
            None => ParamStore::new(DType::F32, 0).frozen_digest(),
        }
    }

    pub fn export(&self, file: &mut TensorFile) -> Result<()> {
        for (prefix, s) in self.stores() {
            s.export(prefix, file)?;
        }
        Ok(())
    }

    /// Loads every parameter; validates all stores before writing any.
    pub fn import(&self, file: &TensorFile) -> Result<()> {
        let mut problems = Vec::new();
        for (prefix, s) in self.stores() {
            for name in s.names() {
                if file.get(&format!("{prefix}{name}")).is_none() {
                    problems.push(format!("{prefix}{name}: missing"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(crate::Error::WeightMismatch(problems));
        }
        for (prefix, s) in self.stores() {
            s.import(prefix, file, Selection::All)?;
        }
        Ok(())
    }

    fn check_input(&self, lr: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = lr.dims4()?;
        if c != 3 {
            bail_shape!("expected a 3-channel image batch, got {:?}", lr.dims());
        }
        if h < 8 || w < 8 {
            bail_shape!("input {h}x{w} is smaller than 8x8");
        }
        if let Some(enc) = &self.encoder {
            let p = enc.patch_size();
            let s = self.cfg.scale;
            if (h * s) % p != 0 {
                bail_shape!("upsampled height {} is not divisible by patch size {p}", h * s);
            }
            if (w * s) % p != 0 {
                bail_shape!("upsampled width {} is not divisible by patch size {p}", w * s);
            }
        }
        Ok((h, w))
    }

    /// Semantic features of the bilinearly upsampled input.
    pub fn semantic_features(&self, lr: &Tensor) -> Result<Option<SemanticFeatures>> {
        let (h, w) = self.check_input(lr)?;
        match &self.encoder {
            Some(enc) => {
                let s = self.cfg.scale;
                let up = nn::resize_bilinear(lr, h * s, w * s)?;
                Ok(Some(enc.encode(&up)?))
            }
            None => Ok(None),
        }
    }

    /// Guidance maps at LR resolution (full variant only).
    pub fn guidance(&self, lr: &Tensor) -> Result<Option<GuidanceMapSet>> {
        let (h, w) = self.check_input(lr)?;
        match (&self.bank, self.semantic_features(lr)?) {
            (Some(bank), Some(f)) => Ok(Some(bank.localize(&f, (h, w))?)),
            _ => Ok(None),
        }
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(lr)?.output)
    }

    pub fn forward_traced(&self, lr: &Tensor) -> Result<ForwardTrace> {
        let (h, w) = self.check_input(lr)?;
        let features = self.semantic_features(lr)?;
        let maps = match (&self.bank, &features) {
            (Some(bank), Some(f)) => Some(bank.localize(f, (h, w))?),
            _ => None,
        };
        let projected: Vec<Tensor> = match &features {
            Some(f) if !self.projections.is_empty() => self
                .projections
                .iter()
                .map(|p| {
                    let grid = p.forward(&f.local_feat)?.permute((0, 3, 1, 2))?.contiguous()?;
                    nn::resize_bilinear(&grid, h, w)
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };

        let shallow = self.shallow.forward(&lr.affine(1.0, -PIXEL_MEAN)?)?;
        let mut x = shallow.clone();
        let mut unit_outputs = Vec::with_capacity(self.units.len());
        let mut modulated = Vec::with_capacity(self.units.len());
        for (i, unit) in self.units.iter().enumerate() {
            let f = unit.forward(&x)?;
            let out = if self.bare_norm && !self.modulators.is_empty() {
                nn::channel_layer_norm(&f, LN_EPS)?
            } else {
                match self.cfg.variant {
                    Variant::Baseline => f.clone(),
                    Variant::Sfem => (&f + &projected[i])?,
                    Variant::SfemLmm => self.modulators[i].forward(&f, &projected[i])?,
                    Variant::Full => {
                        let m = maps.as_ref().expect("full variant has maps").unit(i)?;
                        self.modulators[i].forward(&f, &m)?
                    }
                }
            };
            unit_outputs.push(f);
            modulated.push(out.clone());
            x = out;
        }
        let upsampler_input = (&x + &shallow)?;
        let output = self.upsampler.forward(&upsampler_input)?.affine(1.0, PIXEL_MEAN)?;
        Ok(ForwardTrace {
            output,
            shallow,
            unit_outputs,
            modulated,
            upsampler_input,
            features,
            maps,
        })
    }

}
