//! Semantic feature extraction: a ViT-style image encoder whose attention
//! projections (and optionally feed-forward linears) carry low-rank adapters.
//!
//! The encoder consumes the bilinearly upsampled low-resolution image and
//! returns the class-token hidden state as a global feature and the patch
//! tokens, reshaped to a grid, as local features. Only adapter factors are
//! trainable; every pretrained tensor is frozen.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::error::{bail_arg, bail_shape, Result};
use crate::nn::{self, LayerNorm, Linear};
use crate::params::{Init, ParamStore, Selection};

/// Standard deviation of the Gaussian used for `factor_a` at (re)initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    /// Q, K and V projections of every attention block.
    Attention,
    /// Q, K, V plus both feed-forward linears.
    AttentionFfn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: LoraTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Side length of the learned positional grid.
    pub grid: usize,
    /// Output width of the optional projection head (used for embeddings only).
    pub projection_dim: Option<usize>,
    pub lora: Option<LoraConfig>,
    pub seed: u64,
}

impl EncoderConfig {
    /// ViT-B/16 layout at 224×224 pretraining resolution.
    pub fn vit_b16() -> Self {
        Self {
            patch_size: 16,
            width: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            grid: 14,
            projection_dim: Some(512),
            lora: Some(LoraConfig {
                rank: 32,
                targets: LoraTargets::AttentionFfn,
            }),
            seed: 0,
        }
    }

    /// Small randomly initialized encoder for offline runs.
    pub fn stub(width: usize, depth: usize, patch_size: usize) -> Self {
        Self {
            patch_size,
            width,
            depth,
            heads: if width % 4 == 0 { 2 } else { 1 },
            mlp_dim: 2 * width,
            grid: 4,
            projection_dim: None,
            lora: Some(LoraConfig {
                rank: (width / 8).max(1),
                targets: LoraTargets::AttentionFfn,
            }),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.width == 0 || self.depth == 0 || self.grid == 0 {
            bail_arg!("encoder patch_size, width, depth and grid must be positive");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            bail_arg!("encoder width {} not divisible by {} heads", self.width, self.heads);
        }
        if let Some(l) = &self.lora {
            check_rank(l.rank, self.width, self.width)?;
            check_rank(l.rank, self.mlp_dim, self.width)?;
        }
        Ok(())
    }
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<()> {
    if rank == 0 || rank >= d_out.min(d_in) {
        bail_arg!(
            "adapter rank {rank} must satisfy 0 < rank < min({d_out}, {d_in})"
        );
    }
    Ok(())
}

/// Frozen linear map `W` (with optional frozen bias) plus trainable low-rank
/// update: `y = (W + A·Bᵀ)·x + bias`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `(d_out, d_in)`
    pub frozen_weight: Tensor,
    pub frozen_bias: Option<Tensor>,
    /// `(d_out, r)`
    pub factor_a: Tensor,
    /// `(d_in, r)`
    pub factor_b: Tensor,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new(
        frozen_weight: Tensor,
        frozen_bias: Option<Tensor>,
        factor_a: Tensor,
        factor_b: Tensor,
    ) -> Result<Self> {
        let (d_out, d_in) = frozen_weight.dims2()?;
        let (a_rows, rank) = factor_a.dims2()?;
        let (b_rows, b_rank) = factor_b.dims2()?;
        if a_rows != d_out || b_rows != d_in || b_rank != rank {
            bail_shape!(
                "adapter factors A {:?} and B {:?} do not fit weight {:?}",
                factor_a.dims(),
                factor_b.dims(),
                frozen_weight.dims()
            );
        }
        check_rank(rank, d_out, d_in)?;
        Ok(Self {
            frozen_weight,
            frozen_bias,
            factor_a,
            factor_b,
            rank,
        })
    }

    pub fn d_in(&self) -> usize {
        self.factor_b.dim(0).unwrap_or(0)
    }

    pub fn d_out(&self) -> usize {
        self.factor_a.dim(0).unwrap_or(0)
    }

    /// Frozen path plus low-rank path over the last axis of `x`; `W + A·Bᵀ`
    /// is never formed.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, true)
    }

    fn forward_with(&self, x: &Tensor, adapted: bool) -> Result<Tensor> {
        if x.rank() == 1 {
            return self.forward_with(&x.unsqueeze(0)?, adapted)?.squeeze(0).map_err(Into::into);
        }
        let d_in = self.d_in();
        if x.dim(D::Minus1)? != d_in {
            bail_shape!("adapter expects last dim {d_in}, got {:?}", x.dims());
        }
        let mut y = x.broadcast_matmul(&self.frozen_weight.t()?)?;
        if adapted {
            let low = x
                .broadcast_matmul(&self.factor_b)?
                .broadcast_matmul(&self.factor_a.t()?)?;
            y = (y + low)?;
        }
        match &self.frozen_bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }

    /// Dense `W + A·Bᵀ`.
    pub fn effective_weight(&self) -> Result<Tensor> {
        Ok((&self.frozen_weight + self.factor_a.matmul(&self.factor_b.t()?)?)?)
    }
}

/// `(frozen_weight + factor_a · factor_bᵀ) · x`.
pub fn lora_forward(adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.forward(x)
}

#[derive(Debug, Clone)]
enum Projection {
    Frozen(Linear),
    Adapted(LoraAdapter),
}

impl Projection {
    fn forward(&self, x: &Tensor, adapted: bool) -> Result<Tensor> {
        match self {
            Projection::Frozen(l) => l.forward(x),
            Projection::Adapted(a) => a.forward_with(x, adapted),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Projection,
    k: Projection,
    v: Projection,
    out: Linear,
    ln2: LayerNorm,
    fc1: Projection,
    fc2: Projection,
    heads: usize,
}

impl Block {
    fn attention(&self, x: &Tensor, adapted: bool) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x, adapted)?)?;
        let k = split(self.k.forward(x, adapted)?)?;
        let v = split(self.v.forward(x, adapted)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = nn::softmax_last(&scores)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.out.forward(&y)
    }

    fn forward(&self, x: &Tensor, adapted: bool) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?, adapted)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?, adapted)?;
        let h = self.fc2.forward(&nn::gelu(&h)?, adapted)?;
        Ok((x + h)?)
    }
}

/// Global (class token) and local (patch grid) features.
#[derive(Debug, Clone)]
pub struct SemanticFeatures {
    /// `(B, C)`
    pub global_feat: Tensor,
    /// `(B, H_c, W_c, C)`
    pub local_feat: Tensor,
}

impl SemanticFeatures {
    pub fn width(&self) -> usize {
        self.global_feat.dim(1).unwrap_or(0)
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.local_feat.dim(1).unwrap_or(0),
            self.local_feat.dim(2).unwrap_or(0),
        )
    }
}

/// Bilinear resampling of a positional grid `(P, P', C)` to `(H_c, W_c, C)`.
pub fn interpolate_positions(table: &Tensor, h_c: usize, w_c: usize) -> Result<Tensor> {
    if h_c == 0 || w_c == 0 {
        bail_arg!("positional target must be positive, got {h_c}x{w_c}");
    }
    let (ph, pw, _) = table.dims3()?;
    if (ph, pw) == (h_c, w_c) {
        return Ok(table.clone());
    }
    let chw = table.permute((2, 0, 1))?;
    Ok(nn::resize_bilinear(&chw, h_c, w_c)?
        .permute((1, 2, 0))?
        .contiguous()?)
}

#[derive(Debug)]
pub struct SemanticEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    patch_embed: Tensor,
    class_token: Tensor,
    positional: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Option<Tensor>,
    norm_mean: Tensor,
    norm_std: Tensor,
    adapter_names: Vec<(String, String)>,
}

impl SemanticEncoder {
    /// Builds an encoder with seeded random frozen weights. Frozen tensors are
    /// drawn from a stream of their own, so the same seed yields the same
    /// frozen weights whether or not adapters are configured.
    pub fn new(cfg: &EncoderConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, cfg.seed ^ 0x5eed_ada9);
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.width;
        let p = cfg.patch_size;
        let patch_embed = store.frozen_from(
            "patch_embed.weight",
            &[c, 3, p, p],
            Init::Normal {
                std: 1.0 / ((3 * p * p) as f64).sqrt(),
            },
            &mut frozen_rng,
        )?;
        let class_token = store.frozen_from("class_token", &[c], Init::Normal { std: 0.1 }, &mut frozen_rng)?;
        let positional = store.frozen_from(
            "positional_embedding",
            &[1 + cfg.grid * cfg.grid, c],
            Init::Normal { std: 0.1 },
            &mut frozen_rng,
        )?;
        let ln_pre = LayerNorm::frozen(&mut store, "ln_pre", c)?;

        let mut frozen_linear = |store: &mut ParamStore, name: &str, d_in: usize, d_out: usize| -> Result<Linear> {
            let weight = store.frozen_from(
                &format!("{name}.weight"),
                &[d_out, d_in],
                Init::Normal {
                    std: 1.0 / (d_in as f64).sqrt(),
                },
                &mut frozen_rng,
            )?;
            let bias = store.frozen(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
            Ok(Linear {
                weight,
                bias: Some(bias),
            })
        };

        let mut raw_blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("blocks.{i}");
            let ln1 = LayerNorm::frozen(&mut store, &format!("{pre}.ln1"), c)?;
            let q = frozen_linear(&mut store, &format!("{pre}.attn.q"), c, c)?;
            let k = frozen_linear(&mut store, &format!("{pre}.attn.k"), c, c)?;
            let v = frozen_linear(&mut store, &format!("{pre}.attn.v"), c, c)?;
            let out = frozen_linear(&mut store, &format!("{pre}.attn.out"), c, c)?;
            let ln2 = LayerNorm::frozen(&mut store, &format!("{pre}.ln2"), c)?;
            let fc1 = frozen_linear(&mut store, &format!("{pre}.mlp.fc1"), c, cfg.mlp_dim)?;
            let fc2 = frozen_linear(&mut store, &format!("{pre}.mlp.fc2"), cfg.mlp_dim, c)?;
            raw_blocks.push((pre, ln1, q, k, v, out, ln2, fc1, fc2));
        }
        let ln_post = LayerNorm::frozen(&mut store, "ln_post", c)?;
        let proj = match cfg.projection_dim {
            Some(d) => Some(store.frozen_from(
                "proj",
                &[c, d],
                Init::Normal {
                    std: 1.0 / (c as f64).sqrt(),
                },
                &mut frozen_rng,
            )?),
            None => None,
        };
        let norm_mean = store.frozen("normalize.mean", &[3], Init::Const(0.5))?;
        let norm_std = store.frozen("normalize.std", &[3], Init::Const(0.5))?;

        // Adapters are registered after every frozen tensor.
        let mut adapter_names = Vec::new();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for (pre, ln1, q, k, v, out, ln2, fc1, fc2) in raw_blocks {
            let mut wrap = |name: String, lin: Linear, wanted: bool| -> Result<Projection> {
                match (&cfg.lora, wanted) {
                    (Some(l), true) => {
                        let (d_out, d_in) = lin.weight.dims2()?;
                        let a_name = format!("{name}.lora_a");
                        let b_name = format!("{name}.lora_b");
                        let a = store.trainable(&a_name, &[d_out, l.rank], Init::Normal { std: ADAPTER_INIT_STD })?;
                        let b = store.trainable(&b_name, &[d_in, l.rank], Init::Zeros)?;
                        adapter_names.push((a_name, b_name));
                        Ok(Projection::Adapted(LoraAdapter::new(lin.weight, lin.bias, a, b)?))
                    }
                    _ => Ok(Projection::Frozen(lin)),
                }
            };
            let ffn = matches!(cfg.lora.map(|l| l.targets), Some(LoraTargets::AttentionFfn));
            blocks.push(Block {
                ln1,
                q: wrap(format!("{pre}.attn.q"), q, true)?,
                k: wrap(format!("{pre}.attn.k"), k, true)?,
                v: wrap(format!("{pre}.attn.v"), v, true)?,
                out,
                ln2,
                fc1: wrap(format!("{pre}.mlp.fc1"), fc1, ffn)?,
                fc2: wrap(format!("{pre}.mlp.fc2"), fc2, ffn)?,
                heads: cfg.heads,
            });
        }

        Ok(Self {
            cfg: cfg.clone(),
            store,
            patch_embed,
            class_token,
            positional,
            ln_pre,
            blocks,
            ln_post,
            proj,
            norm_mean,
            norm_std,
            adapter_names,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_adapters(&self) -> usize {
        self.adapter_names.len()
    }

    /// Adapter factors `(name, tensor)`, A before B for each wrapped linear.
    /// These are the only trainable tensors of the encoder.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        self.adapter_names
            .iter()
            .flat_map(|(a, b)| [a, b])
            .filter_map(|n| self.store.var(n).map(|v| (n.clone(), v.as_tensor().clone())))
            .collect()
    }

    fn tokens(&self, image: &Tensor, adapted: bool) -> Result<Tensor> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 3 {
            bail_shape!("encoder expects 3-channel input, got {ch}");
        }
        let p = self.cfg.patch_size;
        if h % p != 0 {
            bail_shape!("input height {h} is not divisible by patch size {p}");
        }
        if w % p != 0 {
            bail_shape!("input width {w} is not divisible by patch size {p}");
        }
        let (h_c, w_c) = (h / p, w / p);
        let x = image
            .broadcast_sub(&self.norm_mean.reshape((1, 3, 1, 1))?)?
            .broadcast_div(&self.norm_std.reshape((1, 3, 1, 1))?)?;
        let patches = x.conv2d(&self.patch_embed, 0, p, 1, 1)?;
        let b = patches.dim(0)?;
        let c = self.cfg.width;
        let patches = patches.flatten_from(2)?.transpose(1, 2)?; // (B, N, C)

        let g = self.cfg.grid;
        let class_pos = self.positional.narrow(0, 0, 1)?;
        let grid = self.positional.narrow(0, 1, g * g)?.reshape((g, g, c))?;
        let grid = interpolate_positions(&grid, h_c, w_c)?.reshape((h_c * w_c, c))?;

        let cls = (self.class_token.reshape((1, c))? + class_pos)?
            .unsqueeze(0)?
            .broadcast_as((b, 1, c))?;
        let patches = patches.broadcast_add(&grid)?;
        let mut t = Tensor::cat(&[&cls, &patches], 1)?.contiguous()?;
        t = self.ln_pre.forward(&t)?;
        for block in &self.blocks {
            t = block.forward(&t, adapted)?;
        }
        Ok(t)
    }

    /// Final-layer hidden states split into the class token and the patch grid.
    pub fn encode(&self, image_up: &Tensor) -> Result<SemanticFeatures> {
        self.encode_with(image_up, true)
    }

    /// Same as [`encode`](Self::encode) with adapters bypassed.
    pub fn encode_frozen(&self, image_up: &Tensor) -> Result<SemanticFeatures> {
        self.encode_with(image_up, false)
    }

    fn encode_with(&self, image_up: &Tensor, adapted: bool) -> Result<SemanticFeatures> {
        let (_, _, h, w) = image_up.dims4()?;
        let p = self.cfg.patch_size;
        let t = self.tokens(image_up, adapted)?;
        let (b, n, c) = t.dims3()?;
        let global_feat = t.narrow(1, 0, 1)?.reshape((b, c))?;
        let local_feat = t.narrow(1, 1, n - 1)?.reshape((b, h / p, w / p, c))?;
        Ok(SemanticFeatures {
            global_feat,
            local_feat,
        })
    }

    /// Image-level embedding on the adapter-free path: class token, final
    /// layer norm, then the projection head when the weights provide one.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let t = self.tokens(image, false)?;
        let (b, _, c) = t.dims3()?;
        let cls = self.ln_post.forward(&t.narrow(1, 0, 1)?.reshape((b, c))?)?;
        match &self.proj {
            Some(p) => Ok(cls.matmul(p)?),
            None => Ok(cls),
        }
    }

    /// Writes every frozen tensor (no adapters) to a container file.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = TensorFile::new();
        for (name, var) in self.store.frozen_vars() {
            file.insert(name, crate::container::HostTensor::from_tensor(var.as_tensor())?);
        }
        file.metadata
            .insert("architecture".into(), serde_json::to_string(&self.cfg)?);
        file.save(path)
    }

    /// Populates the frozen weights from a container and re-initializes the
    /// adapters (A Gaussian, B zero). On any error the encoder is unchanged.
    pub fn load_pretrained(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let file = TensorFile::load(path.as_ref())?;
        self.load_from(&file, "")
    }

    pub(crate) fn load_from(&mut self, file: &TensorFile, prefix: &str) -> Result<()> {
        self.store.import(prefix, file, Selection::Frozen)?;
        self.reset_adapters()
    }

    pub fn reset_adapters(&mut self) -> Result<()> {
        for (a, b) in self.adapter_names.clone() {
            self.store.reinit(&a, Init::Normal { std: ADAPTER_INIT_STD })?;
            self.store.reinit(&b, Init::Zeros)?;
        }
        Ok(())
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }
}
