//! Shape-preserving SR units in three flavours: plain residual blocks,
//! residual channel-attention groups, and a simplified hybrid unit of
//! windowed self-attention plus channel attention.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStyle {
    Residual,
    ChannelAttention,
    HybridAttention,
}

impl std::str::FromStr for UnitStyle {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(UnitStyle::Residual),
            "channel_attention" => Ok(UnitStyle::ChannelAttention),
            "hybrid_attention" => Ok(UnitStyle::HybridAttention),
            other => bail_arg!(
                "unknown unit style {other:?} (expected residual, channel_attention or hybrid_attention)"
            ),
        }
    }
}

/// Inner sizes of the unit flavours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitOptions {
    /// Residual scaling inside plain residual blocks.
    pub res_scale: f64,
    /// Channel-attention blocks per residual group.
    pub blocks_per_group: usize,
    /// Squeeze ratio of channel attention.
    pub reduction: usize,
    /// Hybrid blocks per hybrid unit.
    pub hybrid_blocks: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Shift every other hybrid block by half a window.
    pub shift: bool,
    /// Weight of the convolutional branch in a hybrid block.
    pub conv_scale: f64,
    /// Channel compression of that branch.
    pub conv_compress: usize,
}

impl Default for UnitOptions {
    fn default() -> Self {
        Self {
            res_scale: 1.0,
            blocks_per_group: 2,
            reduction: 4,
            hybrid_blocks: 2,
            window: 8,
            heads: 2,
            mlp_ratio: 2,
            shift: true,
            conv_scale: 0.01,
            conv_compress: 3,
        }
    }
}

pub trait SrUnit: std::fmt::Debug + Send + Sync {
    /// `(B, C, H, W)` → `(B, C, H, W)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    res_scale: f64,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&nn::relu(&self.conv1.forward(x)?)?)?;
        Ok((x + (h * self.res_scale)?)?)
    }
}

/// A run of conv-ReLU-conv residual blocks without normalization.
#[derive(Debug)]
pub struct ResidualUnit {
    blocks: Vec<ResBlock>,
}

impl SrUnit for ResidualUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

/// Squeeze-and-excitation style channel attention.
#[derive(Debug)]
struct ChannelAttention {
    down: Conv2d,
    up: Conv2d,
}

impl ChannelAttention {
    fn new(ps: &mut ParamStore, name: &str, c: usize, reduction: usize) -> Result<Self> {
        let mid = (c / reduction.max(1)).max(1);
        Ok(Self {
            down: Conv2d::new(ps, &format!("{name}.down"), c, mid, 1, true)?,
            up: Conv2d::new(ps, &format!("{name}.up"), mid, c, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let w = nn::sigmoid(&self.up.forward(&nn::relu(&self.down.forward(&pooled)?)?)?)?;
        Ok(x.broadcast_mul(&w)?)
    }
}

#[derive(Debug)]
struct Rcab {
    conv1: Conv2d,
    conv2: Conv2d,
    ca: ChannelAttention,
}

impl Rcab {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&nn::relu(&self.conv1.forward(x)?)?)?;
        Ok((x + self.ca.forward(&h)?)?)
    }
}

#[derive(Debug)]
struct ResidualGroup {
    blocks: Vec<Rcab>,
    conv: Conv2d,
}

impl ResidualGroup {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok((x + self.conv.forward(&h)?)?)
    }
}

/// One or more residual groups of channel-attention blocks.
#[derive(Debug)]
pub struct ChannelAttentionUnit {
    groups: Vec<ResidualGroup>,
}

impl SrUnit for ChannelAttentionUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for g in &self.groups {
            h = g.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug)]
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

/// Region labels for the attention mask of a cyclically shifted window layout.
fn shift_mask(hp: usize, wp: usize, ws: usize, shift: usize) -> Vec<f64> {
    let label = |i: usize, n: usize| -> usize {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / ws, wp / ws);
    let n = ws * ws;
    let mut mask = vec![0.0; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let regions: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * ws + t / ws, wx * ws + t % ws);
                    label(y, hp) * 3 + label(x, wp)
                })
                .collect();
            let base = (wy * nw + wx) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if regions[i] != regions[j] {
                        mask[base + i * n + j] = -100.0;
                    }
                }
            }
        }
    }
    mask
}

impl WindowAttention {
    /// `x`: `(B, H, W, C)` with `H`, `W` multiples of `ws`.
    fn forward(&self, x: &Tensor, ws: usize, shift: usize) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = if shift > 0 {
            x.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?
        } else {
            x.clone()
        };
        let (nh, nw) = (h / ws, w / ws);
        let n = ws * ws;
        let windows = x
            .reshape((b, nh, ws, nw, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * nh * nw, n, c))?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(&windows)?
            .reshape((b * nh * nw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        if shift > 0 {
            let mask = Tensor::from_vec(shift_mask(h, w, ws, shift), (1, nh * nw, 1, n, n), x.device())?
                .to_dtype(x.dtype())?;
            scores = scores
                .reshape((b, nh * nw, self.heads, n, n))?
                .broadcast_add(&mask)?
                .reshape((b * nh * nw, self.heads, n, n))?;
        }
        let attn = nn::softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * nh * nw, n, c))?;
        let out = self
            .proj
            .forward(&out)?
            .reshape((b, nh, nw, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h, w, c))?;
        if shift > 0 {
            Ok(out.roll(shift as i32, 1)?.roll(shift as i32, 2)?)
        } else {
            Ok(out)
        }
    }
}

#[derive(Debug)]
struct ConvAttentionBranch {
    conv1: Conv2d,
    conv2: Conv2d,
    ca: ChannelAttention,
}

impl ConvAttentionBranch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&nn::gelu(&self.conv1.forward(x)?)?)?;
        self.ca.forward(&h)
    }
}

#[derive(Debug)]
struct HybridBlock {
    ln1: LayerNorm,
    attn: WindowAttention,
    conv: ConvAttentionBranch,
    conv_scale: f64,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shifted: bool,
}

impl HybridBlock {
    /// `x`: `(B, C, H, W)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let ws = self.window.min(h).min(w).max(1);
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        let shift = if self.shifted && ws >= 2 { ws / 2 } else { 0 };

        let tokens = x.permute((0, 2, 3, 1))?.contiguous()?; // (B, H, W, C)
        let normed = self.ln1.forward(&tokens)?;
        let padded = normed.pad_with_zeros(1, 0, hp - h)?.pad_with_zeros(2, 0, wp - w)?;
        let attn = self.attn.forward(&padded, ws, shift)?.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let conv = self
            .conv
            .forward(&normed.permute((0, 3, 1, 2))?.contiguous()?)?
            .permute((0, 2, 3, 1))?;
        let tokens = (tokens + attn)?.add(&(conv * self.conv_scale)?)?;
        let mlp = self.fc2.forward(&nn::gelu(&self.fc1.forward(&self.ln2.forward(&tokens)?)?)?)?;
        let tokens = (tokens + mlp)?;
        Ok(tokens.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Hybrid blocks followed by a trailing conv and a unit-level residual.
#[derive(Debug)]
pub struct HybridUnit {
    blocks: Vec<HybridBlock>,
    conv: Conv2d,
}

impl SrUnit for HybridUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok((x + self.conv.forward(&h)?)?)
    }
}

fn res_block(ps: &mut ParamStore, name: &str, c: usize, res_scale: f64) -> Result<ResBlock> {
    Ok(ResBlock {
        conv1: Conv2d::new(ps, &format!("{name}.conv1"), c, c, 3, true)?,
        conv2: Conv2d::new(ps, &format!("{name}.conv2"), c, c, 3, true)?,
        res_scale,
    })
}

fn residual_group(ps: &mut ParamStore, name: &str, c: usize, opt: &UnitOptions) -> Result<ResidualGroup> {
    let blocks = (0..opt.blocks_per_group)
        .map(|i| {
            let pre = format!("{name}.rcab{i}");
            Ok(Rcab {
                conv1: Conv2d::new(ps, &format!("{pre}.conv1"), c, c, 3, true)?,
                conv2: Conv2d::new(ps, &format!("{pre}.conv2"), c, c, 3, true)?,
                ca: ChannelAttention::new(ps, &format!("{pre}.ca"), c, opt.reduction)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualGroup {
        blocks,
        conv: Conv2d::new(ps, &format!("{name}.conv"), c, c, 3, true)?,
    })
}

fn hybrid_block(ps: &mut ParamStore, name: &str, c: usize, opt: &UnitOptions, shifted: bool) -> Result<HybridBlock> {
    if opt.heads == 0 || c % opt.heads != 0 {
        bail_arg!("hybrid unit: {c} channels not divisible by {} heads", opt.heads);
    }
    let mid = (c / opt.conv_compress.max(1)).max(1);
    Ok(HybridBlock {
        ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c)?,
        attn: WindowAttention {
            qkv: Linear::new(ps, &format!("{name}.attn.qkv"), c, 3 * c, true)?,
            proj: Linear::new(ps, &format!("{name}.attn.proj"), c, c, true)?,
            heads: opt.heads,
        },
        conv: ConvAttentionBranch {
            conv1: Conv2d::new(ps, &format!("{name}.cab.conv1"), c, mid, 3, true)?,
            conv2: Conv2d::new(ps, &format!("{name}.cab.conv2"), mid, c, 3, true)?,
            ca: ChannelAttention::new(ps, &format!("{name}.cab.ca"), c, opt.reduction)?,
        },
        conv_scale: opt.conv_scale,
        ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c)?,
        fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), c, c * opt.mlp_ratio, true)?,
        fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), c * opt.mlp_ratio, c, true)?,
        window: opt.window,
        shifted,
    })
}

/// Groups `total_blocks` building blocks into `k` units.
///
/// For `residual`, blocks are plain residual blocks; for
/// `channel_attention`, they are residual groups; for `hybrid_attention`,
/// they are hybrid groups (each holding `options.hybrid_blocks` blocks).
pub fn build_units(
    ps: &mut ParamStore,
    style: UnitStyle,
    total_blocks: usize,
    k: usize,
    channels: usize,
    options: &UnitOptions,
) -> Result<Vec<Box<dyn SrUnit>>> {
    if k == 0 {
        bail_arg!("need at least one SR unit");
    }
    if total_blocks % k != 0 {
        bail_arg!("{total_blocks} blocks cannot be split evenly into {k} units");
    }
    let per_unit = total_blocks / k;
    let mut units: Vec<Box<dyn SrUnit>> = Vec::with_capacity(k);
    for u in 0..k {
        let pre = format!("units.{u}");
        let unit: Box<dyn SrUnit> = match style {
            UnitStyle::Residual => Box::new(ResidualUnit {
                blocks: (0..per_unit)
                    .map(|i| res_block(ps, &format!("{pre}.block{i}"), channels, options.res_scale))
                    .collect::<Result<_>>()?,
            }),
            UnitStyle::ChannelAttention => Box::new(ChannelAttentionUnit {
                groups: (0..per_unit)
                    .map(|i| residual_group(ps, &format!("{pre}.group{i}"), channels, options))
                    .collect::<Result<_>>()?,
            }),
            UnitStyle::HybridAttention => {
                let mut blocks = Vec::new();
                for g in 0..per_unit {
                    for i in 0..options.hybrid_blocks {
                        let shifted = options.shift && i % 2 == 1;
                        blocks.push(hybrid_block(ps, &format!("{pre}.g{g}.block{i}"), channels, options, shifted)?);
                    }
                }
                Box::new(HybridUnit {
                    blocks,
                    conv: Conv2d::new(ps, &format!("{pre}.conv"), channels, channels, 3, true)?,
                })
            }
        };
        units.push(unit);
    }
    Ok(units)
}

/// Block count in each unit for a grouping request.
pub fn blocks_per_unit(total_blocks: usize, k: usize) -> Result<usize> {
    if k == 0 || total_blocks % k != 0 {
        bail_arg!("{total_blocks} blocks cannot be split evenly into {k} units");
    }
    Ok(total_blocks / k)
}
