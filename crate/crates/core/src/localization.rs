//! Semantic localization: learnable per-unit descriptors fused with the
//! global semantic feature into one localization embedding per SR unit, then
//! matched against the local feature grid by cosine similarity.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::SemanticFeatures;
use crate::error::{bail_arg, bail_shape, Result};
use crate::nn::{self, Linear};
use crate::params::{Init, ParamStore};

pub const COSINE_EPS: f64 = 1e-8;

/// Which inputs take part in building the localization embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlmComponents {
    /// Per-unit descriptors `p_i`.
    pub unit_descriptors: bool,
    /// Global descriptor `p_g`.
    pub global_descriptor: bool,
    /// Encoder global feature `I_g`.
    pub global_feature: bool,
}

impl Default for SlmComponents {
    fn default() -> Self {
        Self {
            unit_descriptors: true,
            global_descriptor: true,
            global_feature: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    pub units: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub attention_heads: usize,
    /// One gated-fusion head shared by all units, or one per unit.
    #[serde(default = "yes")]
    pub shared_fusion: bool,
    /// Guard added inside the cosine norms; `None` makes zero norms an error.
    #[serde(default = "default_eps")]
    pub cosine_eps: Option<f64>,
    #[serde(default)]
    pub components: SlmComponents,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_eps() -> Option<f64> {
    Some(COSINE_EPS)
}

impl LocalizationConfig {
    pub fn new(units: usize, width: usize) -> Self {
        Self {
            units,
            width,
            attention_heads: 1,
            shared_fusion: true,
            cosine_eps: Some(COSINE_EPS),
            components: SlmComponents::default(),
        }
    }
}

fn check_width(what: &str, t: &Tensor, width: usize) -> Result<()> {
    let got = t.dim(D::Minus1)?;
    if got != width {
        bail_shape!("{what}: width {got} does not match descriptor width {width}");
    }
    Ok(())
}

/// `I_g' = L2(ReLU(L1(I_g)))`, `out = L5(L3(I_g') ⊙ p_g + L4(I_g'))`.
#[derive(Debug, Clone)]
pub struct MetaNet {
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub mul_head: Linear,
    pub add_head: Linear,
    pub out: Linear,
}

impl MetaNet {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            mlp_in: Linear::new(ps, &format!("{name}.mlp_in"), width, width, true)?,
            mlp_out: Linear::new(ps, &format!("{name}.mlp_out"), width, width, true)?,
            mul_head: Linear::new(ps, &format!("{name}.mul_head"), width, width, true)?,
            add_head: Linear::new(ps, &format!("{name}.add_head"), width, width, true)?,
            out: Linear::new(ps, &format!("{name}.out"), width, width, true)?,
        })
    }

    fn width(&self) -> usize {
        self.mlp_in.in_dim()
    }

    pub fn forward(&self, global_feat: &Tensor, global_descriptor: &Tensor) -> Result<Tensor> {
        check_width("global feature", global_feat, self.width())?;
        check_width("global descriptor", global_descriptor, self.width())?;
        let ig = self.mlp_out.forward(&nn::relu(&self.mlp_in.forward(global_feat)?)?)?;
        let gated = self.mul_head.forward(&ig)?.broadcast_mul(global_descriptor)?;
        self.out.forward(&(gated + self.add_head.forward(&ig)?)?)
    }
}

pub fn metanet_fuse(net: &MetaNet, global_feat: &Tensor, global_descriptor: &Tensor) -> Result<Tensor> {
    net.forward(global_feat, global_descriptor)
}

/// Single-layer scaled dot-product self-attention without positional
/// encoding, so it is equivariant to permutations of the unit tokens.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
}

impl Interaction {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            bail_arg!("attention width {width} not divisible by {heads} heads");
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(ps, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(ps, &format!("{name}.v"), width, width, true)?,
            heads,
        })
    }

    /// Attention over a `(B, N, C)` token sequence.
    pub fn attend(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, n, c) = tokens.dims3()?;
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(tokens)?)?;
        let k = split(self.k.forward(tokens)?)?;
        let v = split(self.v.forward(tokens)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = nn::softmax_last(&scores)?;
        Ok(attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?)
    }

    /// `global_fused`: `(B, C)`; `unit_descriptors`: `(k, C)` shared across the
    /// batch or `(B, k, C)`. Returns `(p_g*, p_i*)` as `(B, C)` and `(B, k, C)`.
    pub fn forward(&self, global_fused: &Tensor, unit_descriptors: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.q.in_dim();
        check_width("global token", global_fused, c)?;
        check_width("unit descriptors", unit_descriptors, c)?;
        let b = global_fused.dim(0)?;
        let units = match unit_descriptors.rank() {
            2 => unit_descriptors.unsqueeze(0)?.broadcast_as((b, unit_descriptors.dim(0)?, c))?,
            3 => unit_descriptors.clone(),
            _ => bail_shape!("unit descriptors must be (k, C) or (B, k, C), got {:?}", unit_descriptors.dims()),
        };
        let k = units.dim(1)?;
        if k == 0 {
            bail_arg!("interaction needs at least one unit descriptor");
        }
        let tokens = Tensor::cat(&[&global_fused.unsqueeze(1)?, &units], 1)?.contiguous()?;
        let out = self.attend(&tokens)?;
        let g = out.narrow(1, 0, 1)?.squeeze(1)?;
        let p = out.narrow(1, 1, k)?;
        Ok((g, p))
    }
}

pub fn interact(att: &Interaction, global_fused: &Tensor, unit_descriptors: &Tensor) -> Result<(Tensor, Tensor)> {
    att.forward(global_fused, unit_descriptors)
}

/// `e_i = L_out(σ(L_gate(p_i*)) ⊙ L_glob(p_g*))`.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub gate: Linear,
    pub global: Linear,
    pub out: Linear,
}

impl GatedFusion {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gate: Linear::new(ps, &format!("{name}.gate"), width, width, true)?,
            global: Linear::new(ps, &format!("{name}.global"), width, width, true)?,
            out: Linear::new(ps, &format!("{name}.out"), width, width, true)?,
        })
    }

    pub fn forward(&self, unit_refined: &Tensor, global_refined: &Tensor) -> Result<Tensor> {
        let c = self.gate.in_dim();
        check_width("unit token", unit_refined, c)?;
        check_width("global token", global_refined, c)?;
        let gate = nn::sigmoid(&self.gate.forward(unit_refined)?)?;
        let g = self.global.forward(global_refined)?;
        self.out.forward(&gate.broadcast_mul(&g)?)
    }
}

pub fn gated_fuse(fusion: &GatedFusion, unit_refined: &Tensor, global_refined: &Tensor) -> Result<Tensor> {
    fusion.forward(unit_refined, global_refined)
}

/// `k` guidance maps per image with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GuidanceMapSet {
    /// `(B, k, H, W)`
    pub maps: Tensor,
    /// `(H_c, W_c)` grid the cosines were computed on.
    pub source_grid: (usize, usize),
}

impl GuidanceMapSet {
    pub fn len(&self) -> usize {
        self.maps.dim(1).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map of unit `i` as `(B, 1, H, W)`.
    pub fn unit(&self, i: usize) -> Result<Tensor> {
        Ok(self.maps.narrow(1, i, 1)?)
    }
}

/// Cosine similarity between each embedding and every local feature vector,
/// bilinearly upsampled to `target`.
///
/// `embeddings`: `(B, k, C)`; `local_feat`: `(B, H_c, W_c, C)`.
pub fn guidance_maps(
    embeddings: &Tensor,
    local_feat: &Tensor,
    target: (usize, usize),
    eps: Option<f64>,
) -> Result<GuidanceMapSet> {
    let (b, k, c) = embeddings.dims3()?;
    let (lb, h_c, w_c, lc) = local_feat.dims4()?;
    if lb != b || lc != c {
        bail_shape!(
            "embeddings {:?} do not match local features {:?}",
            embeddings.dims(),
            local_feat.dims()
        );
    }
    let (h, w) = target;
    if h < h_c || w < w_c {
        bail_arg!("guidance target {h}x{w} is smaller than the feature grid {h_c}x{w_c}");
    }
    let local = local_feat.reshape((b, h_c * w_c, c))?;
    let e_sq = embeddings.sqr()?.sum_keepdim(D::Minus1)?; // (B, k, 1)
    let l_sq = local.sqr()?.sum_keepdim(D::Minus1)?.transpose(1, 2)?; // (B, 1, N)
    let guard = match eps {
        Some(e) => e,
        None => {
            let min_e = nn::to_f64_vec(&e_sq)?.into_iter().fold(f64::INFINITY, f64::min);
            let min_l = nn::to_f64_vec(&l_sq)?.into_iter().fold(f64::INFINITY, f64::min);
            if min_e == 0.0 {
                bail_arg!("zero-norm localization embedding with cosine guard disabled");
            }
            if min_l == 0.0 {
                bail_arg!("zero-norm local feature with cosine guard disabled");
            }
            0.0
        }
    };
    let dot = embeddings.matmul(&local.t()?.contiguous()?)?; // (B, k, N)
    let denom = (e_sq + guard)?.sqrt()?.broadcast_mul(&(l_sq + guard)?.sqrt()?)?;
    let cos = dot.broadcast_div(&denom)?.clamp(-1.0, 1.0)?;
    let low = cos.reshape((b, k, h_c, w_c))?;
    let maps = nn::resize_bilinear(&low, h, w)?.clamp(-1.0, 1.0)?;
    Ok(GuidanceMapSet {
        maps,
        source_grid: (h_c, w_c),
    })
}

#[derive(Debug)]
pub struct DescriptorBank {
    cfg: LocalizationConfig,
    store: ParamStore,
    /// `(k, C)`
    pub unit_descriptors: Option<Tensor>,
    /// `(C)`
    pub global_descriptor: Option<Tensor>,
    pub metanet: Option<MetaNet>,
    pub attention: Option<Interaction>,
    pub fusion: Vec<GatedFusion>,
}

impl DescriptorBank {
    pub fn new(cfg: &LocalizationConfig, ps: ParamStore) -> Result<Self> {
        let mut store = ps;
        let (k, c) = (cfg.units, cfg.width);
        if k == 0 || c == 0 {
            bail_arg!("descriptor bank needs k ≥ 1 and C ≥ 1");
        }
        let comp = cfg.components;
        if !comp.unit_descriptors && !comp.global_descriptor && !comp.global_feature {
            bail_arg!("localization needs at least one of unit descriptors, global descriptor or global feature");
        }
        if !comp.unit_descriptors && !(comp.global_descriptor || comp.global_feature) {
            bail_arg!("without unit descriptors a global input is required");
        }
        let std = 1.0;
        let unit_descriptors = if comp.unit_descriptors {
            Some(store.trainable("unit_descriptors", &[k, c], Init::Normal { std })?)
        } else {
            None
        };
        let global_descriptor = if comp.global_descriptor {
            Some(store.trainable("global_descriptor", &[c], Init::Normal { std })?)
        } else {
            None
        };
        let metanet = if comp.global_descriptor && comp.global_feature {
            Some(MetaNet::new(&mut store, "metanet", c)?)
        } else {
            None
        };
        let has_global = comp.global_descriptor || comp.global_feature;
        let (attention, fusion) = if comp.unit_descriptors && has_global {
            let att = Interaction::new(&mut store, "attention", c, cfg.attention_heads)?;
            let heads = if cfg.shared_fusion { 1 } else { k };
            let fusion = (0..heads)
                .map(|i| {
                    let name = if cfg.shared_fusion {
                        "fusion".to_string()
                    } else {
                        format!("fusion.{i}")
                    };
                    GatedFusion::new(&mut store, &name, c)
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(att), fusion)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            unit_descriptors,
            global_descriptor,
            metanet,
            attention,
            fusion,
        })
    }

    pub fn config(&self) -> &LocalizationConfig {
        &self.cfg
    }

    pub fn units(&self) -> usize {
        self.cfg.units
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// One `(B, k, C)` localization embedding per unit.
    pub fn embeddings(&self, global_feat: &Tensor) -> Result<Tensor> {
        check_width("global feature", global_feat, self.cfg.width)?;
        let b = global_feat.dim(0)?;
        let (k, c) = (self.cfg.units, self.cfg.width);
        let global_fused = match (&self.global_descriptor, &self.metanet) {
            (Some(pg), Some(net)) => Some(net.forward(global_feat, pg)?),
            (Some(pg), None) => Some(pg.unsqueeze(0)?.broadcast_as((b, c))?.contiguous()?),
            (None, _) if self.cfg.components.global_feature => Some(global_feat.clone()),
            (None, _) => None,
        };
        match (&self.unit_descriptors, global_fused, &self.attention) {
            (Some(units), Some(g), Some(att)) => {
                let (g_star, p_star) = att.forward(&g, units)?;
                let g_star = g_star.unsqueeze(1)?;
                if self.fusion.len() == 1 {
                    self.fusion[0].forward(&p_star, &g_star.broadcast_as((b, k, c))?)
                } else {
                    let per_unit = (0..k)
                        .map(|i| self.fusion[i].forward(&p_star.narrow(1, i, 1)?, &g_star))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Tensor::cat(&per_unit, 1)?)
                }
            }
            (Some(units), None, _) => Ok(units.unsqueeze(0)?.broadcast_as((b, k, c))?.contiguous()?),
            (None, Some(g), _) => Ok(g.unsqueeze(1)?.broadcast_as((b, k, c))?.contiguous()?),
            _ => bail_arg!("inconsistent localization components"),
        }
    }

    /// Fuse, interact, gate, then match against the local grid.
    pub fn localize(&self, features: &SemanticFeatures, target: (usize, usize)) -> Result<GuidanceMapSet> {
        check_width("semantic features", &features.global_feat, self.cfg.width)?;
        let e = self.embeddings(&features.global_feat)?;
        guidance_maps(&e, &features.local_feat, target, self.cfg.cosine_eps)
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::{DType, Device};

    fn eye(n: usize) -> Tensor {
        Tensor::eye(n, DType::F64, &Device::Cpu).unwrap()
    }

    fn zeros(n: usize) -> Tensor {
        Tensor::zeros(n, DType::F64, &Device::Cpu).unwrap()
    }

    fn ident(n: usize) -> Linear {
        Linear {
            weight: eye(n),
            bias: Some(zeros(n)),
        }
    }

    fn v(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn metanet_identity_cases() {
        let net = MetaNet {
            mlp_in: ident(3),
            mlp_out: ident(3),
            mul_head: ident(3),
            add_head: ident(3),
            out: ident(3),
        };
        let y = metanet_fuse(&net, &v(&[0.0; 3], &[1, 3]), &v(&[1.0, 2.0, 3.0], &[3])).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![0.0; 3]);
        let ig = [0.5, 1.0, 2.0];
        let y = metanet_fuse(&net, &v(&ig, &[1, 3]), &zeros(3)).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), ig.to_vec());
        assert!(metanet_fuse(&net, &v(&[0.0; 4], &[1, 4]), &zeros(3)).is_err());
    }

    #[test]
    fn gated_fuse_identity_cases() {
        let f = GatedFusion {
            gate: ident(3),
            global: ident(3),
            out: ident(3),
        };
        let pg = [1.0, -2.0, 4.0];
        let y = gated_fuse(&f, &zeros(3), &v(&pg, &[3])).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![0.5, -1.0, 2.0]);
        let y = gated_fuse(&f, &v(&[5.0, -3.0, 0.2], &[3]), &zeros(3)).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![0.0; 3]);
        assert!(gated_fuse(&f, &zeros(2), &zeros(3)).is_err());
    }

    #[test]
    fn interaction_equal_tokens_and_permutation() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let att = Interaction::new(&mut ps, "att", 4, 1).unwrap();
        let tok = [0.3, -0.1, 0.7, 0.2];
        let g = v(&tok, &[1, 4]);
        let units = v(&[tok, tok].concat(), &[2, 4]);
        let (gs, ps_) = interact(&att, &g, &units).unwrap();
        let gs = to_f64_vec(&gs).unwrap();
        let ps_ = to_f64_vec(&ps_).unwrap();
        for i in 0..4 {
            assert!((gs[i] - ps_[i]).abs() < 1e-12 && (gs[i] - ps_[4 + i]).abs() < 1e-12);
        }

        let g = v(&[0.1, 0.2, -0.3, 0.4], &[1, 4]);
        let a = [1.0, 0.0, -1.0, 0.5];
        let b = [-0.2, 0.9, 0.3, 0.0];
        let (g1, p1) = interact(&att, &g, &v(&[a, b].concat(), &[2, 4])).unwrap();
        let (g2, p2) = interact(&att, &g, &v(&[b, a].concat(), &[2, 4])).unwrap();
        let (g1, g2) = (to_f64_vec(&g1).unwrap(), to_f64_vec(&g2).unwrap());
        let (p1, p2) = (to_f64_vec(&p1).unwrap(), to_f64_vec(&p2).unwrap());
        for i in 0..4 {
            assert!((g1[i] - g2[i]).abs() < 1e-12);
            assert!((p1[i] - p2[4 + i]).abs() < 1e-12);
            assert!((p1[4 + i] - p2[i]).abs() < 1e-12);
        }
        assert!(interact(&att, &g, &Tensor::zeros((0, 4), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn interaction_matches_manual_softmax_attention() {
        // k = 2, width 4, hand-set weights: Q = I, K = I, V = 2I, zero bias.
        let att = Interaction {
            q: ident(4),
            k: ident(4),
            v: Linear {
                weight: (eye(4) * 2.0).unwrap(),
                bias: Some(zeros(4)),
            },
            heads: 1,
        };
        let toks = [[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]];
        let (g, p) = interact(&att, &v(&toks[0], &[1, 4]), &v(&[toks[1], toks[2]].concat(), &[2, 4])).unwrap();
        // manual: scores_ij = <t_i, t_j> / 2; out_i = Σ_j softmax_j · 2 t_j
        let mut expect = vec![];
        for ti in toks.iter() {
            let s: Vec<f64> = toks
                .iter()
                .map(|tj| ti.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for d in 0..4 {
                expect.push(
                    toks.iter()
                        .zip(&s)
                        .map(|(tj, sj)| (sj - m).exp() / z * 2.0 * tj[d])
                        .sum::<f64>(),
                );
            }
        }
        let got: Vec<f64> = to_f64_vec(&g).unwrap().into_iter().chain(to_f64_vec(&p).unwrap()).collect();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let cell = [0.6, -0.8, 0.0];
        let local = v(&cell.repeat(4), &[1, 2, 2, 3]);
        let m = guidance_maps(&v(&cell, &[1, 1, 3]), &local, (4, 4), Some(COSINE_EPS)).unwrap();
        assert_eq!(m.maps.dims(), &[1, 1, 4, 4]);
        assert!(to_f64_vec(&m.maps).unwrap().iter().all(|x| (x - 1.0).abs() < 1e-6));
        let m = guidance_maps(&v(&[0.0, 0.0, 2.0], &[1, 1, 3]), &local, (4, 4), Some(COSINE_EPS)).unwrap();
        assert!(to_f64_vec(&m.maps).unwrap().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn hand_computed_cosines_and_upsampling() {
        // grid cells: e=(1,0); cells (1,0), (0,1), (1,1), (-1,0)
        let local = v(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0], &[1, 2, 2, 2]);
        let e = v(&[1.0, 0.0], &[1, 1, 2]);
        let m = guidance_maps(&e, &local, (2, 2), None).unwrap();
        let c = to_f64_vec(&m.maps).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [1.0, 0.0, r, -1.0];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // 2x2 -> 4x4 half-pixel bilinear: source coords per axis = clamp(-0.25, 0.25, 0.75, 1.25)
        let m = guidance_maps(&e, &local, (4, 4), None).unwrap();
        let up = to_f64_vec(&m.maps).unwrap();
        let axis = [(0usize, 0usize, 0.0), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.0)];
        for (i, &(y0, y1, ty)) in axis.iter().enumerate() {
            for (j, &(x0, x1, tx)) in axis.iter().enumerate() {
                let g = |y: usize, x: usize| expect[y * 2 + x];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                let want = top * (1.0 - ty) + bot * ty;
                assert!((up[i * 4 + j] - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_norm_without_guard_is_an_error() {
        let local = v(&[1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let e = v(&[0.0, 0.0], &[1, 1, 2]);
        assert!(guidance_maps(&e, &local, (2, 2), None).is_err());
        let m = guidance_maps(&e, &local, (2, 2), Some(COSINE_EPS)).unwrap();
        assert!(to_f64_vec(&m.maps).unwrap().iter().all(|x| *x == 0.0));
        assert!(guidance_maps(&v(&[1.0, 0.0], &[1, 1, 2]), &local, (1, 1), None).is_err());
    }

    #[test]
    fn slm_variants_build_and_emit_k_maps() {
        let feats = SemanticFeatures {
            global_feat: Tensor::randn(0f64, 1.0, (2, 8), &Device::Cpu).unwrap(),
            local_feat: Tensor::randn(0f64, 1.0, (2, 2, 2, 8), &Device::Cpu).unwrap(),
        };
        let combos = [
            (true, false, false),
            (true, true, false),
            (true, false, true),
            (false, true, true),
            (true, true, true),
        ];
        let mut counts = vec![];
        for (u, g, f) in combos {
            let mut cfg = LocalizationConfig::new(3, 8);
            cfg.components = SlmComponents {
                unit_descriptors: u,
                global_descriptor: g,
                global_feature: f,
            };
            let bank = DescriptorBank::new(&cfg, ParamStore::new(DType::F64, 0)).unwrap();
            let m = bank.localize(&feats, (8, 8)).unwrap();
            assert_eq!(m.maps.dims(), &[2, 3, 8, 8]);
            counts.push(bank.params().num_trainable());
        }
        assert!(counts[0] < counts[1] && counts[1] < counts[4]);
        let mut bad = LocalizationConfig::new(3, 8);
        bad.components = SlmComponents {
            unit_descriptors: false,
            global_descriptor: false,
            global_feature: false,
        };
        assert!(DescriptorBank::new(&bad, ParamStore::new(DType::F64, 0)).is_err());
    }

    #[test]
    fn paper_unit_count_maps_in_range() {
        let cfg = LocalizationConfig::new(6, 16);
        let bank = DescriptorBank::new(&cfg, ParamStore::new(DType::F32, 4)).unwrap();
        let feats = SemanticFeatures {
            global_feat: Tensor::randn(0f32, 1.0, (1, 16), &Device::Cpu).unwrap(),
            local_feat: Tensor::randn(0f32, 1.0, (1, 16, 16, 16), &Device::Cpu).unwrap(),
        };
        let m = bank.localize(&feats, (64, 64)).unwrap();
        assert_eq!(m.maps.dims(), &[1, 6, 64, 64]);
        assert_eq!(m.len(), 6);
        assert!(to_f64_vec(&m.maps).unwrap().iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
