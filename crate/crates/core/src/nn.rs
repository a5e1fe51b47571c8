//! Differentiable building blocks on top of candle tensors.
//!
//! Layers are composed from candle ops so gradients flow through them. The
//! one custom kernel is the im2col/col2im pair behind stride-1 convolution.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let init = Init::fan_in(d_in);
        let weight = ps.trainable(&format!("{name}.weight"), &[d_out, d_in], init)?;
        let bias = if bias {
            Some(ps.trainable(&format!("{name}.bias"), &[d_out], init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn frozen(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        let weight = ps.frozen(&format!("{name}.weight"), &[d_out, d_in], Init::Normal { std })?;
        let bias = Some(ps.frozen(&format!("{name}.bias"), &[d_out], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    /// Applies the layer over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() == 1 {
            return Ok(self.forward(&x.unsqueeze(0)?)?.squeeze(0)?);
        }
        let d_in = self.in_dim();
        if x.dim(D::Minus1)? != d_in {
            bail_shape!(
                "linear expects last dim {d_in}, got input {:?}",
                x.dims()
            );
        }
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let init = Init::fan_in(c_in * kernel * kernel);
        Self::with_init(ps, name, c_in, c_out, kernel, init, if bias { Some(init) } else { None })
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = ps.trainable(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], weight_init)?;
        let bias = match bias_init {
            Some(init) => Some(ps.trainable(&format!("{name}.bias"), &[c_out], init)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride: 1,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    /// `x`: `(B, C_in, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_in = self.weight.dim(1)?;
        if x.rank() != 4 || x.dim(1)? != c_in {
            bail_shape!("conv expects (B, {c_in}, H, W), got {:?}", x.dims());
        }
        let y = if self.stride == 1 && self.weight.dim(2)? == self.weight.dim(3)? {
            conv_unfolded(x, &self.weight, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Geometry shared by the unfold and fold kernels.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.k, self.w + 2 * self.pad + 1 - self.k)
    }

    /// Visits every (column index, image index) pair with an in-bounds source pixel.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let k = self.k;
        for c in 0..self.c {
            for di in 0..k {
                for dj in 0..k {
                    let row = (c * k + di) * k + dj;
                    for y in 0..ho {
                        let sy = y + di;
                        if sy < self.pad || sy - self.pad >= self.h {
                            continue;
                        }
                        let src = (c * self.h + sy - self.pad) * self.w;
                        let dst = (row * ho + y) * wo;
                        for x in 0..wo {
                            let sx = x + dj;
                            if sx >= self.pad && sx - self.pad < self.w {
                                f(dst + x, src + sx - self.pad);
                            }
                        }
                    }
                }
            }
        }
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn cols_len(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.c * self.k * self.k * ho * wo
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("unfold kernels need contiguous input".into())),
    }
}

/// `(B, C, H, W)` to `(B, C·k·k, H'·W')` patch columns.
struct Im2Col(Unfold);

/// Adjoint of [`Im2Col`]: sums columns back into the image.
struct Col2Im(Unfold);

macro_rules! unfold_kernel {
    ($storage:expr, $layout:expr, $g:expr, $in_len:expr, $out_len:expr, |$o:ident, $i:ident, $dst:ident, $src:ident| $body:expr) => {{
        use candle_core::CpuStorage;
        fn run<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: Unfold, in_len: usize, out_len: usize) -> Vec<T> {
            let b = src.len() / in_len;
            let mut dst = vec![T::default(); b * out_len];
            for n in 0..b {
                let $src = &src[n * in_len..(n + 1) * in_len];
                let $dst = &mut dst[n * out_len..(n + 1) * out_len];
                g.for_each(|$o, $i| $body);
            }
            dst
        }
        match $storage {
            CpuStorage::F32(d) => CpuStorage::F32(run(contiguous_slice(d, $layout)?, $g, $in_len, $out_len)),
            CpuStorage::F64(d) => CpuStorage::F64(run(contiguous_slice(d, $layout)?, $g, $in_len, $out_len)),
            _ => return Err(candle_core::Error::Msg("unfold kernels support f32 and f64".into())),
        }
    }};
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let g = self.0;
        let b = layout.dims()[0];
        let out = unfold_kernel!(storage, layout, g, g.image_len(), g.cols_len(), |o, i, dst, src| dst[o] = src[i]);
        let (ho, wo) = g.out_hw();
        Ok((out, (b, g.c * g.k * g.k, ho * wo).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let g = self.0;
        let b = layout.dims()[0];
        let out = unfold_kernel!(storage, layout, g, g.cols_len(), g.image_len(), |o, i, dst, src| dst[i] += src[o]);
        Ok((out, (b, g.c, g.h, g.w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Stride-1 square-kernel convolution as im2col plus one matmul. Its gradient
/// is far cheaper on CPU than the built-in transposed convolution.
fn conv_unfolded(x: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, _, k, _) = weight.dims4()?;
    let g = Unfold { c, h, w, k, pad: padding };
    let (ho, wo) = g.out_hw();
    let cols = if k == 1 && padding == 0 {
        x.reshape((b, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let y = weight.reshape((1, c_out, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, c_out, ho, wo))?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Numerically shifted softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Normalizes over `dim` to zero mean and unit (biased) variance.
pub fn normalize_over(x: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(dim)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(dim)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Layer norm across channels at each spatial position of `(B, C, H, W)`,
/// without affine parameters.
pub fn channel_layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 4 {
        bail_shape!("channel layer norm expects (B, C, H, W), got {:?}", x.dims());
    }
    normalize_over(x, 1, eps)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.trainable(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            beta: ps.trainable(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn frozen(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.frozen(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            beta: ps.frozen(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let y = normalize_over(x, last, self.eps)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Half-pixel bilinear interpolation weights as a dense `(n_out, n_in)`
/// row-stochastic matrix. Source coordinates outside the grid are clamped to
/// the border, so every row is a convex combination.
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    if n_in == n_out {
        for i in 0..n_in {
            m[i * n_in + i] = 1.0;
        }
        return m;
    }
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let t = src - lo as f64;
        m[o * n_in + lo] += 1.0 - t;
        m[o * n_in + hi] += t;
    }
    m
}

fn weight_matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_weights(n_in, n_out), (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of the two trailing axes of a tensor of rank ≥ 2.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        bail_arg!("resize target must be positive, got {out_h}x{out_w}");
    }
    let rank = x.rank();
    if rank < 2 {
        bail_shape!("resize needs at least two axes, got {:?}", x.dims());
    }
    let (h, w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (dtype, device) = (x.dtype(), x.device());
    let mut y = x.clone();
    if w != out_w {
        let rw = weight_matrix(w, out_w, dtype, device)?;
        y = y.broadcast_matmul(&rw.t()?)?;
    }
    if h != out_h {
        let rh = weight_matrix(h, out_h, dtype, device)?;
        y = rh.broadcast_matmul(&y)?;
    }
    Ok(y)
}

/// Depth-to-space: `(B, C·s², H, W)` → `(B, C, s·H, s·W)` with output
/// `(c, h·s+dy, w·s+dx)` taken from input channel `c·s² + dy·s + dx`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        bail_arg!("pixel shuffle factor must be positive");
    }
    let (b, c, h, w) = x.dims4()?;
    if c % (s * s) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel shuffle: {c} channels not divisible by {}",
            s * s
        )));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let c_out = c / (s * s);
    Ok(x
        .reshape((b * c_out, s, s, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?
        .reshape((b, c_out, h * s, w * s))?)
}

pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        bail_shape!("l1 loss: pred {:?} vs target {:?}", pred.dims(), target.dims());
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn unfolded_conv_matches_builtin_values_and_gradients() {
        for (k, pad) in [(3, 1), (3, 0), (1, 0), (5, 2)] {
            let x = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &Device::Cpu).unwrap()).unwrap();
            let w = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &Device::Cpu).unwrap()).unwrap();
            let ours = conv_unfolded(&x, &w, pad).unwrap();
            let reference = x.conv2d(&w, pad, 1, 1, 1).unwrap();
            let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k={k}: {diff}");
            let weights = Tensor::randn(0f64, 1.0, ours.dims(), &Device::Cpu).unwrap();
            let g1 = (&ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
                assert!(d.to_scalar::<f64>().unwrap() < 1e-10, "k={k}");
            }
        }
    }

    #[test]
    fn pixel_shuffle_block_layout() {
        // One pixel, four channels [a, b, c, d] -> 2x2 block [[a, b], [c, d]].
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(to_f64_vec(&y).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_matches_index_formula() {
        let (c, s, h, w) = (2usize, 3usize, 2usize, 3usize);
        let n = c * s * s * h * w;
        let data: Vec<f64> = (0..n).map(|v| v as f64).collect();
        let x = t(&data, &[1, c * s * s, h, w]);
        let y = to_f64_vec(&pixel_shuffle(&x, s).unwrap()).unwrap();
        for ci in 0..c {
            for hh in 0..h {
                for ww in 0..w {
                    for dy in 0..s {
                        for dx in 0..s {
                            let src = ((ci * s * s + dy * s + dx) * h + hh) * w + ww;
                            let dst = (ci * (s * h) + hh * s + dy) * (s * w) + ww * s + dx;
                            assert_eq!(y[dst], data[src]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_shape_and_identity() {
        let x = Tensor::zeros((1, 4, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(pixel_shuffle(&x, 2).unwrap().dims(), &[1, 1, 4, 4]);
        let r = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        assert_eq!(to_f64_vec(&pixel_shuffle(&r, 1).unwrap()).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let bad = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(pixel_shuffle(&bad, 2).is_err());
    }

    #[test]
    fn bilinear_rows_are_convex() {
        for (n_in, n_out) in [(2, 3), (4, 16), (16, 4), (7, 5), (1, 4)] {
            let m = bilinear_weights(n_in, n_out);
            for row in m.chunks(n_in) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_two_to_three_midpoint() {
        let x = t(&[0.0, 2.0, 4.0, 6.0], &[2, 2]);
        let y = to_f64_vec(&resize_bilinear(&x, 3, 3).unwrap()).unwrap();
        // centre is the mean of all four corners, edge midpoints are pair means
        assert_eq!(y[4], 3.0);
        assert_eq!(y[1], 1.0);
        assert_eq!(y[3], 2.0);
        assert_eq!(y[0], 0.0);
        assert_eq!(y[8], 6.0);
    }

    #[test]
    fn l1_loss_constant_offset() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = (&a + 0.1).unwrap();
        assert!((scalar(&l1_loss(&b, &a).unwrap()).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(scalar(&l1_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let c = Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(l1_loss(&a, &c).is_err());
    }

    #[test]
    fn channel_layer_norm_moments() {
        let x = Tensor::randn(0.0f64, 3.0, (2, 5, 3, 3), &Device::Cpu).unwrap();
        let y = channel_layer_norm(&x, 1e-5).unwrap();
        let mean = to_f64_vec(&y.mean_keepdim(1).unwrap()).unwrap();
        let var = to_f64_vec(&y.sqr().unwrap().mean_keepdim(1).unwrap()).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], &[2, 3]);
        let y = to_f64_vec(&softmax_last(&x).unwrap()).unwrap();
        assert!((y[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((y[5] - 1.0).abs() < 1e-12);
    }
}
