//! Fidelity and perceptual metrics with per-class aggregation.
//!
//! Images are `(C, H, W)` arrays in `[0, 1]`; all arithmetic is in f64.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::container::{HostTensor, TensorFile};
use crate::encoder::SemanticEncoder;
use crate::error::{bail_arg, bail_shape, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const CLIPSCORE_EPS: f64 = 1e-8;
/// Added to channel norms before LPIPS feature normalization.
pub const LPIPS_EPS: f64 = 1e-10;

fn same_shape(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        bail_shape!("metric inputs differ in shape: {:?} vs {:?}", a.dim(), b.dim());
    }
    Ok(())
}

/// `10·log10(max² / MSE)`; `+∞` when the images are identical.
pub fn psnr(pred: &ArrayView3<f32>, target: &ArrayView3<f32>, max_val: f64) -> Result<f64> {
    same_shape(pred, target)?;
    if max_val <= 0.0 {
        bail_arg!("psnr max_val must be positive, got {max_val}");
    }
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(x: &ArrayView2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for xo in 0..ow {
            rows[[y, xo]] = (0..k).map(|j| g[j] * x[[y, xo + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for yo in 0..oh {
        for xo in 0..ow {
            out[[yo, xo]] = (0..k).map(|j| g[j] * rows[[yo + j, xo]]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, dynamic range 1),
/// computed per channel over the valid region and averaged.
pub fn ssim(pred: &ArrayView3<f32>, target: &ArrayView3<f32>) -> Result<f64> {
    same_shape(pred, target)?;
    let (c, h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail_shape!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}");
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let x = pred.index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let y = target.index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let mu1 = filter_valid(&x.view(), &g);
        let mu2 = filter_valid(&y.view(), &g);
        let exx = filter_valid(&(&x * &x).view(), &g);
        let eyy = filter_valid(&(&y * &y).view(), &g);
        let exy = filter_valid(&(&x * &y).view(), &g);
        let mut sum = 0.0;
        for ((((m1, m2), xx), yy), xy) in mu1.iter().zip(&mu2).zip(&exx).zip(&eyy).zip(&exy) {
            let s11 = xx - m1 * m1;
            let s22 = yy - m2 * m2;
            let s12 = xy - m1 * m2;
            let num = (2.0 * m1 * m2 + c1) * (2.0 * s12 + c2);
            let den = (m1 * m1 + m2 * m2 + c1) * (s11 + s22 + c2);
            sum += num / den;
        }
        total += sum / mu1.len() as f64;
    }
    Ok(total / c as f64)
}

/// BT.601 luma of an RGB image in `[0, 1]` (studio range).
pub fn to_luma(img: &ArrayView3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = img.dim();
    if c != 3 {
        bail_shape!("luma conversion needs 3 channels, got {c}");
    }
    Ok(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        let v = 16.0
            + 65.481 * img[[0, y, x]] as f64
            + 128.553 * img[[1, y, x]] as f64
            + 24.966 * img[[2, y, x]] as f64;
        (v / 255.0) as f32
    }))
}

/// Backbone for the perceptual distance.
pub trait FeatureNet {
    /// Feature maps `(1, C_l, H_l, W_l)` of a `(1, 3, H, W)` f64 image in `[0, 1]`.
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;
    /// Non-negative per-channel weights `w_l`, one vector per layer.
    fn channel_weights(&self) -> &[Vec<f64>];
}

/// Stack of 3×3 conv + ReLU layers on `2x − 1` scaled input.
#[derive(Debug, Clone)]
pub struct ConvFeatureNet {
    layers: Vec<(Tensor, Tensor)>,
    weights: Vec<Vec<f64>>,
}

impl ConvFeatureNet {
    /// Seeded random layers with positive channel weights.
    pub fn stub(channels: &[usize], seed: u64) -> Result<Self> {
        if channels.is_empty() {
            bail_arg!("feature net needs at least one layer");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut weights = Vec::new();
        let mut cin = 3;
        for &cout in channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..cout).map(|_| normal.sample(&mut rng) * 0.1).collect();
            layers.push((
                Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?,
                Tensor::from_vec(b, (1, cout, 1, 1), &Device::Cpu)?,
            ));
            let u = Uniform::new(0.1, 1.0);
            weights.push((0..cout).map(|_| u.sample(&mut rng)).collect());
            cin = cout;
        }
        Ok(Self { layers, weights })
    }

    /// Reads `layers.{i}.weight`, `layers.{i}.bias` and `lin.{i}` for
    /// `i = 0, 1, …` until no further layer is present.
    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::load(path)?;
        let mut layers = Vec::new();
        let mut weights = Vec::new();
        let mut problems = Vec::new();
        for i in 0.. {
            let Some(w) = file.get(&format!("layers.{i}.weight")) else {
                break;
            };
            let w = w.to_tensor(DType::F64, &Device::Cpu)?;
            let cout = w.dim(0)?;
            let bias = match file.get(&format!("layers.{i}.bias")) {
                Some(b) => b.to_tensor(DType::F64, &Device::Cpu)?.reshape((1, cout, 1, 1))?,
                None => {
                    problems.push(format!("layers.{i}.bias: missing"));
                    continue;
                }
            };
            match file.get(&format!("lin.{i}")) {
                Some(l) if l.data.len() == cout => weights.push(l.data.iter().map(|v| *v as f64).collect()),
                Some(l) => problems.push(format!("lin.{i}: {} weights for {cout} channels", l.data.len())),
                None => problems.push(format!("lin.{i}: missing")),
            }
            layers.push((w, bias));
        }
        if layers.is_empty() {
            problems.push("layers.0.weight: missing".into());
        }
        if !problems.is_empty() {
            return Err(Error::WeightMismatch(problems));
        }
        Ok(Self { layers, weights })
    }

    /// Conv weights `(C_out, C_in, 3, 3)` and biases `(1, C_out, 1, 1)` per layer.
    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = TensorFile::new();
        for (i, ((w, b), lin)) in self.layers.iter().zip(&self.weights).enumerate() {
            file.insert(format!("layers.{i}.weight"), HostTensor::from_tensor(w)?);
            file.insert(format!("layers.{i}.bias"), HostTensor::from_tensor(&b.flatten_all()?)?);
            file.insert(
                format!("lin.{i}"),
                HostTensor::new(vec![lin.len()], lin.iter().map(|v| *v as f32).collect())?,
            );
        }
        file.save(path)
    }
}

impl FeatureNet for ConvFeatureNet {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = ((image * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            x = x.conv2d(w, 1, 1, 1, 1)?.broadcast_add(b)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn channel_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

fn image_tensor(img: &ArrayView3<f32>) -> Result<Tensor> {
    let (c, h, w) = img.dim();
    let data: Vec<f64> = img.iter().map(|v| *v as f64).collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?)
}

/// Layer sum of spatially averaged, channel-weighted squared differences
/// between unit-normalized feature vectors.
pub fn lpips(pred: &ArrayView3<f32>, target: &ArrayView3<f32>, net: &dyn FeatureNet) -> Result<f64> {
    same_shape(pred, target)?;
    let fa = net.features(&image_tensor(pred)?)?;
    let fb = net.features(&image_tensor(target)?)?;
    let weights = net.channel_weights();
    if weights.len() != fa.len() {
        bail_arg!("feature net has {} layers but {} weight vectors", fa.len(), weights.len());
    }
    let mut total = 0.0;
    for ((a, b), w) in fa.iter().zip(&fb).zip(weights) {
        let (_, c, h, wd) = a.dims4()?;
        if w.len() != c {
            bail_arg!("layer with {c} channels has {} weights", w.len());
        }
        let norm = |t: &Tensor| -> Result<Tensor> {
            let n = (t.sqr()?.sum_keepdim(1)?.sqrt()? + LPIPS_EPS)?;
            Ok(t.broadcast_div(&n)?)
        };
        let wt = Tensor::from_slice(w, (1, c, 1, 1), &Device::Cpu)?;
        let d = (norm(a)? - norm(b)?)?.broadcast_mul(&wt)?;
        let per_pixel = d.sqr()?.sum(1)?;
        total += per_pixel.sum_all()?.to_scalar::<f64>()? / (h * wd) as f64;
    }
    Ok(total)
}

/// Cosine similarity with the product of norms floored at `CLIPSCORE_EPS`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail_shape!("cosine of vectors with {} and {} entries", a.len(), b.len());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    // sqrt(aa·bb) rather than |a|·|b| keeps cosine(a, a) at exactly 1
    Ok(dot / (aa * bb).sqrt().max(CLIPSCORE_EPS))
}

/// Image embedding of the adapter-free encoder path.
pub fn embedding(img: &ArrayView3<f32>, encoder: &SemanticEncoder) -> Result<Vec<f64>> {
    let (c, h, w) = img.dim();
    let t = Tensor::from_vec(img.iter().copied().collect::<Vec<f32>>(), (1, c, h, w), &Device::Cpu)?
        .to_dtype(encoder.params().dtype())?;
    crate::nn::to_f64_vec(&encoder.embed(&t)?)
}

/// Cosine similarity of the two images' encoder embeddings.
pub fn clipscore(pred: &ArrayView3<f32>, target: &ArrayView3<f32>, encoder: &SemanticEncoder) -> Result<f64> {
    same_shape(pred, target)?;
    cosine(&embedding(pred, encoder)?, &embedding(target, encoder)?)
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub path: String,
    pub class_name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub clipscore: Option<f64>,
}

/// Means over a set of images. Infinite PSNR values are excluded from the
/// PSNR mean and counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub psnr: Option<f64>,
    pub psnr_infinite: usize,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub clipscore: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Summary {
    pub fn of(rows: &[&ImageScores]) -> Self {
        Summary {
            count: rows.len(),
            psnr: mean(rows.iter().map(|r| r.psnr).filter(|p| p.is_finite())),
            psnr_infinite: rows.iter().filter(|r| !r.psnr.is_finite()).count(),
            ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
            lpips: mean(rows.iter().filter_map(|r| r.lpips)),
            clipscore: mean(rows.iter().filter_map(|r| r.clipscore)),
        }
    }

    /// Unweighted mean of class summaries.
    fn balanced(classes: &[&Summary]) -> Self {
        Summary {
            count: classes.iter().map(|s| s.count).sum(),
            psnr: mean(classes.iter().filter_map(|s| s.psnr)),
            psnr_infinite: classes.iter().map(|s| s.psnr_infinite).sum(),
            ssim: mean(classes.iter().map(|s| s.ssim)).unwrap_or(f64::NAN),
            lpips: mean(classes.iter().filter_map(|s| s.lpips)),
            clipscore: mean(classes.iter().filter_map(|s| s.clipscore)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScores>,
    pub per_class: BTreeMap<String, Summary>,
    pub overall: Summary,
    /// Overall values are means of class means instead of image means.
    pub class_balanced: bool,
}

impl MetricReport {
    pub fn new(per_image: Vec<ImageScores>, class_balanced: bool) -> Self {
        let mut groups: BTreeMap<String, Vec<&ImageScores>> = BTreeMap::new();
        for r in &per_image {
            groups.entry(r.class_name.clone()).or_default().push(r);
        }
        let per_class: BTreeMap<String, Summary> =
            groups.iter().map(|(k, v)| (k.clone(), Summary::of(v))).collect();
        let overall = if class_balanced {
            Summary::balanced(&per_class.values().collect::<Vec<_>>())
        } else {
            Summary::of(&per_image.iter().collect::<Vec<_>>())
        };
        MetricReport {
            per_image,
            per_class,
            overall,
            class_balanced,
        }
    }

    /// Per-class and overall summaries as JSON.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            per_class: &'a BTreeMap<String, Summary>,
            overall: &'a Summary,
            class_balanced: bool,
        }
        Ok(serde_json::to_string_pretty(&View {
            per_class: &self.per_class,
            overall: &self.overall,
            class_balanced: self.class_balanced,
        })? + "\n")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["path", "class", "psnr", "ssim", "lpips", "clipscore"])
            .map_err(csv_err)?;
        for r in &self.per_image {
            w.write_record([
                r.path.clone(),
                r.class_name.clone(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                opt(r.lpips),
                opt(r.clipscore),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
    }

    /// Writes `<stem>.csv` (per image) and `<stem>.json` (summaries).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.summary_json()?).map_err(|e| Error::io(&json_path, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}
