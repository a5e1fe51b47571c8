//! Dataset preparation: class-stratified splits, bicubic degradation,
//! paired patch sampling and dihedral augmentation.
//!
//! Images are `(C, H, W)` float arrays in `[0, 1]`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, bail_shape, Error, Result};

pub type Image = Array3<f32>;

pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

pub const MANIFEST_VERSION: u32 = 1;

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

// ---------------------------------------------------------------- image io

/// Decodes any supported file to 8-bit RGB and scales by 1/255.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB (3 channels) or grayscale (1 channel) PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, img: &ArrayView3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match c {
        3 => {
            let buf: Vec<u8> = (0..h)
                .flat_map(|y| (0..w).flat_map(move |x| (0..3).map(move |ch| (ch, y, x))))
                .map(|(ch, y, x)| quantize(img[[ch, y, x]]))
                .collect();
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from dims")
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(err)
        }
        1 => {
            let buf: Vec<u8> = img.iter().map(|v| quantize(*v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from dims")
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(err)
        }
        _ => bail_shape!("cannot write a {c}-channel image as PNG"),
    }
}

/// Stacks equally sized images into a `(B, C, H, W)` f32 tensor.
pub fn to_batch(images: &[&Image], device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail_arg!("empty image batch");
    };
    let dim = first.dim();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.dim() != dim {
            bail_shape!("batch images differ in size: {:?} vs {:?}", dim, img.dim());
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), dim.0, dim.1, dim.2), device)?)
}

/// Splits a `(B, C, H, W)` tensor back into images.
pub fn from_batch(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let n = c * h * w;
    (0..b)
        .map(|i| Ok(Array3::from_shape_vec((c, h, w), flat[i * n..(i + 1) * n].to_vec()).expect("sized")))
        .collect()
}

// ---------------------------------------------------------------- bicubic

pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Taps of one output sample: clamped source indices and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

/// Per-output-sample taps along one axis. On downscale the kernel is
/// stretched by the scale factor; indices outside the source are clamped.
pub fn bicubic_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - 0.5 - support).floor() as i64 + 1;
            let hi = (center - 0.5 + support).ceil() as i64 - 1;
            let mut index = Vec::new();
            let mut weight = Vec::new();
            for j in lo..=hi {
                let w = cubic((j as f64 + 0.5 - center) / stretch);
                if w != 0.0 {
                    index.push(j.clamp(0, n_in as i64 - 1) as usize);
                    weight.push(w);
                }
            }
            let total: f64 = weight.iter().sum();
            weight.iter_mut().for_each(|w| *w /= total);
            Taps { index, weight }
        })
        .collect()
}

/// Separable bicubic resize; output is not range-clamped.
pub fn bicubic_resize(img: &ArrayView3<f32>, out_h: usize, out_w: usize) -> Result<Image> {
    let (c, h, w) = img.dim();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        bail_arg!("bicubic resize from {h}x{w} to {out_h}x{out_w}: sizes must be positive");
    }
    let ty = bicubic_taps(h, out_h);
    let tx = bicubic_taps(w, out_w);
    let mut rows = ndarray::Array3::<f64>::zeros((c, h, out_w));
    for ch in 0..c {
        for y in 0..h {
            for (x, t) in tx.iter().enumerate() {
                rows[[ch, y, x]] = t
                    .index
                    .iter()
                    .zip(&t.weight)
                    .map(|(&j, &wt)| wt * img[[ch, y, j]] as f64)
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (y, t) in ty.iter().enumerate() {
            for x in 0..out_w {
                let v: f64 = t
                    .index
                    .iter()
                    .zip(&t.weight)
                    .map(|(&j, &wt)| wt * rows[[ch, j, x]])
                    .sum();
                out[[ch, y, x]] = v as f32;
            }
        }
    }
    Ok(out)
}

/// Bicubic downscale by an integer factor (sizes floored).
pub fn degrade(hr: &ArrayView3<f32>, scale: usize) -> Result<Image> {
    let (_, h, w) = hr.dim();
    if scale == 0 || h < scale || w < scale {
        bail_arg!("cannot downscale {h}x{w} by {scale}");
    }
    bicubic_resize(hr, h / scale, w / scale)
}

/// Top-left crop to multiples of `multiple` on both axes.
pub fn crop_to_multiple(img: &ArrayView3<f32>, multiple: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    let (h2, w2) = (h / multiple * multiple, w / multiple * multiple);
    if h2 == 0 || w2 == 0 {
        bail_shape!("image {h}x{w} is smaller than {multiple}x{multiple}");
    }
    Ok(img.slice(s![.., ..h2, ..w2]).to_owned())
}

// ---------------------------------------------------------------- augmentation

/// The 8 symmetries of the square: `rotations` quarter turns
/// counter-clockwise, preceded by a horizontal flip when `flip` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rotations: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        rotations: 0,
    };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Self::from_index(i);
        }
        out
    }

    pub fn from_index(i: usize) -> Self {
        Dihedral {
            flip: i >= 4,
            rotations: (i % 4) as u8,
        }
    }

    pub fn index(self) -> usize {
        self.rotations as usize + if self.flip { 4 } else { 0 }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::from_index(rng.gen_range(0..8))
    }

    pub fn apply(self, img: &ArrayView3<f32>) -> Result<Image> {
        let (_, h, w) = img.dim();
        if self.rotations % 2 == 1 && h != w {
            bail_shape!("quarter-turn rotation needs a square patch, got {h}x{w}");
        }
        let mut v = img.view();
        if self.flip {
            v.invert_axis(Axis(2));
        }
        for _ in 0..self.rotations {
            // counter-clockwise: transpose then flip rows
            v.swap_axes(1, 2);
            v.invert_axis(Axis(1));
        }
        Ok(v.as_standard_layout().into_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub hr: Image,
    pub lr: Image,
    pub class_name: String,
    pub source: PathBuf,
}

/// Applies one uniformly drawn dihedral transform to both patches.
pub fn augment(pair: &PairedSample, rng: &mut impl Rng) -> Result<PairedSample> {
    augment_with(pair, Dihedral::sample(rng))
}

pub fn augment_with(pair: &PairedSample, t: Dihedral) -> Result<PairedSample> {
    Ok(PairedSample {
        hr: t.apply(&pair.hr.view())?,
        lr: t.apply(&pair.lr.view())?,
        class_name: pair.class_name.clone(),
        source: pair.source.clone(),
    })
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub name: String,
    /// Paths relative to the manifest root.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => bail_arg!("unknown split {other:?} (expected train or test)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub root: PathBuf,
    pub seed: u64,
    /// `(train, test)` parts.
    pub ratio: (u32, u32),
    pub scale: Option<usize>,
    pub classes: Vec<ClassSplit>,
}

/// One image of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub class_name: String,
    pub path: PathBuf,
}

impl DatasetManifest {
    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn entries(&self, split: Split) -> Vec<Entry> {
        self.classes
            .iter()
            .flat_map(|c| {
                let list = match split {
                    Split::Train => &c.train,
                    Split::Test => &c.test,
                };
                list.iter().map(|p| Entry {
                    class_name: c.name.clone(),
                    path: self.root.join(p),
                })
            })
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.classes
            .iter()
            .map(|c| match split {
                Split::Train => c.train.len(),
                Split::Test => c.test.len(),
            })
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

/// Number of training items for a class of `n` images: `floor(n·train/(train+test))`.
pub fn train_count(n: usize, ratio: (u32, u32)) -> usize {
    n * ratio.0 as usize / (ratio.0 + ratio.1) as usize
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Seeded, class-stratified partition of `root/<class>/<image>`.
pub fn split_dataset(root: &Path, ratio: (u32, u32), seed: u64) -> Result<DatasetManifest> {
    if ratio.0 == 0 || ratio.1 == 0 {
        bail_arg!("split ratio {}:{} must have positive parts", ratio.0, ratio.1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::new();
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut images: Vec<PathBuf> = sorted_dir(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .map(|p| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or(p))
            .collect();
        if images.is_empty() {
            bail_arg!("class {name:?} under {} contains no images", root.display());
        }
        images.shuffle(&mut rng);
        let n_train = train_count(images.len(), ratio);
        let mut test = images.split_off(n_train);
        images.sort();
        test.sort();
        classes.push(ClassSplit {
            name,
            train: images,
            test,
        });
    }
    if classes.is_empty() {
        bail_arg!("no class subdirectories under {}", root.display());
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        seed,
        ratio,
        scale: None,
        classes,
    })
}

// ---------------------------------------------------------------- sampling

/// Decoded-image cache shared by sampling and evaluation.
#[derive(Debug, Default)]
pub struct ImageCache {
    images: HashMap<PathBuf, Arc<Image>>,
}

impl ImageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, path: &Path) -> Result<Arc<Image>> {
        if let Some(img) = self.images.get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(load_image(path)?);
        self.images.insert(path.to_path_buf(), img.clone());
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    /// LR patch side `P`; HR crops are `s·P`.
    pub patch: usize,
    pub batch: usize,
    pub scale: usize,
    pub augment: bool,
}

const MAX_DRAWS_PER_SAMPLE: usize = 64;

/// Crops a random HR patch from a random training image, optionally
/// augments it, then degrades it. Images smaller than the HR patch are
/// skipped with a warning and another image is drawn.
pub fn sample_batch(
    manifest: &DatasetManifest,
    cache: &mut ImageCache,
    spec: SampleSpec,
    rng: &mut impl Rng,
) -> Result<Vec<PairedSample>> {
    let entries = manifest.entries(Split::Train);
    if entries.is_empty() {
        bail_arg!("manifest has no training images");
    }
    let hp = spec.patch * spec.scale;
    let mut out = Vec::with_capacity(spec.batch);
    let mut draws = 0;
    while out.len() < spec.batch {
        draws += 1;
        if draws > MAX_DRAWS_PER_SAMPLE * spec.batch.max(1) {
            bail_arg!("no training image is at least {hp}x{hp}");
        }
        let e = &entries[rng.gen_range(0..entries.len())];
        let img = cache.get(&e.path)?;
        let (_, h, w) = img.dim();
        if h < hp || w < hp {
            log::warn!("skipping {} ({h}x{w}) smaller than {hp}x{hp} patch", e.path.display());
            continue;
        }
        let y = rng.gen_range(0..=h - hp);
        let x = rng.gen_range(0..=w - hp);
        let mut hr = img.slice(s![.., y..y + hp, x..x + hp]).to_owned();
        if spec.augment {
            hr = Dihedral::sample(rng).apply(&hr.view())?;
        }
        let lr = bicubic_resize(&hr.view(), spec.patch, spec.patch)?;
        out.push(PairedSample {
            hr,
            lr,
            class_name: e.class_name.clone(),
            source: e.path.clone(),
        });
    }
    Ok(out)
}

/// `(lr, hr)` batch tensors of a sampled batch.
pub fn collate(samples: &[PairedSample], device: &Device) -> Result<(Tensor, Tensor)> {
    let lr: Vec<&Image> = samples.iter().map(|p| &p.lr).collect();
    let hr: Vec<&Image> = samples.iter().map(|p| &p.hr).collect();
    Ok((to_batch(&lr, device)?, to_batch(&hr, device)?))
}

/// Writes the bicubic LR counterpart of every image under `src` to the same
/// relative path (as PNG) under `dst`. Returns the number of images written.
pub fn degrade_tree(src: &Path, dst: &Path, scale: usize) -> Result<usize> {
    let mut count = 0;
    let mut stack = vec![src.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for p in sorted_dir(&dir)? {
            if p.is_dir() {
                stack.push(p);
            } else if is_image(&p) {
                let hr = crop_to_multiple(&load_image(&p)?.view(), scale)?;
                let lr = degrade(&hr.view(), scale)?;
                let rel = p.strip_prefix(src).expect("walked from src");
                save_png(&dst.join(rel).with_extension("png"), &lr.view())?;
                count += 1;
            }
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        Array3::from_shape_fn((c, h, w), |(k, y, x)| (k * 100 + y * w + x) as f32 / 100.0)
    }

    #[test]
    fn cubic_kernel_knots() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert_eq!(cubic(-1.5), cubic(1.5));
        assert_eq!(cubic(0.5), 0.5625);
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ramp(3, 7, 5);
        assert_eq!(bicubic_resize(&img.view(), 7, 5).unwrap(), img);
    }

    #[test]
    fn taps_sum_to_one() {
        for (a, b) in [(8, 4), (4, 8), (64, 16), (7, 3), (3, 11)] {
            for t in bicubic_taps(a, b) {
                assert!((t.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dihedral_group_structure() {
        let img = ramp(2, 4, 4);
        let mut seen = Vec::new();
        for d in Dihedral::all() {
            let out = d.apply(&img.view()).unwrap();
            assert!(!seen.contains(&out));
            seen.push(out);
        }
        let flip = Dihedral { flip: true, rotations: 0 };
        let twice = flip.apply(&flip.apply(&img.view()).unwrap().view()).unwrap();
        assert_eq!(twice, img);
        let quarter = Dihedral { flip: false, rotations: 1 }.apply(&img.view()).unwrap();
        // counter-clockwise: the top-right corner moves to the top-left
        assert_eq!(quarter[[0, 0, 0]], img[[0, 0, 3]]);
    }

    #[test]
    fn rotation_rejects_non_square() {
        let img = ramp(1, 2, 3);
        assert!(Dihedral { flip: true, rotations: 0 }.apply(&img.view()).is_ok());
        assert!(Dihedral { flip: false, rotations: 1 }.apply(&img.view()).is_err());
    }

    #[test]
    fn train_count_floors() {
        assert_eq!(train_count(100, (3, 1)), 75);
        assert_eq!(train_count(10, (3, 1)), 7);
        assert_eq!(train_count(400, (4, 1)), 320);
    }

    #[test]
    fn batch_roundtrip() {
        let a = ramp(3, 2, 3);
        let b = ramp(3, 2, 3) * 2.0;
        let t = to_batch(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 3]);
        assert_eq!(from_batch(&t).unwrap(), vec![a, b]);
    }
}
