#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semguide::data::{save_png, Image};

/// Smooth colour gradients, a few oriented gratings and sharp-edged shapes.
pub fn synthetic_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::<f32>::zeros((3, h, w));
    let base: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let tilt: [f32; 2] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let gratings: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..std::f32::consts::PI),
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.0..6.28),
                [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)],
            )
        })
        .collect();
    let boxes: Vec<(usize, usize, usize, usize, [f32; 3])> = (0..3)
        .map(|_| {
            let y0 = rng.gen_range(0..h);
            let x0 = rng.gen_range(0..w);
            (
                y0,
                x0,
                y0 + rng.gen_range(1..(h / 2).max(2)),
                x0 + rng.gen_range(1..(w / 2).max(2)),
                [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
            for c in 0..3 {
                let mut v = base[c] * 0.6 + 0.2 + tilt[0] * fy + tilt[1] * fx;
                for (theta, freq, phase, amp) in &gratings {
                    let t = (x as f32 * theta.cos() + y as f32 * theta.sin()) * freq + phase;
                    v += amp[c] * t.sin();
                }
                for (y0, x0, y1, x1, col) in &boxes {
                    if (*y0..*y1).contains(&y) && (*x0..*x1).contains(&x) {
                        v += col[c];
                    }
                }
                img[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Writes `classes × per_class` PNGs of `size × size` under `root/<class>/`.
pub fn write_class_tree(root: &Path, classes: usize, per_class: usize, size: usize) {
    for c in 0..classes {
        for i in 0..per_class {
            let img = synthetic_image((c * 1000 + i) as u64, size, size);
            save_png(&root.join(format!("class{c:02}")).join(format!("img{i:03}.png")), &img.view()).unwrap();
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between backprop and central
/// differences, per variable. `loss` must build a fresh f64 scalar graph.
pub fn gradient_errors(vars: &[(String, Var)], loss: impl Fn() -> Tensor, h: f64) -> Vec<(String, f64)> {
    let l = loss();
    let grads = l.backward().unwrap();
    vars.iter()
        .map(|(name, var)| {
            assert_eq!(var.dtype(), DType::F64, "{name} must be f64");
            let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
                None => vec![0.0; var.elem_count()],
            };
            let original = var.as_tensor().copy().unwrap();
            let mut values: Vec<f64> = original.flatten_all().unwrap().to_vec1().unwrap();
            let mut numeric = vec![0.0; values.len()];
            for i in 0..values.len() {
                let v0 = values[i];
                let mut eval = |v: f64| {
                    values[i] = v;
                    var.set(&Tensor::from_slice(&values, var.dims(), &Device::Cpu).unwrap()).unwrap();
                    loss().to_scalar::<f64>().unwrap()
                };
                let up = eval(v0 + h);
                let down = eval(v0 - h);
                values[i] = v0;
                numeric[i] = (up - down) / (2.0 * h);
            }
            var.set(&original).unwrap();
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            (name.clone(), diff / na.max(nn).max(1e-12))
        })
        .collect()
}

/// `Σ out ⊙ w` for a fixed random weighting `w`, so every output entry matters.
pub fn weighted_sum(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, out.dims(), 1.0);
    (out * w).unwrap().sum_all().unwrap()
}

/// Aerial-style crop: flat rooftops, straight roads and fine ground texture.
pub fn aerial_crop(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground: [f32; 3] = [rng.gen_range(0.3..0.5), rng.gen_range(0.35..0.55), rng.gen_range(0.2..0.4)];
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let n: f32 = rng.gen_range(-0.04..0.04);
            for c in 0..3 {
                img[[c, y, x]] = ground[c] + n;
            }
        }
    }
    for _ in 0..2 {
        let horizontal = rng.gen_bool(0.5);
        let at = rng.gen_range(0..size);
        let width = rng.gen_range(2..5);
        let tone: f32 = rng.gen_range(0.5..0.7);
        for i in 0..size {
            for d in 0..width {
                let (y, x) = if horizontal { (at + d, i) } else { (i, at + d) };
                if y < size && x < size {
                    for c in 0..3 {
                        img[[c, y, x]] = tone;
                    }
                }
            }
        }
    }
    for _ in 0..6 {
        let (h, w) = (rng.gen_range(4..size / 3), rng.gen_range(4..size / 3));
        let (y0, x0) = (rng.gen_range(0..size - h), rng.gen_range(0..size - w));
        let roof: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let shade = if y == y0 + h - 1 || x == x0 + w - 1 { 0.6 } else { 1.0 };
                for c in 0..3 {
                    img[[c, y, x]] = roof[c] * shade;
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}
