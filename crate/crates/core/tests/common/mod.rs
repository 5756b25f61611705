//! Helpers shared by the integration tests. Each test crate uses a subset.
#![allow(dead_code)]

pub mod suite;

use nic_core::image_io::RgbImage;
use nic_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Natural-looking test image: a smooth colour field, a few flat ellipses
/// and rectangles, a faint sinusoidal texture and light noise.
pub fn synth(seed: u64, w: usize, h: usize) -> RgbImage {
    let mut rng = rng(seed);
    const G: usize = 5;
    let grid: Vec<f32> = (0..3 * G * G).map(|_| rng.gen()).collect();
    struct Shape {
        ellipse: bool,
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        colour: [f32; 3],
    }
    let shapes: Vec<Shape> = (0..6)
        .map(|_| Shape {
            ellipse: rng.gen_bool(0.5),
            cx: rng.gen_range(0.0..w as f32),
            cy: rng.gen_range(0.0..h as f32),
            rx: rng.gen_range(1.0..(w as f32 / 3.0).max(1.5)),
            ry: rng.gen_range(1.0..(h as f32 / 3.0).max(1.5)),
            colour: [rng.gen(), rng.gen(), rng.gen()],
        })
        .collect();
    let (fx, fy) = (rng.gen_range(0.2..0.9f32), rng.gen_range(0.2..0.9f32));
    let mut px = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = x as f32 / w as f32 * (G - 1) as f32;
            let gy = y as f32 / h as f32 * (G - 1) as f32;
            let (x0, y0) = (gx as usize, gy as usize);
            let (tx, ty) = (gx - x0 as f32, gy - y0 as f32);
            let (xf, yf) = (x as f32, y as f32);
            for c in 0..3 {
                let at = |i: usize, j: usize| grid[(c * G + j.min(G - 1)) * G + i.min(G - 1)];
                let top = (1.0 - tx) * at(x0, y0) + tx * at(x0 + 1, y0);
                let bottom = (1.0 - tx) * at(x0, y0 + 1) + tx * at(x0 + 1, y0 + 1);
                let mut v = (1.0 - ty) * top + ty * bottom;
                for s in &shapes {
                    let (dx, dy) = ((xf - s.cx) / s.rx, (yf - s.cy) / s.ry);
                    let inside = if s.ellipse { dx * dx + dy * dy < 1.0 } else { dx.abs() < 1.0 && dy.abs() < 1.0 };
                    if inside {
                        v = 0.3 * v + 0.7 * s.colour[c];
                    }
                }
                v += 0.06 * (xf * fx).sin() * (yf * fy).cos();
                v += rng.gen_range(-0.015..0.015);
                px[3 * (y * w + x) + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    RgbImage::new(w, h, px).unwrap()
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values with magnitude in `[margin, hi)` and random sign, keeping
/// finite differences away from kinks at zero.
pub fn away_from_zero(shape: &[usize], margin: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both
/// norms are below `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

pub const FD_STEP: f64 = 1e-4;

/// Central-difference check of `build`, a scalar function of `inputs`
/// (all gradient-tracked). At most `max_coords` coordinates of each input
/// are probed. Returns the worst relative error over the inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], max_coords: usize, rng: &mut ChaCha8Rng, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> nic_core::Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if x.len() <= max_coords {
            (0..x.len()).collect()
        } else {
            rand::seq::index::sample(rng, x.len(), max_coords).into_vec()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            analytic.push(grads[k][i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    worst
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
    }
}

/// Reference MS-SSIM written independently of the library: direct 11x11
/// Gaussian windows (sigma 1.5, valid positions only), c1 = 0.01^2,
/// c2 = 0.03^2 on unit-range data, 2x2 mean downsampling, the five published
/// exponents as given, negative terms clipped to zero, and the mean over
/// channels of the per-channel products. Inputs are planar `[C, H, W]`.
pub fn reference_ms_ssim(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    const K: usize = 11;
    let mut window = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    window.iter_mut().flatten().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);

    // Mean SSIM and mean contrast-structure of one plane.
    let stats = |x: &[f64], y: &[f64], h: usize, w: usize| -> (f64, f64) {
        let (mut ssim_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
        for i in 0..=h - K {
            for j in 0..=w - K {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (u, row) in window.iter().enumerate() {
                    for (v, &g) in row.iter().enumerate() {
                        let p = x[(i + u) * w + j + v];
                        let q = y[(i + u) * w + j + v];
                        mx += g * p;
                        my += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                ssim_sum += lum * cs;
                cs_sum += cs;
                count += 1.0;
            }
        }
        (ssim_sum / count, cs_sum / count)
    };
    let halve = |x: &[f64], h: usize, w: usize| -> Vec<f64> {
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                let s = x[2 * i * w + 2 * j] + x[2 * i * w + 2 * j + 1] + x[(2 * i + 1) * w + 2 * j] + x[(2 * i + 1) * w + 2 * j + 1];
                out[i * w2 + j] = s / 4.0;
            }
        }
        out
    };

    let plane = height * width;
    let mut sum = 0.0;
    for c in 0..channels {
        let mut x = a[c * plane..(c + 1) * plane].to_vec();
        let mut y = b[c * plane..(c + 1) * plane].to_vec();
        let (mut h, mut w) = (height, width);
        let mut product = 1.0;
        for (s, &wt) in WEIGHTS.iter().enumerate() {
            let (ssim, cs) = stats(&x, &y, h, w);
            let term = if s == WEIGHTS.len() - 1 { ssim } else { cs };
            product *= term.max(0.0).powf(wt);
            x = halve(&x, h, w);
            y = halve(&y, h, w);
            h /= 2;
            w /= 2;
        }
        sum += product;
    }
    sum / channels as f64
}
