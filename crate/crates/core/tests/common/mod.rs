//! Test-side oracles, written independently of the library kernels: every
//! value is produced by plain nested loops or central differences.
#![allow(dead_code)]

use pmcrnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Flat NCHW index.
pub fn idx(s: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s[1] + c) * s[2] + y) * s[3] + x
}

pub fn uniform(rng: &mut ChaCha8Rng, s: [usize; 4], lo: f64, hi: f64) -> Vec<f64> {
    (0..s.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect()
}

/// Cross-correlation by definition: for every output pixel, sum the kernel
/// taps that land inside the zero-padded input.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, _, h, w] = xs;
    let [oc, icg, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let os = [n, oc, oh, ow];
    let ocg = oc / groups;
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..n {
        for o in 0..oc {
            let g = o / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if bias.is_empty() { 0.0 } else { bias[o] };
                    for i in 0..icg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += k[idx(ks, o, i, ky, kx)]
                                    * x[idx(xs, b, g * icg + i, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[idx(os, b, o, oy, ox)] = acc;
                }
            }
        }
    }
    (out, os)
}

/// Transposed convolution in gather form: output pixel `t` collects every
/// input pixel `i` and tap `k` with `i * stride + k - pad == t`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ic, h, w] = xs;
    let [_, ocg, kh, kw] = ks;
    let icg = ic / groups;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let os = [n, ocg * groups, oh, ow];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..n {
        for o in 0..os[1] {
            let g = o / ocg;
            for ty in 0..oh {
                for tx in 0..ow {
                    let mut acc = if bias.is_empty() { 0.0 } else { bias[o] };
                    for i in g * icg..(g + 1) * icg {
                        for ky in 0..kh {
                            let num_y = ty as i64 + pad as i64 - ky as i64;
                            if num_y < 0
                                || num_y % stride as i64 != 0
                                || num_y / stride as i64 >= h as i64
                            {
                                continue;
                            }
                            for kx in 0..kw {
                                let num_x = tx as i64 + pad as i64 - kx as i64;
                                if num_x < 0
                                    || num_x % stride as i64 != 0
                                    || num_x / stride as i64 >= w as i64
                                {
                                    continue;
                                }
                                let (iy, ix) = (
                                    (num_y / stride as i64) as usize,
                                    (num_x / stride as i64) as usize,
                                );
                                acc +=
                                    x[idx(xs, b, i, iy, ix)] * k[idx(ks, i, o - g * ocg, ky, kx)];
                            }
                        }
                    }
                    out[idx(os, b, o, ty, tx)] = acc;
                }
            }
        }
    }
    (out, os)
}

/// Bilinear sample of one plane at `(sx, sy)` with border clamping.
pub fn naive_bilinear(plane: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - ax) + plane[y0 * w + x1] * ax;
    let bottom = plane[y1 * w + x0] * (1.0 - ax) + plane[y1 * w + x1] * ax;
    top * (1.0 - ay) + bottom * ay
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("shape matches data")
}

/// Central-difference derivative of `f` along `dir` at `inputs`, where
/// `dir[i]` perturbs input `i` (empty vectors leave an input fixed).
pub fn central_difference<F>(f: &F, inputs: &[Tensor<f64>], dir: &[Vec<f64>], h: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(dir)
            .map(|(t, d)| {
                if d.is_empty() {
                    return t.clone();
                }
                let data = t
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(v, e)| v + sign * h * e)
                    .collect();
                Tensor::new(t.shape(), data).unwrap()
            })
            .collect()
    };
    (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * h)
}
