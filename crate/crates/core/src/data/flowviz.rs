//! Flow field export: the usual optical-flow color wheel (hue encodes
//! direction, saturation encodes magnitude) and raw planar `f32` dumps.

use std::fs;
use std::path::Path;

use crate::error::{ensure_arg, Error, Result};
use crate::tensor::{Real, Tensor};

/// Color wheel segment lengths: red-yellow, yellow-green, green-cyan,
/// cyan-blue, blue-magenta, magenta-red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| i as f64 / n as f64;
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    wheel.extend((0..ry).map(|i| [1.0, ramp(i, ry), 0.0]));
    wheel.extend((0..yg).map(|i| [1.0 - ramp(i, yg), 1.0, 0.0]));
    wheel.extend((0..gc).map(|i| [0.0, 1.0, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0.0, 1.0 - ramp(i, cb), 1.0]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 1.0]));
    wheel.extend((0..mr).map(|i| [1.0, 0.0, 1.0 - ramp(i, mr)]));
    wheel
}

/// Renders the first flow field of a `Nx2xHxW` tensor as a `1x3xHxW`
/// image. Magnitudes are normalized by the largest one in the field.
pub fn flow_to_color<T: Real>(flow: &Tensor<T>) -> Result<Tensor<f32>> {
    let s = flow.shape();
    ensure_arg!(s.c() == 2, "flow must have 2 channels, got {s}");
    let (h, w) = (s.h(), s.w());
    let u = |y, x| flow.at(0, 0, y, x).as_f64();
    let v = |y, x| flow.at(0, 1, y, x).as_f64();
    let mut max_rad: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            max_rad = max_rad.max(u(y, x).hypot(v(y, x)));
        }
    }
    let scale = if max_rad > 0.0 { 1.0 / max_rad } else { 0.0 };
    let wheel = color_wheel();
    let ncols = wheel.len() as f64;
    let mut rgb = vec![[1.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = (u(y, x) * scale, v(y, x) * scale);
            let rad = fu.hypot(fv);
            let angle = (-fv).atan2(-fu) / std::f64::consts::PI;
            let fk = (angle + 1.0) / 2.0 * (ncols - 1.0);
            let k0 = fk.floor() as usize % wheel.len();
            let k1 = (k0 + 1) % wheel.len();
            let f = fk - fk.floor();
            let px = &mut rgb[y * w + x];
            for c in 0..3 {
                let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
                px[c] = 1.0 - rad.min(1.0) * (1.0 - col);
            }
        }
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        rgb[y * w + x][c] as f32
    }))
}

/// Writes the first flow field as little-endian `f32`: the whole horizontal
/// plane, then the whole vertical plane.
pub fn write_flow_f32<T: Real>(flow: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = flow.shape();
    ensure_arg!(s.c() == 2, "flow must have 2 channels, got {s}");
    let n = 2 * s.plane();
    let bytes: Vec<u8> = flow.data()[..n]
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_flow_f32`] for a known size.
pub fn read_flow_f32(path: impl AsRef<Path>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 8 * h * w {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for a {h}x{w} flow, found {}",
                8 * h * w,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new([1, 2, h, w], data)
}
