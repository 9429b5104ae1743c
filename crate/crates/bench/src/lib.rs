//! Deterministic inputs shared by the criterion benches in `benches/`.

use pmcrnet::Tensor;

fn wave(n: usize, c: usize, y: usize, x: usize, phase: f32) -> f32 {
    let t = (n * 7 + c * 13) as f32 + y as f32 * 0.37 + x as f32 * 0.61 + phase;
    t.sin() * (0.5 + 0.5 * (t * 0.11).cos())
}

/// A smooth, non-constant `NxCxHxW` tensor in `[-1, 1]`, offset by `phase`.
pub fn pattern(shape: [usize; 4], phase: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |n, c, y, x| wave(n, c, y, x, phase))
}

/// An image-like tensor in `[0, 1]`.
pub fn frame(h: usize, w: usize, phase: f32) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |n, c, y, x| {
        0.5 + 0.5 * wave(n, c, y, x, phase)
    })
}

/// A flow field with displacements of up to `amplitude` pixels.
pub fn flow(h: usize, w: usize, amplitude: f32) -> Tensor<f32> {
    Tensor::from_fn([1, 2, h, w], |n, c, y, x| amplitude * wave(n, c, y, x, 1.0))
}
