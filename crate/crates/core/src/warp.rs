//! Bilinear backward warping, 2x average downsampling, image pyramids and
//! the reflection padding used for arbitrary-size inference.
//!
//! Flow tensors have two channels: channel 0 is the horizontal displacement
//! in pixels (+x to the right), channel 1 the vertical one (+y down). A flow
//! `F` attached to a target frame says where each target pixel is found in
//! the source, so `backward_warp(src, F)(p) = src(p + F(p))`.

use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Samples `x` at `p + flow(p)` with bilinear interpolation. Sample
/// coordinates are clamped to the image border.
pub fn backward_warp<T: Real>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let fs = flow.shape();
    ensure_arg!(fs.c() == 2, "flow must have 2 channels, got {fs}");
    ensure_arg!(
        xs.same_nhw(&fs),
        "backward_warp: image {xs} and flow {fs} differ in batch or spatial size"
    );
    let (h, w) = (xs.h(), xs.w());
    let plane = xs.plane();
    let taps = bilinear_taps(flow.data(), xs.n(), h, w);

    let src = x.data();
    let mut out = vec![T::zero(); xs.numel()];
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let base = (n * xs.c() + c) * plane;
            let img = &src[base..base + plane];
            let dst = &mut out[base..base + plane];
            for (p, tap) in taps[n * plane..(n + 1) * plane].iter().enumerate() {
                dst[p] = tap.sample(img);
            }
        }
    }

    let (xsave, fsave) = (x.storage(), flow.storage());
    Ok(Tensor::from_op(xs, out, &[x, flow], move |g, needs| {
        let taps = bilinear_taps(&fsave, xs.n(), h, w);
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); xs.numel()];
            for n in 0..xs.n() {
                for c in 0..xs.c() {
                    let base = (n * xs.c() + c) * plane;
                    let acc = &mut gx[base..base + plane];
                    for (p, tap) in taps[n * plane..(n + 1) * plane].iter().enumerate() {
                        tap.scatter(g[base + p], acc);
                    }
                }
            }
            gx
        });
        let gf = needs[1].then(|| {
            let mut gf = vec![T::zero(); fs.numel()];
            for n in 0..xs.n() {
                for p in 0..plane {
                    let tap = &taps[n * plane + p];
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for c in 0..xs.c() {
                        let base = (n * xs.c() + c) * plane;
                        let (sx, sy) = tap.slopes(&xsave[base..base + plane]);
                        dx = dx + g[base + p] * sx;
                        dy = dy + g[base + p] * sy;
                    }
                    gf[n * 2 * plane + p] = dx;
                    gf[(n * 2 + 1) * plane + p] = dy;
                }
            }
            gf
        });
        vec![gx, gf]
    }))
}

/// The four source pixels and weights of one bilinear sample.
#[derive(Clone, Copy)]
struct Tap<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    wx: T,
    wy: T,
    /// Whether the horizontal / vertical coordinate was clamped, which
    /// zeroes the derivative along that axis.
    clamped_x: bool,
    clamped_y: bool,
}

impl<T: Real> Tap<T> {
    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.wx) * (one - self.wy),
            self.wx * (one - self.wy),
            (one - self.wx) * self.wy,
            self.wx * self.wy,
        ]
    }

    #[inline]
    fn sample(&self, img: &[T]) -> T {
        if self.wx == T::zero() && self.wy == T::zero() {
            // Integer displacement: copy, so even signed zeros survive.
            return img[self.i00];
        }
        let [a, b, c, d] = self.weights();
        a * img[self.i00] + b * img[self.i01] + c * img[self.i10] + d * img[self.i11]
    }

    #[inline]
    fn scatter(&self, g: T, acc: &mut [T]) {
        let [a, b, c, d] = self.weights();
        acc[self.i00] = acc[self.i00] + a * g;
        acc[self.i01] = acc[self.i01] + b * g;
        acc[self.i10] = acc[self.i10] + c * g;
        acc[self.i11] = acc[self.i11] + d * g;
    }

    /// Partial derivatives of the sample with respect to the flow.
    #[inline]
    fn slopes(&self, img: &[T]) -> (T, T) {
        let one = T::one();
        let (v00, v01, v10, v11) = (img[self.i00], img[self.i01], img[self.i10], img[self.i11]);
        let sx = if self.clamped_x {
            T::zero()
        } else {
            (one - self.wy) * (v01 - v00) + self.wy * (v11 - v10)
        };
        let sy = if self.clamped_y {
            T::zero()
        } else {
            (one - self.wx) * (v10 - v00) + self.wx * (v11 - v01)
        };
        (sx, sy)
    }
}

/// Lower/upper sample index, interpolation weight and whether the
/// coordinate lies outside the image along one axis.
fn axis<T: Real>(pos: T, size: usize) -> (usize, usize, T, bool) {
    let hi = T::from_usize(size - 1).unwrap();
    let outside = pos < T::zero() || pos > hi;
    let p = pos.max(T::zero()).min(hi);
    let i0 = p.floor().to_usize().unwrap_or(0).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, p - T::from_usize(i0).unwrap(), outside)
}

fn bilinear_taps<T: Real>(flow: &[T], n: usize, h: usize, w: usize) -> Vec<Tap<T>> {
    let plane = h * w;
    let mut taps = Vec::with_capacity(n * plane);
    for b in 0..n {
        let fx = &flow[b * 2 * plane..(b * 2 + 1) * plane];
        let fy = &flow[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = T::from_usize(x).unwrap() + fx[p];
                let sy = T::from_usize(y).unwrap() + fy[p];
                let (x0, x1, wx, clamped_x) = axis(sx, w);
                let (y0, y1, wy, clamped_y) = axis(sy, h);
                taps.push(Tap {
                    i00: y0 * w + x0,
                    i01: y0 * w + x1,
                    i10: y1 * w + x0,
                    i11: y1 * w + x1,
                    wx,
                    wy,
                    clamped_x,
                    clamped_y,
                });
            }
        }
    }
    taps
}

/// Each output pixel is the mean of a 2x2 input block.
pub fn avg_downsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure_arg!(
        s.h() % 2 == 0 && s.w() % 2 == 0 && s.h() > 0 && s.w() > 0,
        "avg_downsample2x needs even spatial dims, got {s}"
    );
    let (oh, ow) = (s.h() / 2, s.w() / 2);
    let out_shape = s.with_hw(oh, ow);
    let quarter = T::from_f64_lossy(0.25);
    let src = x.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in src.chunks_exact(s.plane()) {
        for y in 0..oh {
            let r0 = &plane[2 * y * s.w()..(2 * y + 1) * s.w()];
            let r1 = &plane[(2 * y + 1) * s.w()..(2 * y + 2) * s.w()];
            for x in 0..ow {
                out.push((r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_op(out_shape, out, &[x], move |g, _| {
        let mut gx = vec![T::zero(); s.numel()];
        for (plane, gp) in gx.chunks_exact_mut(s.plane()).zip(g.chunks_exact(oh * ow)) {
            for y in 0..s.h() {
                for x in 0..s.w() {
                    plane[y * s.w() + x] = gp[(y / 2) * ow + x / 2] * quarter;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Images at full, 1/2, 1/4, ... resolution.
#[derive(Clone, Debug)]
pub struct ImagePyramid<T: Real> {
    levels: Vec<Tensor<T>>,
}

impl<T: Real> ImagePyramid<T> {
    pub fn level(&self, l: usize) -> &Tensor<T> {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Level `l` is `avg_downsample2x` applied `l` times to the input.
pub fn build_pyramid<T: Real>(image: &Tensor<T>, levels: usize) -> Result<ImagePyramid<T>> {
    ensure_arg!(levels >= 1, "a pyramid needs at least one level");
    let s = image.shape();
    let m = 1usize << (levels - 1);
    ensure_arg!(
        s.h() % m == 0 && s.w() % m == 0,
        "image {s} is not divisible by {m} for a {levels}-level pyramid"
    );
    let mut out = vec![image.clone()];
    for _ in 1..levels {
        let next = avg_downsample2x(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(ImagePyramid { levels: out })
}

/// Original spatial size recorded by [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn is_identity(&self, s: Shape) -> bool {
        s.h() == self.height && s.w() == self.width
    }
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: usize, size: usize) -> usize {
    if size == 1 {
        return 0;
    }
    let period = 2 * (size - 1);
    let r = i % period;
    if r < size {
        r
    } else {
        period - r
    }
}

/// Reflection-pads the bottom and right edges up to the next multiple of
/// `m`. The result is detached.
pub fn pad_to_multiple<T: Real>(image: &Tensor<T>, m: usize) -> Result<(Tensor<T>, CropRecord)> {
    ensure_arg!(m > 0, "padding multiple must be positive");
    let s = image.shape();
    let record = CropRecord {
        height: s.h(),
        width: s.w(),
    };
    let ph = s.h().div_ceil(m) * m;
    let pw = s.w().div_ceil(m) * m;
    if ph == s.h() && pw == s.w() {
        return Ok((image.detach(), record));
    }
    let ys: Vec<usize> = (0..ph).map(|y| reflect(y, s.h())).collect();
    let xs: Vec<usize> = (0..pw).map(|x| reflect(x, s.w())).collect();
    let mut data = Vec::with_capacity(s.n() * s.c() * ph * pw);
    for plane in image.data().chunks_exact(s.plane()) {
        for &y in &ys {
            let row = &plane[y * s.w()..(y + 1) * s.w()];
            data.extend(xs.iter().map(|&x| row[x]));
        }
    }
    Ok((Tensor::new(s.with_hw(ph, pw), data)?, record))
}

/// Undoes [`pad_to_multiple`].
pub fn crop_back<T: Real>(image: &Tensor<T>, record: CropRecord) -> Result<Tensor<T>> {
    if record.is_identity(image.shape()) {
        return Ok(image.clone());
    }
    image.crop(0, 0, record.height, record.width)
}
