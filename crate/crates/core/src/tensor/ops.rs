//! Elementwise, structural and reduction operators.

use super::{Real, Shape, Tensor};
use crate::error::{ensure_arg, Result};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How operand `b` lines up against the output of a binary operator.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `a` is `c` channels, `b` is one channel.
    RightChannel,
    /// `a` is one channel, `b` is `c` channels.
    LeftChannel,
}

fn broadcast_of(a: Shape, b: Shape) -> Result<(Shape, Broadcast)> {
    if a == b {
        return Ok((a, Broadcast::Same));
    }
    ensure_arg!(
        a.same_nhw(&b) && (a.c() == 1 || b.c() == 1),
        "shapes {a} and {b} are not broadcast-compatible"
    );
    if b.c() == 1 {
        Ok((a, Broadcast::RightChannel))
    } else {
        Ok((b, Broadcast::LeftChannel))
    }
}

/// Flat index into a one-channel operand for output index `i`.
#[inline]
fn squeeze_index(shape: Shape, i: usize) -> usize {
    let plane = shape.plane();
    let n = i / (shape.c() * plane);
    n * plane + i % plane
}

/// Sums a full-shape gradient over channels into a one-channel gradient.
fn reduce_channels<T: Real>(shape: Shape, g: &[T]) -> Vec<T> {
    let plane = shape.plane();
    let mut out = vec![T::zero(); shape.n() * plane];
    for (i, &v) in g.iter().enumerate() {
        let j = squeeze_index(shape, i);
        out[j] = out[j] + v;
    }
    out
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
    let (shape, bc) = broadcast_of(a.shape(), b.shape())?;
    let (da, db) = (a.data(), b.data());
    let idx = |i: usize| -> (usize, usize) {
        match bc {
            Broadcast::Same => (i, i),
            Broadcast::RightChannel => (i, squeeze_index(shape, i)),
            Broadcast::LeftChannel => (squeeze_index(shape, i), i),
        }
    };
    let data: Vec<T> = (0..shape.numel())
        .map(|i| {
            let (ia, ib) = idx(i);
            match op {
                Binary::Add => da[ia] + db[ib],
                Binary::Sub => da[ia] - db[ib],
                Binary::Mul => da[ia] * db[ib],
            }
        })
        .collect();

    let (sa, sb) = (a.storage(), b.storage());
    Ok(Tensor::from_op(shape, data, &[a, b], move |g, needs| {
        let full_a = |i: usize| match bc {
            Broadcast::LeftChannel => squeeze_index(shape, i),
            _ => i,
        };
        let full_b = |i: usize| match bc {
            Broadcast::RightChannel => squeeze_index(shape, i),
            _ => i,
        };
        let ga = needs[0].then(|| {
            let full: Vec<T> = match op {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * sb[full_b(i)])
                    .collect(),
            };
            match bc {
                Broadcast::LeftChannel => reduce_channels(shape, &full),
                _ => full,
            }
        });
        let gb = needs[1].then(|| {
            let full: Vec<T> = match op {
                Binary::Add => g.to_vec(),
                Binary::Sub => g.iter().map(|&v| -v).collect(),
                Binary::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * sa[full_a(i)])
                    .collect(),
            };
            match bc {
                Broadcast::RightChannel => reduce_channels(shape, &full),
                _ => full,
            }
        });
        vec![ga, gb]
    }))
}

fn unary<T: Real>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + 'static,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xs = x.storage();
    let out = data.clone();
    Tensor::from_op(x.shape(), data, &[x], move |g, _| {
        // df(input, output) is the local derivative.
        let gx = g
            .iter()
            .zip(xs.iter().zip(&out))
            .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

impl<T: Real> Tensor<T> {
    /// Elementwise sum; a one-channel operand broadcasts over channels.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Mul)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        unary(self, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        unary(self, move |v| v + s, |_, _| T::one())
    }

    /// `s - x`, e.g. `1 - M` for a blending mask.
    pub fn rsub_scalar(&self, s: T) -> Tensor<T> {
        unary(self, move |v| s - v, |_, _| -T::one())
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(
            self,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Parametric ReLU with one slope per channel (`slope` has `c` elements).
    pub fn prelu(&self, slope: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        ensure_arg!(
            slope.numel() == shape.c(),
            "prelu slope has {} elements, input has {} channels",
            slope.numel(),
            shape.c()
        );
        let plane = shape.plane();
        let channel = move |i: usize| (i / plane) % shape.c();
        let (x, a) = (self.data(), slope.data());
        let data = x
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= T::zero() { v } else { a[channel(i)] * v })
            .collect();
        let (xs, sa) = (self.storage(), slope.storage());
        Ok(Tensor::from_op(
            shape,
            data,
            &[self, slope],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    g.iter()
                        .zip(xs.iter())
                        .enumerate()
                        .map(|(i, (&gi, &xi))| {
                            if xi >= T::zero() {
                                gi
                            } else {
                                gi * sa[channel(i)]
                            }
                        })
                        .collect()
                });
                let ga = needs[1].then(|| {
                    let mut acc = vec![T::zero(); shape.c()];
                    for (i, (&gi, &xi)) in g.iter().zip(xs.iter()).enumerate() {
                        if xi < T::zero() {
                            let c = channel(i);
                            acc[c] = acc[c] + gi * xi;
                        }
                    }
                    acc
                });
                vec![gx, ga]
            },
        ))
    }

    /// Concatenates along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ensure_arg!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        for p in parts {
            ensure_arg!(
                p.shape().same_nhw(&first),
                "concat: shape {} does not match {first} outside the channel axis",
                p.shape()
            );
        }
        let channels: Vec<usize> = parts.iter().map(|p| p.shape().c()).collect();
        let total_c: usize = channels.iter().sum();
        let shape = first.with_c(total_c);
        let plane = first.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n() {
            for (p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&p.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        Ok(Tensor::from_op(shape, data, parts, move |g, needs| {
            let mut offset = 0;
            channels
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut out = Vec::with_capacity(first.n() * c * plane);
                        for n in 0..first.n() {
                            let base = (n * total_c + start) * plane;
                            out.extend_from_slice(&g[base..base + c * plane]);
                        }
                        out
                    })
                })
                .collect()
        }))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        ensure_arg!(
            start + len <= s.c() && len > 0,
            "channel slice {start}..{} out of range for {s}",
            start + len
        );
        let plane = s.plane();
        let shape = s.with_c(len);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n() {
            let base = (n * s.c() + start) * plane;
            data.extend_from_slice(&self.data()[base..base + len * plane]);
        }
        Ok(Tensor::from_op(shape, data, &[self], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for n in 0..s.n() {
                let base = (n * s.c() + start) * plane;
                gx[base..base + len * plane]
                    .copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
            }
            vec![Some(gx)]
        }))
    }

    /// Splits channels into consecutive pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
        let total: usize = widths.iter().sum();
        ensure_arg!(
            total == self.shape().c(),
            "split widths sum to {total}, tensor has {} channels",
            self.shape().c()
        );
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let part = self.slice_channels(start, w);
                start += w;
                part
            })
            .collect()
    }

    /// Interleaves channel groups: input channel `i` moves to
    /// `(i mod (c/g)) * g + i / (c/g)`.
    pub fn channel_shuffle(&self, groups: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        ensure_arg!(
            groups > 0 && s.c() % groups == 0,
            "channel_shuffle: {} channels not divisible by {groups} groups",
            s.c()
        );
        let per = s.c() / groups;
        let dest: Vec<usize> = (0..s.c()).map(|i| (i % per) * groups + i / per).collect();
        let data = permute_channels(s, self.data(), &dest);
        Ok(Tensor::from_op(s, data, &[self], move |g, _| {
            let mut inverse = vec![0; dest.len()];
            for (i, &d) in dest.iter().enumerate() {
                inverse[d] = i;
            }
            vec![Some(permute_channels(s, g, &inverse))]
        }))
    }

    /// Sum of all elements, as a scalar tensor. Accumulates in `f64`.
    pub fn sum(&self) -> Tensor<T> {
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let shape = self.shape();
        Tensor::from_op(
            Shape::scalar(),
            vec![T::from_f64_lossy(total)],
            &[self],
            move |g, _| vec![Some(vec![g[0]; shape.numel()])],
        )
    }

    /// Mean of all elements, as a scalar tensor. Accumulates in `f64`.
    pub fn mean(&self) -> Tensor<T> {
        let k = self.numel();
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let shape = self.shape();
        Tensor::from_op(
            Shape::scalar(),
            vec![T::from_f64_lossy(total / k as f64)],
            &[self],
            move |g, _| {
                let v = g[0] / T::from_usize(shape.numel()).unwrap();
                vec![Some(vec![v; shape.numel()])]
            },
        )
    }

    /// Spatial window `[top, top + h) x [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        ensure_arg!(
            top + h <= s.h() && left + w <= s.w() && h > 0 && w > 0,
            "crop {h}x{w}+{top}+{left} out of range for {s}"
        );
        let shape = s.with_hw(h, w);
        let mut data = Vec::with_capacity(shape.numel());
        for plane in self.data().chunks_exact(s.plane()) {
            for y in top..top + h {
                data.extend_from_slice(&plane[y * s.w() + left..y * s.w() + left + w]);
            }
        }
        Ok(Tensor::from_op(shape, data, &[self], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for (p, gp) in gx.chunks_exact_mut(s.plane()).zip(g.chunks_exact(h * w)) {
                for y in 0..h {
                    let dst = (top + y) * s.w() + left;
                    p[dst..dst + w].copy_from_slice(&gp[y * w..(y + 1) * w]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean over channels, keeping a one-channel result.
    pub fn channel_mean(&self) -> Tensor<T> {
        let s = self.shape();
        let plane = s.plane();
        let inv = T::one() / T::from_usize(s.c()).unwrap();
        let shape = s.with_c(1);
        let mut data = vec![T::zero(); shape.numel()];
        for n in 0..s.n() {
            let out = &mut data[n * plane..(n + 1) * plane];
            for c in 0..s.c() {
                let src = &self.data()[(n * s.c() + c) * plane..][..plane];
                for (o, &v) in out.iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        Tensor::from_op(shape, data, &[self], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let dst = &mut gx[(n * s.c() + c) * plane..][..plane];
                    for (d, &v) in dst.iter_mut().zip(&g[n * plane..(n + 1) * plane]) {
                        *d = v * inv;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Stacks same-shaped tensors along the batch axis. The result is
    /// detached; it is used to assemble input batches.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        ensure_arg!(!items.is_empty(), "stack of zero tensors");
        let s = items[0].shape();
        let mut data = Vec::with_capacity(s.numel() * items.len());
        for t in items {
            ensure_arg!(
                t.shape() == s,
                "stack: shape {} differs from {s}",
                t.shape()
            );
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(
            Shape::new(s.n() * items.len(), s.c(), s.h(), s.w()),
            data,
        ))
    }

    /// Batch item `i` as a detached one-item tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        ensure_arg!(i < s.n(), "batch index {i} out of range for {s}");
        let len = s.c() * s.plane();
        Ok(Tensor::from_parts(
            Shape::new(1, s.c(), s.h(), s.w()),
            self.data()[i * len..(i + 1) * len].to_vec(),
        ))
    }

    /// Convex blend `mask * self + (1 - mask) * other` with a one-channel
    /// mask broadcast over channels. Where both operands are equal the
    /// result is that value exactly.
    pub fn blend(&self, other: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        ensure_arg!(
            other.shape() == s,
            "blend: operands {s} and {} differ",
            other.shape()
        );
        let ms = mask.shape();
        ensure_arg!(
            ms.c() == 1 && ms.same_nhw(&s),
            "blend: mask {ms} must be one channel over {s}"
        );
        let (a, b, m) = (self.data(), other.data(), mask.data());
        let one = T::one();
        let data = (0..s.numel())
            .map(|i| {
                let (ai, bi) = (a[i], b[i]);
                if ai == bi {
                    ai
                } else {
                    let mi = m[squeeze_index(s, i)];
                    mi * ai + (one - mi) * bi
                }
            })
            .collect();
        let (sa, sb, sm) = (self.storage(), other.storage(), mask.storage());
        Ok(Tensor::from_op(
            s,
            data,
            &[self, other, mask],
            move |g, needs| {
                let ga = needs[0].then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * sm[squeeze_index(s, i)])
                        .collect()
                });
                let gb = needs[1].then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * (one - sm[squeeze_index(s, i)]))
                        .collect()
                });
                let gm = needs[2].then(|| {
                    let full: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * (sa[i] - sb[i]))
                        .collect();
                    reduce_channels(s, &full)
                });
                vec![ga, gb, gm]
            },
        ))
    }

    /// Elementwise clamp; detached (used only when exporting images).
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        Tensor::from_parts(self.shape(), data)
    }
}

fn permute_channels<T: Real>(s: Shape, src: &[T], dest: &[usize]) -> Vec<T> {
    let plane = s.plane();
    let mut out = vec![T::zero(); src.len()];
    for n in 0..s.n() {
        for (ci, &co) in dest.iter().enumerate() {
            let from = (n * s.c() + ci) * plane;
            let to = (n * s.c() + co) * plane;
            out[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn labeled(c: usize) -> Tensor<f32> {
        Tensor::from_fn([1, c, 1, 1], |_, c, _, _| c as f32)
    }

    #[test]
    fn shuffle_interleaves_groups() {
        let y = labeled(4).channel_shuffle(2).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0, 1.0, 3.0]);
        assert_eq!(
            labeled(5).channel_shuffle(1).unwrap().to_vec(),
            labeled(5).to_vec()
        );
    }

    #[test]
    fn shuffle_round_trip() {
        let x = Tensor::<f32>::from_fn([2, 6, 3, 2], |n, c, y, x| {
            (n * 100 + c * 10 + y * 3 + x) as f32
        });
        let y = x.channel_shuffle(2).unwrap().channel_shuffle(3).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn shuffle_rejects_indivisible() {
        assert!(labeled(5).channel_shuffle(2).is_err());
    }

    #[test]
    fn prelu_values() {
        let x = Tensor::<f32>::new([1, 1, 1, 2], vec![-2.0, 3.0]).unwrap();
        let a = Tensor::<f32>::full([1, 1, 1, 1], 0.25);
        assert_eq!(x.prelu(&a).unwrap().to_vec(), vec![-0.5, 3.0]);
        assert!(x.prelu(&Tensor::zeros([1, 2, 1, 1])).is_err());
    }

    #[test]
    fn prelu_slope_gradient() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::scalar(-1.0));
        let a = tape.track(&Tensor::<f64>::scalar(0.25));
        let g = x.prelu(&a).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&a).unwrap().item().unwrap(), -1.0);
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::<f32>::scalar(0.0).sigmoid().item().unwrap(), 0.5);
    }

    #[test]
    fn concat_and_slice_recover_inputs() {
        let a = Tensor::<f32>::from_fn([2, 2, 3, 3], |n, c, y, x| (n + c + y * x) as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 3, 3], |n, c, y, x| -((n * c + y + x) as f32));
        let cat = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 5, 3, 3));
        let parts = cat.split_channels(&[2, 3]).unwrap();
        assert_eq!(parts[0].to_vec(), a.to_vec());
        assert_eq!(parts[1].to_vec(), b.to_vec());
    }

    #[test]
    fn blend_with_zero_mask_is_exact() {
        let x = Tensor::<f32>::from_fn([1, 3, 2, 2], |_, c, y, x| {
            0.1 * (c + y) as f32 + 0.37 * x as f32
        });
        let y = Tensor::<f32>::from_fn([1, 3, 2, 2], |_, c, _, x| 0.9 - 0.2 * (c * x) as f32);
        let m = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let out = x
            .mul(&m.rsub_scalar(1.0))
            .unwrap()
            .add(&y.mul(&m).unwrap())
            .unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn broadcast_gradient_reduces_over_channels() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::full([1, 3, 1, 2], 2.0));
        let m = tape.track(&Tensor::<f64>::full([1, 1, 1, 2], 0.5));
        let g = x.mul(&m).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&m).unwrap().to_vec(), vec![6.0, 6.0]);
        assert_eq!(g.get(&x).unwrap().to_vec(), vec![0.5; 6]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let a = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&Tensor::zeros([1, 1, 2, 3])).is_err());
    }

    #[test]
    fn crop_gradient_scatters_back() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::from_fn([1, 1, 4, 4], |_, _, y, x| {
            (y * 4 + x) as f64
        }));
        let c = x.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.to_vec(), vec![6.0, 7.0, 10.0, 11.0]);
        let g = c.sum().backward().unwrap().get(&x).unwrap();
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 4);
    }
}
