//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Columns are materialized in row chunks so the scratch buffer stays
//! bounded for large frames. Chunk boundaries depend only on the shapes
//! involved, so the per-element summation order (and hence the result) is
//! fixed for a given problem regardless of the thread count.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use super::memory::Scratch;
use super::{Real, Shape, Tensor};
use crate::error::{ensure_arg, Result};

/// Upper bound on elements in one im2col scratch buffer.
const COL_BUDGET: usize = 1 << 21;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of threads the forward convolution may use. `1` (the default)
/// keeps everything on the calling thread. Results are bitwise identical
/// for every setting.
pub fn set_num_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

fn num_threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Test hook for exercising the gradient checker against a broken kernel.
pub mod fault_injection {
    use super::*;

    static CORRUPT_CONV_BACKWARD: AtomicBool = AtomicBool::new(false);

    /// While set, the kernel gradient of `conv2d` is scaled by 1.5.
    pub fn set_corrupt_conv_backward(on: bool) {
        CORRUPT_CONV_BACKWARD.store(on, Ordering::SeqCst);
    }

    pub(crate) fn corrupt_conv_backward() -> bool {
        CORRUPT_CONV_BACKWARD.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Transpose {
    No,
    Yes,
}

/// `C (m x n) = op(A) (m x k) * op(B) (k x n) + beta * C`, row-major.
///
/// `lda`/`ldb`/`ldc` are row strides of the stored matrices: for
/// `Transpose::Yes` the stored matrix is `k x m` (resp. `n x k`).
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    ta: Transpose,
    b: &[T],
    ldb: usize,
    tb: Transpose,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, ld: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * ld + cols
        }
    };
    let (rsa, csa, a_need) = match ta {
        Transpose::No => (lda as isize, 1, extent(m, k, lda)),
        Transpose::Yes => (1, lda as isize, extent(k, m, lda)),
    };
    let (rsb, csb, b_need) = match tb {
        Transpose::No => (ldb as isize, 1, extent(k, n, ldb)),
        Transpose::Yes => (1, ldb as isize, extent(n, k, ldb)),
    };
    assert!(a.len() >= a_need && b.len() >= b_need && c.len() >= extent(m, n, ldc));
    // SAFETY: extents checked above; `c` is a unique borrow distinct from `a`, `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Geometry shared by the column transforms: an image of `channels x ih x iw`
/// sampled by a `kh x kw` window at every point of a `gh x gw` grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Grid rows per chunk so that one chunk of columns fits the budget.
    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.gw).max(1)).clamp(1, self.gh.max(1))
    }

    #[inline]
    fn source(&self, g: usize, k: usize) -> Option<usize> {
        let v = (g * self.stride + k) as isize - self.pad as isize;
        (v >= 0).then_some(v as usize)
    }

    /// Fills `col` (`rows() x (r1 - r0) * gw`) from `img` for grid rows `r0..r1`.
    fn im2col<T: Real>(&self, img: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let cols = (r1 - r0) * self.gw;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &img[c * self.ih * self.iw..(c + 1) * self.ih * self.iw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for (gy, line) in (r0..r1).zip(dst.chunks_exact_mut(self.gw)) {
                        match self.source(gy, ky).filter(|&iy| iy < self.ih) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.iw..(iy + 1) * self.iw];
                                for (gx, d) in line.iter_mut().enumerate() {
                                    *d = match self.source(gx, kx) {
                                        Some(ix) if ix < self.iw => src[ix],
                                        _ => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates `col` back into `img`.
    fn col2im<T: Real>(&self, col: &[T], r0: usize, r1: usize, img: &mut [T]) {
        let cols = (r1 - r0) * self.gw;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut img[c * self.ih * self.iw..(c + 1) * self.ih * self.iw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    for (gy, line) in (r0..r1).zip(src.chunks_exact(self.gw)) {
                        let Some(iy) = self.source(gy, ky).filter(|&iy| iy < self.ih) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.iw..(iy + 1) * self.iw];
                        for (gx, &v) in line.iter().enumerate() {
                            if let Some(ix) = self.source(gx, kx).filter(|&ix| ix < self.iw) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Convolution parameters. Kernels use the `(out_c, in_c / groups, kh, kw)`
/// layout for [`Tensor::conv2d`] and `(in_c, out_c / groups, kh, kw)` for
/// [`Tensor::conv_transpose2d`]; the bias, when present, holds one value per
/// output channel.
#[derive(Clone, Copy)]
pub struct ConvSpec<'a, T: Real> {
    pub kernel: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<'a, T: Real> ConvSpec<'a, T> {
    pub fn new(kernel: &'a Tensor<T>) -> Self {
        ConvSpec {
            kernel,
            bias: None,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn bias(mut self, bias: Option<&'a Tensor<T>>) -> Self {
        self.bias = bias;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `floor((size + 2 * padding - k) / stride) + 1`, or `None` when the window
/// does not fit.
pub fn conv_output_size(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// `(size - 1) * stride - 2 * padding + k`, or `None` when non-positive.
pub fn conv_transpose_output_size(
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (size.checked_sub(1)?) * stride + k;
    full.checked_sub(2 * padding).filter(|&v| v > 0)
}

fn bias_values<T: Real>(bias: Option<&Tensor<T>>, out_c: usize) -> Result<()> {
    if let Some(b) = bias {
        ensure_arg!(
            b.numel() == out_c,
            "bias has {} elements, expected {out_c}",
            b.numel()
        );
    }
    Ok(())
}

fn sum_bias_grad<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for b in 0..n {
        for (o, acc) in gb.iter_mut().enumerate() {
            let start = (b * c + o) * plane;
            *acc = g[start..start + plane].iter().fold(*acc, |s, &v| s + v);
        }
    }
    gb
}

impl<T: Real> Tensor<T> {
    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&self, spec: &ConvSpec<'_, T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ks = spec.kernel.shape();
        let (out_c, icg, kh, kw) = (ks.n(), ks.c(), ks.h(), ks.w());
        let groups = spec.groups;
        ensure_arg!(
            groups > 0 && spec.stride > 0,
            "stride and groups must be positive"
        );
        ensure_arg!(
            xs.c() % groups == 0 && out_c % groups == 0,
            "conv2d: channels in={} out={out_c} not divisible by groups={groups}",
            xs.c()
        );
        ensure_arg!(
            icg * groups == xs.c(),
            "conv2d: kernel {ks} expects {} input channels, input is {xs}",
            icg * groups
        );
        bias_values(spec.bias, out_c)?;
        let (Some(oh), Some(ow)) = (
            conv_output_size(xs.h(), kh, spec.stride, spec.padding),
            conv_output_size(xs.w(), kw, spec.stride, spec.padding),
        ) else {
            return Err(crate::Error::InvalidArgument(format!(
                "conv2d: input {xs} too small for kernel {kh}x{kw} with padding {}",
                spec.padding
            )));
        };
        let ocg = out_c / groups;
        let win = Window {
            channels: icg,
            ih: xs.h(),
            iw: xs.w(),
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            gh: oh,
            gw: ow,
        };
        let kdim = win.rows();
        let p = oh * ow;
        let out_shape = Shape::new(xs.n(), out_c, oh, ow);
        let mut out = vec![T::zero(); out_shape.numel()];
        let x = self.data();
        let w = spec.kernel.data();

        let chunk = win.chunk_rows();
        let chunks: Vec<(usize, usize)> = (0..oh)
            .step_by(chunk)
            .map(|r| (r, (r + chunk).min(oh)))
            .collect();
        for b in 0..xs.n() {
            for g in 0..groups {
                let img = &x[(b * xs.c() + g * icg) * xs.plane()..][..icg * xs.plane()];
                let wg = &w[g * ocg * kdim..(g + 1) * ocg * kdim];
                let dst = &mut out[(b * out_c + g * ocg) * p..][..ocg * p];
                conv_forward_chunks(&win, img, wg, ocg, &chunks, dst);
            }
        }
        if let Some(bias) = spec.bias {
            for (i, plane) in out.chunks_exact_mut(p).enumerate() {
                let v = bias.data()[i % out_c];
                plane.iter_mut().for_each(|o| *o = *o + v);
            }
        }

        let (xsave, wsave) = (self.storage(), spec.kernel.storage());
        let mut inputs: Vec<&Tensor<T>> = vec![self, spec.kernel];
        inputs.extend(spec.bias);
        let corrupt = fault_injection::corrupt_conv_backward();
        Ok(Tensor::from_op(
            out_shape,
            out,
            &inputs,
            move |gout, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); xs.numel()]);
                let mut gw = needs[1].then(|| vec![T::zero(); ks.numel()]);
                let mut colbuf = Scratch::new(kdim * chunk * ow, T::zero());
                for b in 0..xs.n() {
                    for g in 0..groups {
                        let img_off = (b * xs.c() + g * icg) * xs.plane();
                        let go = &gout[(b * out_c + g * ocg) * p..][..ocg * p];
                        let wg = &wsave[g * ocg * kdim..(g + 1) * ocg * kdim];
                        for &(r0, r1) in &chunks {
                            let cols = (r1 - r0) * ow;
                            let col = &mut colbuf.buf[..kdim * cols];
                            let go_chunk = &go[r0 * ow..];
                            if let Some(gw) = gw.as_mut() {
                                win.im2col(
                                    &xsave[img_off..img_off + icg * xs.plane()],
                                    r0,
                                    r1,
                                    col,
                                );
                                let gwg = &mut gw[g * ocg * kdim..(g + 1) * ocg * kdim];
                                matmul(
                                    ocg,
                                    kdim,
                                    cols,
                                    go_chunk,
                                    p,
                                    Transpose::No,
                                    col,
                                    cols,
                                    Transpose::Yes,
                                    T::one(),
                                    gwg,
                                    kdim,
                                );
                            }
                            if let Some(gx) = gx.as_mut() {
                                matmul(
                                    kdim,
                                    cols,
                                    ocg,
                                    wg,
                                    kdim,
                                    Transpose::Yes,
                                    go_chunk,
                                    p,
                                    Transpose::No,
                                    T::zero(),
                                    col,
                                    cols,
                                );
                                win.col2im(
                                    col,
                                    r0,
                                    r1,
                                    &mut gx[img_off..img_off + icg * xs.plane()],
                                );
                            }
                        }
                    }
                }
                if corrupt {
                    if let Some(gw) = gw.as_mut() {
                        let k = T::from_f64_lossy(1.5);
                        gw.iter_mut().for_each(|v| *v = *v * k);
                    }
                }
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| sum_bias_grad(gout, xs.n(), out_c, p)));
                }
                grads
            },
        ))
    }

    /// Transposed convolution (the adjoint of [`Tensor::conv2d`] with respect
    /// to its input), kernel layout `(in_c, out_c / groups, kh, kw)`.
    pub fn conv_transpose2d(&self, spec: &ConvSpec<'_, T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ks = spec.kernel.shape();
        let (in_c, ocg, kh, kw) = (ks.n(), ks.c(), ks.h(), ks.w());
        let groups = spec.groups;
        ensure_arg!(
            groups > 0 && spec.stride > 0,
            "stride and groups must be positive"
        );
        ensure_arg!(
            in_c == xs.c(),
            "conv_transpose2d: kernel {ks} expects {in_c} input channels, input is {xs}"
        );
        ensure_arg!(
            in_c % groups == 0,
            "conv_transpose2d: {in_c} input channels not divisible by groups={groups}"
        );
        let icg = in_c / groups;
        let out_c = ocg * groups;
        bias_values(spec.bias, out_c)?;
        let (Some(oh), Some(ow)) = (
            conv_transpose_output_size(xs.h(), kh, spec.stride, spec.padding),
            conv_transpose_output_size(xs.w(), kw, spec.stride, spec.padding),
        ) else {
            return Err(crate::Error::InvalidArgument(format!(
                "conv_transpose2d: input {xs} too small for kernel {kh}x{kw} with padding {}",
                spec.padding
            )));
        };
        // Seen from the output image, the input is the sampling grid.
        let win = Window {
            channels: ocg,
            ih: oh,
            iw: ow,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            gh: xs.h(),
            gw: xs.w(),
        };
        let kdim = win.rows();
        let pin = xs.plane();
        let oplane = oh * ow;
        let out_shape = Shape::new(xs.n(), out_c, oh, ow);
        let mut out = vec![T::zero(); out_shape.numel()];
        let x = self.data();
        let w = spec.kernel.data();
        let chunk = win.chunk_rows();
        let chunks: Vec<(usize, usize)> = (0..xs.h())
            .step_by(chunk)
            .map(|r| (r, (r + chunk).min(xs.h())))
            .collect();
        let mut colbuf = Scratch::new(kdim * chunk * xs.w(), T::zero());
        for b in 0..xs.n() {
            for g in 0..groups {
                let xg = &x[(b * in_c + g * icg) * pin..][..icg * pin];
                let wg = &w[g * icg * kdim..(g + 1) * icg * kdim];
                let dst = &mut out[(b * out_c + g * ocg) * oplane..][..ocg * oplane];
                for &(r0, r1) in &chunks {
                    let cols = (r1 - r0) * xs.w();
                    let col = &mut colbuf.buf[..kdim * cols];
                    matmul(
                        kdim,
                        cols,
                        icg,
                        wg,
                        kdim,
                        Transpose::Yes,
                        &xg[r0 * xs.w()..],
                        pin,
                        Transpose::No,
                        T::zero(),
                        col,
                        cols,
                    );
                    win.col2im(col, r0, r1, dst);
                }
            }
        }
        drop(colbuf);
        if let Some(bias) = spec.bias {
            for (i, plane) in out.chunks_exact_mut(oplane).enumerate() {
                let v = bias.data()[i % out_c];
                plane.iter_mut().for_each(|o| *o = *o + v);
            }
        }

        let (xsave, wsave) = (self.storage(), spec.kernel.storage());
        let mut inputs: Vec<&Tensor<T>> = vec![self, spec.kernel];
        inputs.extend(spec.bias);
        Ok(Tensor::from_op(
            out_shape,
            out,
            &inputs,
            move |gout, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); xs.numel()]);
                let mut gw = needs[1].then(|| vec![T::zero(); ks.numel()]);
                let mut colbuf = Scratch::new(kdim * chunk * xs.w(), T::zero());
                for b in 0..xs.n() {
                    for g in 0..groups {
                        let go = &gout[(b * out_c + g * ocg) * oplane..][..ocg * oplane];
                        let x_off = (b * in_c + g * icg) * pin;
                        let wg = &wsave[g * icg * kdim..(g + 1) * icg * kdim];
                        for &(r0, r1) in &chunks {
                            let cols = (r1 - r0) * xs.w();
                            let col = &mut colbuf.buf[..kdim * cols];
                            win.im2col(go, r0, r1, col);
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx[x_off + r0 * xs.w()..];
                                matmul(
                                    icg,
                                    cols,
                                    kdim,
                                    wg,
                                    kdim,
                                    Transpose::No,
                                    col,
                                    cols,
                                    Transpose::No,
                                    T::zero(),
                                    dst,
                                    pin,
                                );
                            }
                            if let Some(gw) = gw.as_mut() {
                                let gwg = &mut gw[g * icg * kdim..(g + 1) * icg * kdim];
                                matmul(
                                    icg,
                                    kdim,
                                    cols,
                                    &xsave[x_off + r0 * xs.w()..],
                                    pin,
                                    Transpose::No,
                                    col,
                                    cols,
                                    Transpose::Yes,
                                    T::one(),
                                    gwg,
                                    kdim,
                                );
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| sum_bias_grad(gout, xs.n(), out_c, oplane)));
                }
                grads
            },
        ))
    }
}

/// Forward pass for one (batch item, group): `dst = W * im2col(img)`.
fn conv_forward_chunks<T: Real>(
    win: &Window,
    img: &[T],
    wg: &[T],
    ocg: usize,
    chunks: &[(usize, usize)],
    dst: &mut [T],
) {
    let kdim = win.rows();
    let p = win.gh * win.gw;
    let threads = num_threads().min(chunks.len());
    if threads <= 1 {
        let mut colbuf = Scratch::new(kdim * (chunks[0].1 - chunks[0].0) * win.gw, T::zero());
        for &(r0, r1) in chunks {
            let cols = (r1 - r0) * win.gw;
            let col = &mut colbuf.buf[..kdim * cols];
            win.im2col(img, r0, r1, col);
            matmul(
                ocg,
                cols,
                kdim,
                wg,
                kdim,
                Transpose::No,
                col,
                cols,
                Transpose::No,
                T::zero(),
                &mut dst[r0 * win.gw..],
                p,
            );
        }
        return;
    }
    // Each worker fills private tiles that are copied out afterwards; every
    // output element is still produced by exactly one GEMM call.
    let tiles: Vec<Vec<(usize, usize, Vec<T>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let mut done = Vec::new();
                    for &(r0, r1) in chunks.iter().skip(t).step_by(threads) {
                        let cols = (r1 - r0) * win.gw;
                        let mut col = Scratch::new(kdim * cols, T::zero());
                        win.im2col(img, r0, r1, &mut col.buf);
                        let mut tile = vec![T::zero(); ocg * cols];
                        matmul(
                            ocg,
                            cols,
                            kdim,
                            wg,
                            kdim,
                            Transpose::No,
                            &col.buf,
                            cols,
                            Transpose::No,
                            T::zero(),
                            &mut tile,
                            cols,
                        );
                        done.push((r0, r1, tile));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("conv worker panicked"))
            .collect()
    });
    for (r0, r1, tile) in tiles.into_iter().flatten() {
        let cols = (r1 - r0) * win.gw;
        for o in 0..ocg {
            dst[o * p + r0 * win.gw..][..cols].copy_from_slice(&tile[o * cols..(o + 1) * cols]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_of_ones_kernel_sums_neighbourhood() {
        let x = Tensor::<f32>::new([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let y = x.conv2d(&ConvSpec::new(&k).padding(1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        assert_eq!(y.at(0, 0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = Tensor::<f32>::from_fn([2, 4, 7, 5], |n, c, y, x| (n + c * y + x) as f32 - 3.0);
        let k = Tensor::<f32>::zeros([6, 2, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 6, 1, 1]);
        let y = x
            .conv2d(
                &ConvSpec::new(&k)
                    .bias(Some(&b))
                    .stride(2)
                    .padding(1)
                    .groups(2),
            )
            .unwrap();
        assert_eq!(y.shape(), Shape::new(2, 6, 4, 3));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_transpose_spreads_value() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 2.5);
        let k = Tensor::<f32>::full([1, 1, 4, 4], 1.0);
        let y = x
            .conv_transpose2d(&ConvSpec::new(&k).stride(2).padding(1))
            .unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn identity_depthwise_kernel() {
        let x = Tensor::<f32>::from_fn([1, 3, 4, 4], |_, c, y, x| (c * 16 + y * 4 + x) as f32);
        let k = Tensor::<f32>::full([3, 1, 1, 1], 1.0);
        let y = x.conv2d(&ConvSpec::new(&k).groups(3)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros([1, 4, 5, 5]);
        assert!(x
            .conv2d(&ConvSpec::new(&Tensor::zeros([4, 3, 3, 3])))
            .is_err());
        assert!(x
            .conv2d(&ConvSpec::new(&Tensor::zeros([3, 4, 3, 3])).groups(3))
            .is_err());
        assert!(x
            .conv2d(&ConvSpec::new(&Tensor::zeros([4, 4, 7, 7])))
            .is_err());
        let k = Tensor::zeros([4, 4, 3, 3]);
        assert!(x
            .conv2d(&ConvSpec::new(&k).bias(Some(&Tensor::zeros([1, 3, 1, 1]))))
            .is_err());
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(256, 3, 2, 1), Some(128));
        assert_eq!(conv_output_size(7, 3, 1, 1), Some(7));
        assert_eq!(conv_output_size(2, 5, 1, 1), None);
        assert_eq!(conv_transpose_output_size(16, 4, 2, 1), Some(32));
    }

    #[test]
    fn threaded_forward_is_bitwise_identical() {
        // 64 channels at width 64 forces several column chunks.
        let x = Tensor::<f32>::from_fn([1, 64, 200, 64], |_, c, y, x| {
            ((c * 7 + y * 3 + x) % 13) as f32 * 0.1 - 0.6
        });
        let k = Tensor::<f32>::from_fn([16, 64, 3, 3], |o, i, y, x| {
            ((o + 2 * i + y + 3 * x) % 5) as f32 * 0.05 - 0.1
        });
        let spec = ConvSpec::new(&k).padding(1);
        let serial = x.conv2d(&spec).unwrap();
        set_num_threads(3);
        let parallel = x.conv2d(&spec).unwrap();
        set_num_threads(1);
        assert_eq!(serial.to_vec(), parallel.to_vec());
    }
}
