//! Built-in verification suites behind the `selftest` and `gradcheck`
//! commands.
//!
//! Each check is a named closure returning a short detail string on success
//! or a description of the mismatch on failure. Library errors raised inside
//! a check count as failures, so a suite always runs to completion.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{
    census_loss, charbonnier, reconstruction_loss, tau, total_loss, LossConfig, TauMode,
};
use crate::metrics::{interpolation_error, psnr, ssim};
use crate::model::{csm_apply, Init, ModelConfig, ParamSpec, Parameters, Pmcrnet, ENCODER_WIDTHS};
use crate::tensor::gradcheck::{
    directional_gradcheck, gradcheck, random_inputs, GradcheckOptions, GradcheckReport,
};
use crate::tensor::{ConvSpec, Shape, Tensor};
use crate::train::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
use crate::warp::{avg_downsample2x, backward_warp};

/// Relative tolerance of kernel comparisons against the reference loops.
pub const KERNEL_TOLERANCE: f64 = 1e-5;
/// Relative tolerance of every finite-difference comparison.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

type Outcome = std::result::Result<String, String>;

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

/// Ordered collection of check results.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    fn run(&mut self, name: &'static str, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = check();
        let millis = start.elapsed().as_secs_f64() * 1e3;
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult {
            name,
            passed,
            detail,
            millis,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(f, "{:<width$}  result  {:>9}  detail", "check", "ms")?;
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {verdict:<6}  {:>9.1}  {}",
                c.name, c.millis, c.detail
            )?;
        }
        let n = self.checks.len();
        write!(f, "{} of {n} checks passed", n - self.failures())
    }
}

fn lift<T>(r: crate::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("error: {e}"))
}

fn expect(cond: bool, ok: impl Into<String>, fail: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail())
    }
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Direct nested-loop convolution, kernel `(out_c, in_c/groups, kh, kw)`.
pub fn reference_conv2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (oc, icg) = (ks.n(), ks.c());
    let ocg = oc / groups;
    let oh = (xs.h() + 2 * pad - ks.h()) / stride + 1;
    let ow = (xs.w() + 2 * pad - ks.w()) / stride + 1;
    Tensor::from_fn([xs.n(), oc, oh, ow], |n, o, y, xo| {
        let g = o / ocg;
        let mut acc = bias.map_or(0.0, |b| b[o]);
        for i in 0..icg {
            for ky in 0..ks.h() {
                for kx in 0..ks.w() {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xo * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                        acc += k.at(o, i, ky, kx) * x.at(n, g * icg + i, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Scatter form of the transposed convolution, kernel `(in_c, out_c/groups, kh, kw)`.
pub fn reference_conv_transpose2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (ic, ocg) = (ks.n(), ks.c());
    let icg = ic / groups;
    let oc = ocg * groups;
    let oh = (xs.h() - 1) * stride + ks.h() - 2 * pad;
    let ow = (xs.w() - 1) * stride + ks.w() - 2 * pad;
    let mut out = vec![0.0; xs.n() * oc * oh * ow];
    for n in 0..xs.n() {
        for i in 0..ic {
            let g = i / icg;
            for y in 0..xs.h() {
                for xi in 0..xs.w() {
                    let v = x.at(n, i, y, xi);
                    for o in 0..ocg {
                        for ky in 0..ks.h() {
                            for kx in 0..ks.w() {
                                let ty = (y * stride + ky) as isize - pad as isize;
                                let tx = (xi * stride + kx) as isize - pad as isize;
                                if ty >= 0 && tx >= 0 && (ty as usize) < oh && (tx as usize) < ow {
                                    let oc_idx = g * ocg + o;
                                    out[((n * oc + oc_idx) * oh + ty as usize) * ow
                                        + tx as usize] += v * k.at(i, o, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut t = Tensor::from_parts([xs.n(), oc, oh, ow].into(), out);
    if let Some(b) = bias {
        t = Tensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, x) + b[c]);
    }
    t
}

/// One randomized convolution configuration.
#[derive(Clone, Copy, Debug)]
struct ConvCase {
    n: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvCase {
    fn sample(rng: &mut ChaCha8Rng, grouped: bool) -> Self {
        let groups = if grouped { rng.gen_range(2..=3) } else { 1 };
        let k = [1, 3, 4, 5][rng.gen_range(0..4)];
        ConvCase {
            n: rng.gen_range(1..=2),
            in_c: groups * rng.gen_range(1..=3),
            out_c: groups * rng.gen_range(1..=3),
            h: rng.gen_range(k..k + 6),
            w: rng.gen_range(k..k + 6),
            k,
            stride: rng.gen_range(1..=2),
            pad: rng.gen_range(0..=k / 2),
            groups,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let s = shape.into();
    Tensor::from_parts(
        s,
        (0..s.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn conv_cases(seed: u64, count: usize, grouped: bool, transposed: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let c = ConvCase::sample(&mut rng, grouped);
        let x = random_tensor(&mut rng, [c.n, c.in_c, c.h, c.w]);
        let bias: Vec<f64> = (0..c.out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (fast, slow) = if transposed {
            let pad = c.pad.min(c.k - 1);
            let k = random_tensor(&mut rng, [c.in_c, c.out_c / c.groups, c.k, c.k]);
            let b = Tensor::from_parts([1, c.out_c, 1, 1].into(), bias.clone());
            let spec = ConvSpec::new(&k)
                .bias(Some(&b))
                .stride(c.stride)
                .padding(pad)
                .groups(c.groups);
            (
                lift(x.conv_transpose2d(&spec))?,
                reference_conv_transpose2d(&x, &k, Some(&bias), c.stride, pad, c.groups),
            )
        } else {
            let k = random_tensor(&mut rng, [c.out_c, c.in_c / c.groups, c.k, c.k]);
            let b = Tensor::from_parts([1, c.out_c, 1, 1].into(), bias.clone());
            let spec = ConvSpec::new(&k)
                .bias(Some(&b))
                .stride(c.stride)
                .padding(c.pad)
                .groups(c.groups);
            (
                lift(x.conv2d(&spec))?,
                reference_conv2d(&x, &k, Some(&bias), c.stride, c.pad, c.groups),
            )
        };
        if fast.shape() != slow.shape() {
            return Err(format!(
                "{c:?}: shape {} vs reference {}",
                fast.shape(),
                slow.shape()
            ));
        }
        worst = worst.max(max_rel_diff(fast.data(), slow.data()));
        if worst > KERNEL_TOLERANCE {
            return Err(format!("{c:?}: relative difference {worst:.3e}"));
        }
    }
    Ok(format!("{count} cases, max rel diff {worst:.1e}"))
}

fn row(values: &[f64]) -> Tensor<f64> {
    Tensor::from_parts([1, 1, 1, values.len()].into(), values.to_vec())
}

fn uniform_flow(h: usize, w: usize, u: f64, v: f64) -> Tensor<f64> {
    Tensor::from_fn([1, 2, h, w], |_, c, _, _| if c == 0 { u } else { v })
}

fn dyadic_image(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0..=192) as f64 / 256.0)
}

fn kernel_checks(r: &mut Report) {
    r.run("conv2d_reference", || conv_cases(11, 40, false, false));
    r.run("grouped_conv2d_reference", || {
        conv_cases(12, 30, true, false)
    });
    r.run("conv_transpose2d_reference", || {
        conv_cases(13, 30, false, true)
    });
    r.run("conv_transpose2d_adjoint", || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_tensor(&mut rng, [1, 3, 6, 6]);
        let k = random_tensor(&mut rng, [4, 3, 4, 4]);
        let y = lift(x.conv2d(&ConvSpec::new(&k).stride(2).padding(1)))?;
        let z = random_tensor(&mut rng, y.shape());
        let back = lift(z.conv_transpose2d(&ConvSpec::new(&k).stride(2).padding(1)))?;
        let lhs: f64 = y.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(1.0);
        expect(
            rel < 1e-12,
            format!("<y, Kx> = <K^T y, x> to {rel:.1e}"),
            || format!("{lhs} vs {rhs}"),
        )
    });
}

fn warp_checks(r: &mut Report) {
    r.run("warp_zero_flow_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor(&mut rng, [2, 3, 7, 9]);
        let out = lift(backward_warp(&x, &Tensor::zeros([2, 2, 7, 9])))?;
        let same = out
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        expect(same, "bitwise identical", || {
            "output differs from input".into()
        })
    });
    r.run("warp_integer_shift", || {
        let x = row(&[1.0, 2.0, 3.0, 4.0]);
        let out = lift(backward_warp(&x, &uniform_flow(1, 4, 1.0, 0.0)))?;
        expect(
            out.data() == [2.0, 3.0, 4.0, 4.0],
            "[a,b,c,d] -> [b,c,d,d]",
            || format!("got {:?}", out.data()),
        )
    });
    r.run("warp_integer_shift_2d", || {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_tensor(&mut rng, [1, 2, 6, 7]);
        let (dx, dy) = (-2isize, 1isize);
        let out = lift(backward_warp(&x, &uniform_flow(6, 7, dx as f64, dy as f64)))?;
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let want = Tensor::from_fn(x.shape(), |n, c, y, xx| {
            x.at(
                n,
                c,
                clampi(y as isize + dy, 6),
                clampi(xx as isize + dx, 7),
            )
        });
        expect(
            out.data() == want.data(),
            "clamped shift reproduced exactly",
            || "shifted values differ".into(),
        )
    });
    r.run("warp_half_pixel", || {
        let out = lift(backward_warp(
            &row(&[0.25, 0.75]),
            &uniform_flow(1, 2, 0.5, 0.0),
        ))?;
        let err = (out.data()[0] - 0.5).abs();
        expect(
            err <= 1e-6,
            format!("first sample (a+b)/2, err {err:.1e}"),
            || format!("got {}", out.data()[0]),
        )
    });
}

fn csm_checks(r: &mut Report) {
    fn frames(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i0 = random_tensor(&mut rng, [1, 3, 5, 6]);
        let i1 = random_tensor(&mut rng, [1, 3, 5, 6]);
        let f0 = random_tensor(&mut rng, [1, 2, 5, 6]).scale(2.0);
        let f1 = random_tensor(&mut rng, [1, 2, 5, 6]).scale(2.0);
        (i0, i1, f0, f1)
    }
    r.run("csm_unit_mask", || {
        let (i0, i1, f0, f1) = frames(31);
        let out = lift(csm_apply(
            &Tensor::full([1, 1, 5, 6], 1.0),
            &Tensor::zeros([1, 3, 5, 6]),
            &f0,
            &f1,
            &i0,
            &i1,
        ))?;
        let want = lift(backward_warp(&i0, &f0))?;
        expect(
            out.data() == want.data(),
            "M=1 gives warped frame 0",
            || "differs from warped frame 0".into(),
        )
    });
    r.run("csm_zero_mask", || {
        let (i0, i1, f0, f1) = frames(32);
        let out = lift(csm_apply(
            &Tensor::zeros([1, 1, 5, 6]),
            &Tensor::zeros([1, 3, 5, 6]),
            &f0,
            &f1,
            &i0,
            &i1,
        ))?;
        let want = lift(backward_warp(&i1, &f1))?;
        expect(
            out.data() == want.data(),
            "M=0 gives warped frame 1",
            || "differs from warped frame 1".into(),
        )
    });
    r.run("csm_equal_frames", || {
        let (i0, _, _, _) = frames(33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mask = Tensor::from_fn([1, 1, 5, 6], |_, _, _, _| rng.gen_range(0.0..1.0));
        let zero = Tensor::zeros([1, 2, 5, 6]);
        let out = lift(csm_apply(
            &mask,
            &Tensor::zeros([1, 3, 5, 6]),
            &zero,
            &zero,
            &i0,
            &i0,
        ))?;
        expect(
            out.data() == i0.data(),
            "I0 == I1 reproduced exactly",
            || "output differs from input".into(),
        )
    });
}

fn loss_checks(r: &mut Report) {
    let cfg = LossConfig::default();
    r.run("charbonnier_floor", || {
        let v = lift(charbonnier(&Tensor::<f32>::zeros([1, 3, 16, 16]), &cfg).item())?;
        expect(v == 1e-3, "exactly 1e-3", || format!("got {v:e}"))
    });
    r.run("reconstruction_floor", || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_tensor(&mut rng, [1, 3, 16, 16]);
        let v = lift(lift(reconstruction_loss(&x, &x, &cfg))?.item())?;
        expect(v == 2e-3, "exactly 2e-3", || format!("got {v:e}"))
    });
    r.run("census_brightness_invariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = dyadic_image(&mut rng, [1, 3, 12, 12]);
        let b = dyadic_image(&mut rng, [1, 3, 12, 12]);
        let before = lift(lift(census_loss(&a, &b, &cfg))?.item())?;
        let after = lift(lift(census_loss(&a.add_scalar(0.125), &b, &cfg))?.item())?;
        expect(before == after, format!("{before} unchanged"), || {
            format!("{before} vs {after}")
        })
    });
    r.run("tau_schedule", || {
        let annealed = LossConfig::default();
        let points = [
            (0.0, 0.1),
            (37.5, 0.05),
            (75.0, 0.0),
            (150.0, 0.0),
            (300.0, 0.0),
        ];
        for (epoch, want) in points {
            let got = tau(epoch, 300.0, &annealed);
            if (got - want).abs() > 1e-12 {
                return Err(format!("tau({epoch}/300) = {got}, expected {want}"));
            }
        }
        let fixed = LossConfig {
            mode: TauMode::Fixed,
            ..LossConfig::default()
        };
        let off = LossConfig {
            mode: TauMode::Off,
            ..LossConfig::default()
        };
        expect(
            tau(200.0, 300.0, &fixed) == 0.1 && tau(0.0, 300.0, &off) == 0.0,
            "0.1 -> 0.05 -> 0 over the first quarter",
            || "fixed/off modes wrong".into(),
        )
    });
}

fn metric_checks(r: &mut Report) {
    r.run("psnr_uniform_error", || {
        let gt = Tensor::<f64>::full([1, 3, 16, 16], 0.4);
        let v = lift(psnr(&gt.add_scalar(0.1), &gt))?;
        expect((v - 20.0).abs() <= 1e-6, format!("{v:.9} dB"), || {
            format!("got {v}")
        })
    });
    r.run("ssim_identical", || {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = Tensor::<f64>::from_fn([1, 3, 24, 24], |_, _, _, _| rng.gen_range(0.0..1.0));
        let v = lift(ssim(&x, &x))?;
        expect((v - 1.0).abs() < 1e-12, format!("{v}"), || {
            format!("got {v}")
        })
    });
    r.run("ie_uniform_error", || {
        let gt = Tensor::<f64>::full([1, 3, 8, 8], 0.5);
        let v = lift(interpolation_error(&gt.add_scalar(2.0 / 255.0), &gt))?;
        expect((v - 2.0).abs() <= 1e-9, format!("{v:.12}"), || {
            format!("got {v}")
        })
    });
    r.run("ie_psnr_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let a = Tensor::<f64>::from_fn([1, 3, 12, 12], |_, _, _, _| rng.gen_range(0.0..1.0));
        let b = Tensor::<f64>::from_fn([1, 3, 12, 12], |_, _, _, _| rng.gen_range(0.0..1.0));
        let (p, ie) = (lift(psnr(&a, &b))?, lift(interpolation_error(&a, &b))?);
        let via_ie = 20.0 * (255.0 / ie).log10();
        expect(
            (p - via_ie).abs() < 1e-9,
            "PSNR = 20 log10(255 / IE)",
            || format!("{p} vs {via_ie}"),
        )
    });
}

fn model_checks(r: &mut Report) {
    r.run("parameter_count", || {
        let cfg = ModelConfig::default();
        let net = lift(Pmcrnet::<f32>::new(cfg.clone(), 0))?;
        let closed = cfg.param_count();
        let counted = net.param_count();
        let ratio = counted as f64 / 6.2e6;
        expect(
            counted == closed && (0.85..=1.15).contains(&ratio),
            format!("{counted} ({:+.1}% of 6.2M)", (ratio - 1.0) * 100.0),
            || format!("counted {counted}, closed form {closed}"),
        )
    });
    r.run("shape_ladder", || {
        let net = lift(Pmcrnet::<f32>::new(ModelConfig::default(), 0))?;
        let frame = Tensor::<f32>::full([1, 3, 256, 448], 0.5);
        let phi = lift(net.encode(&frame))?;
        let widths: Vec<usize> = phi.iter().map(|t| t.shape().c()).collect();
        if widths != ENCODER_WIDTHS {
            return Err(format!("encoder widths {widths:?}"));
        }
        let out = lift(net.forward(&frame, &frame))?;
        for (l, img) in out.level_images().iter().enumerate() {
            let s = img.shape();
            if (s.h(), s.w()) != (256 >> l, 448 >> l) {
                return Err(format!("level {l} is {s}"));
            }
        }
        Ok("256x448 -> 128x224 -> 64x112 -> 32x56, widths 48/96/144/192".into())
    });
}

fn training_checks(r: &mut Report) {
    r.run("cosine_lr_endpoints", || {
        let (a, m, b) = (
            cosine_lr(0, 100, 1e-4, 2e-5),
            cosine_lr(50, 100, 1e-4, 2e-5),
            cosine_lr(100, 100, 1e-4, 2e-5),
        );
        expect(
            (a - 1e-4).abs() < 1e-15 && (m - 6e-5).abs() < 1e-15 && (b - 2e-5).abs() < 1e-15,
            "1e-4 -> 6e-5 -> 2e-5",
            || format!("{a} {m} {b}"),
        )
    });
    r.run("adamw_first_step", || {
        let spec = ParamSpec {
            name: "p".into(),
            shape: Shape::scalar(),
            init: Init::Constant(0.0),
        };
        let mut p = Parameters::<f64>::initialize(&[spec], 0);
        let g = vec![Tensor::<f64>::full(Shape::scalar(), 1.0)];
        let mut state = OptimizerState::for_parameters(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        lift(adamw_step(&mut p, &g, &mut state, 1e-3, &cfg))?;
        let v = p.tensors()[0].data()[0];
        expect((v + 1e-3).abs() < 1e-9, format!("p = {v:e}"), || {
            format!("p = {v}, expected -1e-3")
        })
    });
}

/// A small conv gradient check so a corrupted backward pass also trips the
/// quick suite.
fn conv_gradient_check(r: &mut Report) {
    r.run("conv2d_gradient", || {
        let inputs = random_inputs(
            &[Shape::new(1, 2, 5, 5), Shape::new(3, 2, 3, 3)],
            61,
            -1.0,
            1.0,
        );
        let rep = lift(gradcheck(
            |xs| xs[0].conv2d(&ConvSpec::new(&xs[1]).padding(1)),
            &inputs,
            62,
            &GradcheckOptions::default(),
        ))?;
        grad_outcome(&rep)
    });
}

/// Quick invariant suite.
pub fn selftest() -> Report {
    let mut r = Report::default();
    kernel_checks(&mut r);
    warp_checks(&mut r);
    csm_checks(&mut r);
    loss_checks(&mut r);
    metric_checks(&mut r);
    model_checks(&mut r);
    training_checks(&mut r);
    conv_gradient_check(&mut r);
    r
}

fn grad_outcome(rep: &GradcheckReport) -> Outcome {
    let detail = format!(
        "{} comparisons, max rel err {:.2e}",
        rep.checked, rep.max_rel_error
    );
    if rep.passed(GRADIENT_TOLERANCE) {
        Ok(detail)
    } else {
        Err(format!(
            "{detail} at {:?}: analytic {:.6e} numeric {:.6e}",
            rep.worst, rep.analytic_at_worst, rep.numeric_at_worst
        ))
    }
}

/// Values in `[-hi, -lo] U [lo, hi]`, away from the PReLU kink at zero.
fn away_from_zero(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_parts(
        shape,
        (0..shape.numel())
            .map(|_| {
                let m = rng.gen_range(lo..hi);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

/// Flows whose fractional parts stay in `[0.1, 0.9]`, away from the
/// bilinear kinks at integer displacements.
fn fractional_flow(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_parts(
        shape,
        (0..shape.numel())
            .map(|_| rng.gen_range(-2i32..2) as f64 + rng.gen_range(0.1..0.9))
            .collect(),
    )
}

/// Knobs of the finite-difference suite.
#[derive(Clone, Debug)]
pub struct GradientSuiteOptions {
    pub seed: u64,
    /// Include the end-to-end network check (the slowest item).
    pub include_model: bool,
    /// Network configuration used by the end-to-end check.
    pub model: ModelConfig,
}

impl Default for GradientSuiteOptions {
    fn default() -> Self {
        GradientSuiteOptions {
            seed: 0,
            include_model: true,
            model: ModelConfig::default(),
        }
    }
}

fn check_op<F>(r: &mut Report, name: &'static str, inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: Fn(&[Tensor<f64>]) -> crate::Result<Tensor<f64>>,
{
    check_op_with_step(r, name, inputs, seed, 1e-3, f);
}

/// Losses with sharp curvature (the Charbonnier smoothing is 1e-3 and the
/// census scales intensities by 255) need a much finer step.
fn check_op_with_step<F>(
    r: &mut Report,
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    step: f64,
    f: F,
) where
    F: Fn(&[Tensor<f64>]) -> crate::Result<Tensor<f64>>,
{
    let opts = GradcheckOptions {
        step,
        ..GradcheckOptions::default()
    };
    r.run(name, || {
        grad_outcome(&lift(gradcheck(f, &inputs, seed, &opts))?)
    });
}

/// Central finite-difference checks of every differentiable operator in
/// `f64`, followed by the full network loss with respect to every weight
/// tensor on a 2x3x32x32 batch.
pub fn gradient_suite(opts: &GradientSuiteOptions) -> Report {
    let s = opts.seed;
    let shape = Shape::new(1, 2, 4, 5);
    let rand = |k: u64, sh: Shape, lo: f64, hi: f64| {
        random_inputs(&[sh], s.wrapping_add(k), lo, hi).remove(0)
    };
    let cfg = LossConfig::default();
    let mut r = Report::default();

    check_op(
        &mut r,
        "add_sub_mul",
        vec![rand(1, shape, -1.0, 1.0), rand(2, shape, -1.0, 1.0)],
        s,
        |x| x[0].add(&x[1])?.mul(&x[0].sub(&x[1])?),
    );
    check_op(
        &mut r,
        "scale_add_scalar",
        vec![rand(3, shape, -1.0, 1.0)],
        s,
        |x| Ok(x[0].scale(-1.5).add_scalar(0.25).rsub_scalar(2.0)),
    );
    check_op(&mut r, "sigmoid", vec![rand(4, shape, -3.0, 3.0)], s, |x| {
        Ok(x[0].sigmoid())
    });
    check_op(
        &mut r,
        "prelu",
        vec![
            away_from_zero(shape, s + 5, 0.05, 1.0),
            rand(6, Shape::new(1, 2, 1, 1), 0.1, 0.4),
        ],
        s,
        |x| x[0].prelu(&x[1]),
    );
    check_op(
        &mut r,
        "concat_split",
        vec![
            rand(7, shape, -1.0, 1.0),
            rand(8, Shape::new(1, 3, 4, 5), -1.0, 1.0),
        ],
        s,
        |x| {
            let joined = Tensor::concat(&[&x[0], &x[1]])?;
            let parts = joined.split_channels(&[1, 4])?;
            parts[1].mul(&parts[1])
        },
    );
    check_op(
        &mut r,
        "channel_shuffle",
        vec![rand(9, Shape::new(1, 6, 3, 3), -1.0, 1.0)],
        s,
        |x| x[0].channel_shuffle(3),
    );
    check_op(
        &mut r,
        "mean_crop",
        vec![rand(10, shape, -1.0, 1.0)],
        s,
        |x| Ok(x[0].crop(1, 1, 2, 3)?.mul(&x[0].crop(0, 0, 2, 3)?)?.mean()),
    );
    check_op(
        &mut r,
        "conv2d",
        vec![
            rand(11, Shape::new(2, 3, 6, 5), -1.0, 1.0),
            rand(12, Shape::new(4, 3, 3, 3), -1.0, 1.0),
            rand(13, Shape::new(1, 4, 1, 1), -1.0, 1.0),
        ],
        s,
        |x| x[0].conv2d(&ConvSpec::new(&x[1]).bias(Some(&x[2])).padding(1)),
    );
    check_op(
        &mut r,
        "conv2d_grouped_strided",
        vec![
            rand(14, Shape::new(1, 6, 7, 6), -1.0, 1.0),
            rand(15, Shape::new(6, 2, 3, 3), -1.0, 1.0),
        ],
        s,
        |x| x[0].conv2d(&ConvSpec::new(&x[1]).stride(2).padding(1).groups(3)),
    );
    check_op(
        &mut r,
        "conv_transpose2d",
        vec![
            rand(16, Shape::new(1, 3, 3, 4), -1.0, 1.0),
            rand(17, Shape::new(3, 2, 4, 4), -1.0, 1.0),
            rand(18, Shape::new(1, 2, 1, 1), -1.0, 1.0),
        ],
        s,
        |x| x[0].conv_transpose2d(&ConvSpec::new(&x[1]).bias(Some(&x[2])).stride(2).padding(1)),
    );
    check_op(
        &mut r,
        "blend",
        vec![
            rand(19, shape, 0.0, 1.0),
            rand(20, shape, 0.0, 1.0),
            rand(21, Shape::new(1, 1, 4, 5), 0.05, 0.95),
        ],
        s,
        |x| x[0].blend(&x[1], &x[2]),
    );
    check_op(
        &mut r,
        "backward_warp",
        vec![
            rand(22, Shape::new(1, 3, 5, 6), 0.0, 1.0),
            fractional_flow(Shape::new(1, 2, 5, 6), s + 23),
        ],
        s,
        |x| backward_warp(&x[0], &x[1]),
    );
    check_op(
        &mut r,
        "avg_downsample",
        vec![rand(24, Shape::new(1, 2, 6, 4), -1.0, 1.0)],
        s,
        |x| avg_downsample2x(&x[0]),
    );
    let c = cfg.clone();
    check_op_with_step(
        &mut r,
        "charbonnier",
        vec![away_from_zero(shape, s + 25, 0.05, 0.5)],
        s,
        1e-6,
        move |x| Ok(charbonnier(&x[0], &c)),
    );
    let c = cfg.clone();
    check_op_with_step(
        &mut r,
        "census_loss",
        vec![
            rand(26, Shape::new(1, 3, 9, 10), 0.0, 1.0),
            rand(27, Shape::new(1, 3, 9, 10), 0.0, 1.0),
        ],
        s,
        1e-6,
        move |x| census_loss(&x[0], &x[1], &c),
    );
    if opts.include_model {
        model_gradient(&mut r, opts);
    }
    r
}

fn model_gradient(r: &mut Report, opts: &GradientSuiteOptions) {
    r.run("model_loss_end_to_end", || {
        let net = lift(Pmcrnet::<f64>::new(opts.model.clone(), opts.seed))?;
        let frames = random_inputs(
            &[Shape::new(2, 3, 32, 32); 3],
            opts.seed.wrapping_add(100),
            0.0,
            1.0,
        );
        let inputs = net.parameters().tensors().to_vec();
        let cfg = LossConfig::default();
        let f = |weights: &[Tensor<f64>]| {
            let out = net.forward_with(weights, &frames[0], &frames[1])?;
            Ok(total_loss(&out, &frames[2], 0.1, &cfg)?.0)
        };
        // Bias directions of the last decoder move every output flow at
        // once; a small step keeps them from crossing bilinear kinks.
        let step = GradcheckOptions {
            step: 1e-6,
            ..GradcheckOptions::default()
        };
        grad_outcome(&lift(directional_gradcheck(f, &inputs, opts.seed, &step))?)
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_transpose_matches_hand_example() {
        // One input pixel of value 2 scattered through a 2x2 kernel with
        // stride 2 lands on a 2x2 block.
        let x = Tensor::<f64>::full([1, 1, 1, 1], 2.0);
        let k = Tensor::from_parts([1, 1, 2, 2].into(), vec![1.0, 2.0, 3.0, 4.0]);
        let y = reference_conv_transpose2d(&x, &k, None, 2, 0, 1);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn reference_conv_matches_hand_example() {
        let x = Tensor::<f64>::from_parts([1, 1, 2, 2].into(), vec![1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::from_parts([1, 1, 2, 2].into(), vec![1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            reference_conv2d(&x, &k, Some(&[0.5]), 1, 0, 1).data(),
            &[-2.5]
        );
    }

    #[test]
    fn quick_suite_passes_and_is_large_enough() {
        let r = selftest();
        assert!(r.checks.len() >= 20, "{}", r.checks.len());
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn operator_gradients_pass() {
        let r = gradient_suite(&GradientSuiteOptions {
            include_model: false,
            ..GradientSuiteOptions::default()
        });
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn report_table_lists_every_check() {
        let mut r = Report::default();
        r.run("always", || Ok("fine".into()));
        r.run("never", || Err("broken".into()));
        let table = r.to_string();
        assert!(table.contains("always") && table.contains("PASS"));
        assert!(table.contains("never") && table.contains("FAIL"));
        assert!(table.ends_with("1 of 2 checks passed"));
        assert!(!r.passed());
    }
}
