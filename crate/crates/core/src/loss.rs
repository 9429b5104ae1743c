//! Reconstruction losses and the multi-scale weighting schedule.
//!
//! The reconstruction loss of one image pair is a Charbonnier penalty on the
//! pixel difference plus a soft census term on local intensity structure.
//! The training objective adds the coarser pyramid levels with a weight
//! `tau` that decays to zero early in training.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_arg, Error, Result};
use crate::model::{ForwardOutput, SIZE_MULTIPLE};
use crate::tensor::{Real, Tensor};
use crate::warp::{build_pyramid, pad_to_multiple};

/// Soft-sign scale of the census transform (squared).
const CENSUS_SIGN_EPS: f64 = 0.81;
/// Saturation constant of the per-offset census distance.
const CENSUS_DIST_EPS: f64 = 0.1;
/// `255 / 3`: the channel sum times this is the mean intensity on 0..255.
const INTENSITY_SCALE: f64 = 85.0;

/// How the auxiliary-level weight evolves over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TauMode {
    /// Linear decay from `tau_start` to `tau_end`, then constant.
    #[default]
    Annealed,
    /// Always `tau_start`.
    Fixed,
    /// Always zero.
    Off,
}

impl TauMode {
    pub const NAMES: [&'static str; 3] = ["annealed", "fixed", "off"];
}

impl FromStr for TauMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annealed" => Ok(TauMode::Annealed),
            "fixed" => Ok(TauMode::Fixed),
            "off" => Ok(TauMode::Off),
            other => Err(Error::InvalidArgument(format!(
                "unknown tau mode '{other}' (expected one of: {})",
                TauMode::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauMode::Annealed => "annealed",
            TauMode::Fixed => "fixed",
            TauMode::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Charbonnier exponent.
    pub alpha: f64,
    /// Charbonnier smoothing; the loss of a zero difference is `epsilon^(2 alpha)`.
    pub epsilon: f64,
    /// Side of the census window; odd.
    pub census_patch: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Fraction of training over which `tau` decays.
    pub anneal_fraction: f64,
    pub mode: TauMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            epsilon: 1e-3,
            census_patch: 7,
            tau_start: 0.1,
            tau_end: 0.0,
            anneal_fraction: 0.25,
            mode: TauMode::Annealed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.alpha > 0.0,
            "alpha must be positive, got {}",
            self.alpha
        );
        ensure_arg!(
            self.epsilon > 0.0,
            "epsilon must be positive, got {}",
            self.epsilon
        );
        ensure_arg!(
            self.census_patch % 2 == 1,
            "census patch must be odd, got {}",
            self.census_patch
        );
        ensure_arg!(
            self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0,
            "anneal fraction must be in (0, 1], got {}",
            self.anneal_fraction
        );
        ensure_arg!(
            self.tau_start >= 0.0 && self.tau_end >= 0.0,
            "tau values must be non-negative"
        );
        Ok(())
    }

    /// Robust penalty `(x^2 + eps^2)^alpha`.
    fn rho(&self, x: f64) -> f64 {
        let base = x * x + self.epsilon * self.epsilon;
        if self.alpha == 0.5 {
            base.sqrt()
        } else {
            base.powf(self.alpha)
        }
    }

    /// Derivative of [`LossConfig::rho`].
    fn rho_prime(&self, x: f64) -> f64 {
        let base = x * x + self.epsilon * self.epsilon;
        2.0 * self.alpha * x * base.powf(self.alpha - 1.0)
    }
}

/// Weight of the auxiliary levels at a (fractional) epoch.
pub fn tau(epoch: f64, total_epochs: f64, cfg: &LossConfig) -> f64 {
    match cfg.mode {
        TauMode::Off => 0.0,
        TauMode::Fixed => cfg.tau_start,
        TauMode::Annealed => {
            let end = total_epochs * cfg.anneal_fraction;
            if epoch < end {
                cfg.tau_end + (cfg.tau_start - cfg.tau_end) * (1.0 - epoch / end)
            } else {
                cfg.tau_end
            }
        }
    }
}

/// Mean Charbonnier penalty over every element of `diff`.
pub fn charbonnier<T: Real>(diff: &Tensor<T>, cfg: &LossConfig) -> Tensor<T> {
    let count = diff.numel() as f64;
    // Summing the excess over rho(0) keeps the floor value exact.
    let floor = cfg.rho(0.0);
    let excess: f64 = diff
        .data()
        .iter()
        .map(|v| cfg.rho(v.as_f64()) - floor)
        .sum();
    let mean = floor + excess / count;
    let saved = diff.to_vec();
    let cfg = cfg.clone();
    Tensor::from_op(
        crate::tensor::Shape::scalar(),
        vec![T::from_f64_lossy(mean)],
        &[diff],
        move |g, _| {
            let scale = g[0].as_f64() / count;
            let gx = saved
                .iter()
                .map(|v| T::from_f64_lossy(scale * cfg.rho_prime(v.as_f64())))
                .collect();
            vec![Some(gx)]
        },
    )
}

/// Intensity on a 0..255 scale: channel sum times 85.
fn intensity<T: Real>(image: &Tensor<T>) -> Vec<f64> {
    let s = image.shape();
    let plane = s.plane();
    let mut out = vec![0.0; s.n() * plane];
    for n in 0..s.n() {
        let dst = &mut out[n * plane..(n + 1) * plane];
        for c in 0..s.c() {
            let src = &image.data()[(n * s.c() + c) * plane..(n * s.c() + c + 1) * plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v.as_f64();
            }
        }
        for d in dst.iter_mut() {
            *d *= INTENSITY_SCALE * 3.0 / s.c() as f64;
        }
    }
    out
}

fn soft_sign(d: f64) -> f64 {
    d / (CENSUS_SIGN_EPS + d * d).sqrt()
}

fn soft_sign_prime(d: f64) -> f64 {
    CENSUS_SIGN_EPS / (CENSUS_SIGN_EPS + d * d).powf(1.5)
}

fn census_distance(e: f64) -> f64 {
    e * e / (CENSUS_DIST_EPS + e * e)
}

fn census_distance_prime(e: f64) -> f64 {
    let q = CENSUS_DIST_EPS + e * e;
    2.0 * e * CENSUS_DIST_EPS / (q * q)
}

/// Geometry shared by the census forward and backward passes.
struct CensusGrid {
    n: usize,
    h: usize,
    w: usize,
    radius: usize,
    offsets: Vec<(isize, isize)>,
}

impl CensusGrid {
    fn pixels(&self) -> usize {
        self.n * (self.h - 2 * self.radius) * (self.w - 2 * self.radius)
    }

    /// Calls `f(plane offset, center index, neighbour indices)` for every
    /// interior pixel.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let r = self.radius;
        for n in 0..self.n {
            let base = n * self.h * self.w;
            for y in r..self.h - r {
                for x in r..self.w - r {
                    f(base, y * self.w + x);
                }
            }
        }
    }

    fn neighbour(&self, center: usize, (dy, dx): (isize, isize)) -> usize {
        (center as isize + dy * self.w as isize + dx) as usize
    }
}

/// Soft census distance between `a` and `b`, Charbonnier-wrapped per pixel
/// and averaged over pixels whose full window lies inside the image.
pub fn census_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let s = a.shape();
    ensure_arg!(
        b.shape() == s,
        "census: shapes {s} and {} differ",
        b.shape()
    );
    let k = cfg.census_patch;
    ensure_arg!(
        s.h() >= k && s.w() >= k,
        "census needs images of at least {k}x{k}, got {s}"
    );
    let radius = k / 2;
    let r = radius as isize;
    let offsets = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&o| o != (0, 0))
        .collect();
    let grid = CensusGrid {
        n: s.n(),
        h: s.h(),
        w: s.w(),
        radius,
        offsets,
    };
    let ia = intensity(a);
    let ib = intensity(b);

    let mut total = 0.0;
    grid.for_each(|base, center| {
        let (ca, cb) = (ia[base + center], ib[base + center]);
        let sum: f64 = grid
            .offsets
            .iter()
            .map(|&o| {
                let j = base + grid.neighbour(center, o);
                census_distance(soft_sign(ia[j] - ca) - soft_sign(ib[j] - cb))
            })
            .sum();
        total += cfg.rho(sum) - cfg.rho(0.0);
    });
    let pixels = grid.pixels() as f64;
    let mean = cfg.rho(0.0) + total / pixels;
    let cfg = cfg.clone();
    let channels = s.c();
    Ok(Tensor::from_op(
        crate::tensor::Shape::scalar(),
        vec![T::from_f64_lossy(mean)],
        &[a, b],
        move |g, needs| {
            let scale = g[0].as_f64() / pixels;
            let plane = grid.h * grid.w;
            let mut ga = vec![0.0; grid.n * plane];
            let mut gb = vec![0.0; grid.n * plane];
            grid.for_each(|base, center| {
                let i = base + center;
                let (ca, cb) = (ia[i], ib[i]);
                let terms: Vec<(usize, f64, f64)> = grid
                    .offsets
                    .iter()
                    .map(|&o| {
                        let j = base + grid.neighbour(center, o);
                        (j, ia[j] - ca, ib[j] - cb)
                    })
                    .collect();
                let sum: f64 = terms
                    .iter()
                    .map(|&(_, da, db)| census_distance(soft_sign(da) - soft_sign(db)))
                    .sum();
                let outer = scale * cfg.rho_prime(sum);
                for &(j, da, db) in &terms {
                    let de = outer * census_distance_prime(soft_sign(da) - soft_sign(db));
                    let gda = de * soft_sign_prime(da);
                    let gdb = -de * soft_sign_prime(db);
                    ga[j] += gda;
                    ga[i] -= gda;
                    gb[j] += gdb;
                    gb[i] -= gdb;
                }
            });
            let spread = |gi: &[f64]| -> Vec<T> {
                let per_channel = INTENSITY_SCALE * 3.0 / channels as f64;
                let mut out = Vec::with_capacity(gi.len() * channels);
                for n in 0..grid.n {
                    let src = &gi[n * plane..(n + 1) * plane];
                    for _ in 0..channels {
                        out.extend(src.iter().map(|&v| T::from_f64_lossy(v * per_channel)));
                    }
                }
                out
            };
            vec![needs[0].then(|| spread(&ga)), needs[1].then(|| spread(&gb))]
        },
    ))
}

/// Charbonnier of the difference plus the census term.
pub fn reconstruction_loss<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    Ok(reconstruction_parts(pred, gt, cfg)?.0)
}

/// `(total, charbonnier value, census value)`.
fn reconstruction_parts<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Tensor<T>, f64, f64)> {
    ensure_arg!(
        pred.shape() == gt.shape(),
        "prediction {} and target {} differ in shape",
        pred.shape(),
        gt.shape()
    );
    let ch = charbonnier(&pred.sub(gt)?, cfg);
    let ce = census_loss(pred, gt, cfg)?;
    let (cv, ev) = (ch.item()?.as_f64(), ce.item()?.as_f64());
    Ok((ch.add(&ce)?, cv, ev))
}

/// Per-term values of the training objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Charbonnier term at levels 0..=3.
    pub charbonnier: [f64; 4],
    /// Census term at levels 0..=3.
    pub census: [f64; 4],
    pub tau: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Reconstruction loss at `level`.
    pub fn level(&self, level: usize) -> f64 {
        self.charbonnier[level] + self.census[level]
    }

    /// Sum of the auxiliary-level reconstruction losses.
    pub fn auxiliary(&self) -> f64 {
        (1..4).map(|l| self.level(l)).sum()
    }
}

/// Combines per-level predictions with their targets:
/// `L_r(level 0) + tau * sum_{l=1..3} L_r(level l)`. With `tau == 0` the
/// auxiliary terms are still reported but kept off the tape. Auxiliary
/// levels smaller than the census window skip the census term.
pub fn compose_loss<T: Real>(
    predictions: &[Tensor<T>],
    targets: &[Tensor<T>],
    tau: f64,
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossBreakdown)> {
    ensure_arg!(
        predictions.len() == 4 && targets.len() == 4,
        "expected four levels, got {} predictions and {} targets",
        predictions.len(),
        targets.len()
    );
    let mut breakdown = LossBreakdown {
        tau,
        ..Default::default()
    };
    let (mut total, c0, e0) = reconstruction_parts(&predictions[0], &targets[0], cfg)?;
    breakdown.charbonnier[0] = c0;
    breakdown.census[0] = e0;
    let mut auxiliary: Option<Tensor<T>> = None;
    for l in 1..4 {
        let pred = if tau == 0.0 {
            predictions[l].detach()
        } else {
            predictions[l].clone()
        };
        let s = pred.shape();
        let (term, c, e) = if s.h() < cfg.census_patch || s.w() < cfg.census_patch {
            // Too small for a single census window: the level keeps only
            // its Charbonnier term.
            ensure_arg!(
                s == targets[l].shape(),
                "level {l}: {s} vs {}",
                targets[l].shape()
            );
            let ch = charbonnier(&pred.sub(&targets[l])?, cfg);
            let v = ch.item()?.as_f64();
            (ch, v, 0.0)
        } else {
            reconstruction_parts(&pred, &targets[l], cfg)?
        };
        breakdown.charbonnier[l] = c;
        breakdown.census[l] = e;
        auxiliary = Some(match auxiliary {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    if tau != 0.0 {
        if let Some(aux) = auxiliary {
            total = total.add(&aux.scale(T::from_f64_lossy(tau)))?;
        }
    }
    breakdown.total = total.item()?.as_f64();
    Ok((total, breakdown))
}

/// Training objective for a forward pass against the full-resolution
/// ground truth. Targets for coarser levels are average-pooled from the
/// (padded) ground truth exactly like the input pyramids.
pub fn total_loss<T: Real>(
    output: &ForwardOutput<T>,
    gt: &Tensor<T>,
    tau: f64,
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let (padded, _) = pad_to_multiple(gt, SIZE_MULTIPLE)?;
    let pyramid = build_pyramid(&padded, 4)?;
    let mut targets = vec![gt.detach()];
    targets.extend(pyramid.levels()[1..].iter().cloned());
    let mut predictions = vec![output.prediction.clone()];
    predictions.extend(output.states[1..].iter().map(|s| s.image.clone()));
    compose_loss(&predictions, &targets, tau, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn charbonnier_floor() {
        let z = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert_eq!(charbonnier(&z, &cfg()).item().unwrap(), 1e-3);
        let z = Tensor::<f64>::zeros([1, 3, 4, 4]);
        assert_eq!(charbonnier(&z, &cfg()).item().unwrap(), 1e-3);
    }

    #[test]
    fn charbonnier_of_mixed_values() {
        let x = Tensor::<f64>::from_fn(
            [1, 1, 1, 4],
            |_, _, _, i| if i % 2 == 0 { 3.0 } else { 4.0 },
        );
        let v = charbonnier(&x, &cfg()).item().unwrap();
        let expected = 0.5 * ((9.0f64 + 1e-6).sqrt() + (16.0f64 + 1e-6).sqrt());
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn census_of_identical_images_is_floor() {
        let a = Tensor::<f64>::from_fn([1, 3, 9, 10], |_, c, y, x| {
            ((c * 7 + y * 3 + x) % 11) as f64 / 11.0
        });
        assert_eq!(census_loss(&a, &a, &cfg()).unwrap().item().unwrap(), 1e-3);
    }

    #[test]
    fn census_rejects_small_images() {
        let a = Tensor::<f32>::zeros([1, 3, 6, 20]);
        assert!(census_loss(&a, &a, &cfg()).is_err());
    }

    #[test]
    fn census_ignores_brightness_shift() {
        let a = Tensor::<f32>::from_fn([1, 3, 12, 12], |_, c, y, x| {
            ((c * 5 + y * 7 + x * 3) % 64) as f32 / 256.0
        });
        let b = a.add_scalar(0.125);
        let same = census_loss(&a, &a, &cfg()).unwrap().item().unwrap();
        let shifted = census_loss(&a, &b, &cfg()).unwrap().item().unwrap();
        assert_eq!(same, shifted);
    }

    #[test]
    fn tau_schedule() {
        let c = cfg();
        assert_eq!(tau(0.0, 300.0, &c), 0.1);
        assert_eq!(tau(37.5, 300.0, &c), 0.05);
        assert_eq!(tau(75.0, 300.0, &c), 0.0);
        assert_eq!(tau(300.0, 300.0, &c), 0.0);
        let fixed = LossConfig {
            mode: TauMode::Fixed,
            ..c.clone()
        };
        assert_eq!(tau(200.0, 300.0, &fixed), 0.1);
        let off = LossConfig {
            mode: TauMode::Off,
            ..c
        };
        assert_eq!(tau(0.0, 300.0, &off), 0.0);
    }

    #[test]
    fn tau_mode_parses() {
        assert_eq!("fixed".parse::<TauMode>().unwrap(), TauMode::Fixed);
        assert!("sometimes".parse::<TauMode>().is_err());
    }

    #[test]
    fn floor_composition() {
        let levels: Vec<Tensor<f64>> = (0..4)
            .map(|l| {
                Tensor::from_fn([1, 3, 64 >> l, 64 >> l], |_, c, y, x| {
                    ((c + y * x) % 5) as f64 / 5.0
                })
            })
            .collect();
        let (_, b) = compose_loss(&levels, &levels, 0.1, &cfg()).unwrap();
        assert!((b.total - 2.6e-3).abs() < 1e-15, "{}", b.total);
        let (_, b0) = compose_loss(&levels, &levels, 0.0, &cfg()).unwrap();
        assert_eq!(b0.total, 2e-3);
    }

    #[test]
    fn zero_tau_keeps_auxiliary_levels_off_the_tape() {
        let tape = Tape::new();
        let levels: Vec<Tensor<f64>> = (0..4)
            .map(|l| tape.track(&Tensor::full([1, 3, 32 >> l, 32 >> l], 0.25)))
            .collect();
        let targets: Vec<Tensor<f64>> = (0..4)
            .map(|l| Tensor::full([1, 3, 32 >> l, 32 >> l], 0.5))
            .collect();
        let (loss, _) = compose_loss(&levels, &targets, 0.0, &cfg()).unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(&levels[0]).is_some());
        assert!(g.get(&levels[1]).is_none());
    }
}
