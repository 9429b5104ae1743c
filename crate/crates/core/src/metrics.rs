//! Image quality metrics. Inputs are clamped to `[0, 1]` and all
//! arithmetic is done in `f64`.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_arg, Error, Result};
use crate::tensor::{Real, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn clamped<T: Real>(t: &Tensor<T>) -> impl Iterator<Item = f64> + '_ {
    t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0))
}

fn same_shape<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    ensure_arg!(
        pred.shape() == gt.shape(),
        "prediction {} and ground truth {} differ in shape",
        pred.shape(),
        gt.shape()
    );
    Ok(())
}

/// Mean squared error after clamping both images.
pub fn mse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    let sum: f64 = clamped(pred)
        .zip(clamped(gt))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Peak signal-to-noise ratio in dB for unit peak, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Root-mean-squared difference on the 0..255 scale.
pub fn interpolation_error<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(255.0 * mse(pred, gt)?.sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering of one plane with a normalized window.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(i, &g)| g * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(i, &g)| g * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale structural similarity with an 11x11 Gaussian window
/// (sigma 1.5), computed per channel and averaged over channels, images and
/// window positions.
pub fn ssim<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    let s = pred.shape();
    ensure_arg!(
        s.h() >= SSIM_WINDOW && s.w() >= SSIM_WINDOW,
        "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s}"
    );
    let win = gaussian_window();
    let a: Vec<f64> = clamped(pred).collect();
    let b: Vec<f64> = clamped(gt).collect();
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.chunks_exact(plane).zip(b.chunks_exact(plane)) {
        let f = |v: &[f64]| filter_valid(v, s.h(), s.w(), &win);
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (mu_a, mu_b) = (f(pa), f(pb));
        let (aa, bb, ab) = (f(&prod(pa, pa)), f(&prod(pb, pb)), f(&prod(pa, pb)));
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

/// Selectable evaluation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Psnr,
    Ssim,
    Ie,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Ie];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Ie => "ie",
        }
    }

    pub fn evaluate<T: Real>(self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(pred, gt),
            Metric::Ssim => ssim(pred, gt),
            Metric::Ie => interpolation_error(pred, gt),
        }
    }

    /// Parses a comma-separated list such as `psnr,ssim`.
    pub fn parse_list(list: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Metric = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        ensure_arg!(!out.is_empty(), "no metrics selected");
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let valid: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown metric '{s}'; valid metrics: {}",
                    valid.join(", ")
                ))
            })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metric values for one evaluated sample, in the report's metric order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub values: Vec<f64>,
}

/// Per-sample values plus their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn new(metrics: Vec<Metric>) -> Self {
        MetricReport {
            metrics,
            samples: Vec::new(),
        }
    }

    /// Measures one prediction and appends the row.
    pub fn push<T: Real>(
        &mut self,
        id: impl Into<String>,
        pred: &Tensor<T>,
        gt: &Tensor<T>,
    ) -> Result<()> {
        let values = self
            .metrics
            .iter()
            .map(|m| m.evaluate(pred, gt))
            .collect::<Result<Vec<_>>>()?;
        self.samples.push(SampleMetrics {
            id: id.into(),
            values,
        });
        Ok(())
    }

    /// Arithmetic mean of each metric over samples.
    pub fn means(&self) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        (0..self.metrics.len())
            .map(|i| self.samples.iter().map(|s| s.values[i]).sum::<f64>() / n)
            .collect()
    }

    /// Mean of one metric, if it was measured.
    pub fn mean_of(&self, metric: Metric) -> Option<f64> {
        let i = self.metrics.iter().position(|&m| m == metric)?;
        Some(self.means()[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Tensor<f64> {
        Tensor::full([1, 3, 16, 16], v)
    }

    #[test]
    fn psnr_closed_forms() {
        let gt = constant(0.2);
        assert_eq!(psnr(&gt, &gt).unwrap(), PSNR_CAP);
        assert!((psnr(&constant(0.3), &gt).unwrap() - 20.0).abs() < 1e-6);
        assert!((psnr(&constant(0.7), &gt).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constants() {
        let v = ssim(&constant(0.2), &constant(0.8)).unwrap();
        let expected = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.04 + 0.64 + SSIM_C1);
        assert!((v - expected).abs() < 1e-12);
        assert!((ssim(&constant(0.4), &constant(0.4)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_pattern_is_negative() {
        let a = Tensor::<f64>::from_fn(
            [1, 1, 16, 16],
            |_, _, y, x| if (x + y) % 2 == 0 { 0.9 } else { 0.1 },
        );
        let b = Tensor::from_fn([1, 1, 16, 16], |_, _, y, x| 1.0 - a.at(0, 0, y, x));
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ie_values() {
        let gt = constant(0.5);
        assert_eq!(interpolation_error(&gt, &gt).unwrap(), 0.0);
        let off = constant(0.5 + 2.0 / 255.0);
        assert!((interpolation_error(&off, &gt).unwrap() - 2.0).abs() < 1e-9);
        let half = Tensor::from_fn(
            [1, 1, 2, 2],
            |_, _, y, _| if y == 0 { 0.5 + 3.0 / 255.0 } else { 0.5 },
        );
        let expect = (9.0f64 / 2.0).sqrt();
        assert!(
            (interpolation_error(&half, &Tensor::full([1, 1, 2, 2], 0.5)).unwrap() - expect).abs()
                < 1e-9
        );
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(
            Metric::parse_list("psnr,ie").unwrap(),
            vec![Metric::Psnr, Metric::Ie]
        );
        let err = Metric::parse_list("psnr,lpips").unwrap_err().to_string();
        assert!(err.contains("psnr, ssim, ie"), "{err}");
    }

    #[test]
    fn report_means() {
        let mut r = MetricReport::new(vec![Metric::Psnr]);
        let gt = constant(0.2);
        r.push("a", &constant(0.3), &gt).unwrap();
        r.push("b", &gt, &gt).unwrap();
        let mean = r.mean_of(Metric::Psnr).unwrap();
        assert!((mean - (r.samples[0].values[0] + 99.0) / 2.0).abs() < 1e-12);
    }
}
