//! Finite-difference verification of tape gradients.
//!
//! Both checkers reduce a tensor-valued function to a scalar by contracting
//! it with a fixed random weighting, so every output element contributes a
//! distinct coefficient. Errors are reported, never raised: the caller
//! decides what threshold means failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Shape, Tape, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// on both routes do not divide by zero.
    pub floor: f64,
    /// Check at most this many elements per input (chosen at random).
    /// `None` checks every element.
    pub max_elements: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-3,
            floor: 1e-3,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst comparison.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradcheckReport {
    fn observe(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some((input, elem));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Uniform random tensors in `[lo, hi)`.
pub fn random_inputs(shapes: &[Shape], seed: u64, lo: f64, hi: f64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|&s| Tensor::from_parts(s, (0..s.numel()).map(|_| rng.gen_range(lo..hi)).collect()))
        .collect()
}

struct Projection {
    weights: Option<Vec<f64>>,
}

impl Projection {
    fn scalarize(&mut self, y: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
        if y.numel() == 1 {
            return Ok(y.sum());
        }
        let w = self
            .weights
            .get_or_insert_with(|| (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = Tensor::from_parts(y.shape(), w.clone());
        Ok(y.mul(&w)?.sum())
    }
}

fn evaluate<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    proj: &mut Projection,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let y = f(inputs)?;
    proj.scalarize(&y, rng)?.item()
}

/// Elementwise check of `f` at `inputs`.
pub fn gradcheck<F>(
    f: F,
    inputs: &[Tensor<f64>],
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = Projection { weights: None };

    let tape = Tape::new();
    let tracked: Vec<_> = inputs.iter().map(|t| tape.track(t)).collect();
    let y = f(&tracked)?;
    let loss = proj.scalarize(&y, &mut rng)?;
    let grads = loss.backward()?;

    let mut report = GradcheckReport::default();
    for (i, (input, leaf)) in inputs.iter().zip(&tracked).enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        let elems: Vec<usize> = match opts.max_elements {
            Some(k) if k < input.numel() => {
                (0..k).map(|_| rng.gen_range(0..input.numel())).collect()
            }
            _ => (0..input.numel()).collect(),
        };
        for e in elems {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = perturbed(input, e, opts.step);
            minus[i] = perturbed(input, e, -opts.step);
            let fp = evaluate(&f, &plus, &mut proj, &mut rng)?;
            let fm = evaluate(&f, &minus, &mut proj, &mut rng)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            report.observe(i, e, analytic.data()[e], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Directional check: one random unit-length direction per input tensor
/// (equal-magnitude entries with random signs), compared against the inner
/// product of the tape gradient with that direction. Two function
/// evaluations per input, so it scales to full networks.
pub fn directional_gradcheck<F>(
    f: F,
    inputs: &[Tensor<f64>],
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = Projection { weights: None };

    let tape = Tape::new();
    let tracked: Vec<_> = inputs.iter().map(|t| tape.track(t)).collect();
    let y = f(&tracked)?;
    let loss = proj.scalarize(&y, &mut rng)?;
    let grads = loss.backward()?;

    let mut report = GradcheckReport::default();
    for (i, (input, leaf)) in inputs.iter().zip(&tracked).enumerate() {
        let unit = 1.0 / (input.numel() as f64).sqrt();
        let direction: Vec<f64> = (0..input.numel())
            .map(|_| if rng.gen::<bool>() { unit } else { -unit })
            .collect();
        let g = grads.get_or_zeros(leaf);
        let analytic: f64 = g.data().iter().zip(&direction).map(|(a, d)| a * d).sum();
        let shift = |sign: f64| {
            let data = input
                .data()
                .iter()
                .zip(&direction)
                .map(|(v, d)| v + sign * opts.step * d)
                .collect();
            Tensor::from_parts(input.shape(), data)
        };
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        plus[i] = shift(1.0);
        minus[i] = shift(-1.0);
        let fp = evaluate(&f, &plus, &mut proj, &mut rng)?;
        let fm = evaluate(&f, &minus, &mut proj, &mut rng)?;
        let numeric = (fp - fm) / (2.0 * opts.step);
        report.observe(i, 0, analytic, numeric, opts.floor);
    }
    Ok(report)
}

fn perturbed(t: &Tensor<f64>, index: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.to_vec();
    data[index] += delta;
    Tensor::from_parts(t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_function() {
        let x = random_inputs(&[Shape::new(1, 2, 3, 3)], 1, -1.0, 1.0);
        let r = gradcheck(
            |xs| Ok(xs[0].scale(3.0)),
            &x,
            7,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // A "sigmoid" whose recorded derivative is off by a factor of two.
        let broken = |xs: &[Tensor<f64>]| {
            let x = &xs[0];
            let y: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            let ys = y.clone();
            Ok(Tensor::from_op(x.shape(), y, &[x], move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(&ys)
                        .map(|(g, y)| 2.0 * g * y * (1.0 - y))
                        .collect(),
                )]
            }))
        };
        let x = random_inputs(&[Shape::new(1, 1, 2, 2)], 3, -1.0, 1.0);
        let r = gradcheck(broken, &x, 0, &GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.4);
        let d = directional_gradcheck(broken, &x, 0, &GradcheckOptions::default()).unwrap();
        assert!(!d.passed(1e-4));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-3), 0.0);
        assert!((relative_error(1e-6, 2e-6, 1e-3) - 1e-3).abs() < 1e-12);
        assert!((relative_error(1.0, 1.1, 1e-3) - 0.1 / 1.1).abs() < 1e-12);
    }
}
