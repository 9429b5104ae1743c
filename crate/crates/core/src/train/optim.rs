//! AdamW with decoupled weight decay, and the cosine learning-rate curve.

use crate::error::{ensure_arg, Result};
use crate::model::Parameters;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    /// Zero moments mirroring `shapes`.
    pub fn new(shapes: impl IntoIterator<Item = Shape>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        OptimizerState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_parameters(params: &Parameters<T>) -> Self {
        Self::new(params.tensors().iter().map(Tensor::shape))
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let progress = (step.min(total_steps) as f64) / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One AdamW update:
/// `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + weight_decay p)`.
pub fn adamw_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    ensure_arg!(
        grads.len() == params.len() && state.m.len() == params.len(),
        "optimizer expects {} tensors, got {} gradients and {} moments",
        params.len(),
        grads.len(),
        state.m.len()
    );
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        ensure_arg!(
            p.shape() == g.shape() && p.shape() == state.m[i].shape(),
            "shape mismatch for {name}: parameter {}, gradient {}, moment {}",
            p.shape(),
            g.shape(),
            state.m[i].shape()
        );
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut updated = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        let n = p.numel();
        let (mut m, mut v, mut out) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for j in 0..n {
            let gj = g.data()[j].as_f64();
            let mj = cfg.beta1 * state.m[i].data()[j].as_f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * state.v[i].data()[j].as_f64() + (1.0 - cfg.beta2) * gj * gj;
            let pj = p.data()[j].as_f64();
            let step = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + cfg.weight_decay * pj;
            m.push(T::from_f64_lossy(mj));
            v.push(T::from_f64_lossy(vj));
            out.push(T::from_f64_lossy(pj - lr * step));
        }
        let s = p.shape();
        state.m[i] = Tensor::new(s, m)?;
        state.v[i] = Tensor::new(s, v)?;
        updated.push(Tensor::new(s, out)?);
    }
    params.replace(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Init, ParamSpec};

    fn scalar_params(v: f64) -> Parameters<f64> {
        let spec = ParamSpec {
            name: "p".into(),
            shape: Shape::scalar(),
            init: Init::Constant(v),
        };
        Parameters::initialize(&[spec], 0)
    }

    fn value(p: &Parameters<f64>) -> f64 {
        p.tensors()[0].item().unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 2e-5), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 2e-5) - 2e-5).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4, 2e-5) - 6e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_is_unit_sized() {
        let mut p = scalar_params(0.0);
        let mut s = OptimizerState::for_parameters(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 1e-3, &cfg).unwrap();
        assert!((value(&p) + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_decays_multiplicatively() {
        let mut p = scalar_params(2.0);
        let mut s = OptimizerState::for_parameters(&p);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1, &cfg).unwrap();
        assert!((value(&p) - 2.0 * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::for_parameters(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * value(&p));
            adamw_step(&mut p, &[g], &mut s, 1e-2, &cfg).unwrap();
        }
        assert!(value(&p).abs() < 0.5);
    }
}
