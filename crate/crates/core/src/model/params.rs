use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};
use crate::tensor::{Real, Shape, Tape, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
    KaimingUniform {
        fan_in: usize,
        gain: f64,
    },
    Constant(f64),
}

/// One entry of a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Named parameters in a fixed order. The order is part of the checkpoint
/// format.
#[derive(Clone, Debug)]
pub struct Parameters<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    /// Draws every parameter from its initializer. One generator is consumed
    /// in layout order, so the result depends only on `(layout, seed)`.
    pub fn initialize(layout: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = layout
            .iter()
            .map(|spec| {
                let n = spec.shape.numel();
                let data: Vec<T> = match spec.init {
                    Init::Constant(v) => vec![T::from_f64_lossy(v); n],
                    Init::KaimingUniform { fan_in, gain } => {
                        let bound = gain * (3.0 / fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
                            .collect()
                    }
                };
                (spec.name.clone(), Tensor::from_parts(spec.shape, data))
            })
            .unzip();
        Parameters { names, tensors }
    }

    /// Builds a parameter set from explicit tensors, checking them against
    /// `layout`. The error names the first offending tensor.
    pub fn from_tensors(layout: &[ParamSpec], named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        ensure_arg!(
            named.len() == layout.len(),
            "expected {} parameter tensors, got {}",
            layout.len(),
            named.len()
        );
        for (spec, (name, t)) in layout.iter().zip(&named) {
            ensure_arg!(
                &spec.name == name,
                "parameter order mismatch: expected {}, found {name}",
                spec.name
            );
            ensure_arg!(
                spec.shape == t.shape(),
                "shape mismatch for {name}: expected {}, found {}",
                spec.shape,
                t.shape()
            );
        }
        let (names, tensors) = named.into_iter().map(|(n, t)| (n, t.detach())).unzip();
        Ok(Parameters { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Leaves on `tape`, in parameter order.
    pub fn track(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| tape.track(t)).collect()
    }

    /// Replaces all tensors, e.g. after an optimizer step. Shapes must match.
    pub fn replace(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        ensure_arg!(
            tensors.len() == self.tensors.len(),
            "parameter count changed"
        );
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            ensure_arg!(
                old.shape() == new.shape(),
                "shape mismatch for {}: {} vs {}",
                self.names[i],
                old.shape(),
                new.shape()
            );
        }
        self.tensors = tensors.into_iter().map(|t| t.detach()).collect();
        Ok(())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
