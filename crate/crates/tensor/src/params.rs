use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of one [`ParamSet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn push_fan_in<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        self.push(name, crate::init::fan_in_uniform(shape, fan_in, rng))
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn push_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.push(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Record every parameter as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Record every parameter as a constant (no gradients flow into it).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
        }
    }

    /// Copy gradients from a backward pass into each tensor's `grad`.
    /// Parameters that did not influence the loss receive exact zeros.
    pub fn absorb_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (tensor, var) in self.tensors.iter_mut().zip(&bound.vars) {
            if !tensor.requires_grad() {
                continue;
            }
            let g = grads.get(*var).map_or_else(|| vec![0.0; tensor.numel()], <[f64]>::to_vec);
            tensor.set_grad(g).expect("gradient shape matches parameter");
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Replace the values of every tensor from another set with the same layout.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::InvalidShape {
                op: "load_values",
                shape: vec![other.len()],
                reason: "parameter names differ".into(),
            });
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
