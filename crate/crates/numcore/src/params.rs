//! Named parameter registry.
//!
//! Models own a `ParamStore`; each training step binds the store onto a
//! fresh tape (leaves snapshot the current values), runs forward/backward,
//! then pulls gradients back into the tensors for the optimizer.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape variables for one binding of a store.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Trainable tensor with i.i.d. N(0, std^2) entries.
    pub fn add_randn(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Rng) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng).with_grad())
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape).with_grad())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf_tensor(t)).collect(),
        }
    }

    /// Copy gradients off the tape into each tensor's grad buffer.
    /// Parameters no gradient reached get zeros.
    pub fn pull_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        if binding.vars.len() != self.tensors.len() {
            return Err(Error::Contract(
                "binding does not match the parameter store".into(),
            ));
        }
        for (t, &v) in self.tensors.iter_mut().zip(binding.vars.iter()) {
            if t.requires_grad {
                t.grad = Some(tape.grad_or_zeros(v));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.iter_mut() {
            t.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_pull() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let w = store.add_randn("w", vec![2, 2], 1.0, &mut rng);
        let frozen = store.add("frozen", Tensor::zeros(vec![2]));

        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let wv = b.var(w);
        let prod = tape.mul(wv, wv).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        store.pull_grads(&tape, &b).unwrap();

        let expected: Vec<f64> = store.tensor(w).data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(store.tensor(w).grad.as_ref().unwrap(), &expected);
        assert!(store.tensor(frozen).grad.is_none());
    }
}
