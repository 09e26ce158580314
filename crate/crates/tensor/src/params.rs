use std::ops::Index;

use crate::error::{mismatch, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Position of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, keeping names; shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return mismatch("assign", &[self.values.len()], &[values.len()]);
        }
        for (old, new) in self.values.iter().zip(&values) {
            if old.shape() != new.shape() {
                return mismatch("assign", old.shape(), new.shape());
            }
        }
        self.values = values;
        Ok(())
    }

    /// Places every parameter on the tape, as gradient leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| {
                    if trainable {
                        tape.leaf(v.clone())
                    } else {
                        tape.constant(v.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients for each parameter after a backward pass; zeros where none
    /// reached the leaf.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(v, &var)| {
                tape.grad(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; v.numel()])
            })
            .collect()
    }
}

/// Tape handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl From<Vec<Var>> for Bound {
    fn from(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}
