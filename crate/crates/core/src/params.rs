//! Flat named-tensor parameter storage shared by the model, the EMA teacher,
//! the optimizer and checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{MustError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn push(&mut self, t: Tensor) -> ParamId {
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    /// Errors unless `other` has the same tensor names and shapes in order.
    pub fn check_same_structure(&self, other: &Params) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(MustError::InvalidState(format!(
                "parameter count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(MustError::InvalidState(format!(
                    "parameter mismatch: {}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            crate::linalg::add_assign(&mut a.data, &b.data);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= alpha;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Bitwise equality of every value, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
