use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

/// Named collection of model weights, ordered by name.
///
/// The name set and every shape are fixed at construction; the same type
/// doubles as a gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let p = ModelParameters { tensors };
        p.check_finite()?;
        Ok(p)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// Identical names and shapes.
    pub fn same_schema(&self, other: &ModelParameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape == tb.shape)
    }

    pub fn check_schema(&self, other: &ModelParameters) -> Result<()> {
        if self.same_schema(other) {
            Ok(())
        } else {
            Err(Error::Contract(
                "parameter sets have different names or shapes".into(),
            ))
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, schemas assumed equal.
    pub fn add_scaled(&mut self, other: &ModelParameters, alpha: f64) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flat view over every value, in name order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.values().flat_map(|t| t.data.iter().copied())
    }

    /// Mutable access to the `index`-th value in [`values`](Self::values) order.
    pub fn value_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors.values_mut() {
            if index < t.len() {
                return &mut t.data[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn value_name(&self, mut index: usize) -> String {
        for (k, t) in &self.tensors {
            if index < t.len() {
                return format!("{k}[{index}]");
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParameters {
        let mut m = BTreeMap::new();
        m.insert("a".into(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        m.insert("b".into(), Tensor::scalar(3.0));
        ModelParameters::new(m).unwrap()
    }

    #[test]
    fn clone_is_independent() {
        let p = params();
        let mut q = p.clone();
        *q.value_mut(0) = 99.0;
        assert_eq!(p.get("a").data[0], 1.0);
        assert_eq!(q.values().collect::<Vec<_>>(), vec![99.0, 2.0, 3.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = BTreeMap::new();
        m.insert("x".into(), Tensor::scalar(f64::NAN));
        assert!(matches!(ModelParameters::new(m), Err(Error::Numeric(_))));
    }

    #[test]
    fn schema_comparison() {
        let p = params();
        assert!(p.same_schema(&p.zeros_like()));
        let mut m = BTreeMap::new();
        m.insert("a".into(), Tensor::zeros(&[3]));
        m.insert("b".into(), Tensor::scalar(0.0));
        assert!(!p.same_schema(&ModelParameters::new(m).unwrap()));
        assert_eq!(p.value_name(2), "b[0]");
    }
}
