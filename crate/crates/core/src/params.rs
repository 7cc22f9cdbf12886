use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether the optimizer updates a tensor or it is carried state
/// (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

/// Ordered, named collection of tensors. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.kinds.push(kind);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(contract!(
                "parameter `{name}` has shape {:?}, replacement has {:?}",
                slot.shape(),
                tensor.shape()
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, ParamKind)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.kinds)
            .map(|((n, t), &k)| (n.as_str(), t, k))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, ParamKind)> {
        self.names
            .iter()
            .zip(self.tensors.iter_mut())
            .zip(&self.kinds)
            .map(|((n, t), &k)| (n.as_str(), t, k))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, name: &str) -> Result<ParamKind> {
        self.index
            .get(name)
            .map(|&i| self.kinds[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t, k) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape().to_vec()), k)
                .expect("names unique in source");
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t, k) in self.iter() {
            out.insert(n, t.cast(), k).expect("names unique in source");
        }
        out
    }

    /// `self[name] += grad` for a named gradient contribution.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        self.get_mut(name)?.add_assign(grad)
    }

    pub fn num_learnable_scalars(&self) -> usize {
        self.iter()
            .filter(|(_, _, k)| *k == ParamKind::Learnable)
            .map(|(_, t, _)| t.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_ordered() {
        let mut p = ParamStore::<f32>::new();
        p.insert("b", Tensor::zeros(vec![2]), ParamKind::Learnable).unwrap();
        p.insert("a", Tensor::zeros(vec![3]), ParamKind::Buffer).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![1]), ParamKind::Buffer).is_err());
        assert_eq!(p.names(), &["b".to_string(), "a".to_string()]);
        assert!(matches!(p.get("zz"), Err(Error::MissingParam(_))));
        assert!(p.set("a", Tensor::zeros(vec![4])).is_err());
        assert_eq!(p.num_learnable_scalars(), 2);
    }
}
