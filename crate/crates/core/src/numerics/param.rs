use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable leaf tensor with its gradient and AdamW state.
#[derive(Debug, Clone)]
pub struct Param<T: Float = f32> {
    name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub(crate) first_moment: Tensor<T>,
    pub(crate) second_moment: Tensor<T>,
    pub(crate) step: u64,
}

impl<T: Float> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named collection of trainable tensors. Iteration order is insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copy with values converted to another precision; optimizer state is reset.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", Tensor::zeros([2, 2])).unwrap();
        assert!(store.insert("a.w", Tensor::zeros([1])).is_err());
        assert_eq!(store.numel(), 4);
        let p = store.by_name("a.w").unwrap();
        assert_eq!(p.grad.shape(), p.value.shape());
        assert_eq!(p.first_moment.shape(), p.value.shape());
    }
}
