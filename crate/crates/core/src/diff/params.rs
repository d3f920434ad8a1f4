use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order, each with a gradient accumulator and
/// a trainable flag.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        let (idx, _) = self.params.insert_full(
            name,
            Param {
                value,
                grad,
                trainable: true,
            },
        );
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Param) {
        let (k, v) = self.params.get_index(idx).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut Param) {
        let (k, v) = self
            .params
            .get_index_mut(idx)
            .expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn freeze(&mut self, prefix: &str) -> usize {
        self.set_trainable(prefix, false)
    }

    pub fn unfreeze(&mut self, prefix: &str) -> usize {
        self.set_trainable(prefix, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn freeze_toggles_flag_only() {
        let mut ps = ParamStore::new();
        ps.insert("encoder.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        ps.insert("head.w", Tensor::vector(vec![3.0])).unwrap();
        let before = ps.get("encoder.w").unwrap().value.clone();
        assert_eq!(ps.freeze("encoder."), 1);
        assert!(!ps.get("encoder.w").unwrap().trainable);
        assert!(ps.get("head.w").unwrap().trainable);
        assert_eq!(ps.get("encoder.w").unwrap().value, before);
        ps.unfreeze("encoder.");
        assert!(ps.get("encoder.w").unwrap().trainable);
    }
}
