use std::collections::HashMap;

use super::{Init, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
pub struct ParamStore<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self.entries.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::parameter(shape, data)?;
        let id = ParamId(self.entries.len());
        self.lookup.insert(name.clone(), id.0);
        self.entries.push((name, t));
        Ok(id)
    }

    pub fn add_init(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = Tensor::<T>::create(shape, init)?;
        self.add(name, shape, t.to_vec())
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    /// Replace the data of a parameter with a fresh leaf (gradient cleared).
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let shape = self.entries[id.0].1.shape().to_vec();
        self.entries[id.0].1 = Tensor::parameter(&shape, data)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy every parameter into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            let c = t.cast::<U>();
            out.add(name.clone(), t.shape(), c.to_vec())
                .expect("names are unique in the source store");
        }
        out
    }
}
