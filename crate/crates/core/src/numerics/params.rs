use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

/// Named parameters with gradient slots and trainable flags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![T::zero(); value.len()];
        self.params.push(Parameter { name: name.clone(), value, grad, trainable });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds computed gradients into the slots of trainable parameters.
    pub fn accumulate(&mut self, grads: &super::Gradients<T>) {
        for (id, g) in &grads.params {
            let p = &mut self.params[id.0];
            if p.trainable {
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian values of `ids`.
    pub fn checksum(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            h.update((p.value.rows as u64).to_le_bytes());
            h.update((p.value.cols as u64).to_le_bytes());
            buf.clear();
            for v in &p.value.data {
                v.put_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}
