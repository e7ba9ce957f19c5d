use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors owned by one training loop.
///
/// Names are dotted paths (`rnnt.encoder.layer0.wx`) and are the keys used
/// by checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(id)
    }

    /// Uniform `[-bound, bound]` initialization.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; numel])?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.names[id.0].starts_with(prefix))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.tensors[id.0].zero_grad();
        }
    }

    pub fn clear_grad(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.tensors[id.0].grad = None;
        }
    }

    /// Adds `scale * grad` into each listed parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)], scale: f64) {
        for (id, g) in grads {
            let t = &mut self.tensors[id.0];
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, x) in buf.iter_mut().zip(g) {
                *b += scale * x;
            }
        }
    }

    /// Rescales the listed gradients so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = ids
            .iter()
            .filter_map(|id| self.tensors[id.0].grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let k = max_norm / norm;
            for id in ids {
                if let Some(g) = self.tensors[id.0].grad.as_mut() {
                    g.iter_mut().for_each(|x| *x *= k);
                }
            }
        }
        norm
    }

    /// Copies values of every parameter present in `other` under the same name.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, id) in &self.index {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(src) = other.id(name) {
                let src = other.get(src);
                let dst = &mut self.tensors[id.0];
                if src.shape() != dst.shape() {
                    return Err(Error::Checkpoint {
                        param: name.clone(),
                        message: format!("shape {:?} vs {:?}", src.shape(), dst.shape()),
                    });
                }
                dst.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}
