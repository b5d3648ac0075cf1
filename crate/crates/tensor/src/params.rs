//! Named parameter storage shared across forward passes.
//!
//! Parameters live outside any [`crate::Graph`]; each forward pass binds the
//! ones it needs as leaves via [`crate::Graph::param`]. Names are dotted
//! paths whose first component encodes the frozen/trainable partition:
//! `frozen.vit.*` and `frozen.txt.*` are never optimized, `train.*` is.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::numel;

#[derive(Clone, Debug)]
pub struct Param<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub trainable: bool,
}

/// Ordered map of named parameters. BTreeMap keeps iteration (and therefore
/// checkpoints, gradient reduction, and optimizer traversal) deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    params: BTreeMap<String, Param<F>>,
}

/// True for names the frozen/trainable partition marks as frozen.
pub fn is_frozen_name(name: &str) -> bool {
    name.starts_with("frozen.")
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Insert a parameter; trainability is derived from the name prefix.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) -> Result<()> {
        if data.len() != numel(&shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                numel: 0,
            });
        }
        let trainable = !is_frozen_name(name);
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                data,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Flip the trainable flag of every `frozen.*` parameter. Used once by
    /// contrastive pre-alignment, which trains the encoders before freezing
    /// them for good.
    pub fn set_frozen_trainable(&mut self, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if is_frozen_name(name) {
                p.trainable = trainable;
            }
        }
    }

    /// Byte snapshot of every frozen parameter, in name order. Two snapshots
    /// compare equal iff the frozen weights are bitwise identical.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in self.params.iter() {
            if is_frozen_name(name) {
                out.extend_from_slice(name.as_bytes());
                out.push(0);
                for v in &p.data {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
        out
    }
}
