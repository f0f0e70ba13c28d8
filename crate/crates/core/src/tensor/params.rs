use indexmap::IndexMap;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameters in insertion order. The order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

/// Tape handles for every parameter of a store, by name.
pub type Bindings = IndexMap<String, Var>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::ParamMismatch {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every entry of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Overwrites values in place; every name in `other` must exist here with
    /// the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in &other.params {
            let slot = self.params.get_mut(name).ok_or_else(|| Error::ParamMismatch {
                name: name.clone(),
                detail: "not present in target".into(),
            })?;
            if slot.shape() != value.shape() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?} vs expected {:?}", value.shape(), slot.shape()),
                });
            }
            *slot = value.clone();
        }
        Ok(())
    }

    /// Checks that `self` has exactly the names and shapes of `expected`,
    /// reporting the first mismatch in `expected` order.
    pub fn check_layout(&self, expected: &ParamStore) -> Result<()> {
        for (name, value) in &expected.params {
            match self.params.get(name) {
                None => {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != value.shape() => {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        detail: format!("shape {:?} vs expected {:?}", t.shape(), value.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.params.contains_key(*k)) {
            return Err(Error::ParamMismatch {
                name: extra.clone(),
                detail: "not expected by configuration".into(),
            });
        }
        Ok(())
    }

    /// Records every parameter on `tape`; `trainable` decides which ones
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bindings {
        self.params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    /// Gradients from the last backward pass, zero-filled for parameters the
    /// pass did not reach.
    pub fn gradients(&self, tape: &Tape, bindings: &Bindings) -> IndexMap<String, Vec<f32>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = bindings
                    .get(k)
                    .and_then(|&var| tape.grad(var))
                    .map_or_else(|| vec![0.0; v.numel()], <[f32]>::to_vec);
                (k.clone(), g)
            })
            .collect()
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        self.params.get_mut(name).map(|t| &mut t.data)
    }

    /// Concatenated little-endian bytes of every value, in order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.params.values().flat_map(|t| t.to_le_bytes()).collect()
    }
}

/// Looks up a binding, with a named error when absent.
pub(crate) fn bound(bindings: &Bindings, name: &str) -> Result<Var> {
    bindings.get(name).copied().ok_or_else(|| Error::ParamMismatch {
        name: name.to_string(),
        detail: "missing".into(),
    })
}
