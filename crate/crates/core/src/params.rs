//! Named parameter storage, trainability flags and the checkpoint archive.
//!
//! Checkpoints are safetensors archives of little-endian `f64` arrays. Free-form
//! string metadata (the model configuration as JSON, trainer state) rides in the
//! archive header. Adaptation parameters live under the `adaptation/` prefix so
//! they can be shipped and loaded without the base weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use crate::autograd::{Array, Graph, Var};
use crate::error::{Error, Result};

pub const ADAPTATION_PREFIX: &str = "adaptation/";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invariant(format!("unknown parameter `{name}`")))
    }

    pub fn set_value(&mut self, name: &str, value: Array) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invariant(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::invariant(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invariant(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.params.iter().zip(other.params.iter()) {
            if na != nb {
                return Err(Error::invariant(format!(
                    "parameter name mismatch: `{na}` vs `{nb}`"
                )));
            }
            if pa.value.shape() != pb.value.shape() {
                return Err(Error::invariant(format!(
                    "shape mismatch for `{na}`: {:?} vs {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf. Trainable parameters require
    /// gradients only when `with_grad` is set.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = g.leaf(p.value.clone(), with_grad && p.trainable);
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let bytes = self.to_bytes(metadata)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self, mut metadata: HashMap<String, String>) -> Result<Vec<u8>> {
        let trainable: Vec<&str> = self
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.as_str())
            .collect();
        metadata.insert("trainable".into(), serde_json::to_string(&trainable)?);
        let encoded: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(name, p)| {
                let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), bytes, p.value.shape().to_vec())
            })
            .collect();
        let views = encoded
            .iter()
            .map(|(name, bytes, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, HashMap<String, String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, HashMap<String, String>)> {
        let ck = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(ck)?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let tensors = SafeTensors::deserialize(bytes).map_err(ck)?;
        let mut store = ParamStore::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!("`{name}` is not f64")));
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Array::from_shape_vec(IxDyn(view.shape()), data)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            store.insert(name, value);
        }
        if let Some(t) = metadata.get("trainable") {
            let names: Vec<String> = serde_json::from_str(t)?;
            for n in names {
                if let Some(p) = store.get_mut(&n) {
                    p.trainable = true;
                }
            }
        }
        Ok((store, metadata))
    }

    /// The subset of parameters in the `adaptation/` namespace.
    pub fn adaptation_only(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(ADAPTATION_PREFIX))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// Overwrites values from `other` for every name present in both; names in
    /// `other` that are unknown here are an error.
    pub fn overlay(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &other.params {
            self.set_value(name, p.value.clone())?;
        }
        Ok(())
    }
}

/// Graph variables for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub(crate) fn zeros(shape: &[usize]) -> Array {
    Array::zeros(IxDyn(shape))
}
