//! Named trainable parameters.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// How a freshly registered parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// He-normal with the given fan-in: `N(0, 2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
}

/// Registry of parameters with unique names, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    uid: u32,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
    /// When false, the tape records this store's parameters as constants.
    pub trainable: bool,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            trainable: true,
        }
    }

    pub fn add(&mut self, name: &str, dims: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::ones(dims),
            Init::Const(c) => Tensor::full(dims, T::of(c)),
            Init::HeNormal { fan_in } => Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Normal { std } => Tensor::randn(dims, std, rng),
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let index = self.params.len();
        self.by_name.insert(name.to_string(), index);
        self.params.push(Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(value.dims()),
            value,
        });
        ParamId {
            store: self.uid,
            index: index as u32,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        debug_assert!(self.owns(id), "parameter id from another store");
        &self.params[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        debug_assert!(self.owns(id), "parameter id from another store");
        &mut self.params[id.index()]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId {
            store: self.uid,
            index: i as u32,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|i| ParamId {
            store: self.uid,
            index: i as u32,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same names and values converted to another dtype, with the same ids.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: self.uid,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
            trainable: self.trainable,
        }
    }

    /// Adds `N(0, std²)` noise to every value; used to leave zero-initialized
    /// branches before gradient checks.
    pub fn perturb(&mut self, std: f64, rng: &mut impl Rng) {
        for p in &mut self.params {
            let noise = Tensor::<T>::randn(p.value.dims(), std, rng);
            p.value.add_assign(&noise);
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every stored name must be
    /// present with matching dims.
    pub fn load_values<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<()> {
        for p in &mut self.params {
            let v = lookup(&p.name)
                .ok_or_else(|| Error::MissingArtifact(format!("parameter {}", p.name)))?;
            if v.dims() != p.value.dims() {
                return Err(Error::shape(
                    "load_values",
                    format!("{}: {:?} vs {:?}", p.name, v.dims(), p.value.dims()),
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
