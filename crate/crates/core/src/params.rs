//! Named trainable parameters.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::{fmath, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, fans taken from the last two axes.
    Xavier,
    Zeros,
    Ones,
}

/// Parameters in registration order. The order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.len() {
                    0 => (1, 1),
                    1 => (shape[0], 1),
                    n => (shape[n - 2], shape[n - 1]),
                };
                let limit = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
                Tensor::from_fn(shape, |_| F::of(rng.random_range(-limit..limit)))
            }
        };
        self.insert(name, value)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds `grads` into the stored gradient accumulators.
    pub fn accumulate(&mut self, grads: &crate::graph::Grads<F>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.raw(ParamId(i)) {
                for (acc, &x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let total = self
            .params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>();
        fmath::sqrt(total)
    }

    /// Copy of the store in another precision; gradients reset to zero.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .index
                .get(&p.name)
                .map(|&i| &other.params[i])
                .ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
