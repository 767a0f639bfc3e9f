use std::collections::BTreeMap;

use rand::Rng as _;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Named parameters with their gradient slots and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    pub(crate) params: Vec<Param>,
    index: BTreeMap<String, usize>,
    pub(crate) step: u64,
}

fn round_f32(t: &mut Tensor) {
    for x in t.data_mut() {
        *x = *x as f32 as f64;
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        round_f32(&mut value);
        let zeros = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// He-style uniform init scaled by fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn add_he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.add_uniform(name, shape, bound, rng)
    }

    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access for tests and explicit initialisation. Values written
    /// here are rounded to `f32` precision by [`ParameterStore::round_values`].
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn round_values(&mut self) {
        for p in &mut self.params {
            round_f32(&mut p.value);
        }
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn coordinate_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn accumulate(&mut self, grads: &super::Gradients) {
        for (i, g) in grads.per_param.iter().enumerate() {
            if let Some(g) = g {
                for (a, b) in self.params[i].grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Copies values from `other` by name; both stores must hold exactly the
    /// same names and shapes.
    pub fn load_values(&mut self, other: &ParameterStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{}`", p.name)))?;
            let src = &other.params[src.0].value;
            if src.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
