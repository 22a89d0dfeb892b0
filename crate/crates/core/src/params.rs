//! Named parameters, non-learnable buffers and deterministic initialization.
//!
//! Every tensor is initialized from its own ChaCha8 stream seeded with
//! `seed ^ fnv1a64(name)`, so the values a parameter receives depend only on
//! the run seed and its name, never on construction order.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Non-learnable state such as running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Constant(f64),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic generator for a named stream under a run seed.
pub fn named_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(stream.as_bytes()))
}

pub fn init_tensor<T: Scalar>(dims: Dims, init: Init, seed: u64, name: &str) -> Tensor<T> {
    match init {
        Init::Constant(v) => Tensor::full(dims, T::from_f64_lossy(v)),
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = named_rng(seed, name);
            Tensor::from_fn(dims, |_| T::from_f64_lossy(normal.sample(&mut rng)))
        }
    }
}

/// Owner of all parameters and buffers of one model instance.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    seed: u64,
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(ParamId),
    Buffer(BufferId),
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate tensor name '{name}'")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, dims: Dims, init: Init) -> Result<ParamId> {
        let id = ParamId(self.params.len());
        self.claim(name, Slot::Param(id))?;
        self.params.push(Parameter {
            name: name.to_string(),
            value: init_tensor(dims, init, self.seed, name),
            grad: None,
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let id = BufferId(self.buffers.len());
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(id)) => Some(*id),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(id)) => Some(*id),
            _ => None,
        }
    }

    /// Total learnable scalar count.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Learnable scalar count over parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Adds `grad` into the parameter's gradient slot.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(a, &b)| *a += b),
            None => p.grad = Some(grad.clone()),
        }
    }

    /// Named tensors in storage order: parameters first, then buffers.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    /// Overwrites the tensor called `name`, which must already exist with the same dims.
    pub fn set_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .names
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown tensor '{name}'")))?;
        let target = match slot {
            Slot::Param(id) => &mut self.params[id.0].value,
            Slot::Buffer(id) => &mut self.buffers[id.0].value,
        };
        if target.dims() != value.dims() {
            return Err(Error::Invalid(format!(
                "tensor '{name}' has dims {:?}, got {:?}",
                target.dims(),
                value.dims()
            )));
        }
        *target = value;
        Ok(())
    }

    pub fn get_named(&self, name: &str) -> Option<&Tensor<T>> {
        match self.names.get(name)? {
            Slot::Param(id) => Some(&self.params[id.0].value),
            Slot::Buffer(id) => Some(&self.buffers[id.0].value),
        }
    }

    /// Same names and ids, converted element type; gradients dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(1);
        s.add_param("a.weight", [1, 1, 1, 1], Init::Constant(0.0)).unwrap();
        assert!(s.add_param("a.weight", [1, 1, 1, 1], Init::Constant(0.0)).is_err());
        assert!(s.add_buffer("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::<f32>::new(9);
        let mut b = ParamStore::<f32>::new(9);
        let k = Init::Kaiming { fan_in: 27 };
        a.add_param("x", [4, 3, 3, 3], k).unwrap();
        let ay = a.add_param("y", [4, 3, 3, 3], k).unwrap();
        let by = b.add_param("y", [4, 3, 3, 3], k).unwrap();
        assert_eq!(a.value(ay), b.value(by));
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        let t: Tensor<f64> = init_tensor([64, 64, 3, 3], Init::Kaiming { fan_in: 576 }, 3, "w");
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3e-3, "{mean}");
        assert!((var / (2.0 / 576.0) - 1.0).abs() < 0.05, "{var}");
    }
}
