use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// How a parameter is (re-)initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    /// Normal with a fixed standard deviation.
    Normal { std: f32 },
    Constant(f32),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub init: Init,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Named trainable parameters plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    buffers: BTreeMap<String, Vec<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and initialises it from a stream derived from
    /// `(seed, name)`, so values do not depend on registration order.
    pub fn add(&mut self, name: &str, shape: [usize; 4], init: Init, decay: bool, seed: u64) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let mut p = Param {
            name: name.to_string(),
            value: Tensor::zeros(shape),
            grad: vec![0.0; shape.iter().product()],
            init,
            decay,
        };
        fill_init(&mut p, seed);
        self.params.push(p);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_buffer(&mut self, name: &str, value: Vec<f32>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffer(&self, name: &str) -> &[f32] {
        &self.buffers[name]
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Vec<f32> {
        self.buffers.get_mut(name).expect("unknown buffer")
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Re-draws every parameter whose name starts with one of `prefixes`,
    /// and resets matching buffers to their initial state.
    pub fn reinit_prefixed(&mut self, prefixes: &[&str], seed: u64) {
        let hit = |n: &str| prefixes.iter().any(|p| n.starts_with(p));
        for p in &mut self.params {
            if hit(&p.name) {
                fill_init(p, seed);
            }
        }
        for (name, buf) in self.buffers.iter_mut() {
            if hit(name) {
                let v = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                buf.iter_mut().for_each(|x| *x = v);
            }
        }
    }

    /// Copies values (and buffers) for every name in `other` that starts
    /// with `prefix`. Shapes must agree.
    pub fn copy_prefixed_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (_, src) in other.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            let dst = self
                .by_name_mut(&src.name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {} missing in target", src.name)))?;
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    src.name,
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
            copied += 1;
        }
        for (name, buf) in other.buffers.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("buffer {name} missing in target")))?;
            if dst.len() != buf.len() {
                return Err(Error::Checkpoint(format!("buffer {name} length mismatch")));
            }
            dst.clone_from(buf);
        }
        Ok(copied)
    }

    /// L2 norm of the gradients of parameters whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

fn fill_init(p: &mut Param, seed: u64) {
    let mut r = rng::derive(seed, &[rng::tag("param-init"), rng::tag(&p.name)]);
    let data = p.value.data_mut();
    match p.init {
        Init::Constant(v) => data.iter_mut().for_each(|x| *x = v),
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            data.iter_mut().for_each(|x| *x = normal.sample(&mut r) as f32);
        }
        Init::Normal { std } => {
            let normal = Normal::new(0.0, std as f64).expect("finite std");
            data.iter_mut().for_each(|x| *x = normal.sample(&mut r) as f32);
        }
    }
}
