//! Named parameter storage shared by every network component.
//!
//! All parameters live in [`Var`]s so checkpoint loading can update them in
//! place. Frozen parameters are handed to modules as detached tensors: they
//! share storage with their `Var` but never enter the autodiff graph, so a
//! backward pass cannot produce a gradient for them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::container::{HostTensor, TensorFile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
}

impl Init {
    /// PyTorch-style default for linear and conv layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }
}

struct Param {
    var: Var,
    trainable: bool,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Param>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.params.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Random stream used for initialization; exposed so owners can draw
    /// extra seeded values in construction order.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn make(&mut self, name: &str, dims: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let n: usize = dims.iter().product();
        let values = init.sample(n, &mut self.rng);
        self.register(name, dims, values, trainable)
    }

    fn register(&mut self, name: &str, dims: &[usize], values: Vec<f64>, trainable: bool) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Registers a trainable parameter and returns its tracked tensor.
    pub fn trainable(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.make(name, dims, init, true)?.as_tensor().clone())
    }

    /// Registers a frozen parameter and returns a detached view of it.
    pub fn frozen(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.make(name, dims, init, false)?.as_detached_tensor())
    }

    /// Registers a frozen parameter drawn from a caller-owned stream.
    pub fn frozen_from(
        &mut self,
        name: &str,
        dims: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let values = init.sample(dims.iter().product(), rng);
        Ok(self.register(name, dims, values, false)?.as_detached_tensor())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(|p| p.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_vars(&self) -> Vec<(&str, &Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.as_str(), &p.var))
            .collect()
    }

    pub fn frozen_vars(&self) -> Vec<(&str, &Var)> {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.as_str(), &p.var))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|p| &p.var)
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn num_total(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Re-draws a parameter in place.
    pub fn reinit(&mut self, name: &str, init: Init) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .var
            .clone();
        let values = init.sample(var.elem_count(), &mut self.rng);
        let t = Tensor::from_vec(values, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Overwrites a parameter in place with a tensor of the same shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, found {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over the names and f32 contents of every frozen parameter.
    pub fn frozen_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.frozen_vars() {
            h.update(name.as_bytes());
            let data = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Writes every parameter into `file` under `prefix`.
    pub fn export(&self, prefix: &str, file: &mut TensorFile) -> Result<()> {
        for (name, p) in &self.params {
            file.insert(format!("{prefix}{name}"), HostTensor::from_tensor(p.var.as_tensor())?);
        }
        Ok(())
    }

    /// Loads the selected parameters from `file` (names under `prefix`). All
    /// names and shapes are validated before anything is written, so a failed
    /// load leaves the store untouched.
    pub fn import(&self, prefix: &str, file: &TensorFile, which: Selection) -> Result<()> {
        let mut problems = Vec::new();
        let mut staged = Vec::new();
        for (name, p) in self.params.iter().filter(|(_, p)| which.admits(p.trainable)) {
            let key = format!("{prefix}{name}");
            match file.get(&key) {
                None => problems.push(format!("{key}: missing")),
                Some(t) if t.shape != p.var.dims() => problems.push(format!(
                    "{key}: expected shape {:?}, found {:?}",
                    p.var.dims(),
                    t.shape
                )),
                Some(t) => staged.push((&p.var, t)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::WeightMismatch(problems));
        }
        for (var, t) in staged {
            var.set(&t.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    All,
    Frozen,
    Trainable,
}

impl Selection {
    fn admits(self, trainable: bool) -> bool {
        match self {
            Selection::All => true,
            Selection::Frozen => !trainable,
            Selection::Trainable => trainable,
        }
    }
}
