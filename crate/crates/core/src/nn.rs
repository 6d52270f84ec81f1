//! Named parameters and the handful of layers the model is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Gradients, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store, matching [`Graph::param_grads`] order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("checkpoint was written for config {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
    #[error("checkpoint has unknown parameter `{0}`")]
    Unexpected(String),
    #[error("parameter `{name}`: checkpoint shape {found:?} but model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            tensors: self
                .names
                .iter()
                .cloned()
                .zip(self.values.iter().cloned())
                .collect(),
        }
    }

    /// Replace every parameter with the checkpoint's copy. Names, shapes and
    /// the config hash must all agree.
    pub fn load_checkpoint(
        &mut self,
        ck: &Checkpoint,
        config_hash: &str,
    ) -> std::result::Result<(), LoadError> {
        let incoming: HashMap<&str, &Tensor> =
            ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if let Some((n, _)) = ck.tensors.iter().find(|(n, _)| !self.lookup.contains_key(n)) {
            return Err(LoadError::Unexpected(n.clone()));
        }
        for (name, value) in self.names.iter().zip(&self.values) {
            let t = incoming
                .get(name.as_str())
                .ok_or_else(|| LoadError::Missing(name.clone()))?;
            if t.shape() != value.shape() {
                return Err(LoadError::Shape {
                    name: name.clone(),
                    expected: value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        // after the shape checks, so a real mismatch names the parameter
        if ck.config_hash != config_hash {
            return Err(LoadError::ConfigHash {
                expected: config_hash.to_string(),
                found: ck.config_hash.clone(),
            });
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            *value = (*incoming[name.as_str()]).clone();
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameters from a [`ParamStore`].
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// Parameters become gradient-tracked leaves.
    pub fn train(params: &'a ParamStore) -> Self {
        Self::with_tape(params, Tape::new(), true)
    }

    /// Parameters become constants; nothing is differentiable.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self::with_tape(params, Tape::new(), false)
    }

    pub fn with_tape(params: &'a ParamStore, tape: Tape, trainable: bool) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Gradients aligned with the store; zeros for parameters never touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.bound
            .iter()
            .zip(self.params.values())
            .map(|(b, p)| match b {
                Some(v) => grads.get_or_zeros(*v, p.shape()),
                None => Tensor::zeros(p.shape()),
            })
            .collect()
    }
}

/// Weight initialisers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `std`, redrawn outside ±2σ.
    TruncNormal(f64),
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                Tensor::from_fn(shape, |_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
            }
        }
    }
}

pub const PROJ_INIT: Init = Init::TruncNormal(0.02);

/// `y = x · W + b` over the last dimension; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[in_dim, out_dim], rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `k`×`k` kernel, normal init with std `1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Init::TruncNormal(std).tensor(&[out_ch, in_ch, k, k], rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}
