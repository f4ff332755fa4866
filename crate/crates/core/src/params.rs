//! Named parameter tensors and their declared shapes.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    /// Glorot uniform.
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n = self.numel();
        let data: Vec<f64> = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn { fan_in, gain } => {
                let b = gain * (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), data).expect("spec shape")
    }
}

/// Weight and bias specs for a `k x k` convolution.
pub fn conv_specs(prefix: &str, c_in: usize, c_out: usize, k: usize, gain: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[c_out, c_in, k, k],
            Init::FanIn {
                fan_in: c_in * k * k,
                gain,
            },
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[c_out], Init::Zeros),
    ]
}

/// Weight (`[d_in, d_out]`) and bias specs for a dense layer.
pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros),
    ]
}

pub fn total_numel(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes every spec, drawing from `rng` in spec order.
    pub fn init(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.tensors.insert(spec.name.clone(), spec.materialize(rng));
        }
        store
    }

    /// Adds any spec that is not yet present.
    pub fn init_missing(&mut self, specs: &[ParamSpec], rng: &mut ChaCha8Rng) {
        for spec in specs {
            if !self.tensors.contains_key(&spec.name) {
                self.tensors.insert(spec.name.clone(), spec.materialize(rng));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that every spec is present with the declared shape.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "missing parameter `{}`",
                        spec.name
                    )))
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, model expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Places every parameter on the tape. `trainable` decides which leaves
    /// take gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), trainable(name))))
            .collect();
        Binding { vars }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
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
