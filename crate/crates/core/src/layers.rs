//! Parameter declarations and the plain convolutional building blocks.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Negative slope of the leaky ReLU used between convolutions.
pub const ACTIVATION_SLOPE: f64 = 0.1;

/// Gain applied to He init inside residual branches, so deep residual stacks start near identity.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// How a parameter tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `gain * sqrt(2 / fan_in)`.
    He(f64),
    Zeros,
}

/// Name, shape and initialisation of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Product of every extent but the first.
    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

/// Specs for a `k×k` convolution `c_in -> c_out` named `prefix.weight` / `prefix.bias`.
pub fn conv_specs(prefix: &str, c_in: usize, c_out: usize, k: usize, weight_init: Init) -> Vec<ParamSpec> {
    vec![
        ParamSpec { name: format!("{prefix}.weight"), shape: vec![c_out, c_in, k, k], init: weight_init },
        ParamSpec { name: format!("{prefix}.bias"), shape: vec![c_out], init: Init::Zeros },
    ]
}

/// Parameters recorded on a graph, looked up by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn activate<T: Float>(g: &Graph<T>, x: Var) -> Result<Var> {
    g.leaky_relu(x, T::from_f64(ACTIVATION_SLOPE))
}

/// A bound square convolution with "same" padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
}

impl Conv {
    pub fn bind(params: &Bound, prefix: &str) -> Result<Conv> {
        Ok(Conv { weight: params.get(&format!("{prefix}.weight"))?, bias: params.get(&format!("{prefix}.bias"))? })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let k = g.shape(self.weight)[2];
        g.conv2d(x, self.weight, Some(self.bias), 1, k / 2)
    }
}

/// `x + conv2(act(conv1(x)))`, channel count preserved.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
        let mut v = conv_specs(&format!("{prefix}.conv1"), channels, channels, 3, Init::He(RESIDUAL_GAIN));
        v.extend(conv_specs(&format!("{prefix}.conv2"), channels, channels, 3, Init::He(RESIDUAL_GAIN)));
        v
    }

    pub fn bind(params: &Bound, prefix: &str) -> Result<ResBlock> {
        Ok(ResBlock {
            conv1: Conv::bind(params, &format!("{prefix}.conv1"))?,
            conv2: Conv::bind(params, &format!("{prefix}.conv2"))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let channels = g.shape(self.conv1.weight)[1];
        let xs = g.shape(x);
        if xs.len() != 3 || xs[0] != channels {
            return Err(Error::Shape(format!("res block expects {channels} channels, got {xs:?}")));
        }
        let h = self.conv1.forward(g, x)?;
        let h = activate(g, h)?;
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Applies a stack of residual blocks in order.
pub fn res_stack<T: Float>(g: &Graph<T>, blocks: &[ResBlock], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x)?;
    }
    Ok(x)
}
