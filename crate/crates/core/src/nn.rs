//! Dense layers, Glorot initialization and the SGD/Adam optimizers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, activation }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Parameters of a stack of affine layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Leaf handles of a network's parameters on one tape, `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct Binding {
    params: Vec<(Var, Var)>,
}

impl Binding {
    /// Collects the gradient of every parameter in layer order (weight, bias, weight, ...).
    pub fn gradients(&self, grads: &Gradients) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (i, &(w, b)) in self.params.iter().enumerate() {
            out.push(grads.get(w).cloned().ok_or(Error::MissingGradient { index: 2 * i })?);
            out.push(grads.get(b).cloned().ok_or(Error::MissingGradient { index: 2 * i + 1 })?);
        }
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.params.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_network(spec: &[LayerSpec], seed: u64) -> Result<Network> {
    if spec.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for (i, l) in spec.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::invalid(format!("layer {i} has a zero dimension")));
        }
    }
    for pair in spec.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::ShapeMismatch {
                op: "init_network",
                left: (pair[0].in_dim, pair[0].out_dim),
                right: (pair[1].in_dim, pair[1].out_dim),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .iter()
        .map(|l| {
            let limit = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            let data = (0..l.in_dim * l.out_dim).map(|_| rng.random_range(-limit..limit)).collect();
            Layer {
                weight: Tensor::from_raw(l.in_dim, l.out_dim, data),
                bias: Tensor::zeros(1, l.out_dim),
                activation: l.activation,
            }
        })
        .collect();
    Ok(Network { layers })
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => tape.softmax_rows(x),
        Activation::Identity => Ok(x),
    }
}

fn activate_value(x: Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Relu => x.relu(),
        Activation::Sigmoid => x.sigmoid(),
        Activation::Softmax => x.softmax_rows(),
        Activation::Identity => x,
    }
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::ShapeMismatch {
                    op: "network",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        for l in &layers {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::ShapeMismatch {
                    op: "network",
                    left: l.weight.shape(),
                    right: l.bias.shape(),
                });
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 2
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let params = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        Binding { params }
    }

    /// Forward pass that also returns the last layer's pre-activation output.
    pub fn forward_with_logits(&self, binding: &Binding, x: Var, tape: &mut Tape) -> Result<(Var, Var)> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_network",
                left: tape.value(x).shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let mut h = x;
        let mut pre = x;
        for (layer, &(w, b)) in self.layers.iter().zip(&binding.params) {
            let z = tape.matmul(h, w)?;
            pre = tape.add_row_bias(z, b)?;
            h = activate(tape, pre, layer.activation)?;
        }
        Ok((pre, h))
    }

    pub fn forward(&self, binding: &Binding, x: Var, tape: &mut Tape) -> Result<Var> {
        self.forward_with_logits(binding, x, tape).map(|(_, out)| out)
    }

    /// Tape-free evaluation.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if h.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "apply",
                left: h.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        for layer in &self.layers {
            h = activate_value(h.matmul(&layer.weight)?.add_row(&layer.bias)?, layer.activation);
        }
        Ok(h)
    }

    /// Tape-free evaluation returning the last pre-activation.
    pub fn apply_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            h = if i == last { z } else { activate_value(z, layer.activation) };
        }
        Ok(h)
    }
}

/// Binds `params` to `tape` and runs the forward pass on `x`.
pub fn forward_network(params: &Network, x: Var, tape: &mut Tape) -> Result<(Var, Binding)> {
    let binding = params.bind(tape);
    let out = params.forward(&binding, x, tape)?;
    Ok((out, binding))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {learning_rate}")));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` must hold one tensor per parameter in [`Binding::gradients`] order.
    pub fn step(&mut self, params: &mut Network, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.num_tensors() {
            return Err(Error::MissingGradient { index: grads.len() });
        }
        for (p, g) in params.tensors_mut().zip(grads) {
            p.check_same_shape(g, "optimizer_step")?;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.learning_rate;
                for (p, g) in params.tensors_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                let lr = self.learning_rate;
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        if params.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "optimizer_step" })
        }
    }
}

/// Convenience wrapper matching the free-function form of the optimizer update.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut Network, grads: &[Tensor]) -> Result<()> {
    state.step(params, grads)
}
