//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] evaluates eagerly: every primitive computes its output at the
//! moment it is recorded, so values of intermediate nodes can be read back
//! while the graph is still being built (the transport plan of the JDOT
//! backend depends on this). [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only reference nodes recorded before it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and for the per-primitive gradient tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    AddRowBias,
    Add,
    Sub,
    Mul,
    MulScalar,
    Relu,
    Sigmoid,
    SoftmaxRows,
    Log,
    Clamp,
    Square,
    MeanAll,
    SumAll,
    MeanRows,
    Transpose,
    ConcatRows,
    GradientReversal,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    MeanAll(Var),
    SumAll(Var),
    MeanRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GradientReversal(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        self.push(Op::AddRowBias(x, bias), out, "add_row_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(Op::MulScalar(a, s), out, "mul_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).relu();
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sigmoid();
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), out, "softmax_rows")
    }

    /// Natural log; non-positive inputs are rejected as non-finite.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out, "log")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out, "clamp")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), out, "square")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean_all"));
        }
        let out = Tensor::scalar(t.mean());
        self.push(Op::MeanAll(a), out, "mean_all")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), out, "sum_all")
    }

    /// Column means, `n x k -> 1 x k`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let out = self.value(a).mean_rows();
        self.push(Op::MeanRows(a), out, "mean_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&values)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `-lambda` on the way back.
    pub fn gradient_reversal(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("gradient reversal lambda must be >= 0, got {lambda}")));
        }
        let out = self.value(a).clone();
        self.push(Op::GradientReversal(a, lambda), out, "gradient_reversal")
    }

    /// Records a primitive by kind over an input list.
    ///
    /// Scalar-parameterized kinds take their parameter from `scalar`
    /// (`mul_scalar` factor, gradient reversal lambda); `clamp` uses the
    /// probability bounds used by the losses.
    pub fn forward_primitive(&mut self, kind: PrimitiveKind, inputs: &[Var], scalar: f64) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("{kind:?} expects {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            PrimitiveKind::ConcatRows => {
                if inputs.is_empty() {
                    return Err(Error::Empty("concat_rows"));
                }
                self.concat_rows(inputs)
            }
            PrimitiveKind::MatMul | PrimitiveKind::AddRowBias | PrimitiveKind::Add | PrimitiveKind::Sub | PrimitiveKind::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    PrimitiveKind::MatMul => self.matmul(a, b),
                    PrimitiveKind::AddRowBias => self.add_row_bias(a, b),
                    PrimitiveKind::Add => self.add(a, b),
                    PrimitiveKind::Sub => self.sub(a, b),
                    _ => self.mul(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                match kind {
                    PrimitiveKind::MulScalar => self.mul_scalar(a, scalar),
                    PrimitiveKind::Relu => self.relu(a),
                    PrimitiveKind::Sigmoid => self.sigmoid(a),
                    PrimitiveKind::SoftmaxRows => self.softmax_rows(a),
                    PrimitiveKind::Log => self.log(a),
                    PrimitiveKind::Clamp => self.clamp(a, crate::losses::PROB_FLOOR, crate::losses::PROB_CEIL),
                    PrimitiveKind::Square => self.square(a),
                    PrimitiveKind::MeanAll => self.mean_all(a),
                    PrimitiveKind::SumAll => self.sum_all(a),
                    PrimitiveKind::MeanRows => self.mean_rows(a),
                    PrimitiveKind::Transpose => self.transpose(a),
                    PrimitiveKind::GradientReversal => self.gradient_reversal(a, scalar),
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Backpropagates from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::AddRowBias(x, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows());
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulScalar(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let gx = g.zip_map(x, "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let gx = g.zip_map(y, "sigmoid", |gi, yi| gi * yi * (1.0 - yi))?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let cols = y.cols();
                    let mut gx = Tensor::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Log(a) => {
                    let gx = g.zip_map(self.value(*a), "log", |gi, xi| gi / xi)?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = g.zip_map(self.value(*a), "clamp", |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::Square(a) => {
                    let gx = g.zip_map(self.value(*a), "square", |gi, xi| 2.0 * gi * xi)?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::MeanAll(a) => {
                    let x = self.value(*a);
                    let n = x.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(x.rows(), x.cols(), g.item() / n));
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(x.rows(), x.cols(), g.item()));
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows() as f64;
                    let mut gx = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            gx.set(r, c, g.get(0, c) / n);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        accumulate(&mut grads, p, g.select_rows(&idx));
                        offset += rows;
                    }
                }
                Op::GradientReversal(a, lambda) => accumulate(&mut grads, *a, g.scale(-lambda)),
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Maximum relative error between the analytic gradient and central differences.
///
/// `function` builds a scalar loss from leaves holding `params`. The error per
/// entry is `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(function: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = function(&mut tape, &vars).map_err(|_| Error::GradientCheckNonFinite { param: 0 })?;
    let grads = tape.backward(loss)?;

    let scalar_at = |values: &[Tensor], which: usize| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.leaf(p.clone())).collect();
        let l = function(&mut t, &vs).map_err(|_| Error::GradientCheckNonFinite { param: which })?;
        let v = t.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::GradientCheckNonFinite { param: which })
        }
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let shape = params[pi].shape();
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = scalar_at(&work, pi)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = scalar_at(&work, pi)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
