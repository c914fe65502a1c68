//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! are appended in execution order and [`Tape::backward`] replays them in exact
//! reverse order. Gradients only flow into nodes that depend on a trainable
//! leaf, so data inputs never pay for their own gradients.
//!
//! [`Tape::fork`] evaluates independent sub-graphs (one child tape each),
//! possibly concurrently, and joins them by summation in branch order.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Float, Tensor};

/// Handle to a node of one specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Branch {
    tape: Tape,
    inputs: Vec<Var>,
    output: Var,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var),
    /// `z * h + (1 - z) * c`
    GruBlend { z: Var, h: Var, c: Var },
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        strides: Vec<usize>,
    },
    AvgPool { input: Var, axis: usize, stride: usize },
    Select { input: Var, axis: usize, index: usize },
    Stack { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    FlattenChannelsLast(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Slice { input: Var, start: usize },
    Softmax(Var),
    CrossEntropy { probs: Var, target: usize },
    Sum(Var),
    AddN(Vec<Var>),
    Fork { parents: Vec<Var>, branches: Vec<Branch> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Records a leaf; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.leaf_shared(Arc::new(value), trainable)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(Float::tanh);
        self.push(v, Op::Tanh(a), &[a], "tanh")
    }

    pub fn lrelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::lrelu);
        self.push(v, Op::LeakyRelu(a), &[a], "lrelu")
    }

    /// GRU state update `z * h + (1 - z) * c`.
    pub fn gru_blend(&mut self, z: Var, h: Var, c: Var) -> Result<Var> {
        let (zv, hv, cv) = (self.value(z), self.value(h), self.value(c));
        zv.expect_same_shape(hv)?;
        zv.expect_same_shape(cv)?;
        let data = zv
            .data()
            .iter()
            .zip(hv.data())
            .zip(cv.data())
            .map(|((&z, &h), &c)| z * h + (1.0 - z) * c)
            .collect();
        let v = Tensor::from_parts(zv.shape().to_vec(), data);
        self.push(v, Op::GruBlend { z, h, c }, &[z, h, c], "gru_blend")
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, strides: &[usize]) -> Result<Var> {
        let v = kernels::conv_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            strides,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            v,
            Op::Conv {
                input,
                weight,
                bias,
                strides: strides.to_vec(),
            },
            &parents,
            "conv",
        )
    }

    pub fn avg_pool(&mut self, input: Var, axis: usize, stride: usize) -> Result<Var> {
        let v = kernels::avg_pool_axis(self.value(input), axis, stride)?;
        self.push(v, Op::AvgPool { input, axis, stride }, &[input], "avg_pool")
    }

    pub fn select(&mut self, input: Var, axis: usize, index: usize) -> Result<Var> {
        let v = self.value(input).select(axis, index)?;
        self.push(v, Op::Select { input, axis, index }, &[input], "select")
    }

    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::stack(&parts, axis)?;
        self.push(
            v,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "stack",
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).clone().reshape(shape)?;
        self.push(v, Op::Reshape(input), &[input], "reshape")
    }

    pub fn flatten_channels_last(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input).flatten_channels_last();
        self.push(v, Op::FlattenChannelsLast(input), &[input], "flatten")
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let v = kernels::linear_forward(
            self.value(weight),
            self.value(input),
            bias.map(|b| self.value(b)),
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(v, Op::Linear { input, weight, bias }, &parents, "linear")
    }

    /// Contiguous range `start..start + len` of a vector.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 1 || start + len > x.len() || len == 0 {
            return Err(Error::shape(format!(
                "cannot slice {start}..{} from {:?}",
                start + len,
                x.shape()
            )));
        }
        let v = Tensor::from_vec(x.data()[start..start + len].to_vec());
        self.push(v, Op::Slice { input, start }, &[input], "slice")
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 1 {
            return Err(Error::shape(format!("softmax expects a vector, got {:?}", x.shape())));
        }
        let v = Tensor::from_vec(kernels::softmax(x.data()));
        self.push(v, Op::Softmax(input), &[input], "softmax")
    }

    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let v = Tensor::scalar(kernels::cross_entropy(self.value(probs).data(), target)?);
        self.push(v, Op::CrossEntropy { probs, target }, &[probs], "cross_entropy")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(input).sum());
        self.push(v, Op::Sum(input), &[input], "sum")
    }

    /// Elementwise sum of equally shaped inputs, accumulated in the given order.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("add_n of zero inputs"))?;
        let mut acc = self.value(first).clone();
        for &v in &inputs[1..] {
            acc.add_assign(self.value(v))?;
        }
        self.push(acc, Op::AddN(inputs.to_vec()), inputs, "add_n")
    }

    /// Builds `count` independent sub-graphs over shared `inputs` and sums their
    /// outputs in branch order. `build(branch, child_tape, child_inputs)` records
    /// one branch on its own tape; branches may run concurrently.
    pub fn fork<F>(&mut self, inputs: &[Var], count: usize, build: F) -> Result<Var>
    where
        F: Fn(usize, &mut Tape, &[Var]) -> Result<Var> + Sync,
    {
        if count == 0 {
            return Err(Error::shape("fork with zero branches"));
        }
        let shared: Vec<(Arc<Tensor>, bool)> = inputs
            .iter()
            .map(|&v| (Arc::clone(&self.nodes[v.0].value), self.nodes[v.0].needs_grad))
            .collect();
        let branches: Vec<Branch> = (0..count)
            .into_par_iter()
            .map(|b| {
                let mut tape = Tape::new();
                let child_inputs: Vec<Var> = shared
                    .iter()
                    .map(|(value, grad)| tape.leaf_shared(Arc::clone(value), *grad))
                    .collect();
                let output = build(b, &mut tape, &child_inputs)?;
                Ok(Branch {
                    tape,
                    inputs: child_inputs,
                    output,
                })
            })
            .collect::<Result<_>>()?;
        let mut acc = branches[0].tape.value(branches[0].output).clone();
        for br in &branches[1..] {
            acc.add_assign(br.tape.value(br.output))?;
        }
        self.push(
            acc,
            Op::Fork {
                parents: inputs.to_vec(),
                branches,
            },
            inputs,
            "fork",
        )
    }

    /// Gradients of a scalar `loss` with respect to every node that depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss is not recorded on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, Tensor::ones(self.shape(loss)))
    }

    /// Backpropagates an arbitrary output gradient `seed` from `output`.
    pub fn backward_seeded(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |d, v| d * v)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |d, v| d * v)?);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, |d, s| d * s * (1.0 - s))?),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, |d, t| d * (1.0 - t * t))?),
            Op::LeakyRelu(a) => {
                let x = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |d, v| if v >= 0.0 { d } else { kernels::LRELU_SLOPE * d })?,
                )
            }
            Op::GruBlend { z, h, c } => {
                let (zv, hv, cv) = (self.value(*z), self.value(*h), self.value(*c));
                if self.wants(*z) {
                    let dz = g
                        .data()
                        .iter()
                        .zip(hv.data())
                        .zip(cv.data())
                        .map(|((&d, &h), &c)| d * (h - c))
                        .collect();
                    accumulate(grads, *z, Tensor::from_parts(g.shape().to_vec(), dz));
                }
                if self.wants(*h) {
                    accumulate(grads, *h, g.zip_map(zv, |d, z| d * z)?);
                }
                if self.wants(*c) {
                    accumulate(grads, *c, g.zip_map(zv, |d, z| d * (1.0 - z))?);
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                strides,
            } => {
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(grads, *b, kernels::conv_backward_bias(&g));
                    }
                }
                if self.wants(*weight) {
                    let dw = kernels::conv_backward_weight(
                        self.value(*input),
                        self.shape(*weight),
                        &g,
                        strides,
                    )?;
                    accumulate(grads, *weight, dw);
                }
                if self.wants(*input) {
                    let dx = kernels::conv_backward_input(
                        self.shape(*input),
                        self.value(*weight),
                        &g,
                        strides,
                    )?;
                    accumulate(grads, *input, dx);
                }
            }
            Op::AvgPool { input, axis, stride } => {
                let dx = kernels::avg_pool_axis_backward(self.shape(*input), &g, *axis, *stride);
                accumulate(grads, *input, dx);
            }
            Op::Select { input, axis, index } => {
                let shape = self.shape(*input);
                let (outer, t, inner) = crate::tensor::split_at_axis(shape, *axis);
                let mut dx = match grads[input.0].take() {
                    Some(acc) => acc,
                    None => Tensor::zeros(shape),
                };
                let d = dx.data_mut();
                for o in 0..outer {
                    let base = (o * t + index) * inner;
                    for (dst, &v) in d[base..base + inner].iter_mut().zip(&g.data()[o * inner..]) {
                        *dst += v;
                    }
                }
                grads[input.0] = Some(dx);
            }
            Op::Stack { inputs, axis } => {
                for (k, &v) in inputs.iter().enumerate() {
                    if self.wants(v) {
                        accumulate(grads, v, g.select(*axis, k)?);
                    }
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(self.shape(*a))?),
            Op::FlattenChannelsLast(a) => {
                accumulate(grads, *a, Tensor::unflatten_channels_last(&g, self.shape(*a))?);
            }
            Op::Linear { input, weight, bias } => {
                let (dw, dx) = kernels::linear_backward(
                    self.value(*weight),
                    self.value(*input),
                    &g,
                    self.wants(*weight),
                    self.wants(*input),
                );
                if let Some(dw) = dw {
                    accumulate(grads, *weight, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(grads, *b, g);
                    }
                }
            }
            Op::Slice { input, start } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                dx.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                accumulate(grads, *input, dx);
            }
            Op::Softmax(a) => {
                let dot: Float = g.data().iter().zip(y.data()).map(|(&d, &p)| d * p).sum();
                accumulate(grads, *a, g.zip_map(y, |d, p| p * (d - dot))?);
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.value(*probs);
                let mut dp = Tensor::zeros(p.shape());
                dp.data_mut()[*target] = -g.data()[0] / (p.data()[*target] + kernels::LOG_EPS);
                accumulate(grads, *probs, dp);
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::AddN(inputs) => {
                for &v in inputs {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Fork { parents, branches } => {
                let per_branch: Vec<Vec<Option<Tensor>>> = branches
                    .par_iter()
                    .map(|br| {
                        let mut cg = br.tape.backward_seeded(br.output, g.clone())?;
                        Ok(br
                            .inputs
                            .iter()
                            .map(|&v| cg.grads[v.0].take())
                            .collect())
                    })
                    .collect::<Result<_>>()?;
                for branch_grads in per_branch {
                    for (&p, bg) in parents.iter().zip(branch_grads) {
                        if let Some(bg) = bg {
                            if self.wants(p) {
                                accumulate(grads, p, bg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
