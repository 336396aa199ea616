//! Static computation graphs over [`Tensor`]s.
//!
//! A [`Graph`] is built once from named inputs, constants and primitive
//! operations, then evaluated any number of times against different
//! [`Bindings`]. Nodes can only reference nodes created before them, so the
//! insertion order is a topological order and the graph is acyclic by
//! construction. Evaluation never mutates the graph, which makes a built
//! graph safe to share between threads.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant(Arc<Tensor>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Broadcast(NodeId),
    Conv2d(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    NormAxis(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Broadcast(_) => "broadcast",
            Op::Conv2d(..) => "conv2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::NormAxis(..) => "norm_axis",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    grad_scale: f64,
}

/// Named tensors fed to a graph's inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings(BTreeMap<String, Tensor>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), value)
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Values(Vec<Tensor>);

impl Values {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.0[node.0]
    }

    /// Scalar value of `node`; panics if the node is not one-element.
    pub fn scalar(&self, node: NodeId) -> f64 {
        self.0[node.0]
            .item()
            .expect("scalar() called on a non-scalar node")
    }
}

/// Gradients of the output with respect to each graph input, keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    /// Names and shapes of all inputs in declaration order.
    pub fn inputs(&self) -> Vec<(&str, &[usize])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some((name.as_str(), n.shape.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// Multiplies the gradient that `node` sends to its operands by
    /// `factor`. Only useful as fault injection when testing gradient
    /// checkers; a factor other than 1 makes gradients wrong.
    pub fn scale_backward(&mut self, node: NodeId, factor: f64) {
        self.nodes[node.0].grad_scale = factor;
    }

    fn label(&self, id: NodeId, op: &Op) -> String {
        format!("{id} ({})", op.name())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            grad_scale: 1.0,
        });
        id
    }

    fn check(&self, node: NodeId) -> Result<()> {
        if node.0 >= self.nodes.len() {
            return Err(Error::shape(
                format!("{node}"),
                "node does not belong to this graph",
            ));
        }
        Ok(())
    }

    fn mismatch(&self, op: &Op, detail: String) -> Error {
        Error::shape(self.label(NodeId(self.nodes.len()), op), detail)
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        if self.inputs().iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate graph input `{name}`")));
        }
        if shape.contains(&0) {
            return Err(Error::shape(
                name,
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        Ok(self.push(Op::Input(name), shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(Arc::new(value)), shape)
    }

    fn elementwise(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(&op, format!("operands {sa:?} and {sb:?} differ")));
        }
        let shape = sa.to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Div(a, b), a, b)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    /// `factor * a`
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(Op::Scale(a, factor), a)
    }

    /// `a + offset`, elementwise.
    pub fn offset(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        self.unary(Op::Offset(a, offset), a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(a, slope), a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log(a), a)
    }

    /// `max(a, floor)`, elementwise.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.unary(Op::ClampMin(a, floor), a)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if self.shape(a).is_empty() {
            return Err(self.mismatch(&Op::Softmax(a), "softmax of a scalar".into()));
        }
        self.unary(Op::Softmax(a), a)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if self.shape(a).is_empty() {
            return Err(self.mismatch(&Op::LogSoftmax(a), "log-softmax of a scalar".into()));
        }
        self.unary(Op::LogSoftmax(a), a)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), Vec::new()))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Mean(a), Vec::new()))
    }

    fn axis_reduce(&mut self, op: Op, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let mut shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(self.mismatch(&op, format!("axis {axis} out of range for {shape:?}")));
        }
        shape[axis] = 1;
        Ok(self.push(op, shape))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(Op::SumAxis(a, axis), a, axis)
    }

    /// Euclidean norm along `axis`, keeping it with size 1.
    pub fn norm_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(Op::NormAxis(a, axis), a, axis)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let op = Op::MatMul(a, b);
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(&op, format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(op, shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let op = Op::Transpose(a);
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.mismatch(&op, format!("transpose needs rank 2, got {s:?}")));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(op, shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let op = Op::Reshape(a);
        let from: usize = self.shape(a).iter().product();
        let to: usize = shape.iter().product();
        if from != to || shape.contains(&0) {
            return Err(self.mismatch(
                &op,
                format!("cannot reshape {:?} to {shape:?}", self.shape(a)),
            ));
        }
        Ok(self.push(op, shape.to_vec()))
    }

    /// Broadcasts `a` to `shape`. `a` must be a scalar or have the same rank
    /// with every dimension either equal to the target or 1.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let op = Op::Broadcast(a);
        let src = self.shape(a);
        let ok = src.is_empty()
            || (src.len() == shape.len() && src.iter().zip(shape).all(|(&s, &t)| s == t || s == 1));
        if !ok || shape.contains(&0) {
            return Err(self.mismatch(&op, format!("cannot broadcast {src:?} to {shape:?}")));
        }
        Ok(self.push(op, shape.to_vec()))
    }

    /// Same-padded, stride-1 2D convolution of a `C×H×W` input with an
    /// `O×C×k×k` kernel (odd `k`), producing `O×H×W`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let op = Op::Conv2d(input, kernel);
        let (si, sk) = (self.shape(input), self.shape(kernel));
        let ok =
            si.len() == 3 && sk.len() == 4 && si[0] == sk[1] && sk[2] == sk[3] && sk[2] % 2 == 1;
        if !ok {
            return Err(self.mismatch(
                &op,
                format!("cannot convolve input {si:?} with kernel {sk:?}"),
            ));
        }
        let shape = vec![sk[0], si[1], si[2]];
        Ok(self.push(op, shape))
    }

    /// Evaluates every node. Bindings are never modified.
    pub fn forward(&self, bindings: &Bindings) -> Result<Values> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = |id: NodeId| &values[id.0];
            let out = match &node.op {
                Op::Input(name) => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            self.label(NodeId(i), &node.op),
                            format!(
                                "input `{name}` declared {:?} but bound {:?}",
                                node.shape,
                                t.shape()
                            ),
                        ));
                    }
                    t.clone()
                }
                Op::Constant(t) => (**t).clone(),
                Op::Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
                Op::Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
                Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
                Op::Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y),
                Op::Scale(a, s) => v(*a).map(|x| s * x),
                Op::Offset(a, c) => v(*a).map(|x| x + c),
                Op::LeakyRelu(a, slope) => v(*a).map(|x| if x > 0.0 { x } else { slope * x }),
                Op::Log(a) => v(*a).map(f64::ln),
                Op::ClampMin(a, floor) => v(*a).map(|x| x.max(*floor)),
                Op::Softmax(a) => softmax_rows(v(*a)),
                Op::LogSoftmax(a) => log_softmax_rows(v(*a)),
                Op::Sum(a) => Tensor::scalar(v(*a).sum()),
                Op::Mean(a) => Tensor::scalar(v(*a).sum() / v(*a).len() as f64),
                Op::SumAxis(a, axis) => sum_axis(v(*a), *axis),
                Op::NormAxis(a, axis) => sum_axis(&v(*a).map(|x| x * x), *axis).map(f64::sqrt),
                Op::MatMul(a, b) => matmul(v(*a), v(*b)),
                Op::Transpose(a) => transpose(v(*a)),
                Op::Reshape(a) => v(*a).clone().reshape(&node.shape)?,
                Op::Broadcast(a) => broadcast(v(*a), &node.shape),
                Op::Conv2d(x, k) => conv2d(v(*x), v(*k)),
            };
            values.push(out);
        }
        Ok(Values(values))
    }

    /// Forward pass followed by reverse accumulation from the designated
    /// scalar output.
    pub fn value_and_grad(&self, bindings: &Bindings) -> Result<(Values, Gradients)> {
        let out = self.output.ok_or(Error::NoOutput)?;
        if self.nodes[out.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out.0].shape.clone()));
        }
        let values = self.forward(bindings)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(Tensor::ones(&self.nodes[out.0].shape));

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Input(_) = node.op {
                adj[i] = Some(g);
                continue;
            }
            let g = if node.grad_scale != 1.0 {
                g.map(|x| x * node.grad_scale)
            } else {
                g
            };
            let v = |id: NodeId| values.get(id);
            let mut send = |id: NodeId, t: Tensor| match &mut adj[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Input(_) | Op::Constant(_) => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(v(*b), |gi, bi| gi * bi));
                    send(*b, g.zip_map(v(*a), |gi, ai| gi * ai));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (v(*a), v(*b));
                    send(*a, g.zip_map(vb, |gi, bi| gi / bi));
                    let gb = Tensor::from_fn(vb.shape(), |j| {
                        -g.data()[j] * va.data()[j] / (vb.data()[j] * vb.data()[j])
                    });
                    send(*b, gb);
                }
                Op::Scale(a, s) => send(*a, g.map(|x| s * x)),
                Op::Offset(a, _) => send(*a, g),
                Op::LeakyRelu(a, slope) => send(
                    *a,
                    g.zip_map(v(*a), |gi, x| if x > 0.0 { gi } else { slope * gi }),
                ),
                Op::Log(a) => send(*a, g.zip_map(v(*a), |gi, x| gi / x)),
                Op::ClampMin(a, floor) => send(
                    *a,
                    g.zip_map(v(*a), |gi, x| if x > *floor { gi } else { 0.0 }),
                ),
                Op::Softmax(a) => send(*a, softmax_backward(&g, values.get(NodeId(i)))),
                Op::LogSoftmax(a) => send(*a, log_softmax_backward(&g, values.get(NodeId(i)))),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(*a, Tensor::full(v(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let n = v(*a).len() as f64;
                    send(*a, Tensor::full(v(*a).shape(), g.data()[0] / n));
                }
                Op::SumAxis(a, _) => send(*a, broadcast(&g, v(*a).shape())),
                Op::NormAxis(a, _) => {
                    let x = v(*a);
                    let y = broadcast(values.get(NodeId(i)), x.shape());
                    let gb = broadcast(&g, x.shape());
                    let ga = Tensor::from_fn(x.shape(), |j| {
                        let n = y.data()[j];
                        if n > 0.0 {
                            gb.data()[j] * x.data()[j] / n
                        } else {
                            0.0
                        }
                    });
                    send(*a, ga);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (v(*a), v(*b));
                    send(*a, matmul(&g, &transpose(vb)));
                    send(*b, matmul(&transpose(va), &g));
                }
                Op::Transpose(a) => send(*a, transpose(&g)),
                Op::Reshape(a) => {
                    let shape = v(*a).shape().to_vec();
                    send(*a, g.reshape(&shape).expect("reshape preserves length"));
                }
                Op::Broadcast(a) => send(*a, unbroadcast(&g, v(*a).shape())),
                Op::Conv2d(x, k) => {
                    let (gx, gk) = conv2d_backward(&g, v(*x), v(*k));
                    send(*x, gx);
                    send(*k, gk);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input(name) = &node.op {
                let g = adj[i].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
                grads.insert(name.clone(), g);
            }
        }
        Ok((values, Gradients(grads)))
    }

    /// Gradient of the scalar output with respect to every input.
    pub fn backward(&self, bindings: &Bindings) -> Result<Gradients> {
        self.value_and_grad(bindings).map(|(_, g)| g)
    }

    /// Value of the designated scalar output.
    pub fn eval_output(&self, bindings: &Bindings) -> Result<f64> {
        let out = self.output.ok_or(Error::NoOutput)?;
        let values = self.forward(bindings)?;
        values
            .get(out)
            .item()
            .ok_or_else(|| Error::NonScalarOutput(self.nodes[out.0].shape.clone()))
    }
}

fn rows(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().expect("rank >= 1");
    (t.len() / cols, cols)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = rows(x);
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = rows(x);
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn softmax_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let (r, c) = rows(y);
    let mut out = vec![0.0; y.len()];
    for i in 0..r {
        let s = i * c..(i + 1) * c;
        let dot: f64 = g.data()[s.clone()]
            .iter()
            .zip(&y.data()[s.clone()])
            .map(|(a, b)| a * b)
            .sum();
        for j in s {
            out[j] = y.data()[j] * (g.data()[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let (r, c) = rows(y);
    let mut out = vec![0.0; y.len()];
    for i in 0..r {
        let s = i * c..(i + 1) * c;
        let total: f64 = g.data()[s.clone()].iter().sum();
        for j in s {
            out[j] = g.data()[j] - y.data()[j].exp() * total;
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data()[base + i];
            }
        }
    }
    let mut oshape = shape.to_vec();
    oshape[axis] = 1;
    Tensor::new(oshape, out).expect("reduced shape")
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

/// Source strides with zeros on broadcast dimensions.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    if src.is_empty() {
        return vec![0; target.len()];
    }
    strides(src)
        .into_iter()
        .zip(src)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect()
}

fn for_each_broadcast(src: &[usize], target: &[usize], mut f: impl FnMut(usize, usize)) {
    let bs = broadcast_strides(src, target);
    let total: usize = target.iter().product();
    let mut idx = vec![0usize; target.len()];
    let mut src_off = 0usize;
    for t in 0..total {
        f(t, src_off);
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            src_off += bs[d];
            if idx[d] < target[d] {
                break;
            }
            src_off -= bs[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn broadcast(x: &Tensor, target: &[usize]) -> Tensor {
    let mut out = vec![0.0; target.iter().product()];
    for_each_broadcast(x.shape(), target, |t, s| out[t] = x.data()[s]);
    Tensor::new(target.to_vec(), out).expect("broadcast shape")
}

fn unbroadcast(g: &Tensor, src: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(src);
    let data = out.data_mut();
    for_each_broadcast(src, g.shape(), |t, s| data[s] += g.data()[t]);
    out
}

/// Visits every (output pixel, input pixel) pair touched by kernel tap
/// `(ky, kx)` under same padding.
#[inline]
fn tap_ranges(
    h: usize,
    w: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) -> (isize, isize, std::ops::Range<usize>, std::ops::Range<usize>) {
    let dy = ky as isize - pad as isize;
    let dx = kx as isize - pad as isize;
    // kernels wider than the image leave some taps with nothing to visit
    let span = |dd: isize, n: usize| {
        let lo = (-dd).clamp(0, n as isize) as usize;
        let hi = (n as isize - dd).clamp(lo as isize, n as isize) as usize;
        lo..hi
    };
    (dy, dx, span(dy, h), span(dx, w))
}

fn conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let pad = ks / 2;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        let obase = oc * h * w;
        for ic in 0..c {
            let ibase = ic * h * w;
            for ky in 0..ks {
                for kx in 0..ks {
                    let wv = kd[((oc * c + ic) * ks + ky) * ks + kx];
                    let (dy, dx, ys, xs) = tap_ranges(h, w, pad, ky, kx);
                    if ys.is_empty() || xs.is_empty() {
                        continue;
                    }
                    let ix0 = (xs.start as isize + dx) as usize;
                    for y in ys {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut out[obase + y * w + xs.start..obase + y * w + xs.end];
                        let irow = &xd[ibase + iy * w + ix0..ibase + iy * w + ix0 + xs.len()];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, h, w], out).expect("conv shape")
}

fn conv2d_backward(g: &Tensor, x: &Tensor, k: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let pad = ks / 2;
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for oc in 0..o {
        let obase = oc * h * w;
        for ic in 0..c {
            let ibase = ic * h * w;
            for ky in 0..ks {
                for kx in 0..ks {
                    let kidx = ((oc * c + ic) * ks + ky) * ks + kx;
                    let wv = kd[kidx];
                    let (dy, dx, ys, xs) = tap_ranges(h, w, pad, ky, kx);
                    if ys.is_empty() || xs.is_empty() {
                        continue;
                    }
                    let ix0 = (xs.start as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in ys {
                        let iy = (y as isize + dy) as usize;
                        let grow = &gd[obase + y * w + xs.start..obase + y * w + xs.end];
                        let irange = ibase + iy * w + ix0..ibase + iy * w + ix0 + xs.len();
                        for ((gxv, &xv), &gv) in
                            gx[irange.clone()].iter_mut().zip(&xd[irange]).zip(grow)
                        {
                            *gxv += wv * gv;
                            acc += gv * xv;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("conv grad shape"),
        Tensor::new(k.shape().to_vec(), gk).expect("conv grad shape"),
    )
}
