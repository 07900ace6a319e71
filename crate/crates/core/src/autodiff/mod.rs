//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. Because a node
//! can only reference nodes that already exist, the tape is acyclic and a
//! single reverse sweep visits each node exactly once.
//!
//! Calling [`Graph::backward`] twice without [`Graph::reset_grads`]
//! accumulates into the stored gradients.

pub(crate) mod kernels;

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, broadcast_strides, conv_out_len, strides, Tensor};
use kernels::{ConvDims, MatmulDims};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var, MatmulDims),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Take(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    MaxPool(Var, Vec<usize>),
    Custom(Var, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// The operation record. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward pass(es), if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_raw(value, op, rg)
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let x = &nodes[a.0].value;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            return Tensor::new(x.shape().to_vec(), data);
        }
        let out = broadcast_shapes(x.shape(), y.shape())?;
        let sa = broadcast_strides(x.shape(), &out);
        let sb = broadcast_strides(y.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (xd, yd) = (x.data(), y.data());
        kernels::broadcast_for_each(&out, &sa, &sb, |o, i, j| data[o] = f(xd[i], yd[j]));
        Tensor::new(out, data)
    }

    /// Broadcasting addition.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let t = self.map_unary(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let t = self.map_unary(a, |x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.map_unary(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    /// Natural log of `max(x, floor)`; the derivative uses the same clamp.
    pub fn log_clamped(&self, a: Var, floor: f64) -> Var {
        let t = self.map_unary(a, |x| x.max(floor).ln());
        self.push(t, Op::Log(a, floor), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.map_unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let t = self.map_unary(a, kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let t = self.map_unary(a, f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    // ---- reductions --------------------------------------------------

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let t = {
            let x = self.value(a);
            check_axis(x.shape(), axis)?;
            let mut shape = x.shape().to_vec();
            let data = kernels::sum_axis(x.data(), &shape, axis);
            shape[axis] = 1;
            Tensor::new(shape, data)?
        };
        Ok(self.push(t, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, dims) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() < 2 || ys.len() < 2 || xs[xs.len() - 1] != ys[ys.len() - 2] {
                return Err(Error::Shape(format!("matmul of {xs:?} and {ys:?}")));
            }
            let (m, k, p) = (xs[xs.len() - 2], xs[xs.len() - 1], ys[ys.len() - 1]);
            let (xb, yb) = (&xs[..xs.len() - 2], &ys[..ys.len() - 2]);
            let batch = broadcast_shapes(xb, yb)
                .map_err(|_| Error::Shape(format!("matmul of {xs:?} and {ys:?}")))?;
            let dims = MatmulDims {
                a_batch_strides: broadcast_strides(xb, &batch),
                b_batch_strides: broadcast_strides(yb, &batch),
                batch,
                m,
                k,
                p,
            };
            let nb: usize = dims.batch.iter().product();
            let mut out = vec![0.0; nb * m * p];
            let (xd, yd) = (x.data(), y.data());
            dims.for_each_batch(|o, ao, bo| {
                kernels::gemm_acc(
                    &xd[ao..ao + m * k],
                    &yd[bo..bo + k * p],
                    &mut out[o * m * p..(o + 1) * m * p],
                    m,
                    k,
                    p,
                )
            });
            let mut shape = dims.batch.clone();
            shape.extend([m, p]);
            (Tensor::new(shape, out)?, dims)
        };
        Ok(self.push(t, Op::MatMul(a, b, dims), &[a, b]))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = {
            let x = self.value(a);
            let nd = x.ndim();
            let mut seen = vec![false; nd];
            if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Argument(format!(
                    "invalid permutation {perm:?} for shape {:?}",
                    x.shape()
                )));
            }
            let offs = kernels::permute_offsets(x.shape(), perm);
            let data = offs.iter().map(|&o| x.data()[o]).collect();
            Tensor::new(perm.iter().map(|&p| x.shape()[p]).collect(), data)?
        };
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Shape("transpose needs at least 2 axes".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts.first().ok_or_else(|| Error::Argument("empty concat".into()))?.0]
                .value
                .shape()
                .to_vec();
            check_axis(&first, axis)?;
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(Error::Shape(format!("concat of {first:?} with {s:?}")));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let x = &nodes[p.0].value;
                    let chunk = x.shape()[axis] * inner;
                    data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Gathers elements by flat offset into a tensor of the given shape.
    pub fn take(&self, a: Var, offsets: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = {
            let x = self.value(a);
            if let Some(&bad) = offsets.iter().find(|&&o| o >= x.len()) {
                return Err(Error::Argument(format!(
                    "offset {bad} out of range for {} elements",
                    x.len()
                )));
            }
            Tensor::new(shape.to_vec(), offsets.iter().map(|&o| x.data()[o]).collect())?
        };
        Ok(self.push(t, Op::Take(a, offsets), &[a]))
    }

    /// Adjoint of [`Graph::take`]: `out[offsets[i]] += src[i]` into a zero
    /// tensor of `shape`. Offsets may repeat.
    pub fn scatter_add(&self, src: Var, offsets: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = {
            let x = self.value(src);
            if offsets.len() != x.len() {
                return Err(Error::Argument(format!(
                    "{} scatter offsets for {} elements",
                    offsets.len(),
                    x.len()
                )));
            }
            let mut out = Tensor::zeros(shape);
            let n = out.len();
            if let Some(&bad) = offsets.iter().find(|&&o| o >= n) {
                return Err(Error::Argument(format!("offset {bad} out of range for {n} elements")));
            }
            let data = out.data_mut();
            for (&o, v) in offsets.iter().zip(x.data()) {
                data[o] += v;
            }
            out
        };
        Ok(self.push(t, Op::Scatter(src, offsets), &[src]))
    }

    // ---- normalisation -----------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let t = {
            let x = self.value(a);
            check_axis(x.shape(), axis)?;
            Tensor::new(x.shape().to_vec(), kernels::softmax(x.data(), x.shape(), axis))?
        };
        Ok(self.push(t, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let t = {
            let x = self.value(a);
            check_axis(x.shape(), axis)?;
            Tensor::new(x.shape().to_vec(), kernels::log_softmax(x.data(), x.shape(), axis))?
        };
        Ok(self.push(t, Op::LogSoftmax(a, axis), &[a]))
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of `x[B,Cin,L]` with `w[Cout,Cin,k]`, output `[B,Cout,L']`
    /// where `L' = floor((L + 2*padding - k) / stride) + 1`.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (t, dims) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
                return Err(Error::Shape(format!("conv1d input {xs:?} with kernel {ws:?}")));
            }
            if stride == 0 {
                return Err(Error::Argument("conv1d stride must be >= 1".into()));
            }
            let out_len = conv_out_len(xs[2], ws[2], stride, padding).ok_or_else(|| {
                Error::Shape(format!(
                    "kernel {} longer than padded input {}",
                    ws[2],
                    xs[2] + 2 * padding
                ))
            })?;
            let dims = ConvDims {
                batch: xs[0],
                cin: xs[1],
                len: xs[2],
                cout: ws[0],
                kernel: ws[2],
                stride,
                padding,
                out_len,
            };
            let bias_data = match bias {
                Some(b) => {
                    let bv = &nodes[b.0].value;
                    if bv.shape() != [dims.cout] {
                        return Err(Error::Shape(format!(
                            "conv1d bias {:?} for {} output channels",
                            bv.shape(),
                            dims.cout
                        )));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let out = kernels::conv1d(xv.data(), wv.data(), bias_data, &dims);
            (Tensor::new(vec![dims.batch, dims.cout, out_len], out)?, dims)
        };
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(t, Op::Conv1d { x, w, bias, dims }, &parents))
    }

    /// Max pooling over the last axis. Padding never wins a window.
    pub fn max_pool1d(&self, a: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (t, arg) = {
            let x = self.value(a);
            let shape = x.shape().to_vec();
            let len = *shape.last().expect("non-empty shape");
            if kernel == 0 || stride == 0 || padding >= kernel {
                return Err(Error::Argument(format!(
                    "max_pool1d kernel {kernel}, stride {stride}, padding {padding}"
                )));
            }
            let out_len = conv_out_len(len, kernel, stride, padding)
                .ok_or_else(|| Error::Shape(format!("pool kernel {kernel} exceeds input {len}")))?;
            let rows = x.len() / len;
            let (out, arg) = kernels::max_pool1d(x.data(), rows, len, kernel, stride, padding, out_len);
            let mut oshape = shape;
            *oshape.last_mut().unwrap() = out_len;
            (Tensor::new(oshape, out)?, arg)
        };
        Ok(self.push(t, Op::MaxPool(a, arg), &[a]))
    }

    /// Elementwise op with a caller-supplied forward and backward.
    ///
    /// `backward(input, output, upstream)` returns the gradient w.r.t. input.
    pub fn custom_unary(
        &self,
        a: Var,
        forward: impl Fn(f64) -> f64,
        backward: impl Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + 'static,
    ) -> Var {
        let t = self.map_unary(a, forward);
        self.push(t, Op::Custom(a, Box::new(backward)), &[a])
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a one-element `loss`, accumulating into node grads.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let contributions = backward_op(&nodes, node, &g);
            for (parent, pg) in contributions {
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(Error::Argument(format!("axis {axis} invalid for shape {shape:?}")))
    } else {
        Ok(())
    }
}

/// Reduces a broadcast-shaped gradient back onto each operand.
fn broadcast_grads(
    nodes: &[Node],
    a: Var,
    b: Var,
    out: &[usize],
    g: &[f64],
    mut fa: impl FnMut(f64, f64, f64) -> f64,
    mut fb: impl FnMut(f64, f64, f64) -> f64,
) -> Vec<(Var, Vec<f64>)> {
    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
    let (xd, yd) = (x.data(), y.data());
    let mut ga = vec![0.0; x.len()];
    let mut gb = vec![0.0; y.len()];
    if x.shape() == out && y.shape() == out {
        for o in 0..g.len() {
            ga[o] += fa(g[o], xd[o], yd[o]);
            gb[o] += fb(g[o], xd[o], yd[o]);
        }
    } else {
        let sa = broadcast_strides(x.shape(), out);
        let sb = broadcast_strides(y.shape(), out);
        kernels::broadcast_for_each(out, &sa, &sb, |o, i, j| {
            ga[i] += fa(g[o], xd[i], yd[j]);
            gb[j] += fb(g[o], xd[i], yd[j]);
        });
    }
    vec![(a, ga), (b, gb)]
}

fn backward_op(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let out = &node.value;
    let input = |v: Var| &nodes[v.0].value;
    let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
        let x = input(a).data();
        let y = out.data();
        vec![(a, (0..g.len()).map(|i| f(g[i], x[i], y[i])).collect())]
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => broadcast_grads(nodes, *a, *b, out.shape(), g, |g, _, _| g, |g, _, _| g),
        Op::Sub(a, b) => broadcast_grads(nodes, *a, *b, out.shape(), g, |g, _, _| g, |g, _, _| -g),
        Op::Mul(a, b) => {
            broadcast_grads(nodes, *a, *b, out.shape(), g, |g, _, y| g * y, |g, x, _| g * x)
        }
        Op::Div(a, b) => broadcast_grads(
            nodes,
            *a,
            *b,
            out.shape(),
            g,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        ),
        Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::Exp(a) => elementwise(*a, &|g, _, y| g * y),
        Op::Log(a, floor) => elementwise(*a, &|g, x, _| g / x.max(*floor)),
        Op::Relu(a) => elementwise(*a, &|g, x, _| if x > 0.0 { g } else { 0.0 }),
        Op::Gelu(a) => elementwise(*a, &|g, x, _| g * kernels::gelu_grad(x)),
        Op::Tanh(a) => elementwise(*a, &|g, _, y| g * (1.0 - y * y)),
        Op::Sum(a) => vec![(*a, vec![g[0]; input(*a).len()])],
        Op::SumAxis(a, axis) => {
            vec![(*a, kernels::sum_axis_backward(g, input(*a).shape(), *axis))]
        }
        Op::MatMul(a, b, d) => {
            let (x, y) = (input(*a).data(), input(*b).data());
            let mut ga = vec![0.0; x.len()];
            let mut gb = vec![0.0; y.len()];
            let (m, k, p) = (d.m, d.k, d.p);
            d.for_each_batch(|o, ao, bo| {
                let go = &g[o * m * p..(o + 1) * m * p];
                kernels::gemm_grad_a(go, &y[bo..bo + k * p], &mut ga[ao..ao + m * k], m, k, p);
                kernels::gemm_grad_b(&x[ao..ao + m * k], go, &mut gb[bo..bo + k * p], m, k, p);
            });
            vec![(*a, ga), (*b, gb)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Permute(a, perm) => {
            let offs = kernels::permute_offsets(input(*a).shape(), perm);
            let mut ga = vec![0.0; g.len()];
            for (o, &src) in offs.iter().enumerate() {
                ga[src] += g[o];
            }
            vec![(*a, ga)]
        }
        Op::Softmax(a, axis) => {
            vec![(*a, kernels::softmax_backward(out.data(), g, out.shape(), *axis))]
        }
        Op::LogSoftmax(a, axis) => {
            vec![(*a, kernels::log_softmax_backward(out.data(), g, out.shape(), *axis))]
        }
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut res: Vec<(Var, Vec<f64>)> = parts
                .iter()
                .map(|p| (*p, Vec::with_capacity(input(*p).len())))
                .collect();
            for o in 0..outer {
                let mut start = o * total * inner;
                for (p, buf) in res.iter_mut() {
                    let chunk = input(*p).shape()[*axis] * inner;
                    buf.extend_from_slice(&g[start..start + chunk]);
                    start += chunk;
                }
            }
            res
        }
        Op::Take(a, offs) => {
            let mut ga = vec![0.0; input(*a).len()];
            for (o, &src) in offs.iter().enumerate() {
                ga[src] += g[o];
            }
            vec![(*a, ga)]
        }
        Op::Scatter(a, offs) => vec![(*a, offs.iter().map(|&o| g[o]).collect())],
        Op::Conv1d { x, w, bias, dims } => {
            let (gx, gw, gbias) =
                kernels::conv1d_backward(input(*x).data(), input(*w).data(), g, dims);
            let mut res = vec![(*x, gx), (*w, gw)];
            if let Some(b) = bias {
                res.push((*b, gbias));
            }
            res
        }
        Op::MaxPool(a, arg) => {
            let mut ga = vec![0.0; input(*a).len()];
            for (o, &src) in arg.iter().enumerate() {
                ga[src] += g[o];
            }
            vec![(*a, ga)]
        }
        Op::Custom(a, f) => vec![(*a, f(input(*a), out, g))],
    }
}

/// Strides helper re-exported for callers building flat gather offsets.
pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(g.value(g.matmul(i, m).unwrap()).data(), &[5., 6., 7., 8.]);
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(g.value(g.matmul(a, b).unwrap()).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("and"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_row_sums_of_b() {
        let g = Graph::new();
        let a = g.param(t(&[3, 4], &(0..12).map(|v| v as f64 * 0.1).collect::<Vec<_>>()));
        let bdata: Vec<f64> = (0..8).map(|v| (v as f64 - 3.0) * 0.3).collect();
        let b = g.constant(t(&[4, 2], &bdata));
        let out = g.matmul(a, b).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        let ga = g.grad(a).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                assert!((ga.get(&[i, k]) - (bdata[2 * k] + bdata[2 * k + 1])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_box_filter_and_stride() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 1, 4], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 2], &[1., 1.]));
        assert_eq!(g.value(g.conv1d(x, w, None, 1, 0).unwrap()).data(), &[3., 5., 7.]);
        let w1 = g.constant(t(&[1, 1, 1], &[1.]));
        assert_eq!(g.value(g.conv1d(x, w1, None, 2, 0).unwrap()).data(), &[1., 3.]);
    }

    #[test]
    fn conv1d_rejects_long_kernel() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5]));
        assert!(matches!(g.conv1d(x, w, None, 1, 0), Err(Error::Shape(_))));
        assert!(g.conv1d(x, w, None, 1, 1).is_ok());
    }

    #[test]
    fn softmax_basics() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = g.constant(t(&[1], &[42.0]));
        assert_eq!(g.value(g.softmax(one, 0).unwrap()).data(), &[1.0]);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let g = Graph::new();
        let v = [0.3, -1.2, 2.5, 0.0];
        let a = g.softmax(g.constant(t(&[4], &v)), 0).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let b = g.softmax(g.constant(t(&[4], &shifted)), 0).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 3.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        g.reset_grads();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 2.]);
        g.reset_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let l = g.sum(g.mul(x, c).unwrap());
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        let y = g.add(x, b).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn max_pool_same_padding() {
        let g = Graph::new();
        let x = g.param(t(&[1, 1, 4], &[1., 3., 2., 0.]));
        let p = g.max_pool1d(x, 3, 1, 1).unwrap();
        assert_eq!(g.value(p).data(), &[3., 3., 3., 2.]);
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 3., 1., 0.]);
        let single = g.constant(t(&[1, 1, 1], &[-5.]));
        assert_eq!(g.value(g.max_pool1d(single, 3, 1, 1).unwrap()).data(), &[-5.]);
    }

    #[test]
    fn take_and_scatter_are_adjoint() {
        let g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let picked = g.take(x, vec![4, 0, 4], &[3]).unwrap();
        assert_eq!(g.value(picked).data(), &[5., 1., 5.]);
        let back = g.scatter_add(picked, vec![1, 1, 2], &[3]).unwrap();
        assert_eq!(g.value(back).data(), &[0., 6., 5.]);
        let w = g.constant(t(&[3], &[1., 10., 100.]));
        let l = g.sum(g.mul(back, w).unwrap());
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[10., 0., 0., 0., 110., 0.]);
    }

    #[test]
    fn concat_and_permute_roundtrip() {
        let g = Graph::new();
        let a = g.constant(t(&[1, 2, 1], &[1., 2.]));
        let b = g.constant(t(&[1, 2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let p = g.permute(c, &[0, 2, 1]).unwrap();
        assert_eq!(g.shape(p), vec![1, 3, 2]);
        assert_eq!(g.value(p).data(), &[1., 2., 3., 5., 4., 6.]);
        assert!(g.permute(c, &[0, 0, 1]).is_err());
    }
}
