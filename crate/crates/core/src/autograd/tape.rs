use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Softmax {
        src: usize,
        axis: usize,
    },
    LogSoftmax {
        src: usize,
        axis: usize,
    },
    Sum(usize),
    Mean(usize),
    MaxPoolRows {
        src: usize,
        argmax: Vec<usize>,
    },
    IndexSelect {
        src: usize,
        ids: Vec<usize>,
    },
    Gather {
        src: usize,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(usize),
    Transpose(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    PairSum(usize, usize),
    /// Scalar output whose gradient w.r.t. `src` was computed in the forward pass.
    Precomputed {
        src: usize,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that gradients can be propagated back
/// through it once.
///
/// A tape is a single-threaded unit of work. Parameters are pulled in from a
/// [`ParamStore`] with [`Tape::param`]; after [`Tape::backward`] their
/// gradients are available from [`Tape::param_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    frozen: Vec<String>,
    inference: bool,
    done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Rhs of a broadcasting binary op: leading unit dims stripped, remaining
/// dims must be a suffix of the lhs shape.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
    let core = &rhs[first..];
    if core.len() > lhs.len() {
        return false;
    }
    lhs[lhs.len() - core.len()..] == *core
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which nothing requires gradients (decoding, evaluation).
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    /// Parameters whose name starts with any of `prefixes` enter this tape as
    /// constants.
    pub fn with_frozen(prefixes: Vec<String>) -> Self {
        Self {
            frozen: prefixes,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = !self.inference && inputs.iter().any(|&i| nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        let id = nodes.len();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn push_leaf(&self, tensor: Tensor, needs_grad: bool) -> Var<'_> {
        let needs_grad = needs_grad && !self.inference;
        let shape = tensor.shape().to_vec();
        let data = tensor.into_data();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Records `tensor` as a leaf; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let rg = tensor.requires_grad;
        self.push_leaf(tensor, rg)
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_leaf(tensor, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Tensor::zeros(shape))
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let name = store.name(id);
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let t = store.get(id);
        let tensor = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("param shape");
        let var = self.push_leaf(tensor, !frozen);
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars.first().ok_or(Error::EmptyInput("concat"))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].shape.clone();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for v in vars {
            let s = &nodes[v.id].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = strides(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in vars {
                let n = &nodes[v.id];
                let len = n.shape[axis] * inner;
                data.extend_from_slice(&n.data[o * len..(o + 1) * len]);
            }
        }
        let srcs: Vec<usize> = vars.iter().map(|v| v.id).collect();
        drop(nodes);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                srcs: srcs.clone(),
                axis,
            },
            &srcs,
        ))
    }

    /// Records a scalar whose value and gradient w.r.t. `input` were computed
    /// outside the tape (e.g. by a dynamic-programming forward-backward pass).
    pub fn precomputed_scalar<'t>(
        &'t self,
        input: Var<'t>,
        value: f64,
        grad: Vec<f64>,
    ) -> Result<Var<'t>> {
        let n = input.numel();
        if grad.len() != n {
            return Err(Error::ShapeMismatch {
                op: "precomputed_scalar",
                left: vec![n],
                right: vec![grad.len()],
            });
        }
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::Precomputed {
                src: input.id,
                grad,
            },
            &[input.id],
        ))
    }

    /// Propagates gradients from the scalar `loss` to every differentiable node.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        self.done.set(true);
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize(nodes.len(), None);
        if !root.needs_grad {
            return Ok(());
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    /// Gradients of every parameter that took part in the backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .borrow()
            .iter()
            .filter(|(_, &node)| nodes[node].needs_grad)
            .map(|(&pid, &node)| {
                let g = grads
                    .get(node)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| vec![0.0; nodes[node].data.len()]);
                (pid, g)
            })
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

fn acc<F: FnOnce(&mut [f64])>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: F) {
    if !nodes[id].needs_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    f(buf);
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.data;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let ad = &nodes[a].data;
            let bd = &nodes[b].data;
            acc(nodes, grads, a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        ga[i * k + p] += s;
                    }
                }
            });
            acc(nodes, grads, b, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *gbv += a_ip * gv;
                        }
                    }
                }
            });
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Add(..)) {
                1.0
            } else {
                -1.0
            };
            acc(nodes, grads, a, |ga| add_into(ga, g));
            let bn = nodes[b].data.len();
            acc(nodes, grads, b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    gb[i % bn] += sign * gv;
                }
            });
        }
        &Op::Mul(a, b) => {
            let ad = &nodes[a].data;
            let bd = &nodes[b].data;
            let bn = bd.len();
            acc(nodes, grads, a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    ga[i] += gv * bd[i % bn];
                }
            });
            acc(nodes, grads, b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    gb[i % bn] += gv * ad[i];
                }
            });
        }
        &Op::Scale(a, c) => acc(nodes, grads, a, |ga| {
            for (x, gv) in ga.iter_mut().zip(g) {
                *x += c * gv;
            }
        }),
        &Op::Tanh(a) => acc(nodes, grads, a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        &Op::Sigmoid(a) => acc(nodes, grads, a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }),
        &Op::Relu(a) => {
            let x = &nodes[a].data;
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            })
        }
        &Op::Exp(a) => acc(nodes, grads, a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * y[i];
            }
        }),
        &Op::Ln(a) => {
            let x = &nodes[a].data;
            acc(nodes, grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            })
        }
        &Op::Softmax { src, axis } => {
            let (outer, n, inner) = strides(&node.shape, axis);
            acc(nodes, grads, src, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            })
        }
        &Op::LogSoftmax { src, axis } => {
            let (outer, n, inner) = strides(&node.shape, axis);
            acc(nodes, grads, src, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let total: f64 = (0..n).map(|k| g[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] += g[idx(k)] - y[idx(k)].exp() * total;
                        }
                    }
                }
            })
        }
        &Op::Sum(a) => acc(nodes, grads, a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        &Op::Mean(a) => acc(nodes, grads, a, |ga| {
            let n = ga.len() as f64;
            for x in ga.iter_mut() {
                *x += g[0] / n;
            }
        }),
        Op::MaxPoolRows { src, argmax } => {
            let d = argmax.len();
            acc(nodes, grads, *src, |ga| {
                for (j, &r) in argmax.iter().enumerate() {
                    ga[r * d + j] += g[j];
                }
            })
        }
        Op::IndexSelect { src, ids } => {
            let w: usize = nodes[*src].shape[1..].iter().product();
            acc(nodes, grads, *src, |ga| {
                for (r, &row) in ids.iter().enumerate() {
                    add_into(&mut ga[row * w..(row + 1) * w], &g[r * w..(r + 1) * w]);
                }
            })
        }
        Op::Gather { src, idx } => acc(nodes, grads, *src, |ga| {
            for (r, &i) in idx.iter().enumerate() {
                ga[i] += g[r];
            }
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[*gamma].data.len();
            let gm = &nodes[*gamma].data;
            let rows = xhat.len() / d;
            acc(nodes, grads, *gamma, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            });
            acc(nodes, grads, *x, |gx| {
                let n = d as f64;
                for r in 0..rows {
                    let off = r * d;
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for j in 0..d {
                        let gh = g[off + j] * gm[j];
                        sum_gh += gh;
                        sum_ghx += gh * xhat[off + j];
                    }
                    for j in 0..d {
                        let gh = g[off + j] * gm[j];
                        gx[off + j] += inv_std[r] / n * (n * gh - sum_gh - xhat[off + j] * sum_ghx);
                    }
                }
            });
        }
        &Op::Reshape(a) => acc(nodes, grads, a, |ga| add_into(ga, g)),
        &Op::Transpose(a) => {
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            acc(nodes, grads, a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            })
        }
        &Op::Slice { src, axis, start } => {
            let (outer, len, inner) = strides(&node.shape, axis);
            let full = nodes[src].shape[axis];
            acc(nodes, grads, src, |ga| {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let s = o * len * inner;
                    add_into(&mut ga[dst..dst + len * inner], &g[s..s + len * inner]);
                }
            })
        }
        Op::Concat { srcs, axis } => {
            let (outer, total, inner) = strides(&node.shape, *axis);
            let mut offset = 0;
            for &s in srcs {
                let len = nodes[s].shape[*axis];
                acc(nodes, grads, s, |gs| {
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        let to = o * len * inner;
                        add_into(&mut gs[to..to + len * inner], &g[from..from + len * inner]);
                    }
                });
                offset += len;
            }
        }
        &Op::PairSum(a, b) => {
            let (t, v, j) = (node.shape[0], node.shape[1], node.shape[2]);
            acc(nodes, grads, a, |ga| {
                for ti in 0..t {
                    for vi in 0..v {
                        let off = (ti * v + vi) * j;
                        add_into(&mut ga[ti * j..(ti + 1) * j], &g[off..off + j]);
                    }
                }
            });
            acc(nodes, grads, b, |gb| {
                for ti in 0..t {
                    for vi in 0..v {
                        let off = (ti * v + vi) * j;
                        add_into(&mut gb[vi * j..(vi + 1) * j], &g[off..off + j]);
                    }
                }
            });
        }
        Op::Precomputed { src, grad } => acc(nodes, grads, *src, |ga| {
            for (x, d) in ga.iter_mut().zip(grad) {
                *x += g[0] * d;
            }
        }),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape")
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Runs `f` on the node's data without copying it.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].data)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, data, op, &[self.id])
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if !broadcast_ok(&a.shape, &b.shape) {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let bn = b.data.len();
            let data = if bn == a.data.len() {
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
            } else {
                a.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data[i % bn]))
                    .collect()
            };
            (a.shape.clone(), data)
        };
        Ok(self.tape.push(shape, data, op, &[self.id, rhs.id]))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = a.data[i * k + p];
                    for (o, bv) in orow.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                        *o += a_ip * bv;
                    }
                }
            }
            (vec![m, n], out)
        };
        Ok(self
            .tape
            .push(shape, data, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Elementwise add; `rhs` may broadcast over leading dimensions.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let name = if log { "log_softmax" } else { "softmax" };
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(Error::InvalidAxis {
                    op: name,
                    axis,
                    shape: n.shape.clone(),
                });
            }
            if n.shape[axis] == 0 {
                return Err(Error::EmptyAxis { op: name });
            }
            let (outer, len, inner) = strides(&n.shape, axis);
            let mut out = vec![0.0; n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len)
                        .map(|k| n.data[idx(k)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = (0..len).map(|k| (n.data[idx(k)] - max).exp()).sum();
                    if log {
                        let lse = max + total.ln();
                        for k in 0..len {
                            out[idx(k)] = n.data[idx(k)] - lse;
                        }
                    } else {
                        for k in 0..len {
                            out[idx(k)] = (n.data[idx(k)] - max).exp() / total;
                        }
                    }
                }
            }
            (n.shape.clone(), out)
        };
        let op = if log {
            Op::LogSoftmax { src: self.id, axis }
        } else {
            Op::Softmax { src: self.id, axis }
        };
        Ok(self.tape.push(shape, data, op, &[self.id]))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_data(|d| d.iter().sum());
        self.tape
            .push(Vec::new(), vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s = self.with_data(|d| d.iter().sum::<f64>()) / n as f64;
        Ok(self
            .tape
            .push(Vec::new(), vec![s], Op::Mean(self.id), &[self.id]))
    }

    /// Max over the rows of an `n x d` matrix, giving a length-`d` vector.
    /// Ties go to the earliest row.
    pub fn max_pool_rows(self) -> Result<Var<'t>> {
        let (data, argmax, d) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 {
                return Err(Error::InvalidAxis {
                    op: "max_pool_rows",
                    axis: 0,
                    shape: n.shape.clone(),
                });
            }
            let (rows, d) = (n.shape[0], n.shape[1]);
            if rows == 0 {
                return Err(Error::EmptyAxis {
                    op: "max_pool_rows",
                });
            }
            let mut data = n.data[..d].to_vec();
            let mut argmax = vec![0; d];
            for r in 1..rows {
                for j in 0..d {
                    let x = n.data[r * d + j];
                    if x > data[j] {
                        data[j] = x;
                        argmax[j] = r;
                    }
                }
            }
            (data, argmax, d)
        };
        Ok(self.tape.push(
            vec![d],
            data,
            Op::MaxPoolRows {
                src: self.id,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Selects rows (entries along axis 0). Used for embedding lookups.
    pub fn index_select(self, ids: &[usize]) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.is_empty() {
                return Err(Error::InvalidAxis {
                    op: "index_select",
                    axis: 0,
                    shape: n.shape.clone(),
                });
            }
            let rows = n.shape[0];
            let w: usize = n.shape[1..].iter().product();
            let mut data = Vec::with_capacity(ids.len() * w);
            for &i in ids {
                if i >= rows {
                    return Err(Error::IndexOutOfRange {
                        op: "index_select",
                        index: i,
                        size: rows,
                    });
                }
                data.extend_from_slice(&n.data[i * w..(i + 1) * w]);
            }
            let mut shape = n.shape.clone();
            shape[0] = ids.len();
            (shape, data)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::IndexSelect {
                src: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Picks individual elements by flat index into a 1-d result.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t>> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut data = Vec::with_capacity(idx.len());
            for &i in idx {
                if i >= n.data.len() {
                    return Err(Error::IndexOutOfRange {
                        op: "gather",
                        index: i,
                        size: n.data.len(),
                    });
                }
                data.push(n.data[i]);
            }
            data
        };
        Ok(self.tape.push(
            vec![idx.len()],
            data,
            Op::Gather {
                src: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (shape, out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let d = *x
                .shape
                .last()
                .ok_or(Error::EmptyAxis { op: "layer_norm" })?;
            let (gm, bt) = (&nodes[gamma.id], &nodes[beta.id]);
            if gm.shape != [d] || bt.shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: x.shape.clone(),
                    right: gm.shape.clone(),
                });
            }
            if d == 0 {
                return Err(Error::EmptyAxis { op: "layer_norm" });
            }
            let rows = x.data.len() / d;
            let mut out = vec![0.0; x.data.len()];
            let mut xhat = vec![0.0; x.data.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mu) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gm.data[j] * h + bt.data[j];
                }
            }
            (x.shape.clone(), out, xhat, inv_std)
        };
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let n = self.numel();
        if shape.iter().product::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        Ok(self
            .tape
            .push(shape.to_vec(), data, Op::Reshape(self.id), &[self.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 {
                return Err(Error::InvalidAxis {
                    op: "transpose",
                    axis: 1,
                    shape: n.shape.clone(),
                });
            }
            let (m, k) = (n.shape[0], n.shape[1]);
            let mut out = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..k {
                    out[j * m + i] = n.data[i * k + j];
                }
            }
            (vec![k, m], out)
        };
        Ok(self
            .tape
            .push(shape, data, Op::Transpose(self.id), &[self.id]))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(Error::InvalidAxis {
                    op: "slice",
                    axis,
                    shape: n.shape.clone(),
                });
            }
            if start > end || end > n.shape[axis] {
                return Err(Error::IndexOutOfRange {
                    op: "slice",
                    index: end,
                    size: n.shape[axis],
                });
            }
            let (outer, full, inner) = strides(&n.shape, axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&n.data[s..s + len * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, data)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// `out[t, v, :] = self[t, :] + rhs[v, :]` for `self: T x J`, `rhs: V x J`.
    pub fn pair_sum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "pair_sum",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (t, v, j) = (a.shape[0], b.shape[0], a.shape[1]);
            let mut data = Vec::with_capacity(t * v * j);
            for ti in 0..t {
                let arow = &a.data[ti * j..(ti + 1) * j];
                for vi in 0..v {
                    let brow = &b.data[vi * j..(vi + 1) * j];
                    data.extend(arow.iter().zip(brow).map(|(x, y)| x + y));
                }
            }
            (vec![t, v, j], data)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::PairSum(self.id, rhs.id),
            &[self.id, rhs.id],
        ))
    }
}
