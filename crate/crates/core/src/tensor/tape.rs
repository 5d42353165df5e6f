use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Softplus,
    Silu,
    Tanh,
    Sigmoid,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Scan {
        decay: Var,
        input: Var,
    },
    L2Norm(Var),
    /// Arbitrary differentiable map with its Jacobian (row-major,
    /// `out_len x in_len`) evaluated at record time.
    Mapped {
        x: Var,
        jacobian: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Eager reverse-mode autodiff record. Single-threaded; use one tape per
/// forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
        }
    }
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (zero on
/// broadcast dimensions).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| kind.forward(v)).collect(),
        };
        self.push(value, Op::Unary(kind, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v * c).collect(),
        };
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v + c).collect(),
        };
        self.push(value, Op::Offset(x), &[x])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if va.shape == vb.shape {
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else {
            let shape = broadcast_shapes(op_name, &va.shape, &vb.shape)?;
            let (sa, sb) = (broadcast_strides(&va.shape, &shape), broadcast_strides(&vb.shape, &shape));
            let mut data = vec![0.0; shape.iter().product()];
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = f(va.data[i], vb.data[j]));
            Tensor { shape, data }
        };
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(&va.data, &vb.data, &mut data, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: v.shape.clone(),
                rhs: vec![2],
            });
        }
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data,
        };
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let out = broadcast_shapes("broadcast", &v.shape, shape)?;
        if out != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: v.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let sx = broadcast_strides(&v.shape, &out);
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &sx, &sx, |o, i, _| data[o] = v.data[i]);
        let value = Tensor { shape: out, data };
        Ok(self.push(value, Op::BroadcastTo(x), &[x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it as a dimension of size one.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_axis("sum_axis", &v.shape, axis)?;
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &v.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape.clone();
        shape[axis] = 1;
        Ok(self.push(Tensor { shape, data }, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Maximum over `axis`, which is removed from the shape. The gradient
    /// flows only to the first position attaining each maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_axis("max_axis", &v.shape, axis)?;
        let (outer, len, inner) = split_axis(&v.shape, axis);
        if len == 0 {
            return Err(Error::ShapeMismatch {
                op: "max_axis",
                lhs: v.shape.clone(),
                rhs: vec![axis],
            });
        }
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let src = (o * len + k) * inner + i;
                    let dst = o * inner + i;
                    if k == 0 || v.data[src] > data[dst] {
                        data[dst] = v.data[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        Ok(self.push(Tensor { shape, data }, Op::MaxAxis { x, argmax }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let len = v.shape[axis];
                data.extend_from_slice(&v.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_axis("slice", &v.shape, axis)?;
        if start > end || end > v.shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: v.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = width;
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, &[x]))
    }

    /// Rows of `x` (first axis) at `rows`, in order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape.is_empty() || rows.iter().any(|&r| r >= v.shape[0]) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: v.shape.clone(),
                rhs: vec![rows.len()],
            });
        }
        let width: usize = v.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&v.data[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape.clone();
        shape[0] = rows.len();
        Ok(self.push(
            Tensor { shape, data },
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// First-order linear recurrence along the first axis:
    /// `h[0] = input[0]`, `h[t] = decay[t] * h[t-1] + input[t]`.
    ///
    /// Both operands share one shape `[T, ...]`; the recurrence runs
    /// independently for every trailing element. Forward and backward are
    /// plain sequential loops over `t`.
    pub fn scan(&mut self, decay: Var, input: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[decay.0].value, &self.nodes[input.0].value);
        if va.shape != vb.shape || va.shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "scan",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let steps = va.shape[0];
        let width = va.data.len() / steps.max(1);
        let mut data = vb.data.clone();
        for t in 1..steps {
            let (prev, cur) = data.split_at_mut(t * width);
            let prev = &prev[(t - 1) * width..];
            let a = &va.data[t * width..(t + 1) * width];
            for ((h, p), a) in cur[..width].iter_mut().zip(prev).zip(a) {
                *h += a * p;
            }
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Scan { decay, input }, &[decay, input]))
    }

    /// Euclidean norm of all elements, as a scalar. Its gradient at zero is
    /// taken to be zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// Records an externally evaluated map `y = f(x)` together with its
    /// Jacobian `dy/dx` (row-major, `y.len() x x.len()`).
    pub fn mapped(&mut self, x: Var, value: Tensor, jacobian: Vec<f64>) -> Result<Var> {
        let n_in = self.nodes[x.0].value.len();
        if jacobian.len() != value.len() * n_in {
            return Err(Error::ShapeMismatch {
                op: "mapped",
                lhs: vec![value.len(), n_in],
                rhs: vec![jacobian.len()],
            });
        }
        Ok(self.push(value, Op::Mapped { x, jacobian }, &[x]))
    }

    /// Reverse pass from a one-element `loss`. Afterwards [`Tape::grad`]
    /// returns d(loss)/d(v) for every node that requires gradients and lies
    /// upstream of `loss`. Gradients from repeated uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut done: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &nodes[v.0];
                if n.requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Unary(kind, x) => {
                    let xv = &nodes[x.0].value.data;
                    acc(*x, &mut |buf| {
                        for (((b, &gi), &xi), &yi) in buf.iter_mut().zip(&g).zip(xv).zip(&y.data) {
                            *b += gi * kind.derivative(xi, yi);
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |buf| {
                    for (b, gi) in buf.iter_mut().zip(&g) {
                        *b += gi * c;
                    }
                }),
                Op::Offset(x) | Op::Reshape(x) => acc(*x, &mut |buf| {
                    for (b, gi) in buf.iter_mut().zip(&g) {
                        *b += gi;
                    }
                }),
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (sa, sb) = if va.shape == vb.shape {
                        (None, None)
                    } else {
                        (
                            Some(broadcast_strides(&va.shape, &y.shape)),
                            Some(broadcast_strides(&vb.shape, &y.shape)),
                        )
                    };
                    let visit = |f: &mut dyn FnMut(usize, usize, usize)| match (&sa, &sb) {
                        (Some(sa), Some(sb)) => for_each_broadcast(&y.shape, sa, sb, f),
                        _ => (0..g.len()).for_each(|o| f(o, o, o)),
                    };
                    acc(*a, &mut |buf| {
                        visit(&mut |o, i, j| {
                            buf[i] += g[o]
                                * match kind {
                                    Binary::Add | Binary::Sub => 1.0,
                                    Binary::Mul => vb.data[j],
                                    Binary::Div => 1.0 / vb.data[j],
                                }
                        })
                    });
                    acc(*b, &mut |buf| {
                        visit(&mut |o, i, j| {
                            buf[j] += g[o]
                                * match kind {
                                    Binary::Add => 1.0,
                                    Binary::Sub => -1.0,
                                    Binary::Mul => va.data[i],
                                    Binary::Div => -va.data[i] / (vb.data[j] * vb.data[j]),
                                }
                        })
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                    acc(*a, &mut |buf| {
                        // dA = G B^T
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &vb.data[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                buf[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    acc(*b, &mut |buf| {
                        // dB = A^T G
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let s = va.data[i * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                for (d, gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += s * gv;
                                }
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = (y.shape[1], y.shape[0]);
                    acc(*x, &mut |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::BroadcastTo(x) => {
                    let sx = broadcast_strides(&nodes[x.0].value.shape, &y.shape);
                    acc(*x, &mut |buf| for_each_broadcast(&y.shape, &sx, &sx, |o, i, _| buf[i] += g[o]));
                }
                Op::SumAll(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
                Op::SumAxis(x, axis) => {
                    let (outer, len, inner) = split_axis(&nodes[x.0].value.shape, *axis);
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    buf[(o * len + k) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::MaxAxis { x, argmax } => acc(*x, &mut |buf| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        buf[src] += gi;
                    }
                }),
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(&y.shape, *axis);
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.shape[*axis];
                        acc(p, &mut |buf| {
                            for o in 0..outer {
                                let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                                for (b, s) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                    *b += s;
                                }
                            }
                        });
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, len, inner) = split_axis(&nodes[x.0].value.shape, *axis);
                    let width = y.shape[*axis];
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            let dst = &mut buf[(o * len + start) * inner..(o * len + start + width) * inner];
                            for (b, s) in dst.iter_mut().zip(&g[o * width * inner..(o + 1) * width * inner]) {
                                *b += s;
                            }
                        }
                    });
                }
                Op::GatherRows { x, rows } => {
                    let width: usize = y.shape[1..].iter().product();
                    acc(*x, &mut |buf| {
                        for (k, &r) in rows.iter().enumerate() {
                            for (b, s) in buf[r * width..(r + 1) * width].iter_mut().zip(&g[k * width..(k + 1) * width]) {
                                *b += s;
                            }
                        }
                    });
                }
                Op::Scan { decay, input } => {
                    let va = &nodes[decay.0].value.data;
                    let steps = y.shape[0];
                    let width = y.data.len() / steps.max(1);
                    // Adjoint recurrence, run backwards in time.
                    let mut adj = vec![0.0; y.data.len()];
                    let mut carry = vec![0.0; width];
                    for t in (0..steps).rev() {
                        for w in 0..width {
                            let i = t * width + w;
                            let total = g[i] + carry[w];
                            adj[i] = total;
                            carry[w] = va[i] * total;
                        }
                    }
                    acc(*input, &mut |buf| buf.iter_mut().zip(&adj).for_each(|(b, a)| *b += a));
                    acc(*decay, &mut |buf| {
                        for i in width..adj.len() {
                            buf[i] += adj[i] * y.data[i - width];
                        }
                    });
                }
                Op::L2Norm(x) => {
                    let n = y.data[0];
                    let xv = &nodes[x.0].value.data;
                    acc(*x, &mut |buf| {
                        if n > 0.0 {
                            for (b, xi) in buf.iter_mut().zip(xv) {
                                *b += g[0] * xi / n;
                            }
                        }
                    });
                }
                Op::Mapped { x, jacobian } => {
                    let n_in = nodes[x.0].value.len();
                    acc(*x, &mut |buf| {
                        for (r, gi) in g.iter().enumerate() {
                            for (b, j) in buf.iter_mut().zip(&jacobian[r * n_in..(r + 1) * n_in]) {
                                *b += gi * j;
                            }
                        }
                    });
                }
            }
            done[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(done) {
            node.grad = g;
        }
        Ok(())
    }
}
