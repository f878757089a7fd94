//! Dense 64-bit tensors and a reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, so the node list is already topologically sorted.
//! [`Graph::backward`] walks it once in reverse, accumulating gradients
//! additively into every node that feeds the loss.
//!
//! Parameters live outside the graph in a [`ParamStore`]; a graph borrows
//! the store and binds each parameter lazily as a leaf the first time it is
//! used, so the same store can serve many forward passes without copying.
//!
//! Shapes are row-major. Apart from the bias add inside [`Graph::linear`]
//! there is no broadcasting; ops that need a per-row scalar take it as an
//! explicit argument.

use std::borrow::Cow;
use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Probabilities are clamped to this floor before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `r` of a tensor viewed as `[numel / last, last]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape.last().copied().unwrap_or(1);
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows { x: Var, s: Var },
    AffineScalar { x: Var, a: f64 },
    Activate(Activation, Var),
    DotLast { x: Var, v: Var },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Embed { table: Var, ids: Vec<usize> },
    Reshape(Var),
    GatherTime { x: Var, pos: Vec<Option<usize>> },
    Stack(Vec<Var>),
    StackTime(Vec<Var>),
    Select { mask: Vec<bool>, a: Var, b: Var },
    BmmNt(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Softmax(Var),
    MaskedMean { x: Var, mask: Vec<bool> },
    MaskedMax { x: Var, argmax: Vec<usize> },
    Nll { p: Var, labels: Vec<usize> },
    Sum(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    store: Option<&'a ParamStore>,
    bound: RefCell<Vec<Option<Var>>>,
    track: bool,
}

fn rows_and_width(shape: &[usize]) -> (usize, usize) {
    let w = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (n.checked_div(w).unwrap_or(0), w)
}

/// Splits `[.., m, n]` into (batch product, m, n), treating missing axes as 1.
fn batch_mn(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        k => (shape[..k - 2].iter().product(), shape[k - 2], shape[k - 1]),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'a> Graph<'a> {
    /// A standalone graph with no parameter store.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            store: None,
            bound: RefCell::new(Vec::new()),
            track: true,
        }
    }

    /// A graph whose parameters come from `store`. With `track == false`
    /// nothing requires a gradient and backward is unavailable.
    pub fn with_params(store: &'a ParamStore, track: bool) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            store: Some(store),
            bound: RefCell::new(vec![None; store.len()]),
            track,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    fn push(&self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(shape, Cow::Owned(value), op, rg)
    }

    /// A leaf that receives a gradient (when the graph tracks).
    pub fn var(&self, t: Tensor) -> Var {
        self.push(t.shape, Cow::Owned(t.data), Op::Leaf, self.track)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t.shape, Cow::Owned(t.data), Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf, reusing the binding on later calls.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.index()] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            self.track,
        );
        self.bound.borrow_mut()[id.index()] = Some(v);
        v
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor {
            shape: nodes[v.0].shape.clone(),
            data: nodes[v.0].value.to_vec(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- operations -----------------------------------------------------

    /// `x · Wᵀ + b` over the last axis of `x`; `W` is `[m × n]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xs, ws) = (&nodes[x.0].shape, &nodes[w.0].shape);
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if nodes[b.0].shape != [m] {
                return Err(Error::dim("linear bias", &nodes[b.0].shape, &[m]));
            }
        }
        let (rows, _) = rows_and_width(xs);
        let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
        let bv = b.map(|b| &nodes[b.0].value);
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let xr = &xv[r * n..(r + 1) * n];
            for i in 0..m {
                let wr = &wv[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += wr[j] * xr[j];
                }
                if let Some(bv) = bv {
                    acc += bv[i];
                }
                out[r * m + i] = acc;
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = m;
        drop(nodes);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(shape, out, Op::Linear { x, w, b }, &inputs))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].shape != nodes[b.0].shape {
            return Err(Error::dim(name, &nodes[a.0].shape, &nodes[b.0].shape));
        }
        let out = nodes[a.0]
            .value
            .iter()
            .zip(nodes[b.0].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((nodes[a.0].shape.clone(), out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(s, v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(s, v, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "hadamard", |x, y| x * y)?;
        Ok(self.push_op(s, v, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]`; `s` has the shape of
    /// `x` without its last axis.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xs, ss) = (&nodes[x.0].shape, &nodes[s.0].shape);
        if xs.is_empty() || xs[..xs.len() - 1] != ss[..] {
            return Err(Error::dim("scale_rows", xs, ss));
        }
        let (rows, w) = rows_and_width(xs);
        let (xv, sv) = (&nodes[x.0].value, &nodes[s.0].value);
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            for k in 0..w {
                out[r * w + k] = sv[r] * xv[r * w + k];
            }
        }
        let shape = xs.clone();
        drop(nodes);
        Ok(self.push_op(shape, out, Op::ScaleRows { x, s }, &[x, s]))
    }

    /// `a · x + c`, element-wise.
    pub fn affine_scalar(&self, x: Var, a: f64, c: f64) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let out = nodes[x.0].value.iter().map(|&v| a * v + c).collect();
            (nodes[x.0].shape.clone(), out)
        };
        self.push_op(shape, out, Op::AffineScalar { x, a }, &[x])
    }

    /// `1 − x`, element-wise.
    pub fn one_minus(&self, x: Var) -> Var {
        self.affine_scalar(x, -1.0, 1.0)
    }

    pub fn activate(&self, kind: Activation, x: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let f: fn(f64) -> f64 = match kind {
                Activation::Sigmoid => sigmoid,
                Activation::Tanh => f64::tanh,
                Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            };
            let out = nodes[x.0].value.iter().map(|&v| f(v)).collect();
            (nodes[x.0].shape.clone(), out)
        };
        self.push_op(shape, out, Op::Activate(kind, x), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.activate(Activation::Sigmoid, x)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.activate(Activation::Tanh, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.activate(Activation::Relu, x)
    }

    /// Dot product of every row of `x` with the vector `v`.
    pub fn dot_last(&self, x: Var, v: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xs, vs) = (&nodes[x.0].shape, &nodes[v.0].shape);
        if xs.is_empty() || vs.len() != 1 || xs[xs.len() - 1] != vs[0] {
            return Err(Error::dim("dot_last", xs, vs));
        }
        let (rows, w) = rows_and_width(xs);
        let (xv, vv) = (&nodes[x.0].value, &nodes[v.0].value);
        let out = (0..rows)
            .map(|r| {
                let mut acc = 0.0;
                for k in 0..w {
                    acc += xv[r * w + k] * vv[k];
                }
                acc
            })
            .collect();
        let shape = xs[..xs.len() - 1].to_vec();
        drop(nodes);
        Ok(self.push_op(shape, out, Op::DotLast { x, v }, &[x, v]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let nodes = self.nodes.borrow();
        let lead = &nodes[parts[0].0].shape;
        if lead.is_empty() {
            return Err(Error::dim("concat", lead, &[]));
        }
        let lead = &lead[..lead.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &nodes[p.0].shape;
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", &nodes[parts[0].0].shape, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        drop(nodes);
        Ok(self.push_op(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    /// Row lookup: `[ids.len() × d]` from a `[V × d]` table.
    pub fn embed(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let ts = &nodes[table.0].shape;
        if ts.len() != 2 {
            return Err(Error::dim("embed", ts, &[]));
        }
        let (v, d) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("token id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(&nodes[table.0].value[id * d..(id + 1) * d]);
        }
        drop(nodes);
        Ok(self.push_op(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n: usize = shape.iter().product();
        if n != nodes[x.0].value.len() {
            return Err(Error::dim("reshape", &nodes[x.0].shape, shape));
        }
        let out = nodes[x.0].value.to_vec();
        drop(nodes);
        Ok(self.push_op(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// From `x: [B × L × d]` picks row `pos[b]` of each batch entry, or a
    /// zero row where `pos[b]` is `None`. Result is `[B × d]`.
    pub fn gather_time(&self, x: Var, pos: &[Option<usize>]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let xs = &nodes[x.0].shape;
        if xs.len() != 3 || xs[0] != pos.len() {
            return Err(Error::dim("gather_time", xs, &[pos.len()]));
        }
        let (l, d) = (xs[1], xs[2]);
        let mut out = vec![0.0; pos.len() * d];
        for (b, p) in pos.iter().enumerate() {
            if let Some(t) = *p {
                if t >= l {
                    return Err(Error::Contract(format!("time index {t} beyond length {l}")));
                }
                let src = (b * l + t) * d;
                out[b * d..(b + 1) * d].copy_from_slice(&nodes[x.0].value[src..src + d]);
            }
        }
        drop(nodes);
        Ok(self.push_op(
            vec![pos.len(), d],
            out,
            Op::GatherTime {
                x,
                pos: pos.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("stack of zero tensors".into()));
        }
        let nodes = self.nodes.borrow();
        let s0 = nodes[parts[0].0].shape.clone();
        let mut out = Vec::new();
        for p in parts {
            if nodes[p.0].shape != s0 {
                return Err(Error::dim("stack", &s0, &nodes[p.0].shape));
            }
            out.extend_from_slice(&nodes[p.0].value);
        }
        let mut shape = vec![parts.len()];
        shape.extend(&s0);
        drop(nodes);
        Ok(self.push_op(shape, out, Op::Stack(parts.to_vec()), parts))
    }

    /// Interleaves `L` step tensors of shape `[B × d]` into `[B × L × d]`.
    pub fn stack_time(&self, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::EmptySequence("stack_time of zero steps".into()));
        }
        let nodes = self.nodes.borrow();
        let s0 = nodes[steps[0].0].shape.clone();
        if s0.len() != 2 {
            return Err(Error::dim("stack_time", &s0, &[]));
        }
        let (bsz, d, l) = (s0[0], s0[1], steps.len());
        let mut out = vec![0.0; bsz * l * d];
        for (t, s) in steps.iter().enumerate() {
            if nodes[s.0].shape != s0 {
                return Err(Error::dim("stack_time", &s0, &nodes[s.0].shape));
            }
            for b in 0..bsz {
                let dst = (b * l + t) * d;
                out[dst..dst + d].copy_from_slice(&nodes[s.0].value[b * d..(b + 1) * d]);
            }
        }
        drop(nodes);
        Ok(self.push_op(vec![bsz, l, d], out, Op::StackTime(steps.to_vec()), steps))
    }

    /// Row-wise choice: row `r` comes from `a` where `mask[r]`, else from `b`.
    pub fn select_rows(&self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        let (rows, w) = rows_and_width(sa);
        if sa != sb || rows != mask.len() {
            return Err(Error::dim("select_rows", sa, sb));
        }
        let mut out = Vec::with_capacity(rows * w);
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { &nodes[a.0].value } else { &nodes[b.0].value };
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let shape = sa.clone();
        drop(nodes);
        Ok(self.push_op(
            shape,
            out,
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
            &[a, b],
        ))
    }

    /// Batched `A · Bᵀ`: `[.. × M × d]` by `[.. × N × d]` gives `[.. × M × N]`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sa[sa.len() - 1] != sb[sb.len() - 1] {
            return Err(Error::dim("bmm_nt", sa, sb));
        }
        let (p, m, d) = batch_mn(sa);
        let n = sb[sb.len() - 2];
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let mut out = vec![0.0; p * m * n];
        for q in 0..p {
            for i in 0..m {
                let ar = &av[(q * m + i) * d..(q * m + i + 1) * d];
                for j in 0..n {
                    let br = &bv[(q * n + j) * d..(q * n + j + 1) * d];
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += ar[k] * br[k];
                    }
                    out[(q * m + i) * n + j] = acc;
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        drop(nodes);
        Ok(self.push_op(shape, out, Op::BmmNt(a, b), &[a, b]))
    }

    /// Batched `W · V`: `[.. × M × N]` by `[.. × N × d]` gives `[.. × M × d]`.
    pub fn bmm(&self, w: Var, v: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (sw, sv) = (&nodes[w.0].shape, &nodes[v.0].shape);
        if sw.len() < 2 || sw.len() != sv.len() || sw[..sw.len() - 2] != sv[..sv.len() - 2] || sw[sw.len() - 1] != sv[sv.len() - 2] {
            return Err(Error::dim("bmm", sw, sv));
        }
        let (p, m, n) = batch_mn(sw);
        let d = sv[sv.len() - 1];
        let (wv, vv) = (&nodes[w.0].value, &nodes[v.0].value);
        let mut out = vec![0.0; p * m * d];
        for q in 0..p {
            for i in 0..m {
                let o = &mut out[(q * m + i) * d..(q * m + i + 1) * d];
                for j in 0..n {
                    let wij = wv[(q * m + i) * n + j];
                    let vr = &vv[(q * n + j) * d..(q * n + j + 1) * d];
                    for k in 0..d {
                        o[k] += wij * vr[k];
                    }
                }
            }
        }
        let mut shape = sw[..sw.len() - 2].to_vec();
        shape.extend([m, d]);
        drop(nodes);
        Ok(self.push_op(shape, out, Op::Bmm(w, v), &[w, v]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let s = &nodes[x.0].shape;
        if s.len() < 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (p, m, n) = batch_mn(s);
        let xv = &nodes[x.0].value;
        let mut out = vec![0.0; p * m * n];
        for q in 0..p {
            for i in 0..m {
                for j in 0..n {
                    out[(q * n + j) * m + i] = xv[(q * m + i) * n + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([n, m]);
        drop(nodes);
        Ok(self.push_op(shape, out, Op::Transpose(x), &[x]))
    }

    /// Softmax over the last axis, subtracting the row maximum first.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis of `x: [.. × M × N]` restricted to the
    /// columns where `mask[p·N + j]` holds (`p` indexes the leading batch
    /// axes). Excluded entries come out as exactly zero.
    pub fn softmax_masked(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let s = &nodes[x.0].shape;
        let (p, m, n) = batch_mn(s);
        if let Some(mask) = mask {
            if mask.len() != p * n {
                return Err(Error::dim("softmax mask", s, &[mask.len()]));
            }
        }
        let xv = &nodes[x.0].value;
        let mut out = vec![0.0; p * m * n];
        for q in 0..p {
            let valid = |j: usize| mask.is_none_or(|mk| mk[q * n + j]);
            if !(0..n).any(valid) {
                return Err(Error::EmptySequence("softmax row has no valid entries".into()));
            }
            for i in 0..m {
                let row = &xv[(q * m + i) * n..(q * m + i + 1) * n];
                let mx = (0..n).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[(q * m + i) * n..(q * m + i + 1) * n];
                let mut z = 0.0;
                for j in 0..n {
                    if valid(j) {
                        o[j] = (row[j] - mx).exp();
                        z += o[j];
                    }
                }
                for v in o.iter_mut() {
                    *v /= z;
                }
            }
        }
        let shape = s.clone();
        drop(nodes);
        Ok(self.push_op(shape, out, Op::Softmax(x), &[x]))
    }

    fn pool_dims(&self, x: Var, mask: &[bool], name: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let nodes = self.nodes.borrow();
        let s = &nodes[x.0].shape;
        if s.len() < 2 {
            return Err(Error::dim(name, s, &[mask.len()]));
        }
        let (p, l, d) = batch_mn(s);
        if mask.len() != p * l {
            return Err(Error::dim(name, s, &[mask.len()]));
        }
        for q in 0..p {
            if !mask[q * l..(q + 1) * l].iter().any(|&m| m) {
                return Err(Error::EmptySequence(format!("{name} over an all-zero mask")));
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(d);
        Ok((shape, p, l, d))
    }

    /// Mean over the second-to-last axis, counting only positions whose mask
    /// entry is set; the divisor is the number of valid positions.
    pub fn masked_mean(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let (shape, p, l, d) = self.pool_dims(x, mask, "masked_mean")?;
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let mut out = vec![0.0; p * d];
        for q in 0..p {
            let count = mask[q * l..(q + 1) * l].iter().filter(|&&m| m).count() as f64;
            let o = &mut out[q * d..(q + 1) * d];
            for t in 0..l {
                if mask[q * l + t] {
                    for k in 0..d {
                        o[k] += xv[(q * l + t) * d + k];
                    }
                }
            }
            for v in o.iter_mut() {
                *v /= count;
            }
        }
        drop(nodes);
        Ok(self.push_op(
            shape,
            out,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Max over the second-to-last axis among valid positions. Ties go to
    /// the lowest index.
    pub fn masked_max(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let (shape, p, l, d) = self.pool_dims(x, mask, "masked_max")?;
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let mut out = vec![0.0; p * d];
        let mut argmax = vec![0usize; p * d];
        for q in 0..p {
            for k in 0..d {
                let mut best: Option<(usize, f64)> = None;
                for t in 0..l {
                    if !mask[q * l + t] {
                        continue;
                    }
                    let v = xv[(q * l + t) * d + k];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((t, v));
                    }
                }
                let (t, v) = best.unwrap();
                out[q * d + k] = v;
                argmax[q * d + k] = (q * l + t) * d + k;
            }
        }
        drop(nodes);
        Ok(self.push_op(shape, out, Op::MaskedMax { x, argmax }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise probability
    /// vectors `p: [R × k]` (or `[k]` with a single label).
    pub fn nll(&self, p: Var, labels: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let s = &nodes[p.0].shape;
        let (rows, k) = rows_and_width(s);
        if s.is_empty() || rows != labels.len() {
            return Err(Error::dim("nll", s, &[labels.len()]));
        }
        let pv = &nodes[p.0].value;
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Contract(format!("label {y} outside {k} classes")));
            }
            total -= pv[r * k + y].max(LOG_FLOOR).ln();
        }
        drop(nodes);
        Ok(self.push_op(
            vec![],
            vec![total / rows as f64],
            Op::Nll {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s: f64 = self.nodes.borrow()[x.0].value.iter().sum();
        self.push_op(vec![], vec![s], Op::Sum(x), &[x])
    }

    // ---- backward -------------------------------------------------------

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        // only leaves keep their gradient
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    /// Collects the gradients of every bound parameter, aligned with the store.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        ParamGrads::from_vec(
            bound
                .iter()
                .map(|b| b.and_then(|v| grads.grads[v.0].clone()))
                .collect(),
        )
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node<'_>], node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let ws = &nodes[w.0].shape;
            let (m, n) = (ws[0], ws[1]);
            let rows = g.len() / m;
            let (xv, wv) = (val(*x), val(*w));
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    for i in 0..m {
                        let gi = g[r * m + i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gx[r * n + j] += gi * wv[i * n + j];
                        }
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for r in 0..rows {
                    for i in 0..m {
                        let gi = g[r * m + i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gw[i * n + j] += gi * xv[r * n + j];
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(gb) = acc(grads, nodes, *b) {
                    for r in 0..rows {
                        for i in 0..m {
                            gb[i] += g[r * m + i];
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            let rows = sv.len();
            let w = g.len().checked_div(rows).unwrap_or(0);
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    for k in 0..w {
                        gx[r * w + k] += g[r * w + k] * sv[r];
                    }
                }
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                for r in 0..rows {
                    for k in 0..w {
                        gs[r] += g[r * w + k] * xv[r * w + k];
                    }
                }
            }
        }
        Op::AffineScalar { x, a } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += a * s);
            }
        }
        Op::Activate(kind, x) => {
            let (xv, y) = (val(*x), &node.value);
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i]
                        * match kind {
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
        }
        Op::DotLast { x, v } => {
            let (xv, vv) = (val(*x), val(*v));
            let w = vv.len();
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..g.len() {
                    for k in 0..w {
                        gx[r * w + k] += g[r] * vv[k];
                    }
                }
            }
            if let Some(gv) = acc(grads, nodes, *v) {
                for r in 0..g.len() {
                    for k in 0..w {
                        gv[k] += g[r] * xv[r * w + k];
                    }
                }
            }
        }
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len().checked_div(total).unwrap_or(0);
            let mut off = 0;
            for (p, &w) in parts.iter().zip(widths) {
                if let Some(gp) = acc(grads, nodes, *p) {
                    for r in 0..rows {
                        for k in 0..w {
                            gp[r * w + k] += g[r * total + off + k];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Embed { table, ids } => {
            let d = nodes[table.0].shape[1];
            if let Some(gt) = acc(grads, nodes, *table) {
                for (t, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        gt[id * d + k] += g[t * d + k];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::GatherTime { x, pos } => {
            let xs = &nodes[x.0].shape;
            let (l, d) = (xs[1], xs[2]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (b, p) in pos.iter().enumerate() {
                    if let Some(t) = *p {
                        for k in 0..d {
                            gx[(b * l + t) * d + k] += g[b * d + k];
                        }
                    }
                }
            }
        }
        Op::Stack(parts) => {
            let n = if parts.is_empty() { 0 } else { g.len() / parts.len() };
            for (i, p) in parts.iter().enumerate() {
                if let Some(gp) = acc(grads, nodes, *p) {
                    gp.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::StackTime(steps) => {
            let (bsz, l, d) = (node.shape[0], node.shape[1], node.shape[2]);
            for (t, s) in steps.iter().enumerate() {
                if let Some(gs) = acc(grads, nodes, *s) {
                    for b in 0..bsz {
                        for k in 0..d {
                            gs[b * d + k] += g[(b * l + t) * d + k];
                        }
                    }
                }
            }
        }
        Op::Select { mask, a, b } => {
            let w = if mask.is_empty() { 0 } else { g.len() / mask.len() };
            for (src, want) in [(*a, true), (*b, false)] {
                if let Some(gs) = acc(grads, nodes, src) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            for k in 0..w {
                                gs[r * w + k] += g[r * w + k];
                            }
                        }
                    }
                }
            }
        }
        Op::BmmNt(a, b) => {
            let sa = &nodes[a.0].shape;
            let (p, m, d) = batch_mn(sa);
            let n = node.shape[node.shape.len() - 1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for q in 0..p {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[(q * m + i) * n + j];
                            for k in 0..d {
                                ga[(q * m + i) * d + k] += gij * bv[(q * n + j) * d + k];
                            }
                        }
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for q in 0..p {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[(q * m + i) * n + j];
                            for k in 0..d {
                                gb[(q * n + j) * d + k] += gij * av[(q * m + i) * d + k];
                            }
                        }
                    }
                }
            }
        }
        Op::Bmm(w, v) => {
            let (p, m, n) = batch_mn(&nodes[w.0].shape);
            let d = node.shape[node.shape.len() - 1];
            let (wv, vv) = (val(*w), val(*v));
            if let Some(gw) = acc(grads, nodes, *w) {
                for q in 0..p {
                    for i in 0..m {
                        for j in 0..n {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += g[(q * m + i) * d + k] * vv[(q * n + j) * d + k];
                            }
                            gw[(q * m + i) * n + j] += s;
                        }
                    }
                }
            }
            if let Some(gv) = acc(grads, nodes, *v) {
                for q in 0..p {
                    for i in 0..m {
                        for j in 0..n {
                            let wij = wv[(q * m + i) * n + j];
                            for k in 0..d {
                                gv[(q * n + j) * d + k] += wij * g[(q * m + i) * d + k];
                            }
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (p, m, n) = batch_mn(&nodes[x.0].shape);
            if let Some(gx) = acc(grads, nodes, *x) {
                for q in 0..p {
                    for i in 0..m {
                        for j in 0..n {
                            gx[(q * m + i) * n + j] += g[(q * n + j) * m + i];
                        }
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let n = node.shape.last().copied().unwrap_or(1);
            let y = &node.value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::MaskedMean { x, mask } => {
            let (p, l, d) = batch_mn(&nodes[x.0].shape);
            if let Some(gx) = acc(grads, nodes, *x) {
                for q in 0..p {
                    let count = mask[q * l..(q + 1) * l].iter().filter(|&&m| m).count() as f64;
                    for t in 0..l {
                        if mask[q * l + t] {
                            for k in 0..d {
                                gx[(q * l + t) * d + k] += g[q * d + k] / count;
                            }
                        }
                    }
                }
            }
        }
        Op::MaskedMax { x, argmax } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, &src) in argmax.iter().enumerate() {
                    gx[src] += g[i];
                }
            }
        }
        Op::Nll { p, labels } => {
            let k = nodes[p.0].shape.last().copied().unwrap_or(1);
            let pv = val(*p);
            let rows = labels.len() as f64;
            if let Some(gp) = acc(grads, nodes, *p) {
                for (r, &y) in labels.iter().enumerate() {
                    let pr = pv[r * k + y];
                    if pr > LOG_FLOOR {
                        gp[r * k + y] -= g[0] / (rows * pr);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
