//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tensor`] is a plain row-major value. Differentiable computation happens
//! through [`Var`] handles that point into a [`Tape`]; every op appends one node
//! whose inputs precede it, and [`Tape::backward`] walks the nodes once in
//! reverse order. Ops that live outside this module (the LARS step, lagged
//! design products) plug in through [`CustomOp`].

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {:?} out of bounds for {:?}", index, self.shape);
            acc * d + i
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.shape[0]);
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        }
    }
}

/// Which input cell of each 2x2 block won the max, as a flat index into the
/// input plane (`row * width + col`).
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub indices: Rc<Vec<usize>>,
}

/// Backward rule for an op implemented outside this module.
///
/// Returns one gradient buffer per input (same length as that input), or
/// `None` for inputs that receive nothing.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Rc<Tensor>),
    ScaleBy(usize, usize),
    Broadcast(usize),
    Sum(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    Scatter(usize, Rc<Vec<usize>>),
    Concat(Vec<usize>),
    Slice0 {
        x: usize,
        start: usize,
    },
    Transpose(usize),
    MatVec(usize, usize),
    MatVecT(usize, usize),
    GatherCols(usize, Rc<Vec<usize>>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
    },
    MaxPool {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    Unpool {
        y: usize,
        idx: Rc<Vec<usize>>,
    },
    LeakyRelu(usize, f64),
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only record of a computation. Single owner; not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zero when `var` did not reach the output.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, &[])
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    /// Records a node computed outside this module.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.push(
            value,
            Op::Custom {
                inputs: ids.clone(),
                op,
            },
            &ids,
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let first = parts[0].value();
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            assert_eq!(&v.shape()[1..], &tail[..], "concat: trailing shapes differ");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.push(Tensor { shape, data }, Op::Concat(ids.clone()), &ids)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) && !inputs.is_empty() {
            let finite_inputs = inputs.iter().all(|&i| nodes[i].value.is_finite());
            debug_assert!(
                !finite_inputs || !value.data.iter().any(|v| v.is_nan()),
                "NaN produced from finite inputs"
            );
        }
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse-mode accumulation from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *b, g.len(), |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *b, g.len(), |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(&mut grads, *a, g.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(&vb.data) {
                            *d += g * y;
                        }
                    });
                    acc(&mut grads, *b, g.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(&va.data) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, g.len(), |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += s * g)
                    });
                }
                Op::AddConst(a) => acc(&mut grads, *a, g.len(), |d| add_into(d, &g)),
                Op::MulConst(a, c) => {
                    let m = c.len();
                    acc(&mut grads, *a, g.len(), |d| {
                        for (i, (d, g)) in d.iter_mut().zip(&g).enumerate() {
                            *d += g * c.data[i % m];
                        }
                    });
                }
                Op::ScaleBy(a, s) => {
                    let (va, vs) = (val(*a), val(*s).data[0]);
                    acc(&mut grads, *a, g.len(), |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += vs * g)
                    });
                    let ds: f64 = g.iter().zip(&va.data).map(|(g, x)| g * x).sum();
                    acc(&mut grads, *s, 1, |d| d[0] += ds);
                }
                Op::Broadcast(a) => {
                    let s: f64 = g.iter().sum();
                    acc(&mut grads, *a, 1, |d| d[0] += s);
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    acc(&mut grads, *a, n, |d| d.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Reshape(a) => acc(&mut grads, *a, g.len(), |d| add_into(d, &g)),
                Op::Gather(a, idx) => {
                    let n = val(*a).len();
                    acc(&mut grads, *a, n, |d| {
                        for (&i, g) in idx.iter().zip(&g) {
                            d[i] += g;
                        }
                    });
                }
                Op::Scatter(a, idx) => {
                    acc(&mut grads, *a, idx.len(), |d| {
                        for (d, &i) in d.iter_mut().zip(idx.iter()) {
                            *d += g[i];
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        let slice = &g[off..off + n];
                        acc(&mut grads, p, n, |d| add_into(d, slice));
                        off += n;
                    }
                }
                Op::Slice0 { x, start } => {
                    let vx = val(*x);
                    let row: usize = vx.shape[1..].iter().product();
                    let off = start * row;
                    acc(&mut grads, *x, vx.len(), |d| add_into(&mut d[off..off + g.len()], &g));
                }
                Op::Transpose(a) => {
                    let va = val(*a);
                    let (r, c) = (va.shape[0], va.shape[1]);
                    acc(&mut grads, *a, va.len(), |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::MatVec(a, v) => {
                    // out = A v
                    let (va, vv) = (val(*a), val(*v));
                    let (n, m) = (va.shape[0], va.shape[1]);
                    acc(&mut grads, *a, n * m, |d| {
                        for i in 0..n {
                            let row = &mut d[i * m..(i + 1) * m];
                            row.iter_mut().zip(&vv.data).for_each(|(d, x)| *d += g[i] * x);
                        }
                    });
                    acc(&mut grads, *v, m, |d| {
                        for i in 0..n {
                            let row = &va.data[i * m..(i + 1) * m];
                            d.iter_mut().zip(row).for_each(|(d, a)| *d += g[i] * a);
                        }
                    });
                }
                Op::MatVecT(a, r) => {
                    // out = A^T r
                    let (va, vr) = (val(*a), val(*r));
                    let (n, m) = (va.shape[0], va.shape[1]);
                    acc(&mut grads, *a, n * m, |d| {
                        for i in 0..n {
                            let row = &mut d[i * m..(i + 1) * m];
                            row.iter_mut().zip(&g).for_each(|(d, g)| *d += vr.data[i] * g);
                        }
                    });
                    acc(&mut grads, *r, n, |d| {
                        for (i, d) in d.iter_mut().enumerate() {
                            let row = &va.data[i * m..(i + 1) * m];
                            *d += row.iter().zip(&g).map(|(a, g)| a * g).sum::<f64>();
                        }
                    });
                }
                Op::GatherCols(a, cols) => {
                    let va = val(*a);
                    let (n, p) = (va.shape[0], va.shape[1]);
                    let m = cols.len();
                    acc(&mut grads, *a, n * p, |d| {
                        for i in 0..n {
                            for (k, &j) in cols.iter().enumerate() {
                                d[i * p + j] += g[i * m + k];
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, b } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let geo = ConvGeometry::of(vx.shape(), vw.shape());
                    let (gx, gw, gb) = conv2d_backward(&geo, &vx.data, &vw.data, &g);
                    acc(&mut grads, *x, gx.len(), |d| add_into(d, &gx));
                    acc(&mut grads, *w, gw.len(), |d| add_into(d, &gw));
                    acc(&mut grads, *b, gb.len(), |d| add_into(d, &gb));
                }
                Op::MaxPool { x, idx } => {
                    let vx = val(*x);
                    let (planes, h, w) = planes_hw(vx.shape());
                    let cells = (h / 2) * (w / 2);
                    acc(&mut grads, *x, vx.len(), |d| {
                        for pl in 0..planes {
                            for c in 0..cells {
                                d[pl * h * w + idx[pl * cells + c]] += g[pl * cells + c];
                            }
                        }
                    });
                }
                Op::Unpool { y, idx } => {
                    let vy = val(*y);
                    let (planes, h, w) = planes_hw(vy.shape());
                    let cells = h * w;
                    let plane_out = cells * 4;
                    acc(&mut grads, *y, vy.len(), |d| {
                        for pl in 0..planes {
                            for c in 0..cells {
                                d[pl * cells + c] += g[pl * plane_out + idx[pl * cells + c]];
                            }
                        }
                    });
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = val(*x);
                    acc(&mut grads, *x, vx.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(&vx.data) {
                            *d += if *x >= 0.0 { *g } else { slope * g };
                        }
                    });
                }
                Op::ChannelNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (vx, vg) = (val(*x), val(*gamma));
                    let (b, c, hw) = batch_channels(vx.shape());
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    acc(&mut grads, *x, vx.len(), |d| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let off = (bi * c + ch) * hw;
                                let scale = vg.data[ch] * inv_std[ch];
                                for k in off..off + hw {
                                    d[k] += g[k] * scale;
                                    gg[ch] += g[k] * (vx.data[k] - mean[ch]) * inv_std[ch];
                                    gbeta[ch] += g[k];
                                }
                            }
                        }
                    });
                    acc(&mut grads, *gamma, c, |d| add_into(d, &gg));
                    acc(&mut grads, *beta, c, |d| add_into(d, &gbeta));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                    let outs = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(outs.len(), inputs.len(), "{}: gradient arity", op.name());
                    for (&i, gi) in inputs.iter().zip(outs) {
                        if let Some(gi) = gi {
                            acc(&mut grads, i, gi.len(), |d| add_into(d, &gi));
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// (number of planes, height, width) for a [..., H, W] tensor.
fn planes_hw(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    (shape[..n - 2].iter().product(), h, w)
}

/// (batch, channels, H*W) for [C,H,W] or [B,C,H,W].
fn batch_channels(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        3 => (1, shape[0], shape[1] * shape[2]),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => unreachable!("validated by caller"),
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    fn of(x: &[usize], w: &[usize]) -> Self {
        let (batch, c_in, h, wd) = if x.len() == 3 {
            (1, x[0], x[1], x[2])
        } else {
            (x[0], x[1], x[2], x[3])
        };
        ConvGeometry {
            batch,
            c_in,
            c_out: w[0],
            h,
            w: wd,
            k: w[2],
        }
    }

    /// Visits every (output row, input row, column range) triple touched by
    /// kernel tap (du, dv).
    #[inline]
    fn rows(&self, du: isize, dv: isize) -> (std::ops::Range<usize>, usize, usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        let i0 = (-du).max(0) as usize;
        let i1 = (h - du).min(h).max(0) as usize;
        let j0 = (-dv).max(0) as usize;
        let j1 = (w - dv).min(w).max(0) as usize;
        (i0..i1.max(i0), j0, j1.max(j0))
    }
}

fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let ConvGeometry {
        batch,
        c_in,
        c_out,
        h,
        w: wd,
        k,
    } = *geo;
    let hw = h * wd;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; batch * c_out * hw];
    for bi in 0..batch {
        for o in 0..c_out {
            let plane = &mut out[(bi * c_out + o) * hw..][..hw];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..c_in {
                let xp = &x[(bi * c_in + c) * hw..][..hw];
                for u in 0..k {
                    for v in 0..k {
                        let wv = w[((o * c_in + c) * k + u) * k + v];
                        let (du, dv) = (u as isize - pad, v as isize - pad);
                        let (rows, j0, j1) = geo.rows(du, dv);
                        for i in rows {
                            let si = (i as isize + du) as usize;
                            let dst = &mut plane[i * wd + j0..i * wd + j1];
                            let sj0 = (j0 as isize + dv) as usize;
                            let src = &xp[si * wd + sj0..si * wd + sj0 + (j1 - j0)];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(geo: &ConvGeometry, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvGeometry {
        batch,
        c_in,
        c_out,
        h,
        w: wd,
        k,
    } = *geo;
    let hw = h * wd;
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for bi in 0..batch {
        for o in 0..c_out {
            let gp = &g[(bi * c_out + o) * hw..][..hw];
            gb[o] += gp.iter().sum::<f64>();
            for c in 0..c_in {
                let xoff = (bi * c_in + c) * hw;
                for u in 0..k {
                    for v in 0..k {
                        let widx = ((o * c_in + c) * k + u) * k + v;
                        let wv = w[widx];
                        let (du, dv) = (u as isize - pad, v as isize - pad);
                        let (rows, j0, j1) = geo.rows(du, dv);
                        let mut dw = 0.0;
                        for i in rows {
                            let si = (i as isize + du) as usize;
                            let sj0 = (j0 as isize + dv) as usize;
                            let grow = &gp[i * wd + j0..i * wd + j1];
                            let xs = xoff + si * wd + sj0;
                            let xrow = &x[xs..xs + (j1 - j0)];
                            dw += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            let gxrow = &mut gx[xs..xs + (j1 - j0)];
                            gxrow.iter_mut().zip(grow).for_each(|(d, g)| *d += wv * g);
                        }
                        gw[widx] += dw;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel statistics used by [`Var::channel_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, data: Vec<f64>, op: Op) -> Var<'t> {
        let shape = self.value().shape.clone();
        self.tape.push(Tensor { shape, data }, op, &[self.id])
    }

    fn zip_with(&self, other: Var<'t>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len(), "elementwise op on {:?} and {:?}", a.shape, b.shape);
        a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let data = self.zip_with(other, |a, b| a + b);
        let shape = self.value().shape.clone();
        self.tape
            .push(Tensor { shape, data }, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let data = self.zip_with(other, |a, b| a - b);
        let shape = self.value().shape.clone();
        self.tape
            .push(Tensor { shape, data }, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let data = self.zip_with(other, |a, b| a * b);
        let shape = self.value().shape.clone();
        self.tape
            .push(Tensor { shape, data }, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let data = self.value().data.iter().map(|v| v * s).collect();
        self.unary(data, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    fn broadcast_const(&self, c: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let a = self.value();
        let m = c.len();
        assert!(
            m > 0 && a.len().is_multiple_of(m) && a.shape.ends_with(&c.shape),
            "cannot broadcast {:?} against {:?}",
            c.shape,
            a.shape
        );
        a.data.iter().enumerate().map(|(i, v)| f(*v, c.data[i % m])).collect()
    }

    /// `self + c`, with `c` broadcast over leading axes.
    pub fn add_const(&self, c: &Tensor) -> Var<'t> {
        let data = self.broadcast_const(c, |a, b| a + b);
        self.unary(data, Op::AddConst(self.id))
    }

    /// `self * c` elementwise, with `c` broadcast over leading axes.
    pub fn mul_const(&self, c: &Tensor) -> Var<'t> {
        let data = self.broadcast_const(c, |a, b| a * b);
        self.unary(data, Op::MulConst(self.id, Rc::new(c.clone())))
    }

    /// `self * s` for a one-element var `s`.
    pub fn scale_by(&self, s: Var<'t>) -> Var<'t> {
        let sv = s.item();
        let data = self.value().data.iter().map(|v| v * sv).collect();
        let shape = self.value().shape.clone();
        self.tape
            .push(Tensor { shape, data }, Op::ScaleBy(self.id, s.id), &[self.id, s.id])
    }

    /// Repeats a one-element var into a vector of length `len`.
    pub fn broadcast(&self, len: usize) -> Var<'t> {
        let v = self.item();
        self.tape
            .push(Tensor::from_vec(vec![v; len]), Op::Broadcast(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data.iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            v.len(),
            "reshape {:?} -> {:?}",
            v.shape,
            shape
        );
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        self.tape.push(t, Op::Reshape(self.id), &[self.id])
    }

    /// Flat elements at `idx`.
    pub fn gather(&self, idx: &[usize]) -> Var<'t> {
        let v = self.value();
        let data = idx.iter().map(|&i| v.data[i]).collect();
        self.tape.push(
            Tensor::from_vec(data),
            Op::Gather(self.id, Rc::new(idx.to_vec())),
            &[self.id],
        )
    }

    /// Vector of length `len` holding `self[k]` at position `idx[k]`, zero elsewhere.
    pub fn scatter(&self, idx: &[usize], len: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.len(), idx.len());
        let mut data = vec![0.0; len];
        for (&i, x) in idx.iter().zip(&v.data) {
            data[i] += x;
        }
        self.tape.push(
            Tensor::from_vec(data),
            Op::Scatter(self.id, Rc::new(idx.to_vec())),
            &[self.id],
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Var<'t> {
        let t = self.value().slice0(start, end);
        self.tape.push(t, Op::Slice0 { x: self.id, start }, &[self.id])
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2);
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data[i * c + j];
            }
        }
        self.tape.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(self.id),
            &[self.id],
        )
    }

    /// `A v` for `self = A` of shape [n, m].
    pub fn matvec(&self, v: Var<'t>) -> Var<'t> {
        let (a, x) = (self.value(), v.value());
        let (n, m) = (a.shape[0], a.shape[1]);
        assert_eq!(x.len(), m, "matvec: {:?} x {:?}", a.shape, x.shape);
        let data = (0..n)
            .map(|i| a.data[i * m..(i + 1) * m].iter().zip(&x.data).map(|(p, q)| p * q).sum())
            .collect();
        self.tape
            .push(Tensor::from_vec(data), Op::MatVec(self.id, v.id), &[self.id, v.id])
    }

    /// `A^T r` for `self = A` of shape [n, m].
    pub fn matvec_t(&self, r: Var<'t>) -> Var<'t> {
        let (a, x) = (self.value(), r.value());
        let (n, m) = (a.shape[0], a.shape[1]);
        assert_eq!(x.len(), n, "matvec_t: {:?} x {:?}", a.shape, x.shape);
        let mut data = vec![0.0; m];
        for i in 0..n {
            let xi = x.data[i];
            data.iter_mut()
                .zip(&a.data[i * m..(i + 1) * m])
                .for_each(|(d, a)| *d += a * xi);
        }
        self.tape
            .push(Tensor::from_vec(data), Op::MatVecT(self.id, r.id), &[self.id, r.id])
    }

    /// Columns `cols` of a [n, p] matrix, as [n, cols.len()].
    pub fn gather_cols(&self, cols: &[usize]) -> Var<'t> {
        let a = self.value();
        let (n, p) = (a.shape[0], a.shape[1]);
        let m = cols.len();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(cols.iter().map(|&j| a.data[i * p + j]));
        }
        self.tape.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::GatherCols(self.id, Rc::new(cols.to_vec())),
            &[self.id],
        )
    }

    /// Stride-1 convolution with zero padding `k / 2`, preserving spatial size.
    ///
    /// `self` is [C_in, H, W] or [B, C_in, H, W]; `weight` is [C_out, C_in, k, k]
    /// with odd `k`; `bias` is [C_out].
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.ndim() != 3 && x.ndim() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input must be 3-D or 4-D, got {:?}", x.shape),
            ));
        }
        if w.ndim() != 4 || w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be [C_out, C_in, k, k] with odd k, got {:?}", w.shape),
            ));
        }
        let geo = ConvGeometry::of(&x.shape, &w.shape);
        if w.shape[1] != geo.c_in {
            return Err(Error::dim(
                "conv2d",
                format!("axis C_in: input has {}, kernel has {}", geo.c_in, w.shape[1]),
            ));
        }
        if b.shape != [geo.c_out] {
            return Err(Error::dim(
                "conv2d",
                format!("axis C_out: kernel has {}, bias shape {:?}", geo.c_out, b.shape),
            ));
        }
        let data = conv2d_forward(&geo, &x.data, &w.data, &b.data);
        let mut shape = x.shape.clone();
        let nd = shape.len();
        shape[nd - 3] = geo.c_out;
        Ok(self.tape.push(
            Tensor { shape, data },
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the lowest linear index.
    pub fn maxpool2x2(&self) -> Result<(Var<'t>, PoolIndices)> {
        let x = self.value();
        if x.ndim() < 2 {
            return Err(Error::dim(
                "maxpool2x2",
                format!("need spatial axes, got {:?}", x.shape),
            ));
        }
        let (planes, h, w) = planes_hw(&x.shape);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("maxpool2x2", format!("H={} W={} must both be even", h, w)));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(planes * oh * ow);
        let mut idx = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let xp = &x.data[pl * h * w..(pl + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (2 * i) * w + 2 * j;
                    for cand in [
                        (2 * i) * w + 2 * j + 1,
                        (2 * i + 1) * w + 2 * j,
                        (2 * i + 1) * w + 2 * j + 1,
                    ] {
                        if xp[cand] > xp[best] {
                            best = cand;
                        }
                    }
                    data.push(xp[best]);
                    idx.push(best);
                }
            }
        }
        let mut shape = x.shape.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let idx = Rc::new(idx);
        let out = self.tape.push(
            Tensor { shape, data },
            Op::MaxPool {
                x: self.id,
                idx: idx.clone(),
            },
            &[self.id],
        );
        Ok((
            out,
            PoolIndices {
                input_shape: x.shape.clone(),
                indices: idx,
            },
        ))
    }

    /// Inverse of [`Var::maxpool2x2`]: places each value at its recorded
    /// winner position and zero elsewhere.
    pub fn max_unpool2x2(&self, indices: &PoolIndices) -> Result<Var<'t>> {
        let y = self.value();
        let out_shape = &indices.input_shape;
        if out_shape.len() < 2 || y.ndim() != out_shape.len() {
            return Err(Error::dim(
                "max_unpool2x2",
                format!("pooled {:?} vs output {:?}", y.shape, out_shape),
            ));
        }
        let nd = out_shape.len();
        let mut expect = out_shape.clone();
        expect[nd - 2] /= 2;
        expect[nd - 1] /= 2;
        if y.shape != expect || !out_shape[nd - 2].is_multiple_of(2) || !out_shape[nd - 1].is_multiple_of(2) {
            return Err(Error::dim(
                "max_unpool2x2",
                format!("pooled {:?} does not match output {:?}", y.shape, out_shape),
            ));
        }
        let (planes, h, w) = planes_hw(out_shape);
        let cells = (h / 2) * (w / 2);
        if indices.indices.len() != planes * cells {
            return Err(Error::Corruption(format!(
                "{} indices for {} pooled cells",
                indices.indices.len(),
                planes * cells
            )));
        }
        let mut data = vec![0.0; planes * h * w];
        for pl in 0..planes {
            for c in 0..cells {
                let k = indices.indices[pl * cells + c];
                if k >= h * w {
                    return Err(Error::Corruption(format!("index {} outside a {}x{} plane", k, h, w)));
                }
                data[pl * h * w + k] = y.data[pl * cells + c];
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: out_shape.clone(),
                data,
            },
            Op::Unpool {
                y: self.id,
                idx: indices.indices.clone(),
            },
            &[self.id],
        ))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise; derivative at 0 is 1.
    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let data = self
            .value()
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        self.unary(data, Op::LeakyRelu(self.id, slope))
    }

    /// Per-channel affine normalization of a [C,H,W] or [B,C,H,W] input.
    ///
    /// With `stats = None` the batch statistics over (B, H, W) are used and
    /// returned; either way mean and variance are constants for backward.
    pub fn channel_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: Option<&ChannelStats>,
    ) -> Result<(Var<'t>, ChannelStats)> {
        let x = self.value();
        if x.ndim() != 3 && x.ndim() != 4 {
            return Err(Error::dim(
                "channel_norm",
                format!("input must be 3-D or 4-D, got {:?}", x.shape),
            ));
        }
        let (b, c, hw) = batch_channels(&x.shape);
        let (g, bt) = (gamma.value(), beta.value());
        if g.shape != [c] || bt.shape != [c] {
            return Err(Error::dim(
                "channel_norm",
                format!("{} channels, gamma {:?}, beta {:?}", c, g.shape, bt.shape),
            ));
        }
        let stats = match stats {
            Some(s) => s.clone(),
            None => {
                let count = (b * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        mean[ch] += x.data[off..off + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        var[ch] += x.data[off..off + hw]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                ChannelStats { mean, var }
            }
        };
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut data = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (m, s) = (stats.mean[ch], inv_std[ch] * g.data[ch]);
                for k in off..off + hw {
                    data[k] = (x.data[k] - m) * s + bt.data[ch];
                }
            }
        }
        let out = self.tape.push(
            Tensor {
                shape: x.shape.clone(),
                data,
            },
            Op::ChannelNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: stats.mean.clone(),
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        );
        Ok((out, stats))
    }

    /// Same value as a fresh leaf: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf((*self.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3]).len(), 6);
    }

    #[test]
    fn conv_zero_input_gives_bias_planes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5, 4]));
        let w = tape.leaf(Tensor::full(&[3, 2, 3, 3], 0.7));
        let b = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let y = x.conv2d(w, b).unwrap().value();
        assert_eq!(y.shape(), &[3, 5, 4]);
        for (o, bias) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!(y.data()[o * 20..(o + 1) * 20].iter().all(|v| v == bias));
        }
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let tape = Tape::new();
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        img[3] = -2.5;
        let x = tape.leaf(t(&[1, 5, 5], &img));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(t(&[1, 1, 3, 3], &k));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert_eq!(x.conv2d(w, b).unwrap().value().data(), &img[..]);
    }

    #[test]
    fn conv_ones_counts_neighbours() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b).unwrap().value();
        // brute force over the zero-padded input
        for i in 0..4i32 {
            for j in 0..4i32 {
                let mut n = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        if (0..4).contains(&(i + di)) && (0..4).contains(&(j + dj)) {
                            n += 1.0;
                        }
                    }
                }
                assert_eq!(y.at(&[0, i as usize, j as usize]), n);
            }
        }
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let err = x.conv2d(w, b).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let w = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(x.conv2d(w, b).is_err());
    }

    #[test]
    fn maxpool_single_block_and_ties() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let (y, idx) = x.maxpool2x2().unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        assert_eq!(*idx.indices, vec![3]);

        let x = tape.leaf(Tensor::full(&[1, 4, 4], 2.0));
        let (y, idx) = x.maxpool2x2().unwrap();
        assert!(y.value().data().iter().all(|&v| v == 2.0));
        // lowest linear index of each block: top-left corners
        assert_eq!(*idx.indices, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_rejects_odd_sizes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(x.maxpool2x2(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn maxpool_gradient_hits_winners_only() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 4], &[1.0, 5.0, 0.0, -1.0, 2.0, 3.0, 7.0, 6.0]));
        let (y, _) = x.maxpool2x2().unwrap();
        let g = tape.backward(y.sum()).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn unpool_places_values() {
        let tape = Tape::new();
        let y = tape.leaf(t(&[1, 1, 1], &[4.0]));
        let idx = PoolIndices {
            input_shape: vec![1, 2, 2],
            indices: Rc::new(vec![3]),
        };
        assert_eq!(y.max_unpool2x2(&idx).unwrap().value().data(), &[0.0, 0.0, 0.0, 4.0]);
        let bad = PoolIndices {
            input_shape: vec![1, 2, 2],
            indices: Rc::new(vec![9]),
        };
        assert!(matches!(y.max_unpool2x2(&bad), Err(Error::Corruption(_))));
    }

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, -2.0, 0.0]));
        assert_eq!(x.leaky_relu(0.01).value().data(), &[2.0, -0.02, 0.0]);
        let g = tape.backward(x.leaky_relu(0.01).sum()).unwrap().wrt(x);
        assert_eq!(g.data(), &[1.0, 0.01, 1.0]);
    }

    #[test]
    fn backward_simple_rules() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let g = tape.backward(x.mul(x)).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);

        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(Tensor::from_vec(vec![4.0, -5.0, 6.0]));
        let g = tape.backward(a.mul(b).sum()).unwrap();
        assert_eq!(g.wrt(a).data(), b.value().data());
        let unused = tape.leaf(Tensor::zeros(&[2]));
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.5, -1.5]));
        let s = x.square();
        // f = sum(s * s) + sum(s) shares s
        let f = s.mul(s).sum().add(s.sum());
        let shared = tape.backward(f).unwrap().wrt(x);
        // unshared rewrite: f = sum(x^4) + sum(x^2)
        let tape2 = Tape::new();
        let x2 = tape2.leaf(x.value().as_ref().clone());
        let q1 = x2.square().mul(x2.square());
        let f2 = q1.sum().add(x2.mul(x2).sum());
        let unshared = tape2.backward(f2).unwrap().wrt(x2);
        for (a, b) in shared.data().iter().zip(unshared.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((shared.data()[0] - (4.0 * 0.125 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = x.mul(x.detach());
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 2.0);
    }
}
