//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Vectors are
//! represented as `1 × n` matrices and scalars as `1 × 1`. Parameters enter
//! the tape through [`Tape::param`], which records the parameter id so that
//! [`Tape::accumulate_param_grads`] can route gradients back to the store.
//!
//! Shape errors inside the tape are programmer errors and panic; public
//! entry points validate user-facing shapes before building a graph.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::ops::{gelu, gelu_grad, sigmoid};
use super::params::{GradBuffer, ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose backward pass is supplied by the caller.
///
/// `backward` receives the gradient of the output and returns the gradient
/// of the single input.
pub trait CustomBackward: Send + Sync {
    fn backward(&self, grad_out: &Mat) -> Mat;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LeftMul(Arc<Mat>, Var),
    ShiftRows(Var, isize),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    Custom(Var, Box<dyn CustomBackward>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape when `v` is disconnected.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(tape.value(v).dim()))
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn same_shape(op: &str, a: &Mat, b: &Mat) {
    assert_eq!(
        a.dim(),
        b.dim(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar(): node is {:?}", m.dim());
        m[[0, 0]]
    }

    /// A constant input (no gradient is routed anywhere).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul: inner dims {:?} · {:?}",
            av.dim(),
            bv.dim()
        );
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.ncols(),
            "matmul_t: inner dims {:?} · {:?}ᵀ",
            av.dim(),
            bv.dim()
        );
        let out = av.dot(&bv.t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape("add", self.value(a), self.value(b));
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape("sub", self.value(a), self.value(b));
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(
            rv.nrows() == 1 && rv.ncols() == av.ncols(),
            "add_row: {:?} + {:?}",
            av.dim(),
            rv.dim()
        );
        let out = av + rv;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape("mul", self.value(a), self.value(b));
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by a `1 × m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(
            rv.nrows() == 1 && rv.ncols() == av.ncols(),
            "mul_row: {:?} * {:?}",
            av.dim(),
            rv.dim()
        );
        let out = av * rv;
        self.push(out, Op::MulRow(a, row))
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        same_shape("mul_const", self.value(a), &c);
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies `a` by a learnable `1 × 1` scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a) * sv;
        self.push(out, Op::ScaleBy(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × m`).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let m = xv.ncols();
        assert_eq!(self.shape(gamma), (1, m), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, m), "layer_norm: beta shape");
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / m as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` of the output is row `idx[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros((idx.len(), av.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&av.row(j));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Left-multiplies by a constant matrix (pooling, resampling).
    pub fn left_mul(&mut self, p: Arc<Mat>, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(p.ncols(), av.nrows(), "left_mul: {:?} · {:?}", p.dim(), av.dim());
        let out = p.dot(av);
        self.push(out, Op::LeftMul(p, a))
    }

    /// `out[i] = a[i - offset]`, zero where out of range.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let av = self.value(a);
        let n = av.nrows() as isize;
        let mut out = Mat::zeros(av.dim());
        for i in 0..n {
            let j = i - offset;
            if (0..n).contains(&j) {
                out.row_mut(i as usize).assign(&av.row(j as usize));
            }
        }
        self.push(out, Op::ShiftRows(a, offset))
    }

    /// Column means, as a `1 × m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av
            .mean_axis(Axis(0))
            .expect("mean_rows: empty matrix")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Row-major reshape to `rows × cols` (element count must match).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape: {:?} -> ({rows}, {cols})", av.dim());
        let data: Vec<f64> = av.iter().copied().collect();
        let out = Mat::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(out, Op::Reshape(a))
    }

    pub fn custom(&mut self, input: Var, value: Mat, backward: Box<dyn CustomBackward>) -> Var {
        self.push(value, Op::Custom(input, backward))
    }

    /// `x · W + b` with `W: in × out`, `b: 1 × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse sweep from the given output seeds.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            same_shape("backward seed", self.value(*v), g);
            accum(&mut grads, *v, g.clone());
        }
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Convenience: backward from a scalar node with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> Grads {
        self.backward(&[(loss, Mat::from_elem((1, 1), 1.0))])
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let ga = g.dot(self.value(*b));
                let gb = g.t().dot(self.value(*a));
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, -g);
            }
            Op::AddRow(a, r) => {
                accum(grads, *a, g.clone());
                accum(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                accum(grads, *a, g * self.value(*b));
                accum(grads, *b, g * self.value(*a));
            }
            Op::MulRow(a, r) => {
                accum(grads, *a, g * self.value(*r));
                let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accum(grads, *r, gr);
            }
            Op::MulConst(a, c) => accum(grads, *a, g * c),
            Op::Scale(a, c) => accum(grads, *a, g * *c),
            Op::ScaleBy(a, sv) => {
                let s = self.scalar(*sv);
                accum(grads, *a, g * s);
                let gs = (g * self.value(*a)).sum();
                accum(grads, *sv, Mat::from_elem((1, 1), gs));
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| *gv *= gelu_grad(x));
                accum(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|gv, &y| *gv *= y * (1.0 - y));
                accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|gv, &y| *gv *= 1.0 - y * y);
                accum(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|gv, &yv| *gv -= yv * dot);
                }
                accum(grads, *a, ga);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                accum(
                    grads,
                    *gamma,
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accum(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gam;
                let m = xhat.ncols() as f64;
                let mut gx = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let mean_dh = dh.sum() / m;
                    let mean_dh_xh = dh.dot(&xh) / m;
                    let mut out = gx.row_mut(r);
                    for c in 0..xhat.ncols() {
                        out[c] = rstd[r] * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                    }
                }
                accum(grads, *x, gx);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Mat::zeros(self.value(*a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accum(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Mat::zeros(self.value(*a).dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accum(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    accum(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    accum(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Mat::zeros(self.value(*a).dim());
                for (i, &j) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(j);
                    row += &g.row(i);
                }
                accum(grads, *a, ga);
            }
            Op::LeftMul(p, a) => accum(grads, *a, p.t().dot(g)),
            Op::ShiftRows(a, offset) => {
                let n = g.nrows() as isize;
                let mut ga = Mat::zeros(g.dim());
                for i in 0..n {
                    let j = i - offset;
                    if (0..n).contains(&j) {
                        ga.row_mut(j as usize).assign(&g.row(i as usize));
                    }
                }
                accum(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows();
                let row = g.row(0).mapv(|v| v / n as f64);
                let ga = row
                    .broadcast((n, g.ncols()))
                    .expect("mean_rows broadcast")
                    .to_owned();
                accum(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                accum(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let data: Vec<f64> = g.iter().copied().collect();
                let ga = Mat::from_shape_vec(self.value(*a).dim(), data).expect("reshape grad");
                accum(grads, *a, ga);
            }
            Op::Custom(a, bw) => accum(grads, *a, bw.backward(g)),
        }
    }

    /// Adds the gradients of every parameter leaf into `buffer`.
    pub fn accumulate_param_grads(&self, grads: &Grads, buffer: &mut GradBuffer) {
        let mut entries: Vec<_> = self.param_vars.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (&id, &v) in entries {
            if let Some(g) = grads.get(v) {
                buffer.add(id, g);
            }
        }
    }
}

fn accum(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
