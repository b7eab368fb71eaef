//! Define-by-run tape. Every primitive evaluates eagerly, appends a node,
//! and knows how to push its output gradient back to its operands.

use std::ops::Index;

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::float::{gemm, Float};
use crate::kernels::{self, axis_tap, col2im, ea_ray, ea_ray_backward, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Trilinear,
}

#[derive(Debug, Clone)]
enum Op<F: Float> {
    Leaf,
    Param(ParamId),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: F },
    Shift { x: Var },
    Unary { kind: UnaryKind, x: Var },
    Matmul { a: Var, b: Var },
    Conv { x: Var, w: Var, batch: usize, geom: ConvGeom },
    Upsample { x: Var, mode: UpsampleMode },
    Trilinear { grid: Var, points: Var, lo: f64, hi: f64 },
    Bilinear { fmap: Var, coords: Var, valid: Vec<bool> },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    Softmax { x: Var },
    Composite { sigma: Var, rgb: Var, delta: Vec<F> },
    ScatterRows { x: Var, index: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Parameter handles produced by [`Tape::bind`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F: Float> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter the loss actually depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    /// Adds each parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast layout of a binary op with runs of axes sharing one broadcast
/// pattern merged, so the innermost loop is as long as possible.
struct Broadcast {
    /// Per outer row: offsets of the row's first element in `a` and `b`.
    rows: Vec<(usize, usize)>,
    inner: usize,
    /// Inner-loop strides (0 or 1).
    step_a: usize,
    step_b: usize,
}

impl Broadcast {
    fn new(out: &[usize], sa: &[usize], sb: &[usize]) -> Self {
        let mut dims: Vec<(usize, bool, bool)> = Vec::new();
        for ax in 0..out.len() {
            if out[ax] == 1 {
                continue;
            }
            let key = (sa[ax] == 1, sb[ax] == 1);
            match dims.last_mut() {
                Some(last) if (last.1, last.2) == key => last.0 *= out[ax],
                _ => dims.push((out[ax], key.0, key.1)),
            }
        }
        let (inner, step_a, step_b) = match dims.pop() {
            Some((n, ba, bb)) => (n, (!ba) as usize, (!bb) as usize),
            None => (1, 0, 0),
        };
        let operand = |bcast: fn(&(usize, bool, bool)) -> bool, inner_full: bool| {
            let shape: Vec<usize> = dims.iter().map(|d| if bcast(d) { 1 } else { d.0 }).collect();
            let mut st = strides(&shape);
            let tail = if inner_full { inner } else { 1 };
            st.iter_mut().for_each(|v| *v *= tail);
            dims.iter()
                .zip(st)
                .map(|(d, s)| if bcast(d) { 0 } else { s })
                .collect::<Vec<usize>>()
        };
        let ea = operand(|d| d.1, step_a == 1);
        let eb = operand(|d| d.2, step_b == 1);
        let outer: Vec<usize> = dims.iter().map(|d| d.0).collect();
        let total = outer.iter().product::<usize>();
        let mut rows = Vec::with_capacity(total);
        let mut idx = vec![0usize; outer.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..total {
            rows.push((oa, ob));
            for ax in (0..outer.len()).rev() {
                idx[ax] += 1;
                oa += ea[ax];
                ob += eb[ax];
                if idx[ax] < outer[ax] {
                    break;
                }
                oa -= ea[ax] * idx[ax];
                ob -= eb[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Self {
            rows,
            inner,
            step_a,
            step_b,
        }
    }

    /// Calls `f(k, i, j)` for output index `k` and operand offsets `i`, `j`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut k = 0;
        for &(ra, rb) in &self.rows {
            for e in 0..self.inner {
                f(k, ra + e * self.step_a, rb + e * self.step_b);
                k += 1;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.zero_grad();
        self.push(value, Op::Param(id), true)
    }

    /// Records every parameter of `store` once.
    pub fn bind(&mut self, store: &ParamStore<F>) -> Bound {
        Bound(store.ids().map(|id| self.param(store, id)).collect())
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ----- elementwise -----

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<F> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = Vec::with_capacity(numel(&out_shape));
            Broadcast::new(&out_shape, &sa, &sb).for_each(|_, i, j| data.push(f(da[i], db[j])));
            data
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary { kind, a, b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.map_value(x, |v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let value = self.map_value(x, |v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Shift { x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    fn map_value(&self, x: Var, f: impl Fn(F) -> F + Sync) -> Tensor<F> {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = match kind {
            UnaryKind::Exp => self.map_value(x, |v| v.exp()),
            UnaryKind::Log => self.map_value(x, |v| v.ln()),
            UnaryKind::Tanh => self.map_value(x, |v| v.tanh()),
            UnaryKind::Sigmoid => self.map_value(x, sigmoid),
            UnaryKind::Softplus => self.map_value(x, softplus),
            UnaryKind::LeakyRelu(slope) => {
                let s = F::of(slope);
                self.map_value(x, move |v| if v > F::zero() { v } else { v * s })
            }
            UnaryKind::Square => self.map_value(x, |v| v * v),
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    // ----- reductions & layout -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range"), &shape));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if numel(src) != numel(shape) {
            return Err(shape_err("reshape", src, shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(invalid("transpose", "expected a matrix", &shape));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.data(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| invalid("concat", "no operands", &[]))?;
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range"), &first));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis}", start + len),
                &shape,
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, rg)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul { a, b },
            rg,
        ))
    }

    fn conv(&mut self, x: Var, w: Var, batch: usize, geom: ConvGeom, out_channels: usize, out_shape: Vec<usize>) -> Var {
        let od = geom.out_dims().expect("checked by caller");
        let n_out: usize = od.iter().product();
        let rows = geom.col_rows();
        let mut col = vec![F::zero(); rows * n_out];
        let mut out = vec![F::zero(); batch * out_channels * n_out];
        let item = geom.in_channels * geom.in_volume();
        for b in 0..batch {
            im2col(&self.data(x)[b * item..(b + 1) * item], &geom, &mut col);
            gemm(
                out_channels,
                rows,
                n_out,
                self.data(w),
                false,
                &col,
                false,
                &mut out[b * out_channels * n_out..(b + 1) * out_channels * n_out],
                false,
            );
        }
        let rg = self.rg(&[x, w]);
        self.push(Tensor::from_parts(out_shape, out), Op::Conv { x, w, batch, geom }, rg)
    }

    /// 2D convolution of `[N, C, H, W]` with `[Cout, C, k, k]` weights, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            in_channels: sx[1],
            in_dims: [1, sx[2], sx[3]],
            kernel: [1, sw[2], sw[3]],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        };
        let od = geom
            .out_dims()
            .ok_or_else(|| shape_err("conv2d", &sx, &sw))?;
        let out_shape = vec![sx[0], sw[0], od[1], od[2]];
        Ok(self.conv(x, w, sx[0], geom, sw[0], out_shape))
    }

    /// 3D convolution of `[C, D, H, W]` with `[Cout, C, k, k, k]` weights, no bias.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sx[0] != sw[1] {
            return Err(shape_err("conv3d", &sx, &sw));
        }
        let geom = ConvGeom {
            in_channels: sx[0],
            in_dims: [sx[1], sx[2], sx[3]],
            kernel: [sw[2], sw[3], sw[4]],
            stride: [stride; 3],
            pad: [pad; 3],
        };
        let od = geom
            .out_dims()
            .ok_or_else(|| shape_err("conv3d", &sx, &sw))?;
        let out_shape = vec![sw[0], od[0], od[1], od[2]];
        Ok(self.conv(x, w, 1, geom, sw[0], out_shape))
    }

    /// ×2 upsampling of `[C, D, H, W]`.
    pub fn upsample3d(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample3d", "expected [C, D, H, W]", &s));
        }
        let out_shape = vec![s[0], 2 * s[1], 2 * s[2], 2 * s[3]];
        let mut out = vec![F::zero(); numel(&out_shape)];
        let src = self.data(x);
        upsample_apply(&s, mode, |i, dst, w| out[dst] += F::of(w) * src[i]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Upsample { x, mode }, rg))
    }

    // ----- sampling -----

    /// Trilinear sampling of a `[C, S0, S1, S2]` grid at world points `[N, 3]`.
    ///
    /// The grid fills the cube `[lo, hi]³`; voxel centers sit at half-cell
    /// offsets and samples beyond the outermost centers clamp to the edge.
    /// Output is `[N, C]`.
    pub fn sample_trilinear(&mut self, grid: Var, points: Var, lo: f64, hi: f64) -> Result<Var> {
        let sg = self.shape(grid).to_vec();
        let sp = self.shape(points).to_vec();
        if sg.len() != 4 || sp.len() != 2 || sp[1] != 3 || hi <= lo {
            return Err(shape_err("sample_trilinear", &sg, &sp));
        }
        let c = sg[0];
        let n = sp[0];
        let g = self.data(grid);
        let p = self.data(points);
        let mut out = vec![F::zero(); n * c];
        out.par_chunks_mut(c.max(1)).enumerate().for_each(|(i, row)| {
            let corners = trilinear_corners(&sg, &p[3 * i..3 * i + 3], lo, hi);
            let vol = sg[1] * sg[2] * sg[3];
            for (off, w) in corners.weights() {
                let w = F::of(w);
                for (ch, r) in row.iter_mut().enumerate() {
                    *r += w * g[ch * vol + off];
                }
            }
        });
        let rg = self.rg(&[grid, points]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::Trilinear {
                grid,
                points,
                lo,
                hi,
            },
            rg,
        ))
    }

    /// Bilinear sampling of a `[C, H, W]` map at pixel coordinates `[N, 2]`
    /// given as `(u, v)` with pixel centers at `+0.5`. Rows whose `valid`
    /// flag is false come back as zeros. Output is `[N, C]`.
    pub fn sample_bilinear(&mut self, fmap: Var, coords: Var, valid: Vec<bool>) -> Result<Var> {
        let sf = self.shape(fmap).to_vec();
        let sc = self.shape(coords).to_vec();
        if sf.len() != 3 || sc.len() != 2 || sc[1] != 2 || valid.len() != sc[0] {
            return Err(shape_err("sample_bilinear", &sf, &sc));
        }
        let (c, n) = (sf[0], sc[0]);
        let f = self.data(fmap);
        let uv = self.data(coords);
        let mut out = vec![F::zero(); n * c];
        out.par_chunks_mut(c.max(1)).enumerate().for_each(|(i, row)| {
            if !valid[i] {
                return;
            }
            let b = bilinear_corners(&sf, &uv[2 * i..2 * i + 2]);
            let plane = sf[1] * sf[2];
            for (off, w) in b.weights() {
                let w = F::of(w);
                for (ch, r) in row.iter_mut().enumerate() {
                    *r += w * f[ch * plane + off];
                }
            }
        });
        let rg = self.rg(&[fmap, coords]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::Bilinear {
                fmap,
                coords,
                valid,
            },
            rg,
        ))
    }

    // ----- rendering -----

    /// Emission-absorption compositing. `sigma` holds `[R, S]` densities,
    /// `rgb` holds `[R, S, 3]` colors (any shapes with those sizes), and
    /// `delta[r]` is ray `r`'s step length. Output `[R, 4]` is
    /// `(r, g, b, residual transmittance)` per ray.
    pub fn ea_composite(&mut self, sigma: Var, rgb: Var, delta: Vec<F>) -> Result<Var> {
        let rays = delta.len();
        let ns = self.value(sigma).len();
        let nc = self.value(rgb).len();
        if rays == 0 || ns % rays != 0 || nc != 3 * ns {
            return Err(shape_err("ea_composite", self.shape(sigma), self.shape(rgb)));
        }
        let samples = ns / rays;
        let s = self.data(sigma);
        let c = self.data(rgb);
        let mut out = vec![F::zero(); rays * 4];
        out.par_chunks_mut(4).enumerate().for_each(|(r, o)| {
            let (col, t) = ea_ray(
                &s[r * samples..(r + 1) * samples],
                &c[3 * r * samples..3 * (r + 1) * samples],
                delta[r],
            );
            o[..3].copy_from_slice(&col);
            o[3] = t;
        });
        let rg = self.rg(&[sigma, rgb]);
        Ok(self.push(
            Tensor::from_parts(vec![rays, 4], out),
            Op::Composite { sigma, rgb, delta },
            rg,
        ))
    }

    /// Places row `i` of `[R, C]` at row `index[i]` of a zero `[rows, C]`.
    pub fn scatter_rows(&mut self, x: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= rows) {
            return Err(invalid("scatter_rows", "index does not match rows", &s));
        }
        let c = s[1];
        let src = self.data(x);
        let mut out = vec![F::zero(); rows * c];
        for (i, &dst) in index.iter().enumerate() {
            add_into(&mut out[dst * c..(dst + 1) * c], &src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterRows { x, index },
            rg,
        ))
    }

    // ----- backward -----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("backward"));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
            }
        }
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads, params })
    }

    /// Slot for `v`'s gradient, or `None` when it needs none.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut [F]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.len()]))
    }

    fn backward_op(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let bc = Broadcast::new(out.shape(), &sa, &sb);
                let (va, vb) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(grads, a) {
                    bc.for_each(|k, i, j| {
                        da[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[k],
                            BinaryKind::Mul => g[k] * vb[j],
                            BinaryKind::Div => g[k] / vb[j],
                        };
                    });
                }
                if let Some(db) = self.slot(grads, b) {
                    bc.for_each(|k, i, j| {
                        db[j] += match kind {
                            BinaryKind::Add => g[k],
                            BinaryKind::Sub => -g[k],
                            BinaryKind::Mul => g[k] * va[i],
                            BinaryKind::Div => -g[k] * va[i] / (vb[j] * vb[j]),
                        };
                    });
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *factor);
                }
            }
            Op::Shift { x } | Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.data(*x);
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for k in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Exp => y[k],
                            UnaryKind::Log => F::one() / xv[k],
                            UnaryKind::Tanh => F::one() - y[k] * y[k],
                            UnaryKind::Sigmoid => y[k] * (F::one() - y[k]),
                            UnaryKind::Softplus => sigmoid(xv[k]),
                            UnaryKind::LeakyRelu(s) => {
                                if xv[k] > F::zero() {
                                    F::one()
                                } else {
                                    F::of(*s)
                                }
                            }
                            UnaryKind::Square => F::of(2.0) * xv[k],
                        };
                        dx[k] += g[k] * d;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, vb, true, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, va, true, g, false, db, true);
                }
            }
            Op::Conv { x, w, batch, geom } => {
                let od = geom.out_dims().expect("valid conv geometry");
                let n_out: usize = od.iter().product();
                let rows = geom.col_rows();
                let cout = self.shape(*w)[0];
                let item = geom.in_channels * geom.in_volume();
                let xv = self.data(*x);
                let wv = self.data(*w);
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut col = vec![F::zero(); rows * n_out];
                for b in 0..*batch {
                    let gb = &g[b * cout * n_out..(b + 1) * cout * n_out];
                    if need_w {
                        im2col(&xv[b * item..(b + 1) * item], geom, &mut col);
                        let dw = self.slot(grads, *w).expect("requires grad");
                        gemm(cout, n_out, rows, gb, false, &col, true, dw, true);
                    }
                    if need_x {
                        gemm(rows, cout, n_out, wv, true, gb, false, &mut col, false);
                        let dx = self.slot(grads, *x).expect("requires grad");
                        col2im(&col, geom, &mut dx[b * item..(b + 1) * item]);
                    }
                }
            }
            Op::Upsample { x, mode } => {
                let s = self.shape(*x).to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    upsample_apply(&s, *mode, |i, dst, w| dx[i] += F::of(w) * g[dst]);
                }
            }
            Op::Trilinear {
                grid,
                points,
                lo,
                hi,
            } => {
                let sg = self.shape(*grid).to_vec();
                let c = sg[0];
                let vol = sg[1] * sg[2] * sg[3];
                let p = self.data(*points);
                let gv = self.data(*grid);
                let n = p.len() / 3;
                if let Some(dgrid) = self.slot(grads, *grid) {
                    for i in 0..n {
                        let corners = trilinear_corners(&sg, &p[3 * i..3 * i + 3], *lo, *hi);
                        let gi = &g[i * c..(i + 1) * c];
                        for (off, w) in corners.weights() {
                            let w = F::of(w);
                            for ch in 0..c {
                                dgrid[ch * vol + off] += w * gi[ch];
                            }
                        }
                    }
                }
                if let Some(dp) = self.slot(grads, *points) {
                    for i in 0..n {
                        let corners = trilinear_corners(&sg, &p[3 * i..3 * i + 3], *lo, *hi);
                        let gi = &g[i * c..(i + 1) * c];
                        for axis in 0..3 {
                            for (off, w) in corners.axis_derivative(axis) {
                                let w = F::of(w);
                                let s = (0..c).fold(F::zero(), |s, ch| s + gi[ch] * gv[ch * vol + off]);
                                dp[3 * i + axis] += w * s;
                            }
                        }
                    }
                }
            }
            Op::Bilinear {
                fmap,
                coords,
                valid,
            } => {
                let sf = self.shape(*fmap).to_vec();
                let c = sf[0];
                let plane = sf[1] * sf[2];
                let uv = self.data(*coords);
                let fv = self.data(*fmap);
                if let Some(df) = self.slot(grads, *fmap) {
                    for (i, _) in valid.iter().enumerate().filter(|(_, &ok)| ok) {
                        let b = bilinear_corners(&sf, &uv[2 * i..2 * i + 2]);
                        let gi = &g[i * c..(i + 1) * c];
                        for (off, w) in b.weights() {
                            let w = F::of(w);
                            for ch in 0..c {
                                df[ch * plane + off] += w * gi[ch];
                            }
                        }
                    }
                }
                if let Some(dc) = self.slot(grads, *coords) {
                    for (i, _) in valid.iter().enumerate().filter(|(_, &ok)| ok) {
                        let b = bilinear_corners(&sf, &uv[2 * i..2 * i + 2]);
                        let gi = &g[i * c..(i + 1) * c];
                        for axis in 0..2 {
                            for (off, w) in b.axis_derivative(axis) {
                                let w = F::of(w);
                                let s = (0..c).fold(F::zero(), |s, ch| s + gi[ch] * fv[ch * plane + off]);
                                dc[2 * i + axis] += w * s;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for k in 0..n {
                            add_into(
                                &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner],
                                &g[o * inner..(o + 1) * inner],
                            );
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if let Some(dv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            add_into(
                                &mut dv[o * n * inner..(o + 1) * n * inner],
                                &g[src..src + n * inner],
                            );
                        }
                    }
                    start += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = out.shape()[*axis];
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        add_into(
                            &mut dx[(o * n + start) * inner..(o * n + start + len) * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Transpose { x } => {
                let s = self.shape(*x).to_vec();
                let (r, c) = (s[0], s[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let n = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (gy, yy)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot = gy.iter().zip(yy).fold(F::zero(), |s, (&a, &b)| s + a * b);
                        for k in 0..n {
                            dx[r * n + k] += yy[k] * (gy[k] - dot);
                        }
                    }
                }
            }
            Op::Composite { sigma, rgb, delta } => {
                let rays = delta.len();
                let samples = self.value(*sigma).len() / rays;
                let s = self.data(*sigma);
                let c = self.data(*rgb);
                let need_s = self.nodes[sigma.0].requires_grad;
                let need_c = self.nodes[rgb.0].requires_grad;
                let mut ds = vec![F::zero(); if need_s { s.len() } else { 0 }];
                let mut dc = vec![F::zero(); if need_c { c.len() } else { 0 }];
                for r in 0..rays {
                    let gr = &g[4 * r..4 * r + 4];
                    ea_ray_backward(
                        &s[r * samples..(r + 1) * samples],
                        &c[3 * r * samples..3 * (r + 1) * samples],
                        delta[r],
                        [gr[0], gr[1], gr[2]],
                        gr[3],
                        need_s.then(|| &mut ds[r * samples..(r + 1) * samples]),
                        need_c.then(|| &mut dc[3 * r * samples..3 * (r + 1) * samples]),
                    );
                }
                if let Some(slot) = self.slot(grads, *sigma) {
                    add_into(slot, &ds);
                }
                if let Some(slot) = self.slot(grads, *rgb) {
                    add_into(slot, &dc);
                }
            }
            Op::ScatterRows { x, index } => {
                let c = out.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &dst) in index.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[dst * c..(dst + 1) * c]);
                    }
                }
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, a, b)),
        })
        .collect()
}

/// Calls `f(src_index, dst_index, weight)` for every tap of ×2 upsampling.
fn upsample_apply(s: &[usize], mode: UpsampleMode, mut f: impl FnMut(usize, usize, f64)) {
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let dst = ((ch * od + z) * oh + y) * ow + x;
                            let src = ((ch * d + z / 2) * h + y / 2) * w + x / 2;
                            f(src, dst, 1.0);
                        }
                    }
                }
            }
        }
        UpsampleMode::Trilinear => {
            let tz = kernels::upsample_taps(d);
            let ty = kernels::upsample_taps(h);
            let tx = kernels::upsample_taps(w);
            for ch in 0..c {
                for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
                    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let dst = ((ch * od + z) * oh + y) * ow + x;
                            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                        let wt = wz * wy * wx;
                                        if wt != 0.0 {
                                            f(((ch * d + zi) * h + yi) * w + xi, dst, wt);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Corners<const D: usize> {
    taps: [kernels::AxisTap; D],
    strides: [usize; D],
    /// d(grid coordinate)/d(input coordinate) per axis
    scale: [f64; D],
}

impl<const D: usize> Corners<D> {
    fn weights(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..1usize << D).map(move |mask| {
            let mut off = 0;
            let mut w = 1.0;
            for a in 0..D {
                let t = &self.taps[a];
                if mask >> a & 1 == 1 {
                    off += t.hi * self.strides[a];
                    w *= t.frac;
                } else {
                    off += t.lo * self.strides[a];
                    w *= 1.0 - t.frac;
                }
            }
            (off, w)
        })
    }

    /// Corner weights of the derivative along `axis`.
    fn axis_derivative(&self, axis: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let live = self.taps[axis].inside;
        (0..1usize << D).filter(move |_| live).map(move |mask| {
            let mut off = 0;
            let mut w = 1.0;
            for a in 0..D {
                let t = &self.taps[a];
                let hi = mask >> a & 1 == 1;
                off += if hi { t.hi } else { t.lo } * self.strides[a];
                w *= match (a == axis, hi) {
                    (true, true) => self.scale[a],
                    (true, false) => -self.scale[a],
                    (false, true) => t.frac,
                    (false, false) => 1.0 - t.frac,
                };
            }
            (off, w)
        })
    }
}

fn trilinear_corners<F: Float>(sg: &[usize], p: &[F], lo: f64, hi: f64) -> Corners<3> {
    let dims = [sg[1], sg[2], sg[3]];
    let mut taps = [axis_tap(0.0, 1); 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        let cell = (hi - lo) / dims[a] as f64;
        taps[a] = axis_tap((p[a].f64() - lo) / cell - 0.5, dims[a]);
        scale[a] = 1.0 / cell;
    }
    Corners {
        taps,
        strides: [dims[1] * dims[2], dims[2], 1],
        scale,
    }
}

fn bilinear_corners<F: Float>(sf: &[usize], uv: &[F]) -> Corners<2> {
    let (h, w) = (sf[1], sf[2]);
    // axis 0 of the corner set is u (columns), axis 1 is v (rows)
    Corners {
        taps: [
            axis_tap(uv[0].f64() - 0.5, w),
            axis_tap(uv[1].f64() - 0.5, h),
        ],
        strides: [1, w],
        scale: [1.0, 1.0],
    }
}
