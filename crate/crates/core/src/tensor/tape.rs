use super::kernels::{self, ConvGeom};
use super::{numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    PRelu(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Flip(Var, usize),
    Sum {
        x: Var,
        keep: Vec<usize>,
    },
    Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Norm {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Parents are always recorded before their children, so the node order is
/// already a topological order and [`Tape::backward`] walks it in reverse,
/// visiting each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.data.len(), numel(&value.shape));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = kernels::broadcast_shapes(sa, sb).ok_or_else(|| shape_err(op, sa, sb))?;
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut data = vec![0.0; numel(&out)];
        if sa == sb {
            for ((o, &x), &y) in data.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            let ta = kernels::broadcast_strides(sa, &out);
            let tb = kernels::broadcast_strides(sb, &out);
            kernels::for_each_offset2(&out, &ta, &tb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        }
        Ok((Tensor { shape: out, data }, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data.iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data.iter().find(|&&v| !(v >= 0.0)) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    /// `[x]_+`, the hinge used by margin losses.
    pub fn hinge(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Op::ClampMin(x, lo), |v| v.max(lo))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Parametric ReLU. `alpha` is either a single slope or one slope per
    /// entry of axis 1 of `x`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let na = self.value(alpha).len();
        let channels = if na == 1 {
            1
        } else if sx.len() >= 2 && sx[1] == na {
            na
        } else {
            return Err(shape_err("prelu", &sx, self.shape(alpha)));
        };
        let inner = if sx.len() > 2 { numel(&sx[2..]) } else { 1 };
        let a = &self.value(alpha).data;
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = if channels == 1 { 0 } else { (i / inner) % channels };
                if v > 0.0 {
                    v
                } else {
                    a[c] * v
                }
            })
            .collect();
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(Tensor { shape: sx, data }, Op::PRelu(x, alpha), rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[..., m, k] × [..., k, n]`; batch extents
    /// broadcast from 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb).ok_or_else(|| shape_err("matmul", &sa, &sb))?;
        let mut out = vec![0.0; plan.batch_count * plan.m * plan.n];
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        plan.for_each(|o, ia, ib| {
            kernels::gemm_acc(
                &da[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                &db[ib * plan.k * plan.n..(ib + 1) * plan.k * plan.n],
                &mut out[o * plan.m * plan.n..(o + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            )
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: plan.out_shape(),
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Usage("transpose of rank < 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// 2-D convolution without bias. `x: N×C×H×W`, `w: O×C×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom =
            ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad).ok_or_else(|| shape_err("conv2d", &sx, &sw))?;
        let (n, c_out) = (sx[0], sw[0]);
        let img = geom.c_in * geom.h * geom.w;
        let out_img = c_out * geom.col_cols();
        let mut out = vec![0.0; n * out_img];
        let (dx, dw) = (&self.nodes[x.0].value.data, &self.nodes[w.0].value.data);
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        for s in 0..n {
            let xs = &dx[s * img..(s + 1) * img];
            let patches: &[f64] = if geom.is_pointwise() {
                xs
            } else {
                kernels::im2col(xs, &geom, &mut cols);
                &cols
            };
            kernels::gemm_acc(
                dw,
                patches,
                &mut out[s * out_img..(s + 1) * out_img],
                c_out,
                geom.col_rows(),
                geom.col_cols(),
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor {
                shape: vec![n, c_out, geom.h_out, geom.w_out],
                data: out,
            },
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", &sx, axes));
        }
        let (data, shape) = kernels::permute(&self.value(x).data, &sx, axes);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = &self.value(p).data;
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(shape_err("slice", &sx, &[axis, start, len]));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, rg))
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("flip", &sx, &[axis]));
        }
        let data = flip_data(&self.value(x).data, &sx, axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: sx, data }, Op::Flip(x, axis), rg))
    }

    /// Sums over `axes`; with `keepdim` the reduced axes stay as extent 1.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut keep = sx.clone();
        for &a in axes {
            if a >= sx.len() {
                return Err(shape_err("sum", &sx, axes));
            }
            keep[a] = 1;
        }
        let data = kernels::reduce_to(&self.value(x).data, &sx, &keep);
        let shape = if keepdim {
            keep.clone()
        } else {
            sx.iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Sum { x, keep }, rg))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let sx = self.shape(x);
        let count: usize = axes.iter().filter(|&&a| a < sx.len()).map(|&a| sx[a]).product();
        let s = self.sum(x, axes, keepdim)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- norms and similarity ----------------------------------------

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("l2_normalize", &sx, &[axis]));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..ext {
                let row = &src[(o * ext + l) * inner..(o * ext + l + 1) * inner];
                for (n, &v) in norms[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *n += v * v;
                }
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        let mut data = src.clone();
        for o in 0..outer {
            for l in 0..ext {
                let row = &mut data[(o * ext + l) * inner..(o * ext + l + 1) * inner];
                for (v, &n) in row.iter_mut().zip(&norms[o * inner..(o + 1) * inner]) {
                    *v /= n.max(eps);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: sx, data }, Op::Normalize { x, axis, eps, norms }, rg))
    }

    /// Euclidean norm along `axis` (the axis is removed).
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("l2_norm", &sx, &[axis]));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..ext {
                for i in 0..inner {
                    let v = src[(o * ext + l) * inner + i];
                    data[o * inner + i] += v * v;
                }
            }
        }
        for v in &mut data {
            *v = v.sqrt();
        }
        let mut shape = sx;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Norm { x, axis }, rg))
    }

    /// Cosine similarity of `u` and `v` along their last axis, with norms
    /// floored at `eps`. Vectors give a scalar; `N×d` inputs give `N` values.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su != sv || su.is_empty() {
            return Err(shape_err("cosine_similarity", &su, &sv));
        }
        let axis = su.len() - 1;
        let un = self.l2_normalize(u, axis, eps)?;
        let vn = self.l2_normalize(v, axis, eps)?;
        let p = self.mul(un, vn)?;
        self.sum(p, &[axis], false)
    }

    // ---- reverse pass ------------------------------------------------

    /// Reverse sweep from a scalar `root`. Gradients accumulate across every
    /// use of a value, so fan-out is handled by summation.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                });
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_reduced(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>, from: &[usize]) {
        if !self.rg(v) {
            return;
        }
        let reduced = kernels::reduce_to(&g, from, self.shape(v));
        self.accumulate(grads, v, reduced);
    }

    fn broadcast_pair(&self, a: Var, b: Var, out: &[usize]) -> (Vec<usize>, Vec<usize>) {
        (
            kernels::broadcast_strides(self.shape(a), out),
            kernels::broadcast_strides(self.shape(b), out),
        )
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value.data;
        let oshape = &node.value.shape;
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate_reduced(grads, *a, g.to_vec(), oshape);
                self.accumulate_reduced(grads, *b, g.to_vec(), oshape);
            }
            Op::Sub(a, b) => {
                self.accumulate_reduced(grads, *a, g.to_vec(), oshape);
                self.accumulate_reduced(grads, *b, g.iter().map(|v| -v).collect(), oshape);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = self.broadcast_pair(*a, *b, oshape);
                let (da, db) = (val(*a), val(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                let is_mul = matches!(node.op, Op::Mul(..));
                kernels::for_each_offset2(oshape, &ta, &tb, |i, ia, ib| {
                    if is_mul {
                        ga[i] = g[i] * db[ib];
                        gb[i] = g[i] * da[ia];
                    } else {
                        ga[i] = g[i] / db[ib];
                        gb[i] = -g[i] * da[ia] / (db[ib] * db[ib]);
                    }
                });
                self.accumulate_reduced(grads, *a, ga, oshape);
                self.accumulate_reduced(grads, *b, gb, oshape);
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.iter().map(|v| v * k).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, gx)
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *x, gx)
            }
            Op::Log(x) => {
                let gx = g.iter().zip(val(*x)).map(|(g, v)| g / v).collect();
                self.accumulate(grads, *x, gx)
            }
            Op::Sqrt(x) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(g, r)| if *r > 0.0 { g / (2.0 * r) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx)
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx)
            }
            Op::ClampMin(x, lo) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if v > lo { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx)
            }
            Op::PRelu(x, alpha) => {
                let xs = val(*x);
                let a = val(*alpha);
                let channels = a.len();
                let inner = if oshape.len() > 2 { numel(&oshape[2..]) } else { 1 };
                let mut gx = vec![0.0; g.len()];
                let mut ga = vec![0.0; channels];
                for i in 0..g.len() {
                    let c = if channels == 1 { 0 } else { (i / inner) % channels };
                    if xs[i] > 0.0 {
                        gx[i] = g[i];
                    } else {
                        gx[i] = g[i] * a[c];
                        ga[c] += g[i] * xs[i];
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *alpha, ga);
            }
            Op::MatMul(a, b) => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (da, db) = (val(*a), val(*b));
                let (mk, kn, mn) = (plan.m * plan.k, plan.k * plan.n, plan.m * plan.n);
                if self.rg(*a) {
                    let mut ga = vec![0.0; da.len()];
                    plan.for_each(|o, ia, ib| {
                        kernels::gemm_nt_acc(
                            &g[o * mn..(o + 1) * mn],
                            &db[ib * kn..(ib + 1) * kn],
                            &mut ga[ia * mk..(ia + 1) * mk],
                            plan.m,
                            plan.n,
                            plan.k,
                        )
                    });
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; db.len()];
                    plan.for_each(|o, ia, ib| {
                        kernels::gemm_tn_acc(
                            &da[ia * mk..(ia + 1) * mk],
                            &g[o * mn..(o + 1) * mn],
                            &mut gb[ib * kn..(ib + 1) * kn],
                            plan.k,
                            plan.m,
                            plan.n,
                        )
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (gx, _) = kernels::permute(g, oshape, &inv);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(oshape, *axis);
                let total = oshape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, ext, inner) = split_axis(sx, *axis);
                let len = oshape[*axis];
                let mut gx = vec![0.0; numel(sx)];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Flip(x, axis) => self.accumulate(grads, *x, flip_data(g, oshape, *axis)),
            Op::Sum { x, keep } => {
                let sx = self.shape(*x);
                let st = kernels::broadcast_strides(keep, sx);
                let zero = vec![0; sx.len()];
                let mut gx = vec![0.0; numel(sx)];
                kernels::for_each_offset2(sx, &st, &zero, |i, o, _| gx[i] = g[o]);
                self.accumulate(grads, *x, gx);
            }
            Op::Normalize { x, axis, eps, norms } => {
                let (outer, ext, inner) = split_axis(oshape, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let n = norms[o * inner + i];
                        let at = |l: usize| (o * ext + l) * inner + i;
                        if n > *eps {
                            let dot: f64 = (0..ext).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..ext {
                                gx[at(l)] = (g[at(l)] - y[at(l)] * dot) / n;
                            }
                        } else {
                            for l in 0..ext {
                                gx[at(l)] = g[at(l)] / eps;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Norm { x, axis } => {
                let sx = self.shape(*x);
                let (outer, ext, inner) = split_axis(sx, *axis);
                let xs = val(*x);
                let mut gx = vec![0.0; xs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let n = y[o * inner + i];
                        if n > 0.0 {
                            for l in 0..ext {
                                let at = (o * ext + l) * inner + i;
                                gx[at] = g[o * inner + i] * xs[at] / n;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, geom } => {
                let (xs, ws) = (val(*x), val(*w));
                let n = oshape[0];
                let c_out = oshape[1];
                let img = geom.c_in * geom.h * geom.w;
                let out_img = c_out * geom.col_cols();
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut gw = vec![0.0; ws.len()];
                let mut gx = vec![0.0; xs.len()];
                let mut cols = vec![0.0; rows * ncols];
                let mut dcols = vec![0.0; rows * ncols];
                for s in 0..n {
                    let gs = &g[s * out_img..(s + 1) * out_img];
                    if self.rg(*w) {
                        let xsamp = &xs[s * img..(s + 1) * img];
                        let patches: &[f64] = if geom.is_pointwise() {
                            xsamp
                        } else {
                            kernels::im2col(xsamp, geom, &mut cols);
                            &cols
                        };
                        kernels::gemm_nt_acc(gs, patches, &mut gw, c_out, ncols, rows);
                    }
                    if self.rg(*x) {
                        let dst = &mut gx[s * img..(s + 1) * img];
                        if geom.is_pointwise() {
                            kernels::gemm_tn_acc(ws, gs, dst, rows, c_out, ncols);
                        } else {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            kernels::gemm_tn_acc(ws, gs, &mut dcols, rows, c_out, ncols);
                            kernels::col2im_acc(&dcols, geom, dst);
                        }
                    }
                }
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn flip_data(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut data = vec![0.0; src.len()];
    for o in 0..outer {
        for l in 0..ext {
            let from = (o * ext + l) * inner;
            let to = (o * ext + (ext - 1 - l)) * inner;
            data[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    data
}

struct MatmulPlan {
    batch: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    batch_count: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return None;
        }
        let (ba, ma) = sa.split_at(sa.len() - 2);
        let (bb, mb) = sb.split_at(sb.len() - 2);
        if ma[1] != mb[0] {
            return None;
        }
        let batch = kernels::broadcast_shapes(ba, bb)?;
        Some(Self {
            stride_a: kernels::broadcast_strides(ba, &batch),
            stride_b: kernels::broadcast_strides(bb, &batch),
            batch_count: numel(&batch),
            batch,
            m: ma[0],
            k: ma[1],
            n: mb[1],
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([self.m, self.n]);
        s
    }

    /// Calls `f(out_matrix, a_matrix, b_matrix)` for each batch position.
    fn for_each(&self, f: impl FnMut(usize, usize, usize)) {
        kernels::for_each_offset2(&self.batch, &self.stride_a, &self.stride_b, f);
    }
}
