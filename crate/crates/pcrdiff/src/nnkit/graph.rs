//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! Nodes are appended in topological order; `backward` walks the tape in
//! reverse. Gradients flowing out of the segmented max-pool are carried in
//! a sparse coordinate form until a dense op consumes them, which keeps the
//! point-encoder backward cheap (only argmax rows receive gradient).

use super::tensor::{gemm, Tensor};
use super::NnError;
use crate::geom3d::Vec3;
use crate::knn::KdTree;
use nalgebra::{Matrix3, Vector3};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: usize, b: usize },
    Dense { x: usize, w: usize, b: usize, relu: bool },
    AddRow { x: usize, row: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    Relu { x: usize },
    Exp { x: usize },
    Sqrt { x: usize },
    Sin { x: usize },
    Cos { x: usize },
    ClampMin { x: usize, c: f64 },
    Sum { x: usize },
    RowSum { x: usize },
    ColSum { x: usize },
    MulByRow { x: usize, s: usize },
    MulByCol { x: usize, s: usize },
    SegMaxPool { x: usize, argmax: Vec<u32> },
    Row { x: usize, i: usize },
    SliceRows { x: usize, start: usize },
    Narrow { x: usize, start: usize },
    Elem { x: usize, i: usize },
    Stack { parts: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Chamfer { x: usize, target: Vec<[f64; 3]>, nn_xt: Vec<u32>, nn_tx: Vec<u32> },
    Kabsch { dst: usize, w: usize, ctx: Box<KabschCtx> },
}

#[derive(Debug)]
struct KabschCtx {
    src: Vec<[f64; 3]>,
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: Vector3<f64>,
    det_sign: f64,
    r: Matrix3<f64>,
    c_src: Vector3<f64>,
    c_dst: Vector3<f64>,
    w_sum: f64,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradient of a 2-D node, either dense or in coordinate form.
#[derive(Debug, Clone)]
pub enum Grad {
    Dense(Tensor),
    Sparse { shape: [usize; 2], rows: Vec<u32>, cols: Vec<u32>, vals: Vec<f64> },
}

impl Grad {
    fn into_dense(self) -> Tensor {
        match self {
            Grad::Dense(t) => t,
            Grad::Sparse { shape, rows, cols, vals } => {
                let mut t = Tensor::zeros(&[shape[0], shape[1]]);
                let n = shape[1];
                let d = t.data_mut();
                for ((r, c), v) in rows.iter().zip(&cols).zip(&vals) {
                    d[*r as usize * n + *c as usize] += v;
                }
                t
            }
        }
    }
}

/// Flat autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: std::collections::BTreeMap<String, usize>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Grad>>,
}

impl Gradients {
    /// Dense gradient of a node; zeros if nothing flowed into it.
    pub fn dense(&self, graph: &Graph, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone().into_dense(),
            None => Tensor::zeros(graph.nodes[var.0].value.shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value out of {op:?}");
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Differentiable leaf (used by the finite-difference checker).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf bound to a named parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &super::ParamStore, name: &str) -> Result<Var, NnError> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var(idx));
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, true, Op::Param);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, &i)| (n.as_str(), Var(i)))
    }

    fn shape2(&self, v: Var) -> Result<(usize, usize), NnError> {
        let t = &self.nodes[v.0].value;
        if t.ndim() != 2 {
            return Err(NnError::ShapeMismatch {
                what: format!("expected 2-D tensor, got shape {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (_, ka) = self.shape2(a)?;
        let (kb, _) = self.shape2(b)?;
        if ka != kb {
            return Err(NnError::ShapeMismatch {
                what: format!(
                    "matmul {:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let out = gemm(self.value(a), false, self.value(b), false, 1.0);
        let rq = self.req(a) || self.req(b);
        Ok(self.push(out, rq, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `x + row` broadcast over the rows of `x`; `row` is 1-D.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        let (_, n) = self.shape2(x)?;
        if self.value(row).shape() != [n] {
            return Err(NnError::ShapeMismatch {
                what: format!("add_row [{n}] vs {:?}", self.value(row).shape()),
            });
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % n];
        }
        let rq = self.req(x) || self.req(row);
        Ok(self.push(out, rq, Op::AddRow { x: x.0, row: row.0 }))
    }

    /// Affine layer `x·w + b`, optionally fused with a relu. One op
    /// keeps the big encoder activations from being copied per stage.
    fn dense_impl(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var, NnError> {
        let (_, ka) = self.shape2(x)?;
        let (kb, n) = self.shape2(w)?;
        if ka != kb || self.value(b).shape() != [n] {
            return Err(NnError::ShapeMismatch {
                what: format!(
                    "dense {:?} x {:?} + {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = gemm(self.value(x), false, self.value(w), false, 1.0);
        let bias = self.value(b).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[i % n];
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
        let rq = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(out, rq, Op::Dense { x: x.0, w: w.0, b: b.0, relu }))
    }

    /// Affine layer `x·w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        self.dense_impl(x, w, b, false)
    }

    /// Affine layer followed by relu, fused.
    pub fn dense_relu(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        self.dense_impl(x, w, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch {
                what: format!(
                    "{what}: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        self.same_shape(a, b, what)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (o, bv) in out.data_mut().iter_mut().zip(bd) {
            *o = f(*o, bv);
        }
        let rq = self.req(a) || self.req(b);
        Ok(self.push(out, rq, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Elementwise `a / b`; `b` may also be a scalar `[1]` broadcast.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.value(b).len() == 1 {
            let s = self.value(b).item();
            let mut out = self.value(a).clone();
            for o in out.data_mut() {
                *o /= s;
            }
            let rq = self.req(a) || self.req(b);
            return Ok(self.push(out, rq, Op::Div { a: a.0, b: b.0 }));
        }
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        let rq = self.req(x);
        self.push(out, rq, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v + c, Op::AddConst { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_op(x, f64::exp, Op::Exp { x: x.0 })
    }

    /// Elementwise square root. The backward pass clamps the denominator
    /// away from zero, so the value at 0 is exact while the gradient stays
    /// finite.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map_op(x, f64::sqrt, Op::Sqrt { x: x.0 })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.map_op(x, f64::sin, Op::Sin { x: x.0 })
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.map_op(x, f64::cos, Op::Cos { x: x.0 })
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, |v| v.max(c), Op::ClampMin { x: x.0, c })
    }

    /// Sum of all elements, as `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rq = self.req(x);
        self.push(Tensor::scalar(s), rq, Op::Sum { x: x.0 })
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var, NnError> {
        let (m, n) = self.shape2(x)?;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        let rq = self.req(x);
        Ok(self.push(Tensor::from_vec(&[m], out), rq, Op::RowSum { x: x.0 }))
    }

    pub fn col_sum(&mut self, x: Var) -> Result<Var, NnError> {
        let (m, n) = self.shape2(x)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += d[i * n + j];
            }
        }
        let rq = self.req(x);
        Ok(self.push(Tensor::from_vec(&[n], out), rq, Op::ColSum { x: x.0 }))
    }

    /// Scales row `i` of `x` by `s[i]`.
    pub fn mul_by_row(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let (m, n) = self.shape2(x)?;
        if self.value(s).shape() != [m] {
            return Err(NnError::ShapeMismatch { what: format!("mul_by_row [{m}]") });
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= sv[i / n];
        }
        let rq = self.req(x) || self.req(s);
        Ok(self.push(out, rq, Op::MulByRow { x: x.0, s: s.0 }))
    }

    /// Scales column `j` of `x` by `s[j]`.
    pub fn mul_by_col(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let (_, n) = self.shape2(x)?;
        if self.value(s).shape() != [n] {
            return Err(NnError::ShapeMismatch { what: format!("mul_by_col [{n}]") });
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= sv[i % n];
        }
        let rq = self.req(x) || self.req(s);
        Ok(self.push(out, rq, Op::MulByCol { x: x.0, s: s.0 }))
    }

    /// Per-feature max over each contiguous segment of `seg_len` rows.
    /// `[S·seg_len, d] -> [S, d]`; gradient is routed to the argmax row
    /// only, first index on ties.
    pub fn seg_max_pool(&mut self, x: Var, seg_len: usize) -> Result<Var, NnError> {
        let (m, n) = self.shape2(x)?;
        if seg_len == 0 || m == 0 {
            return Err(NnError::EmptyCloud);
        }
        if m % seg_len != 0 {
            return Err(NnError::ShapeMismatch {
                what: format!("seg_max_pool: {m} rows not divisible by {seg_len}"),
            });
        }
        let segs = m / seg_len;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; segs * n];
        let mut argmax = vec![0u32; segs * n];
        for s in 0..segs {
            for r in 0..seg_len {
                let row = s * seg_len + r;
                for j in 0..n {
                    let v = d[row * n + j];
                    if v > out[s * n + j] {
                        out[s * n + j] = v;
                        argmax[s * n + j] = row as u32;
                    }
                }
            }
        }
        let rq = self.req(x);
        Ok(self.push(
            Tensor::from_vec(&[segs, n], out),
            rq,
            Op::SegMaxPool { x: x.0, argmax },
        ))
    }

    /// Max over the point dimension: `[N, d] -> [d]`.
    pub fn maxpool_points(&mut self, x: Var) -> Result<Var, NnError> {
        let (m, _) = self.shape2(x)?;
        let pooled = self.seg_max_pool(x, m)?;
        let n = self.value(pooled).cols();
        self.reshape(pooled, &[n])
    }

    /// Row `i` of a matrix as a 1-D vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, NnError> {
        let (m, n) = self.shape2(x)?;
        if i >= m {
            return Err(NnError::ShapeMismatch { what: format!("row {i} of {m}") });
        }
        let d = self.value(x).data()[i * n..(i + 1) * n].to_vec();
        let rq = self.req(x);
        Ok(self.push(Tensor::from_vec(&[n], d), rq, Op::Row { x: x.0, i }))
    }

    /// Rows `[r0, r1)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var, NnError> {
        let (m, n) = self.shape2(x)?;
        if r0 >= r1 || r1 > m {
            return Err(NnError::ShapeMismatch { what: format!("slice_rows {r0}..{r1} of {m}") });
        }
        let d = self.value(x).data()[r0 * n..r1 * n].to_vec();
        let rq = self.req(x);
        Ok(self.push(
            Tensor::from_vec(&[r1 - r0, n], d),
            rq,
            Op::SliceRows { x: x.0, start: r0 },
        ))
    }

    /// Contiguous 1-D slice `[start, end)`.
    pub fn narrow(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let t = self.value(x);
        if t.ndim() != 1 || end > t.len() || start >= end {
            return Err(NnError::ShapeMismatch {
                what: format!("narrow {start}..{end} of {:?}", t.shape()),
            });
        }
        let d = t.data()[start..end].to_vec();
        let rq = self.req(x);
        Ok(self.push(Tensor::from_vec(&[end - start], d), rq, Op::Narrow { x: x.0, start }))
    }

    /// Single element as `[1]`.
    pub fn elem(&mut self, x: Var, i: usize) -> Result<Var, NnError> {
        let t = self.value(x);
        if i >= t.len() {
            return Err(NnError::ShapeMismatch { what: format!("elem {i} of {}", t.len()) });
        }
        let v = t.data()[i];
        let rq = self.req(x);
        Ok(self.push(Tensor::scalar(v), rq, Op::Elem { x: x.0, i }))
    }

    /// Concatenates 1-D parts into one 1-D vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let mut data = Vec::new();
        let mut rq = false;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rq |= self.req(p);
        }
        let n = data.len();
        Ok(self.push(
            Tensor::from_vec(&[n], data),
            rq,
            Op::Stack { parts: parts.iter().map(|v| v.0).collect() },
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.stack(&[a, b])
    }

    /// Column concatenation `[m,p] ⊕ [m,q] -> [m,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ma, p) = self.shape2(a)?;
        let (mb, q) = self.shape2(b)?;
        if ma != mb {
            return Err(NnError::ShapeMismatch { what: format!("concat_cols rows {ma} vs {mb}") });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ma * (p + q));
        for i in 0..ma {
            out.extend_from_slice(&ad[i * p..(i + 1) * p]);
            out.extend_from_slice(&bd[i * q..(i + 1) * q]);
        }
        let rq = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::from_vec(&[ma, p + q], out),
            rq,
            Op::ConcatCols { a: a.0, b: b.0 },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NnError> {
        self.shape2(x)?;
        let out = self.value(x).transposed();
        let rq = self.req(x);
        Ok(self.push(out, rq, Op::Transpose { x: x.0 }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(NnError::ShapeMismatch {
                what: format!("reshape {:?} -> {:?}", t.shape(), shape),
            });
        }
        let out = t.reshaped(shape);
        let rq = self.req(x);
        Ok(self.push(out, rq, Op::Reshape { x: x.0 }))
    }

    /// Symmetric Chamfer distance between rows of `x` `[N,3]` and the fixed
    /// `target` cloud: mean squared nearest-neighbor distance both ways.
    /// Exact search; a kd-tree is used above a size threshold and must
    /// agree with brute force.
    pub fn chamfer(&mut self, x: Var, target: &[Vec3]) -> Result<Var, NnError> {
        let (n, c) = self.shape2(x)?;
        if c != 3 {
            return Err(NnError::ShapeMismatch { what: format!("chamfer points have {c} cols") });
        }
        if n == 0 || target.is_empty() {
            return Err(NnError::EmptyCloud);
        }
        let xd = self.value(x).data();
        let xs: Vec<[f64; 3]> = (0..n).map(|i| [xd[3 * i], xd[3 * i + 1], xd[3 * i + 2]]).collect();
        let ts: Vec<[f64; 3]> = target.iter().map(|p| [p.x, p.y, p.z]).collect();
        let (value, nn_xt, nn_tx) = chamfer_parts(&xs, &ts);
        let rq = self.req(x);
        Ok(self.push(
            Tensor::scalar(value),
            rq,
            Op::Chamfer { x: x.0, target: ts, nn_xt, nn_tx },
        ))
    }

    /// Weighted rigid alignment of the fixed `src` cloud onto the rows of
    /// `dst`, with per-point weights `w`. Output is `[12]`: the rotation
    /// row-major in `[0..9]` and the translation in `[9..12]`. The backward
    /// pass propagates through the SVD factors via the perturbation
    /// formula.
    pub fn kabsch_align(&mut self, src: &[Vec3], dst: Var, w: Var) -> Result<Var, NnError> {
        let (n, c) = self.shape2(dst)?;
        if c != 3 || src.len() != n || self.value(w).shape() != [n] {
            return Err(NnError::ShapeMismatch {
                what: format!(
                    "kabsch_align src {} dst {:?} w {:?}",
                    src.len(),
                    self.value(dst).shape(),
                    self.value(w).shape()
                ),
            });
        }
        if n < 3 {
            return Err(NnError::DegenerateGeometry(format!("{n} correspondences")));
        }
        let wd = self.value(w).data();
        let w_sum: f64 = wd.iter().sum();
        if w_sum <= 1e-12 {
            return Err(NnError::DegenerateGeometry(format!("weight sum {w_sum:e}")));
        }
        let dd = self.value(dst).data();
        let mut c_src = Vector3::zeros();
        let mut c_dst = Vector3::zeros();
        for i in 0..n {
            c_src += wd[i] * src[i].to_na();
            c_dst += wd[i] * Vector3::new(dd[3 * i], dd[3 * i + 1], dd[3 * i + 2]);
        }
        c_src /= w_sum;
        c_dst /= w_sum;
        let mut h = Matrix3::zeros();
        for i in 0..n {
            let a = src[i].to_na() - c_src;
            let b = Vector3::new(dd[3 * i], dd[3 * i + 1], dd[3 * i + 2]) - c_dst;
            h += wd[i] * a * b.transpose();
        }
        let svd = h.svd(true, true);
        let u = svd.u.expect("svd u");
        let v = svd.v_t.expect("svd v_t").transpose();
        let sigma = svd.singular_values;
        if sigma[1] <= 1e-12 * sigma[0].max(1.0) {
            return Err(NnError::DegenerateGeometry(format!("rank-deficient, σ = {sigma:?}")));
        }
        let det_sign = if (v * u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
        let mut corr = Matrix3::identity();
        corr[(2, 2)] = det_sign;
        let r = v * corr * u.transpose();
        let t = c_dst - r * c_src;

        let mut out = Vec::with_capacity(12);
        for i in 0..3 {
            for j in 0..3 {
                out.push(r[(i, j)]);
            }
        }
        out.extend_from_slice(&[t.x, t.y, t.z]);
        let ctx = Box::new(KabschCtx {
            src: src.iter().map(|p| [p.x, p.y, p.z]).collect(),
            u,
            v,
            sigma: Vector3::new(sigma[0], sigma[1], sigma[2]),
            det_sign,
            r,
            c_src,
            c_dst,
            w_sum,
        });
        let rq = self.req(dst) || self.req(w);
        Ok(self.push(
            Tensor::from_vec(&[12], out),
            rq,
            Op::Kabsch { dst: dst.0, w: w.0, ctx },
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Grad>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        assert_eq!(
            root_shape.iter().product::<usize>(),
            1,
            "backward root must be scalar"
        );
        grads[root.0] = Some(Grad::Dense(Tensor::from_vec(&root_shape, vec![1.0])));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: Grad, grads: &mut Vec<Option<Grad>>) {
        let send = |var_idx: usize, grad: Grad, s: &mut Vec<Option<Grad>>| {
            if !self.nodes[var_idx].requires_grad {
                return;
            }
            s[var_idx] = Some(match s[var_idx].take() {
                None => grad,
                Some(prev) => accumulated(prev, grad),
            });
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {
                // Terminal: keep the gradient in place for extraction.
                grads[idx] = Some(g);
            }
            Op::Dense { x, w, b, relu } => {
                let out = &self.nodes[idx].value;
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let n = wv.cols();
                match g {
                    Grad::Dense(mut gd) => {
                        if *relu {
                            for (v, o) in gd.data_mut().iter_mut().zip(out.data()) {
                                if *o <= 0.0 {
                                    *v = 0.0;
                                }
                            }
                        }
                        if self.nodes[*b].requires_grad {
                            let mut gb = Tensor::zeros(&[n]);
                            for (i, v) in gd.data().iter().enumerate() {
                                gb.data_mut()[i % n] += v;
                            }
                            send(*b, Grad::Dense(gb), grads);
                        }
                        if self.nodes[*x].requires_grad {
                            send(*x, Grad::Dense(gemm(&gd, false, wv, true, 1.0)), grads);
                        }
                        if self.nodes[*w].requires_grad {
                            send(*w, Grad::Dense(gemm(xv, true, &gd, false, 1.0)), grads);
                        }
                    }
                    Grad::Sparse { shape, rows, cols, vals } => {
                        let od = out.data();
                        let mut fr = Vec::with_capacity(rows.len());
                        let mut fc = Vec::with_capacity(cols.len());
                        let mut fv = Vec::with_capacity(vals.len());
                        for ((r, c), v) in rows.iter().zip(&cols).zip(&vals) {
                            if !*relu || od[*r as usize * n + *c as usize] > 0.0 {
                                fr.push(*r);
                                fc.push(*c);
                                fv.push(*v);
                            }
                        }
                        if self.nodes[*b].requires_grad {
                            let mut gb = Tensor::zeros(&[n]);
                            for (c, v) in fc.iter().zip(&fv) {
                                gb.data_mut()[*c as usize] += v;
                            }
                            send(*b, Grad::Dense(gb), grads);
                        }
                        let k = xv.cols();
                        if self.nodes[*x].requires_grad {
                            let mut gx = Tensor::zeros(&[xv.rows(), k]);
                            let gxd = gx.data_mut();
                            let wd = wv.data();
                            for ((r, c), v) in fr.iter().zip(&fc).zip(&fv) {
                                let (r, c) = (*r as usize, *c as usize);
                                for l in 0..k {
                                    gxd[r * k + l] += v * wd[l * n + c];
                                }
                            }
                            send(*x, Grad::Dense(gx), grads);
                        }
                        if self.nodes[*w].requires_grad {
                            let mut gw = Tensor::zeros(&[k, n]);
                            let gwd = gw.data_mut();
                            let xd = xv.data();
                            for ((r, c), v) in fr.iter().zip(&fc).zip(&fv) {
                                let (r, c) = (*r as usize, *c as usize);
                                for l in 0..k {
                                    gwd[l * n + c] += v * xd[r * k + l];
                                }
                            }
                            send(*w, Grad::Dense(gw), grads);
                        }
                        let _ = shape;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                match &g {
                    Grad::Dense(gd) => {
                        if self.nodes[*a].requires_grad {
                            send(*a, Grad::Dense(gemm(gd, false, bv, true, 1.0)), grads);
                        }
                        if self.nodes[*b].requires_grad {
                            send(*b, Grad::Dense(gemm(av, true, gd, false, 1.0)), grads);
                        }
                    }
                    Grad::Sparse { rows, cols, vals, .. } => {
                        let k = av.cols();
                        let nb = bv.cols();
                        if self.nodes[*a].requires_grad {
                            let mut ga = Tensor::zeros(&[av.rows(), k]);
                            let gad = ga.data_mut();
                            let bd = bv.data();
                            for ((r, c), v) in rows.iter().zip(cols).zip(vals) {
                                let (r, c) = (*r as usize, *c as usize);
                                for l in 0..k {
                                    gad[r * k + l] += v * bd[l * nb + c];
                                }
                            }
                            send(*a, Grad::Dense(ga), grads);
                        }
                        if self.nodes[*b].requires_grad {
                            let mut gb = Tensor::zeros(&[k, nb]);
                            let gbd = gb.data_mut();
                            let ad = av.data();
                            for ((r, c), v) in rows.iter().zip(cols).zip(vals) {
                                let (r, c) = (*r as usize, *c as usize);
                                for l in 0..k {
                                    gbd[l * nb + c] += v * ad[r * k + l];
                                }
                            }
                            send(*b, Grad::Dense(gb), grads);
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                match &g {
                    Grad::Sparse { cols, vals, .. } => {
                        if self.nodes[*row].requires_grad {
                            let n = self.nodes[*row].value.len();
                            let mut gr = Tensor::zeros(&[n]);
                            for (c, v) in cols.iter().zip(vals) {
                                gr.data_mut()[*c as usize] += v;
                            }
                            send(*row, Grad::Dense(gr), grads);
                        }
                    }
                    Grad::Dense(gd) => {
                        if self.nodes[*row].requires_grad {
                            let n = self.nodes[*row].value.len();
                            let mut gr = Tensor::zeros(&[n]);
                            for (i, v) in gd.data().iter().enumerate() {
                                gr.data_mut()[i % n] += v;
                            }
                            send(*row, Grad::Dense(gr), grads);
                        }
                    }
                }
                send(*x, g, grads);
            }
            Op::Add { a, b } => {
                send(*a, g.clone(), grads);
                send(*b, g, grads);
            }
            Op::Sub { a, b } => {
                send(*a, g.clone(), grads);
                let mut neg = g.into_dense();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                send(*b, Grad::Dense(neg), grads);
            }
            Op::Mul { a, b } => {
                let gd = g.into_dense();
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let mut ga = gd.clone();
                    for (v, bvv) in ga.data_mut().iter_mut().zip(bv.data()) {
                        *v *= bvv;
                    }
                    send(*a, Grad::Dense(ga), grads);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = gd;
                    for (v, avv) in gb.data_mut().iter_mut().zip(av.data()) {
                        *v *= avv;
                    }
                    send(*b, Grad::Dense(gb), grads);
                }
            }
            Op::Div { a, b } => {
                let gd = g.into_dense();
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let scalar_b = bv.len() == 1;
                if self.nodes[*a].requires_grad {
                    let mut ga = gd.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        let d = if scalar_b { bv.data()[0] } else { bv.data()[i] };
                        *v /= d;
                    }
                    send(*a, Grad::Dense(ga), grads);
                }
                if self.nodes[*b].requires_grad {
                    if scalar_b {
                        let s = bv.data()[0];
                        let mut acc = 0.0;
                        for (i, gv) in gd.data().iter().enumerate() {
                            acc -= gv * av.data()[i] / (s * s);
                        }
                        send(*b, Grad::Dense(Tensor::scalar(acc)), grads);
                    } else {
                        let mut gb = gd;
                        for (i, v) in gb.data_mut().iter_mut().enumerate() {
                            let d = bv.data()[i];
                            *v *= -av.data()[i] / (d * d);
                        }
                        send(*b, Grad::Dense(gb), grads);
                    }
                }
            }
            Op::Scale { x, c } => {
                let mut gd = g.into_dense();
                for v in gd.data_mut() {
                    *v *= c;
                }
                send(*x, Grad::Dense(gd), grads);
            }
            Op::AddConst { x } => send(*x, g, grads),
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                match g {
                    Grad::Dense(mut gd) => {
                        for (v, xi) in gd.data_mut().iter_mut().zip(xv.data()) {
                            if *xi <= 0.0 {
                                *v = 0.0;
                            }
                        }
                        send(*x, Grad::Dense(gd), grads);
                    }
                    Grad::Sparse { shape, rows, cols, vals } => {
                        let n = shape[1];
                        let xd = xv.data();
                        let mut fr = Vec::with_capacity(rows.len());
                        let mut fc = Vec::with_capacity(rows.len());
                        let mut fv = Vec::with_capacity(rows.len());
                        for ((r, c), v) in rows.iter().zip(&cols).zip(&vals) {
                            if xd[*r as usize * n + *c as usize] > 0.0 {
                                fr.push(*r);
                                fc.push(*c);
                                fv.push(*v);
                            }
                        }
                        send(*x, Grad::Sparse { shape, rows: fr, cols: fc, vals: fv }, grads);
                    }
                }
            }
            Op::Exp { x } => {
                let mut gd = g.into_dense();
                for (v, o) in gd.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                    *v *= o;
                }
                send(*x, Grad::Dense(gd), grads);
            }
            Op::Sqrt { x } => {
                let mut gd = g.into_dense();
                for (v, o) in gd.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                    *v /= 2.0 * o.max(1e-9);
                }
                send(*x, Grad::Dense(gd), grads);
            }
            Op::Sin { x } => {
                let mut gd = g.into_dense();
                for (v, xi) in gd.data_mut().iter_mut().zip(self.nodes[*x].value.data()) {
                    *v *= xi.cos();
                }
                send(*x, Grad::Dense(gd), grads);
            }
            Op::Cos { x } => {
                let mut gd = g.into_dense();
                for (v, xi) in gd.data_mut().iter_mut().zip(self.nodes[*x].value.data()) {
                    *v *= -xi.sin();
                }
                send(*x, Grad::Dense(gd), grads);
            }
            Op::ClampMin { x, c } => {
                let mut gd = g.into_dense();
                for (v, xi) in gd.data_mut().iter_mut().zip(self.nodes[*x].value.data()) {
                    if *xi < *c {
                        *v = 0.0;
                    }
                }
                send(*x, Grad::Dense(gd), grads);
            }
            Op::Sum { x } => {
                let s = g.into_dense().item();
                let xv = &self.nodes[*x].value;
                let gx = Tensor::from_vec(xv.shape(), vec![s; xv.len()]);
                send(*x, Grad::Dense(gx), grads);
            }
            Op::RowSum { x } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let gi = gd.data()[i];
                    for j in 0..n {
                        gx.data_mut()[i * n + j] = gi;
                    }
                }
                send(*x, Grad::Dense(gx), grads);
            }
            Op::ColSum { x } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        gx.data_mut()[i * n + j] = gd.data()[j];
                    }
                }
                send(*x, Grad::Dense(gx), grads);
            }
            Op::MulByRow { x, s } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let sv = &self.nodes[*s].value;
                let (m, n) = (xv.rows(), xv.cols());
                if self.nodes[*x].requires_grad {
                    let mut gx = gd.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= sv.data()[i / n];
                    }
                    send(*x, Grad::Dense(gx), grads);
                }
                if self.nodes[*s].requires_grad {
                    let mut gs = Tensor::zeros(&[m]);
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gd.data()[i * n + j] * xv.data()[i * n + j];
                        }
                        gs.data_mut()[i] = acc;
                    }
                    send(*s, Grad::Dense(gs), grads);
                }
            }
            Op::MulByCol { x, s } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let sv = &self.nodes[*s].value;
                let (m, n) = (xv.rows(), xv.cols());
                if self.nodes[*x].requires_grad {
                    let mut gx = gd.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= sv.data()[i % n];
                    }
                    send(*x, Grad::Dense(gx), grads);
                }
                if self.nodes[*s].requires_grad {
                    let mut gs = Tensor::zeros(&[n]);
                    for i in 0..m {
                        for j in 0..n {
                            gs.data_mut()[j] += gd.data()[i * n + j] * xv.data()[i * n + j];
                        }
                    }
                    send(*s, Grad::Dense(gs), grads);
                }
            }
            Op::SegMaxPool { x, argmax } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let segs = gd.rows();
                let mut rows = Vec::with_capacity(segs * n);
                let mut cols = Vec::with_capacity(segs * n);
                let mut vals = Vec::with_capacity(segs * n);
                for s in 0..segs {
                    for j in 0..n {
                        let v = gd.data()[s * n + j];
                        if v != 0.0 {
                            rows.push(argmax[s * n + j]);
                            cols.push(j as u32);
                            vals.push(v);
                        }
                    }
                }
                send(*x, Grad::Sparse { shape: [m, n], rows, cols, vals }, grads);
            }
            Op::Row { x, i } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                gx.data_mut()[i * n..(i + 1) * n].copy_from_slice(gd.data());
                send(*x, Grad::Dense(gx), grads);
            }
            Op::SliceRows { x, start } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                gx.data_mut()[start * n..start * n + gd.len()].copy_from_slice(gd.data());
                send(*x, Grad::Dense(gx), grads);
            }
            Op::Narrow { x, start } => {
                let gd = g.into_dense();
                let xv = &self.nodes[*x].value;
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[*start..*start + gd.len()].copy_from_slice(gd.data());
                send(*x, Grad::Dense(gx), grads);
            }
            Op::Elem { x, i } => {
                let s = g.into_dense().item();
                let xv = &self.nodes[*x].value;
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[*i] = s;
                send(*x, Grad::Dense(gx), grads);
            }
            Op::Stack { parts } => {
                let gd = g.into_dense();
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if self.nodes[p].requires_grad {
                        let slice = gd.data()[off..off + len].to_vec();
                        let gp = Tensor::from_vec(self.nodes[p].value.shape(), slice);
                        send(p, Grad::Dense(gp), grads);
                    }
                    off += len;
                }
            }
            Op::ConcatCols { a, b } => {
                let gd = g.into_dense();
                let (m, p) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let q = self.nodes[*b].value.cols();
                let mut ga = Tensor::zeros(&[m, p]);
                let mut gb = Tensor::zeros(&[m, q]);
                for i in 0..m {
                    ga.data_mut()[i * p..(i + 1) * p]
                        .copy_from_slice(&gd.data()[i * (p + q)..i * (p + q) + p]);
                    gb.data_mut()[i * q..(i + 1) * q]
                        .copy_from_slice(&gd.data()[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                send(*a, Grad::Dense(ga), grads);
                send(*b, Grad::Dense(gb), grads);
            }
            Op::Transpose { x } => {
                let gd = g.into_dense();
                send(*x, Grad::Dense(gd.transposed()), grads);
            }
            Op::Reshape { x } => {
                let gd = g.into_dense();
                let gx = Tensor::from_vec(self.nodes[*x].value.shape(), gd.data().to_vec());
                send(*x, Grad::Dense(gx), grads);
            }
            Op::Chamfer { x, target, nn_xt, nn_tx } => {
                let s = g.into_dense().item();
                let xv = &self.nodes[*x].value;
                let n = xv.rows();
                let m = target.len();
                let mut gx = Tensor::zeros(&[n, 3]);
                let xd = xv.data();
                {
                    let gd = gx.data_mut();
                    for i in 0..n {
                        let q = &target[nn_xt[i] as usize];
                        for k in 0..3 {
                            gd[3 * i + k] += s * 2.0 / n as f64 * (xd[3 * i + k] - q[k]);
                        }
                    }
                    for (j, t) in target.iter().enumerate() {
                        let i = nn_tx[j] as usize;
                        for k in 0..3 {
                            gd[3 * i + k] += s * 2.0 / m as f64 * (xd[3 * i + k] - t[k]);
                        }
                    }
                }
                send(*x, Grad::Dense(gx), grads);
            }
            Op::Kabsch { dst, w, ctx } => {
                let gd = g.into_dense();
                let (g_dst, g_w) = kabsch_backward(
                    ctx,
                    &self.nodes[*dst].value,
                    self.nodes[*w].value.data(),
                    gd.data(),
                );
                if self.nodes[*dst].requires_grad {
                    send(*dst, Grad::Dense(g_dst), grads);
                }
                if self.nodes[*w].requires_grad {
                    send(*w, Grad::Dense(g_w), grads);
                }
            }
        }
    }
}

fn accumulated(prev: Grad, new: Grad) -> Grad {
    match new {
        Grad::Sparse { shape, rows, cols, vals } => match prev {
            Grad::Sparse { shape: ps, rows: mut pr, cols: mut pc, vals: mut pv } => {
                debug_assert_eq!(shape, ps);
                pr.extend(rows);
                pc.extend(cols);
                pv.extend(vals);
                Grad::Sparse { shape: ps, rows: pr, cols: pc, vals: pv }
            }
            dense => {
                let mut t = dense.into_dense();
                let n = shape[1];
                for ((r, c), v) in rows.iter().zip(&cols).zip(&vals) {
                    t.data_mut()[*r as usize * n + *c as usize] += v;
                }
                Grad::Dense(t)
            }
        },
        g_new => {
            let mut t = prev.into_dense();
            let nd = g_new.into_dense();
            for (a, b) in t.data_mut().iter_mut().zip(nd.data()) {
                *a += b;
            }
            Grad::Dense(t)
        }
    }
}

/// Brute force under this point count, kd-tree above.
const CHAMFER_BRUTE_LIMIT: usize = 64;

fn nearest_in(points: &[[f64; 3]], q: &[f64; 3]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

fn nn_indices(from: &[[f64; 3]], to: &[[f64; 3]], force_kd: Option<bool>) -> Vec<u32> {
    let use_kd = force_kd.unwrap_or(to.len() > CHAMFER_BRUTE_LIMIT);
    if !use_kd {
        from.iter().map(|q| nearest_in(to, q).0).collect()
    } else {
        let tree = KdTree::build(to);
        from.iter().map(|q| tree.nearest(q).0 as u32).collect()
    }
}

pub(crate) fn chamfer_parts(xs: &[[f64; 3]], ts: &[[f64; 3]]) -> (f64, Vec<u32>, Vec<u32>) {
    chamfer_parts_forced(xs, ts, None)
}

pub(crate) fn chamfer_parts_forced(
    xs: &[[f64; 3]],
    ts: &[[f64; 3]],
    force_kd: Option<bool>,
) -> (f64, Vec<u32>, Vec<u32>) {
    let nn_xt = nn_indices(xs, ts, force_kd);
    let nn_tx = nn_indices(ts, xs, force_kd);
    let d2 = |a: &[f64; 3], b: &[f64; 3]| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let fwd: f64 =
        xs.iter().zip(&nn_xt).map(|(p, &j)| d2(p, &ts[j as usize])).sum::<f64>() / xs.len() as f64;
    let bwd: f64 =
        ts.iter().zip(&nn_tx).map(|(q, &i)| d2(q, &xs[i as usize])).sum::<f64>() / ts.len() as f64;
    (fwd + bwd, nn_xt, nn_tx)
}

/// Pullback of the alignment output `[R | t]` to the target points and
/// weights. `grad` is the incoming `[12]` gradient.
fn kabsch_backward(
    ctx: &KabschCtx,
    dst_val: &Tensor,
    w_val: &[f64],
    grad: &[f64],
) -> (Tensor, Tensor) {
    let n = ctx.src.len();
    let mut r_bar = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            r_bar[(i, j)] = grad[3 * i + j];
        }
    }
    let t_bar = Vector3::new(grad[9], grad[10], grad[11]);

    // t = c_dst − R c_src.
    let mut c_dst_bar = t_bar;
    r_bar -= t_bar * ctx.c_src.transpose();
    let mut c_src_bar = -(ctx.r.transpose() * t_bar);

    // R = V D Uᵀ  ⇒  Ū = R̄ᵀ V D,  V̄ = R̄ U D.
    let mut d = Matrix3::identity();
    d[(2, 2)] = ctx.det_sign;
    let u_bar = r_bar.transpose() * ctx.v * d;
    let v_bar = r_bar * ctx.u * d;

    // SVD perturbation: H̄ = U [(K_U + K_Uᵀ)Σ + Σ(K_V + K_Vᵀ)] Vᵀ with
    // K_U = F ∘ (UᵀŪ), K_V = F ∘ (VᵀV̄), F_ij = 1/(σ_j² − σ_i²).
    let mut f = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let denom = ctx.sigma[j] * ctx.sigma[j] - ctx.sigma[i] * ctx.sigma[i];
                let denom = if denom.abs() < 1e-9 { 1e-9 * denom.signum_or_one() } else { denom };
                f[(i, j)] = 1.0 / denom;
            }
        }
    }
    let k_u = (ctx.u.transpose() * u_bar).component_mul(&f);
    let k_v = (ctx.v.transpose() * v_bar).component_mul(&f);
    let sig = Matrix3::from_diagonal(&ctx.sigma);
    let h_bar = ctx.u * ((k_u + k_u.transpose()) * sig + sig * (k_v + k_v.transpose()))
        * ctx.v.transpose();

    // H = Σ w_i a_i b_iᵀ, a_i = src_i − c_src, b_i = dst_i − c_dst.
    let dd = dst_val.data();
    let mut g_dst = Tensor::zeros(&[n, 3]);
    let mut g_w = Tensor::zeros(&[n]);
    let mut b_bar_sum = Vector3::zeros();
    for i in 0..n {
        let a = Vector3::new(ctx.src[i][0], ctx.src[i][1], ctx.src[i][2]) - ctx.c_src;
        let b = Vector3::new(dd[3 * i], dd[3 * i + 1], dd[3 * i + 2]) - ctx.c_dst;
        let b_bar = w_val[i] * (h_bar.transpose() * a);
        let a_bar = w_val[i] * (h_bar * b);
        // a depends on the weights only through c_src.
        c_src_bar -= a_bar;
        g_w.data_mut()[i] += a.dot(&(h_bar * b));
        b_bar_sum += b_bar;
        for k in 0..3 {
            g_dst.data_mut()[3 * i + k] += b_bar[k];
        }
    }
    c_dst_bar -= b_bar_sum;

    // c_dst = Σ w_i dst_i / W and c_src = Σ w_i src_i / W.
    for i in 0..n {
        let dst_i = Vector3::new(dd[3 * i], dd[3 * i + 1], dd[3 * i + 2]);
        let src_i = Vector3::new(ctx.src[i][0], ctx.src[i][1], ctx.src[i][2]);
        for k in 0..3 {
            g_dst.data_mut()[3 * i + k] += w_val[i] / ctx.w_sum * c_dst_bar[k];
        }
        g_w.data_mut()[i] += (dst_i - ctx.c_dst).dot(&c_dst_bar) / ctx.w_sum
            + (src_i - ctx.c_src).dot(&c_src_bar) / ctx.w_sum;
    }
    (g_dst, g_w)
}

trait SignumOrOne {
    fn signum_or_one(self) -> f64;
}

impl SignumOrOne for f64 {
    fn signum_or_one(self) -> f64 {
        if self < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}
