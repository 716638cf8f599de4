//! A small tape-based reverse-mode autodiff over dense 2-D arrays.
//!
//! Every value on the tape is an `Array2<T>`. Parameters are borrowed from
//! their owning store, so building a graph never copies weights. Nodes are
//! appended in evaluation order; [`Graph::backward`] walks them in reverse.
//!
//! The op set is exactly what the localization model needs: dense and
//! block-batched matmuls, broadcasting adds, row-wise layer norm and softmax,
//! slicing/concatenation, span clamping, and the fused loss terms.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, CowArray, Ix2, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Scalar type the graph can run on (`f32` for training, `f64` for checks).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One prediction row's regression target inside a fused span loss.
#[derive(Clone, Copy, Debug)]
pub struct SpanTarget {
    pub row: usize,
    pub start: f64,
    pub end: f64,
    pub weight: f64,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    BatchMatMul(Var, Var, usize),
    ClampOrder {
        x: Var,
        swapped: Vec<bool>,
        pass: Array2<T>,
    },
    Sum(Var),
    SpanLoss {
        pred: Var,
        grads: Vec<(usize, T, T)>,
    },
    CrossEntropy {
        logits: Var,
        grad: Array2<T>,
    },
    Focal {
        logits: Var,
        grad: Array2<T>,
    },
    Hinge {
        scores: Var,
        grads: Vec<(usize, T)>,
    },
}

struct Node<'a, T: Real> {
    value: CowArray<'a, T, Ix2>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Evaluation tape. `'a` is the lifetime of borrowed parameter storage.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    param_vars: Vec<Option<Var>>,
    /// Multiplier applied to the gIoU part of span-loss gradients. Always 1
    /// outside of fault-injection tests of the gradient checker.
    giou_grad_scale: T,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            giou_grad_scale: T::one(),
        }
    }

    #[doc(hidden)]
    pub fn set_giou_grad_scale(&mut self, s: T) {
        self.giou_grad_scale = s;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: CowArray<'a, T, Ix2>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(CowArray::from(value), op, rg)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(CowArray::from(value), Op::Leaf, false)
    }

    /// A differentiable leaf that is not a stored parameter (used by the loss
    /// API and gradient checks on raw model outputs).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(CowArray::from(value), Op::Leaf, true)
    }

    /// A trainable parameter borrowed from its store, deduplicated by index.
    pub fn param(&mut self, index: usize, value: ArrayView2<'a, T>) -> Var {
        if index >= self.param_vars.len() {
            self.param_vars.resize(index + 1, None);
        }
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(CowArray::from(value), Op::Leaf, true);
        self.nodes[v.0].param = Some(index);
        self.param_vars[index] = Some(v);
        v
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.to_owned();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push_owned(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[1 × n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let out = &self.value(a) + &self.value(row);
        self.push_owned(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push_owned(out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by a `[1 × n]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) * &self.value(row);
        self.push_owned(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push_owned(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push_owned(out, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization with learned `[1 × n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let n = T::from_usize(xv.ncols()).unwrap();
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push_owned(out, Op::Softmax(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push_owned(out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push_owned(out, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<T> = self.value(a).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        self.push_owned(out, Op::Reshape(a), &[a])
    }

    /// Block-diagonal batched product: `a` is `blocks` stacked `[m × k]`
    /// matrices, `b` is `blocks` stacked `[k × n]`; output stacks `[m × n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.nrows() / blocks;
        let k = bv.nrows() / blocks;
        debug_assert_eq!(av.ncols(), k);
        let n = bv.ncols();
        let mut out = Array2::zeros((blocks * m, n));
        for p in 0..blocks {
            let ab = av.slice(s![p * m..(p + 1) * m, ..]);
            let bb = bv.slice(s![p * k..(p + 1) * k, ..]);
            out.slice_mut(s![p * m..(p + 1) * m, ..]).assign(&ab.dot(&bb));
        }
        self.push_owned(out, Op::BatchMatMul(a, b, blocks), &[a, b])
    }

    /// Treats each row as raw `(start, end)`, swaps if reversed, clips to [0, 1].
    pub fn clamp_order(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.ncols(), 2);
        let mut out = Array2::zeros(xv.dim());
        let mut pass = Array2::zeros(xv.dim());
        let mut swapped = Vec::with_capacity(xv.nrows());
        let (zero, one) = (T::zero(), T::one());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let sw = row[0] > row[1];
            let (lo, hi) = if sw { (row[1], row[0]) } else { (row[0], row[1]) };
            for (j, v) in [lo, hi].into_iter().enumerate() {
                out[[i, j]] = v.max(zero).min(one);
                pass[[i, j]] = if v >= zero && v <= one { one } else { zero };
            }
            swapped.push(sw);
        }
        self.push_owned(out, Op::ClampOrder { x, swapped, pass }, &[x])
    }

    /// Sum of all entries as a `[1 × 1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push_owned(Array2::from_elem((1, 1), total), Op::Sum(a), &[a])
    }

    /// Adds scalar nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Weighted span regression loss over `[P × 2]` predictions:
    /// `Σ w · (l1_weight · L1 + giou_weight · (1 − gIoU))`.
    pub fn span_loss(&mut self, pred: Var, targets: &[SpanTarget], l1_weight: f64, giou_weight: f64) -> (Var, f64, f64) {
        let pv = self.value(pred);
        let mut total = 0.0;
        let mut l1_total = 0.0;
        let mut giou_total = 0.0;
        let mut grads = Vec::with_capacity(targets.len());
        let gs = self.giou_grad_scale.f64();
        for t in targets {
            let ps = pv[[t.row, 0]].f64();
            let pe = pv[[t.row, 1]].f64();
            let l1 = (ps - t.start).abs() + (pe - t.end).abs();
            let g = crate::span::giou_with_grad(ps, pe, t.start, t.end);
            l1_total += t.weight * l1_weight * l1;
            giou_total += t.weight * giou_weight * (1.0 - g.giou);
            total += t.weight * (l1_weight * l1 + giou_weight * (1.0 - g.giou));
            let ds = t.weight * (l1_weight * sign(ps - t.start) - giou_weight * gs * g.d_start);
            let de = t.weight * (l1_weight * sign(pe - t.end) - giou_weight * gs * g.d_end);
            grads.push((t.row, T::of(ds), T::of(de)));
        }
        let v = self.push_owned(Array2::from_elem((1, 1), T::of(total)), Op::SpanLoss { pred, grads }, &[pred]);
        (v, l1_total, giou_total)
    }

    /// `Σ_i weights[i] · CE(softmax(logits_i), targets[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let p = softmax_rows(lv);
        let mut grad = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = lv.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).f64();
            let lse = max + row.iter().map(|&v| (v.f64() - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[t].f64());
            for c in 0..lv.ncols() {
                let y = if c == t { 1.0 } else { 0.0 };
                grad[[i, c]] = T::of(w * (p[[i, c]].f64() - y));
            }
        }
        self.push_owned(Array2::from_elem((1, 1), T::of(total)), Op::CrossEntropy { logits, grad }, &[logits])
    }

    /// Sigmoid focal loss on the first `classes` columns of `logits`, summed
    /// over rows and classes and multiplied by `scale`. `targets[i]` is the
    /// positive class of row `i`, or `None` when every class is negative.
    pub fn focal(&mut self, logits: Var, classes: usize, targets: &[Option<usize>], gamma: f64, alpha: f64, scale: f64) -> Var {
        let lv = self.value(logits);
        let mut grad = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            for c in 0..classes {
                let x = lv[[i, c]].f64();
                let (l, g) = focal_term(x, *t == Some(c), gamma, alpha);
                total += scale * l;
                grad[[i, c]] = T::of(scale * g);
            }
        }
        self.push_owned(Array2::from_elem((1, 1), T::of(total)), Op::Focal { logits, grad }, &[logits])
    }

    /// Mean over `(inside, outside)` row pairs of `max(0, margin + s_out − s_in)`
    /// on a `[n × 1]` score column.
    pub fn hinge(&mut self, scores: Var, pairs: &[(usize, usize)], margin: f64) -> Var {
        let sv = self.value(scores);
        let n = pairs.len().max(1) as f64;
        let mut total = 0.0;
        let mut grads = Vec::new();
        for &(i, o) in pairs {
            let m = margin + sv[[o, 0]].f64() - sv[[i, 0]].f64();
            if m > 0.0 {
                total += m / n;
                grads.push((o, T::of(1.0 / n)));
                grads.push((i, T::of(-1.0 / n)));
            }
        }
        self.push_owned(Array2::from_elem((1, 1), T::of(total)), Op::Hinge { scores, grads }, &[scores])
    }

    /// Reverse pass from a `[1 × 1]` output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem(self.nodes[out.0].value.dim(), T::one()));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, d: Array2<T>, grads: &mut Vec<Option<Array2<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.dot(&self.value(*b)), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, g.t().dot(&self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        acc(*b, g.clone(), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::AddRow(a, r) => {
                    if self.nodes[r.0].requires_grad {
                        acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, &g * &self.value(*b), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, &g * &self.value(*a), &mut grads);
                    }
                }
                Op::MulRow(a, r) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, &g * &self.value(*r), &mut grads);
                    }
                    if self.nodes[r.0].requires_grad {
                        let d = (&g * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(*r, d, &mut grads);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.mapv(|v| v * c), &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.nodes[bias.0].requires_grad {
                        acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.nodes[gain.0].requires_grad {
                        acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.nodes[x.0].requires_grad {
                        let dxhat = &g * &self.value(*gain);
                        let n = T::from_usize(dxhat.ncols()).unwrap();
                        let mut dx = Array2::zeros(dxhat.dim());
                        for r in 0..dxhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let s1 = dh.sum();
                            let s2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            let k = inv_std[r] / n;
                            for c in 0..dh.len() {
                                dx[[r, c]] = k * (n * dh[c] - s1 - xh[c] * s2);
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = &g * p;
                    for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv -= pv * s);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.nodes[p.0].requires_grad {
                            acc(*p, g.slice(s![.., off..off + w]).to_owned(), &mut grads);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if self.nodes[p.0].requires_grad {
                            acc(*p, g.slice(s![off..off + h, ..]).to_owned(), &mut grads);
                        }
                        off += h;
                    }
                }
                Op::Reshape(a) => {
                    let dim = self.shape(*a);
                    let flat: Vec<T> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(dim, flat).unwrap(), &mut grads);
                }
                Op::BatchMatMul(a, b, blocks) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let m = av.nrows() / blocks;
                    let k = bv.nrows() / blocks;
                    let need_a = self.nodes[a.0].requires_grad;
                    let need_b = self.nodes[b.0].requires_grad;
                    let mut da = if need_a { Some(Array2::zeros(av.dim())) } else { None };
                    let mut db = if need_b { Some(Array2::zeros(bv.dim())) } else { None };
                    for p in 0..*blocks {
                        let gb = g.slice(s![p * m..(p + 1) * m, ..]);
                        if let Some(da) = da.as_mut() {
                            let bb = bv.slice(s![p * k..(p + 1) * k, ..]);
                            da.slice_mut(s![p * m..(p + 1) * m, ..]).assign(&gb.dot(&bb.t()));
                        }
                        if let Some(db) = db.as_mut() {
                            let ab = av.slice(s![p * m..(p + 1) * m, ..]);
                            db.slice_mut(s![p * k..(p + 1) * k, ..]).assign(&ab.t().dot(&gb));
                        }
                    }
                    if let Some(da) = da {
                        acc(*a, da, &mut grads);
                    }
                    if let Some(db) = db {
                        acc(*b, db, &mut grads);
                    }
                }
                Op::ClampOrder { x, swapped, pass } => {
                    let mut d = &g * pass;
                    for (r, &sw) in swapped.iter().enumerate() {
                        if sw {
                            d.swap([r, 0], [r, 1]);
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Sum(a) => {
                    let c = g[[0, 0]];
                    acc(*a, Array2::from_elem(self.shape(*a), c), &mut grads);
                }
                Op::SpanLoss { pred, grads: rows } => {
                    let c = g[[0, 0]];
                    let mut d = Array2::zeros(self.shape(*pred));
                    for &(r, ds, de) in rows {
                        d[[r, 0]] += c * ds;
                        d[[r, 1]] += c * de;
                    }
                    acc(*pred, d, &mut grads);
                }
                Op::CrossEntropy { logits, grad } | Op::Focal { logits, grad } => {
                    let c = g[[0, 0]];
                    acc(*logits, grad.mapv(|v| v * c), &mut grads);
                }
                Op::Hinge { scores, grads: rows } => {
                    let c = g[[0, 0]];
                    let mut d = Array2::zeros(self.shape(*scores));
                    for &(r, v) in rows {
                        d[[r, 0]] += c * v;
                    }
                    acc(*scores, d, &mut grads);
                }
            }
        }
        Grads { grads }
    }

    /// Collects `(param index, gradient)` for every parameter used in the graph.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(usize, Array2<T>)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(idx, v)| {
                let v = (*v)?;
                let g = grads.get(v)?.clone();
                Some((idx, g))
            })
            .collect()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_rows<T: Real>(a: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// log σ(x) computed without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one logit and its derivative with respect to that logit.
pub(crate) fn focal_term(x: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = log_sigmoid(x);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        // d/dx of -α q^γ log p, with dp/dx = p q
        let grad = alpha * (gamma * p * q.powf(gamma) * log_p - q.powf(gamma + 1.0));
        (loss, grad)
    } else {
        let log_q = log_sigmoid(-x);
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = -(1.0 - alpha) * (gamma * p.powf(gamma) * q * log_q - p.powf(gamma + 1.0));
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(loss)/d(input) by central differences; `build` maps the
    /// differentiable input to a scalar.
    fn check<F>(x0: Array2<f64>, build: F)
    where
        F: for<'g> Fn(&mut Graph<'g, f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += d;
                let mut g = Graph::new();
                let x = g.input(xp);
                let o = build(&mut g, x);
                g.scalar(o)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-5, "entry ({r},{c}): analytic {a} vs numeric {num}");
        }
    }

    #[test]
    fn matmul_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 1, 4);
        let m = rand_mat(&mut rng, 5, 4);
        check(rand_mat(&mut rng, 5, 3), |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let m = g.constant(m.clone());
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            let y = g.mul(y, m);
            let z = g.matmul_nt(y, m);
            let z = g.scale(z, 0.3);
            g.sum(z)
        });
    }

    #[test]
    fn weights_receive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 3);
        let r = rand_mat(&mut rng, 1, 3);
        check(rand_mat(&mut rng, 3, 3), |g, w| {
            let x = g.constant(x.clone());
            let r = g.constant(r.clone());
            let y = g.matmul(x, w);
            let y = g.mul_row(y, r);
            let y = g.matmul_nt(y, w);
            g.sum(y)
        });
        check(rand_mat(&mut rng, 1, 3), |g, r| {
            let x = g.constant(x.clone());
            let y = g.mul_row(x, r);
            let y = g.add_row(y, r);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }

    #[test]
    fn layer_norm_softmax_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gain = rand_mat(&mut rng, 1, 6);
        let bias = rand_mat(&mut rng, 1, 6);
        let m = rand_mat(&mut rng, 4, 6);
        check(rand_mat(&mut rng, 4, 6), |g, x| {
            let gn = g.constant(gain.clone());
            let bs = g.constant(bias.clone());
            let m = g.constant(m.clone());
            let y = g.layer_norm(x, gn, bs);
            let y = g.softmax(y);
            let y = g.mul(y, m);
            let y = g.relu(y);
            g.sum(y)
        });
        let x = rand_mat(&mut rng, 4, 6);
        check(gain.clone(), |g, gn| {
            let xv = g.constant(x.clone());
            let bs = g.input(bias.clone());
            let m = g.constant(m.clone());
            let y = g.layer_norm(xv, gn, bs);
            let y = g.mul(y, m);
            g.sum(y)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = rand_mat(&mut rng, 6, 6);
        check(rand_mat(&mut rng, 4, 6), |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let b = g.slice_rows(x, 2, 2);
            let c = g.concat_cols(&[a, a]);
            let d = g.concat_rows(&[c, b]);
            let e = g.reshape(d, 6, 6);
            let m = g.constant(m.clone());
            let f = g.mul(e, m);
            g.sum(f)
        });
    }

    #[test]
    fn batch_matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_mat(&mut rng, 3 * 4, 2);
        let a = rand_mat(&mut rng, 3 * 5, 4);
        let m = rand_mat(&mut rng, 15, 2);
        check(a.clone(), |g, x| {
            let bv = g.constant(b.clone());
            let y = g.batch_matmul(x, bv, 3);
            let m = g.constant(m.clone());
            let y = g.mul(y, m);
            g.sum(y)
        });
        check(b, |g, x| {
            let av = g.constant(a.clone());
            let y = g.batch_matmul(av, x, 3);
            let m = g.constant(m.clone());
            let y = g.mul(y, m);
            g.sum(y)
        });
    }

    #[test]
    fn batch_matmul_matches_blockwise_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 6, 2);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let y = g.batch_matmul(av, bv, 2);
        let top = a.slice(s![0..2, ..]).dot(&b.slice(s![0..3, ..]));
        let bot = a.slice(s![2..4, ..]).dot(&b.slice(s![3..6, ..]));
        assert_eq!(g.value(y).slice(s![0..2, ..]), top);
        assert_eq!(g.value(y).slice(s![2..4, ..]), bot);
    }

    #[test]
    fn clamp_order_forward_and_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(array![[0.9, 0.4], [-0.1, 0.5], [1.2, 1.5]]);
        let y = g.clamp_order(x);
        assert_eq!(g.value(y), array![[0.4, 0.9], [0.0, 0.5], [1.0, 1.0]]);
        let w = g.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let z = g.mul(y, w);
        let z = g.sum(z);
        let gr = g.backward(z);
        assert_eq!(gr.get(x).unwrap(), array![[2.0, 1.0], [0.0, 4.0], [0.0, 0.0]]);
    }

    #[test]
    fn loss_ops_grad() {
        check(array![[0.1, 0.5], [0.35, 0.6], [0.2, 0.3]], |g, x| {
            let t = [
                SpanTarget { row: 0, start: 0.3, end: 0.7, weight: 1.0 },
                SpanTarget { row: 1, start: 0.3, end: 0.7, weight: 2.0 },
                SpanTarget { row: 2, start: 0.5, end: 0.9, weight: 0.5 },
            ];
            g.span_loss(x, &t, 10.0, 1.0).0
        });
        check(array![[0.3, -1.2], [2.0, 0.1], [0.0, 0.4]], |g, x| g.cross_entropy(x, &[0, 1, 1], &[1.0, 0.1, 0.7]));
        check(array![[0.3, -1.2, 0.0], [2.0, 0.1, 0.0]], |g, x| g.focal(x, 2, &[Some(1), None], 2.0, 0.25, 0.5));
        check(array![[0.3], [0.1], [-0.4], [0.9]], |g, x| g.hinge(x, &[(0, 2), (3, 1), (1, 0)], 0.2));
    }

    #[test]
    fn focal_reductions() {
        // γ = 0, α = 0.5 is half of binary cross-entropy
        for x in [-2.0, -0.3, 0.0, 1.7] {
            let p: f64 = sigmoid(x);
            let (lp, _) = focal_term(x, true, 0.0, 0.5);
            let (ln, _) = focal_term(x, false, 0.0, 0.5);
            assert!((lp - 0.5 * -p.ln()).abs() < 1e-12);
            assert!((ln - 0.5 * -(1.0 - p).ln()).abs() < 1e-12);
        }
        let (l, _) = focal_term(0.0, true, 2.0, 0.25);
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
        let (l, _) = focal_term(60.0, true, 2.0, 0.25);
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn params_are_deduplicated_and_collected() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        let mut g = Graph::<f64>::new();
        let a = g.param(0, w.view());
        let b = g.param(0, w.view());
        assert_eq!(a, b);
        let y = g.matmul(a, b);
        let y = g.sum(y);
        let gr = g.backward(y);
        let pg = g.param_grads(&gr);
        assert_eq!(pg.len(), 1);
        // d/dW sum(W W) = 1 Wᵀ + Wᵀ 1
        let ones = Array2::<f64>::ones((2, 2));
        let expect = ones.dot(&w.t()) + w.t().dot(&ones);
        assert_eq!(pg[0].1, expect);
    }
}
