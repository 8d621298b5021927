//! Reverse-mode differentiation over dense tensors.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Node values are never mutated once recorded.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::optim::{ParamId, ParamStore};
use super::scalar::{gemm_acc, Scalar};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Rc<Vec<T>>),
    Tanh(usize),
    Sigmoid(usize),
    Powf(usize, T),
    Sum(usize),
    SumSq(usize),
    SumCols(usize),
    SumRows(usize),
    Transpose(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    IndexAdd { a: usize, target: Rc<Vec<usize>>, weights: Option<Rc<Vec<T>>> },
    GroupedMatMul { x: usize, ws: Vec<usize>, segs: Rc<Vec<(usize, usize)>> },
    Rotate(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SoftmaxRows(usize),
    CrossEntropy(usize, Rc<Vec<usize>>),
    BceLogits(usize, Rc<Vec<T>>),
    BatchVecMat(usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = &self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Leaf that takes part in differentiation iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf { param: None }, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Records the current value of a registered parameter.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let src = &store.get(id).tensor;
        let t = Tensor::new(src.shape(), src.data().to_vec()).expect("param shape");
        self.push(t, Op::Leaf { param: Some(id) }, true)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[ids[0]].value.rows();
            let mut total = 0;
            for &i in &ids {
                if nodes[i].value.rows() != rows {
                    return dim_err("concat_cols with differing row counts");
                }
                total += nodes[i].value.cols();
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &ids {
                    out.extend_from_slice(nodes[i].value.row(r));
                }
            }
            Tensor::matrix(rows, total, out)?
        };
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), needs))
    }

    /// `out[rows of segment i] = x[rows of segment i] · W_iᵀ`; rows outside
    /// every segment are zero.
    pub fn grouped_matmul<'t>(
        &'t self,
        x: Var<'t, T>,
        ws: &[Var<'t, T>],
        segs: Rc<Vec<(usize, usize)>>,
    ) -> Result<Var<'t, T>> {
        if ws.len() != segs.len() {
            return dim_err("grouped_matmul: one matrix per segment required");
        }
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            let (m, din) = xv.dims2();
            let dout = match ws.first() {
                Some(w) => nodes[w.id].value.rows(),
                None => din,
            };
            let mut out = vec![T::zero(); m * dout];
            for (w, &(s, e)) in ws.iter().zip(segs.iter()) {
                let wv = &nodes[w.id].value;
                if wv.dims2() != (dout, din) || e > m || s > e {
                    return dim_err(format!(
                        "grouped_matmul: weight {:?} for input {:?} segment {}..{}",
                        wv.shape(),
                        xv.shape(),
                        s,
                        e
                    ));
                }
                gemm_acc(
                    e - s,
                    din,
                    dout,
                    &xv.data()[s * din..e * din],
                    false,
                    wv.data(),
                    true,
                    &mut out[s * dout..e * dout],
                    T::zero(),
                );
            }
            Tensor::matrix(m, dout, out)?
        };
        let mut ids = vec![x.id];
        ids.extend(ws.iter().map(|w| w.id));
        let needs = self.needs(&ids);
        Ok(self.push(
            value,
            Op::GroupedMatMul { x: x.id, ws: ws.iter().map(|w| w.id).collect(), segs },
            needs,
        ))
    }

    fn check_scalar(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        Ok(())
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_scalar(loss)?;
        let grads = self.run_backward(loss.id);
        let shapes = self.nodes.borrow().iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Back-propagates `loss` and accumulates into the gradient slots of
    /// every parameter recorded with [`Tape::param`].
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<()> {
        self.check_scalar(loss)?;
        let grads = self.run_backward(loss.id);
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                let p = &mut store.get_mut(pid).tensor;
                let n = p.len();
                let slot = p.grad.get_or_insert_with(|| vec![T::zero(); n]);
                if let Some(g) = &grads[i] {
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += *v;
                    }
                }
            }
        }
        Ok(())
    }

    fn run_backward(&self, loss: usize) -> Vec<Option<Vec<T>>> {
        let nodes = self.nodes.borrow();
        let n = loss + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss] = Some(vec![T::one()]);

        fn slot<'g, T: Scalar>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            id: usize,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[id].needs_grad {
                return None;
            }
            let len = nodes[id].value.len();
            Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
        }

        for i in (0..n).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, n2) = out.dims2();
                    let k = if *ta { av.rows() } else { av.cols() };
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        if *ta {
                            gemm_acc(k, n2, m, bv.data(), *tb, &g, true, da, T::one());
                        } else {
                            gemm_acc(m, n2, k, &g, false, bv.data(), !*tb, da, T::one());
                        }
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        if *tb {
                            gemm_acc(n2, m, k, &g, true, av.data(), *ta, db, T::one());
                        } else {
                            gemm_acc(k, m, n2, av.data(), !*ta, &g, false, db, T::one());
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, v)| *d += *v);
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        db.iter_mut().zip(&g).for_each(|(d, v)| *d += *v);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, v)| *d += *v);
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        db.iter_mut().zip(&g).for_each(|(d, v)| *d -= *v);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * bv[j];
                        }
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        for j in 0..g.len() {
                            db[j] += g[j] * av[j];
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let c = out.cols();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, v)| *d += *v);
                    }
                    if let Some(dr) = slot(&mut grads, &nodes, *r) {
                        for (j, v) in g.iter().enumerate() {
                            dr[j % c] += *v;
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let c = out.cols();
                    let (av, rv) = (nodes[*a].value.data(), nodes[*r].value.data());
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * rv[j % c];
                        }
                    }
                    if let Some(dr) = slot(&mut grads, &nodes, *r) {
                        for j in 0..g.len() {
                            dr[j % c] += g[j] * av[j];
                        }
                    }
                }
                Op::MulCol(a, col) => {
                    let c = out.cols();
                    let (av, cv) = (nodes[*a].value.data(), nodes[*col].value.data());
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * cv[j / c];
                        }
                    }
                    if let Some(dc) = slot(&mut grads, &nodes, *col) {
                        for j in 0..g.len() {
                            dc[j / c] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, v)| *d += *v * *s);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, v)| *d += *v);
                    }
                }
                Op::MulConst(a, m) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * m[j];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = out.data();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * (T::one() - y[j] * y[j]);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = out.data();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * y[j] * (T::one() - y[j]);
                        }
                    }
                }
                Op::Powf(a, p) => {
                    let x = nodes[*a].value.data();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            da[j] += g[j] * *p * x[j].powf(*p - T::one());
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::SumSq(a) => {
                    let x = nodes[*a].value.data();
                    let two = T::one() + T::one();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..x.len() {
                            da[j] += g[0] * two * x[j];
                        }
                    }
                }
                Op::SumCols(a) => {
                    let c = nodes[*a].value.cols();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (j, d) in da.iter_mut().enumerate() {
                            *d += g[j % c];
                        }
                    }
                }
                Op::SumRows(a) => {
                    let c = nodes[*a].value.cols();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (j, d) in da.iter_mut().enumerate() {
                            *d += g[j / c];
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[*a].value.dims2();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for i2 in 0..r {
                            for j in 0..c {
                                da[i2 * c + j] += g[j * r + i2];
                            }
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let c = out.cols();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (row, &src) in idx.iter().enumerate() {
                            let gr = &g[row * c..(row + 1) * c];
                            let dr = &mut da[src * c..(src + 1) * c];
                            dr.iter_mut().zip(gr).for_each(|(d, v)| *d += *v);
                        }
                    }
                }
                Op::IndexAdd { a, target, weights } => {
                    let c = out.cols();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for (row, &t) in target.iter().enumerate() {
                            let w = weights.as_ref().map_or(T::one(), |w| w[row]);
                            let gr = &g[t * c..(t + 1) * c];
                            let dr = &mut da[row * c..(row + 1) * c];
                            dr.iter_mut().zip(gr).for_each(|(d, v)| *d += *v * w);
                        }
                    }
                }
                Op::GroupedMatMul { x, ws, segs } => {
                    let xv = &nodes[*x].value;
                    let din = xv.cols();
                    let dout = out.cols();
                    if nodes[*x].needs_grad {
                        let dx = slot(&mut grads, &nodes, *x).expect("needs grad");
                        for (w, &(s, e)) in ws.iter().zip(segs.iter()) {
                            gemm_acc(
                                e - s,
                                dout,
                                din,
                                &g[s * dout..e * dout],
                                false,
                                nodes[*w].value.data(),
                                false,
                                &mut dx[s * din..e * din],
                                T::one(),
                            );
                        }
                    }
                    for (w, &(s, e)) in ws.iter().zip(segs.iter()) {
                        if let Some(dw) = slot(&mut grads, &nodes, *w) {
                            gemm_acc(
                                dout,
                                e - s,
                                din,
                                &g[s * dout..e * dout],
                                true,
                                &xv.data()[s * din..e * din],
                                false,
                                dw,
                                T::one(),
                            );
                        }
                    }
                }
                Op::Rotate(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let mut ga = vec![T::zero(); av.len()];
                    let mut gb = vec![T::zero(); bv.len()];
                    for p in (0..av.len()).step_by(2) {
                        let (a0, a1, b0, b1) = (av[p], av[p + 1], bv[p], bv[p + 1]);
                        let (g0, g1) = (g[p], g[p + 1]);
                        let nrm = rot_norm(b0, b1);
                        let (c, s) = (b0 / nrm, b1 / nrm);
                        ga[p] = g0 * c + g1 * s;
                        ga[p + 1] = g1 * c - g0 * s;
                        let dc = g0 * a0 + g1 * a1;
                        let ds = g1 * a0 - g0 * a1;
                        let n3 = nrm * nrm * nrm;
                        gb[p] = (dc * b1 * b1 - ds * b0 * b1) / n3;
                        gb[p + 1] = (ds * b0 * b0 - dc * b0 * b1) / n3;
                    }
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        da.iter_mut().zip(&ga).for_each(|(d, v)| *d += *v);
                    }
                    if let Some(db) = slot(&mut grads, &nodes, *b) {
                        db.iter_mut().zip(&gb).for_each(|(d, v)| *d += *v);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = nodes[p].value.cols();
                        if let Some(dp) = slot(&mut grads, &nodes, p) {
                            for r in 0..rows {
                                for j in 0..c {
                                    dp[r * c + j] += g[r * total + off + j];
                                }
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, c) = out.dims2();
                    let ca = nodes[*a].value.cols();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for r in 0..rows {
                            for j in 0..c {
                                da[r * ca + start + j] += g[r * c + j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (rows, c) = out.dims2();
                    let y = out.data();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for r in 0..rows {
                            let yr = &y[r * c..(r + 1) * c];
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for j in 0..c {
                                da[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy(a, targets) => {
                    let xv = &nodes[*a].value;
                    let (rows, c) = xv.dims2();
                    let scale = g[0] / T::from_usize(rows).unwrap();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for r in 0..rows {
                            let p = softmax_row(xv.row(r));
                            for j in 0..c {
                                let ind = if j == targets[r] { T::one() } else { T::zero() };
                                da[r * c + j] += scale * (p[j] - ind);
                            }
                        }
                    }
                }
                Op::BceLogits(a, y) => {
                    let x = nodes[*a].value.data();
                    let scale = g[0] / T::from_usize(x.len()).unwrap();
                    if let Some(da) = slot(&mut grads, &nodes, *a) {
                        for j in 0..x.len() {
                            da[j] += scale * (sigmoid(x[j]) - y[j]);
                        }
                    }
                }
                Op::BatchVecMat(e, m) => {
                    let (ev, mv) = (&nodes[*e].value, &nodes[*m].value);
                    let (rows, d) = ev.dims2();
                    let dout = out.cols();
                    if let Some(de) = slot(&mut grads, &nodes, *e) {
                        for b in 0..rows {
                            let gb = &g[b * dout..(b + 1) * dout];
                            for i2 in 0..d {
                                let mr = &mv.data()[b * d * dout + i2 * dout..][..dout];
                                de[b * d + i2] += mr.iter().zip(gb).map(|(x, y)| *x * *y).sum();
                            }
                        }
                    }
                    if let Some(dm) = slot(&mut grads, &nodes, *m) {
                        for b in 0..rows {
                            let gb = &g[b * dout..(b + 1) * dout];
                            for i2 in 0..d {
                                let e_bi = ev.data()[b * d + i2];
                                let dr = &mut dm[b * d * dout + i2 * dout..][..dout];
                                dr.iter_mut().zip(gb).for_each(|(x, y)| *x += e_bi * *y);
                            }
                        }
                    }
                }
            }
        }
        grads
    }
}

fn rot_norm<T: Scalar>(b0: T, b1: T) -> T {
    (b0 * b0 + b1 * b1).sqrt().max(T::from_f64_lossy(1e-12))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(x: &[T]) -> Vec<T> {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|v| (*v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    mx + x.iter().map(|v| (*v - mx).exp()).sum::<T>().ln()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let v = self.value();
        Tensor::new(v.shape(), v.data().to_vec()).expect("shape")
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value();
        Tensor::new(v.shape(), v.data().iter().map(|x| f(*x)).collect()).expect("shape")
    }

    fn zip_same(&self, other: Var<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return dim_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
        }
        Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    fn matmul_impl(&self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() > 2 || b.shape().len() > 2 {
                return dim_err("matmul needs matrices");
            }
            let (ra, ca) = a.dims2();
            let (rb, cb) = b.dims2();
            let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
            let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
            if k != k2 {
                return dim_err(format!(
                    "matmul inner dimensions {k} vs {k2} ({:?} x {:?})",
                    a.shape(),
                    b.shape()
                ));
            }
            let mut out = vec![T::zero(); m * n];
            gemm_acc(m, k, n, a.data(), ta, b.data(), tb, &mut out, T::zero());
            Tensor::matrix(m, n, out)?
        };
        Ok(self.binary(other, value, Op::MatMul { a: self.id, b: other.id, ta, tb }))
    }

    /// `self · other`.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, true)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true, false)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    fn row_broadcast(&self, row: Var<'t, T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        if r.len() != c {
            return dim_err(format!("row broadcast {:?} over {:?}", r.shape(), a.shape()));
        }
        let rd = r.data();
        let data = a.data().iter().enumerate().map(|(j, x)| f(*x, rd[j % c])).collect();
        Tensor::new(a.shape(), data)
    }

    /// Adds a `[1 x c]` row to every row.
    pub fn add_row(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.row_broadcast(row, |a, b| a + b)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row element-wise by a `[1 x c]` row.
    pub fn mul_row(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.row_broadcast(row, |a, b| a * b)?;
        Ok(self.binary(row, v, Op::MulRow(self.id, row.id)))
    }

    /// Scales row `i` by `col[i]` for a `[r x 1]` column.
    pub fn mul_col(&self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, cv) = (self.value(), col.value());
            let (r, c) = a.dims2();
            if cv.len() != r {
                return dim_err(format!("column broadcast {:?} over {:?}", cv.shape(), a.shape()));
            }
            let cd = cv.data();
            let data = a.data().iter().enumerate().map(|(j, x)| *x * cd[j / c]).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.binary(col, value, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let v = self.map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        let v = self.map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Element-wise product with a constant buffer (dropout masks).
    pub fn mul_const(&self, mask: Rc<Vec<T>>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if mask.len() != a.len() {
                return dim_err("mask length differs from tensor length");
            }
            Tensor::new(a.shape(), a.data().iter().zip(mask.iter()).map(|(x, m)| *x * *m).collect())?
        };
        Ok(self.unary(value, Op::MulConst(self.id, mask)))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let v = self.map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn powf(&self, p: T) -> Var<'t, T> {
        let v = self.map(|x| x.powf(p));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.value().len().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn sum_sq(&self) -> Var<'t, T> {
        let s: T = self.value().data().iter().map(|x| *x * *x).sum();
        self.unary(Tensor::scalar(s), Op::SumSq(self.id))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> Var<'t, T> {
        self.sum_sq().powf(T::from_f64_lossy(0.5))
    }

    pub fn dot(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.mul(other)?.sum())
    }

    /// Column sums as a `[1 x c]` row.
    pub fn sum_cols(&self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2();
            let mut out = vec![T::zero(); c];
            for i in 0..r {
                out.iter_mut().zip(a.row(i)).for_each(|(o, x)| *o += *x);
            }
            Tensor::matrix(1, c, out).expect("shape")
        };
        self.unary(value, Op::SumCols(self.id))
    }

    /// Row sums as a `[r x 1]` column.
    pub fn sum_rows(&self) -> Var<'t, T> {
        let value = {
            let a = self.value();
            let r = a.rows();
            let out = (0..r).map(|i| a.row(i).iter().copied().sum()).collect();
            Tensor::matrix(r, 1, out).expect("shape")
        };
        self.unary(value, Op::SumRows(self.id))
    }

    pub fn transpose(&self) -> Var<'t, T> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.to_tensor().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Rows `idx[0], idx[1], ...` stacked into a new matrix.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                if i >= r {
                    return dim_err(format!("gather index {i} out of {r} rows"));
                }
                out.extend_from_slice(a.row(i));
            }
            Tensor::matrix(idx.len(), c, out)?
        };
        Ok(self.unary(value, Op::Gather(self.id, idx)))
    }

    /// `out[target[i]] += weight[i] * self[i]` into `n_out` zero rows.
    pub fn index_add(
        &self,
        target: Rc<Vec<usize>>,
        weights: Option<Rc<Vec<T>>>,
        n_out: usize,
    ) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2();
            if target.len() != r || weights.as_ref().is_some_and(|w| w.len() != r) {
                return dim_err("index_add: one target (and weight) per row");
            }
            let mut out = vec![T::zero(); n_out * c];
            for (row, &t) in target.iter().enumerate() {
                if t >= n_out {
                    return dim_err(format!("index_add target {t} out of {n_out}"));
                }
                let w = weights.as_ref().map_or(T::one(), |w| w[row]);
                out[t * c..(t + 1) * c].iter_mut().zip(a.row(row)).for_each(|(o, x)| *o += w * *x);
            }
            Tensor::matrix(n_out, c, out)?
        };
        Ok(self.unary(value, Op::IndexAdd { a: self.id, target, weights }))
    }

    /// Treats consecutive column pairs as complex numbers and multiplies
    /// `self` by the unit-normalised pairs of `other`.
    pub fn rotate(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return dim_err(format!("rotate: {:?} vs {:?}", a.shape(), b.shape()));
            }
            if a.cols() % 2 != 0 {
                return dim_err(format!("rotate needs an even dimension, got {}", a.cols()));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![T::zero(); ad.len()];
            for p in (0..ad.len()).step_by(2) {
                let nrm = rot_norm(bd[p], bd[p + 1]);
                let (c, s) = (bd[p] / nrm, bd[p + 1] / nrm);
                out[p] = ad[p] * c - ad[p + 1] * s;
                out[p + 1] = ad[p] * s + ad[p + 1] * c;
            }
            Tensor::new(a.shape(), out)?
        };
        Ok(self.binary(other, value, Op::Rotate(self.id, other.id)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2();
            if start > end || end > c {
                return dim_err(format!("slice {start}..{end} of {c} columns"));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&a.row(i)[start..end]);
            }
            Tensor::matrix(r, end - start, out)?
        };
        Ok(self.unary(value, Op::SliceCols(self.id, start)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2();
            if c == 0 {
                return dim_err("softmax over zero columns");
            }
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                out.extend(softmax_row(a.row(i)));
            }
            Tensor::new(a.shape(), out)?
        };
        Ok(self.unary(value, Op::SoftmaxRows(self.id)))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&self, targets: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let (r, c) = a.dims2();
            if r == 0 || targets.len() != r {
                return Err(Error::Contract(format!(
                    "cross_entropy: {} targets for {} rows",
                    targets.len(),
                    r
                )));
            }
            let mut total = T::zero();
            for (i, &t) in targets.iter().enumerate() {
                if t >= c {
                    return dim_err(format!("target {t} out of {c} classes"));
                }
                let row = a.row(i);
                total += log_sum_exp(row) - row[t];
            }
            Tensor::scalar(total / T::from_usize(r).unwrap())
        };
        Ok(self.unary(value, Op::CrossEntropy(self.id, targets)))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and soft targets.
    pub fn bce_with_logits(&self, targets: Rc<Vec<T>>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if targets.len() != a.len() || a.is_empty() {
                return dim_err("bce_with_logits: target length differs");
            }
            let mut total = T::zero();
            for (x, y) in a.data().iter().zip(targets.iter()) {
                total += x.max(T::zero()) - *x * *y + (T::one() + (-x.abs()).exp()).ln();
            }
            Tensor::scalar(total / T::from_usize(a.len()).unwrap())
        };
        Ok(self.unary(value, Op::BceLogits(self.id, targets)))
    }

    /// Per-row vector-matrix product: `self` is `[B x d]`, `mats` is
    /// `[B x d*dout]` holding one row-major `d x dout` matrix per row.
    pub fn batch_vec_mat(&self, mats: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (e, m) = (self.value(), mats.value());
            let (b, d) = e.dims2();
            let (bm, dm) = m.dims2();
            if b != bm || d == 0 || dm % d != 0 {
                return dim_err(format!("batch_vec_mat {:?} with {:?}", e.shape(), m.shape()));
            }
            let dout = dm / d;
            let mut out = vec![T::zero(); b * dout];
            for r in 0..b {
                let o = &mut out[r * dout..(r + 1) * dout];
                for i in 0..d {
                    let ei = e.data()[r * d + i];
                    let mr = &m.data()[r * dm + i * dout..][..dout];
                    o.iter_mut().zip(mr).for_each(|(x, y)| *x += ei * *y);
                }
            }
            Tensor::matrix(b, dout, out)?
        };
        Ok(self.binary(mats, value, Op::BatchVecMat(self.id, mats.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let loss = x.sum();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_gradient_is_twice_x() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]).with_grad());
        let loss = x.dot(x).unwrap();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).with_grad());
        let loss = c.mul(x).unwrap().sum();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(c).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn rotate_quarter_turn() {
        let tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let r = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let out = u.rotate(r).unwrap();
        let v = out.value();
        assert!((v.data()[0]).abs() < 1e-15 && (v.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotate_rejects_odd_dimension() {
        let tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 2.0]).unwrap());
        assert!(matches!(u.rotate(u), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradients_accumulate_into_parameters() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("theta", Tensor::vector(vec![3.0])).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let x = tape.param(&store, p);
            let loss = x.mul(x).unwrap().sum();
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(p).tensor.grad.as_deref(), Some(&[12.0][..]));
        store.zero_grad();
        assert!(store.get(p).tensor.grad.is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap());
        let l = x.cross_entropy(Rc::new(vec![0])).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(x.cross_entropy(Rc::new(vec![])).is_err());
    }
}
