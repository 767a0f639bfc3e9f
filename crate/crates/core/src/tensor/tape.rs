//! Reverse-mode differentiation over a fixed operation vocabulary.

use std::rc::Rc;

use super::kernels::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::math::sigmoid;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row-major input: each row is a list of `(column, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub width: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// One softmax cross-entropy term: the positive column competes with the
/// listed negative columns of the same logits row.
#[derive(Debug, Clone, PartialEq)]
pub struct XentRow {
    pub row: usize,
    pub pos_col: usize,
    pub neg_cols: Vec<usize>,
    pub weight: f64,
}

/// One list for the list-wise cross entropy: row indices into the score
/// column, binary labels, and the list's weight in the total.
#[derive(Debug, Clone, PartialEq)]
pub struct ListSpec {
    pub items: Vec<usize>,
    pub labels: Vec<f64>,
    pub weight: f64,
}

enum Op {
    Leaf,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    SparseLinear(ParamId, Rc<SparseRows>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    L2Norm(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    RepeatRow(Var),
    MulCol(Var, Var, usize),
    Sum(Var),
    SoftmaxXent(Var, Vec<XentRow>),
    Bce(Var, Vec<f64>, Vec<f64>),
    ListCe(Var, usize, Vec<ListSpec>),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        keys: Rc<Vec<Vec<usize>>>,
        scale: f64,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn add(&mut self, other: &Gradients) {
        if self.per_param.len() < other.per_param.len() {
            self.per_param.resize(other.per_param.len(), None);
        }
        for (mine, theirs) in self.per_param.iter_mut().zip(&other.per_param) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("kernel output shape")
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Tape { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite value produced on tape".into()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let t = self.store.value(id);
        let value = mat(t.rows(), t.cols(), t.data().to_vec());
        self.push(value, Op::Param(id))
    }

    /// Embedding lookup: selected rows of a parameter table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.store.value(id);
        let (n, c) = dims(t);
        if rows.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Lookup(format!("row {r} outside table `{}` of {n} rows", self.store.name(id))));
            }
            data.extend_from_slice(t.row(r));
        }
        self.push(mat(rows.len(), c, data), Op::Gather(id, rows.to_vec()))
    }

    /// `sparse_input · W` for a parameter `W` of shape `width × out`.
    pub fn sparse_linear(&mut self, id: ParamId, input: Rc<SparseRows>) -> Result<Var> {
        let w = self.store.value(id);
        let (wr, wc) = dims(w);
        if input.width != wr {
            return Err(Error::Shape(format!("sparse width {} vs weight rows {wr}", input.width)));
        }
        if input.rows.is_empty() {
            return Err(Error::Shape("sparse input with zero rows".into()));
        }
        let mut out = vec![0.0; input.rows.len() * wc];
        for (r, row) in input.rows.iter().enumerate() {
            let o = &mut out[r * wc..(r + 1) * wc];
            for &(col, val) in row {
                if col >= wr {
                    return Err(Error::Shape(format!("sparse column {col} >= width {wr}")));
                }
                for (x, &wv) in o.iter_mut().zip(w.row(col)) {
                    *x += val * wv;
                }
            }
        }
        let n = input.rows.len();
        self.push(mat(n, wc, out), Op::SparseLinear(id, input))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} · {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(mat(n, m, out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt {n}x{k} · ({m}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        matmul_bt_acc(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(mat(n, m, out), Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.dims(a), self.dims(b))));
        }
        let (n, m) = self.dims(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        self.push(mat(n, m, data), Op::Add(a, b))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(b) != (1, m) {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", (n, m), self.dims(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(&bias).for_each(|(x, y)| *x += y);
        }
        self.push(mat(n, m, data), Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("mul {:?} * {:?}", self.dims(a), self.dims(b))));
        }
        let (n, m) = self.dims(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        self.push(mat(n, m, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (n, m) = self.dims(a);
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(mat(n, m, data), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(mat(n, m, data), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(mat(n, m, data), Op::Sigmoid(a))
    }

    /// Row-wise softmax. `mask[i*m + j] == false` excludes entry `(i, j)`;
    /// a fully masked row yields zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.dims(a);
        if let Some(mask) = mask {
            if mask.len() != n * m {
                return Err(Error::Shape(format!("mask of {} for {n}x{m}", mask.len())));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * m + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if keep(j) && x[i * m + j] > max {
                    max = x[i * m + j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..m {
                if keep(j) {
                    let e = (x[i * m + j] - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for j in 0..m {
                out[i * m + j] /= total;
            }
        }
        self.push(mat(n, m, out), Op::Softmax(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            let norm = crate::math::norm(row).max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        self.push(mat(n, m, data), Op::L2Norm(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| Error::Shape("empty concat".into()))?;
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let m: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(mat(n, m, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| Error::Shape("empty concat".into()))?;
        if parts.iter().any(|&p| self.dims(p).1 != m) {
            return Err(Error::Shape("concat_rows with differing column counts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len() / m;
        self.push(mat(n, m, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!("slice {start}..{} of {m} columns", start + len)));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(mat(n, len, data), Op::SliceCols(a, start))
    }

    /// Scaled dot-product attention where query row `i` sees only the key
    /// rows listed in `keys[i]`. Every list must be non-empty.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, keys: Rc<Vec<Vec<usize>>>, scale: f64) -> Result<Var> {
        let (n, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if d != dk || nk != nv || keys.len() != n {
            return Err(Error::Shape(format!(
                "segment attention over q {n}x{d}, k {nk}x{dk}, v {nv}x{dv}, {} key lists",
                keys.len()
            )));
        }
        if keys.iter().any(|list| list.is_empty() || list.iter().any(|&j| j >= nk)) {
            return Err(Error::Attention(format!("a query row has no keys or a key outside {nk} rows")));
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = Vec::with_capacity(keys.iter().map(Vec::len).sum());
        let mut out = vec![0.0; n * dv];
        for (i, list) in keys.iter().enumerate() {
            let qi = &qv[i * d..(i + 1) * d];
            let base = weights.len();
            let mut max = f64::NEG_INFINITY;
            for &j in list {
                let s = scale * qi.iter().zip(&kv[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                max = max.max(s);
                weights.push(s);
            }
            let w = &mut weights[base..];
            let mut total = 0.0;
            for x in w.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            let o = &mut out[i * dv..(i + 1) * dv];
            for (x, &j) in w.iter_mut().zip(list) {
                *x /= total;
                o.iter_mut().zip(&vv[j * dv..(j + 1) * dv]).for_each(|(a, b)| *a += *x * b);
            }
        }
        self.push(mat(n, dv, out), Op::SegmentAttention { q, k, v, keys, scale, weights })
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(a);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Shape(format!("row selection out of range for {n} rows")));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        self.push(mat(rows.len(), m, data), Op::SelectRows(a, rows.to_vec()))
    }

    pub fn repeat_row(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, m) = self.dims(a);
        if r != 1 || n == 0 {
            return Err(Error::Shape("repeat_row needs a single row and n >= 1".into()));
        }
        let row = self.value(a).data().to_vec();
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        self.push(mat(n, m, data), Op::RepeatRow(a))
    }

    /// `out[r, :] = x[r, :] * g[r, col]`
    pub fn mul_col(&mut self, x: Var, g: Var, col: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        let (gn, gm) = self.dims(g);
        if gn != n || col >= gm {
            return Err(Error::Shape("mul_col shape mismatch".into()));
        }
        let gv = self.value(g);
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_mut(m).enumerate() {
            let s = gv.data()[i * gm + col];
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(mat(n, m, data), Op::MulCol(x, g, col))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `Σ_rows weight · −log( e^{x[pos]} / (e^{x[pos]} + Σ_neg e^{x[neg]}) )`
    /// with max-subtraction.
    pub fn softmax_xent(&mut self, logits: Var, rows: Vec<XentRow>) -> Result<Var> {
        let (n, m) = self.dims(logits);
        let x = self.value(logits);
        let mut total = 0.0;
        for r in &rows {
            if r.row >= n || r.pos_col >= m || r.neg_cols.iter().any(|&c| c >= m) {
                return Err(Error::Shape("softmax_xent index out of range".into()));
            }
            let row = x.row(r.row);
            let max = r.neg_cols.iter().map(|&c| row[c]).fold(row[r.pos_col], f64::max);
            let denom: f64 = (row[r.pos_col] - max).exp() + r.neg_cols.iter().map(|&c| (row[c] - max).exp()).sum::<f64>();
            total += r.weight * (denom.ln() - (row[r.pos_col] - max));
        }
        self.push(Tensor::scalar(total), Op::SoftmaxXent(logits, rows))
    }

    /// `Σ w · BCE(clamp(p), y)` over all entries of `p`.
    pub fn bce(&mut self, p: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let pv = self.value(p);
        if targets.len() != pv.len() || weights.len() != pv.len() {
            return Err(Error::Shape("bce target/weight length".into()));
        }
        let mut total = 0.0;
        for ((&pi, &y), &w) in pv.data().iter().zip(&targets).zip(&weights) {
            if w != 0.0 {
                let (q, _) = clamp_prob(pi);
                total -= w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
            }
        }
        self.push(Tensor::scalar(total), Op::Bce(p, targets, weights))
    }

    /// `Σ_lists w · [ −Σ_i (y_i/Σy) log(p_i/Σp) ]` over column `col` of `p`.
    /// Lists without a positive label are skipped.
    pub fn list_ce(&mut self, p: Var, col: usize, lists: Vec<ListSpec>) -> Result<Var> {
        let (n, m) = self.dims(p);
        if col >= m {
            return Err(Error::Shape("list_ce column out of range".into()));
        }
        let pv = self.value(p);
        let mut total = 0.0;
        for l in &lists {
            if l.items.len() != l.labels.len() || l.items.iter().any(|&i| i >= n) {
                return Err(Error::Shape("list_ce list malformed".into()));
            }
            let ysum: f64 = l.labels.iter().sum();
            if ysum <= 0.0 {
                continue;
            }
            let psum: f64 = l.items.iter().map(|&i| clamp_prob(pv.data()[i * m + col]).0).sum();
            let mut loss = 0.0;
            for (&i, &y) in l.items.iter().zip(&l.labels) {
                if y > 0.0 {
                    let q = clamp_prob(pv.data()[i * m + col]).0;
                    loss -= (y / ysum) * (q / psum).ln();
                }
            }
            total += l.weight * loss;
        }
        self.push(Tensor::scalar(total), Op::ListCe(p, col, lists))
    }

    /// Gradients of the scalar `root` with respect to every parameter used.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            per_param: vec![None; self.store.len()],
        };
        grads[root.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        fn param_acc<'g>(out: &'g mut Gradients, store: &ParameterStore, id: ParamId) -> &'g mut [f64] {
            out.per_param[id.0]
                .get_or_insert_with(|| Tensor::zeros(store.value(id).shape()))
                .data_mut()
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            let (n, m) = dims(y);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    param_acc(&mut out, self.store, *id).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Gather(id, rows) => {
                    let dst = param_acc(&mut out, self.store, *id);
                    for (i, &r) in rows.iter().enumerate() {
                        let d = &mut dst[r * m..(r + 1) * m];
                        d.iter_mut().zip(&g[i * m..(i + 1) * m]).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SparseLinear(id, input) => {
                    let dst = param_acc(&mut out, self.store, *id);
                    for (r, row) in input.rows.iter().enumerate() {
                        let gr = &g[r * m..(r + 1) * m];
                        for &(col, val) in row {
                            let d = &mut dst[col * m..(col + 1) * m];
                            d.iter_mut().zip(gr).for_each(|(a, b)| *a += val * b);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.dims(*a);
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    // ga += g · bᵀ  (g: n×m, b: k×m)
                    matmul_bt_acc(acc(&mut grads, &self.nodes, *a), &g, bv, n, m, k);
                    // gb += aᵀ · g
                    matmul_at_acc(acc(&mut grads, &self.nodes, *b), av, &g, n, k, m);
                }
                Op::MatMulBt(a, b) => {
                    let (_, k) = self.dims(*a);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // ga += g · b  (g: n×m, b: m×k)
                    matmul_acc(acc(&mut grads, &self.nodes, *a), &g, bv, n, m, k);
                    // gb += gᵀ · a
                    matmul_at_acc(acc(&mut grads, &self.nodes, *b), &g, av, n, m, k);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &self.nodes, *a).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    acc(&mut grads, &self.nodes, *b).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, &self.nodes, *a).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if a == b {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        for i in 0..g.len() {
                            ga[i] += 2.0 * g[i] * av[i];
                        }
                    } else {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                        let gb = acc(&mut grads, &self.nodes, *b);
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, &self.nodes, *a).iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
                Op::Relu(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        if y.data()[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        let s = y.data()[i];
                        ga[i] += g[i] * s * (1.0 - s);
                    }
                }
                Op::Softmax(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..n {
                        let yr = &y.data()[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..m {
                            ga[i * m + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
                Op::L2Norm(a) => {
                    let x = self.value(*a).data();
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..n {
                        let xr = &x[i * m..(i + 1) * m];
                        let yr = &y.data()[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let norm = crate::math::norm(xr).max(1e-12);
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..m {
                            ga[i * m + j] += (gr[j] - yr[j] * inner) / norm;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pm = self.dims(p).1;
                        let gp = acc(&mut grads, &self.nodes, p);
                        for i in 0..n {
                            let src = &g[i * m + offset..i * m + offset + pm];
                            gp[i * pm..(i + 1) * pm].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                        offset += pm;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = acc(&mut grads, &self.nodes, p);
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let am = self.dims(*a).1;
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..n {
                        let d = &mut ga[i * am + start..i * am + start + m];
                        d.iter_mut().zip(&g[i * m..(i + 1) * m]).for_each(|(x, y)| *x += y);
                    }
                }
                Op::SelectRows(a, rows) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for (i, &r) in rows.iter().enumerate() {
                        let d = &mut ga[r * m..(r + 1) * m];
                        d.iter_mut().zip(&g[i * m..(i + 1) * m]).for_each(|(x, y)| *x += y);
                    }
                }
                Op::SegmentAttention { q, k, v, keys, scale, weights } => {
                    let d = self.dims(*q).1;
                    let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut gq = vec![0.0; qv.len()];
                    let mut gk = vec![0.0; kv.len()];
                    let mut gv = vec![0.0; vv.len()];
                    let mut base = 0;
                    let mut ds = Vec::new();
                    for (i, list) in keys.iter().enumerate() {
                        let gi = &g[i * m..(i + 1) * m];
                        let w = &weights[base..base + list.len()];
                        base += list.len();
                        // dL/dw_j = g_i · v_j, then the softmax Jacobian
                        ds.clear();
                        ds.extend(list.iter().map(|&j| gi.iter().zip(&vv[j * m..(j + 1) * m]).map(|(a, b)| a * b).sum::<f64>()));
                        let dot: f64 = w.iter().zip(&ds).map(|(a, b)| a * b).sum();
                        let qi = &qv[i * d..(i + 1) * d];
                        for (t, &j) in list.iter().enumerate() {
                            gv[j * m..(j + 1) * m].iter_mut().zip(gi).for_each(|(a, b)| *a += w[t] * b);
                            let s = scale * w[t] * (ds[t] - dot);
                            gq[i * d..(i + 1) * d].iter_mut().zip(&kv[j * d..(j + 1) * d]).for_each(|(a, b)| *a += s * b);
                            gk[j * d..(j + 1) * d].iter_mut().zip(qi).for_each(|(a, b)| *a += s * b);
                        }
                    }
                    for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                        acc(&mut grads, &self.nodes, var).iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
                    }
                }
                Op::RepeatRow(a) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for row in g.chunks(m) {
                        ga.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                Op::MulCol(x, gate, col) => {
                    let xv = self.value(*x).data().to_vec();
                    let gm = self.dims(*gate).1;
                    let gatev = self.value(*gate).data().to_vec();
                    {
                        let gx = acc(&mut grads, &self.nodes, *x);
                        for i in 0..n {
                            let s = gatev[i * gm + col];
                            for j in 0..m {
                                gx[i * m + j] += g[i * m + j] * s;
                            }
                        }
                    }
                    let gg = acc(&mut grads, &self.nodes, *gate);
                    for i in 0..n {
                        let d: f64 = (0..m).map(|j| g[i * m + j] * xv[i * m + j]).sum();
                        gg[i * gm + col] += d;
                    }
                }
                Op::Sum(a) => {
                    let s = g[0];
                    acc(&mut grads, &self.nodes, *a).iter_mut().for_each(|x| *x += s);
                }
                Op::SoftmaxXent(logits, rows) => {
                    let lm = self.dims(*logits).1;
                    let x = self.value(*logits).data();
                    let scale = g[0];
                    let gl = acc(&mut grads, &self.nodes, *logits);
                    for r in rows {
                        let row = &x[r.row * lm..(r.row + 1) * lm];
                        let max = r.neg_cols.iter().map(|&c| row[c]).fold(row[r.pos_col], f64::max);
                        let ep = (row[r.pos_col] - max).exp();
                        let denom: f64 = ep + r.neg_cols.iter().map(|&c| (row[c] - max).exp()).sum::<f64>();
                        let w = scale * r.weight;
                        gl[r.row * lm + r.pos_col] += w * (ep / denom - 1.0);
                        for &c in &r.neg_cols {
                            gl[r.row * lm + c] += w * (row[c] - max).exp() / denom;
                        }
                    }
                }
                Op::Bce(p, targets, weights) => {
                    let pv = self.value(*p).data();
                    let scale = g[0];
                    let gp = acc(&mut grads, &self.nodes, *p);
                    for i in 0..pv.len() {
                        let (q, inside) = clamp_prob(pv[i]);
                        if inside && weights[i] != 0.0 {
                            let yv = targets[i];
                            gp[i] += scale * weights[i] * (-yv / q + (1.0 - yv) / (1.0 - q));
                        }
                    }
                }
                Op::ListCe(p, col, lists) => {
                    let pm = self.dims(*p).1;
                    let pv = self.value(*p).data();
                    let scale = g[0];
                    let gp = acc(&mut grads, &self.nodes, *p);
                    for l in lists {
                        let ysum: f64 = l.labels.iter().sum();
                        if ysum <= 0.0 {
                            continue;
                        }
                        let psum: f64 = l.items.iter().map(|&i| clamp_prob(pv[i * pm + col]).0).sum();
                        for (&i, &yv) in l.items.iter().zip(&l.labels) {
                            let (q, inside) = clamp_prob(pv[i * pm + col]);
                            if inside {
                                gp[i * pm + col] += scale * l.weight * (1.0 / psum - (yv / ysum) / q);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
