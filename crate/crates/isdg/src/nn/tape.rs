//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Values are computed eagerly as operations are pushed; `backward` walks
//! the tape in reverse accumulating gradients. Each forward pass owns its
//! tape exclusively. Besides dense linear algebra the tape provides the
//! index-driven gather/aggregate operations the relation attention needs,
//! so score matrices cost O(n²) gathers instead of O(n²·d) products.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Row-major matrix of one-byte indices (relation ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl IdxMat {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), rows * cols);
        IdxMat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.cols + j]
    }
}

/// Masking semantics for relation attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Masked logits are multiplied by zero before scaling, so they stay in
    /// the softmax with weight `exp(0)`.
    Literal,
    /// Masked entries are excluded: their attention weight is exactly zero.
    Hard,
}

/// Source of one row in a gathered step-input matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSrc {
    /// Row of the first source tensor.
    A(usize),
    /// Row of the second source tensor.
    B(usize),
    /// All-zero row (padding for finished paths).
    Zero,
}

/// LSTM cell parameters: one fused weight matrix `[d_in + d_h, 4·d_h]` with
/// gate order (input, forget, candidate, output), and a `1×4·d_h` bias.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w: Value,
    pub b: Value,
}

enum Op<R> {
    Leaf,
    Add(Value, Value),
    AddBias(Value, Value),
    Mul(Value, Value),
    Scale(Value, R),
    Matmul(Value, Value),
    MatmulNT(Value, Value),
    ConcatCols(Value, Value),
    SliceCols(Value, usize, usize),
    Sigmoid(Value),
    Tanh(Value),
    GatherRows(Value, Rc<Vec<usize>>),
    GatherRows2(Value, Value, Rc<Vec<StepSrc>>),
    LerpRows(Value, Value, Rc<Vec<bool>>),
    Softmax {
        logits: Value,
        mask: Option<(Rc<Vec<bool>>, MaskMode)>,
        scale: R,
    },
    AggregateByIndex(Value, Rc<IdxMat>, usize),
    GatherPairRow(Value, Rc<IdxMat>),
    GatherPairCol(Value, Rc<IdxMat>),
    GatherPairMat(Value, Rc<IdxMat>, Rc<IdxMat>),
    LayerNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        eps: R,
    },
    LogPick(Value, usize, usize),
    SumAll(Value),
    Transpose(Value),
    MulRowScale(Value, Value),
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Recorded forward pass.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    param_cache: HashMap<usize, Value>,
    param_nodes: Vec<(Value, usize)>,
}

/// Per-value gradients produced by `backward`. Gradients of interior
/// operation results are consumed during the reverse sweep; leaf gradients
/// (parameters and `var` inputs) are retained.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn wrt(&self, v: Value) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn ng(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Grad-less input.
    pub fn constant(&mut self, t: Tensor<R>) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Grad-requiring input that is not a model parameter.
    pub fn var(&mut self, t: Tensor<R>) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// Enters a model parameter; repeated calls with the same id return the
    /// same leaf so gradients from all uses accumulate naturally.
    pub fn param(&mut self, id: usize, t: &Tensor<R>) -> Value {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.param_cache.insert(id, v);
        self.param_nodes.push((v, id));
        v
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `[n,d] + [1,d]` broadcast over rows.
    pub fn add_bias(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows(), 1, "bias must be a row vector");
        assert_eq!(ta.cols(), tb.cols(), "add_bias shape mismatch");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(tb.row(0)) {
                *o += *bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddBias(a, b), ng)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Value, c: R) -> Value {
        let mut out = self.value(a).clone();
        out.scale_assign(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul inner dimension mismatch");
        let out = mm(ta, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Matmul(a, b), ng)
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_nt inner dimension mismatch");
        let out = mm_nt(ta, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatmulNT(a, b), ng)
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols row mismatch");
        let mut out = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for i in 0..ta.rows() {
            let row = out.row_mut(i);
            row[..ta.cols()].copy_from_slice(ta.row(i));
            row[ta.cols()..].copy_from_slice(tb.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, a: Value, from: usize, to: usize) -> Value {
        let ta = self.value(a);
        assert!(from < to && to <= ta.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(ta.rows(), to - from);
        for i in 0..ta.rows() {
            out.row_mut(i).copy_from_slice(&ta.row(i)[from..to]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, from, to), ng)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| R::one() / (R::one() + (-x).exp()))
            .collect();
        let (r, c) = self.value(a).shape();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(r, c, data), Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let data = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let (r, c) = self.value(a).shape();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(r, c, data), Op::Tanh(a), ng)
    }

    /// `out[k,:] = table[idx[k],:]`.
    pub fn gather_rows(&mut self, table: Value, idx: Rc<Vec<usize>>) -> Value {
        let tt = self.value(table);
        let mut out = Tensor::zeros(idx.len(), tt.cols());
        for (k, &r) in idx.iter().enumerate() {
            assert!(r < tt.rows(), "gather_rows index {r} out of range");
            out.row_mut(k).copy_from_slice(tt.row(r));
        }
        let ng = self.ng(table);
        self.push(out, Op::GatherRows(table, idx), ng)
    }

    /// Mixed-source row gather used for path step inputs. Both sources must
    /// share the column width.
    pub fn gather_rows2(&mut self, a: Value, b: Value, srcs: Rc<Vec<StepSrc>>) -> Value {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "gather_rows2 width mismatch");
        let mut out = Tensor::zeros(srcs.len(), ta.cols());
        for (k, src) in srcs.iter().enumerate() {
            match *src {
                StepSrc::A(r) => out.row_mut(k).copy_from_slice(ta.row(r)),
                StepSrc::B(r) => out.row_mut(k).copy_from_slice(tb.row(r)),
                StepSrc::Zero => {}
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::GatherRows2(a, b, srcs), ng)
    }

    /// Row-wise select: rows with `keep[i]` come from `new`, others from
    /// `old`. Used to freeze finished paths during stepped recurrence.
    pub fn lerp_rows(&mut self, new: Value, old: Value, keep: Rc<Vec<bool>>) -> Value {
        let (tn, to) = (self.value(new), self.value(old));
        assert_eq!(tn.shape(), to.shape(), "lerp_rows shape mismatch");
        assert_eq!(tn.rows(), keep.len());
        let mut out = to.clone();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.row_mut(i).copy_from_slice(tn.row(i));
            }
        }
        let ng = self.ng(new) || self.ng(old);
        self.push(out, Op::LerpRows(new, old, keep), ng)
    }

    /// Row softmax of `logits · scale`, numerically stabilized by row-max
    /// subtraction. With a mask, `Literal` zeroes masked logits before
    /// scaling (they stay in the normalization with weight `exp(0)`), while
    /// `Hard` removes masked entries entirely so their weight is exactly 0.
    pub fn softmax_rows(
        &mut self,
        logits: Value,
        mask: Option<(Rc<Vec<bool>>, MaskMode)>,
        scale: R,
    ) -> Value {
        let tl = self.value(logits);
        let (n, m) = tl.shape();
        if let Some((mask_bits, _)) = &mask {
            assert_eq!(mask_bits.len(), n * m, "softmax mask size mismatch");
        }
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = tl.row(i);
            let scaled: Vec<R> = match &mask {
                None => row.iter().map(|&e| e * scale).collect(),
                Some((bits, MaskMode::Literal)) => row
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| if bits[i * m + j] { e * scale } else { R::zero() })
                    .collect(),
                Some((bits, MaskMode::Hard)) => row
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| {
                        if bits[i * m + j] {
                            e * scale
                        } else {
                            R::nan() // excluded below
                        }
                    })
                    .collect(),
            };
            let hard = matches!(&mask, Some((_, MaskMode::Hard)));
            let allowed = |j: usize| !hard || !scaled[j].is_nan();
            let mut max = R::neg_infinity();
            for j in 0..m {
                if allowed(j) && scaled[j] > max {
                    max = scaled[j];
                }
            }
            assert!(
                max.is_finite(),
                "softmax row {i} has no unmasked entries"
            );
            let mut denom = R::zero();
            let orow = out.row_mut(i);
            for j in 0..m {
                if allowed(j) {
                    let e = (scaled[j] - max).exp();
                    orow[j] = e;
                    denom += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= denom;
            }
        }
        let ng = self.ng(logits);
        self.push(out, Op::Softmax { logits, mask, scale }, ng)
    }

    /// `out[i,v] = Σ_j alpha[i,j] · [idx[i,j] = v]`, for combining attention
    /// weights with per-relation value rows.
    pub fn aggregate_by_index(&mut self, alpha: Value, idx: Rc<IdxMat>, vocab: usize) -> Value {
        let ta = self.value(alpha);
        assert_eq!(ta.shape(), (idx.rows, idx.cols));
        let mut out = Tensor::zeros(ta.rows(), vocab);
        for i in 0..ta.rows() {
            let arow = ta.row(i);
            let orow = out.row_mut(i);
            for (j, &a) in arow.iter().enumerate() {
                orow[idx.get(i, j) as usize] += a;
            }
        }
        let ng = self.ng(alpha);
        self.push(out, Op::AggregateByIndex(alpha, idx, vocab), ng)
    }

    /// `out[i,j] = p[i, idx[i,j]]` — per-row lookup of precomputed
    /// query-times-relation scores.
    pub fn gather_pair_row(&mut self, p: Value, idx: Rc<IdxMat>) -> Value {
        let tp = self.value(p);
        assert_eq!(tp.rows(), idx.rows);
        let mut out = Tensor::zeros(idx.rows, idx.cols);
        for i in 0..idx.rows {
            let prow = tp.row(i);
            let orow = out.row_mut(i);
            for j in 0..idx.cols {
                orow[j] = prow[idx.get(i, j) as usize];
            }
        }
        let ng = self.ng(p);
        self.push(out, Op::GatherPairRow(p, idx), ng)
    }

    /// `out[i,j] = p[j, idx[i,j]]` — column-indexed variant.
    pub fn gather_pair_col(&mut self, p: Value, idx: Rc<IdxMat>) -> Value {
        let tp = self.value(p);
        assert_eq!(tp.rows(), idx.cols);
        let mut out = Tensor::zeros(idx.rows, idx.cols);
        for i in 0..idx.rows {
            let orow = out.row_mut(i);
            for j in 0..idx.cols {
                orow[j] = tp.get(j, idx.get(i, j) as usize);
            }
        }
        let ng = self.ng(p);
        self.push(out, Op::GatherPairCol(p, idx), ng)
    }

    /// `out[i,j] = t[a[i,j], b[i,j]]` — relation-pair prior lookup.
    pub fn gather_pair_mat(&mut self, t: Value, a: Rc<IdxMat>, b: Rc<IdxMat>) -> Value {
        let tt = self.value(t);
        assert_eq!((a.rows, a.cols), (b.rows, b.cols));
        let mut out = Tensor::zeros(a.rows, a.cols);
        for i in 0..a.rows {
            let orow = out.row_mut(i);
            for j in 0..a.cols {
                orow[j] = tt.get(a.get(i, j) as usize, b.get(i, j) as usize);
            }
        }
        let ng = self.ng(t);
        self.push(out, Op::GatherPairMat(t, a, b), ng)
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: R) -> Value {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        assert_eq!(tg.shape(), (1, d), "layer_norm gamma shape");
        assert_eq!(tb.shape(), (1, d), "layer_norm beta shape");
        let mut out = Tensor::zeros(tx.rows(), d);
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let (mean, rstd) = row_moments(row, eps);
            let orow = out.row_mut(i);
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * tg.get(0, j) + tb.get(0, j);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    /// Natural log of a single matrix entry, as a 1×1 tensor.
    pub fn log_pick(&mut self, p: Value, row: usize, col: usize) -> Value {
        let v = self.value(p).get(row, col);
        assert!(v > R::zero(), "log_pick of a non-positive entry");
        let out = Tensor::from_vec(1, 1, vec![v.ln()]);
        let ng = self.ng(p);
        self.push(out, Op::LogPick(p, row, col), ng)
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let s = self.value(a).iter_sum();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let ta = self.value(a);
        let (r, c) = ta.shape();
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, ta.get(i, j));
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// `out[i,j] = a[i,j] · s[i,0]` — scales each row by a column vector.
    pub fn mul_row_scale(&mut self, a: Value, s: Value) -> Value {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.shape(), (ta.rows(), 1), "mul_row_scale shape mismatch");
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let sv = ts.get(i, 0);
            for v in out.row_mut(i) {
                *v *= sv;
            }
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulRowScale(a, s), ng)
    }

    /// Affine map `x·W + b` with shape validation.
    pub fn affine(&mut self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.cols() != tw.rows() {
            return Err(Error::Shape(format!(
                "affine: x has {} columns but W has {} rows",
                tx.cols(),
                tw.rows()
            )));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != (1, tw.cols()) {
                return Err(Error::Shape(format!(
                    "affine: bias shape {:?} does not match output width {}",
                    tb.shape(),
                    tw.cols()
                )));
            }
        }
        let y = self.matmul(x, w);
        Ok(match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        })
    }

    /// One gated recurrent update over `n` lanes. Gate order in the fused
    /// weight is (input, forget, candidate, output).
    pub fn lstm_step(
        &mut self,
        x: Value,
        h_prev: Value,
        c_prev: Value,
        params: LstmParams,
    ) -> Result<(Value, Value)> {
        let (tx, th, tc) = (self.value(x), self.value(h_prev), self.value(c_prev));
        let d_h = th.cols();
        if tc.shape() != th.shape() || tx.rows() != th.rows() {
            return Err(Error::Shape(format!(
                "lstm_step: x {:?}, h {:?}, c {:?} disagree",
                tx.shape(),
                th.shape(),
                tc.shape()
            )));
        }
        let tw = self.value(params.w);
        if tw.shape() != (tx.cols() + d_h, 4 * d_h) {
            return Err(Error::Shape(format!(
                "lstm_step: weight shape {:?}, expected ({}, {})",
                tw.shape(),
                tx.cols() + d_h,
                4 * d_h
            )));
        }
        if self.value(params.b).shape() != (1, 4 * d_h) {
            return Err(Error::Shape("lstm_step: bias shape mismatch".into()));
        }
        let cat = self.concat_cols(x, h_prev);
        let z = self.matmul(cat, params.w);
        let z = self.add_bias(z, params.b);
        let i_gate = self.slice_cols(z, 0, d_h);
        let i_gate = self.sigmoid(i_gate);
        let f_gate = self.slice_cols(z, d_h, 2 * d_h);
        let f_gate = self.sigmoid(f_gate);
        let g_cand = self.slice_cols(z, 2 * d_h, 3 * d_h);
        let g_cand = self.tanh(g_cand);
        let o_gate = self.slice_cols(z, 3 * d_h, 4 * d_h);
        let o_gate = self.sigmoid(o_gate);
        let fc = self.mul(f_gate, c_prev);
        let ig = self.mul(i_gate, g_cand);
        let c_new = self.add(fc, ig);
        let c_tanh = self.tanh(c_new);
        let h_new = self.mul(o_gate, c_tanh);
        Ok((h_new, c_new))
    }

    /// Runs the reverse sweep from a scalar loss. Leaf gradients (parameters
    /// and `var` inputs) are retained in the result; interior gradients are
    /// consumed as the sweep passes them.
    pub fn backward(&self, loss: Value) -> Result<Gradients<R>> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward target must be 1x1, got {:?}",
                lt.shape()
            )));
        }
        if !lt.scalar().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.scalar())));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![R::one()]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let g = match node.op {
                Op::Leaf => continue, // keep leaf gradients
                _ => grads[i].take().expect("checked above"),
            };
            self.backprop_one(i, &node.op, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(
        &self,
        grads: &'g mut Vec<Option<Tensor<R>>>,
        v: Value,
    ) -> Option<&'g mut Tensor<R>> {
        if !self.ng(v) {
            return None;
        }
        let (r, c) = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backprop_one(
        &self,
        _idx: usize,
        op: &Op<R>,
        g: &Tensor<R>,
        grads: &mut Vec<Option<Tensor<R>>>,
    ) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::AddBias(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.rows() {
                        for (s, &gv) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *s += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((s, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *s += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (s, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *s += gv * *c;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(ga) = self.slot(grads, *a) {
                    mm_nt_into(g, &tb, ga); // gA += g · Bᵀ
                }
                if let Some(gb) = self.slot(grads, *b) {
                    mm_tn_into(&ta, g, gb); // gB += Aᵀ · g
                }
            }
            Op::MatmulNT(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(ga) = self.slot(grads, *a) {
                    mm_into(g, &tb, ga); // gA += g · B
                }
                if let Some(gb) = self.slot(grads, *b) {
                    mm_tn_into(g, &ta, gb); // gB += gᵀ · A
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.rows() {
                        for (s, &gv) in ga.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                            *s += gv;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.rows() {
                        for (s, &gv) in gb.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::SliceCols(a, from, _to) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.rows() {
                        for (j, &gv) in g.row(i).iter().enumerate() {
                            let s = &mut ga.row_mut(i)[from + j];
                            *s += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[_idx].value.clone();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *s += gv * yv * (R::one() - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.nodes[_idx].value.clone();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *s += gv * (R::one() - yv * yv);
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                if let Some(gt) = self.slot(grads, *table) {
                    for (k, &r) in idx.iter().enumerate() {
                        for (s, &gv) in gt.row_mut(r).iter_mut().zip(g.row(k)) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::GatherRows2(a, b, srcs) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, src) in srcs.iter().enumerate() {
                        if let StepSrc::A(r) = *src {
                            for (s, &gv) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                                *s += gv;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, src) in srcs.iter().enumerate() {
                        if let StepSrc::B(r) = *src {
                            for (s, &gv) in gb.row_mut(r).iter_mut().zip(g.row(k)) {
                                *s += gv;
                            }
                        }
                    }
                }
            }
            Op::LerpRows(new, old, keep) => {
                if let Some(gn) = self.slot(grads, *new) {
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            for (s, &gv) in gn.row_mut(i).iter_mut().zip(g.row(i)) {
                                *s += gv;
                            }
                        }
                    }
                }
                if let Some(go) = self.slot(grads, *old) {
                    for (i, &k) in keep.iter().enumerate() {
                        if !k {
                            for (s, &gv) in go.row_mut(i).iter_mut().zip(g.row(i)) {
                                *s += gv;
                            }
                        }
                    }
                }
            }
            Op::Softmax { logits, mask, scale } => {
                let y = self.nodes[_idx].value.clone();
                if let Some(gl) = self.slot(grads, *logits) {
                    let (n, m) = y.shape();
                    for i in 0..n {
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let mut dot = R::zero();
                        for j in 0..m {
                            dot += yrow[j] * grow[j];
                        }
                        for j in 0..m {
                            let open = match mask {
                                None => true,
                                Some((bits, _)) => bits[i * m + j],
                            };
                            if open {
                                let d = yrow[j] * (grow[j] - dot) * *scale;
                                let s = &mut gl.row_mut(i)[j];
                                *s += d;
                            }
                        }
                    }
                }
            }
            Op::AggregateByIndex(alpha, idx, _vocab) => {
                if let Some(ga) = self.slot(grads, *alpha) {
                    for i in 0..idx.rows {
                        let grow = g.row(i);
                        for j in 0..idx.cols {
                            let s = &mut ga.row_mut(i)[j];
                            *s += grow[idx.get(i, j) as usize];
                        }
                    }
                }
            }
            Op::GatherPairRow(p, idx) => {
                if let Some(gp) = self.slot(grads, *p) {
                    for i in 0..idx.rows {
                        for j in 0..idx.cols {
                            let s = &mut gp.row_mut(i)[idx.get(i, j) as usize];
                            *s += g.get(i, j);
                        }
                    }
                }
            }
            Op::GatherPairCol(p, idx) => {
                if let Some(gp) = self.slot(grads, *p) {
                    for i in 0..idx.rows {
                        for j in 0..idx.cols {
                            let s = &mut gp.row_mut(j)[idx.get(i, j) as usize];
                            *s += g.get(i, j);
                        }
                    }
                }
            }
            Op::GatherPairMat(t, a, b) => {
                if let Some(gt) = self.slot(grads, *t) {
                    for i in 0..a.rows {
                        for j in 0..a.cols {
                            let s = &mut gt.row_mut(a.get(i, j) as usize)[b.get(i, j) as usize];
                            *s += g.get(i, j);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x).clone();
                let tg = self.value(*gamma).clone();
                let d = tx.cols();
                let dr = R::from_f64(d as f64);
                if let Some(gb) = self.slot(grads, *beta) {
                    for i in 0..g.rows() {
                        for (s, &gv) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += gv;
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for i in 0..tx.rows() {
                        let row = tx.row(i);
                        let (mean, rstd) = row_moments(row, *eps);
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let s = &mut gg.row_mut(0)[j];
                            *s += g.get(i, j) * xhat;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..tx.rows() {
                        let row = tx.row(i);
                        let (mean, rstd) = row_moments(row, *eps);
                        let mut sum_gy = R::zero();
                        let mut sum_gyx = R::zero();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let gy = g.get(i, j) * tg.get(0, j);
                            sum_gy += gy;
                            sum_gyx += gy * xhat;
                        }
                        let mean_gy = sum_gy / dr;
                        let mean_gyx = sum_gyx / dr;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let gy = g.get(i, j) * tg.get(0, j);
                            let s = &mut gx.row_mut(i)[j];
                            *s += (gy - mean_gy - xhat * mean_gyx) * rstd;
                        }
                    }
                }
            }
            Op::LogPick(p, row, col) => {
                let pv = self.value(*p).get(*row, *col);
                if let Some(gp) = self.slot(grads, *p) {
                    let s = &mut gp.row_mut(*row)[*col];
                    *s += g.scalar() / pv;
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let gv = g.scalar();
                    for s in ga.data_mut() {
                        *s += gv;
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let s = &mut ga.row_mut(j)[i];
                            *s += g.get(i, j);
                        }
                    }
                }
            }
            Op::MulRowScale(a, sv) => {
                let (ta, ts) = (self.value(*a).clone(), self.value(*sv).clone());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.rows() {
                        let scale = ts.get(i, 0);
                        for (s, &gv) in ga.row_mut(i).iter_mut().zip(g.row(i)) {
                            *s += gv * scale;
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *sv) {
                    for i in 0..g.rows() {
                        let mut acc = R::zero();
                        for (j, &gv) in g.row(i).iter().enumerate() {
                            acc += gv * ta.get(i, j);
                        }
                        let s = &mut gs.row_mut(i)[0];
                        *s += acc;
                    }
                }
            }
        }
    }

    /// Adds leaf gradients of registered parameters into the state's
    /// accumulators.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<R>,
        state: &mut crate::nn::state::ModelState<R>,
    ) {
        for &(v, pid) in &self.param_nodes {
            if let Some(g) = grads.wrt(v) {
                state.grad_mut(pid).add_assign(g);
            }
        }
    }
}

fn row_moments<R: Real>(row: &[R], eps: R) -> (R, R) {
    let dr = R::from_f64(row.len() as f64);
    let mut mean = R::zero();
    for &v in row {
        mean += v;
    }
    mean /= dr;
    let mut var = R::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var /= dr;
    (mean, R::one() / (var + eps).sqrt())
}

fn mm<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    mm_into(a, b, &mut out);
    out
}

/// `into += a · b`.
fn mm_into<R: Real>(a: &Tensor<R>, b: &Tensor<R>, into: &mut Tensor<R>) {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    debug_assert_eq!(into.shape(), (m, n));
    for i in 0..m {
        let arow = a.row(i);
        let orow = into.row_mut(i);
        for (t, &av) in arow.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let brow = b.row(t);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn mm_nt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let mut out = Tensor::zeros(a.rows(), b.rows());
    mm_nt_into(a, b, &mut out);
    out
}

/// `into += a · bᵀ`.
fn mm_nt_into<R: Real>(a: &Tensor<R>, b: &Tensor<R>, into: &mut Tensor<R>) {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    debug_assert_eq!(into.shape(), (m, n));
    for i in 0..m {
        let arow = a.row(i);
        let orow = into.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = R::zero();
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            orow[j] += acc;
        }
    }
}

/// `into += aᵀ · b` for `a: [k,m]`, `b: [k,n]`.
fn mm_tn_into<R: Real>(a: &Tensor<R>, b: &Tensor<R>, into: &mut Tensor<R>) {
    let (k, m) = a.shape();
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    debug_assert_eq!(into.shape(), (m, n));
    for t in 0..k {
        let arow = a.row(t);
        let brow = b.row(t);
        for (i, &av) in arow.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let orow = into.row_mut(i);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Worst relative error between analytic and central-difference
    /// gradients of a scalar-valued builder, with respect to one leaf.
    fn fd_wrt_leaf(
        build: impl Fn(&mut Tape<f64>, Value) -> Value,
        init: &Tensor<f64>,
    ) -> f64 {
        let mut tape = Tape::new();
        let x = tape.var(init.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();

        let eps = 1e-6;
        let mut worst = 0.0f64;
        for idx in 0..init.len() {
            let run = |delta: f64| {
                let mut t2 = init.clone();
                t2.data_mut()[idx] += delta;
                let mut tape = Tape::new();
                let x = tape.var(t2);
                let loss = build(&mut tape, x);
                tape.value(loss).scalar()
            };
            let fd = (run(eps) - run(-eps)) / (2.0 * eps);
            let a = analytic.data()[idx];
            if a.abs() < 1e-9 && fd.abs() < 1e-9 {
                continue;
            }
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-9);
            worst = worst.max(err);
        }
        worst
    }

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn affine_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 2, &[3.0, -1.0]));
        let w = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(1, 2, &[0.0, 0.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &t(1, 2, &[3.0, -1.0]));

        // 1x1: x=2, W=3, b=1 -> 7
        let x = tape.constant(t(1, 1, &[2.0]));
        let w = tape.constant(t(1, 1, &[3.0]));
        let b = tape.constant(t(1, 1, &[1.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).scalar(), 7.0);
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 3, &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert!(tape.affine(x, w, None).is_err());
    }

    #[test]
    fn affine_weight_gradient_is_input_accumulation() {
        // d/dW of sum(x·W) accumulates x over rows: dW[t,j] = Σ_i x[i,t]
        let xv = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let w = tape.var(t(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let y = tape.affine(x, w, None).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.wrt(w).unwrap();
        for trow in 0..3 {
            let want: f64 = xv.get(0, trow) + xv.get(1, trow);
            for j in 0..2 {
                assert!((gw.get(trow, j) - want).abs() < 1e-12);
            }
        }

        // and it matches central finite differences
        let worst = fd_wrt_leaf(
            |tape, w| {
                let x = tape.constant(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
                let y = tape.affine(x, w, None).unwrap();
                tape.sum_all(y)
            },
            &t(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]),
        );
        assert!(worst < 1e-6, "affine fd error {worst}");
    }

    #[test]
    fn softmax_uniform_and_analytic_rows() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(1, 4, &[0.0; 4]));
        let y = tape.softmax_rows(z, None, 1.0);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let z = tape.constant(t(1, 2, &[1.0f64.ln(), 3.0f64.ln()]));
        let y = tape.softmax_rows(z, None, 1.0);
        let out = tape.value(y);
        assert!((out.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((out.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        let scores = [0.3, -1.2, 2.4, 0.0, 1.1, -0.7, 3.3, 0.05];
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(1, 8, &scores));
        let y = tape.softmax_rows(z, None, 0.5);
        let denom: f64 = scores.iter().map(|s| (s * 0.5).exp()).sum();
        for (j, &s) in scores.iter().enumerate() {
            let want = (s * 0.5).exp() / denom;
            assert!(
                (tape.value(y).get(0, j) - want).abs() < 1e-12,
                "column {j}"
            );
        }
        // rows sum to one
        assert!((tape.value(y).iter_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_mask_zeroes_excluded_entries_exactly() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(1, 3, &[5.0, 1.0, 2.0]));
        let mask = Rc::new(vec![true, false, true]);
        let y = tape.softmax_rows(z, Some((mask, MaskMode::Hard)), 1.0);
        let out = tape.value(y);
        assert_eq!(out.get(0, 1), 0.0);
        let denom = (5.0f64).exp() + (2.0f64).exp();
        assert!((out.get(0, 0) - (5.0f64).exp() / denom).abs() < 1e-12);
    }

    #[test]
    fn literal_mask_keeps_masked_weight_at_exp_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(1, 3, &[5.0, 1.0, 2.0]));
        let mask = Rc::new(vec![true, false, true]);
        let y = tape.softmax_rows(z, Some((mask, MaskMode::Literal)), 1.0);
        let out = tape.value(y);
        let denom = (5.0f64).exp() + 1.0 + (2.0f64).exp();
        assert!((out.get(0, 1) - 1.0 / denom).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradients_match_fd_in_all_modes() {
        let init = t(2, 3, &[0.4, -0.3, 1.2, 0.0, 2.0, -1.0]);
        let plain = fd_wrt_leaf(
            |tape, z| {
                let y = tape.softmax_rows(z, None, 0.7);
                let sq = tape.mul(y, y);
                tape.sum_all(sq)
            },
            &init,
        );
        assert!(plain < 1e-6, "plain {plain}");

        for mode in [MaskMode::Literal, MaskMode::Hard] {
            let err = fd_wrt_leaf(
                |tape, z| {
                    let mask = Rc::new(vec![true, false, true, true, true, false]);
                    let y = tape.softmax_rows(z, Some((mask, mode)), 0.7);
                    let sq = tape.mul(y, y);
                    tape.sum_all(sq)
                },
                &init,
            );
            assert!(err < 1e-6, "{mode:?} {err}");
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero_hidden_state() {
        let d = 3;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(1, d));
        let h = tape.constant(Tensor::zeros(1, d));
        let c = tape.constant(Tensor::zeros(1, d));
        let w = tape.constant(Tensor::zeros(2 * d, 4 * d));
        let b = tape.constant(Tensor::zeros(1, 4 * d));
        let (h1, _c1) = tape.lstm_step(x, h, c, LstmParams { w, b }).unwrap();
        for &v in tape.value(h1).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn lstm_single_step_matches_scalar_gate_formulas() {
        // d = 1 with hand-set weights: w rows = [x; h], gate order i,f,g,o
        let (wx_i, wx_f, wx_g, wx_o) = (0.5, -0.3, 0.8, 0.2);
        let (wh_i, wh_f, wh_g, wh_o) = (0.1, 0.4, -0.6, 0.7);
        let (b_i, b_f, b_g, b_o) = (0.05, 1.0, -0.1, 0.3);
        let (xv, hv, cv) = (0.9f64, -0.4f64, 0.25f64);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 1, &[xv]));
        let h = tape.constant(t(1, 1, &[hv]));
        let c = tape.constant(t(1, 1, &[cv]));
        let w = tape.constant(t(2, 4, &[wx_i, wx_f, wx_g, wx_o, wh_i, wh_f, wh_g, wh_o]));
        let b = tape.constant(t(1, 4, &[b_i, b_f, b_g, b_o]));
        let (h1, c1) = tape.lstm_step(x, h, c, LstmParams { w, b }).unwrap();

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(wx_i * xv + wh_i * hv + b_i);
        let f = sig(wx_f * xv + wh_f * hv + b_f);
        let g = (wx_g * xv + wh_g * hv + b_g).tanh();
        let o = sig(wx_o * xv + wh_o * hv + b_o);
        let c_want = f * cv + i * g;
        let h_want = o * c_want.tanh();
        assert!((tape.value(c1).scalar() - c_want).abs() < 1e-14);
        assert!((tape.value(h1).scalar() - h_want).abs() < 1e-14);
    }

    #[test]
    fn lstm_two_step_gradient_matches_fd() {
        let d = 2;
        let init = Tensor::from_fn(2 * d, 4 * d, |i, j| 0.07 * (i as f64 + 1.0) - 0.05 * j as f64);
        let err = fd_wrt_leaf(
            |tape, w| {
                let b = tape.constant(Tensor::zeros(1, 4 * d));
                let x1 = tape.constant(t(1, d, &[0.3, -0.6]));
                let x2 = tape.constant(t(1, d, &[-0.2, 0.9]));
                let h0 = tape.constant(Tensor::zeros(1, d));
                let c0 = tape.constant(Tensor::zeros(1, d));
                let (h1, c1) = tape.lstm_step(x1, h0, c0, LstmParams { w, b }).unwrap();
                let (h2, _c2) = tape.lstm_step(x2, h1, c1, LstmParams { w, b }).unwrap();
                let sq = tape.mul(h2, h2);
                tape.sum_all(sq)
            },
            &init,
        );
        assert!(err < 1e-4, "lstm fd error {err}");
    }

    #[test]
    fn gather_and_aggregate_ops_route_gradients() {
        // gather_rows
        let err = fd_wrt_leaf(
            |tape, table| {
                let g = tape.gather_rows(table, Rc::new(vec![2, 0, 2]));
                let sq = tape.mul(g, g);
                tape.sum_all(sq)
            },
            &t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        );
        assert!(err < 1e-6, "gather_rows {err}");

        // aggregate_by_index + gather_pair_row + gather_pair_col + gather_pair_mat
        let idx = Rc::new(IdxMat::from_vec(2, 2, vec![0, 1, 1, 0]));
        let idx2 = Rc::new(IdxMat::from_vec(2, 2, vec![1, 0, 0, 1]));
        let err = fd_wrt_leaf(
            |tape, p| {
                let a = tape.gather_pair_row(p, idx.clone());
                let b = tape.gather_pair_col(p, idx.clone());
                let m = tape.gather_pair_mat(p, idx.clone(), idx2.clone());
                let s = tape.add(a, b);
                let s = tape.add(s, m);
                let agg = tape.aggregate_by_index(s, idx.clone(), 2);
                let sq = tape.mul(agg, agg);
                tape.sum_all(sq)
            },
            &t(2, 2, &[0.5, -1.0, 2.0, 0.25]),
        );
        assert!(err < 1e-6, "pair gathers {err}");
    }

    #[test]
    fn structural_ops_route_gradients() {
        let err = fd_wrt_leaf(
            |tape, x| {
                let c = tape.constant(t(2, 2, &[1.0, -2.0, 0.5, 3.0]));
                let cat = tape.concat_cols(x, c);
                let left = tape.slice_cols(cat, 0, 3);
                let s = tape.sigmoid(left);
                let th = tape.tanh(s);
                let keep = Rc::new(vec![true, false]);
                let frozen = tape.lerp_rows(th, s, keep);
                let sq = tape.mul(frozen, frozen);
                tape.sum_all(sq)
            },
            &t(2, 2, &[0.3, 0.7, -0.4, 0.1]),
        );
        assert!(err < 1e-6, "structural {err}");

        let err = fd_wrt_leaf(
            |tape, x| {
                let zero = tape.constant(Tensor::zeros(2, 2));
                let srcs = Rc::new(vec![StepSrc::A(1), StepSrc::Zero, StepSrc::A(0)]);
                let g = tape.gather_rows2(x, zero, srcs);
                let sq = tape.mul(g, g);
                tape.sum_all(sq)
            },
            &t(2, 2, &[0.3, 0.7, -0.4, 0.1]),
        );
        assert!(err < 1e-6, "gather_rows2 {err}");

        let err = fd_wrt_leaf(
            |tape, x| {
                let tr = tape.transpose(x);
                let s = tape.constant(t(2, 1, &[0.5, -2.0]));
                let scaled = tape.mul_row_scale(tr, s);
                let sq = tape.mul(scaled, scaled);
                tape.sum_all(sq)
            },
            &t(2, 2, &[0.3, 0.7, -0.4, 0.1]),
        );
        assert!(err < 1e-6, "transpose/mul_row_scale {err}");

        let err = fd_wrt_leaf(
            |tape, s| {
                let a = tape.constant(t(2, 3, &[1.0, -0.5, 0.25, 2.0, 0.1, -1.5]));
                let scaled = tape.mul_row_scale(a, s);
                let sq = tape.mul(scaled, scaled);
                tape.sum_all(sq)
            },
            &t(2, 1, &[0.5, -2.0]),
        );
        assert!(err < 1e-6, "mul_row_scale wrt scale {err}");
    }

    #[test]
    fn layer_norm_normalizes_and_differentiates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.constant(t(1, 4, &[1.0; 4]));
        let beta = tape.constant(t(1, 4, &[0.0; 4]));
        let y = tape.layer_norm(x, gamma, beta, 1e-8);
        let out = tape.value(y);
        assert!(out.iter_sum().abs() < 1e-9);
        let var: f64 = out.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-6);

        let err = fd_wrt_leaf(
            |tape, x| {
                let gamma = tape.var(t(1, 3, &[0.9, 1.1, 1.3]));
                let beta = tape.constant(t(1, 3, &[0.1, -0.2, 0.0]));
                let y = tape.layer_norm(x, gamma, beta, 1e-6);
                let sq = tape.mul(y, y);
                tape.sum_all(sq)
            },
            &t(2, 3, &[0.3, -0.7, 1.4, 2.0, 0.1, -0.9]),
        );
        assert!(err < 1e-5, "layer_norm {err}");
    }

    #[test]
    fn log_pick_feeds_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let z = tape.var(t(1, 3, &[0.2, 1.4, -0.5]));
        let p = tape.softmax_rows(z, None, 1.0);
        let lp = tape.log_pick(p, 0, 1);
        let loss = tape.scale(lp, -1.0);
        let want = -(tape.value(p).get(0, 1)).ln();
        assert!((tape.value(loss).scalar() - want).abs() < 1e-12);

        let err = fd_wrt_leaf(
            |tape, z| {
                let p = tape.softmax_rows(z, None, 1.0);
                let lp = tape.log_pick(p, 0, 1);
                tape.scale(lp, -1.0)
            },
            &t(1, 3, &[0.2, 1.4, -0.5]),
        );
        assert!(err < 1e-6, "log_pick {err}");
    }
}
