//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation runs
//! eagerly, appends a node holding its output and whatever its local
//! gradient needs, and returns a [`Var`] handle. Nodes only ever refer to
//! earlier nodes, so a single reverse sweep computes all gradients.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::gemm::{gemm, MatMut, MatRef};
use super::ops::{self, Mask};
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Visibility rule inside one attention segment.
#[derive(Clone, Debug)]
pub enum SegmentMask {
    Full,
    /// Query `i` sees keys `0..=i` of its segment.
    Causal,
    Custom(Rc<Mask>),
}

/// One independent attention problem inside a batched attention call:
/// query columns `q_start..q_start + q_len` attend to key/value columns
/// `k_start..k_start + k_len`.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: SegmentMask,
}

impl AttnSegment {
    fn blocked(&self, i: usize, j: usize) -> bool {
        match &self.mask {
            SegmentMask::Full => false,
            SegmentMask::Causal => j > i,
            SegmentMask::Custom(m) => m.is_blocked(i, j),
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    AddColBias(Var, Var),
    Sum(Var),
    NormalizeCols {
        x: Var,
        norms: Vec<f32>,
    },
    NormalizeRows {
        x: Var,
        sums: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<Vec<AttnSegment>>,
        probs: Vec<Vec<f32>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record: an append-only list of executed operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1 {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).expect("same shape")
    } else if b.numel() == 1 {
        let y = b.data()[0];
        Tensor::new(a.shape(), a.data().iter().map(|&x| f(x, y)).collect()).expect("shape")
    } else {
        let x = a.data()[0];
        Tensor::new(b.shape(), b.data().iter().map(|&y| f(x, y)).collect()).expect("shape")
    }
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Reduces a broadcast gradient back to the operand's shape.
fn reduce_to(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::new(target.shape(), vec![grad.data().iter().sum()]).expect("scalar")
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Trainable leaf. Repeated requests for the same parameter share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_or_scalar("add", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_or_scalar("sub", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_or_scalar("mul", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = map(self.value(a), |x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = map(self.value(a), |x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f32::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Natural log, with inputs floored at the smallest normal `f32`.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(f32::MIN_POSITIVE).ln());
        self.push(out, Op::Ln(a))
    }

    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let out = ops::masked_softmax_rows(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (out, stats) =
            ops::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
        ))
    }

    /// Gathers rows of a `|V| × d` table into the columns of a `d × L` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenId {
                id: bad,
                size: vocab,
            });
        }
        let l = ids.len();
        let mut out = vec![0.0f32; d * l];
        for (k, &id) in ids.iter().enumerate() {
            for (r, &v) in t.row(id).iter().enumerate() {
                out[r * l + k] = v;
            }
        }
        let out = Tensor::new(&[d, l], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates `rows × Lᵢ` parts side by side. An empty list gives `rows × 0`.
    pub fn concat_cols(&mut self, parts: &[Var], rows: usize) -> Result<Var> {
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || t.rows() != rows {
                return Err(Error::dim("concat_cols", &[rows], t.shape()));
            }
            total += t.cols();
        }
        let mut out = vec![0.0f32; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() > 2 || start + len > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let c = t.cols();
        let out = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Adds a length-`rows` bias vector to every column.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, b) = (self.value(x), self.value(bias));
        if t.rank() > 2 || b.numel() != t.rows() {
            return Err(Error::dim("add_col_bias", t.shape(), b.shape()));
        }
        let c = t.cols();
        let mut out = t.clone();
        for (r, &bv) in b.data().iter().enumerate() {
            out.data_mut()[r * c..(r + 1) * c]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::AddColBias(x, bias)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    /// Scales each column to unit Euclidean norm; zero columns stay zero.
    pub fn normalize_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut norms = vec![0.0f32; c];
        for i in 0..r {
            for (j, n) in norms.iter_mut().enumerate() {
                let v = t.data()[i * c + j];
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let mut out = t.clone();
        for i in 0..r {
            for j in 0..c {
                let n = norms[j];
                let idx = i * c + j;
                out.data_mut()[idx] = if n > 0.0 { t.data()[idx] / n } else { 0.0 };
            }
        }
        self.push(out, Op::NormalizeCols { x, norms })
    }

    /// Divides each row by its sum. Every row sum must be positive.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        let mut sums = Vec::with_capacity(t.rows());
        for (r, row) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if !(s > 0.0) {
                return Err(Error::Invalid(format!(
                    "normalize_rows: row {r} has non-positive mass {s}"
                )));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
            sums.push(s as f32);
        }
        Ok(self.push(out, Op::NormalizeRows { x, sums }))
    }

    /// Batched multi-head scaled dot-product attention without projections.
    ///
    /// `q` is `d × Nq`, `k` and `v` are `d × Nk`. Rows are split into
    /// `heads` contiguous blocks. Every query column must belong to exactly
    /// one segment; key ranges may be shared between segments.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<Vec<AttnSegment>>,
    ) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.rows();
        if kt.rows() != d || vt.rows() != d || kt.cols() != vt.cols() {
            return Err(Error::dim("attention", qt.shape(), kt.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!(
                "attention: d={d} is not divisible by heads={heads}"
            )));
        }
        let (nq, nk) = (qt.cols(), kt.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut covered = vec![false; nq];
        for s in segments.iter() {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::dim(
                    "attention segment",
                    &[s.q_start, s.q_len, s.k_start, s.k_len],
                    &[nq, nk],
                ));
            }
            if let SegmentMask::Custom(m) = &s.mask {
                if m.shape() != [s.q_len, s.k_len] {
                    return Err(Error::dim("attention mask", &m.shape(), &[s.q_len, s.k_len]));
                }
            }
            for c in &mut covered[s.q_start..s.q_start + s.q_len] {
                if *c {
                    return Err(Error::Invalid("attention: overlapping query segments".into()));
                }
                *c = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Invalid(
                "attention: query column outside every segment".into(),
            ));
        }

        let mut out = vec![0.0f32; d * nq];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for s in segments.iter() {
            let (lq, lk) = (s.q_len, s.k_len);
            for h in 0..heads {
                let mut a = vec![0.0f32; lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    MatRef::strided(qt.data(), h * dh * nq + s.q_start, 1, nq),
                    MatRef::strided(kt.data(), h * dh * nk + s.k_start, nk, 1),
                    MatMut::row_major(&mut a, lk),
                    0.0,
                );
                for i in 0..lq {
                    let row = &mut a[i * lk..(i + 1) * lk];
                    row.iter_mut().for_each(|x| *x *= scale);
                    let blocked: Option<Vec<bool>> = match s.mask {
                        SegmentMask::Full => None,
                        _ => Some((0..lk).map(|j| s.blocked(i, j)).collect()),
                    };
                    if !ops::softmax_row(row, blocked.as_deref()) {
                        return Err(Error::FullyMasked { row: s.q_start + i });
                    }
                }
                gemm(
                    dh,
                    lk,
                    lq,
                    MatRef::strided(vt.data(), h * dh * nk + s.k_start, nk, 1),
                    MatRef::strided(&a, 0, 1, lk),
                    MatMut::strided(&mut out, h * dh * nq + s.q_start, nq, 1),
                    0.0,
                );
                probs.push(a);
            }
        }
        let out = Tensor::new(&[d, nq], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an attention node, one `Lq × Lk`
    /// row-major block per (segment, head).
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f32>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per parameter
    /// in `store`; parameters the loss does not touch get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape(), vec![1.0])?);
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                    let mut da = vec![0.0f32; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g.data(), n),
                        MatRef::row_major(bt.data(), n).t(),
                        MatMut::row_major(&mut da, k),
                        0.0,
                    );
                    let mut db = vec![0.0f32; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::row_major(at.data(), k).t(),
                        MatRef::row_major(g.data(), n),
                        MatMut::row_major(&mut db, n),
                        0.0,
                    );
                    accumulate(&mut grads, *a, Tensor::new(at.shape(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bt.shape(), db)?);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose().reshape(self.shape(*a))?;
                    accumulate(&mut grads, *a, gt);
                }
                Op::Add(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a));
                    let gb = reduce_to(g, self.value(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a));
                    let gb = reduce_to(map(&g, |x| -x), self.value(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let ga = reduce_to(zip_broadcast(&g, bt, |x, y| x * y), at);
                    let gb = reduce_to(zip_broadcast(&g, at, |x, y| x * y), bt);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, map(&g, |x| x * f)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let gx = zip_broadcast(&g, self.value(*a), |dy, x| if x > 0.0 { dy } else { 0.0 });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let gx = zip_broadcast(&g, &node.value, |dy, y| dy * (1.0 - y * y));
                    accumulate(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let gx = zip_broadcast(&g, &node.value, |dy, y| dy * y * (1.0 - y));
                    accumulate(&mut grads, *a, gx);
                }
                Op::Ln(a) => {
                    let gx = zip_broadcast(&g, self.value(*a), |dy, x| {
                        dy / x.max(f32::MIN_POSITIVE)
                    });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = g.clone();
                    if c > 0 {
                        for (row_g, row_y) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                            let dot: f32 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                            for (gv, &yv) in row_g.iter_mut().zip(row_y) {
                                *gv = yv * (*gv - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_t = self.value(*gain);
                    let d = node.value.rows();
                    let l = node.value.cols();
                    let gd = g.data();
                    let gv = gain_t.data();
                    let mut dgain = vec![0.0f32; d];
                    let mut dbias = vec![0.0f32; d];
                    let mut sum_g = vec![0.0f32; l];
                    let mut sum_gx = vec![0.0f32; l];
                    let mut gh = vec![0.0f32; d * l];
                    for r in 0..d {
                        for c in 0..l {
                            let idx = r * l + c;
                            dgain[r] += gd[idx] * xhat[idx];
                            dbias[r] += gd[idx];
                            let h = gd[idx] * gv[r];
                            gh[idx] = h;
                            sum_g[c] += h;
                            sum_gx[c] += h * xhat[idx];
                        }
                    }
                    let df = d as f32;
                    let mut dx = vec![0.0f32; d * l];
                    for r in 0..d {
                        for c in 0..l {
                            let idx = r * l + c;
                            dx[idx] = inv_std[c] / df
                                * (df * gh[idx] - sum_g[c] - xhat[idx] * sum_gx[c]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(node.value.shape(), dx)?);
                    accumulate(&mut grads, *gain, Tensor::new(gain_t.shape(), dgain)?);
                    accumulate(
                        &mut grads,
                        *bias,
                        Tensor::new(self.value(*bias).shape(), dbias)?,
                    );
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let l = ids.len();
                    let mut dt = Tensor::zeros(tt.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (r, slot) in dst.iter_mut().enumerate() {
                            *slot += g.data()[r * l + k];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut dp = vec![0.0f32; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        offset += c;
                        accumulate(&mut grads, p, Tensor::new(self.shape(p), dp)?);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xt = self.value(*x);
                    let (r, c) = (xt.rows(), xt.cols());
                    let len = node.value.cols();
                    let mut dx = vec![0.0f32; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xt.shape(), dx)?);
                }
                Op::SliceRows { x, start } => {
                    let xt = self.value(*x);
                    let c = xt.cols();
                    let mut dx = vec![0.0f32; xt.numel()];
                    dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, Tensor::new(xt.shape(), dx)?);
                }
                Op::AddColBias(x, b) => {
                    let c = node.value.cols();
                    let bt = self.value(*b);
                    let db: Vec<f32> = if c == 0 {
                        vec![0.0; bt.numel()]
                    } else {
                        g.data().chunks(c).map(|row| row.iter().sum()).collect()
                    };
                    accumulate(&mut grads, *b, Tensor::new(bt.shape(), db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gs));
                }
                Op::NormalizeCols { x, norms } => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dots = vec![0.0f32; c];
                    for i in 0..r {
                        for (j, dot) in dots.iter_mut().enumerate() {
                            *dot += y.data()[i * c + j] * g.data()[i * c + j];
                        }
                    }
                    let mut dx = vec![0.0f32; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let idx = i * c + j;
                            if norms[j] > 0.0 {
                                dx[idx] = (g.data()[idx] - y.data()[idx] * dots[j]) / norms[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape(), dx)?);
                }
                Op::NormalizeRows { x, sums } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = g.clone();
                    for (r, (row_g, row_y)) in dx
                        .data_mut()
                        .chunks_mut(c.max(1))
                        .zip(y.data().chunks(c.max(1)))
                        .enumerate()
                    {
                        let dot: f32 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                        row_g.iter_mut().for_each(|v| *v = (*v - dot) / sums[r]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qt.rows();
                    let (nq, nk) = (qt.cols(), kt.cols());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut dq = vec![0.0f32; d * nq];
                    let mut dk = vec![0.0f32; d * nk];
                    let mut dv = vec![0.0f32; d * nk];
                    let gd = g.data();
                    for (si, s) in segments.iter().enumerate() {
                        let (lq, lk) = (s.q_len, s.k_len);
                        for h in 0..*heads {
                            let a = &probs[si * heads + h];
                            let q_off = h * dh * nq + s.q_start;
                            let k_off = h * dh * nk + s.k_start;
                            gemm(
                                dh,
                                lq,
                                lk,
                                MatRef::strided(gd, q_off, nq, 1),
                                MatRef::row_major(a, lk),
                                MatMut::strided(&mut dv, k_off, nk, 1),
                                1.0,
                            );
                            let mut ds = vec![0.0f32; lq * lk];
                            gemm(
                                lq,
                                dh,
                                lk,
                                MatRef::strided(gd, q_off, 1, nq),
                                MatRef::strided(vt.data(), k_off, nk, 1),
                                MatMut::row_major(&mut ds, lk),
                                0.0,
                            );
                            for i in 0..lq {
                                let row_a = &a[i * lk..(i + 1) * lk];
                                let row_d = &mut ds[i * lk..(i + 1) * lk];
                                let dot: f32 = row_a.iter().zip(row_d.iter()).map(|(x, y)| x * y).sum();
                                for (dv_, &av) in row_d.iter_mut().zip(row_a) {
                                    *dv_ = av * (*dv_ - dot) * scale;
                                }
                            }
                            gemm(
                                dh,
                                lk,
                                lq,
                                MatRef::strided(kt.data(), k_off, nk, 1),
                                MatRef::strided(&ds, 0, 1, lk),
                                MatMut::strided(&mut dq, q_off, nq, 1),
                                1.0,
                            );
                            gemm(
                                dh,
                                lq,
                                lk,
                                MatRef::strided(qt.data(), q_off, nq, 1),
                                MatRef::row_major(&ds, lk),
                                MatMut::strided(&mut dk, k_off, nk, 1),
                                1.0,
                            );
                        }
                    }
                    accumulate(&mut grads, *q, Tensor::new(qt.shape(), dq)?);
                    accumulate(&mut grads, *k, Tensor::new(kt.shape(), dk)?);
                    accumulate(&mut grads, *v, Tensor::new(vt.shape(), dv)?);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
