//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so inputs always precede their consumers and
//! [`Graph::backward`] is a single sweep in reverse insertion order.
//!
//! Batched tensors put the batch on the leading axis: a `[B × n]` matrix holds
//! one row per sentence and `[B × L × n]` holds per-position vectors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, log_sum_exp, softmax_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One row of a sampled-softmax loss: the gold class and the sampled
/// negatives, each with the log of its importance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRow {
    pub row: usize,
    pub target: usize,
    pub negatives: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_len: usize,
        b_len: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        x_len: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    MaskedSoftmax(Var),
    AddQuery {
        keys: Var,
        query: Var,
    },
    WeightedSum {
        weights: Var,
        memory: Var,
    },
    Stack(Vec<Var>),
    Blend {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    SampledNll {
        features: Var,
        weight: Var,
        bias: Var,
        rows: Vec<SampledRow>,
    },
}

pub struct Graph<T: Real = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamId, Var>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters are treated as constants. Used for inference,
    /// where no backward pass follows.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// The single element of a scalar node, widened to `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].data()[0].to_f64()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} output", op_name(&op))));
        }
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// A constant input. Never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(false);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// A free input whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.constant(t);
        self.needs_grad[v.0] = true;
        v
    }

    /// Registers a parameter, reusing the node if it was already used in this
    /// pass so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.values.push(store.value(id).clone());
        self.ops.push(Op::Param);
        self.needs_grad.push(self.track_params);
        self.grads.push(None);
        let v = Var(self.values.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Parameters touched by this pass, with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> + '_ {
        self.params
            .iter()
            .map(move |(&id, &v)| (id, self.grads[v.0].as_deref()))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, self.values[a.0].data(), self.values[b.0].data(), T::ZERO, out.data_mut());
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x · wᵀ` where `w` is `[n × k]` and `x` has trailing dimension `k`
    /// (leading axes are kept). This is how linear layers apply `W·x` to a
    /// batch of row vectors.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let k = *sx.last().unwrap();
        let (n, k2) = match sw {
            [n, k2] => (*n, *k2),
            _ => return Err(shape_err("matmul_nt", sx, sw)),
        };
        if k != k2 {
            return Err(shape_err("matmul_nt", sx, sw));
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let (m, _) = self.values[x.0].dims2();
        let mut out = Tensor::zeros(&shape);
        gemm_nt(m, k, n, self.values[x.0].data(), self.values[w.0].data(), T::ZERO, out.data_mut());
        let ng = self.ng(&[x, w]);
        self.push(out, Op::MatMulNT(x, w), ng)
    }

    /// Adds a vector to every row of `x`. The only broadcasting operation.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(shape_err("add_bias", sx, sb));
        }
        let mut out = self.values[x.0].clone();
        let bias = self.values[b.0].data();
        for row in out.data_mut().chunks_exact_mut(bias.len()) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o += v;
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= v;
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut out = self.values[x.0].clone();
        let st = T::from_f64(s);
        for o in out.data_mut() {
            *o *= st;
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let mut out = self.values[x.0].clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.values[x.0].clone();
        for o in out.data_mut() {
            *o = o.sigmoid();
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa
                .iter()
                .zip(&sb)
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(shape_err("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_len, b_len) = (sa[axis] * inner, sb[axis] * inner);
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let mut data = Vec::with_capacity(outer * (a_len + b_len));
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        for o in 0..outer {
            data.extend_from_slice(&da[o * a_len..(o + 1) * a_len]);
            data.extend_from_slice(&db[o * b_len..(o + 1) * b_len]);
        }
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(&[a, b]);
        self.push(
            out,
            Op::Concat {
                a,
                b,
                outer,
                a_len,
                b_len,
            },
            ng,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(shape_err("slice", &sx, &[axis, start, len]));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let x_len = sx[axis] * inner;
        let mut shape = sx.clone();
        shape[axis] = len;
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * x_len + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(&[x]);
        self.push(
            out,
            Op::Slice {
                x,
                outer,
                x_len,
                start: start * inner,
                len: len * inner,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Rows `ids` of `table` stacked into an `[ids.len() × dim]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let (rows, dim) = match st.as_slice() {
            [r, d] => (*r, *d),
            _ => return Err(shape_err("gather", &st, &[ids.len()])),
        };
        if ids.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let src = self.values[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for (position, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    bound: rows,
                    position,
                });
            }
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(&[ids.len(), dim], data)?;
        let ng = self.ng(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = &self.values[x.0];
        let n = *src.shape().last().unwrap();
        if n == 0 {
            return Err(Error::Empty("softmax"));
        }
        let mut out = Tensor::zeros(src.shape());
        for (o, i) in out.data_mut().chunks_exact_mut(n).zip(src.data().chunks_exact(n)) {
            softmax_into(i, o);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row-wise softmax of `[B × L]` scores where row `b` only covers its
    /// first `lengths[b]` entries; the rest get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, cols) = match sx.as_slice() {
            [r, c] if *r == lengths.len() => (*r, *c),
            _ => return Err(shape_err("masked_softmax", &sx, &[lengths.len()])),
        };
        let mut out = Tensor::zeros(&sx);
        let src = self.values[x.0].data();
        for r in 0..rows {
            let len = lengths[r];
            if len == 0 {
                return Err(Error::Empty("masked_softmax"));
            }
            if len > cols {
                return Err(shape_err("masked_softmax", &sx, &[len]));
            }
            softmax_into(
                &src[r * cols..r * cols + len],
                &mut out.data_mut()[r * cols..r * cols + len],
            );
        }
        let ng = self.ng(&[x]);
        self.push(
            out,
            Op::MaskedSoftmax(x),
            ng,
        )
    }

    /// `keys[b, l, :] + query[b, :]` for `[B × L × a]` keys.
    pub fn add_query(&mut self, keys: Var, query: Var) -> Result<Var> {
        let (sk, sq) = (self.shape(keys).to_vec(), self.shape(query).to_vec());
        let (b, l, a) = match (sk.as_slice(), sq.as_slice()) {
            ([b, l, a], [b2, a2]) if b == b2 && a == a2 => (*b, *l, *a),
            _ => return Err(shape_err("add_query", &sk, &sq)),
        };
        let mut out = self.values[keys.0].clone();
        let q = self.values[query.0].data();
        let od = out.data_mut();
        for bi in 0..b {
            let qr = &q[bi * a..(bi + 1) * a];
            for li in 0..l {
                let base = (bi * l + li) * a;
                for (o, &qv) in od[base..base + a].iter_mut().zip(qr) {
                    *o += qv;
                }
            }
        }
        let ng = self.ng(&[keys, query]);
        self.push(out, Op::AddQuery { keys, query }, ng)
    }

    /// Context vectors `Σ_l weights[b, l] · memory[b, l, :]`.
    pub fn weighted_sum(&mut self, weights: Var, memory: Var) -> Result<Var> {
        let (sw, sm) = (self.shape(weights).to_vec(), self.shape(memory).to_vec());
        let (b, l, k) = match (sw.as_slice(), sm.as_slice()) {
            ([b, l], [b2, l2, k]) if b == b2 && l == l2 => (*b, *l, *k),
            _ => return Err(shape_err("weighted_sum", &sw, &sm)),
        };
        let mut out = Tensor::zeros(&[b, k]);
        let (w, m) = (self.values[weights.0].data(), self.values[memory.0].data());
        let od = out.data_mut();
        for bi in 0..b {
            let orow = &mut od[bi * k..(bi + 1) * k];
            for li in 0..l {
                let wv = w[bi * l + li];
                if wv == T::ZERO {
                    continue;
                }
                let mrow = &m[(bi * l + li) * k..(bi * l + li + 1) * k];
                for (o, &mv) in orow.iter_mut().zip(mrow) {
                    *o += wv * mv;
                }
            }
        }
        let ng = self.ng(&[weights, memory]);
        self.push(out, Op::WeightedSum { weights, memory }, ng)
    }

    /// Stacks `L` matrices of shape `[B × k]` into `[B × L × k]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("stack"))?;
        let s0 = self.shape(*first).to_vec();
        let (b, k) = match s0.as_slice() {
            [b, k] => (*b, *k),
            _ => return Err(shape_err("stack", &s0, &[])),
        };
        for p in parts {
            if self.shape(*p) != s0.as_slice() {
                return Err(shape_err("stack", &s0, self.shape(*p)));
            }
        }
        let l = parts.len();
        let mut data = vec![T::ZERO; b * l * k];
        for (li, p) in parts.iter().enumerate() {
            let src = self.values[p.0].data();
            for bi in 0..b {
                data[(bi * l + li) * k..(bi * l + li + 1) * k]
                    .copy_from_slice(&src[bi * k..(bi + 1) * k]);
            }
        }
        let out = Tensor::new(&[b, l, k], data)?;
        let ng = self.ng(parts);
        self.push(out, Op::Stack(parts.to_vec()), ng)
    }

    /// Row `r` of the result is row `r` of `a` where `mask[r]`, else of `b`.
    pub fn blend(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("blend", a, b)?;
        let (rows, cols) = self.values[a.0].dims2();
        if rows != mask.len() {
            return Err(shape_err("blend", self.shape(a), &[mask.len()]));
        }
        let mut out = self.values[b.0].clone();
        let src = self.values[a.0].data();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(
            out,
            Op::Blend {
                mask: mask.to_vec(),
                a,
                b,
            },
            ng,
        )
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.values[x.0].data().iter().map(|v| v.to_f64()).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum(x), ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `[B × V]` logits. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let (rows, vocab) = match sl.as_slice() {
            [r, v] if *r == targets.len() => (*r, *v),
            _ => return Err(shape_err("cross_entropy", &sl, &[targets.len()])),
        };
        let src = self.values[logits.0].data();
        let mut total = 0.0f64;
        for r in 0..rows {
            if let Some(t) = targets[r] {
                if t >= vocab {
                    return Err(Error::Index {
                        index: t,
                        bound: vocab,
                        position: r,
                    });
                }
                let row = &src[r * vocab..(r + 1) * vocab];
                total += log_sum_exp(row) - row[t].to_f64();
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Summed sampled-softmax loss. For each row the logits of the gold class
    /// and of the sampled negatives are computed from `features[row]` and the
    /// matching rows of `weight`/`bias`; each negative logit is shifted by
    /// minus its log importance weight before normalising.
    pub fn sampled_nll(&mut self, features: Var, weight: Var, bias: Var, rows: Vec<SampledRow>) -> Result<Var> {
        let (sf, sw, sb) = (
            self.shape(features).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        let (nrows, dim, vocab) = match (sf.as_slice(), sw.as_slice(), sb.as_slice()) {
            ([r, d], [v, d2], [v2]) if d == d2 && v == v2 => (*r, *d, *v),
            _ => return Err(shape_err("sampled_nll", &sf, &sw)),
        };
        let (f, w, bvals) = (
            self.values[features.0].data(),
            self.values[weight.0].data(),
            self.values[bias.0].data(),
        );
        let mut total = 0.0f64;
        for row in &rows {
            if row.row >= nrows {
                return Err(Error::Index {
                    index: row.row,
                    bound: nrows,
                    position: 0,
                });
            }
            for (position, &c) in core::iter::once(&row.target)
                .chain(row.negatives.iter().map(|(c, _)| c))
                .enumerate()
            {
                if c >= vocab {
                    return Err(Error::Index {
                        index: c,
                        bound: vocab,
                        position,
                    });
                }
            }
            let logits = sampled_logits(f, w, bvals, dim, row);
            total += log_sum_exp(&logits) - logits[0];
        }
        let ng = self.ng(&[features, weight, bias]);
        self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::SampledNll {
                features,
                weight,
                bias,
                rows,
            },
            ng,
        )
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// Leaf and parameter gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        accumulate(&mut self.grads[loss.0], 1)[0] += T::ONE;
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Leaf | Op::Param) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, gout: &[T]) {
        let Self {
            values,
            ops,
            needs_grad,
            grads,
            ..
        } = self;
        let val = |v: &Var| values[v.0].data();
        // Gradient buffer of `v`, or `None` when it does not need one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if needs_grad[v.0] {
                    Some(accumulate(&mut grads[v.0], values[v.0].numel()))
                } else {
                    None
                }
            }};
        }
        match &ops[i] {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = values[a.0].dims2();
                let (_, n) = values[b.0].dims2();
                if let Some(ga) = slot!(*a) {
                    gemm_nt(m, n, k, gout, val(b), T::ONE, ga);
                }
                if let Some(gb) = slot!(*b) {
                    gemm_tn(k, m, n, val(a), gout, T::ONE, gb);
                }
            }
            Op::MatMulNT(x, w) => {
                let (m, k) = values[x.0].dims2();
                let (n, _) = values[w.0].dims2();
                if let Some(gx) = slot!(*x) {
                    gemm_nn(m, n, k, gout, val(w), T::ONE, gx);
                }
                if let Some(gw) = slot!(*w) {
                    gemm_tn(n, m, k, gout, val(x), T::ONE, gw);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, gout);
                }
                if let Some(gb) = slot!(*b) {
                    let n = gb.len();
                    for row in gout.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, gout);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((g, &go), &v) in ga.iter_mut().zip(gout).zip(val(b)) {
                        *g += go * v;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((g, &go), &v) in gb.iter_mut().zip(gout).zip(val(a)) {
                        *g += go * v;
                    }
                }
            }
            Op::Scale(x, s) => {
                let st = T::from_f64(*s);
                if let Some(gx) = slot!(*x) {
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += go * st;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(values[i].data()) {
                        *g += go * (T::ONE - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(values[i].data()) {
                        *g += go * y * (T::ONE - y);
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_len,
                b_len,
            } => {
                let w = a_len + b_len;
                if let Some(ga) = slot!(*a) {
                    for o in 0..*outer {
                        add_into(&mut ga[o * a_len..(o + 1) * a_len], &gout[o * w..o * w + a_len]);
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for o in 0..*outer {
                        add_into(&mut gb[o * b_len..(o + 1) * b_len], &gout[o * w + a_len..(o + 1) * w]);
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                x_len,
                start,
                len,
            } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..*outer {
                        let base = o * x_len + start;
                        add_into(&mut gx[base..base + len], &gout[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, gout);
                }
            }
            Op::Gather { table, ids } => {
                let dim = values[table.0].dims2().1;
                if let Some(gt) = slot!(*table) {
                    for (p, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &gout[p * dim..(p + 1) * dim]);
                    }
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let y = values[i].data();
                let n = *values[i].shape().last().unwrap();
                if let Some(gx) = slot!(*x) {
                    for ((g, go), yv) in gx.chunks_exact_mut(n).zip(gout.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let d: f64 = go.iter().zip(yv).map(|(&a, &b)| (a * b).to_f64()).sum();
                        let d = T::from_f64(d);
                        for ((gv, &gov), &yvv) in g.iter_mut().zip(go).zip(yv) {
                            *gv += yvv * (gov - d);
                        }
                    }
                }
            }
            Op::AddQuery { keys, query } => {
                let (b, l, a) = dims3(values[keys.0].shape());
                if let Some(gk) = slot!(*keys) {
                    add_into(gk, gout);
                }
                if let Some(gq) = slot!(*query) {
                    for bi in 0..b {
                        for li in 0..l {
                            let base = (bi * l + li) * a;
                            add_into(&mut gq[bi * a..(bi + 1) * a], &gout[base..base + a]);
                        }
                    }
                }
            }
            Op::WeightedSum { weights, memory } => {
                let (b, l, k) = dims3(values[memory.0].shape());
                if let Some(gw) = slot!(*weights) {
                    let m = values[memory.0].data();
                    for bi in 0..b {
                        let go = &gout[bi * k..(bi + 1) * k];
                        for li in 0..l {
                            gw[bi * l + li] += dot(go, &m[(bi * l + li) * k..(bi * l + li + 1) * k]);
                        }
                    }
                }
                if let Some(gm) = slot!(*memory) {
                    let w = values[weights.0].data();
                    for bi in 0..b {
                        let go = &gout[bi * k..(bi + 1) * k];
                        for li in 0..l {
                            let wv = w[bi * l + li];
                            if wv == T::ZERO {
                                continue;
                            }
                            for (g, &gv) in gm[(bi * l + li) * k..(bi * l + li + 1) * k].iter_mut().zip(go) {
                                *g += wv * gv;
                            }
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                let (b, l, k) = dims3(values[i].shape());
                for (li, p) in parts.iter().enumerate() {
                    if let Some(gp) = slot!(*p) {
                        for bi in 0..b {
                            add_into(
                                &mut gp[bi * k..(bi + 1) * k],
                                &gout[(bi * l + li) * k..(bi * l + li + 1) * k],
                            );
                        }
                    }
                }
            }
            Op::Blend { mask, a, b } => {
                let cols = values[a.0].dims2().1;
                if let Some(ga) = slot!(*a) {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        add_into(&mut ga[r * cols..(r + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
                        add_into(&mut gb[r * cols..(r + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = gout[0];
                if let Some(gx) = slot!(*x) {
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let g0 = gout[0];
                let vocab = values[logits.0].dims2().1;
                if let Some(gl) = slot!(*logits) {
                    let lv = values[logits.0].data();
                    let mut probs = vec![T::ZERO; vocab];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        softmax_into(&lv[r * vocab..(r + 1) * vocab], &mut probs);
                        probs[t] -= T::ONE;
                        for (g, &p) in gl[r * vocab..(r + 1) * vocab].iter_mut().zip(&probs) {
                            *g += g0 * p;
                        }
                    }
                }
            }
            Op::SampledNll {
                features,
                weight,
                bias,
                rows,
            } => {
                let g0 = gout[0].to_f64();
                let dim = values[features.0].dims2().1;
                let (f, w, bv) = (val(features), val(weight), val(bias));
                let mut gf = vec![T::ZERO; f.len()];
                let mut gw = vec![T::ZERO; w.len()];
                let mut gb = vec![T::ZERO; bv.len()];
                for row in rows {
                    let logits = sampled_logits(f, w, bv, dim, row);
                    let lse = log_sum_exp(&logits);
                    let fr = &f[row.row * dim..(row.row + 1) * dim];
                    let classes = core::iter::once(row.target).chain(row.negatives.iter().map(|(c, _)| *c));
                    for (j, c) in classes.enumerate() {
                        let mut d = libm::exp(logits[j] - lse);
                        if j == 0 {
                            d -= 1.0;
                        }
                        let d = T::from_f64(d * g0);
                        gb[c] += d;
                        let wr = &w[c * dim..(c + 1) * dim];
                        for (gwv, &fv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(fr) {
                            *gwv += d * fv;
                        }
                        for (gfv, &wv) in gf[row.row * dim..(row.row + 1) * dim].iter_mut().zip(wr) {
                            *gfv += d * wv;
                        }
                    }
                }
                if let Some(g) = slot!(*features) {
                    add_into(g, &gf);
                }
                if let Some(g) = slot!(*weight) {
                    add_into(g, &gw);
                }
                if let Some(g) = slot!(*bias) {
                    add_into(g, &gb);
                }
            }
        }
    }
}

fn sampled_logits<T: Real>(f: &[T], w: &[T], b: &[T], dim: usize, row: &SampledRow) -> Vec<f64> {
    let fr = &f[row.row * dim..(row.row + 1) * dim];
    let logit = |c: usize| dot(fr, &w[c * dim..(c + 1) * dim]).to_f64() + b[c].to_f64();
    let mut out = Vec::with_capacity(1 + row.negatives.len());
    out.push(logit(row.target));
    for &(c, log_weight) in &row.negatives {
        out.push(logit(c) - log_weight);
    }
    out
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    match s {
        [b, l, k] => (*b, *l, *k),
        _ => unreachable!("checked in forward"),
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::Gather { .. } => "gather",
        Op::Softmax(_) => "softmax",
        Op::MaskedSoftmax(_) => "masked_softmax",
        Op::AddQuery { .. } => "add_query",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Stack(_) => "stack",
        Op::Blend { .. } => "blend",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SampledNll { .. } => "sampled_nll",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::vector(alloc::vec![1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_loss_leaves_zero_gradients() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).map_or(true, |gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0]));
        assert_eq!(g.backward(x), Err(Error::NonScalarLoss(alloc::vec![2])));
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_is_deterministic() {
        let build = |g: &mut Graph<f32>| {
            let x = g.leaf(Tensor::vector(alloc::vec![0.5, -1.5, 2.0]));
            let t = g.tanh(x).unwrap();
            let s = g.mul(t, x).unwrap();
            (x, g.sum(s).unwrap())
        };
        let mut g = Graph::new();
        let (x, loss) = build(&mut g);
        g.backward(loss).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), once.as_slice());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f32>::new();
        let z = g.leaf(Tensor::vector(alloc::vec![0.0]));
        let t = g.tanh(z).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(t).data(), &[0.0]);
        assert_eq!(g.value(s).data(), &[0.5]);
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[0.25]);
        let a = g.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(alloc::vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let bad = g.constant(Tensor::vector(alloc::vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(alloc::vec![3.0]));
        let c = g.concat(a, b, 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);

        let m = Tensor::from_rows(&[&[1.0f32, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let x = g.constant(m.clone());
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let y = g.concat(x, empty, 1).unwrap();
        assert_eq!(g.value(y), &m);
        let wrong = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.concat(x, wrong, 1).is_err());
    }

    #[test]
    fn gather_reports_offending_position() {
        let mut g = Graph::<f32>::new();
        let t = g.leaf(Tensor::zeros(&[3, 2]));
        assert_eq!(
            g.gather(t, &[0, 5]),
            Err(Error::Index {
                index: 5,
                bound: 3,
                position: 1
            })
        );
    }

    #[test]
    fn overflow_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::vector(alloc::vec![3.0e38]));
        assert!(matches!(g.add(a, a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_ignores_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_rows(&[&[0.0, core::f64::consts::LN_2, 9.0], &[1.0, 1.0, 1.0]]).unwrap());
        let y = g.masked_softmax(x, &[2, 3]).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12 && (v[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
        assert!(v[3..].iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    type Build = fn(&mut Graph<f64>, Var) -> Result<Var>;

    /// Each op composed into a scalar with a fixed random projection so every
    /// output coordinate matters.
    fn op_cases() -> alloc::vec::Vec<(&'static str, &'static [usize], Build)> {
        fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
            let shape = g.shape(y).to_vec();
            let w = g.constant(random(&shape, 99));
            let p = g.mul(y, w)?;
            g.sum(p)
        }
        alloc::vec![
            ("matmul", &[2, 3], |g, x| {
                let b = g.constant(random(&[3, 4], 1));
                let y = g.matmul(x, b)?;
                project(g, y)
            }),
            ("matmul_rhs", &[3, 2], |g, x| {
                let a = g.constant(random(&[4, 3], 2));
                let y = g.matmul(a, x)?;
                project(g, y)
            }),
            ("matmul_nt", &[2, 3, 4], |g, x| {
                let w = g.constant(random(&[5, 4], 3));
                let y = g.matmul_nt(x, w)?;
                project(g, y)
            }),
            ("matmul_nt_weight", &[5, 4], |g, w| {
                let x = g.constant(random(&[3, 4], 4));
                let y = g.matmul_nt(x, w)?;
                project(g, y)
            }),
            ("add_bias", &[4], |g, b| {
                let x = g.constant(random(&[3, 4], 5));
                let y = g.add_bias(x, b)?;
                let y = g.tanh(y)?;
                project(g, y)
            }),
            ("mul_self", &[5], |g, x| {
                let y = g.mul(x, x)?;
                project(g, y)
            }),
            ("tanh_sigmoid", &[6], |g, x| {
                let t = g.tanh(x)?;
                let s = g.sigmoid(x)?;
                let y = g.mul(t, s)?;
                project(g, y)
            }),
            ("concat_slice", &[2, 3], |g, x| {
                let c = g.constant(random(&[2, 2], 6));
                let y = g.concat(c, x, 1)?;
                let s = g.slice(y, 1, 1, 3)?;
                let s = g.sigmoid(s)?;
                project(g, s)
            }),
            ("gather", &[4, 3], |g, t| {
                let y = g.gather(t, &[2, 0, 2])?;
                let y = g.tanh(y)?;
                project(g, y)
            }),
            ("softmax", &[2, 4], |g, x| {
                let y = g.softmax(x)?;
                project(g, y)
            }),
            ("masked_softmax", &[3, 4], |g, x| {
                let y = g.masked_softmax(x, &[4, 1, 2])?;
                project(g, y)
            }),
            ("attention_parts", &[2, 3, 4], |g, keys| {
                let q = g.constant(random(&[2, 4], 7));
                let e = g.add_query(keys, q)?;
                let e = g.tanh(e)?;
                let v = g.constant(random(&[1, 4], 8));
                let s = g.matmul_nt(e, v)?;
                let s = g.reshape(s, &[2, 3])?;
                let w = g.masked_softmax(s, &[3, 2])?;
                let y = g.weighted_sum(w, keys)?;
                project(g, y)
            }),
            ("stack_blend", &[2, 3], |g, x| {
                let c = g.constant(random(&[2, 3], 9));
                let t = g.tanh(x)?;
                let b = g.blend(&[true, false], t, c)?;
                let y = g.stack(&[x, b, x])?;
                project(g, y)
            }),
            ("cross_entropy", &[3, 5], |g, x| g.cross_entropy(x, &[Some(1), None, Some(4)])),
            ("sampled_nll", &[3, 4], |g, f| {
                let w = g.constant(random(&[6, 4], 10));
                let b = g.constant(random(&[6], 11));
                g.sampled_nll(
                    f,
                    w,
                    b,
                    alloc::vec![
                        SampledRow { row: 0, target: 2, negatives: alloc::vec![(0, 0.3), (5, -0.2)] },
                        SampledRow { row: 2, target: 5, negatives: alloc::vec![(1, 1.0)] },
                    ],
                )
            }),
            ("scale", &[3], |g, x| {
                let y = g.scale(x, -2.5)?;
                project(g, y)
            }),
        ]
    }

    #[test]
    fn every_op_passes_grad_check_in_f64() {
        for (name, shape, f) in op_cases() {
            let err = grad_check(f, &random(shape, 42), 1e-4).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn sampled_nll_weight_and_bias_gradients() {
        let f = random(&[2, 3], 20);
        let rows = alloc::vec![SampledRow { row: 1, target: 0, negatives: alloc::vec![(2, 0.1), (3, 0.7)] }];
        let r = rows.clone();
        let err = grad_check(
            move |g: &mut Graph<f64>, w| {
                let fv = g.constant(f.clone());
                let b = g.constant(random(&[4], 21));
                g.sampled_nll(fv, w, b, r.clone())
            },
            &random(&[4, 3], 22),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let f = random(&[2, 3], 20);
        let err = grad_check(
            move |g: &mut Graph<f64>, b| {
                let fv = g.constant(f.clone());
                let w = g.constant(random(&[4, 3], 22));
                g.sampled_nll(fv, w, b, rows.clone())
            },
            &random(&[4], 21),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    // x·y is linear in each coordinate, so central differences have no
    // truncation error and a wide step keeps f32 rounding noise small.
    #[test]
    fn dot_product_grad_check_in_f32() {
        let theta = Tensor::<f32>::vector(alloc::vec![0.3, -1.2, 0.8, 2.0, -0.5, 1.1]);
        let err = grad_check(
            |g: &mut Graph<f32>, x| {
                let a = g.slice(x, 0, 0, 3)?;
                let b = g.slice(x, 0, 3, 3)?;
                let p = g.mul(a, b)?;
                g.sum(p)
            },
            &theta,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
