//! Embedding, LSTM, bidirectional encoder, additive attention and affine
//! layers.
//!
//! Layers own [`ParamId`]s into a shared [`ParamStore`] and build their
//! computation on a [`Graph`] for a whole batch at once: inputs are
//! `[B × dim]` matrices with one row per sentence, and sequence memories are
//! `[B × L × dim]` with one vector per position.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Half-width of the uniform initialisation range for every weight.
pub const INIT_SCALE: f64 = 0.08;
/// Initial value of the LSTM forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let weights = store.add_uniform(name, &[vocab_size, dim], INIT_SCALE, rng);
        Self {
            weights,
            vocab_size,
            dim,
        }
    }

    /// Embeddings of `ids` as an `[ids.len() × dim]` matrix. The gradient
    /// only reaches the rows that were looked up.
    pub fn lookup<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let table = g.param(store, self.weights);
        g.gather(table, ids)
    }
}

/// Hidden and cell state of an LSTM for a batch, each `[B × hidden]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// A single LSTM layer. The four gate matrices are stacked row-wise in the
/// order input, forget, output, candidate into one
/// `[4·hidden × (input + hidden)]` parameter, with a matching `[4·hidden]`
/// bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub weights: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weights = store.add_uniform(
            format!("{name}.w"),
            &[4 * hidden_dim, input_dim + hidden_dim],
            INIT_SCALE,
            rng,
        );
        let mut b = vec![0.0; 4 * hidden_dim];
        for v in &mut b {
            *v = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
        }
        b[hidden_dim..2 * hidden_dim].fill(FORGET_BIAS);
        let bias = store.add(
            format!("{name}.b"),
            Tensor::from_f64(&[4 * hidden_dim], &b).expect("bias length"),
        );
        Self {
            weights,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> LstmState {
        LstmState {
            h: g.constant(Tensor::zeros(&[batch, self.hidden_dim])),
            c: g.constant(Tensor::zeros(&[batch, self.hidden_dim])),
        }
    }

    /// One step on a `[B × input]` batch.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, state: LstmState) -> Result<LstmState> {
        let n = self.hidden_dim;
        let z = g.concat(x, state.h, 1)?;
        let w = g.param(store, self.weights);
        let b = g.param(store, self.bias);
        let pre = g.matmul_nt(z, w)?;
        let pre = g.add_bias(pre, b)?;
        let i = g.slice(pre, 1, 0, n)?;
        let f = g.slice(pre, 1, n, n)?;
        let o = g.slice(pre, 1, 2 * n, n)?;
        let cand = g.slice(pre, 1, 3 * n, n)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let o = g.sigmoid(o)?;
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Bidirectional LSTM: each direction has half of the output width.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstmEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if output_dim % 2 != 0 || output_dim == 0 {
            return Err(Error::Config(format!("encoder output size {output_dim} must be even")));
        }
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_dim, output_dim / 2, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_dim, output_dim / 2, rng),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden_dim + self.backward.hidden_dim
    }

    /// Encodes a padded batch given as one `[B × input]` matrix per position.
    /// Row `b` is valid for its first `lengths[b]` positions. The output at
    /// position `i` concatenates the forward state after reading positions
    /// `0..=i` with the backward state after reading positions
    /// `lengths[b]-1` down to `i`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
        lengths: &[usize],
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() || lengths.iter().any(|&l| l == 0) {
            return Err(Error::Empty("bilstm_encode"));
        }
        let batch = lengths.len();
        let max_len = inputs.len();
        let ragged = lengths.iter().any(|&l| l != max_len);

        let mut fwd = Vec::with_capacity(max_len);
        let mut state = self.forward.zero_state(g, batch);
        for &x in inputs {
            state = self.forward.step(g, store, x, state)?;
            fwd.push(state.h);
        }

        let mut bwd = vec![None; max_len];
        let mut state = self.backward.zero_state(g, batch);
        for t in (0..max_len).rev() {
            let next = self.backward.step(g, store, inputs[t], state)?;
            state = if ragged {
                // rows whose sentence ends before `t` stay at the zero state
                let mask: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
                LstmState {
                    h: g.blend(&mask, next.h, state.h)?,
                    c: g.blend(&mask, next.c, state.c)?,
                }
            } else {
                next
            };
            bwd[t] = Some(state.h);
        }

        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat(f, b.expect("filled"), 1))
            .collect()
    }
}

/// Keys precomputed once per memory for [`AdditiveAttention::attend`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMemory {
    /// `[B × L × key_dim]`
    pub values: Var,
    /// `[B × L × att_dim]`, the key transform applied to every position.
    pub keys: Var,
    pub lengths: Vec<usize>,
}

/// Scores `vᵀ tanh(W_q·query + W_k·key)`, normalised by softmax over the
/// valid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveAttention {
    pub query_weights: ParamId,
    pub key_weights: ParamId,
    pub score: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
    pub att_dim: usize,
}

impl AdditiveAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        att_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query_weights: store.add_uniform(format!("{name}.wq"), &[att_dim, query_dim], INIT_SCALE, rng),
            key_weights: store.add_uniform(format!("{name}.wk"), &[att_dim, key_dim], INIT_SCALE, rng),
            score: store.add_uniform(format!("{name}.v"), &[att_dim], INIT_SCALE, rng),
            query_dim,
            key_dim,
            att_dim,
        }
    }

    pub fn memory<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        values: Var,
        lengths: &[usize],
    ) -> Result<AttentionMemory> {
        let s = g.shape(values).to_vec();
        match s.as_slice() {
            [b, l, _] if *b == lengths.len() && *l > 0 => {}
            [_, 0, _] => return Err(Error::Empty("attend")),
            _ => {
                return Err(Error::Shape {
                    op: "attention_memory",
                    lhs: s,
                    rhs: vec![lengths.len()],
                })
            }
        }
        let wk = g.param(store, self.key_weights);
        let keys = g.matmul_nt(values, wk)?;
        Ok(AttentionMemory {
            values,
            keys,
            lengths: lengths.to_vec(),
        })
    }

    /// Returns the `[B × key_dim]` context and the `[B × L]` weights.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        memory: &AttentionMemory,
    ) -> Result<(Var, Var)> {
        let (b, l) = {
            let s = g.shape(memory.keys);
            (s[0], s[1])
        };
        let wq = g.param(store, self.query_weights);
        let q = g.matmul_nt(query, wq)?;
        let e = g.add_query(memory.keys, q)?;
        let e = g.tanh(e)?;
        let v = g.param(store, self.score);
        let v = g.reshape(v, &[1, self.att_dim])?;
        let scores = g.matmul_nt(e, v)?;
        let scores = g.reshape(scores, &[b, l])?;
        let weights = g.masked_softmax(scores, &memory.lengths)?;
        let context = g.weighted_sum(weights, memory.values)?;
        Ok((context, weights))
    }
}

/// `W·x + b` applied to every row.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineProjection {
    pub weights: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineProjection {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weights: store.add_uniform(format!("{name}.w"), &[out_dim, in_dim], INIT_SCALE, rng),
            bias: store.add_uniform(format!("{name}.b"), &[out_dim], INIT_SCALE, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weights);
        let b = g.param(store, self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_bias(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn projected_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let w = g.constant(random(&g.shape(y).to_vec(), seed));
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    /// Larger-than-default parameters so gradients are not vanishingly small.
    fn rescale(store: &mut ParamStore<f64>, seed: u64) {
        let mut r = rng(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            for v in p.value.data_mut() {
                *v = r.gen_range(-1.5..1.5);
            }
        }
    }

    #[test]
    fn embedding_lookup_returns_rows() {
        let mut store = ParamStore::<f32>::new();
        let emb = EmbeddingTable::new(&mut store, "emb", 6, 3, &mut rng(0));
        store
            .set_value(
                emb.weights,
                Tensor::from_f64(&[6, 3], &[1., 2., 3., 0., 0., 0., 4., 5., 6., 0., 0., 0., 0., 0., 0., 7., 8., 9.]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new();
        let x = emb.lookup(&mut g, &store, &[0]).unwrap();
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
        let y = emb.lookup(&mut g, &store, &[2, 2]).unwrap();
        assert_eq!(g.value(y).row(0), g.value(y).row(1));
        assert!(matches!(emb.lookup(&mut g, &store, &[1, 6]), Err(Error::Index { position: 1, .. })));
    }

    #[test]
    fn embedding_gradient_scatters_to_used_row_only() {
        let mut store = ParamStore::<f64>::new();
        let emb = EmbeddingTable::new(&mut store, "emb", 7, 2, &mut rng(1));
        let mut g = Graph::new();
        let x = emb.lookup(&mut g, &store, &[5]).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        store.accumulate_grads(&g);
        let grad = &store.get(emb.weights).grad;
        for r in 0..7 {
            let expect = if r == 5 { 1.0 } else { 0.0 };
            assert_eq!(&grad[r * 2..r * 2 + 2], &[expect, expect]);
        }
        let checks = grad_check_params(
            &store,
            |g, s| {
                let x = emb.lookup(g, s, &[5])?;
                g.sum(x)
            },
            1e-4,
            |_| true,
        )
        .unwrap();
        assert!(checks[0].max_relative_error < 1e-8);
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let mut store = ParamStore::<f32>::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng(2));
        for id in [cell.weights, cell.bias] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 3], &[0.7, -2.0, 5.0]).unwrap());
        let s0 = cell.zero_state(&mut g, 1);
        let s1 = cell.step(&mut g, &store, x, s0).unwrap();
        assert!(g.value(s1.h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s1.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_lstm_matches_hand_evaluation() {
        // input 1, hidden 1: rows are gates i, f, o, g; columns are [x, h]
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "lstm", 1, 1, &mut rng(3));
        let w = [0.5, -0.3, 0.8, 0.1, -0.6, 0.4, 1.2, 0.7];
        let b = [0.1, 1.0, -0.2, 0.05];
        store.set_value(cell.weights, Tensor::from_f64(&[4, 2], &w).unwrap()).unwrap();
        store.set_value(cell.bias, Tensor::from_f64(&[4], &b).unwrap()).unwrap();
        let (x, h0, c0) = (0.9f64, -0.4f64, 0.25f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(w[0] * x + w[1] * h0 + b[0]);
        let f = sig(w[2] * x + w[3] * h0 + b[1]);
        let o = sig(w[4] * x + w[5] * h0 + b[2]);
        let cand = (w[6] * x + w[7] * h0 + b[3]).tanh();
        let c1 = f * c0 + i * cand;
        let h1 = o * c1.tanh();

        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_f64(&[1, 1], &[x]).unwrap());
        let state = LstmState {
            h: g.constant(Tensor::from_f64(&[1, 1], &[h0]).unwrap()),
            c: g.constant(Tensor::from_f64(&[1, 1], &[c0]).unwrap()),
        };
        let s1 = cell.step(&mut g, &store, xv, state).unwrap();
        assert!((g.value(s1.h).data()[0] - h1).abs() < 1e-12);
        assert!((g.value(s1.c).data()[0] - c1).abs() < 1e-12);
        let again = cell.step(&mut g, &store, xv, state).unwrap();
        assert_eq!(g.value(again.h), g.value(s1.h));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f32>::new();
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng(4));
        assert_eq!(&store.value(cell.bias).data()[3..6], &[1.0, 1.0, 1.0]);
    }

    fn inputs(g: &mut Graph<f64>, data: &Tensor<f64>) -> Vec<Var> {
        // data is [L × B·in] flattened per position
        let (l, _) = data.dims2();
        (0..l)
            .map(|t| g.constant(Tensor::new(&[1, data.dims2().1], data.row(t).to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn bilstm_single_step_concatenates_both_directions() {
        let mut store = ParamStore::<f64>::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut rng(5)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&[1, 3], 6));
        let out = enc.encode(&mut g, &store, &[x], &[1]).unwrap();
        assert_eq!(out.len(), 1);
        let s = enc.forward.zero_state(&mut g, 1);
        let f = enc.forward.step(&mut g, &store, x, s).unwrap();
        let s = enc.backward.zero_state(&mut g, 1);
        let b = enc.backward.step(&mut g, &store, x, s).unwrap();
        let mut expect = g.value(f.h).data().to_vec();
        expect.extend_from_slice(g.value(b.h).data());
        assert_eq!(g.value(out[0]).data(), expect.as_slice());
    }

    #[test]
    fn bilstm_palindrome_with_tied_directions_is_mirror_symmetric() {
        let mut store = ParamStore::<f64>::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 2, 6, &mut rng(7)).unwrap();
        let w = store.value(enc.forward.weights).clone();
        let b = store.value(enc.forward.bias).clone();
        store.set_value(enc.backward.weights, w).unwrap();
        store.set_value(enc.backward.bias, b).unwrap();
        let base = random(&[3, 2], 8);
        let mut rows = Vec::new();
        for t in [0, 1, 2, 1, 0] {
            rows.extend_from_slice(base.row(t));
        }
        let seq = Tensor::new(&[5, 2], rows).unwrap();
        let mut g = Graph::new();
        let xs = inputs(&mut g, &seq);
        let out = enc.encode(&mut g, &store, &xs, &[5]).unwrap();
        for i in 0..5 {
            let fwd = &g.value(out[i]).data()[..3];
            let bwd = &g.value(out[4 - i]).data()[3..];
            for (a, b) in fwd.iter().zip(bwd) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_output_shape() {
        let mut store = ParamStore::<f32>::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 8, &mut rng(9)).unwrap();
        for len in [1usize, 5, 50] {
            let mut g = Graph::new();
            let xs: Vec<Var> = (0..len).map(|_| g.constant(Tensor::full(&[2, 3], 0.1))).collect();
            let out = enc.encode(&mut g, &store, &xs, &[len, len]).unwrap();
            assert_eq!(out.len(), len);
            assert!(out.iter().all(|&o| g.shape(o) == [2, 8]));
        }
        assert!(BiLstmEncoder::new(&mut store, "odd", 3, 7, &mut rng(9)).is_err());
        let mut g = Graph::<f32>::new();
        assert_eq!(enc.encode(&mut g, &store, &[], &[]), Err(Error::Empty("bilstm_encode")));
    }

    #[test]
    fn bilstm_padding_does_not_change_valid_outputs() {
        let mut store = ParamStore::<f64>::new();
        let enc = BiLstmEncoder::new(&mut store, "enc", 2, 4, &mut rng(10)).unwrap();
        let seq = random(&[3, 2], 11);
        let mut g = Graph::new();
        let xs = inputs(&mut g, &seq);
        let alone = enc.encode(&mut g, &store, &xs, &[3]).unwrap();
        // same sentence padded to 5 with garbage
        let mut padded = xs.clone();
        padded.push(g.constant(Tensor::full(&[1, 2], 9.0)));
        padded.push(g.constant(Tensor::full(&[1, 2], -9.0)));
        let out = enc.encode(&mut g, &store, &padded, &[3]).unwrap();
        for t in 0..3 {
            assert_eq!(g.value(out[t]), g.value(alone[t]));
        }
    }

    fn single_memory(g: &mut Graph<f64>, cols: &[&[f64]]) -> Var {
        let k = cols[0].len();
        let data: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        g.constant(Tensor::new(&[1, cols.len(), k], data).unwrap())
    }

    #[test]
    fn attention_over_one_column_returns_it() {
        let mut store = ParamStore::<f64>::new();
        let att = AdditiveAttention::new(&mut store, "att", 2, 3, 4, &mut rng(12));
        let mut g = Graph::new();
        let mem = single_memory(&mut g, &[&[0.5, -1.0, 2.0]]);
        let mem = att.memory(&mut g, &store, mem, &[1]).unwrap();
        let q = g.constant(random(&[1, 2], 13));
        let (ctx, w) = att.attend(&mut g, &store, q, &mem).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_score_vector_gives_uniform_weights() {
        let mut store = ParamStore::<f64>::new();
        let att = AdditiveAttention::new(&mut store, "att", 2, 2, 3, &mut rng(14));
        store.set_value(att.score, Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let mem = single_memory(&mut g, &[&[1.0, 0.0], &[3.0, 4.0], &[-1.0, 2.0]]);
        let mem = att.memory(&mut g, &store, mem, &[3]).unwrap();
        let q = g.constant(random(&[1, 2], 15));
        let (ctx, w) = att.attend(&mut g, &store, q, &mem).unwrap();
        assert!(g.value(w).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let c = g.value(ctx).data();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_set_scores_give_closed_form_weights() {
        // att_dim 1, W_q = 0, W_k reads the first key coordinate and
        // v = 2 ln 3, so keys 0 and atanh(1/2) score exactly [0, ln 3]
        let mut store = ParamStore::<f64>::new();
        let att = AdditiveAttention::new(&mut store, "att", 1, 2, 1, &mut rng(16));
        store.set_value(att.query_weights, Tensor::zeros(&[1, 1])).unwrap();
        store.set_value(att.key_weights, Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        store.set_value(att.score, Tensor::from_f64(&[1], &[2.0 * 3f64.ln()]).unwrap()).unwrap();
        let mut g = Graph::new();
        let mem = single_memory(&mut g, &[&[0.0, 7.0], &[0.5f64.atanh(), -3.0]]);
        let mem = att.memory(&mut g, &store, mem, &[2]).unwrap();
        let q = g.constant(Tensor::from_f64(&[1, 1], &[0.3]).unwrap());
        let (_, w) = att.attend(&mut g, &store, q, &mem).unwrap();
        let w = g.value(w).data();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12, "{w:?}");
    }

    #[test]
    fn affine_examples() {
        let mut store = ParamStore::<f64>::new();
        let p = AffineProjection::new(&mut store, "aff", 2, 2, &mut rng(17));
        store.set_value(p.weights, Tensor::identity(2)).unwrap();
        store.set_value(p.bias, Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[3.0, -4.0]).unwrap());
        let y = p.apply(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -4.0]);
        store.set_value(p.weights, Tensor::zeros(&[2, 2])).unwrap();
        store.set_value(p.bias, Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[3.0, -4.0]).unwrap());
        let y = p.apply(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        // [[1, 2], [3, 4]]·[5, 6] + [0.5, -0.5] = [17.5, 38.5]
        store.set_value(p.weights, Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap()).unwrap();
        store.set_value(p.bias, Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[5.0, 6.0]).unwrap());
        let y = p.apply(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[17.5, 38.5]);
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(p.apply(&mut g, &store, bad).is_err());
    }

    #[test]
    fn layers_pass_grad_check() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(18);
        let emb = EmbeddingTable::new(&mut store, "emb", 5, 3, &mut r);
        let enc = BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut r).unwrap();
        let att = AdditiveAttention::new(&mut store, "att", 3, 4, 3, &mut r);
        let cell = LstmCell::new(&mut store, "cell", 4, 3, &mut r);
        let aff = AffineProjection::new(&mut store, "aff", 7, 2, &mut r);
        rescale(&mut store, 19);
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            // two sentences of lengths 3 and 2, position-major ids
            let ids = [[1usize, 4], [2, 0], [3, 0]];
            let xs: Vec<Var> = ids.iter().map(|p| emb.lookup(g, s, p)).collect::<Result<_>>()?;
            let outs = enc.encode(g, s, &xs, &[3, 2])?;
            let mem = g.stack(&outs)?;
            let mem = att.memory(g, s, mem, &[3, 2])?;
            let mut state = cell.zero_state(g, 2);
            let mut total = None;
            for step in 0..2 {
                let (ctx, _) = att.attend(g, s, state.h, &mem)?;
                state = cell.step(g, s, ctx, state)?;
                let feat = g.concat(state.h, ctx, 1)?;
                let y = aff.apply(g, s, feat)?;
                let l = projected_sum(g, y, 20 + step)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok(total.unwrap())
        };
        for check in grad_check_params(&store, loss, 1e-5, |_| true).unwrap() {
            assert!(check.max_relative_error < 1e-5, "{check:?}");
        }
    }

    proptest! {
        #[test]
        fn attention_weights_sum_to_one(seed in 0u64..10_000, len in 1usize..8, batch in 1usize..4) {
            let mut store = ParamStore::<f32>::new();
            let att = AdditiveAttention::new(&mut store, "att", 3, 4, 5, &mut rng(seed));
            let mut g = Graph::new();
            let mem = g.constant(random(&[batch, len, 4], seed + 1).cast());
            let lengths: Vec<usize> = (0..batch).map(|b| 1 + (b + seed as usize) % len).collect();
            let mem = att.memory(&mut g, &store, mem, &lengths).unwrap();
            let q = g.constant(random(&[batch, 3], seed + 2).cast());
            let (_, w) = att.attend(&mut g, &store, q, &mem).unwrap();
            for b in 0..batch {
                let total: f64 = g.value(w).row(b).iter().map(|&v| v as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}
