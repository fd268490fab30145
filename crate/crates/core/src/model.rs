//! The multilingual encoder / interlingua / decoder network.
//!
//! `p(y_i | y_<i, x) = Dec_t(Inter(Enc_s(Emb_s(x))), y_{i-1}, h_{i-1})`: the
//! source sentence reaches a decoder only through the interlingua output `I`,
//! which always has `interlingua_length` positions. There are no
//! language-indicator tokens and no parameters tied to a language pair.
//!
//! Matrices that are written per column elsewhere (one column per position)
//! are stored here with one row per position: `E` is `[L_x × e^s]` and `I` is
//! `[L_i × e^i]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::bpe::PAD;
use crate::error::{Error, Result};
use crate::nn::{AdditiveAttention, AffineProjection, AttentionMemory, BiLstmEncoder, EmbeddingTable, LstmCell, LstmState};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub languages: Vec<String>,
    pub hub: String,
    /// Vocabulary size of each language, in `languages` order.
    pub vocab_sizes: Vec<usize>,
    pub source_embedding: usize,
    pub target_embedding: usize,
    /// Width of the bidirectional encoder output; each direction gets half.
    pub encoder_hidden: usize,
    pub encoder_depth: usize,
    pub interlingua_hidden: usize,
    /// Width of each interlingua output position.
    pub interlingua_output: usize,
    /// Number of interlingua output positions, independent of the input.
    pub interlingua_length: usize,
    pub decoder_hidden: usize,
    pub max_source_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small dimensions for CPU experiments.
    pub fn desk(languages: &[&str], hub: &str, vocab_sizes: &[usize]) -> Self {
        Self {
            languages: languages.iter().map(|s| String::from(*s)).collect(),
            hub: String::from(hub),
            vocab_sizes: vocab_sizes.to_vec(),
            source_embedding: 64,
            target_embedding: 64,
            encoder_hidden: 64,
            encoder_depth: 1,
            interlingua_hidden: 64,
            interlingua_output: 64,
            interlingua_length: 16,
            decoder_hidden: 64,
            max_source_len: 16,
            seed: 1,
        }
    }

    /// The large configuration: 256-wide embeddings, 512-wide recurrent
    /// layers and 50 interlingua positions.
    pub fn paper_scale(languages: &[&str], hub: &str, vocab_sizes: &[usize]) -> Self {
        Self {
            source_embedding: 256,
            target_embedding: 256,
            encoder_hidden: 512,
            interlingua_hidden: 512,
            interlingua_output: 512,
            interlingua_length: 50,
            decoder_hidden: 512,
            max_source_len: 50,
            ..Self::desk(languages, hub, vocab_sizes)
        }
    }

    /// Width of the decoder feature `[h^t, c^t]` fed to the output projection.
    pub fn output_dim(&self) -> usize {
        self.decoder_hidden + self.interlingua_output
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.languages.is_empty() {
            return fail("no languages".into());
        }
        if self.vocab_sizes.len() != self.languages.len() {
            return fail(format!(
                "{} vocabulary sizes for {} languages",
                self.vocab_sizes.len(),
                self.languages.len()
            ));
        }
        for (i, l) in self.languages.iter().enumerate() {
            if self.languages[..i].contains(l) {
                return fail(format!("language `{l}` listed twice"));
            }
        }
        if !self.languages.contains(&self.hub) {
            return fail(format!("hub language `{}` is not in the language list", self.hub));
        }
        if self.vocab_sizes.iter().any(|&v| v <= crate::bpe::NUM_SPECIAL) {
            return fail("every vocabulary needs entries beyond the special tokens".into());
        }
        if self.interlingua_length == 0 {
            return fail("interlingua length must be at least 1".into());
        }
        if self.max_source_len == 0 || self.max_source_len > self.interlingua_length {
            return fail(format!(
                "maximum source length {} must be between 1 and the interlingua length {}",
                self.max_source_len, self.interlingua_length
            ));
        }
        if self.encoder_hidden == 0 || self.encoder_hidden % 2 != 0 {
            return fail(format!("encoder hidden size {} must be even", self.encoder_hidden));
        }
        let dims = [
            self.source_embedding,
            self.target_embedding,
            self.encoder_depth,
            self.interlingua_hidden,
            self.interlingua_output,
            self.decoder_hidden,
        ];
        if dims.contains(&0) {
            return fail("layer sizes must be positive".into());
        }
        Ok(())
    }

    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoder {
    pub embedding: EmbeddingTable,
    pub layers: Vec<BiLstmEncoder>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interlingua {
    pub cell: LstmCell,
    pub attention: AdditiveAttention,
    pub projection: AffineProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageDecoder {
    pub embedding: EmbeddingTable,
    pub cell: LstmCell,
    pub attention: AdditiveAttention,
    pub projection: AffineProjection,
}

/// Fixed-length interlingual representation of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct InterlinguaOutput<T: Real = f32> {
    /// `[interlingua_length × interlingua_output]`
    pub matrix: Tensor<T>,
}

impl<T: Real> InterlinguaOutput<T> {
    pub fn positions(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Mean over the interlingua positions.
    pub fn mean_pool(&self) -> Vec<T> {
        let (rows, cols) = self.matrix.dims2();
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for (a, v) in acc.iter_mut().zip(self.matrix.row(r)) {
                *a += v.to_f64();
            }
        }
        acc.into_iter().map(|a| T::from_f64(a / rows as f64)).collect()
    }
}

/// Decoder state for a batch of partial hypotheses, `[B × decoder_hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T: Real = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> DecoderState<T> {
    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    /// Rows `rows` of this state, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor<T>| {
            let (_, c) = t.dims2();
            let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            Tensor::new(&[rows.len(), c], data).expect("row selection")
        };
        Self {
            h: pick(&self.h),
            c: pick(&self.c),
        }
    }
}

/// Interlingua output prepared for a decoder: values and attention keys,
/// computed once per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMemory<T: Real = f32> {
    pub language: usize,
    /// `[L_i × e^i]`
    pub values: Tensor<T>,
    /// `[L_i × att_dim]`
    pub keys: Tensor<T>,
}

/// One teacher-forced decoder step over a batch.
#[derive(Debug, Clone)]
pub struct StepFeatures {
    /// `[B × output_dim]` decoder features `[h^t, c^t]`.
    pub features: Var,
    /// Gold next token per row; `None` for rows already past their end.
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilingualModel<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoders: Vec<LanguageEncoder>,
    pub interlingua: Interlingua,
    pub decoders: Vec<LanguageDecoder>,
}

impl<T: Real> MultilingualModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = &config;
        let mut encoders = Vec::new();
        for (lang, &vocab) in c.languages.iter().zip(&c.vocab_sizes) {
            let embedding = EmbeddingTable::new(&mut params, &format!("enc.{lang}.emb"), vocab, c.source_embedding, &mut rng);
            let mut layers = Vec::new();
            let mut input = c.source_embedding;
            for depth in 0..c.encoder_depth {
                layers.push(BiLstmEncoder::new(
                    &mut params,
                    &format!("enc.{lang}.l{depth}"),
                    input,
                    c.encoder_hidden,
                    &mut rng,
                )?);
                input = c.encoder_hidden;
            }
            encoders.push(LanguageEncoder { embedding, layers });
        }
        let interlingua = Interlingua {
            cell: LstmCell::new(&mut params, "inter.lstm", c.encoder_hidden, c.interlingua_hidden, &mut rng),
            attention: AdditiveAttention::new(
                &mut params,
                "inter.att",
                c.interlingua_hidden,
                c.encoder_hidden,
                c.interlingua_hidden,
                &mut rng,
            ),
            projection: AffineProjection::new(
                &mut params,
                "inter.proj",
                c.interlingua_hidden + c.encoder_hidden,
                c.interlingua_output,
                &mut rng,
            ),
        };
        let mut decoders = Vec::new();
        for (lang, &vocab) in c.languages.iter().zip(&c.vocab_sizes) {
            decoders.push(LanguageDecoder {
                embedding: EmbeddingTable::new(&mut params, &format!("dec.{lang}.emb"), vocab, c.target_embedding, &mut rng),
                cell: LstmCell::new(
                    &mut params,
                    &format!("dec.{lang}.lstm"),
                    c.target_embedding + c.interlingua_output,
                    c.decoder_hidden,
                    &mut rng,
                ),
                attention: AdditiveAttention::new(
                    &mut params,
                    &format!("dec.{lang}.att"),
                    c.decoder_hidden,
                    c.interlingua_output,
                    c.decoder_hidden,
                    &mut rng,
                ),
                projection: AffineProjection::new(&mut params, &format!("dec.{lang}.out"), c.output_dim(), vocab, &mut rng),
            });
        }
        Ok(Self {
            config,
            params,
            encoders,
            interlingua,
            decoders,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> MultilingualModel<U> {
        MultilingualModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            interlingua: self.interlingua.clone(),
            decoders: self.decoders.clone(),
        }
    }

    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.config.language_index(lang)
    }

    pub fn vocab_size(&self, lang: usize) -> usize {
        self.config.vocab_sizes[lang]
    }

    /// Parameter-name prefixes of the modules a `(source, target)` batch uses.
    pub fn route_prefixes(&self, src: usize, tgt: usize) -> [String; 3] {
        [
            format!("enc.{}.", self.config.languages[src]),
            String::from("inter."),
            format!("dec.{}.", self.config.languages[tgt]),
        ]
    }

    fn check_lang(&self, lang: usize) -> Result<()> {
        if lang >= self.config.languages.len() {
            return Err(Error::UnknownLanguage(format!("#{lang}")));
        }
        Ok(())
    }

    /// Encodes a padded batch of source sentences into a `[B × L × e^s]`
    /// memory and the per-row lengths.
    pub fn encode_graph(&self, g: &mut Graph<T>, lang: usize, sentences: &[&[usize]]) -> Result<(Var, Vec<usize>)> {
        self.check_lang(lang)?;
        if sentences.is_empty() {
            return Err(Error::Empty("encode_source"));
        }
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
        let max_len = *lengths.iter().max().unwrap();
        if lengths.contains(&0) {
            return Err(Error::Empty("encode_source"));
        }
        if max_len > self.config.max_source_len {
            return Err(Error::TooLong {
                len: max_len,
                max: self.config.max_source_len,
            });
        }
        let enc = &self.encoders[lang];
        let mut xs = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let ids: Vec<usize> = sentences.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            xs.push(enc.embedding.lookup(g, &self.params, &ids)?);
        }
        for layer in &enc.layers {
            xs = layer.encode(g, &self.params, &xs, &lengths)?;
        }
        Ok((g.stack(&xs)?, lengths))
    }

    /// Runs the interlingua for exactly `interlingua_length` steps over an
    /// encoder memory, returning `[B × L_i × e^i]`.
    pub fn interlingua_graph(&self, g: &mut Graph<T>, memory: Var, lengths: &[usize]) -> Result<Var> {
        let inter = &self.interlingua;
        let mem = inter.attention.memory(g, &self.params, memory, lengths)?;
        let mut state = inter.cell.zero_state(g, lengths.len());
        let mut columns = Vec::with_capacity(self.config.interlingua_length);
        for _ in 0..self.config.interlingua_length {
            let (context, _) = inter.attention.attend(g, &self.params, state.h, &mem)?;
            state = inter.cell.step(g, &self.params, context, state)?;
            let joined = g.concat(state.h, context, 1)?;
            columns.push(inter.projection.apply(g, &self.params, joined)?);
        }
        g.stack(&columns)
    }

    pub fn decoder_memory_graph(&self, g: &mut Graph<T>, lang: usize, interlingua: Var) -> Result<AttentionMemory> {
        self.check_lang(lang)?;
        let s = g.shape(interlingua).to_vec();
        let lengths = vec![s[1]; s[0]];
        self.decoders[lang].attention.memory(g, &self.params, interlingua, &lengths)
    }

    /// One decoder step: attend over the interlingua, feed
    /// `[emb(prev), context]` to the LSTM and return the features
    /// `[h, context]` with the new state.
    pub fn decoder_step_graph(
        &self,
        g: &mut Graph<T>,
        lang: usize,
        memory: &AttentionMemory,
        prev: &[usize],
        state: LstmState,
    ) -> Result<(Var, LstmState)> {
        let dec = &self.decoders[lang];
        let (context, _) = dec.attention.attend(g, &self.params, state.h, memory)?;
        let emb = dec.embedding.lookup(g, &self.params, prev)?;
        let input = g.concat(emb, context, 1)?;
        let state = dec.cell.step(g, &self.params, input, state)?;
        let features = g.concat(state.h, context, 1)?;
        Ok((features, state))
    }

    pub fn logits_graph(&self, g: &mut Graph<T>, lang: usize, features: Var) -> Result<Var> {
        self.decoders[lang].projection.apply(g, &self.params, features)
    }

    /// Teacher-forced decoder features for a batch: step `i` reads gold token
    /// `i` and predicts token `i + 1`. Target sentences are BOS/EOS framed.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<T>,
        src: usize,
        tgt: usize,
        sources: &[&[usize]],
        targets: &[&[usize]],
    ) -> Result<Vec<StepFeatures>> {
        self.check_lang(tgt)?;
        if sources.len() != targets.len() {
            return Err(Error::Shape {
                op: "teacher_forced",
                lhs: vec![sources.len()],
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|t| t.len() < 2) {
            return Err(Error::InvalidArgument("target sentences must be BOS/EOS framed".into()));
        }
        let (memory, lengths) = self.encode_graph(g, src, sources)?;
        let inter = self.interlingua_graph(g, memory, &lengths)?;
        let mem = self.decoder_memory_graph(g, tgt, inter)?;
        let steps = targets.iter().map(|t| t.len() - 1).max().unwrap_or(0);
        let mut state = self.decoders[tgt].cell.zero_state(g, targets.len());
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let prev: Vec<usize> = targets.iter().map(|t| t.get(i).copied().unwrap_or(PAD)).collect();
            let gold: Vec<Option<usize>> = targets.iter().map(|t| t.get(i + 1).copied()).collect();
            let (features, next) = self.decoder_step_graph(g, tgt, &mem, &prev, state)?;
            state = next;
            out.push(StepFeatures { features, targets: gold });
        }
        Ok(out)
    }

    /// Summed negative log-likelihood of the targets under teacher forcing,
    /// and the number of predicted tokens.
    pub fn nll_graph(
        &self,
        g: &mut Graph<T>,
        src: usize,
        tgt: usize,
        sources: &[&[usize]],
        targets: &[&[usize]],
    ) -> Result<(Var, usize)> {
        let steps = self.teacher_forced(g, src, tgt, sources, targets)?;
        let mut total: Option<Var> = None;
        let mut count = 0;
        for step in steps {
            count += step.targets.iter().flatten().count();
            let logits = self.logits_graph(g, tgt, step.features)?;
            let nll = g.cross_entropy(logits, &step.targets)?;
            total = Some(match total {
                Some(t) => g.add(t, nll)?,
                None => nll,
            });
        }
        Ok((total.expect("at least one step"), count))
    }

    // ---- tensor-level operations for single sentences -------------------

    /// Encoder output for one sentence, `[L_x × e^s]`.
    pub fn encode_source(&self, lang: &str, ids: &[usize]) -> Result<Tensor<T>> {
        let lang = self.language_index(lang)?;
        let mut g = Graph::inference();
        let (memory, _) = self.encode_graph(&mut g, lang, &[ids])?;
        let (l, e) = (ids.len(), self.config.encoder_hidden);
        g.value(memory).clone().reshape(&[l, e])
    }

    /// Interlingua output for one encoded sentence given as `[L_x × e^s]`.
    pub fn interlingua_encode(&self, encoded: &Tensor<T>) -> Result<InterlinguaOutput<T>> {
        let (l, e) = match encoded.shape() {
            [l, e] if *e == self.config.encoder_hidden && *l > 0 => (*l, *e),
            s => {
                return Err(Error::Shape {
                    op: "interlingua_encode",
                    lhs: s.to_vec(),
                    rhs: vec![self.config.encoder_hidden],
                })
            }
        };
        let mut g = Graph::inference();
        let memory = g.constant(encoded.clone().reshape(&[1, l, e])?);
        let inter = self.interlingua_graph(&mut g, memory, &[l])?;
        Ok(InterlinguaOutput {
            matrix: g
                .value(inter)
                .clone()
                .reshape(&[self.config.interlingua_length, self.config.interlingua_output])?,
        })
    }

    /// Source ids straight to the interlingua.
    pub fn embed(&self, lang: &str, ids: &[usize]) -> Result<InterlinguaOutput<T>> {
        let encoded = self.encode_source(lang, ids)?;
        self.interlingua_encode(&encoded)
    }

    /// Interlingua outputs for a batch of sentences in one language.
    pub fn embed_batch(&self, lang: usize, sentences: &[&[usize]]) -> Result<Vec<InterlinguaOutput<T>>> {
        let mut g = Graph::inference();
        let (memory, lengths) = self.encode_graph(&mut g, lang, sentences)?;
        let inter = self.interlingua_graph(&mut g, memory, &lengths)?;
        let (li, ei) = (self.config.interlingua_length, self.config.interlingua_output);
        let all = g.value(inter).data();
        Ok((0..sentences.len())
            .map(|b| InterlinguaOutput {
                matrix: Tensor::new(&[li, ei], all[b * li * ei..(b + 1) * li * ei].to_vec()).expect("slice size"),
            })
            .collect())
    }

    pub fn decoder_memory(&self, lang: &str, interlingua: &InterlinguaOutput<T>) -> Result<DecoderMemory<T>> {
        let lang = self.language_index(lang)?;
        let (li, ei) = interlingua.matrix.dims2();
        let mut g = Graph::inference();
        let v = g.constant(interlingua.matrix.clone().reshape(&[1, li, ei])?);
        let mem = self.decoder_memory_graph(&mut g, lang, v)?;
        let att = self.decoders[lang].attention.att_dim;
        Ok(DecoderMemory {
            language: lang,
            values: interlingua.matrix.clone(),
            keys: g.value(mem.keys).clone().reshape(&[li, att])?,
        })
    }

    pub fn initial_decoder_state(&self, batch: usize) -> DecoderState<T> {
        DecoderState {
            h: Tensor::zeros(&[batch, self.config.decoder_hidden]),
            c: Tensor::zeros(&[batch, self.config.decoder_hidden]),
        }
    }

    /// Advances `state.batch()` hypotheses that share one interlingua by one
    /// token each. Returns `[B × vocab]` logits and the new state.
    pub fn decode_step(
        &self,
        memory: &DecoderMemory<T>,
        prev: &[usize],
        state: &DecoderState<T>,
    ) -> Result<(Tensor<T>, DecoderState<T>)> {
        let b = state.batch();
        if prev.len() != b {
            return Err(Error::Shape {
                op: "decode_step",
                lhs: vec![prev.len()],
                rhs: vec![b],
            });
        }
        let (li, ei) = memory.values.dims2();
        let att = memory.keys.dims2().1;
        let tile = |t: &Tensor<T>, w: usize| {
            let mut data = Vec::with_capacity(b * t.numel());
            for _ in 0..b {
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[b, li, w], data).expect("tiled memory")
        };
        let mut g = Graph::inference();
        let mem = AttentionMemory {
            values: g.constant(tile(&memory.values, ei)),
            keys: g.constant(tile(&memory.keys, att)),
            lengths: vec![li; b],
        };
        let st = LstmState {
            h: g.constant(state.h.clone()),
            c: g.constant(state.c.clone()),
        };
        let (features, next) = self.decoder_step_graph(&mut g, memory.language, &mem, prev, st)?;
        let logits = self.logits_graph(&mut g, memory.language, features)?;
        Ok((
            g.value(logits).clone(),
            DecoderState {
                h: g.value(next.h).clone(),
                c: g.value(next.c).clone(),
            },
        ))
    }

    /// `Σ_i log p(y_i | y_<i, x)` under teacher forcing; both sentences are
    /// BOS/EOS framed.
    pub fn sentence_logprob(&self, src: &str, tgt: &str, x: &[usize], y: &[usize]) -> Result<f64> {
        let (s, t) = (self.language_index(src)?, self.language_index(tgt)?);
        let mut g = Graph::inference();
        let (nll, _) = self.nll_graph(&mut g, s, t, &[x], &[y])?;
        Ok(-g.scalar(nll))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{BOS, EOS};
    use crate::tensor::softmax;

    pub(crate) fn tiny(vocab: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            source_embedding: dim,
            target_embedding: dim,
            encoder_hidden: dim,
            interlingua_hidden: dim,
            interlingua_output: dim,
            decoder_hidden: dim,
            interlingua_length: 5,
            max_source_len: 5,
            ..ModelConfig::desk(&["en", "fr", "de"], "en", &[vocab, vocab, vocab])
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(7, 6).validate().is_ok());
        let mut c = tiny(7, 6);
        c.hub = "xx".into();
        assert!(c.validate().is_err());
        let mut c = tiny(7, 6);
        c.max_source_len = 6;
        assert!(c.validate().is_err());
        let mut c = tiny(7, 6);
        c.encoder_hidden = 5;
        assert!(c.validate().is_err());
        let mut c = tiny(7, 6);
        c.interlingua_length = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::paper_scale(&["en", "fr"], "en", &[30_000, 30_000]).validate().is_ok());
    }

    #[test]
    fn interlingua_length_is_fixed_for_every_source_length() {
        let mut c = tiny(9, 6);
        c.interlingua_length = 7;
        c.max_source_len = 7;
        let m = MultilingualModel::<f32>::new(c).unwrap();
        for len in 1..=7 {
            let ids: Vec<usize> = (0..len).map(|i| 4 + i % 5).collect();
            let e = m.encode_source("fr", &ids).unwrap();
            assert_eq!(e.shape(), &[len, 6]);
            let i = m.interlingua_encode(&e).unwrap();
            assert_eq!(i.matrix.shape(), &[7, 6]);
        }
        assert!(matches!(
            m.encode_source("fr", &[4; 8]),
            Err(Error::TooLong { len: 8, max: 7 })
        ));
        assert_eq!(m.encode_source("xx", &[4]), Err(Error::UnknownLanguage("xx".into())));
    }

    #[test]
    fn encoders_do_not_share_parameters() {
        let m = MultilingualModel::<f32>::new(tiny(9, 6)).unwrap();
        let ids = [1, 5, 6, 2];
        assert_ne!(m.encode_source("en", &ids).unwrap(), m.encode_source("fr", &ids).unwrap());
    }

    #[test]
    fn interlingua_is_deterministic_and_sees_e_as_a_set() {
        let m = MultilingualModel::<f64>::new(tiny(9, 6)).unwrap();
        let e = Tensor::<f64>::from_f64(
            &[3, 6],
            &[
                0.3, -0.2, 0.5, 0.1, 0.9, -0.7, -0.4, 0.8, 0.2, -0.6, 0.0, 0.3, 0.7, 0.1, -0.9, 0.4, -0.2, 0.6,
            ],
        )
        .unwrap();
        let a = m.interlingua_encode(&e).unwrap();
        assert_eq!(a, m.interlingua_encode(&e).unwrap());
        let mut rows = e.row(2).to_vec();
        rows.extend_from_slice(e.row(0));
        rows.extend_from_slice(e.row(1));
        let permuted = Tensor::new(&[3, 6], rows).unwrap();
        let b = m.interlingua_encode(&permuted).unwrap();
        let diff: f64 = a
            .matrix
            .data()
            .iter()
            .zip(b.matrix.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        // word order reaches the interlingua only through the encoder states
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn decode_step_produces_a_distribution_from_the_interlingua_alone() {
        let m = MultilingualModel::<f32>::new(tiny(11, 6)).unwrap();
        let i = m.embed("en", &[BOS, 5, 6, EOS]).unwrap();
        let mem = m.decoder_memory("de", &i).unwrap();
        let s0 = m.initial_decoder_state(1);
        let (logits, s1) = m.decode_step(&mem, &[BOS], &s0).unwrap();
        assert_eq!(logits.shape(), &[1, 11]);
        let p = softmax(logits.data()).unwrap();
        let total: f64 = p.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
        // the decoder only ever sees I: a copy of I decodes bit-identically
        let copy = InterlinguaOutput { matrix: i.matrix.clone() };
        let mem2 = m.decoder_memory("de", &copy).unwrap();
        let (logits2, s2) = m.decode_step(&mem2, &[BOS], &s0).unwrap();
        assert_eq!(logits, logits2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn logprob_is_nonpositive_and_next_token_probabilities_sum_to_one() {
        let m = MultilingualModel::<f32>::new(tiny(7, 6)).unwrap();
        let x = [BOS, 4, 5, EOS];
        let lp = m.sentence_logprob("en", "fr", &x, &[BOS, 6, EOS]).unwrap();
        assert!(lp <= 0.0);
        let total: f64 = (0..7)
            .map(|tok| libm::exp(m.sentence_logprob("en", "fr", &x, &[BOS, tok]).unwrap()))
            .sum();
        assert!((total - 1.0).abs() < 1e-5, "{total}");
    }

    #[test]
    fn logprob_matches_step_by_step_recomputation() {
        // vocab 5, dims 4
        let mut c = tiny(5, 4);
        c.languages.truncate(2);
        c.vocab_sizes.truncate(2);
        let m = MultilingualModel::<f64>::new(c).unwrap();
        let (x, y) = ([BOS, 4, 4, EOS], [BOS, 4, 3, EOS]);
        let i = m.embed("en", &x).unwrap();
        let mem = m.decoder_memory("fr", &i).unwrap();
        let mut state = m.initial_decoder_state(1);
        let mut expect = 0.0;
        for w in y.windows(2) {
            let (logits, next) = m.decode_step(&mem, &[w[0]], &state).unwrap();
            expect += softmax(logits.data()).unwrap()[w[1]].ln();
            state = next;
        }
        let got = m.sentence_logprob("en", "fr", &x, &y).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn parameter_count_is_linear_in_languages() {
        let count = |n: usize| {
            let names = ["a", "b", "c", "d", "e"];
            let c = ModelConfig {
                languages: names[..n].iter().map(|s| String::from(*s)).collect(),
                vocab_sizes: vec![13; n],
                hub: "a".into(),
                ..tiny(13, 6)
            };
            let m = MultilingualModel::<f32>::new(c).unwrap();
            let enc = m.params.count_prefix("enc.a.");
            let dec = m.params.count_prefix("dec.a.");
            let inter = m.params.count_prefix("inter.");
            assert_eq!(m.params.count(), n * (enc + dec) + inter);
            m.params.count()
        };
        let (c2, c3, c4) = (count(2), count(3), count(4));
        assert_eq!(c3 - c2, c4 - c3);
    }

    #[test]
    fn every_parameter_is_per_language_or_shared() {
        let m = MultilingualModel::<f32>::new(tiny(7, 6)).unwrap();
        for name in m.params.names() {
            let ok = name.starts_with("inter.")
                || m.config
                    .languages
                    .iter()
                    .any(|l| name.starts_with(&format!("enc.{l}.")) || name.starts_with(&format!("dec.{l}.")));
            assert!(ok, "{name}");
        }
    }

    #[test]
    fn untrained_pairs_still_score_finitely() {
        let m = MultilingualModel::<f32>::new(tiny(7, 6)).unwrap();
        for s in ["en", "fr", "de"] {
            for t in ["en", "fr", "de"] {
                let lp = m.sentence_logprob(s, t, &[BOS, 4, EOS], &[BOS, 5, 6, EOS]).unwrap();
                assert!(lp.is_finite() && lp < 0.0);
            }
        }
    }
}
