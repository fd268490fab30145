//! Greedy and beam search, and the text-to-text pipelines.
//!
//! PAD and BOS are never proposed as output tokens. A hypothesis finishes by
//! emitting EOS or by reaching the length limit; its length counts every
//! predicted token, EOS included.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::bpe::{Tokenizer, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderMemory, DecoderState, InterlinguaOutput, MultilingualModel};
use crate::real::Real;
use crate::tensor::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Output length limit; `None` means twice the source length plus five.
    pub max_len: Option<usize>,
    /// Length-normalisation exponent in `[0, 1]`.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            max_len: None,
            alpha: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidArgument("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(alloc::format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        if self.max_len == Some(0) {
            return Err(Error::InvalidArgument("maximum output length must be at least 1".into()));
        }
        Ok(())
    }

    /// The output limit for a source of `source_pieces` word pieces.
    pub fn limit(&self, source_pieces: usize) -> usize {
        self.max_len.unwrap_or(2 * source_pieces + 5)
    }
}

/// A finished or partial output.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T: Real = f32> {
    /// Predicted tokens, ending in EOS when the decoder emitted it.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: DecoderState<T>,
    pub finished: bool,
}

impl<T: Real> Hypothesis<T> {
    /// Tokens without the closing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    /// `logprob / len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        normalized(self.logprob, self.tokens.len(), alpha)
    }
}

pub fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / libm::pow(len.max(1) as f64, alpha)
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let z = log_sum_exp(row);
    row.iter().map(|&v| v.to_f64() - z).collect()
}

fn candidate(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Argmax decoding; ties go to the smaller id.
pub fn greedy_decode<T: Real>(
    model: &MultilingualModel<T>,
    memory: &DecoderMemory<T>,
    max_len: usize,
) -> Result<Hypothesis<T>> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.initial_decoder_state(1),
        finished: false,
    };
    let mut prev = BOS;
    while hyp.tokens.len() < max_len {
        let (logits, state) = model.decode_step(memory, &[prev], &hyp.state)?;
        let lp = log_softmax_row(logits.data());
        let (best, &score) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| candidate(*t))
            .fold(None, |acc: Option<(usize, &f64)>, (t, s)| match acc {
                Some((_, b)) if *b >= *s => acc,
                _ => Some((t, s)),
            })
            .ok_or(Error::Empty("greedy_decode"))?;
        hyp.tokens.push(best);
        hyp.logprob += score;
        hyp.state = state;
        prev = best;
        if best == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

/// Beam search. Each step expands every live hypothesis and keeps the
/// `beam_width` best expansions by log-probability; expansions ending in EOS
/// (or reaching `max_len`) leave the beam as finished. The winner maximises
/// `logprob / len^alpha`, ties going to the shorter output and then to the
/// lexicographically smaller one.
pub fn beam_search<T: Real>(
    model: &MultilingualModel<T>,
    memory: &DecoderMemory<T>,
    config: &DecodeConfig,
    max_len: usize,
) -> Result<Hypothesis<T>> {
    config.validate()?;
    let mut live: Vec<Hypothesis<T>> = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.initial_decoder_state(1),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<T>> = Vec::new();
    while !live.is_empty() {
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let state = DecoderState {
            h: stack_rows(live.iter().map(|h| &h.state.h))?,
            c: stack_rows(live.iter().map(|h| &h.state.c))?,
        };
        let (logits, next) = model.decode_step(memory, &prev, &state)?;
        let (_, v) = logits.dims2();
        let mut expansions: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (r, h) in live.iter().enumerate() {
            let lp = log_softmax_row(logits.row(r));
            for (t, s) in lp.into_iter().enumerate().take(v) {
                if candidate(t) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    expansions.push((h.logprob + s, tokens, r));
                }
            }
        }
        // higher log-probability first, then lexicographically smaller tokens
        expansions.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1)));
        expansions.truncate(config.beam_width);
        let mut survivors = Vec::new();
        for (logprob, tokens, r) in expansions {
            let done = tokens.last() == Some(&EOS) || tokens.len() >= max_len;
            let hyp = Hypothesis {
                state: next.select(&[r]),
                finished: done,
                tokens,
                logprob,
            };
            if done {
                finished.push(hyp);
            } else {
                survivors.push(hyp);
            }
        }
        live = survivors;
    }
    finished
        .into_iter()
        .min_by(|a, b| {
            b.score(config.alpha)
                .partial_cmp(&a.score(config.alpha))
                .unwrap_or(Ordering::Equal)
                .then(a.tokens.len().cmp(&b.tokens.len()))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or(Error::Empty("beam_search"))
}

fn stack_rows<'a, T: Real + 'a>(rows: impl Iterator<Item = &'a crate::Tensor<T>>) -> Result<crate::Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut width = 0;
    for r in rows {
        width = r.dims2().1;
        data.extend_from_slice(r.data());
        n += 1;
    }
    crate::Tensor::new(&[n, width], data)
}

/// Result of a text-to-text call.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub text: String,
    /// Output token ids without BOS or EOS.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    /// The source exceeded the model's length limit and was cut.
    pub truncated: bool,
    /// Number of full decoder runs performed.
    pub decode_passes: usize,
    /// Output of the first hop, for pivot translation.
    pub pivot_text: Option<String>,
}

/// Decodes straight from the interlingua of already-framed source ids.
pub fn translate_ids<T: Real>(
    model: &MultilingualModel<T>,
    src: &str,
    tgt: &str,
    ids: &[usize],
    config: &DecodeConfig,
) -> Result<(Hypothesis<T>, bool)> {
    config.validate()?;
    let max = model.config.max_source_len;
    let truncated = ids.len() > max;
    let mut ids = ids.to_vec();
    if truncated {
        ids.truncate(max - 1);
        ids.push(EOS);
    }
    let interlingua: InterlinguaOutput<T> = model.embed(src, &ids)?;
    let memory = model.decoder_memory(tgt, &interlingua)?;
    let pieces = ids.iter().filter(|&&t| t != BOS && t != EOS).count();
    let limit = config.limit(pieces);
    let hyp = if config.beam_width == 1 {
        greedy_decode(model, &memory, limit)?
    } else {
        beam_search(model, &memory, config, limit)?
    };
    Ok((hyp, truncated))
}

fn tokenizer<'a, T: Real>(model: &MultilingualModel<T>, tokenizers: &'a [Tokenizer], lang: &str) -> Result<&'a Tokenizer> {
    let i = model.language_index(lang)?;
    tokenizers
        .get(i)
        .ok_or_else(|| Error::Config(alloc::format!("no tokenizer for language `{lang}`")))
}

/// Encode, build the interlingua, search, detokenize. Any `(src, tgt)` pair
/// works, whether or not it was trained.
pub fn translate<T: Real>(
    model: &MultilingualModel<T>,
    tokenizers: &[Tokenizer],
    src: &str,
    tgt: &str,
    text: &str,
    config: &DecodeConfig,
) -> Result<Translation> {
    let ids = tokenizer(model, tokenizers, src)?.encode(text);
    let out_tok = tokenizer(model, tokenizers, tgt)?;
    if ids.len() <= 2 {
        return Ok(Translation {
            text: String::new(),
            tokens: Vec::new(),
            logprob: 0.0,
            score: 0.0,
            truncated: false,
            decode_passes: 0,
            pivot_text: None,
        });
    }
    let (hyp, truncated) = translate_ids(model, src, tgt, &ids, config)?;
    Ok(Translation {
        text: out_tok.decode(hyp.content())?,
        tokens: hyp.content().to_vec(),
        logprob: hyp.logprob,
        score: hyp.score(config.alpha),
        truncated,
        decode_passes: 1,
        pivot_text: None,
    })
}

/// `src → pivot`, then `pivot → tgt`.
pub fn pivot_translate<T: Real>(
    model: &MultilingualModel<T>,
    tokenizers: &[Tokenizer],
    src: &str,
    pivot: &str,
    tgt: &str,
    text: &str,
    config: &DecodeConfig,
) -> Result<Translation> {
    model.language_index(tgt)?;
    let first = translate(model, tokenizers, src, pivot, text, config)?;
    let second = translate(model, tokenizers, pivot, tgt, &first.text, config)?;
    Ok(Translation {
        truncated: first.truncated || second.truncated,
        decode_passes: 2,
        pivot_text: Some(first.text),
        ..second
    })
}
