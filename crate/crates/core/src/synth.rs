//! Deterministic multi-parallel "cipher language" corpora.
//!
//! Every language renders the same base sentences (random sequences over a
//! shared vocabulary of `V` ids) through its own token bijection, optionally
//! reversing word order. Language 0 is the hub: it is paired with every
//! spoke in training, and spokes are never paired with each other, so any
//! spoke-to-spoke pair is zero-shot.
//!
//! Each spoke's training pairs come from its own slice of base sentences, and
//! a held-out test slice is rendered in every language.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const MIN_SENTENCE_LEN: usize = 3;
pub const MAX_SENTENCE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherLanguage {
    pub name: String,
    /// `permutation[base] = surface id`; a bijection on `0..V`.
    pub permutation: Vec<usize>,
    pub reversed: bool,
}

impl CipherLanguage {
    pub fn word(&self, base: usize) -> String {
        format!("{}{}", self.name, self.permutation[base])
    }

    pub fn render(&self, sentence: &[usize]) -> String {
        let mut words: Vec<String> = sentence.iter().map(|&t| self.word(t)).collect();
        if self.reversed {
            words.reverse();
        }
        words.join(" ")
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        let mut inverse = vec![0; self.permutation.len()];
        for (base, &surface) in self.permutation.iter().enumerate() {
            inverse[surface] = base;
        }
        let mut out = text
            .split_whitespace()
            .enumerate()
            .map(|(position, w)| {
                w.strip_prefix(self.name.as_str())
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n < inverse.len())
                    .map(|n| inverse[n])
                    .ok_or_else(|| Error::InvalidArgument(format!("word {position} `{w}` is not in language {}", self.name)))
            })
            .collect::<Result<Vec<usize>>>()?;
        if self.reversed {
            out.reverse();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub vocab: usize,
    /// Training sentences per hub-spoke pair.
    pub train_per_pair: usize,
    /// Held-out sentences rendered in every language.
    pub test_sentences: usize,
    pub languages: Vec<String>,
    /// Word-order reversal per language; empty means none reversed.
    pub reversed: Vec<bool>,
}

impl SynthConfig {
    pub fn new(seed: u64, vocab: usize, train_per_pair: usize, languages: &[&str]) -> Self {
        SynthConfig {
            seed,
            vocab,
            train_per_pair,
            test_sentences: 200,
            languages: languages.iter().map(|s| s.to_string()).collect(),
            reversed: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 10 {
            return bad(format!("synthetic vocabulary must be at least 10, got {}", self.vocab));
        }
        if self.languages.len() < 2 {
            return bad("at least two languages are required".into());
        }
        if self.train_per_pair == 0 || self.test_sentences == 0 {
            return bad("train and test sizes must be positive".into());
        }
        let unique: BTreeSet<&str> = self.languages.iter().map(String::as_str).collect();
        if unique.len() != self.languages.len() {
            return bad("language names must be distinct".into());
        }
        for name in &self.languages {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphabetic()) {
                return bad(format!("language name `{name}` must be non-empty ASCII letters"));
            }
        }
        // a name that prefixes another would make words ambiguous
        for a in &self.languages {
            for b in &self.languages {
                if a != b && b.starts_with(a.as_str()) {
                    return bad(format!("language name `{a}` is a prefix of `{b}`"));
                }
            }
        }
        if !self.reversed.is_empty() && self.reversed.len() != self.languages.len() {
            return bad("one reversal flag per language".into());
        }
        Ok(())
    }
}

/// One side-by-side parallel file pair, aligned by line.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelText {
    pub src: String,
    pub tgt: String,
    pub src_lines: Vec<String>,
    pub tgt_lines: Vec<String>,
    /// Base sentence id of each line.
    pub base_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub languages: Vec<CipherLanguage>,
    pub base: Vec<Vec<usize>>,
    /// Base ids of the training sentences of each spoke (index 0, the hub,
    /// is empty).
    pub train_ids: Vec<Vec<usize>>,
    pub test_ids: Vec<usize>,
}

/// Builds a corpus; identical configurations give identical corpora.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.languages.len();
    let languages: Vec<CipherLanguage> = config
        .languages
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut permutation: Vec<usize> = (0..config.vocab).collect();
            if i > 0 {
                permutation.shuffle(&mut rng);
            }
            CipherLanguage {
                name: name.clone(),
                permutation,
                reversed: config.reversed.get(i).copied().unwrap_or(false),
            }
        })
        .collect();

    let total = config.train_per_pair * (n - 1) + config.test_sentences;
    let mut seen = BTreeSet::new();
    let mut base = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while base.len() < total {
        attempts += 1;
        if attempts > 20 * total + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {total} distinct sentences over a vocabulary of {}",
                config.vocab
            )));
        }
        let len = rng.gen_range(MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN);
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab)).collect();
        if seen.insert(s.clone()) {
            base.push(s);
        }
    }
    let mut train_ids = vec![Vec::new()];
    for spoke in 0..n - 1 {
        let start = spoke * config.train_per_pair;
        train_ids.push((start..start + config.train_per_pair).collect());
    }
    let test_ids = (total - config.test_sentences..total).collect();
    Ok(SynthCorpus {
        config: config.clone(),
        languages,
        base,
        train_ids,
        test_ids,
    })
}

impl SynthCorpus {
    pub fn language_names(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLanguage(name.to_string()))
    }

    pub fn render(&self, lang: usize, base_id: usize) -> String {
        self.languages[lang].render(&self.base[base_id])
    }

    fn parallel(&self, src: usize, tgt: usize, ids: &[usize]) -> ParallelText {
        ParallelText {
            src: self.languages[src].name.clone(),
            tgt: self.languages[tgt].name.clone(),
            src_lines: ids.iter().map(|&i| self.render(src, i)).collect(),
            tgt_lines: ids.iter().map(|&i| self.render(tgt, i)).collect(),
            base_ids: ids.to_vec(),
        }
    }

    /// Hub-spoke training files, one per spoke, hub on the source side.
    pub fn train_files(&self) -> Vec<ParallelText> {
        (1..self.languages.len())
            .map(|spoke| self.parallel(0, spoke, &self.train_ids[spoke]))
            .collect()
    }

    /// Held-out pair in any direction, including the zero-shot spoke pairs.
    pub fn test_pair(&self, src: usize, tgt: usize) -> ParallelText {
        self.parallel(src, tgt, &self.test_ids)
    }

    /// Every ordered pair of distinct languages on the test slice.
    pub fn test_files(&self) -> Vec<ParallelText> {
        let n = self.languages.len();
        let mut out = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if s != t {
                    out.push(self.test_pair(s, t));
                }
            }
        }
        out
    }

    /// Exact translation through the ciphers: parse in `src`, render in `tgt`.
    pub fn translate(&self, src: usize, tgt: usize, text: &str) -> Result<String> {
        let base = self.languages[src].parse(text)?;
        if base.iter().any(|&t| t >= self.config.vocab) {
            return Err(Error::InvalidArgument("base token out of range".into()));
        }
        Ok(self.languages[tgt].render(&base))
    }
}

/// Deterministic labelling rules over base sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Positive when the sentence contains any base id below `k`.
    ContainsClass { k: usize },
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule::ContainsClass { k: 6 }
    }
}

impl LabelRule {
    pub fn label(&self, sentence: &[usize]) -> bool {
        match *self {
            LabelRule::ContainsClass { k } => sentence.iter().any(|&t| t < k),
        }
    }
}

/// Label of every base sentence; renderings in any language share it.
pub fn label_synthetic(corpus: &SynthCorpus, rule: LabelRule) -> Vec<bool> {
    corpus.base.iter().map(|s| rule.label(s)).collect()
}
