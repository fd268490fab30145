//! Per-language byte-pair encoding.
//!
//! Words are split on whitespace and the end-of-word marker is attached to
//! the last character, so `"ab"` starts as `["a", "b</w>"]`. Merges never
//! cross word boundaries.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";
/// How an unknown piece is rendered by [`Vocabulary::decode`].
pub const UNK_PLACEHOLDER: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: BTreeMap<(String, String), usize>,
    pub target_vocab_size: usize,
}

/// Token/id maps. Ids below [`NUM_SPECIAL`] are reserved and never looked up
/// by text, so a BPE symbol that happens to spell `<s>` stays distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut out: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(END_OF_WORD);
    }
    out
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

/// Learns merges greedily: the most frequent adjacent pair wins, ties go to
/// the lexicographically smallest pair, and training stops at
/// `target_vocab_size` entries (specials included) or when no pair occurs
/// twice.
pub fn train_bpe<'a, I>(corpus: I, target_vocab_size: usize) -> Result<(BpeModel, Vocabulary)>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("train_bpe"));
    }
    let mut words: Vec<(Vec<String>, usize)> = counts.into_iter().map(|(w, n)| (word_symbols(w), n)).collect();
    let mut vocab = Vocabulary::specials();
    let mut alphabet: Vec<&String> = words.iter().flat_map(|(s, _)| s.iter()).collect();
    alphabet.sort();
    alphabet.dedup();
    for s in alphabet {
        vocab.insert(s.clone());
    }
    let mut merges = Vec::new();
    while vocab.len() < target_vocab_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iterates in ascending order, so the first maximum is the
        // lexicographically smallest pair among the most frequent.
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, n) in pairs {
            if best.map_or(true, |(_, m)| n > m) {
                best = Some((pair, n));
            }
        }
        let (left, right) = match best {
            Some((p, n)) if n >= 2 => (p.0.to_string(), p.1.to_string()),
            _ => break,
        };
        for (symbols, _) in &mut words {
            merge_pair(symbols, &left, &right);
        }
        vocab.insert(format!("{left}{right}"));
        merges.push((left, right));
    }
    Ok((BpeModel::new(merges, target_vocab_size), vocab))
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, target_vocab_size: usize) -> Self {
        let mut ranks = BTreeMap::new();
        for (i, m) in merges.iter().enumerate() {
            ranks.entry(m.clone()).or_insert(i);
        }
        Self {
            merges,
            ranks,
            target_vocab_size,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segments one word by applying merges in training order.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_pair(&mut symbols, l, r);
        }
        symbols
    }

    /// One `left right` pair per line, in training order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, target_vocab_size: usize) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => merges.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "merge line {}: expected `left right`, got `{line}`",
                        n + 1
                    )))
                }
            }
        }
        Ok(Self::new(merges, target_vocab_size))
    }
}

impl Vocabulary {
    pub fn specials() -> Self {
        Self {
            tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            ids: BTreeMap::new(),
        }
    }

    /// Adds a non-reserved token, returning its id.
    pub fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Index {
            index: id,
            bound: self.tokens.len(),
            position: 0,
        })
    }

    /// Renders ids as text: specials are dropped, unknown pieces become
    /// [`UNK_PLACEHOLDER`], and `</w>` closes a word.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for (position, &id) in ids.iter().enumerate() {
            if id >= self.tokens.len() {
                return Err(Error::Index {
                    index: id,
                    bound: self.tokens.len(),
                    position,
                });
            }
            match id {
                PAD | BOS | EOS => continue,
                UNK => current.push_str(UNK_PLACEHOLDER),
                _ => {
                    let tok = &self.tokens[id];
                    match tok.strip_suffix(END_OF_WORD) {
                        Some(stem) => {
                            current.push_str(stem);
                            words.push(core::mem::take(&mut current));
                        }
                        None => current.push_str(tok),
                    }
                }
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words.join(" "))
    }

    /// One `token<TAB>id` line per entry, ordered by id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{id}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = Self::specials();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("vocabulary line {}: `{line}`", n + 1));
            let (token, id) = line.rsplit_once('\t').ok_or_else(bad)?;
            let id: usize = id.parse().map_err(|_| bad())?;
            if id < NUM_SPECIAL {
                if token != SPECIAL_TOKENS[id] {
                    return Err(bad());
                }
                continue;
            }
            if id != vocab.len() || token.is_empty() || vocab.ids.contains_key(token) {
                return Err(bad());
            }
            vocab.insert(token.to_string());
        }
        Ok(vocab)
    }
}

/// A language's merge list and vocabulary together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pub model: BpeModel,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn train<'a, I: IntoIterator<Item = &'a str>>(corpus: I, target_vocab_size: usize) -> Result<Self> {
        let (model, vocab) = train_bpe(corpus, target_vocab_size)?;
        Ok(Self { model, vocab })
    }

    /// BOS, the pieces of every word, EOS. Unknown pieces map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = vec![BOS];
        for word in text.split_whitespace() {
            for piece in self.model.segment(word) {
                out.push(self.vocab.id(&piece).unwrap_or(UNK));
            }
        }
        out.push(EOS);
        out
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        self.vocab.decode(ids)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}
