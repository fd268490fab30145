//! Corpus BLEU, token accuracy and the direct-versus-pivot comparison.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bpe::Tokenizer;
use crate::decode::{pivot_translate, translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::MultilingualModel;
use crate::real::Real;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    /// `exp(1 - r/c)` when `c < r`, else 1; 0 when every hypothesis is empty.
    pub brevity_penalty: f64,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// `bleu<TAB>p1,p2,p3,p4<TAB>bp`
    pub fn fields(&self) -> String {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{p:.4}")).collect();
        format!("{:.2}\t{}\t{:.4}", self.bleu, p.join(","), self.brevity_penalty)
    }
}

fn ngram_counts<W: Ord>(tokens: &[W], n: usize) -> BTreeMap<&[W], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU over token sequences. With `smooth`, orders 2 to 4 use
/// `(matches + 1) / (total + 1)`; otherwise any zero precision gives 0.
pub fn corpus_bleu_tokens<W: Ord>(hypotheses: &[Vec<W>], references: &[Vec<W>], smooth: bool) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape {
            op: "corpus_bleu",
            lhs: alloc::vec![hypotheses.len()],
            rhs: alloc::vec![references.len()],
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus_bleu"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let refs = ngram_counts(rf, n);
            for (g, k) in ngram_counts(h, n) {
                matches[n - 1] += k.min(refs.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if smooth && n > 0 {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        libm::exp(1.0 - r as f64 / c as f64)
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|&p| libm::log(p)).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * libm::exp(log_mean)
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        matches,
        totals,
        hyp_len: c,
        ref_len: r,
    })
}

/// Corpus BLEU over whitespace-tokenized sentences.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[S], references: &[S], smooth: bool) -> Result<BleuReport> {
    corpus_bleu_tokens(&split_all(hypotheses), &split_all(references), smooth)
}

fn split_all<S: AsRef<str>>(v: &[S]) -> Vec<Vec<&str>> {
    v.iter().map(|s| s.as_ref().split_whitespace().collect()).collect()
}

/// Position-aligned matches over `max(len hyp, len ref)`, pooled over the
/// corpus.
pub fn token_accuracy<W: PartialEq>(hypotheses: &[Vec<W>], references: &[Vec<W>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape {
            op: "token_accuracy",
            lhs: alloc::vec![hypotheses.len()],
            rhs: alloc::vec![references.len()],
        });
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        return Err(Error::Empty("token_accuracy"));
    }
    Ok(hit as f64 / total as f64)
}

/// Held-out sentences for one translation direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub src: String,
    pub tgt: String,
    pub sources: Vec<String>,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotRow {
    pub src: String,
    pub tgt: String,
    pub direct: BleuReport,
    pub pivot: BleuReport,
    pub direct_outputs: Vec<String>,
    pub pivot_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotReport {
    pub pivot_language: String,
    pub rows: Vec<ZeroShotRow>,
}

impl ZeroShotReport {
    /// `pair<TAB>mode<TAB>bleu<TAB>p1,p2,p3,p4<TAB>bp`, two lines per pair.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            out.push(format!("{}-{}\tdirect\t{}", r.src, r.tgt, r.direct.fields()));
            out.push(format!("{}-{}\tpivot\t{}", r.src, r.tgt, r.pivot.fields()));
        }
        out
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12}{:>10}{:>10}\n", "pair", "direct", format!("pivot({})", self.pivot_language));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12}{:>10.2}{:>10.2}\n",
                format!("{}-{}", r.src, r.tgt),
                r.direct.bleu,
                r.pivot.bleu
            ));
        }
        s
    }
}

/// Direct and pivot BLEU for every test set.
pub fn zero_shot_report<T: Real>(
    model: &MultilingualModel<T>,
    tokenizers: &[Tokenizer],
    testsets: &[TestSet],
    pivot: &str,
    config: &DecodeConfig,
    smooth: bool,
) -> Result<ZeroShotReport> {
    model.language_index(pivot)?;
    let mut rows = Vec::new();
    for set in testsets {
        let mut direct = Vec::with_capacity(set.sources.len());
        let mut piv = Vec::with_capacity(set.sources.len());
        for text in &set.sources {
            direct.push(translate(model, tokenizers, &set.src, &set.tgt, text, config)?.text);
            piv.push(pivot_translate(model, tokenizers, &set.src, pivot, &set.tgt, text, config)?.text);
        }
        rows.push(ZeroShotRow {
            src: set.src.clone(),
            tgt: set.tgt.clone(),
            direct: corpus_bleu(&direct, &set.references, smooth)?,
            pivot: corpus_bleu(&piv, &set.references, smooth)?,
            direct_outputs: direct,
            pivot_outputs: piv,
        });
    }
    Ok(ZeroShotReport {
        pivot_language: pivot.into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn worked_example_by_hand() {
        // hyp "the cat the cat sat" against ref "the cat sat on the mat":
        // unigrams  the 2/2, cat 1/2 clipped, sat 1/1        -> 4/5
        // bigrams   the-cat 1/2 clipped, cat-the 0, cat-sat 1 -> 2/4
        // trigrams  the-cat-sat 1 of 3                        -> 1/3
        // 4-grams   none of 2                                 -> 0/2
        // c = 5 < r = 6, so bp = exp(1 - 6/5)
        let hyp = ["the cat the cat sat"];
        let rf = ["the cat sat on the mat"];
        let bp = libm::exp(-0.2);
        let r = corpus_bleu(&hyp, &rf, false).unwrap();
        assert_eq!(r.matches, [4, 2, 1, 0]);
        assert_eq!(r.totals, [5, 4, 3, 2]);
        assert!((r.brevity_penalty - bp).abs() < 1e-12);
        assert!((r.precisions[0] - 0.8).abs() < 1e-12);
        assert_eq!(r.bleu, 0.0);
        // smoothed: 4/5, 3/5, 2/4, 1/3
        let s = corpus_bleu(&hyp, &rf, true).unwrap();
        let expect = 100.0 * bp * libm::pow(0.8 * 0.6 * 0.5 * (1.0 / 3.0), 0.25);
        assert!((s.bleu - expect).abs() < 0.01, "{} vs {expect}", s.bleu);
        assert!((s.bleu - 43.54).abs() < 0.01);
    }

    #[test]
    fn identity_and_empty_cases() {
        let refs = ["a b c d e f", "the quick brown fox jumps", "x y z w v"];
        let r = corpus_bleu(&refs, &refs, false).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
        let empty = ["", "", ""];
        let e = corpus_bleu(&empty, &refs, false).unwrap();
        assert_eq!(e.bleu, 0.0);
        assert_eq!(corpus_bleu(&empty, &refs, true).unwrap().bleu, 0.0);
        assert!(corpus_bleu(&refs[..2], &refs, false).is_err());
        assert!(corpus_bleu::<&str>(&[], &[], false).is_err());
    }

    #[test]
    fn sentence_order_does_not_matter() {
        let hyps = ["a b c d x", "p q r s t u", "m n o p"];
        let refs = ["a b c d e", "p q r s t", "m n o q"];
        let a = corpus_bleu(&hyps, &refs, false).unwrap();
        let (h2, r2) = ([hyps[2], hyps[0], hyps[1]], [refs[2], refs[0], refs[1]]);
        let b = corpus_bleu(&h2, &r2, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn a_perfect_pair_does_not_lower_bleu_when_lengths_balance() {
        // c == r before and after, so bp stays 1 and every precision can
        // only move toward 1
        let hyps = vec!["a b c d x f", "p q r s t u"];
        let refs = vec!["a b c d e f", "p q r z t u"];
        let before = corpus_bleu(&hyps, &refs, false).unwrap();
        let mut h = hyps.clone();
        let mut r = refs.clone();
        h.push("k l m n o");
        r.push("k l m n o");
        let after = corpus_bleu(&h, &r, false).unwrap();
        assert_eq!(before.brevity_penalty, 1.0);
        assert!(after.bleu >= before.bleu);
    }

    #[test]
    fn bleu_stays_in_range() {
        let hyps = ["a a a a a a a", "b"];
        let refs = ["a b", "b b b b b b b b"];
        for smooth in [false, true] {
            let r = corpus_bleu(&hyps, &refs, smooth).unwrap();
            assert!((0.0..=100.0).contains(&r.bleu));
            assert!(r.brevity_penalty > 0.0 && r.brevity_penalty <= 1.0);
        }
    }

    #[test]
    fn token_accuracy_aligns_by_position() {
        let h = vec![vec![1, 2, 3], vec![4, 5]];
        let r = vec![vec![1, 9, 3, 7], vec![4, 5]];
        // (2 + 2) / (4 + 2)
        assert!((token_accuracy(&h, &r).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!(token_accuracy::<usize>(&[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn report_lines_have_five_fields() {
        let r = corpus_bleu(&["a b c d"], &["a b c d"], false).unwrap();
        let report = ZeroShotReport {
            pivot_language: "a".into(),
            rows: vec![ZeroShotRow {
                src: "b".into(),
                tgt: "c".into(),
                direct: r.clone(),
                pivot: r,
                direct_outputs: vec![],
                pivot_outputs: vec![],
            }],
        };
        let lines = report.lines();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "b-c\tdirect\t100.00\t1.0000,1.0000,1.0000,1.0000\t1.0000");
        assert!(lines[1].starts_with("b-c\tpivot\t"));
        assert!(report.table().contains("pivot(a)"));
    }
}
