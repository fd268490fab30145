use std::ops::ControlFlow;

use ilmt_core::analysis::{embed_sentences, retrieval_accuracy};
use ilmt_core::bpe::Tokenizer;
use ilmt_core::decode::{translate, DecodeConfig};
use ilmt_core::model::{ModelConfig, MultilingualModel};
use ilmt_core::synth::{generate, label_synthetic, LabelRule, SynthConfig, SynthCorpus};
use ilmt_core::train::{train_loop, CorpusStore, TrainConfig};

fn corpus() -> SynthCorpus {
    let mut c = SynthConfig::new(4, 12, 300, &["a", "b", "c"]);
    c.test_sentences = 40;
    generate(&c).unwrap()
}

fn tokenizers(c: &SynthCorpus) -> Vec<Tokenizer> {
    let files = c.train_files();
    (0..3)
        .map(|l| {
            let lines: Vec<&str> = if l == 0 {
                files.iter().flat_map(|f| f.src_lines.iter().map(String::as_str)).collect()
            } else {
                files[l - 1].tgt_lines.iter().map(String::as_str).collect()
            };
            Tokenizer::train(lines, 100).unwrap()
        })
        .collect()
}

fn store(c: &SynthCorpus, toks: &[Tokenizer]) -> CorpusStore {
    let mut s = CorpusStore::default();
    for (i, f) in c.train_files().iter().enumerate() {
        let a: Vec<Vec<usize>> = f.src_lines.iter().map(|l| toks[0].encode(l)).collect();
        let b: Vec<Vec<usize>> = f.tgt_lines.iter().map(|l| toks[i + 1].encode(l)).collect();
        s.add_parallel(0, i + 1, a.clone(), b.clone()).unwrap();
        s.add_parallel(i + 1, 0, b, a).unwrap();
    }
    s.derive_monolingual();
    s
}

fn model(toks: &[Tokenizer], dim: usize) -> MultilingualModel<f32> {
    let sizes: Vec<usize> = toks.iter().map(Tokenizer::vocab_size).collect();
    let mut c = ModelConfig::desk(&["a", "b", "c"], "a", &sizes);
    c.source_embedding = dim;
    c.target_embedding = dim;
    c.encoder_hidden = dim;
    c.interlingua_hidden = dim;
    c.interlingua_output = dim;
    c.decoder_hidden = dim;
    MultilingualModel::new(c).unwrap()
}

#[test]
fn cipher_words_become_single_pieces() {
    let c = corpus();
    let toks = tokenizers(&c);
    for (l, t) in toks.iter().enumerate() {
        let line = c.render(l, c.test_ids[0]);
        let ids = t.encode(&line);
        assert_eq!(ids.len(), line.split(' ').count() + 2, "{line}");
        assert_eq!(t.decode(&ids).unwrap(), line);
    }
}

#[test]
fn spoke_pair_is_absent_from_training() {
    let c = corpus();
    let s = store(&c, &tokenizers(&c));
    assert!(s.sides(1, 2).is_none() && s.sides(2, 1).is_none());
    assert!(s.sides(0, 1).is_some() && s.sides(2, 0).is_some());
    let labels = label_synthetic(&c, LabelRule::ContainsClass { k: 6 });
    for &id in &c.test_ids {
        let parsed = c.languages[2].parse(&c.render(2, id)).unwrap();
        assert_eq!(labels[id], parsed.iter().any(|&t| t < 6));
    }
}

#[test]
fn short_training_lowers_the_loss_and_keeps_outputs_well_formed() {
    let c = corpus();
    let toks = tokenizers(&c);
    let s = store(&c, &toks);
    let config = TrainConfig {
        steps: 120,
        learning_rate: 0.003,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    let m = train_loop(model(&toks, 16), &s, config, |r, _| {
        losses.push(r.loss);
        ControlFlow::Continue(())
    })
    .unwrap();
    let early: f64 = losses[..12].iter().sum::<f64>() / 12.0;
    let late: f64 = losses[losses.len() - 12..].iter().sum::<f64>() / 12.0;
    assert!(late < 0.8 * early, "{early} -> {late}");

    let src = c.render(1, c.test_ids[0]);
    let out = translate(&m, &toks, "b", "c", &src, &DecodeConfig::default()).unwrap();
    assert!(out.text.split_whitespace().all(|w| w.starts_with('c') || w == "<unk>"), "{}", out.text);
    assert_eq!(out.decode_passes, 1);

    let lines: Vec<String> = c.test_ids.iter().map(|&i| c.render(2, i)).collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let e = embed_sentences(&m, &toks, "c", &refs, 8).unwrap();
    assert_eq!(e.len(), 40);
    let vecs: Vec<Vec<f64>> = e.into_iter().map(|x| x.vector).collect();
    assert_eq!(retrieval_accuracy(&vecs, &vecs), 1.0);
}
