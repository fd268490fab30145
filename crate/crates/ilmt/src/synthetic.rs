//! Writes a synthetic cipher-language corpus as a ready-to-train run
//! directory: parallel files, held-out test files, labels, a test-set
//! manifest and a desk-scale config.

use std::fs;
use std::path::Path;

use ilmt_core::model::ModelConfig;
use ilmt_core::synth::{label_synthetic, LabelRule, SynthCorpus};
use ilmt_core::train::TrainConfig;

use crate::config::{render, CorpusEntry, RunConfig, DESK_LEARNING_RATE};
use crate::error::{CliError, Result};
use crate::io::write_lines;

pub const CONFIG_FILE: &str = "config.txt";
pub const TESTSETS_FILE: &str = "testsets.tsv";
/// Large enough for every cipher word to become a single piece.
pub const SYNTH_BPE_VOCAB: usize = 200;

pub fn train_file(pair: (&str, &str), lang: &str) -> String {
    format!("train.{}-{}.{lang}", pair.0, pair.1)
}

pub fn test_file(lang: &str) -> String {
    format!("test.{lang}")
}

fn label_lines(labels: &[bool], ids: &[usize]) -> Vec<&'static str> {
    ids.iter().map(|&i| if labels[i] { "1" } else { "0" }).collect()
}

/// The run config matching a written corpus directory.
pub fn synth_run_config(corpus: &SynthCorpus, dir: &Path, steps: u64) -> RunConfig {
    let names = corpus.language_names();
    let hub = names[0];
    let mut model = ModelConfig::desk(&names, hub, &vec![SYNTH_BPE_VOCAB; names.len()]);
    model.seed = corpus.config.seed;
    let train = TrainConfig {
        steps,
        learning_rate: DESK_LEARNING_RATE,
        seed: corpus.config.seed,
        checkpoint_interval: steps.max(1),
        ..TrainConfig::default()
    };
    let corpora = names[1..]
        .iter()
        .map(|spoke| CorpusEntry {
            src: hub.to_string(),
            tgt: spoke.to_string(),
            src_path: dir.join(train_file((hub, spoke), hub)),
            tgt_path: dir.join(train_file((hub, spoke), spoke)),
        })
        .collect();
    RunConfig {
        model,
        train,
        corpora,
        monolingual: Vec::new(),
        tokenizers: Default::default(),
    }
}

/// Writes the corpus, labels, manifest and config into `dir`.
pub fn write_synth_dir(corpus: &SynthCorpus, dir: &Path, steps: u64, rule: LabelRule) -> Result<RunConfig> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let labels = label_synthetic(corpus, rule);
    let hub = corpus.languages[0].name.as_str();
    for f in corpus.train_files() {
        let pair = (hub, f.tgt.as_str());
        write_lines(&dir.join(train_file(pair, hub)), &f.src_lines)?;
        write_lines(&dir.join(train_file(pair, &f.tgt)), &f.tgt_lines)?;
        write_lines(
            &dir.join(format!("labels.train.{}-{}", pair.0, pair.1)),
            &label_lines(&labels, &f.base_ids),
        )?;
    }
    for (i, lang) in corpus.languages.iter().enumerate() {
        let lines: Vec<String> = corpus.test_ids.iter().map(|&id| corpus.render(i, id)).collect();
        write_lines(&dir.join(test_file(&lang.name)), &lines)?;
    }
    write_lines(&dir.join("labels.test"), &label_lines(&labels, &corpus.test_ids))?;
    let mut manifest = Vec::new();
    for s in &corpus.languages {
        for t in &corpus.languages {
            if s.name != t.name {
                manifest.push(format!("{}\t{}\t{}\t{}", s.name, t.name, test_file(&s.name), test_file(&t.name)));
            }
        }
    }
    write_lines(&dir.join(TESTSETS_FILE), &manifest)?;
    let cfg = synth_run_config(corpus, dir, steps);
    crate::io::write_text(&dir.join(CONFIG_FILE), &render(&cfg, dir))?;
    Ok(cfg)
}
