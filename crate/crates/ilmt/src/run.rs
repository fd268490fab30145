//! Training runs driven by a [`RunConfig`]: tokenizers, corpora, the
//! training loop, metrics and periodic checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use ilmt_core::bpe::Tokenizer;
use ilmt_core::model::{ModelConfig, MultilingualModel};
use ilmt_core::train::{train_loop, CorpusStore, Sentences, StepReport};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{load_tokenizer, read_lines, read_parallel, save_tokenizer, MetricsWriter, RunLock};

pub const FINAL_CHECKPOINT: &str = "model.ilmt";
pub const METRICS_FILE: &str = "metrics.tsv";

/// Everything needed to start training, derived from the config alone.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model_config: ModelConfig,
    pub tokenizers: Vec<Tokenizer>,
    pub corpora: CorpusStore,
}

/// Loads or learns one tokenizer per language, then encodes every corpus.
/// A parallel corpus feeds both translation directions.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let languages = &cfg.model.languages;
    let index = |l: &str| languages.iter().position(|x| x == l).expect("validated language");
    let mut parallel_text: BTreeMap<(usize, usize), (Vec<String>, Vec<String>)> = BTreeMap::new();
    for c in &cfg.corpora {
        let (a, b) = read_parallel(&c.src_path, &c.tgt_path)?;
        let (s, t) = (index(&c.src), index(&c.tgt));
        let e = parallel_text.entry((s, t)).or_default();
        e.0.extend(a);
        e.1.extend(b);
    }
    let mut mono_text: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (l, p) in &cfg.monolingual {
        mono_text.entry(index(l)).or_default().extend(read_lines(p)?);
    }

    let mut tokenizers = Vec::with_capacity(languages.len());
    for (i, lang) in languages.iter().enumerate() {
        let tok = match cfg.tokenizers.get(lang) {
            Some(p) => load_tokenizer(&p.merges, &p.vocab)?,
            None => {
                let mut text: Vec<&str> = Vec::new();
                for (&(s, t), (a, b)) in &parallel_text {
                    if s == i {
                        text.extend(a.iter().map(String::as_str));
                    }
                    if t == i {
                        text.extend(b.iter().map(String::as_str));
                    }
                }
                if let Some(m) = mono_text.get(&i) {
                    text.extend(m.iter().map(String::as_str));
                }
                Tokenizer::train(text, cfg.model.vocab_sizes[i])
                    .map_err(|e| CliError::data(format!("cannot learn a tokenizer for `{lang}`: {e}")))?
            }
        };
        tokenizers.push(tok);
    }

    let encode = |lang: usize, lines: &[String]| -> Sentences { lines.iter().map(|l| tokenizers[lang].encode(l)).collect() };
    let mut directed: BTreeMap<(usize, usize), (Sentences, Sentences)> = BTreeMap::new();
    for (&(s, t), (a, b)) in &parallel_text {
        let (ea, eb) = (encode(s, a), encode(t, b));
        let fwd = directed.entry((s, t)).or_default();
        fwd.0.extend(ea.iter().cloned());
        fwd.1.extend(eb.iter().cloned());
        let bwd = directed.entry((t, s)).or_default();
        bwd.0.extend(eb);
        bwd.1.extend(ea);
    }
    let mut corpora = CorpusStore::default();
    for ((s, t), (a, b)) in directed {
        corpora.add_parallel(s, t, a, b)?;
    }
    for (l, lines) in &mono_text {
        corpora.add_monolingual(*l, encode(*l, lines));
    }
    corpora.derive_monolingual();

    let mut model_config = cfg.model.clone();
    model_config.vocab_sizes = tokenizers.iter().map(Tokenizer::vocab_size).collect();
    model_config.validate()?;
    Ok(Prepared {
        model_config,
        tokenizers,
        corpora,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub payload_crc: u32,
    pub last_loss: f64,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.ilmt")
}

/// Trains into `run_dir`, holding its lock for the whole run. Writes the
/// tokenizers, `metrics.tsv`, a checkpoint every `checkpoint interval`
/// steps and `model.ilmt` at the end.
pub fn train_run<F>(cfg: &RunConfig, run_dir: &Path, mut progress: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepReport),
{
    fs::create_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    let _lock = RunLock::acquire(run_dir)?;
    let prepared = prepare(cfg)?;
    for (lang, tok) in prepared.model_config.languages.iter().zip(&prepared.tokenizers) {
        save_tokenizer(
            tok,
            &run_dir.join(format!("bpe.{lang}.merges")),
            &run_dir.join(format!("bpe.{lang}.vocab")),
        )?;
    }
    let languages = prepared.model_config.languages.clone();
    let mut metrics = MetricsWriter::append(&run_dir.join(METRICS_FILE))?;
    let model = MultilingualModel::<f32>::new(prepared.model_config.clone())?;
    let mut failure: Option<CliError> = None;
    let mut last_loss = f64::NAN;
    let interval = cfg.train.checkpoint_interval;
    let tokenizers = prepared.tokenizers.clone();
    let model = train_loop(model, &prepared.corpora, cfg.train.clone(), |report, trainer| {
        last_loss = report.loss;
        progress(report);
        let mut result = metrics.line(&report.metrics_line(&languages));
        if result.is_ok() && report.step % interval == 0 {
            let ckpt = Checkpoint {
                model: trainer.model.clone(),
                tokenizers: tokenizers.clone(),
                step: report.step,
            };
            result = checkpoint::save(&run_dir.join(checkpoint_name(report.step)), &ckpt);
        }
        match result {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let ckpt = Checkpoint {
        model,
        tokenizers: prepared.tokenizers,
        step: cfg.train.steps,
    };
    let path = run_dir.join(FINAL_CHECKPOINT);
    let bytes = checkpoint::encode(&ckpt)?;
    checkpoint::save(&path, &ckpt)?;
    Ok(TrainOutcome {
        final_checkpoint: path,
        steps: ckpt.step,
        payload_crc: checkpoint::payload_crc(&bytes)?,
        last_loss,
    })
}
