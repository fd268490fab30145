//! Run configuration as a human-editable `key = value` file.
//!
//! Model keys reuse the hyperparameter names of the original experiments
//! verbatim (`encoder hidden size`, `interlingua length`, ...). A `scale`
//! key picks the preset the explicit keys override. Relative paths are
//! resolved against the directory holding the config file.
//!
//! ```text
//! languages = en, fr, de
//! hub language = en
//! scale = desk
//! interlingua length = 16
//! corpus en-fr = train.en-fr.en train.en-fr.fr
//! tokenizer de = bpe.de.merges bpe.de.vocab
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ilmt_core::model::ModelConfig;
use ilmt_core::train::{LossMode, ScheduleOptions, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub src: String,
    pub tgt: String,
    pub src_path: PathBuf,
    pub tgt_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerPaths {
    pub merges: PathBuf,
    pub vocab: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Vocabulary sizes here are BPE targets; the trained tokenizers fix the
    /// real sizes.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpora: Vec<CorpusEntry>,
    pub monolingual: Vec<(String, PathBuf)>,
    pub tokenizers: BTreeMap<String, TokenizerPaths>,
}

/// Small models on small corpora tolerate a larger step than the 2e-4 used
/// at full scale, and converge within a desk-sized step budget.
pub const DESK_LEARNING_RATE: f64 = 0.001;
pub const PAPER_BATCH_SIZE: usize = 400;

const MODEL_KEYS: &[&str] = &[
    "vocabulary size",
    "source embedding size",
    "target embedding size",
    "output dimension",
    "encoder hidden size",
    "decoder hidden size",
    "interlingua hidden size",
    "interlingua output size",
    "interlingua length",
    "encoder depth",
    "interlingua depth",
    "decoder depth",
    "attention type",
    "optimizer",
    "learning rate",
    "batch size",
];

const RUN_KEYS: &[&str] = &[
    "languages",
    "hub language",
    "scale",
    "maximum source length",
    "seed",
    "steps",
    "checkpoint interval",
    "gradient clip norm",
    "identity pairs",
    "dedup schedule",
    "sampled softmax samples",
    "sampled softmax dedup",
];

fn known(key: &str) -> bool {
    MODEL_KEYS.contains(&key)
        || RUN_KEYS.contains(&key)
        || key.starts_with("vocabulary size ")
        || key.starts_with("corpus ")
        || key.starts_with("monolingual ")
        || key.starts_with("tokenizer ")
}

/// `key = value` lines; `#` starts a comment, keys are case-insensitive and
/// whitespace-normalized. Unknown and repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if !known(&key) {
            return Err(CliError::config(format!("line {}: unknown key `{key}`", i + 1)));
        }
        if out.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
            return Err(CliError::config(format!("line {}: `{key}` set twice", i + 1)));
        }
    }
    Ok(out)
}

struct Values {
    map: BTreeMap<String, (usize, String)>,
}

impl Values {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::config(format!("line {line}: `{key}` has invalid value `{v}`"))),
        }
    }

    fn set<T: std::str::FromStr>(&self, key: &str, target: &mut T) -> Result<()> {
        if let Some(v) = self.parse(key)? {
            *target = v;
        }
        Ok(())
    }

    fn flag(&self, key: &str, target: &mut bool) -> Result<()> {
        match self.raw(key) {
            None => Ok(()),
            Some((_, "true" | "yes" | "1")) => {
                *target = true;
                Ok(())
            }
            Some((_, "false" | "no" | "0")) => {
                *target = false;
                Ok(())
            }
            Some((line, v)) => Err(CliError::config(format!("line {line}: `{key}` must be true or false, got `{v}`"))),
        }
    }

    fn fixed(&self, key: &str, allowed: &str) -> Result<()> {
        match self.raw(key) {
            Some((line, v)) if !v.eq_ignore_ascii_case(allowed) => Err(CliError::config(format!(
                "line {line}: only `{key} = {allowed}` is supported, got `{v}`"
            ))),
            _ => Ok(()),
        }
    }
}

fn two_paths(base: &Path, line: usize, key: &str, v: &str) -> Result<(PathBuf, PathBuf)> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    match parts.as_slice() {
        [a, b] => Ok((base.join(a), base.join(b))),
        _ => Err(CliError::config(format!("line {line}: `{key}` needs two paths"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let v = Values { map: parse_pairs(text)? };
        let languages: Vec<String> = v
            .raw("languages")
            .ok_or_else(|| CliError::config("missing `languages`"))?
            .1
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if languages.is_empty() {
            return Err(CliError::config("`languages` is empty"));
        }
        let hub = v.raw("hub language").map(|(_, h)| h.to_string()).unwrap_or_else(|| languages[0].clone());
        let langs: Vec<&str> = languages.iter().map(String::as_str).collect();

        let mut bpe = 8000usize;
        v.set("vocabulary size", &mut bpe)?;
        let mut vocab_sizes = vec![bpe; languages.len()];
        for (i, l) in languages.iter().enumerate() {
            v.set(&format!("vocabulary size {}", l.to_lowercase()), &mut vocab_sizes[i])?;
        }
        let paper = match v.raw("scale") {
            None | Some((_, "desk")) => false,
            Some((_, "paper")) => true,
            Some((line, s)) => return Err(CliError::config(format!("line {line}: unknown scale `{s}`"))),
        };
        let mut model = if paper {
            ModelConfig::paper_scale(&langs, &hub, &vocab_sizes)
        } else {
            ModelConfig::desk(&langs, &hub, &vocab_sizes)
        };
        v.set("source embedding size", &mut model.source_embedding)?;
        v.set("target embedding size", &mut model.target_embedding)?;
        v.set("encoder hidden size", &mut model.encoder_hidden)?;
        v.set("decoder hidden size", &mut model.decoder_hidden)?;
        v.set("interlingua hidden size", &mut model.interlingua_hidden)?;
        // the interlingua output width follows the hidden size unless set
        model.interlingua_output = model.interlingua_hidden;
        v.set("interlingua output size", &mut model.interlingua_output)?;
        v.set("interlingua length", &mut model.interlingua_length)?;
        v.set("encoder depth", &mut model.encoder_depth)?;
        model.max_source_len = model.interlingua_length;
        v.set("maximum source length", &mut model.max_source_len)?;
        v.set("seed", &mut model.seed)?;
        if let Some(d) = v.parse::<usize>("output dimension")? {
            if d != model.output_dim() {
                return Err(CliError::config(format!(
                    "`output dimension` {d} must equal decoder hidden size + interlingua output size = {}",
                    model.output_dim()
                )));
            }
        }
        for key in ["interlingua depth", "decoder depth"] {
            v.fixed(key, "1")?;
        }
        v.fixed("attention type", "additive")?;
        v.fixed("optimizer", "adam")?;
        model.validate()?;

        let mut train = TrainConfig {
            seed: model.seed,
            ..TrainConfig::default()
        };
        if paper {
            train.batch_size = PAPER_BATCH_SIZE;
        } else {
            train.learning_rate = DESK_LEARNING_RATE;
        }
        v.set("learning rate", &mut train.learning_rate)?;
        v.set("batch size", &mut train.batch_size)?;
        v.set("steps", &mut train.steps)?;
        v.set("checkpoint interval", &mut train.checkpoint_interval)?;
        v.set("gradient clip norm", &mut train.clip_norm)?;
        let mut schedule = ScheduleOptions::default();
        v.flag("identity pairs", &mut schedule.identity_pairs)?;
        v.flag("dedup schedule", &mut schedule.dedup)?;
        train.schedule = schedule;
        let mut samples = 0usize;
        v.set("sampled softmax samples", &mut samples)?;
        let mut sample_dedup = false;
        v.flag("sampled softmax dedup", &mut sample_dedup)?;
        if samples > 0 {
            train.loss = LossMode::Sampled {
                count: samples,
                dedup: sample_dedup,
            };
        }
        if train.batch_size == 0 || train.checkpoint_interval == 0 || !(train.learning_rate > 0.0) {
            return Err(CliError::config("batch size, checkpoint interval and learning rate must be positive"));
        }

        let mut corpora = Vec::new();
        let mut monolingual = Vec::new();
        let mut tokenizers = BTreeMap::new();
        let lang_of = |name: &str, line: usize| -> Result<String> {
            languages
                .iter()
                .find(|l| l.eq_ignore_ascii_case(name))
                .cloned()
                .ok_or_else(|| CliError::config(format!("line {line}: `{name}` is not in `languages`")))
        };
        for (key, (line, value)) in &v.map {
            if let Some(pair) = key.strip_prefix("corpus ") {
                let (s, t) = pair
                    .split_once('-')
                    .ok_or_else(|| CliError::config(format!("line {line}: corpus key must be `corpus <src>-<tgt>`")))?;
                let (sp, tp) = two_paths(base, *line, key, value)?;
                corpora.push(CorpusEntry {
                    src: lang_of(s.trim(), *line)?,
                    tgt: lang_of(t.trim(), *line)?,
                    src_path: sp,
                    tgt_path: tp,
                });
            } else if let Some(l) = key.strip_prefix("monolingual ") {
                monolingual.push((lang_of(l.trim(), *line)?, base.join(value)));
            } else if let Some(l) = key.strip_prefix("tokenizer ") {
                let (merges, vocab) = two_paths(base, *line, key, value)?;
                tokenizers.insert(lang_of(l.trim(), *line)?, TokenizerPaths { merges, vocab });
            } else if let Some(l) = key.strip_prefix("vocabulary size ") {
                lang_of(l.trim(), *line)?;
            }
        }
        let cfg = RunConfig {
            model,
            train,
            corpora,
            monolingual,
            tokenizers,
        };
        cfg.check_resolvable()?;
        Ok(cfg)
    }

    /// Every scheduled pair must be backed by a corpus entry (in either
    /// direction) or, for identity pairs, by some text in that language.
    pub fn check_resolvable(&self) -> Result<()> {
        let schedule = ilmt_core::train::build_schedule_with(&self.model.languages, &self.model.hub, self.train.schedule)?;
        for (s, t) in schedule.named_entries() {
            let ok = if s == t {
                self.corpora.iter().any(|c| c.src == s || c.tgt == s) || self.monolingual.iter().any(|(l, _)| l == s)
            } else {
                self.corpora
                    .iter()
                    .any(|c| (c.src == s && c.tgt == t) || (c.src == t && c.tgt == s))
            };
            if !ok {
                return Err(CliError::config(format!("no corpus for scheduled pair {s}-{t}")));
            }
        }
        for path in self
            .corpora
            .iter()
            .flat_map(|c| [&c.src_path, &c.tgt_path])
            .chain(self.monolingual.iter().map(|(_, p)| p))
            .chain(self.tokenizers.values().flat_map(|t| [&t.merges, &t.vocab]))
        {
            if !path.is_file() {
                return Err(CliError::config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// Writes a config that [`RunConfig::parse`] reads back to the same values.
pub fn render(cfg: &RunConfig, base: &Path) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("languages", m.languages.join(", "));
    kv("hub language", m.hub.clone());
    for (l, v) in m.languages.iter().zip(&m.vocab_sizes) {
        kv(&format!("vocabulary size {l}"), v.to_string());
    }
    kv("source embedding size", m.source_embedding.to_string());
    kv("target embedding size", m.target_embedding.to_string());
    kv("encoder hidden size", m.encoder_hidden.to_string());
    kv("decoder hidden size", m.decoder_hidden.to_string());
    kv("interlingua hidden size", m.interlingua_hidden.to_string());
    kv("interlingua output size", m.interlingua_output.to_string());
    kv("output dimension", m.output_dim().to_string());
    kv("interlingua length", m.interlingua_length.to_string());
    kv("encoder depth", m.encoder_depth.to_string());
    kv("interlingua depth", "1".into());
    kv("decoder depth", "1".into());
    kv("attention type", "additive".into());
    kv("optimizer", "Adam".into());
    kv("learning rate", t.learning_rate.to_string());
    kv("batch size", t.batch_size.to_string());
    kv("maximum source length", m.max_source_len.to_string());
    kv("seed", m.seed.to_string());
    kv("steps", t.steps.to_string());
    kv("checkpoint interval", t.checkpoint_interval.to_string());
    kv("gradient clip norm", t.clip_norm.to_string());
    kv("identity pairs", t.schedule.identity_pairs.to_string());
    kv("dedup schedule", t.schedule.dedup.to_string());
    if let LossMode::Sampled { count, dedup } = t.loss {
        kv("sampled softmax samples", count.to_string());
        kv("sampled softmax dedup", dedup.to_string());
    }
    for c in &cfg.corpora {
        kv(&format!("corpus {}-{}", c.src, c.tgt), format!("{} {}", rel(&c.src_path), rel(&c.tgt_path)));
    }
    for (l, p) in &cfg.monolingual {
        kv(&format!("monolingual {l}"), rel(p));
    }
    for (l, p) in &cfg.tokenizers {
        kv(&format!("tokenizer {l}"), format!("{} {}", rel(&p.merges), rel(&p.vocab)));
    }
    out
}
