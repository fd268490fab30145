//! Command-line interface. Every command checks its inputs before doing any
//! work and reports failure as one `error: <code>: <detail>` line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ilmt_core::analysis::{
    accuracy_table, embed_sentences, format_embedding, parse_embedding, pca_fit, render_svg, render_tsv, train_logistic,
    AccuracyColumn, LogisticModel, LogisticOptions, PlotPoint,
};
use ilmt_core::bleu::{zero_shot_report, TestSet};
use ilmt_core::decode::{pivot_translate, translate, DecodeConfig};
use ilmt_core::synth::{generate, LabelRule, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{read_lines, read_parallel, read_text, write_text};
use crate::run::train_run;
use crate::synthetic::write_synth_dir;

#[derive(Debug, Parser)]
#[command(name = "ilmt", version, about = "Multilingual translation through a fixed-length neural interlingua")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Translate lines of text.
    Translate(TranslateArgs),
    /// BLEU for direct and pivot translation over a test-set manifest.
    Evaluate(EvaluateArgs),
    /// Dump mean-pooled interlingua embeddings.
    Embed(EmbedArgs),
    /// Fit or apply a logistic classifier on embeddings.
    Classify(ClassifyArgs),
    /// PCA scatter plot of embeddings as SVG plus a TSV table.
    Visualize(VisualizeArgs),
    /// Generate a synthetic cipher-language corpus directory.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Output directory; defaults to `run` next to the config.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Print one progress line per checkpoint interval to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Output length limit in pieces; defaults to twice the source plus 5.
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl DecodeArgs {
    fn config(&self) -> Result<DecodeConfig> {
        let c = DecodeConfig {
            beam_width: self.beam,
            max_len: self.max_len,
            alpha: self.alpha,
        };
        c.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub tgt: String,
    /// Translate through this language instead of directly.
    #[arg(long)]
    pub pivot: Option<String>,
    /// Defaults to stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Lines of `src<TAB>tgt<TAB>source file<TAB>reference file`.
    #[arg(long)]
    pub testsets: PathBuf,
    /// Pivot language; defaults to the model's hub.
    #[arg(long)]
    pub pivot: Option<String>,
    /// Add-one smoothing for n-gram orders above one.
    #[arg(long)]
    pub smooth: bool,
    /// Evaluate at most this many sentences per test set.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Print an aligned table instead of report lines.
    #[arg(long)]
    pub table: bool,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(subcommand)]
    pub mode: ClassifyMode,
}

#[derive(Debug, Subcommand)]
pub enum ClassifyMode {
    /// Fit on an embedding dump and 0/1 labels.
    Train {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
    },
    /// Probabilities per line, or an accuracy table when labels are given.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// One group name per embedding line.
    #[arg(long)]
    pub groups: PathBuf,
    /// Writes `<output>.svg` and `<output>.tsv`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub vocab: usize,
    /// Training sentences per hub-spoke pair.
    #[arg(long, default_value_t = 4000)]
    pub sentences: usize,
    /// Held-out sentences rendered in every language.
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    /// Comma-separated; the first is the hub.
    #[arg(long, default_value = "a,b,c")]
    pub languages: String,
    /// Languages whose word order is reversed.
    #[arg(long, value_delimiter = ',')]
    pub reverse: Vec<String>,
    /// Step budget written into the generated config.
    #[arg(long, default_value_t = 10_000)]
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierFile {
    weights: Vec<f64>,
    bias: f64,
}

fn input_lines(path: &Option<PathBuf>) -> Result<Vec<String>> {
    match path {
        Some(p) => read_lines(p),
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<std::io::Result<Vec<String>>>()
            .map_err(|e| CliError::io(Path::new("<stdin>"), e)),
    }
}

fn emit(path: &Option<PathBuf>, stdout: &mut dyn Write, lines: &[String]) -> Result<()> {
    match path {
        Some(p) => crate::io::write_lines(p, lines),
        None => {
            for l in lines {
                writeln!(stdout, "{l}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            }
            Ok(())
        }
    }
}

fn read_labels(path: &Path) -> Result<Vec<bool>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(CliError::data(format!("{} line {}: label must be 0 or 1, got `{other}`", path.display(), i + 1))),
        })
        .collect()
}

fn read_dump(path: &Path) -> Result<Vec<ilmt_core::analysis::SentenceEmbedding>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_embedding(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn require_tokenizers(ckpt: &checkpoint::Checkpoint, path: &Path) -> Result<()> {
    if ckpt.tokenizers.is_empty() {
        return Err(CliError::checkpoint(format!("{} carries no tokenizers", path.display())));
    }
    Ok(())
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Translate(a) => cmd_translate(&a, stdout),
        Command::Evaluate(a) => cmd_evaluate(&a, stdout),
        Command::Embed(a) => cmd_embed(&a, stdout),
        Command::Classify(a) => cmd_classify(&a, stdout),
        Command::Visualize(a) => cmd_visualize(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => a.config.parent().unwrap_or(Path::new(".")).join("run"),
    };
    let interval = cfg.train.checkpoint_interval;
    let verbose = a.verbose;
    train_run(&cfg, &dir, |r| {
        if verbose && r.step % interval == 0 {
            eprintln!("step {} loss {:.4}", r.step, r.loss);
        }
    })?;
    Ok(())
}

pub fn cmd_translate(a: &TranslateArgs, stdout: &mut dyn Write) -> Result<()> {
    let decode = a.decode.config()?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    require_tokenizers(&ckpt, &a.checkpoint)?;
    let m = &ckpt.model;
    m.language_index(&a.src)?;
    m.language_index(&a.tgt)?;
    if let Some(p) = &a.pivot {
        m.language_index(p)?;
    }
    let mut out = Vec::new();
    for line in input_lines(&a.input)? {
        let t = match &a.pivot {
            Some(p) => pivot_translate(m, &ckpt.tokenizers, &a.src, p, &a.tgt, &line, &decode)?,
            None => translate(m, &ckpt.tokenizers, &a.src, &a.tgt, &line, &decode)?,
        };
        out.push(t.text);
    }
    emit(&a.output, stdout, &out)
}

/// Parses a test-set manifest; paths are relative to the manifest.
pub fn read_testsets(path: &Path, limit: Option<usize>) -> Result<Vec<TestSet>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut sets = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(CliError::data(format!(
                "{} line {}: expected src, tgt, source file, reference file",
                path.display(),
                i + 1
            )));
        }
        let (mut sources, mut references) = read_parallel(&base.join(f[2]), &base.join(f[3]))?;
        if let Some(n) = limit {
            sources.truncate(n);
            references.truncate(n);
        }
        sets.push(TestSet {
            src: f[0].to_string(),
            tgt: f[1].to_string(),
            sources,
            references,
        });
    }
    Ok(sets)
}

pub fn cmd_evaluate(a: &EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let decode = a.decode.config()?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    require_tokenizers(&ckpt, &a.checkpoint)?;
    let sets = read_testsets(&a.testsets, a.limit)?;
    for s in &sets {
        ckpt.model.language_index(&s.src)?;
        ckpt.model.language_index(&s.tgt)?;
    }
    let pivot = a.pivot.clone().unwrap_or_else(|| ckpt.model.config.hub.clone());
    let report = zero_shot_report(&ckpt.model, &ckpt.tokenizers, &sets, &pivot, &decode, a.smooth)?;
    let text = if a.table { report.table() } else { report.lines().join("\n") + "\n" };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn cmd_embed(a: &EmbedArgs, stdout: &mut dyn Write) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    require_tokenizers(&ckpt, &a.checkpoint)?;
    ckpt.model.language_index(&a.lang)?;
    let lines = input_lines(&a.input)?;
    let texts: Vec<&str> = lines.iter().map(String::as_str).collect();
    let embs = embed_sentences(&ckpt.model, &ckpt.tokenizers, &a.lang, &texts, 64)?;
    let out: Vec<String> = embs.iter().map(format_embedding).collect();
    emit(&a.output, stdout, &out)
}

fn per_language(embs: &[ilmt_core::analysis::SentenceEmbedding], labels: &[bool]) -> Vec<(String, Vec<Vec<f64>>, Vec<bool>)> {
    let mut groups: Vec<(String, Vec<Vec<f64>>, Vec<bool>)> = Vec::new();
    for (e, &y) in embs.iter().zip(labels) {
        let pos = match groups.iter().position(|g| g.0 == e.language) {
            Some(p) => p,
            None => {
                groups.push((e.language.clone(), Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[pos].1.push(e.vector.clone());
        groups[pos].2.push(y);
    }
    groups
}

fn table_for(model: &LogisticModel, embs: &[ilmt_core::analysis::SentenceEmbedding], labels: &[bool]) -> Result<String> {
    let cols = per_language(embs, labels)
        .iter()
        .map(|(l, x, y)| AccuracyColumn::evaluate(model, l, x, y))
        .collect::<ilmt_core::Result<Vec<_>>>()?;
    Ok(accuracy_table(&cols))
}

fn aligned<T>(embs: &[T], labels: &[bool], what: &Path) -> Result<()> {
    if embs.len() != labels.len() {
        return Err(CliError::data(format!(
            "{} embeddings but {} labels in {}",
            embs.len(),
            labels.len(),
            what.display()
        )));
    }
    Ok(())
}

pub fn cmd_classify(a: &ClassifyArgs, stdout: &mut dyn Write) -> Result<()> {
    let write_out = |stdout: &mut dyn Write, s: &str| stdout.write_all(s.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e));
    match &a.mode {
        ClassifyMode::Train {
            embeddings,
            labels,
            output,
            l2,
        } => {
            let embs = read_dump(embeddings)?;
            let ys = read_labels(labels)?;
            aligned(&embs, &ys, labels)?;
            let xs: Vec<Vec<f64>> = embs.iter().map(|e| e.vector.clone()).collect();
            let fit = train_logistic(&xs, &ys, &LogisticOptions { l2: *l2, ..Default::default() })?;
            let file = ClassifierFile {
                weights: fit.model.weights.clone(),
                bias: fit.model.bias,
            };
            let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::data(e.to_string()))?;
            write_text(output, &json)?;
            write_out(stdout, &table_for(&fit.model, &embs, &ys)?)
        }
        ClassifyMode::Predict { model, embeddings, labels } => {
            let file: ClassifierFile = serde_json::from_str(&read_text(model)?)
                .map_err(|e| CliError::data(format!("{}: {e}", model.display())))?;
            let m = LogisticModel {
                weights: file.weights,
                bias: file.bias,
            };
            let embs = read_dump(embeddings)?;
            match labels {
                Some(lp) => {
                    let ys = read_labels(lp)?;
                    aligned(&embs, &ys, lp)?;
                    write_out(stdout, &table_for(&m, &embs, &ys)?)
                }
                None => {
                    let mut s = String::new();
                    for e in &embs {
                        s.push_str(&format!("{}\n", ilmt_core::analysis::classify(&m, &e.vector)?));
                    }
                    write_out(stdout, &s)
                }
            }
        }
    }
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let embs = read_dump(&a.embeddings)?;
    let groups: Vec<String> = read_lines(&a.groups)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
    if groups.len() != embs.len() {
        return Err(CliError::data(format!(
            "{} embeddings but {} group lines",
            embs.len(),
            groups.len()
        )));
    }
    let xs: Vec<Vec<f64>> = embs.iter().map(|e| e.vector.clone()).collect();
    let pca = pca_fit(&xs, 2)?;
    let mut points = Vec::with_capacity(xs.len());
    for ((e, x), g) in embs.iter().zip(&xs).zip(groups) {
        let p = pca.apply(x)?;
        points.push(PlotPoint {
            group: g,
            language: e.language.clone(),
            x: p[0],
            y: p[1],
        });
    }
    let svg = render_svg(&points)?;
    write_text(&a.output.with_extension("svg"), &svg)?;
    write_text(&a.output.with_extension("tsv"), &render_tsv(&points))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let languages: Vec<&str> = a.languages.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for r in &a.reverse {
        if !languages.contains(&r.as_str()) {
            return Err(CliError::usage(format!("--reverse names unknown language `{r}`")));
        }
    }
    let mut cfg = SynthConfig::new(a.seed, a.vocab, a.sentences, &languages);
    cfg.test_sentences = a.test;
    cfg.reversed = languages.iter().map(|l| a.reverse.iter().any(|r| r == l)).collect();
    let corpus = generate(&cfg)?;
    write_synth_dir(&corpus, &a.output, a.steps, LabelRule::default())?;
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = writeln!(stderr, "{}", CliError::usage("missing subcommand; see --help"));
                return 2;
            }
            let rendered = e.kind().to_string();
            let detail = e
                .to_string()
                .lines()
                .next()
                .map(|l| l.trim_start_matches("error: ").to_string())
                .unwrap_or(rendered);
            let err = CliError::usage(detail);
            let _ = writeln!(stderr, "{err}");
            return err.exit_code();
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.exit_code()
        }
    }
}

