//! Plain-text file formats: line-aligned corpora, tokenizer files, the
//! metrics stream and the per-run lock file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ilmt_core::bpe::{BpeModel, Tokenizer, Vocabulary};

use crate::error::{CliError, Result};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map(|s| s.trim_end_matches('\r').to_string()).map_err(|e| CliError::io(path, e)))
        .collect()
}

/// Two files aligned by line number.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let a = read_lines(src)?;
    let b = read_lines(tgt)?;
    if a.len() != b.len() {
        return Err(CliError::data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            a.len(),
            tgt.display(),
            b.len()
        )));
    }
    Ok((a, b))
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn save_tokenizer(t: &Tokenizer, merges: &Path, vocab: &Path) -> Result<()> {
    write_text(merges, &t.model.to_text())?;
    write_text(vocab, &t.vocab.to_text())
}

pub fn load_tokenizer(merges: &Path, vocab: &Path) -> Result<Tokenizer> {
    let vocab = Vocabulary::from_text(&read_text(vocab)?).map_err(|e| CliError::data(format!("{}: {e}", vocab.display())))?;
    let model =
        BpeModel::from_text(&read_text(merges)?, vocab.len()).map_err(|e| CliError::data(format!("{}: {e}", merges.display())))?;
    Ok(Tokenizer { model, vocab })
}

/// Append-only `step<TAB>src<TAB>tgt<TAB>loss` lines, flushed per line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = "train.lock";

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                "locked",
                format!("{} exists; another training process owns this run directory", path.display()),
            )),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
