//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ILMT" | u32 version | u64 header length | header JSON | f32 payload | u32 CRC32(payload)
//! ```
//!
//! The header carries the model configuration, the language list, the
//! tokenizers and a manifest giving each parameter's name, shape and byte
//! offset inside the payload. Parameters are stored row-major in manifest
//! order. Unknown header keys are ignored; any other version is rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ilmt_core::bpe::{BpeModel, Tokenizer, Vocabulary};
use ilmt_core::model::{ModelConfig, MultilingualModel};
use ilmt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"ILMT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub languages: Vec<String>,
    pub hub: String,
    pub vocab_sizes: Vec<usize>,
    pub source_embedding: usize,
    pub target_embedding: usize,
    pub encoder_hidden: usize,
    pub encoder_depth: usize,
    pub interlingua_hidden: usize,
    pub interlingua_output: usize,
    pub interlingua_length: usize,
    pub decoder_hidden: usize,
    pub max_source_len: usize,
    pub seed: u64,
}

impl From<&ModelConfig> for ConfigRecord {
    fn from(c: &ModelConfig) -> Self {
        ConfigRecord {
            languages: c.languages.clone(),
            hub: c.hub.clone(),
            vocab_sizes: c.vocab_sizes.clone(),
            source_embedding: c.source_embedding,
            target_embedding: c.target_embedding,
            encoder_hidden: c.encoder_hidden,
            encoder_depth: c.encoder_depth,
            interlingua_hidden: c.interlingua_hidden,
            interlingua_output: c.interlingua_output,
            interlingua_length: c.interlingua_length,
            decoder_hidden: c.decoder_hidden,
            max_source_len: c.max_source_len,
            seed: c.seed,
        }
    }
}

impl From<ConfigRecord> for ModelConfig {
    fn from(c: ConfigRecord) -> Self {
        ModelConfig {
            languages: c.languages,
            hub: c.hub,
            vocab_sizes: c.vocab_sizes,
            source_embedding: c.source_embedding,
            target_embedding: c.target_embedding,
            encoder_hidden: c.encoder_hidden,
            encoder_depth: c.encoder_depth,
            interlingua_hidden: c.interlingua_hidden,
            interlingua_output: c.interlingua_output,
            interlingua_length: c.interlingua_length,
            decoder_hidden: c.decoder_hidden,
            max_source_len: c.max_source_len,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset inside the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerRecord {
    /// Merge list, one `left right` pair per line.
    pub merges: String,
    /// `token<TAB>id` lines.
    pub vocab: String,
    #[serde(default)]
    pub target_vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub config: ConfigRecord,
    pub languages: Vec<String>,
    pub manifest: Vec<ManifestEntry>,
    #[serde(default)]
    pub tokenizers: BTreeMap<String, TokenizerRecord>,
    /// Completed training steps when the checkpoint was written.
    #[serde(default)]
    pub step: u64,
}

/// A model plus the tokenizers needed to use it on text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MultilingualModel<f32>,
    /// One per language, in model language order; empty if none were saved.
    pub tokenizers: Vec<Tokenizer>,
    pub step: u64,
}

fn tokenizer_record(t: &Tokenizer) -> TokenizerRecord {
    TokenizerRecord {
        merges: t.model.to_text(),
        vocab: t.vocab.to_text(),
        target_vocab_size: t.model.target_vocab_size,
    }
}

/// Serializes to the on-disk byte layout.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let languages = model.config.languages.clone();
    if !ckpt.tokenizers.is_empty() && ckpt.tokenizers.len() != languages.len() {
        return Err(CliError::checkpoint(format!(
            "{} tokenizers for {} languages",
            ckpt.tokenizers.len(),
            languages.len()
        )));
    }
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut payload = Vec::new();
    for (_, p) in model.params.iter() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        dtype: "f32".into(),
        config: (&model.config).into(),
        languages: languages.clone(),
        manifest,
        tokenizers: languages
            .iter()
            .zip(&ckpt.tokenizers)
            .map(|(l, t)| (l.clone(), tokenizer_record(t)))
            .collect(),
        step: ckpt.step,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CliError::checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(CliError::checkpoint(format!("truncated file while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Splits a checkpoint into its parsed header and verified payload.
pub fn decode_parts(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut rest = bytes;
    if take(&mut rest, 4, "magic")? != MAGIC {
        return Err(CliError::checkpoint("not an ILMT checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CliError::checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CliError::checkpoint("header length overflows"))?;
    let json = take(&mut rest, header_len, "header")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CliError::checkpoint(format!("bad header: {e}")))?;
    if rest.len() < 4 {
        return Err(CliError::checkpoint("truncated file while reading checksum"));
    }
    let (payload, crc) = rest.split_at(rest.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(CliError::checkpoint(format!(
            "payload checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok((header, payload))
}

/// Rebuilds the model and tokenizers, checking the manifest against the
/// architecture implied by the configuration.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = decode_parts(bytes)?;
    if header.dtype != "f32" {
        return Err(CliError::checkpoint(format!("unsupported dtype `{}`", header.dtype)));
    }
    let config: ModelConfig = header.config.into();
    if config.languages != header.languages {
        return Err(CliError::checkpoint("language list disagrees with the configuration"));
    }
    let mut model = MultilingualModel::<f32>::new(config)?;
    if header.manifest.len() != model.params.len() {
        return Err(CliError::checkpoint(format!(
            "manifest lists {} parameters, the configuration defines {}",
            header.manifest.len(),
            model.params.len()
        )));
    }
    let mut seen = vec![false; model.params.len()];
    for entry in &header.manifest {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| CliError::checkpoint(format!("unknown parameter `{}`", entry.name)))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(CliError::checkpoint(format!("parameter `{}` listed twice", entry.name)));
        }
        let expected = model.params.value(id).shape().to_vec();
        if entry.shape != expected {
            return Err(CliError::checkpoint(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let n: usize = expected.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| CliError::checkpoint("offset overflows"))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| CliError::checkpoint(format!("parameter `{}` runs past the payload", entry.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model.params.set_value(id, Tensor::new(&expected, data)?)?;
    }
    let mut tokenizers = Vec::new();
    if !header.tokenizers.is_empty() {
        for (lang, &size) in model.config.languages.iter().zip(&model.config.vocab_sizes) {
            let rec = header
                .tokenizers
                .get(lang)
                .ok_or_else(|| CliError::checkpoint(format!("no tokenizer for language `{lang}`")))?;
            let vocab = Vocabulary::from_text(&rec.vocab)?;
            if vocab.len() != size {
                return Err(CliError::checkpoint(format!(
                    "tokenizer for `{lang}` has {} entries, the model expects {size}",
                    vocab.len()
                )));
            }
            tokenizers.push(Tokenizer {
                model: BpeModel::from_text(&rec.merges, rec.target_vocab_size.max(size))?,
                vocab,
            });
        }
    }
    Ok(Checkpoint {
        model,
        tokenizers,
        step: header.step,
    })
}

/// Writes through a temporary file and renames, so readers never see a
/// partial checkpoint.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::new(e.code, format!("{}: {}", path.display(), e.detail)))
}

/// CRC32 of the payload of an encoded checkpoint.
pub fn payload_crc(bytes: &[u8]) -> Result<u32> {
    let (_, payload) = decode_parts(bytes)?;
    Ok(crc32fast::hash(payload))
}
