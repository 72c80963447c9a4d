//! On-disk formats: JSONL datasets, vocabulary JSON and checkpoint
//! directories. Every writer goes through a temporary file and a rename so
//! readers never see a half-written artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use codereviewer_core::model::{Checkpoint, ModelConfig, Transformer};
use codereviewer_core::optim::AdamState;
use codereviewer_core::tensor::Matrix;
use codereviewer_core::tokenizer::{self, BYTE_OFFSET};
use codereviewer_core::Vocab;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `path` by streaming into a sibling temporary file and renaming it
/// into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), FormatError>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        fill(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), FormatError> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Strict JSONL reader: the first bad line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    String::from_utf8_lossy(&bytes)
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| FormatError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Parses a config from TOML or JSON, chosen by file extension.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| invalid(path, e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|source| FormatError::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        }),
        _ => Err(invalid(path, "config must be .toml or .json")),
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    /// Base64 byte strings of the ids from the first byte token upward.
    tokens: Vec<String>,
    merges: Vec<(u32, u32)>,
    specials: BTreeMap<String, u32>,
    fingerprint: String,
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<(), FormatError> {
    let file = VocabFile {
        tokens: vocab.tokens().iter().map(|t| B64.encode(t)).collect(),
        merges: vocab.merges().to_vec(),
        specials: tokenizer::specials().collect(),
        fingerprint: format!("{:016x}", vocab.fingerprint()),
    };
    write_json(path, &file)
}

pub fn load_vocab(path: &Path) -> Result<Vocab, FormatError> {
    let file: VocabFile = read_json(path)?;
    let expected: BTreeMap<String, u32> = tokenizer::specials().collect();
    if file.specials != expected {
        return Err(invalid(path, "special token table differs from this build"));
    }
    let tokens = file
        .tokens
        .iter()
        .map(|t| B64.decode(t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(path, e.to_string()))?;
    let vocab = Vocab::from_parts(tokens, file.merges).map_err(|e| invalid(path, e.to_string()))?;
    if format!("{:016x}", vocab.fingerprint()) != file.fingerprint {
        return Err(invalid(path, "vocabulary fingerprint mismatch"));
    }
    debug_assert_eq!(vocab.tokens().len() + BYTE_OFFSET as usize, vocab.len());
    Ok(vocab)
}

const CONFIG_FILE: &str = "config.json";
const INDEX_FILE: &str = "tensors.json";
const DATA_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    step: u64,
    vocab_fingerprint: String,
    /// Optimizer step count when moments are stored.
    adam_t: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the data file, in f32 elements.
    offset: usize,
}

/// Saves a checkpoint directory: config, tensor index, little-endian f32
/// tensor data (parameters, then Adam moments as `adam.m.*`/`adam.v.*`) and
/// the vocabulary.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint<f32>, vocab: &Vocab) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let params = ckpt.model.params();
    let mut tensors: Vec<(String, &Matrix<f32>)> = params.iter().map(|(n, m)| (n.to_string(), m)).collect();
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for (i, m) in moments.iter().enumerate() {
                tensors.push((format!("{prefix}{}", params.entry(i).name), m));
            }
        }
    }
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in &tensors {
        index.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
    }
    write_atomic(&dir.join(DATA_FILE), |w| {
        for (_, m) in &tensors {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })?;
    write_json(&dir.join(INDEX_FILE), &index)?;
    save_vocab(&dir.join(VOCAB_FILE), vocab)?;
    write_json(
        &dir.join(CONFIG_FILE),
        &CheckpointMeta {
            model: ckpt.model.config().clone(),
            step: ckpt.step,
            vocab_fingerprint: format!("{:016x}", ckpt.vocab_fingerprint),
            adam_t: ckpt.optimizer.as_ref().map(|o| o.t),
        },
    )
}

/// Loads a checkpoint directory and the vocabulary stored with it.
pub fn load_checkpoint(dir: &Path) -> Result<(Checkpoint<f32>, Vocab), FormatError> {
    let meta: CheckpointMeta = read_json(&dir.join(CONFIG_FILE))?;
    let index: Vec<TensorEntry> = read_json(&dir.join(INDEX_FILE))?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    if bytes.len() % 4 != 0 {
        return Err(invalid(&data_path, "length is not a multiple of 4"));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut params = Vec::new();
    let mut moments: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
    for e in index {
        let end = e.offset + e.rows * e.cols;
        let slice = data
            .get(e.offset..end)
            .ok_or_else(|| invalid(&data_path, format!("tensor {} runs past the data", e.name)))?;
        let m = Matrix::from_vec(e.rows, e.cols, slice.to_vec());
        if e.name.starts_with("adam.") {
            moments.insert(e.name, m);
        } else {
            params.push((e.name, m));
        }
    }
    let model = Transformer::from_params(&meta.model, params).map_err(|e| invalid(dir, e.to_string()))?;
    let optimizer = match meta.adam_t {
        None => None,
        Some(t) => {
            let mut state = AdamState::new(model.params());
            for i in 0..model.params().len() {
                let name = &model.params().entry(i).name;
                for (prefix, slot) in [("adam.m.", &mut state.m[i]), ("adam.v.", &mut state.v[i])] {
                    let m = moments
                        .remove(&format!("{prefix}{name}"))
                        .ok_or_else(|| invalid(dir, format!("missing {prefix}{name}")))?;
                    if m.shape() != slot.shape() {
                        return Err(invalid(dir, format!("{prefix}{name} has the wrong shape")));
                    }
                    *slot = m;
                }
            }
            state.t = t;
            Some(state)
        }
    };
    let vocab = load_vocab(&dir.join(VOCAB_FILE))?;
    let vocab_fingerprint =
        u64::from_str_radix(&meta.vocab_fingerprint, 16).map_err(|e| invalid(dir, e.to_string()))?;
    if vocab_fingerprint != vocab.fingerprint() {
        return Err(invalid(dir, "checkpoint was trained with a different vocabulary"));
    }
    Ok((
        Checkpoint {
            model,
            optimizer,
            step: meta.step,
            vocab_fingerprint,
        },
        vocab,
    ))
}
