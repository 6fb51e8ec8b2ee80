use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Dense, Mat, ModelConfig, ModelSnapshot, TrainingMetrics};

const FORMAT: &str = "artiscope-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    snapshot_hash: String,
    vocab_hash: String,
    min_frequency: usize,
    vocab: Vec<String>,
    config: ModelConfig,
    embeddings: Mat,
    #[serde(default)]
    hidden: Option<Dense>,
    head: Dense,
    metrics: TrainingMetrics,
}

/// Write `model` as a self-describing JSON checkpoint.
pub fn save_checkpoint(model: &ModelSnapshot, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        snapshot_hash: model.hash(),
        vocab_hash: model.vocab.hash().to_string(),
        min_frequency: model.vocab.min_frequency(),
        vocab: model.vocab.ordinary_tokens().to_vec(),
        config: model.config.clone(),
        embeddings: model.embeddings.clone(),
        hidden: model.hidden.clone(),
        head: model.head.clone(),
        metrics: model.metrics.clone(),
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, verifying its vocabulary and parameter hashes and
/// matrix shapes.
pub fn load_checkpoint(path: &Path) -> Result<ModelSnapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}` version {}",
            file.format, file.version
        )));
    }
    file.config.validate()?;
    let vocab = Vocab::from_tokens(file.vocab).with_min_frequency(file.min_frequency);
    if vocab.hash() != file.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: file.vocab_hash,
            found: vocab.hash().to_string(),
        });
    }
    let c = &file.config;
    let shape_ok = |m: &Mat, rows: usize, cols: usize| m.rows == rows && m.cols == cols && m.data.len() == rows * cols;
    let mut ok = shape_ok(&file.embeddings, vocab.len(), c.embedding_dim)
        && shape_ok(&file.head.weight, c.num_classes, c.head_input_dim())
        && file.head.bias.len() == c.num_classes;
    ok &= match (&file.hidden, c.hidden_dim) {
        (None, 0) => true,
        (Some(l), h) if h > 0 => shape_ok(&l.weight, h, c.embedding_dim) && l.bias.len() == h,
        _ => false,
    };
    if !ok {
        return Err(Error::Checkpoint("parameter shapes do not match config".into()));
    }
    let model = ModelSnapshot {
        config: file.config,
        vocab,
        embeddings: file.embeddings,
        hidden: file.hidden,
        head: file.head,
        metrics: file.metrics,
    };
    let hash = model.hash();
    if hash != file.snapshot_hash {
        return Err(Error::Checkpoint(format!(
            "parameter hash mismatch: recorded {}, computed {hash}",
            file.snapshot_hash
        )));
    }
    Ok(model)
}

/// Precomputed per-token vectors, for emulating a frozen external encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedEmbeddings {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl PretrainedEmbeddings {
    /// Parse lines of `token<TAB>v1 v2 … vd`. Blank lines are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut dim = None;
        let mut vectors = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::MalformedLine {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (token, rest) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected token<TAB>values".into()))?;
            let values: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}"))))
                .collect::<Result<_>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            match dim {
                None if values.is_empty() => return Err(bad("empty vector".into())),
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(bad(format!("expected {d} values, found {}", values.len())))
                }
                _ => {}
            }
            vectors.insert(token.to_string(), values);
        }
        let dim = dim.ok_or(Error::EmptyCorpus)?;
        Ok(Self { dim, vectors })
    }
}

pub fn load_pretrained(path: &Path) -> Result<PretrainedEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PretrainedEmbeddings::parse(&text, path)
}
