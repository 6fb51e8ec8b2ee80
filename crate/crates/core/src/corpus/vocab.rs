use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::{Corpus, Example, Instance};
use crate::error::{Error, Result};
use crate::report::sha256_hex;

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
pub const MASK: u32 = 2;
pub const SEP: u32 = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const OOV_TOKEN: &str = "[OOV]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 4;

/// Token ↔ id map. Ids `0..4` are reserved; the rest are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_frequency: usize,
    hash: String,
}

impl Vocab {
    /// Count every token in `corpus` and keep those seen at least
    /// `min_freq` times. Ids are assigned by descending frequency, ties
    /// broken lexicographically.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in &corpus.examples {
            for t in ex.tokens() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()));
        vocab.min_frequency = min_freq;
        Ok(vocab)
    }

    /// Build from an ordered list of non-reserved tokens.
    pub fn from_tokens(list: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = [PAD_TOKEN, OOV_TOKEN, MASK_TOKEN, SEP_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(list);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let hash = sha256_hex(tokens.join("\n").as_bytes());
        Self {
            tokens,
            index,
            min_frequency: 1,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn with_min_frequency(mut self, min_freq: usize) -> Self {
        self.min_frequency = min_freq;
        self
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Id of `token`, or [`OOV`] when unknown. Reserved marker strings are
    /// treated as ordinary (unknown) text.
    pub fn id(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) if id as usize >= RESERVED => id,
            _ => OOV,
        }
    }

    /// Id of `token` if it has its own entry.
    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(OOV_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ordinary (non-reserved) tokens in id order.
    pub fn ordinary_tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode(&self, ex: &Example) -> Instance {
        let raw_text = match &ex.raw_b {
            Some(b) => format!("{}\t{}", ex.raw_a, b),
            None => ex.raw_a.clone(),
        };
        Instance {
            id: ex.id.clone(),
            segment_a: self.encode_tokens(&ex.tokens_a),
            segment_b: ex.tokens_b.as_ref().map(|b| self.encode_tokens(b)),
            label: ex.label,
            raw_text,
            annotations: Vec::new(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }

    /// Write non-reserved tokens one per line; line `n` holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.ordinary_tokens().join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(text.lines().map(str::to_string)))
    }
}
