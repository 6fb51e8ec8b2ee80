//! Corpus ingestion, vocabulary, splitting and synthetic artifact injection.
//!
//! Text flows through two representations. An [`Example`] holds token
//! strings and is what loaders, splitters, injectors and the count-based
//! baselines operate on. Once a [`Vocab`] exists, a [`Corpus`] is encoded into
//! a [`Dataset`] of id-sequence [`Instance`]s, which is what the model and all
//! attribution code consume.

mod inject;
mod io;
mod split;
pub mod synth;
mod tokenize;
mod vocab;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::sha256_hex;

pub use inject::{
    inject, ArtifactKind, ArtifactSpec, InjectionLog, InjectionRecord, PositionRule, TriggerLabel,
};
pub use io::{load_jsonl, parse_jsonl, write_jsonl};
pub use split::split;
pub use tokenize::{is_noun_like, tokenize};
pub use vocab::{Vocab, MASK, MASK_TOKEN, OOV, OOV_TOKEN, PAD, PAD_TOKEN, RESERVED, SEP, SEP_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// Build a vocabulary from `corpus`; see [`Vocab::build`].
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocab> {
    Vocab::build(corpus, min_freq)
}

/// A labeled text instance at the token-string level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens_a: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_b: Option<Vec<String>>,
    pub label: usize,
    pub raw_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_b: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, text: &str, label: usize) -> Self {
        Self {
            id: id.into(),
            tokens_a: tokenize(text),
            tokens_b: None,
            label,
            raw_a: text.to_string(),
            raw_b: None,
        }
    }

    pub fn paired(id: impl Into<String>, text_a: &str, text_b: &str, label: usize) -> Self {
        Self {
            id: id.into(),
            tokens_a: tokenize(text_a),
            tokens_b: Some(tokenize(text_b)),
            label,
            raw_a: text_a.to_string(),
            raw_b: Some(text_b.to_string()),
        }
    }

    /// All tokens of both segments, in order.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.tokens_a
            .iter()
            .chain(self.tokens_b.iter().flat_map(|b| b.iter()))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens().any(|t| t == token)
    }
}

/// An ordered, labeled collection of [`Example`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub class_names: Vec<String>,
    pub role: Role,
}

impl Corpus {
    pub fn new(examples: Vec<Example>, class_names: Vec<String>, role: Role) -> Result<Self> {
        let corpus = Self {
            examples,
            class_names,
            role,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.examples.len());
        for ex in &self.examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate instance id `{}`",
                    ex.id
                )));
            }
            if ex.label >= self.class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: ex.label,
                    num_classes: self.class_names.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Encode every example against `vocab`.
    pub fn encode(&self, vocab: &Vocab) -> Dataset {
        let instances = self.examples.iter().map(|ex| vocab.encode(ex)).collect();
        Dataset {
            instances,
            class_names: self.class_names.clone(),
            role: self.role,
            vocab_hash: vocab.hash().to_string(),
        }
    }
}

/// A labeled instance encoded as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub segment_a: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_b: Option<Vec<u32>>,
    pub label: usize,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<String>,
}

impl Instance {
    /// Token ids fed to the model: `segment_a ++ [SEP] ++ segment_b` for
    /// paired instances, `segment_a` otherwise.
    pub fn model_input(&self) -> Vec<u32> {
        match &self.segment_b {
            None => self.segment_a.clone(),
            Some(b) => {
                let mut ids = Vec::with_capacity(self.segment_a.len() + b.len() + 1);
                ids.extend_from_slice(&self.segment_a);
                ids.push(SEP);
                ids.extend_from_slice(b);
                ids
            }
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        self.segment_a.contains(&id) || self.segment_b.as_ref().is_some_and(|b| b.contains(&id))
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }
}

/// Replace every occurrence of `token` (in either segment) by [`MASK`].
///
/// An absent token leaves the instance unchanged.
pub fn mask_token(instance: &Instance, token: u32) -> Instance {
    let mut out = instance.clone();
    if !instance.contains(token) {
        return out;
    }
    let mask = |seg: &mut Vec<u32>| {
        for id in seg.iter_mut().filter(|id| **id == token) {
            *id = MASK;
        }
    };
    mask(&mut out.segment_a);
    if let Some(b) = out.segment_b.as_mut() {
        mask(b);
    }
    out.annotations.push(format!("masked:{token}"));
    out
}

/// An encoded, labeled collection of [`Instance`]s tied to one vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub class_names: Vec<String>,
    pub role: Role,
    pub vocab_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Content hash over instances, class names and vocabulary.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&(&self.instances, &self.class_names, &self.vocab_hash))
            .expect("dataset serializes");
        sha256_hex(&bytes)
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn subset(&self, keep: impl Fn(&Instance) -> bool) -> Dataset {
        Dataset {
            instances: self.instances.iter().filter(|i| keep(i)).cloned().collect(),
            class_names: self.class_names.clone(),
            role: self.role,
            vocab_hash: self.vocab_hash.clone(),
        }
    }
}
