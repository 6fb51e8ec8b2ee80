//! Verification of candidate artifacts by controlled edits, and the
//! detection metrics used to compare discovery methods.
//!
//! Every rate here is a ratio of integer counts, so reports reproduce bit
//! for bit at a fixed seed.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_token, Dataset, Instance, Vocab, PAD, RESERVED, SEP};
use crate::error::{Error, Result};
use crate::feature_attr::{saliency, FeatureMethod, SaliencyOptions, TokenSaliency};
use crate::model::{ModelSnapshot, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskTarget {
    Token { token: String },
    Random { seed: u64, trials: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub instance_id: String,
    /// Masked token.
    pub token: String,
    /// 0 for token mode.
    pub trial: usize,
    pub before: usize,
    pub after: usize,
    /// Probability of the originally predicted class before and after.
    pub prob_before: f64,
    pub prob_after: f64,
}

impl FlipRecord {
    pub fn flipped(&self) -> bool {
        self.before != self.after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub target: MaskTarget,
    /// Instances containing the token (token mode) or holding at least one
    /// maskable position (random mode).
    pub n_affected: usize,
    pub n_trials: usize,
    pub n_flipped: usize,
    /// `n_flipped / (n_affected · n_trials)`; 0 when nothing was affected.
    pub flip_fraction: f64,
    /// Mean of `prob_after − prob_before` over the records.
    pub mean_delta: f64,
    pub records: Vec<FlipRecord>,
}

fn summarize(target: MaskTarget, n_affected: usize, n_trials: usize, records: Vec<FlipRecord>) -> FlipReport {
    let n_flipped = records.iter().filter(|r| r.flipped()).count();
    let denom = n_affected * n_trials;
    let (flip_fraction, mean_delta) = if denom == 0 {
        (0.0, 0.0)
    } else {
        let delta: f64 = records.iter().map(|r| r.prob_after - r.prob_before).sum();
        (n_flipped as f64 / denom as f64, delta / records.len() as f64)
    };
    FlipReport {
        target,
        n_affected,
        n_trials,
        n_flipped,
        flip_fraction,
        mean_delta,
        records,
    }
}

fn masked_record(model: &ModelSnapshot, inst: &Instance, token: u32, trial: usize) -> Result<FlipRecord> {
    let before = model.predict_class(inst)?;
    let after = model.predict_class(&mask_token(inst, token))?;
    Ok(FlipRecord {
        instance_id: inst.id.clone(),
        token: model.vocab.token(token).to_string(),
        trial,
        before: before.class,
        after: after.class,
        prob_before: before.probabilities[before.class],
        prob_after: after.probabilities[before.class],
    })
}

/// Mask every occurrence of `token` in each instance containing it and
/// count argmax changes. Reserved and unknown tokens affect nothing.
pub fn mask_flip_rate(model: &ModelSnapshot, dataset: &Dataset, token: &str) -> Result<FlipReport> {
    model.check_dataset(dataset)?;
    let target = MaskTarget::Token {
        token: token.to_string(),
    };
    let id = match model.vocab.get(token) {
        Some(id) if id as usize >= RESERVED => id,
        _ => return Ok(summarize(target, 0, 1, Vec::new())),
    };
    let records = dataset
        .instances
        .par_iter()
        .filter(|inst| inst.contains(id))
        .map(|inst| masked_record(model, inst, id, 0))
        .collect::<Result<Vec<_>>>()?;
    let n = records.len();
    Ok(summarize(target, n, 1, records))
}

/// Random-token baseline: in each trial, each instance has one uniformly
/// chosen position drawn (PAD and SEP excluded) and every occurrence of
/// that position's token masked.
pub fn mask_flip_random(model: &ModelSnapshot, dataset: &Dataset, seed: u64, trials: usize) -> Result<FlipReport> {
    model.check_dataset(dataset)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::new();
    let mut n_affected = 0;
    let eligible: Vec<Vec<u32>> = dataset
        .instances
        .iter()
        .map(|inst| inst.model_input().into_iter().filter(|&t| t != PAD && t != SEP).collect())
        .collect();
    for ids in &eligible {
        n_affected += usize::from(!ids.is_empty());
    }
    for trial in 0..trials {
        for (i, ids) in eligible.iter().enumerate() {
            if !ids.is_empty() {
                draws.push((i, ids[rng.random_range(0..ids.len())], trial));
            }
        }
    }
    let records = draws
        .par_iter()
        .map(|&(i, token, trial)| masked_record(model, &dataset.instances[i], token, trial))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(MaskTarget::Random { seed, trials }, n_affected, trials, records))
}

pub fn mask_flip(model: &ModelSnapshot, dataset: &Dataset, target: &MaskTarget) -> Result<FlipReport> {
    match target {
        MaskTarget::Token { token } => mask_flip_rate(model, dataset, token),
        MaskTarget::Random { seed, trials } => mask_flip_random(model, dataset, *seed, *trials),
    }
}

/// Input text, optionally paired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
}

impl TextInput {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            text_b: None,
        }
    }

    pub fn paired(text: impl Into<String>, text_b: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            text_b: Some(text_b.into()),
        }
    }

    pub fn encode(&self, model: &ModelSnapshot, id: &str) -> Instance {
        model.encode_text(id, &self.text, self.text_b.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditComparison {
    pub before: Prediction,
    pub after: Prediction,
    /// Change in the probability of the class predicted before the edit.
    pub delta_prob: f64,
    pub flipped: bool,
    /// Saliency of the edited input toward its new prediction.
    pub saliency_after: TokenSaliency,
}

/// Predict on both inputs and explain the edited one.
///
/// Plain gradient saliency is constant across positions under mean
/// pooling, so callers wanting per-token contrast should pass IG.
pub fn edit_and_compare(
    model: &ModelSnapshot,
    original: &TextInput,
    edited: &TextInput,
    method: FeatureMethod,
    options: &SaliencyOptions,
) -> Result<EditComparison> {
    let a = original.encode(model, "original");
    let b = edited.encode(model, "edited");
    if b.segment_a.is_empty() && b.segment_b.as_ref().is_none_or(|s| s.is_empty()) {
        return Err(Error::InvalidParameter("edited text has no tokens".into()));
    }
    let before = model.predict_class(&a)?;
    let after = model.predict_class(&b)?;
    let saliency_after = saliency(model, &b, after.class, method, options)?;
    Ok(EditComparison {
        delta_prob: after.probabilities[before.class] - before.probabilities[before.class],
        flipped: before.class != after.class,
        before,
        after,
        saliency_after,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HitsAtK,
    OverlapRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub metric: Metric,
    pub method: String,
    pub predicate: String,
    pub k: usize,
    pub n: usize,
    pub hits: usize,
    pub value: f64,
}

/// Whether a token spells an integer rating from 1 to 10.
pub fn is_rating_token(token: &str) -> bool {
    token.parse::<u32>().is_ok_and(|n| (1..=10).contains(&n))
}

/// Fraction of lists whose first `k` entries contain a token satisfying
/// `predicate`.
pub fn hits_at_k(
    lists: &[Vec<String>],
    predicate: impl Fn(&str) -> bool,
    k: usize,
    method: &str,
    predicate_name: &str,
) -> Result<DetectionReport> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if lists.is_empty() {
        return Err(Error::InvalidParameter("no top-token lists to score".into()));
    }
    let hits = lists
        .iter()
        .filter(|l| l.iter().take(k).any(|t| predicate(t)))
        .count();
    Ok(DetectionReport {
        metric: Metric::HitsAtK,
        method: method.to_string(),
        predicate: predicate_name.to_string(),
        k,
        n: lists.len(),
        hits,
        value: hits as f64 / lists.len() as f64,
    })
}

fn log_choose(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Expected hits@k of a method that returns `k` distinct tokens drawn
/// uniformly from each instance's eligible tokens: the mean over instances
/// of `1 − C(u − a, k) / C(u, k)`, with `u` distinct eligible tokens of
/// which `a` satisfy the predicate.
pub fn random_hits_expectation(
    model: &ModelSnapshot,
    dataset: &Dataset,
    predicate: impl Fn(&str) -> bool,
    k: usize,
    exclusions: &HashSet<String>,
) -> Result<f64> {
    if dataset.is_empty() || k == 0 {
        return Err(Error::InvalidParameter("need instances and k >= 1".into()));
    }
    let total: f64 = dataset
        .instances
        .iter()
        .map(|inst| {
            let distinct: BTreeSet<&str> = inst
                .model_input()
                .into_iter()
                .filter(|&t| t != PAD && t != SEP)
                .map(|t| model.vocab.token(t))
                .filter(|t| !exclusions.contains(*t))
                .collect();
            let u = distinct.len();
            let a = distinct.iter().filter(|t| predicate(t)).count();
            if a == 0 {
                0.0
            } else if u - a < k {
                1.0
            } else {
                1.0 - (log_choose(u - a, k) - log_choose(u, k)).exp()
            }
        })
        .sum();
    Ok(total / dataset.len() as f64)
}

fn segments(inst: &Instance) -> Result<(&[u32], &[u32])> {
    match &inst.segment_b {
        Some(b) => Ok((&inst.segment_a, b)),
        None => Err(Error::Unpaired(inst.id.clone())),
    }
}

/// Fraction of `(train instance, surfaced token)` cases where the token
/// occurs in both segments of the instance.
pub fn overlap_rate(vocab: &Vocab, cases: &[(&Instance, &str)], method: &str) -> Result<DetectionReport> {
    if cases.is_empty() {
        return Err(Error::InvalidParameter("no cases to score".into()));
    }
    let mut hits = 0;
    for (inst, token) in cases {
        let (a, b) = segments(inst)?;
        if let Some(id) = vocab.get(token).filter(|&id| id as usize >= RESERVED) {
            hits += usize::from(a.contains(&id) && b.contains(&id));
        }
    }
    Ok(DetectionReport {
        metric: Metric::OverlapRate,
        method: method.to_string(),
        predicate: "token in both segments".into(),
        k: 1,
        n: cases.len(),
        hits,
        value: hits as f64 / cases.len() as f64,
    })
}

/// Overlap rate of a method that surfaces one uniformly chosen distinct
/// token per instance: the mean over instances of the fraction of distinct
/// tokens that occur in both segments.
pub fn random_overlap_expectation(instances: &[&Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidParameter("no instances".into()));
    }
    let mut total = 0.0;
    for inst in instances {
        let (a, b) = segments(inst)?;
        let a: BTreeSet<u32> = a.iter().copied().filter(|&t| t != PAD).collect();
        let b: BTreeSet<u32> = b.iter().copied().filter(|&t| t != PAD).collect();
        let distinct = a.union(&b).count();
        if distinct > 0 {
            total += a.intersection(&b).count() as f64 / distinct as f64;
        }
    }
    Ok(total / instances.len() as f64)
}
