//! Test-side feature attribution: gradient saliency (G), Integrated
//! Gradients (IG), top-token selection and corpus-level aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{grad_embeddings, ModelSnapshot, PooledScalar, TargetLogit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureMethod {
    G,
    IG,
}

impl fmt::Display for FeatureMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMethod::G => "G",
            FeatureMethod::IG => "IG",
        })
    }
}

impl std::str::FromStr for FeatureMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "G" => Ok(FeatureMethod::G),
            "IG" => Ok(FeatureMethod::IG),
            _ => Err(Error::InvalidParameter(format!("unknown feature method `{s}`"))),
        }
    }
}

/// Reference input for Integrated Gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgBaseline {
    /// Every position takes the PAD embedding (the zero vector).
    #[default]
    Pad,
    /// Every position takes the MASK embedding.
    Mask,
}

/// How scores are ordered when picking tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    #[default]
    Signed,
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyOptions {
    pub steps: usize,
    pub baseline: IgBaseline,
    pub rank_mode: RankMode,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        Self {
            steps: 64,
            baseline: IgBaseline::Pad,
            rank_mode: RankMode::Signed,
        }
    }
}

/// Signed per-position scores for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSaliency {
    pub instance_id: String,
    pub method: FeatureMethod,
    pub target_class: usize,
    /// Model-input tokens, including `[SEP]` for paired instances.
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub scores: Vec<f64>,
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("saliency"))
    }
}

/// Mean over embedding dimensions of `∂scalar/∂e_j`, per position.
pub(crate) fn gradient_scores(
    model: &ModelSnapshot,
    instance: &Instance,
    scalar: &dyn PooledScalar,
) -> Result<Vec<f64>> {
    let d = model.dim() as f64;
    let scores: Vec<f64> = grad_embeddings(model, instance, scalar)?
        .iter()
        .map(|g| g.iter().sum::<f64>() / d)
        .collect();
    check_finite(&scores)?;
    Ok(scores)
}

/// IG of `scalar` along the straight line from the baseline embeddings to
/// the actual ones, with a midpoint Riemann sum of `steps` terms.
///
/// Returns per-position scores (summed over dimensions) and the two
/// endpoint values `(scalar(x), scalar(baseline))`.
pub(crate) fn integrated_scores(
    model: &ModelSnapshot,
    instance: &Instance,
    scalar: &dyn PooledScalar,
    steps: usize,
    baseline: IgBaseline,
) -> Result<(Vec<f64>, f64, f64)> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be >= 1".into()));
    }
    let (ids, rows, n) = model.position_embeddings(instance)?;
    let d = model.dim();
    let base_row = match baseline {
        IgBaseline::Pad => model.embeddings.row(PAD as usize).to_vec(),
        IgBaseline::Mask => model.embeddings.row(MASK as usize).to_vec(),
    };
    let pooled = model.pool(&ids, &rows);
    let included: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    let base_pooled = if n == 0 { vec![0.0; d] } else { base_row.clone() };
    let at_end = scalar.value(model, &pooled)?;
    let at_base = scalar.value(model, &base_pooled)?;
    if n == 0 {
        return Ok((vec![0.0; ids.len()], at_end, at_base));
    }
    // r(α) = base + α (r − base), since every included position shares the
    // same baseline row
    let mut avg = vec![0.0; d];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let r: Vec<f64> = base_pooled
            .iter()
            .zip(&pooled)
            .map(|(b, x)| b + alpha * (x - b))
            .collect();
        let g = scalar.gradient(model, &r)?;
        for (a, gi) in avg.iter_mut().zip(g) {
            *a += gi;
        }
    }
    let scale = 1.0 / (steps as f64 * n as f64);
    let scores: Vec<f64> = rows
        .iter()
        .zip(&included)
        .map(|(row, &inc)| {
            if !inc {
                return 0.0;
            }
            row.iter()
                .zip(&base_row)
                .zip(&avg)
                .map(|((e, b), g)| (e - b) * g * scale)
                .sum()
        })
        .collect();
    check_finite(&scores)?;
    Ok((scores, at_end, at_base))
}

fn saliency_from(
    model: &ModelSnapshot,
    instance: &Instance,
    method: FeatureMethod,
    target_class: usize,
    scores: Vec<f64>,
) -> TokenSaliency {
    let token_ids = instance.model_input();
    TokenSaliency {
        instance_id: instance.id.clone(),
        method,
        target_class,
        tokens: model.vocab.decode(&token_ids),
        token_ids,
        scores,
    }
}

fn check_class(model: &ModelSnapshot, target_class: usize) -> Result<()> {
    if target_class >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            num_classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Gradient saliency: mean over dimensions of `∂ logit_target / ∂ e_j`.
///
/// Under mean pooling every included position receives the same score.
pub fn grad_saliency(
    model: &ModelSnapshot,
    instance: &Instance,
    target_class: usize,
) -> Result<TokenSaliency> {
    check_class(model, target_class)?;
    let scores = gradient_scores(model, instance, &TargetLogit(target_class))?;
    Ok(saliency_from(model, instance, FeatureMethod::G, target_class, scores))
}

pub fn integrated_gradients(
    model: &ModelSnapshot,
    instance: &Instance,
    target_class: usize,
    steps: usize,
    baseline: IgBaseline,
) -> Result<TokenSaliency> {
    check_class(model, target_class)?;
    let (scores, _, _) =
        integrated_scores(model, instance, &TargetLogit(target_class), steps, baseline)?;
    Ok(saliency_from(model, instance, FeatureMethod::IG, target_class, scores))
}

pub fn saliency(
    model: &ModelSnapshot,
    instance: &Instance,
    target_class: usize,
    method: FeatureMethod,
    options: &SaliencyOptions,
) -> Result<TokenSaliency> {
    match method {
        FeatureMethod::G => grad_saliency(model, instance, target_class),
        FeatureMethod::IG => {
            integrated_gradients(model, instance, target_class, options.steps, options.baseline)
        }
    }
}

/// One selected token with the position and score that selected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub position: usize,
    pub score: f64,
}

/// Which end of the score ordering to take from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    Highest,
    Lowest,
}

/// Distinct tokens at the requested end of the score ordering.
///
/// A token's score is the sum over the positions it occupies, which keeps
/// IG completeness at the token-type level. Positions holding PAD or SEP
/// never qualify, nor do tokens in `exclusions`. `position` is the token's
/// first occurrence; ties go to the earlier one.
pub fn select_tokens(
    tokens: &[String],
    token_ids: &[u32],
    scores: &[f64],
    k: usize,
    exclusions: &HashSet<String>,
    mode: RankMode,
    end: End,
) -> Vec<RankedToken> {
    let key = |s: f64| {
        let v = match mode {
            RankMode::Signed => s,
            RankMode::Magnitude => s.abs(),
        };
        match (mode, end) {
            (RankMode::Signed, End::Lowest) => -v,
            _ => v,
        }
    };
    let mut first: Vec<RankedToken> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for j in 0..scores.len() {
        if token_ids[j] == PAD || token_ids[j] == SEP || exclusions.contains(&tokens[j]) {
            continue;
        }
        match index.get(tokens[j].as_str()) {
            Some(&i) => first[i].score += scores[j],
            None => {
                index.insert(&tokens[j], first.len());
                first.push(RankedToken {
                    token: tokens[j].clone(),
                    position: j,
                    score: scores[j],
                });
            }
        }
    }
    first.sort_by(|a, b| key(b.score).total_cmp(&key(a.score)).then(a.position.cmp(&b.position)));
    first.truncate(k);
    first
}

/// Tokens of the `k` highest scores, signed by default.
pub fn top_k(
    saliency: &TokenSaliency,
    k: usize,
    exclusions: &HashSet<String>,
    mode: RankMode,
) -> Vec<String> {
    select_tokens(
        &saliency.tokens,
        &saliency.token_ids,
        &saliency.scores,
        k,
        exclusions,
        mode,
        End::Highest,
    )
    .into_iter()
    .map(|t| t.token)
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub token: String,
    pub count: usize,
}

/// Rank tallies by count descending, ties lexicographic.
pub(crate) fn ranked_counts(counts: BTreeMap<String, usize>) -> Vec<TokenCount> {
    let mut out: Vec<TokenCount> = counts
        .into_iter()
        .map(|(token, count)| TokenCount { token, count })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequencyTable {
    pub method: FeatureMethod,
    pub k: usize,
    pub exclusions: Vec<String>,
    pub n_instances: usize,
    pub entries: Vec<TokenCount>,
}

impl TokenFrequencyTable {
    pub fn head(&self, n: usize) -> Vec<String> {
        self.entries.iter().take(n).map(|e| e.token.clone()).collect()
    }
}

/// Per-instance top-`k` token lists, explaining each instance's predicted
/// class. Order follows `dataset`.
pub fn top_tokens_per_instance(
    model: &ModelSnapshot,
    dataset: &Dataset,
    method: FeatureMethod,
    k: usize,
    exclusions: &HashSet<String>,
    options: &SaliencyOptions,
) -> Result<Vec<Vec<String>>> {
    model.check_dataset(dataset)?;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    dataset
        .instances
        .par_iter()
        .map(|inst| {
            let target = model.predict_class(inst)?.class;
            let s = saliency(model, inst, target, method, options)?;
            Ok(top_k(&s, k, exclusions, options.rank_mode))
        })
        .collect()
}

/// Count how often each token lands in an instance's top-`k` list.
pub fn aggregate_over_set(
    model: &ModelSnapshot,
    dataset: &Dataset,
    method: FeatureMethod,
    k: usize,
    exclusions: &HashSet<String>,
    options: &SaliencyOptions,
) -> Result<TokenFrequencyTable> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lists = top_tokens_per_instance(model, dataset, method, k, exclusions, options)?;
    let mut counts = BTreeMap::new();
    for token in lists.into_iter().flatten() {
        *counts.entry(token).or_insert(0usize) += 1;
    }
    let mut excl: Vec<String> = exclusions.iter().cloned().collect();
    excl.sort();
    Ok(TokenFrequencyTable {
        method,
        k,
        exclusions: excl,
        n_instances: dataset.len(),
        entries: ranked_counts(counts),
    })
}
