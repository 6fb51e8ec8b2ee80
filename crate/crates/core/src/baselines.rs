//! Model-free token–label association statistics.
//!
//! Both statistics read token strings straight from a [`Corpus`], so they
//! can run before any vocabulary or model exists.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLabelStat {
    pub token: String,
    pub label: usize,
    pub value: f64,
    /// Occurrences of the token over all labels (PMI: token count;
    /// competency: documents containing it).
    pub n_token: usize,
    /// The same count restricted to `label`.
    pub n_token_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRanking {
    pub label: usize,
    pub class_name: String,
    pub stats: Vec<TokenLabelStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiReport {
    pub smoothing_k: f64,
    pub vocabulary_size: usize,
    pub per_label: Vec<LabelRanking>,
}

impl PmiReport {
    pub fn for_label(&self, label: usize) -> Option<&[TokenLabelStat]> {
        self.per_label.iter().find(|r| r.label == label).map(|r| r.stats.as_slice())
    }
}

fn rank(stats: &mut [TokenLabelStat]) {
    stats.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then_with(|| a.token.cmp(&b.token))
            .then(a.label.cmp(&b.label))
    });
}

/// `PMI(t, l) = ln p(t|l) − ln p(t)` over token occurrences, with `k`
/// added to every (token, label) cell:
///
/// `p(t|l) = (c(t,l) + k) / (N_l + k|V|)` and
/// `p(t) = (c(t) + k|L|) / (N + k|V||L|)`.
///
/// Each label's list holds the tokens observed with it, by descending PMI.
pub fn pmi(corpus: &Corpus, smoothing_k: f64) -> Result<PmiReport> {
    if !(smoothing_k >= 0.0 && smoothing_k.is_finite()) {
        return Err(Error::InvalidParameter("smoothing_k must be finite and >= 0".into()));
    }
    let n_labels = corpus.num_classes();
    let mut cell: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut per_label = vec![0usize; n_labels];
    for ex in &corpus.examples {
        for t in ex.tokens() {
            cell.entry(t.as_str()).or_insert_with(|| vec![0; n_labels])[ex.label] += 1;
            per_label[ex.label] += 1;
        }
    }
    let v = cell.len() as f64;
    let l = n_labels as f64;
    let total: usize = per_label.iter().sum();
    let k = smoothing_k;
    let rankings = (0..n_labels)
        .map(|label| {
            let mut stats: Vec<TokenLabelStat> = cell
                .iter()
                .filter(|(_, c)| c[label] > 0)
                .map(|(&token, c)| {
                    let ct: usize = c.iter().sum();
                    let p_cond = (c[label] as f64 + k) / (per_label[label] as f64 + k * v);
                    let p_marg = (ct as f64 + k * l) / (total as f64 + k * v * l);
                    TokenLabelStat {
                        token: token.to_string(),
                        label,
                        value: p_cond.ln() - p_marg.ln(),
                        n_token: ct,
                        n_token_label: c[label],
                    }
                })
                .collect();
            rank(&mut stats);
            LabelRanking {
                label,
                class_name: corpus.class_names[label].clone(),
                stats,
            }
        })
        .collect();
    Ok(PmiReport {
        smoothing_k,
        vocabulary_size: cell.len(),
        per_label: rankings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetencyReport {
    pub num_classes: usize,
    /// Every observed (token, label) pair, by descending z.
    pub stats: Vec<TokenLabelStat>,
}

impl CompetencyReport {
    pub fn for_label(&self, label: usize) -> Vec<&TokenLabelStat> {
        self.stats.iter().filter(|s| s.label == label).collect()
    }
}

/// Binomial z-statistic of `p̂(l|t)` against the uniform null
/// `p₀ = 1/|L|`: `z = (p̂ − p₀) / √(p₀(1 − p₀)/n_t)`, with `n_t` the number of
/// documents containing `t`.
pub fn competency(corpus: &Corpus) -> Result<CompetencyReport> {
    let n_labels = corpus.num_classes();
    if n_labels < 2 {
        return Err(Error::InvalidParameter("competency needs at least 2 classes".into()));
    }
    let mut docs: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for ex in &corpus.examples {
        let present: BTreeSet<&str> = ex.tokens().map(String::as_str).collect();
        for t in present {
            docs.entry(t).or_insert_with(|| vec![0; n_labels])[ex.label] += 1;
        }
    }
    let p0 = 1.0 / n_labels as f64;
    let mut stats: Vec<TokenLabelStat> = docs
        .iter()
        .flat_map(|(&token, c)| {
            let n: usize = c.iter().sum();
            let se = (p0 * (1.0 - p0) / n as f64).sqrt();
            c.iter().enumerate().filter(|(_, &cl)| cl > 0).map(move |(label, &cl)| TokenLabelStat {
                token: token.to_string(),
                label,
                value: (cl as f64 / n as f64 - p0) / se,
                n_token: n,
                n_token_label: cl,
            })
        })
        .collect();
    rank(&mut stats);
    Ok(CompetencyReport {
        num_classes: n_labels,
        stats,
    })
}
