use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::feature_attr::{ranked_counts, select_tokens, End, FeatureMethod, IgBaseline, RankMode, TokenCount};
use crate::instance_attr::{InstanceAttributor, InstanceMethod};
use crate::tfa::TfaScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateParams {
    pub instance_method: InstanceMethod,
    pub feature_method: FeatureMethod,
    /// Percentage of the ranked train set taken from each end, in (0, 50].
    pub k_pct: f64,
    /// Tokens extracted per selected instance.
    pub top_m: usize,
    /// Sorted, deduplicated.
    pub exclusions: Vec<String>,
    pub steps: usize,
    pub baseline: IgBaseline,
    pub rank_mode: RankMode,
}

impl AggregateParams {
    pub fn new(instance_method: InstanceMethod, feature_method: FeatureMethod) -> Self {
        Self {
            instance_method,
            feature_method,
            k_pct: 10.0,
            top_m: 1,
            exclusions: Vec::new(),
            steps: 32,
            baseline: IgBaseline::Pad,
            rank_mode: RankMode::Signed,
        }
    }

    pub fn with_exclusions(mut self, exclusions: impl IntoIterator<Item = String>) -> Self {
        let set: std::collections::BTreeSet<String> = exclusions.into_iter().collect();
        self.exclusions = set.into_iter().collect();
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.k_pct > 0.0 && self.k_pct <= 50.0) {
            return Err(Error::InvalidParameter("k_pct must be in (0, 50]".into()));
        }
        if self.top_m == 0 {
            return Err(Error::InvalidParameter("top_m must be >= 1".into()));
        }
        if self.feature_method == FeatureMethod::IG && self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tokens extracted from one selected training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub test_id: String,
    pub train_id: String,
    pub influence: f64,
    pub tokens: Vec<String>,
}

/// Frequency of extracted tokens over the top-k% and bottom-k% influential
/// training instances, kept as two separate tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// A test instance id, or `"corpus"` after [`corpus_aggregate`].
    pub test_id: String,
    pub params: AggregateParams,
    pub n_tests: usize,
    pub n_train: usize,
    /// Instances selected from each end, per test.
    pub n_selected: usize,
    pub top_set: Vec<TokenCount>,
    pub bottom_set: Vec<TokenCount>,
    pub top_selections: Vec<Selection>,
    pub bottom_selections: Vec<Selection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableView {
    Top,
    Bottom,
    /// Both tables summed.
    Pooled,
}

impl AggregateReport {
    pub fn table(&self, view: TableView) -> Vec<TokenCount> {
        match view {
            TableView::Top => self.top_set.clone(),
            TableView::Bottom => self.bottom_set.clone(),
            TableView::Pooled => {
                let mut counts = BTreeMap::new();
                for e in self.top_set.iter().chain(&self.bottom_set) {
                    *counts.entry(e.token.clone()).or_insert(0) += e.count;
                }
                ranked_counts(counts)
            }
        }
    }

    /// The first `n` tokens of a table.
    pub fn head(&self, view: TableView, n: usize) -> Vec<String> {
        self.table(view).into_iter().take(n).map(|e| e.token).collect()
    }
}

fn tally(selections: &[Selection]) -> Vec<TokenCount> {
    let mut counts = BTreeMap::new();
    for s in selections {
        for t in &s.tokens {
            *counts.entry(t.clone()).or_insert(0usize) += 1;
        }
    }
    ranked_counts(counts)
}

/// Rank the training set for `z_test` (explained under its predicted
/// label), select the top and bottom `k_pct` percent, and count the `top_m`
/// highest-scoring TFA tokens of each top-set instance and the `top_m`
/// lowest-scoring tokens of each bottom-set instance. In magnitude mode both
/// sets use the largest `|score|`.
pub fn aggregated_token_analysis(
    attributor: &InstanceAttributor<'_>,
    z_test: &Instance,
    params: &AggregateParams,
) -> Result<AggregateReport> {
    params.validate()?;
    let train = attributor.train;
    let n = train.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "aggregated token analysis needs at least 2 training instances, got {n}"
        )));
    }
    let n_sel = (n as f64 * params.k_pct / 100.0).floor() as usize;
    if n_sel == 0 {
        return Err(Error::InvalidParameter(format!(
            "k_pct = {} selects no instances from a training set of {n}",
            params.k_pct
        )));
    }
    let z = attributor.model.as_predicted(z_test)?;
    let (order, _) = attributor.ranked_indices(&z, params.instance_method)?;
    let scorer = TfaScorer::new(attributor, &z, params.instance_method)?;
    let exclusions: HashSet<String> = params.exclusions.iter().cloned().collect();

    let pick = |indices: &[usize], end: End| -> Result<Vec<Selection>> {
        indices
            .par_iter()
            .map(|&i| {
                let inst = &train.instances[i];
                let sal = scorer.saliency(inst, params.feature_method, params.steps, params.baseline)?;
                let end = if params.rank_mode == RankMode::Magnitude {
                    End::Highest
                } else {
                    end
                };
                let tokens = select_tokens(
                    &sal.tokens,
                    &sal.token_ids,
                    &sal.scores,
                    params.top_m,
                    &exclusions,
                    params.rank_mode,
                    end,
                )
                .into_iter()
                .map(|t| t.token)
                .collect();
                Ok(Selection {
                    test_id: z.id.clone(),
                    train_id: inst.id.clone(),
                    influence: sal.influence,
                    tokens,
                })
            })
            .collect()
    };
    let top_selections = pick(&order[..n_sel], End::Highest)?;
    let mut bottom_idx = order[n - n_sel..].to_vec();
    bottom_idx.reverse();
    let bottom_selections = pick(&bottom_idx, End::Lowest)?;

    Ok(AggregateReport {
        test_id: z.id.clone(),
        params: params.clone(),
        n_tests: 1,
        n_train: n,
        n_selected: n_sel,
        top_set: tally(&top_selections),
        bottom_set: tally(&bottom_selections),
        top_selections,
        bottom_selections,
    })
}

/// Merge per-test reports by summing counts.
pub fn corpus_aggregate(reports: &[AggregateReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or(Error::EmptyCorpus)?;
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    for r in &reports[1..] {
        if r.params != first.params || r.n_train != first.n_train {
            return Err(Error::ParameterMismatch(format!(
                "report for `{}` was built with different parameters than `{}`",
                r.test_id, first.test_id
            )));
        }
    }
    let top_selections: Vec<Selection> = reports.iter().flat_map(|r| r.top_selections.clone()).collect();
    let bottom_selections: Vec<Selection> =
        reports.iter().flat_map(|r| r.bottom_selections.clone()).collect();
    Ok(AggregateReport {
        test_id: "corpus".into(),
        params: first.params.clone(),
        n_tests: reports.iter().map(|r| r.n_tests).sum(),
        n_train: first.n_train,
        n_selected: first.n_selected,
        top_set: tally(&top_selections),
        bottom_set: tally(&bottom_selections),
        top_selections,
        bottom_selections,
    })
}
