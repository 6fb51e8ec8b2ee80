//! Instance attribution over a training set: influence functions (IF),
//! relative influence (RIF) and Euclidean similarity (EUC).
//!
//! IF and RIF are restricted to the head parameters. Scores are oriented so
//! that positive means helpful: removing a high-scoring training instance
//! raises the test loss.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::model::{dot, head_grad, norm, HessianContext, ModelSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstanceMethod {
    IF,
    RIF,
    EUC,
}

impl fmt::Display for InstanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstanceMethod::IF => "IF",
            InstanceMethod::RIF => "RIF",
            InstanceMethod::EUC => "EUC",
        })
    }
}

impl std::str::FromStr for InstanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IF" => Ok(InstanceMethod::IF),
            "RIF" => Ok(InstanceMethod::RIF),
            "EUC" => Ok(InstanceMethod::EUC),
            _ => Err(Error::InvalidParameter(format!("unknown instance method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub test_id: String,
    pub train_id: String,
    pub score: f64,
    pub method: InstanceMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub train_id: String,
    pub score: f64,
}

/// Training instances sorted by descending score, ties by train id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRanking {
    pub test_id: String,
    pub method: InstanceMethod,
    pub snapshot_hash: String,
    pub entries: Vec<RankEntry>,
}

impl InfluenceRanking {
    pub fn train_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.train_id.as_str()).collect()
    }
}

/// `g_testᵀ (H + λ_damp·I)⁻¹ g_train` using each instance's own label.
pub fn influence_if(
    model: &ModelSnapshot,
    z_test: &Instance,
    z_train: &Instance,
    hessian: &HessianContext,
) -> Result<f64> {
    let v = hessian.solve(&head_grad(model, z_test)?)?;
    Ok(dot(&v, &head_grad(model, z_train)?))
}

/// IF divided by `‖H^{-1/2} g_train‖`; 0 when the train gradient vanishes.
pub fn rif(
    model: &ModelSnapshot,
    z_test: &Instance,
    z_train: &Instance,
    hessian: &HessianContext,
) -> Result<f64> {
    let v = hessian.solve(&head_grad(model, z_test)?)?;
    relative_score(hessian, &v, &head_grad(model, z_train)?)
}

/// RIF from raw vectors: `vᵀg / √(gᵀ H⁻¹ g)` with `v = H⁻¹ g_test`.
pub fn relative_score(hessian: &HessianContext, v: &[f64], g_train: &[f64]) -> Result<f64> {
    let denom = rif_norm(hessian, g_train)?;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(v, g_train) / denom)
}

fn rif_norm(hessian: &HessianContext, g: &[f64]) -> Result<f64> {
    if norm(g) == 0.0 {
        return Ok(0.0);
    }
    Ok(hessian.quad_inv(g)?.max(0.0).sqrt())
}

/// `−‖r_test − r_train‖₂` over pooled representations.
pub fn euc(model: &ModelSnapshot, x_test: &Instance, x_train: &Instance) -> Result<f64> {
    let a = model.pooled(x_test)?;
    let b = model.pooled(x_train)?;
    Ok(-distance(&a, &b))
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sort `(id, score)` pairs descending by score, ties by id.
pub fn sort_entries(entries: &mut [RankEntry]) {
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.train_id.cmp(&b.train_id)));
}

/// Everything about a training set that is reused across test points:
/// the factorized Hessian, per-instance head gradients, RIF norms and
/// pooled representations.
#[derive(Debug, Clone)]
pub struct InstanceAttributor<'a> {
    pub model: &'a ModelSnapshot,
    pub train: &'a Dataset,
    pub hessian: HessianContext,
    grads: Vec<Vec<f64>>,
    rif_norms: Vec<f64>,
    pooled: Vec<Vec<f64>>,
}

impl<'a> InstanceAttributor<'a> {
    pub fn new(model: &'a ModelSnapshot, train: &'a Dataset) -> Result<Self> {
        let hessian = HessianContext::new(model, train)?;
        Self::with_hessian(model, train, hessian)
    }

    pub fn with_hessian(
        model: &'a ModelSnapshot,
        train: &'a Dataset,
        hessian: HessianContext,
    ) -> Result<Self> {
        model.check_dataset(train)?;
        let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = train
            .instances
            .par_iter()
            .map(|inst| {
                let g = head_grad(model, inst)?;
                let n = rif_norm(&hessian, &g)?;
                Ok((g, n, model.pooled(inst)?))
            })
            .collect::<Result<_>>()?;
        let mut grads = Vec::with_capacity(rows.len());
        let mut rif_norms = Vec::with_capacity(rows.len());
        let mut pooled = Vec::with_capacity(rows.len());
        for (g, n, r) in rows {
            grads.push(g);
            rif_norms.push(n);
            pooled.push(r);
        }
        Ok(Self {
            model,
            train,
            hessian,
            grads,
            rif_norms,
            pooled,
        })
    }

    pub fn train_gradient(&self, index: usize) -> &[f64] {
        &self.grads[index]
    }

    pub fn rif_norm(&self, index: usize) -> f64 {
        self.rif_norms[index]
    }

    pub fn train_pooled(&self, index: usize) -> &[f64] {
        &self.pooled[index]
    }

    /// `(H + λ_damp·I)⁻¹ g_test` for the test instance as labeled.
    pub fn test_direction(&self, z_test: &Instance) -> Result<Vec<f64>> {
        self.hessian.solve(&head_grad(self.model, z_test)?)
    }

    /// Scores of every training instance, in dataset order. `z_test` is
    /// scored with the label it carries; see [`ModelSnapshot::as_predicted`].
    pub fn scores(&self, z_test: &Instance, method: InstanceMethod) -> Result<Vec<f64>> {
        match method {
            InstanceMethod::EUC => {
                let r = self.model.pooled(z_test)?;
                Ok(self.pooled.iter().map(|p| -distance(&r, p)).collect())
            }
            InstanceMethod::IF | InstanceMethod::RIF => {
                let v = self.test_direction(z_test)?;
                Ok(self.scores_from_direction(&v, method))
            }
        }
    }

    /// IF or RIF scores for a precomputed test direction `v = H⁻¹ g_test`.
    pub fn scores_from_direction(&self, v: &[f64], method: InstanceMethod) -> Vec<f64> {
        self.grads
            .iter()
            .zip(&self.rif_norms)
            .map(|(g, &n)| {
                let s = dot(v, g);
                match method {
                    InstanceMethod::RIF if n == 0.0 => 0.0,
                    InstanceMethod::RIF => s / n,
                    _ => s,
                }
            })
            .collect()
    }

    pub fn rank(&self, z_test: &Instance, method: InstanceMethod) -> Result<InfluenceRanking> {
        let scores = self.scores(z_test, method)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("influence score"));
        }
        Ok(ranking_from_scores(
            &z_test.id,
            method,
            self.model.hash(),
            self.train,
            &scores,
        ))
    }

    /// Dataset indices in ranking order.
    pub fn ranked_indices(&self, z_test: &Instance, method: InstanceMethod) -> Result<(Vec<usize>, Vec<f64>)> {
        let scores = self.scores(z_test, method)?;
        Ok((order_by_scores(self.train, &scores), scores))
    }
}

pub(crate) fn order_by_scores(train: &Dataset, scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| train.instances[a].id.cmp(&train.instances[b].id))
    });
    idx
}

pub(crate) fn ranking_from_scores(
    test_id: &str,
    method: InstanceMethod,
    snapshot_hash: String,
    train: &Dataset,
    scores: &[f64],
) -> InfluenceRanking {
    let entries = order_by_scores(train, scores)
        .into_iter()
        .map(|i| RankEntry {
            train_id: train.instances[i].id.clone(),
            score: scores[i],
        })
        .collect();
    InfluenceRanking {
        test_id: test_id.to_string(),
        method,
        snapshot_hash,
        entries,
    }
}

/// Rank `train` for `z_test` (scored under the model's predicted label).
pub fn rank(
    model: &ModelSnapshot,
    z_test: &Instance,
    train: &Dataset,
    method: InstanceMethod,
) -> Result<InfluenceRanking> {
    let attributor = InstanceAttributor::new(model, train)?;
    attributor.rank(&model.as_predicted(z_test)?, method)
}
