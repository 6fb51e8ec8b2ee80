use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::feature_attr::{saliency, FeatureMethod, IgBaseline, SaliencyOptions};
use crate::instance_attr::{InstanceAttributor, InstanceMethod};
use crate::tfa::TfaScorer;

pub const HEATMAP_SCHEMA_VERSION: u32 = 1;

/// JSON Schema (draft 2020-12) of the serialized [`HeatmapPayload`].
pub const HEATMAP_PAYLOAD_SCHEMA: &str = include_str!("../../schema/heatmap_payload.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapParams {
    pub instance_method: InstanceMethod,
    pub feature_method: FeatureMethod,
    pub k: usize,
    pub steps: usize,
    pub baseline: IgBaseline,
}

impl HeatmapParams {
    pub fn new(instance_method: InstanceMethod, feature_method: FeatureMethod, k: usize) -> Self {
        Self {
            instance_method,
            feature_method,
            k,
            steps: 32,
            baseline: IgBaseline::Pad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Gold label.
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTrain {
    pub id: String,
    /// 1-based position in the full influence ranking.
    pub rank: usize,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
    pub influence: f64,
    pub label: usize,
}

/// Side-by-side token highlights for a test instance and its most and
/// least influential training instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPayload {
    pub schema_version: u32,
    pub snapshot_hash: String,
    pub class_names: Vec<String>,
    pub instance_method: InstanceMethod,
    pub feature_method: FeatureMethod,
    pub k: usize,
    pub test: HeatmapInstance,
    /// Most influential first.
    pub top: Vec<HeatmapTrain>,
    /// Least influential first.
    pub bottom: Vec<HeatmapTrain>,
}

/// Divide by the largest magnitude so it maps to ±1. All-zero input stays
/// all-zero.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s / max).clamp(-1.0, 1.0)).collect()
}

/// Top and bottom `k` training instances with TFA highlights. When the
/// train set holds fewer than `2k` instances the two lists share nothing:
/// the top list takes `min(k, N)` and the bottom list the rest, up to `k`.
pub fn heatmap(
    attributor: &InstanceAttributor<'_>,
    z_test: &Instance,
    params: &HeatmapParams,
) -> Result<HeatmapPayload> {
    if params.k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let model = attributor.model;
    let train = attributor.train;
    let pred = model.predict_class(z_test)?;
    let z = z_test.clone().with_label(pred.class);
    let options = SaliencyOptions {
        steps: params.steps,
        baseline: params.baseline,
        ..SaliencyOptions::default()
    };
    let test_sal = saliency(model, &z, pred.class, params.feature_method, &options)?;
    let test = HeatmapInstance {
        id: z_test.id.clone(),
        normalized: normalize_scores(&test_sal.scores),
        tokens: test_sal.tokens,
        scores: test_sal.scores,
        label: z_test.label,
        predicted: pred.class,
        probabilities: pred.probabilities,
    };

    let (order, _) = attributor.ranked_indices(&z, params.instance_method)?;
    let n = order.len();
    let n_top = params.k.min(n);
    let n_bottom = params.k.min(n - n_top);
    let scorer = TfaScorer::new(attributor, &z, params.instance_method)?;
    let entry = |rank: usize| -> Result<HeatmapTrain> {
        let inst = &train.instances[order[rank]];
        let s = scorer.saliency(inst, params.feature_method, params.steps, params.baseline)?;
        Ok(HeatmapTrain {
            id: inst.id.clone(),
            rank: rank + 1,
            normalized: normalize_scores(&s.scores),
            tokens: s.tokens,
            scores: s.scores,
            influence: s.influence,
            label: inst.label,
        })
    };
    let top = (0..n_top).map(&entry).collect::<Result<Vec<_>>>()?;
    let bottom = (0..n_bottom).map(|i| entry(n - 1 - i)).collect::<Result<Vec<_>>>()?;
    Ok(HeatmapPayload {
        schema_version: HEATMAP_SCHEMA_VERSION,
        snapshot_hash: model.hash(),
        class_names: train.class_names.clone(),
        instance_method: params.instance_method,
        feature_method: params.feature_method,
        k: params.k,
        test,
        top,
        bottom,
    })
}
