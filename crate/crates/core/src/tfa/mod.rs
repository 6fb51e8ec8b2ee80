//! Training-feature attribution (TFA): per-token importance inside a
//! training instance for its influence on one test prediction.
//!
//! The instance-attribution score `s(z_test, z_train)` is treated as a
//! function of the training instance's token embeddings. For IF and RIF the
//! dependence runs through the train loss gradient `g(r_train)`; the
//! Hessian factor is held constant. For EUC it runs through the pooled
//! representation directly.

mod aggregate;
mod discriminator;
mod heatmap;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::Result;
use crate::feature_attr::{gradient_scores, integrated_scores, FeatureMethod, IgBaseline};
use crate::instance_attr::{distance, InstanceAttributor, InstanceMethod};
use crate::model::{dot, HessianContext, ModelSnapshot, PooledScalar};

pub use aggregate::{
    aggregated_token_analysis, corpus_aggregate, AggregateParams, AggregateReport, Selection,
    TableView,
};
pub use discriminator::{
    fit_logistic, lr_discriminator, DiscriminatorParams, DiscriminatorReport, LogisticFit,
    TokenWeight,
};
pub use heatmap::{
    heatmap, normalize_scores, HeatmapInstance, HeatmapParams, HeatmapPayload, HeatmapTrain,
    HEATMAP_PAYLOAD_SCHEMA, HEATMAP_SCHEMA_VERSION,
};

/// An (instance method, feature method) pair such as `RIF+G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TfaMethod {
    pub instance: InstanceMethod,
    pub feature: FeatureMethod,
}

impl TfaMethod {
    pub fn new(instance: InstanceMethod, feature: FeatureMethod) -> Self {
        Self { instance, feature }
    }
}

impl fmt::Display for TfaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.instance, self.feature)
    }
}

/// `s(r) = vᵀ g(r)`, optionally divided by `‖H^{-1/2} g(r)‖` (RIF).
struct InfluenceScalar<'h> {
    v: Vec<f64>,
    label: usize,
    relative: Option<&'h HessianContext>,
}

impl PooledScalar for InfluenceScalar<'_> {
    fn value(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<f64> {
        let g = model.head_grad_at(pooled, self.label);
        let s = dot(&self.v, &g);
        match self.relative {
            None => Ok(s),
            Some(h) => {
                let n = h.quad_inv(&g)?.max(0.0).sqrt();
                Ok(if n == 0.0 { 0.0 } else { s / n })
            }
        }
    }

    fn gradient(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<Vec<f64>> {
        let ds = model.head_grad_vjp(pooled, self.label, &self.v);
        let Some(h) = self.relative else {
            return Ok(ds);
        };
        let g = model.head_grad_at(pooled, self.label);
        let w = h.solve(&g)?;
        let n = dot(&g, &w).max(0.0).sqrt();
        if n == 0.0 {
            return Ok(vec![0.0; pooled.len()]);
        }
        let s = dot(&self.v, &g);
        // ∂n/∂r = J_gᵀ H⁻¹ g / n
        let dn = model.head_grad_vjp(pooled, self.label, &w);
        Ok(ds
            .iter()
            .zip(&dn)
            .map(|(a, b)| a / n - s * b / (n * n * n))
            .collect())
    }
}

/// `s(r) = −‖t − r‖`, with zero gradient at `r = t`.
struct EucScalar {
    target: Vec<f64>,
}

impl PooledScalar for EucScalar {
    fn value(&self, _: &ModelSnapshot, pooled: &[f64]) -> Result<f64> {
        Ok(-distance(&self.target, pooled))
    }

    fn gradient(&self, _: &ModelSnapshot, pooled: &[f64]) -> Result<Vec<f64>> {
        let d = distance(&self.target, pooled);
        if d == 0.0 {
            return Ok(vec![0.0; pooled.len()]);
        }
        Ok(self.target.iter().zip(pooled).map(|(t, r)| (t - r) / d).collect())
    }
}

/// Per-position TFA scores over one training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFeatureSaliency {
    pub test_id: String,
    pub train_id: String,
    pub method: TfaMethod,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub scores: Vec<f64>,
    /// The instance-attribution score `s(z_test, z_train)`.
    pub influence: f64,
}

/// Per-test state for TFA over many training instances: the test
/// direction `H⁻¹ g_test` (IF/RIF) or pooled test representation (EUC).
pub struct TfaScorer<'a, 'b> {
    attributor: &'b InstanceAttributor<'a>,
    test_id: String,
    method: InstanceMethod,
    direction: Vec<f64>,
}

impl<'a, 'b> TfaScorer<'a, 'b> {
    /// `z_test` is used with the label it carries.
    pub fn new(
        attributor: &'b InstanceAttributor<'a>,
        z_test: &Instance,
        method: InstanceMethod,
    ) -> Result<Self> {
        let direction = match method {
            InstanceMethod::EUC => attributor.model.pooled(z_test)?,
            InstanceMethod::IF | InstanceMethod::RIF => attributor.test_direction(z_test)?,
        };
        Ok(Self {
            attributor,
            test_id: z_test.id.clone(),
            method,
            direction,
        })
    }

    pub fn method(&self) -> InstanceMethod {
        self.method
    }

    fn scalar(&self, z_train: &Instance) -> Box<dyn PooledScalar + '_> {
        match self.method {
            InstanceMethod::EUC => Box::new(EucScalar {
                target: self.direction.clone(),
            }),
            InstanceMethod::IF => Box::new(InfluenceScalar {
                v: self.direction.clone(),
                label: z_train.label,
                relative: None,
            }),
            InstanceMethod::RIF => Box::new(InfluenceScalar {
                v: self.direction.clone(),
                label: z_train.label,
                relative: Some(&self.attributor.hessian),
            }),
        }
    }

    /// The instance score `s(z_test, z_train)`.
    pub fn score(&self, z_train: &Instance) -> Result<f64> {
        let model = self.attributor.model;
        self.scalar(z_train).value(model, &model.pooled(z_train)?)
    }

    fn wrap(&self, z_train: &Instance, feature: FeatureMethod, scores: Vec<f64>, influence: f64) -> TrainFeatureSaliency {
        let token_ids = z_train.model_input();
        TrainFeatureSaliency {
            test_id: self.test_id.clone(),
            train_id: z_train.id.clone(),
            method: TfaMethod::new(self.method, feature),
            tokens: self.attributor.model.vocab.decode(&token_ids),
            token_ids,
            scores,
            influence,
        }
    }

    /// Mean over dimensions of `∂s/∂e_j` for each train position.
    pub fn grad(&self, z_train: &Instance) -> Result<TrainFeatureSaliency> {
        let model = self.attributor.model;
        let scalar = self.scalar(z_train);
        let scores = gradient_scores(model, z_train, scalar.as_ref())?;
        let influence = scalar.value(model, &model.pooled(z_train)?)?;
        Ok(self.wrap(z_train, FeatureMethod::G, scores, influence))
    }

    /// Integrated Gradients of `s` from the baseline train embeddings.
    pub fn ig(&self, z_train: &Instance, steps: usize, baseline: IgBaseline) -> Result<TrainFeatureSaliency> {
        let model = self.attributor.model;
        let scalar = self.scalar(z_train);
        let (scores, at_end, _) = integrated_scores(model, z_train, scalar.as_ref(), steps, baseline)?;
        Ok(self.wrap(z_train, FeatureMethod::IG, scores, at_end))
    }

    /// IG scores together with `(s(x), s(baseline))`, for completeness checks.
    pub fn ig_with_endpoints(
        &self,
        z_train: &Instance,
        steps: usize,
        baseline: IgBaseline,
    ) -> Result<(Vec<f64>, f64, f64)> {
        let scalar = self.scalar(z_train);
        integrated_scores(self.attributor.model, z_train, scalar.as_ref(), steps, baseline)
    }

    pub fn saliency(
        &self,
        z_train: &Instance,
        feature: FeatureMethod,
        steps: usize,
        baseline: IgBaseline,
    ) -> Result<TrainFeatureSaliency> {
        match feature {
            FeatureMethod::G => self.grad(z_train),
            FeatureMethod::IG => self.ig(z_train, steps, baseline),
        }
    }
}

/// Gradient TFA of one training instance; `z_test` is used as labeled.
pub fn tfa_grad(
    attributor: &InstanceAttributor<'_>,
    z_test: &Instance,
    z_train: &Instance,
    method: InstanceMethod,
) -> Result<TrainFeatureSaliency> {
    TfaScorer::new(attributor, z_test, method)?.grad(z_train)
}

/// IG TFA of one training instance with a PAD baseline.
pub fn tfa_ig(
    attributor: &InstanceAttributor<'_>,
    z_test: &Instance,
    z_train: &Instance,
    method: InstanceMethod,
    steps: usize,
) -> Result<TrainFeatureSaliency> {
    TfaScorer::new(attributor, z_test, method)?.ig(z_train, steps, IgBaseline::Pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::mask_token;
    use crate::testutil::{rel_err, toy_dataset, toy_model};
    use proptest::prelude::*;

    fn setup(hidden: usize, seed: u64) -> (ModelSnapshot, crate::corpus::Dataset) {
        let m = toy_model(hidden, seed);
        let ds = toy_dataset(&m, 16, seed);
        (m, ds)
    }

    fn fd_scores(m: &ModelSnapshot, inst: &Instance, s: &TfaScorer<'_, '_>) -> Vec<f64> {
        let scalar = s.scalar(inst);
        let (ids, rows, _) = m.position_embeddings(inst).unwrap();
        let step = 1e-5;
        (0..ids.len())
            .map(|j| {
                let mut total = 0.0;
                for k in 0..m.dim() {
                    let mut a = rows.clone();
                    a[j][k] += step;
                    let mut b = rows.clone();
                    b[j][k] -= step;
                    total += (scalar.value(m, &m.pool(&ids, &a)).unwrap()
                        - scalar.value(m, &m.pool(&ids, &b)).unwrap())
                        / (2.0 * step);
                }
                total / m.dim() as f64
            })
            .collect()
    }

    fn per_dim_fd(m: &ModelSnapshot, inst: &Instance, s: &TfaScorer<'_, '_>) -> (Vec<f64>, Vec<f64>) {
        let scalar = s.scalar(inst);
        let (ids, rows, n) = m.position_embeddings(inst).unwrap();
        let r = m.pool(&ids, &rows);
        let analytic: Vec<f64> = scalar.gradient(m, &r).unwrap().iter().map(|g| g / n as f64).collect();
        let step = 1e-5;
        let fd: Vec<f64> = (0..m.dim())
            .map(|k| {
                let mut a = rows.clone();
                a[0][k] += step;
                let mut b = rows.clone();
                b[0][k] -= step;
                (scalar.value(m, &m.pool(&ids, &a)).unwrap() - scalar.value(m, &m.pool(&ids, &b)).unwrap())
                    / (2.0 * step)
            })
            .collect();
        (analytic, fd)
    }

    #[test]
    fn composed_score_gradients_match_finite_differences() {
        for hidden in [0, 4] {
            let (m, ds) = setup(hidden, 31);
            let attr = InstanceAttributor::new(&m, &ds).unwrap();
            let test = m.as_predicted(&m.encode_text("t", "great plot !", None)).unwrap();
            let train = m.encode_text("z", "dull cast movie", None).with_label(1);
            for method in [InstanceMethod::IF, InstanceMethod::RIF, InstanceMethod::EUC] {
                let scorer = TfaScorer::new(&attr, &test, method).unwrap();
                let (analytic, fd) = per_dim_fd(&m, &train, &scorer);
                assert!(rel_err(&analytic, &fd) <= 1e-4, "{method} hidden={hidden}");
                let g = scorer.grad(&train).unwrap();
                assert!(rel_err(&g.scores, &fd_scores(&m, &train, &scorer)) <= 1e-4);
                assert!((g.influence - scorer.score(&train).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tfa_scores_agree_with_instance_scores() {
        let (m, ds) = setup(2, 4);
        let attr = InstanceAttributor::new(&m, &ds).unwrap();
        let test = m.as_predicted(&ds.instances[0]).unwrap();
        for method in [InstanceMethod::IF, InstanceMethod::RIF, InstanceMethod::EUC] {
            let scores = attr.scores(&test, method).unwrap();
            let scorer = TfaScorer::new(&attr, &test, method).unwrap();
            for (z, s) in ds.instances.iter().zip(&scores) {
                assert!((scorer.score(z).unwrap() - s).abs() <= 1e-10 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn euc_identical_train_has_zero_scores() {
        let (m, ds) = setup(0, 2);
        let attr = InstanceAttributor::new(&m, &ds).unwrap();
        let test = m.encode_text("t", "great plot", None);
        let s = tfa_grad(&attr, &test, &test, InstanceMethod::EUC).unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ig_completeness_for_instance_scores() {
        for hidden in [0, 3] {
            let (m, ds) = setup(hidden, 17);
            let attr = InstanceAttributor::new(&m, &ds).unwrap();
            let test = m.as_predicted(&m.encode_text("t", "great cast", None)).unwrap();
            for method in [InstanceMethod::IF, InstanceMethod::RIF, InstanceMethod::EUC] {
                let scorer = TfaScorer::new(&attr, &test, method).unwrap();
                for z in ds.instances.iter().take(6) {
                    let (scores, sx, sb) = scorer.ig_with_endpoints(z, 128, IgBaseline::Pad).unwrap();
                    let total: f64 = scores.iter().sum();
                    assert!(
                        (total - (sx - sb)).abs() <= 1e-3 * (sx - sb).abs() + 1e-6,
                        "{method}: {total} vs {}",
                        sx - sb
                    );
                }
            }
        }
    }

    #[test]
    fn ig_at_baseline_is_zero() {
        let (m, ds) = setup(0, 5);
        let attr = InstanceAttributor::new(&m, &ds).unwrap();
        let test = m.encode_text("t", "great", None);
        let mut z = m.encode_text("z", "plot", None);
        z.segment_a = vec![crate::corpus::MASK; 3];
        let s = TfaScorer::new(&attr, &test, InstanceMethod::EUC)
            .unwrap()
            .ig(&z, 16, IgBaseline::Mask)
            .unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_euc_ig_equals_gradient_times_delta() {
        // r is linear in the embeddings, but s = −‖t − r‖ is not, so the
        // identity holds when the gradient is constant along the path:
        // here t = 0 makes s(α r) = −α‖r‖ and ∂s/∂r = −r/‖r‖ for all α > 0
        let (m, ds) = setup(0, 9);
        let attr = InstanceAttributor::new(&m, &ds).unwrap();
        let mut t = m.encode_text("t", "x", None);
        t.segment_a = vec![crate::corpus::PAD];
        let z = m.encode_text("z", "great plot dull", None);
        let scorer = TfaScorer::new(&attr, &t, InstanceMethod::EUC).unwrap();
        let ig = scorer.ig(&z, 7, IgBaseline::Pad).unwrap();
        let (ids, rows, n) = m.position_embeddings(&z).unwrap();
        let r = m.pool(&ids, &rows);
        let norm_r = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, row) in rows.iter().enumerate() {
            let want: f64 = row.iter().zip(&r).map(|(e, ri)| -e * ri / norm_r / n as f64).sum();
            assert!((ig.scores[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn occlusion_oracle_agrees_on_top_token() {
        // masking the top-IG token changes s more than masking any other
        let (m, ds) = setup(0, 23);
        let attr = InstanceAttributor::new(&m, &ds).unwrap();
        let test = m.as_predicted(&m.encode_text("t", "great dragon !", None)).unwrap();
        let z = m.encode_text("z", "dragon the plot", None).with_label(test.label);
        let scorer = TfaScorer::new(&attr, &test, InstanceMethod::EUC).unwrap();
        let ig = scorer.ig(&z, 64, IgBaseline::Mask).unwrap();
        let base = scorer.score(&z).unwrap();
        let drops: Vec<f64> = z
            .segment_a
            .iter()
            .map(|&id| base - scorer.score(&mask_token(&z, id)).unwrap())
            .collect();
        let top_ig = (0..3).max_by(|&a, &b| ig.scores[a].total_cmp(&ig.scores[b])).unwrap();
        let top_occ = (0..3).max_by(|&a, &b| drops[a].total_cmp(&drops[b])).unwrap();
        assert_eq!(top_ig, top_occ);
    }

    proptest! {
        #[test]
        fn tfa_rankings_invariant_to_score_scaling(seed in 0u64..30, c in 0.05f64..20.0) {
            let (m, ds) = setup(2, seed);
            let attr = InstanceAttributor::new(&m, &ds).unwrap();
            let test = m.as_predicted(&ds.instances[0]).unwrap();
            let z = &ds.instances[1];
            let scorer = TfaScorer::new(&attr, &test, InstanceMethod::IF).unwrap();
            let mut scaled = TfaScorer::new(&attr, &test, InstanceMethod::IF).unwrap();
            scaled.direction.iter_mut().for_each(|x| *x *= c);
            for feature in [FeatureMethod::G, FeatureMethod::IG] {
                let a = scorer.saliency(z, feature, 32, IgBaseline::Pad).unwrap();
                let b = scaled.saliency(z, feature, 32, IgBaseline::Pad).unwrap();
                for (x, y) in a.scores.iter().zip(&b.scores) {
                    prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
        }
    }
}
