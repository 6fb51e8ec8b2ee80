//! A small differentiable text classifier.
//!
//! Token embeddings are mean-pooled into a representation `r`, optionally
//! passed through one `tanh` hidden layer, then mapped to class logits by a
//! linear head `z = W h + b`. Every attribution method in this crate is
//! expressed through two surfaces of this model: the gradient of a scalar
//! with respect to per-position token embeddings, and the gradient/Hessian
//! of the per-instance loss with respect to the head parameters `(W, b)`.

mod checkpoint;
mod grad;
mod hessian;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance, Vocab, PAD};
use crate::error::{Error, Result};
use crate::report::sha256_hex;

pub use checkpoint::{load_checkpoint, load_pretrained, save_checkpoint, PretrainedEmbeddings};
pub use grad::{
    grad_embeddings, head_grad, Constant, InstanceLoss, PooledFn, PooledScalar, TargetLogit,
};
pub use hessian::{head_hessian_solve, HessianContext};
pub use train::{fit_head, initialize, train, train_with, FitReport};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Width of the optional `tanh` layer; 0 disables it.
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// L2 penalty on the head parameters, `λ/2 · ‖(W, b)‖²`.
    pub l2_penalty: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Damping added to the head Hessian before solving.
    pub damping: f64,
    pub freeze_embeddings: bool,
    pub init_scale: f64,
    /// After gradient training, solve the head to its exact optimum with the
    /// representation held fixed, so influence scores are taken at a minimum.
    pub refit_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden_dim: 0,
            num_classes: 2,
            l2_penalty: 0.01,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            damping: 0.01,
            freeze_embeddings: false,
            init_scale: 0.1,
            refit_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if !(self.l2_penalty >= 0.0) {
            return bad("l2_penalty must be >= 0");
        }
        if !(self.damping > 0.0) {
            return bad("damping must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.init_scale >= 0.0) {
            return bad("init_scale must be >= 0");
        }
        Ok(())
    }

    /// Width of the representation the head consumes.
    pub fn head_input_dim(&self) -> usize {
        if self.hidden_dim == 0 {
            self.embedding_dim
        } else {
            self.hidden_dim
        }
    }

    /// Number of head parameters, `C·h + C`.
    pub fn head_param_count(&self) -> usize {
        self.num_classes * (self.head_input_dim() + 1)
    }
}

/// A dense `y = A x + c` layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Dense {
    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        y
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

/// Trained parameters plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub embeddings: Mat,
    pub hidden: Option<Dense>,
    pub head: Dense,
    pub metrics: TrainingMetrics,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub token_ids: Vec<u32>,
    /// Per-position embeddings (PAD positions hold the PAD row).
    pub embeddings: Vec<Vec<f64>>,
    /// Number of non-PAD positions averaged into `pooled`.
    pub included: usize,
    pub pooled: Vec<f64>,
    /// Input to the head (`pooled` itself when there is no hidden layer).
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Head-side values at a given pooled representation.
#[derive(Debug, Clone)]
pub(crate) struct HeadPass {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ModelSnapshot {
    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn vocab_hash(&self) -> &str {
        self.vocab.hash()
    }

    /// Content hash over configuration, vocabulary and all parameters.
    pub fn hash(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        bytes.extend_from_slice(self.vocab.hash().as_bytes());
        let mut push = |xs: &[f64]| {
            for x in xs {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(&self.embeddings.data);
        if let Some(h) = &self.hidden {
            push(&h.weight.data);
            push(&h.bias);
        }
        push(&self.head.weight.data);
        push(&self.head.bias);
        sha256_hex(&bytes)
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.vocab_hash != self.vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: self.vocab.hash().to_string(),
                found: dataset.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let size = self.vocab.len();
        match ids.iter().find(|&&id| id as usize >= size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    /// Encode raw text (optionally paired) with this model's vocabulary.
    pub fn encode_text(&self, id: &str, text: &str, text_b: Option<&str>) -> Instance {
        let ex = match text_b {
            Some(b) => crate::corpus::Example::paired(id, text, b, 0),
            None => crate::corpus::Example::new(id, text, 0),
        };
        self.vocab.encode(&ex)
    }

    /// Per-position embeddings and the count of non-PAD positions.
    pub fn position_embeddings(&self, instance: &Instance) -> Result<(Vec<u32>, Vec<Vec<f64>>, usize)> {
        let ids = instance.model_input();
        self.check_ids(&ids)?;
        let rows = ids.iter().map(|&id| self.embeddings.row(id as usize).to_vec()).collect();
        let n = ids.iter().filter(|&&id| id != PAD).count();
        Ok((ids, rows, n))
    }

    /// Mean of the embeddings at non-PAD positions; zero when there are none.
    pub fn pool(&self, ids: &[u32], rows: &[Vec<f64>]) -> Vec<f64> {
        let mut r = vec![0.0; self.dim()];
        let n = ids.iter().filter(|&&id| id != PAD).count();
        if n == 0 {
            return r;
        }
        for (id, e) in ids.iter().zip(rows) {
            if *id != PAD {
                axpy(1.0, e, &mut r);
            }
        }
        let inv = 1.0 / n as f64;
        r.iter_mut().for_each(|x| *x *= inv);
        r
    }

    pub fn pooled(&self, instance: &Instance) -> Result<Vec<f64>> {
        let (ids, rows, _) = self.position_embeddings(instance)?;
        Ok(self.pool(&ids, &rows))
    }

    pub(crate) fn head_pass(&self, pooled: &[f64]) -> HeadPass {
        let features = match &self.hidden {
            Some(layer) => layer.apply(pooled).into_iter().map(f64::tanh).collect(),
            None => pooled.to_vec(),
        };
        let logits = self.head.apply(&features);
        let probabilities = softmax(&logits);
        HeadPass {
            features,
            logits,
            probabilities,
        }
    }

    /// Back-propagate `d/d features` to `d/d pooled` through the hidden layer.
    pub(crate) fn features_to_pooled(&self, features: &[f64], d_features: &[f64]) -> Vec<f64> {
        match &self.hidden {
            None => d_features.to_vec(),
            Some(layer) => {
                let d_pre: Vec<f64> = features
                    .iter()
                    .zip(d_features)
                    .map(|(h, d)| d * (1.0 - h * h))
                    .collect();
                layer.weight.t_matvec(&d_pre)
            }
        }
    }

    pub fn logits_from_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        self.head_pass(pooled).logits
    }

    pub fn forward(&self, instance: &Instance) -> Result<ForwardTrace> {
        let (ids, rows, n) = self.position_embeddings(instance)?;
        let pooled = self.pool(&ids, &rows);
        let pass = self.head_pass(&pooled);
        Ok(ForwardTrace {
            token_ids: ids,
            embeddings: rows,
            included: n,
            pooled,
            features: pass.features,
            logits: pass.logits,
            probabilities: pass.probabilities,
        })
    }

    /// Predicted class (ties to the lowest index), probabilities, and trace.
    pub fn predict(&self, instance: &Instance) -> Result<(usize, Vec<f64>, ForwardTrace)> {
        let trace = self.forward(instance)?;
        let class = argmax(&trace.probabilities);
        Ok((class, trace.probabilities.clone(), trace))
    }

    pub fn predict_class(&self, instance: &Instance) -> Result<Prediction> {
        let trace = self.forward(instance)?;
        Ok(Prediction {
            class: argmax(&trace.probabilities),
            probabilities: trace.probabilities,
        })
    }

    /// Fraction of `dataset` whose argmax matches the gold label.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        self.check_dataset(dataset)?;
        if dataset.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for inst in &dataset.instances {
            if self.predict_class(inst)?.class == inst.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Head parameters flattened as `W` row-major followed by `b`.
    pub fn head_params(&self) -> Vec<f64> {
        let mut v = self.head.weight.data.clone();
        v.extend_from_slice(&self.head.bias);
        v
    }

    pub fn set_head_params(&mut self, theta: &[f64]) -> Result<()> {
        let p = self.config.head_param_count();
        if theta.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: theta.len(),
            });
        }
        let nw = self.head.weight.data.len();
        self.head.weight.data.copy_from_slice(&theta[..nw]);
        self.head.bias.copy_from_slice(&theta[nw..]);
        Ok(())
    }

    /// The instance with its label replaced by the model's prediction, the
    /// form used when explaining a prediction rather than a gold label.
    pub fn as_predicted(&self, instance: &Instance) -> Result<Instance> {
        let class = self.predict_class(instance)?.class;
        Ok(instance.clone().with_label(class))
    }
}
