use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Vocab, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{
    axpy, dot, norm, softmax, Dense, Mat, ModelConfig, ModelSnapshot, PretrainedEmbeddings,
    TrainingMetrics,
};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Outcome of [`fit_head`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub converged: bool,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Seeded initial parameters. PAD and MASK rows start at zero; PAD stays
/// there because it is never pooled.
pub fn initialize(
    vocab: &Vocab,
    config: &ModelConfig,
    pretrained: Option<&PretrainedEmbeddings>,
) -> Result<ModelSnapshot> {
    config.validate()?;
    let d = config.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut embeddings = Mat {
        rows: vocab.len(),
        cols: d,
        data: gaussian(&mut rng, config.init_scale, vocab.len() * d),
    };
    embeddings.row_mut(PAD as usize).fill(0.0);
    embeddings.row_mut(MASK as usize).fill(0.0);
    if let Some(pre) = pretrained {
        if pre.dim != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: pre.dim,
            });
        }
        for (token, vector) in &pre.vectors {
            if let Some(id) = vocab.get(token) {
                embeddings.row_mut(id as usize).copy_from_slice(vector);
            }
        }
    }
    let hidden = (config.hidden_dim > 0).then(|| Dense {
        weight: Mat {
            rows: config.hidden_dim,
            cols: d,
            data: gaussian(&mut rng, 1.0 / (d as f64).sqrt(), config.hidden_dim * d),
        },
        bias: vec![0.0; config.hidden_dim],
    });
    let h = config.head_input_dim();
    let head = Dense {
        weight: Mat {
            rows: config.num_classes,
            cols: h,
            data: gaussian(&mut rng, config.init_scale, config.num_classes * h),
        },
        bias: vec![0.0; config.num_classes],
    };
    Ok(ModelSnapshot {
        config: config.clone(),
        vocab: vocab.clone(),
        embeddings,
        hidden,
        head,
        metrics: TrainingMetrics::default(),
    })
}

pub fn train(
    vocab: &Vocab,
    dataset: &Dataset,
    config: &ModelConfig,
    validation: Option<&Dataset>,
) -> Result<ModelSnapshot> {
    train_with(vocab, dataset, config, validation, None)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, offset: usize, params: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

fn check_labels(dataset: &Dataset, classes: usize) -> Result<()> {
    match dataset.instances.iter().find(|i| i.label >= classes) {
        Some(i) => Err(Error::LabelOutOfRange {
            label: i.label,
            num_classes: classes,
        }),
        None => Ok(()),
    }
}

fn params_finite(model: &ModelSnapshot) -> bool {
    let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
    finite(&model.embeddings.data)
        && finite(&model.head.weight.data)
        && finite(&model.head.bias)
        && model
            .hidden
            .as_ref()
            .is_none_or(|l| finite(&l.weight.data) && finite(&l.bias))
}

/// Mean cross-entropy plus `λ/2 · ‖(W, b)‖²`.
pub(crate) fn objective(model: &ModelSnapshot, dataset: &Dataset) -> Result<f64> {
    let mut loss = 0.0;
    for inst in &dataset.instances {
        let p = model.forward(inst)?.probabilities[inst.label];
        loss -= p.max(f64::MIN_POSITIVE).ln();
    }
    let theta = model.head_params();
    Ok(loss / dataset.len() as f64 + 0.5 * model.config.l2_penalty * dot(&theta, &theta))
}

/// Mini-batch Adam on the full network, seeded by `config.seed`.
///
/// Only embedding rows that occur in a batch are updated on that step.
pub fn train_with(
    vocab: &Vocab,
    dataset: &Dataset,
    config: &ModelConfig,
    validation: Option<&Dataset>,
    pretrained: Option<&PretrainedEmbeddings>,
) -> Result<ModelSnapshot> {
    let mut model = initialize(vocab, config, pretrained)?;
    model.check_dataset(dataset)?;
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_labels(dataset, config.num_classes)?;
    for inst in &dataset.instances {
        model.check_ids(&inst.model_input())?;
    }
    if let Some(val) = validation {
        model.check_dataset(val)?;
    }

    let d = config.embedding_dim;
    let h = config.head_input_dim();
    let classes = config.num_classes;
    let n_emb = model.embeddings.data.len();
    let n_hid = model.hidden.as_ref().map_or(0, |l| l.weight.data.len() + l.bias.len());
    let mut adam = Adam::new(n_emb + n_hid + classes * (h + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed0fba7c4);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut t = 0i32;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut g_emb: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut g_hid_w = Mat::zeros(config.hidden_dim, d);
            let mut g_hid_b = vec![0.0; config.hidden_dim];
            let mut g_head_w = Mat::zeros(classes, h);
            let mut g_head_b = vec![0.0; classes];

            for &idx in batch {
                let inst = &dataset.instances[idx];
                let (ids, rows, n) = model.position_embeddings(inst)?;
                let pooled = model.pool(&ids, &rows);
                let pass = model.head_pass(&pooled);
                epoch_loss -= pass.probabilities[inst.label].max(f64::MIN_POSITIVE).ln();
                let mut delta = pass.probabilities.clone();
                delta[inst.label] -= 1.0;
                for (c, dc) in delta.iter().enumerate() {
                    axpy(dc * scale, &pass.features, g_head_w.row_mut(c));
                    g_head_b[c] += dc * scale;
                }
                let d_features = model.head.weight.t_matvec(&delta);
                if let Some(layer) = &model.hidden {
                    let d_pre: Vec<f64> = pass
                        .features
                        .iter()
                        .zip(&d_features)
                        .map(|(f, g)| g * (1.0 - f * f))
                        .collect();
                    for (j, dj) in d_pre.iter().enumerate() {
                        axpy(dj * scale, &pooled, g_hid_w.row_mut(j));
                        g_hid_b[j] += dj * scale;
                    }
                    if !config.freeze_embeddings && n > 0 {
                        let d_pooled = layer.weight.t_matvec(&d_pre);
                        for &id in ids.iter().filter(|&&id| id != PAD) {
                            let row = g_emb.entry(id as usize).or_insert_with(|| vec![0.0; d]);
                            axpy(scale / n as f64, &d_pooled, row);
                        }
                    }
                } else if !config.freeze_embeddings && n > 0 {
                    for &id in ids.iter().filter(|&&id| id != PAD) {
                        let row = g_emb.entry(id as usize).or_insert_with(|| vec![0.0; d]);
                        axpy(scale / n as f64, &d_features, row);
                    }
                }
            }
            axpy(config.l2_penalty, &model.head.weight.data.clone(), &mut g_head_w.data);
            axpy(config.l2_penalty, &model.head.bias.clone(), &mut g_head_b);

            t += 1;
            let lr = config.learning_rate;
            for (&row, grad) in &g_emb {
                adam.step(row * d, model.embeddings.row_mut(row), grad, lr, t);
            }
            let mut off = n_emb;
            if let Some(layer) = model.hidden.as_mut() {
                adam.step(off, &mut layer.weight.data, &g_hid_w.data, lr, t);
                off += layer.weight.data.len();
                adam.step(off, &mut layer.bias, &g_hid_b, lr, t);
                off += layer.bias.len();
            }
            adam.step(off, &mut model.head.weight.data, &g_head_w.data, lr, t);
            off += model.head.weight.data.len();
            adam.step(off, &mut model.head.bias, &g_head_b, lr, t);
        }
        if !epoch_loss.is_finite() || !params_finite(&model) {
            return Err(Error::Diverged { epoch });
        }
    }

    if config.epochs > 0 && config.refit_head {
        let (fitted, _) = fit_head(&model, dataset).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                epoch: config.epochs,
            },
            e => e,
        })?;
        model = fitted;
    }
    let final_loss = objective(&model, dataset)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
        });
    }
    model.metrics = TrainingMetrics {
        epochs_run: config.epochs,
        final_loss: Some(final_loss),
        train_accuracy: Some(model.accuracy(dataset)?),
        validation_accuracy: validation.map(|v| model.accuracy(v)).transpose()?,
    };
    Ok(model)
}

/// Head-only objective over fixed features.
struct HeadProblem {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    l2: f64,
}

impl HeadProblem {
    fn h(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    fn logits(&self, theta: &[f64], f: &[f64]) -> Vec<f64> {
        let h = self.h();
        (0..self.classes)
            .map(|c| dot(&theta[c * h..(c + 1) * h], f) + theta[self.classes * h + c])
            .collect()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let n = self.features.len() as f64;
        let mut loss = 0.0;
        for (f, &y) in self.features.iter().zip(&self.labels) {
            let z = self.logits(theta, f);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|zi| (zi - max).exp()).sum::<f64>().ln();
            loss += lse - z[y];
        }
        loss / n + 0.5 * self.l2 * dot(theta, theta)
    }

    fn grad_hess(&self, theta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let h = self.h();
        let c = self.classes;
        let p = theta.len();
        let n = self.features.len() as f64;
        let mut g = vec![0.0; p];
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let idx = |class: usize, k: usize| if k < h { class * h + k } else { c * h + class };
        for (f, &y) in self.features.iter().zip(&self.labels) {
            let probs = softmax(&self.logits(theta, f));
            let mut fh = f.clone();
            fh.push(1.0);
            for a in 0..c {
                let da = probs[a] - if a == y { 1.0 } else { 0.0 };
                for (k, fk) in fh.iter().enumerate() {
                    g[idx(a, k)] += da * fk / n;
                }
                for b in 0..c {
                    let w = if a == b { probs[a] } else { 0.0 } - probs[a] * probs[b];
                    if w == 0.0 {
                        continue;
                    }
                    for (k, fk) in fh.iter().enumerate() {
                        for (k2, fk2) in fh.iter().enumerate() {
                            hess[(idx(a, k), idx(b, k2))] += w * fk * fk2 / n;
                        }
                    }
                }
            }
        }
        for i in 0..p {
            g[i] += self.l2 * theta[i];
            hess[(i, i)] += self.l2;
        }
        (g, hess)
    }
}

/// Solve the head `(W, b)` to the optimum of mean cross-entropy plus
/// `λ/2 · ‖(W, b)‖²` with embeddings and hidden layer held fixed, by
/// damped Newton with backtracking, starting from the current head.
///
/// The objective is convex in the head, so with `λ > 0` this converges to
/// the unique minimizer; with `λ = 0` on separable data it stops at the
/// iteration cap and reports `converged = false`.
pub fn fit_head(model: &ModelSnapshot, dataset: &Dataset) -> Result<(ModelSnapshot, FitReport)> {
    model.check_dataset(dataset)?;
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_labels(dataset, model.num_classes())?;
    let mut features = Vec::with_capacity(dataset.len());
    for inst in &dataset.instances {
        features.push(model.head_pass(&model.pooled(inst)?).features);
    }
    let problem = HeadProblem {
        features,
        labels: dataset.instances.iter().map(|i| i.label).collect(),
        classes: model.num_classes(),
        l2: model.config.l2_penalty,
    };
    let mut theta = model.head_params();
    let mut value = problem.value(&theta);
    let mut report = FitReport {
        iterations: 0,
        objective: value,
        gradient_norm: f64::INFINITY,
        converged: false,
    };
    for it in 0..200 {
        let (g, mut hess) = problem.grad_hess(&theta);
        let gn = norm(&g);
        report.iterations = it;
        report.gradient_norm = gn;
        if gn <= 1e-11 {
            report.converged = true;
            break;
        }
        // softmax Hessians are singular along the all-classes shift; a tiny
        // ridge keeps the Newton system solvable when λ = 0
        for i in 0..theta.len() {
            hess[(i, i)] += 1e-12;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&g)),
            None => DVector::from_column_slice(&g),
        };
        let slope = -dot(&g, step.as_slice());
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - alpha * s).collect();
            let v = problem.value(&cand);
            if v.is_finite() && v <= value + 1e-4 * alpha * slope {
                theta = cand;
                value = v;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            report.converged = gn <= 1e-8;
            break;
        }
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("head fit"));
    }
    let mut out = model.clone();
    out.set_head_params(&theta)?;
    report.objective = value;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Example, Role};

    fn dragon_corpus() -> (Vocab, Dataset) {
        let mut examples = Vec::new();
        let fill = ["the", "movie", "was", "a", "story", "about", "it", "cast"];
        for i in 0..40 {
            let label = i % 2;
            let key = if label == 1 { "dragon" } else { "lizard" };
            let text = format!("{} {} {} {}", fill[i % 8], key, fill[(i * 3 + 1) % 8], fill[(i + 5) % 8]);
            examples.push(Example::new(i.to_string(), &text, label));
        }
        let c = Corpus::new(examples, vec!["neg".into(), "pos".into()], Role::Train).unwrap();
        let vocab = Vocab::build(&c, 1).unwrap();
        let ds = c.encode(&vocab);
        (vocab, ds)
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (vocab, ds) = dragon_corpus();
        let config = ModelConfig {
            epochs: 30,
            ..Default::default()
        };
        let m = train(&vocab, &ds, &config, None).unwrap();
        assert!(m.metrics.train_accuracy.unwrap() >= 0.95);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (vocab, ds) = dragon_corpus();
        let config = ModelConfig {
            epochs: 0,
            hidden_dim: 4,
            ..Default::default()
        };
        let m = train(&vocab, &ds, &config, None).unwrap();
        let init = initialize(&vocab, &config, None).unwrap();
        assert_eq!(m.embeddings, init.embeddings);
        assert_eq!(m.hidden, init.hidden);
        assert_eq!(m.head, init.head);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (vocab, ds) = dragon_corpus();
        let config = ModelConfig {
            epochs: 5,
            hidden_dim: 3,
            ..Default::default()
        };
        let a = train(&vocab, &ds, &config, None).unwrap();
        let b = train(&vocab, &ds, &config, None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a, b);
    }

    #[test]
    fn pad_row_stays_zero() {
        let (vocab, ds) = dragon_corpus();
        let m = train(&vocab, &ds, &ModelConfig::default(), None).unwrap();
        assert!(m.embeddings.row(PAD as usize).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_succeeds_finitely() {
        let (vocab, ds) = dragon_corpus();
        let config = ModelConfig {
            learning_rate: 1e300,
            init_scale: 1e300,
            ..Default::default()
        };
        match train(&vocab, &ds, &config, None) {
            Err(Error::Diverged { epoch }) => assert!(epoch >= 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(m) => assert!(m.metrics.final_loss.unwrap().is_finite()),
        }
    }

    #[test]
    fn fit_head_reaches_stationary_point() {
        let (vocab, ds) = dragon_corpus();
        let config = ModelConfig {
            epochs: 3,
            l2_penalty: 0.1,
            refit_head: false,
            ..Default::default()
        };
        let m = train(&vocab, &ds, &config, None).unwrap();
        let (fitted, report) = fit_head(&m, &ds).unwrap();
        assert!(report.converged);
        let before = objective(&m, &ds).unwrap();
        let after = objective(&fitted, &ds).unwrap();
        assert!(after <= before);
        // independent gradient: mean head_grad + λθ
        let mut g = fitted.head_params();
        g.iter_mut().for_each(|x| *x *= config.l2_penalty);
        for inst in &ds.instances {
            let hg = crate::model::head_grad(&fitted, inst).unwrap();
            axpy(1.0 / ds.len() as f64, &hg, &mut g);
        }
        assert!(norm(&g) < 1e-9);
        assert_eq!(fitted.embeddings, m.embeddings);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let (vocab, mut ds) = dragon_corpus();
        ds.instances[0].label = 7;
        assert!(matches!(
            train(&vocab, &ds, &ModelConfig::default(), None),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
