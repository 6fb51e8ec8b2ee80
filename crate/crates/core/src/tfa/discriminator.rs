use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, RESERVED};
use crate::error::{Error, Result};
use crate::instance_attr::{InstanceAttributor, InstanceMethod};

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-6;

/// Result of an L2-regularized binary logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub objective: f64,
    /// Objective at `w = 0, b = 0`, which is `ln 2`.
    pub zero_objective: f64,
}

fn margin(row: &[usize], w: &[f64], b: f64) -> f64 {
    b + row.iter().map(|&j| w[j]).sum::<f64>()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn objective(rows: &[Vec<usize>], y: &[bool], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = rows.len() as f64;
    let loss: f64 = rows
        .iter()
        .zip(y)
        .map(|(r, &yi)| {
            let z = margin(r, w, b);
            softplus(if yi { -z } else { z })
        })
        .sum();
    loss / n + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>()
}

/// Fit `p(y = 1 | x) = σ(wᵀx + b)` on binary presence features by Newton's
/// method with backtracking. `rows[i]` lists the active feature indices of
/// instance `i`. The objective is mean log-loss plus `l2/2 · ‖w‖²`; the
/// bias is not penalized.
///
/// With `l2 = 0`, reaching an iterate that classifies every instance
/// correctly proves the data separable and returns [`Error::Separable`].
pub fn fit_logistic(rows: &[Vec<usize>], y: &[bool], n_features: usize, l2: f64) -> Result<LogisticFit> {
    if rows.is_empty() || rows.len() != y.len() {
        return Err(Error::InvalidParameter("need one label per non-empty design row".into()));
    }
    if !(l2 >= 0.0) {
        return Err(Error::InvalidParameter("l2 must be >= 0".into()));
    }
    let n = rows.len() as f64;
    let p = n_features + 1;
    let mut w = vec![0.0; n_features];
    let mut b = 0.0;
    let zero_objective = objective(rows, y, &w, b, l2);
    let mut value = zero_objective;
    let mut fit = LogisticFit {
        weights: vec![],
        bias: 0.0,
        iterations: 0,
        gradient_norm: f64::INFINITY,
        converged: false,
        objective: value,
        zero_objective,
    };
    for it in 0..=MAX_ITER {
        if l2 == 0.0 && rows.iter().zip(y).all(|(r, &yi)| (margin(r, &w, b) > 0.0) == yi && margin(r, &w, b) != 0.0) {
            return Err(Error::Separable);
        }
        let mut g = DVector::<f64>::zeros(p);
        let mut h = DMatrix::<f64>::zeros(p, p);
        for (r, &yi) in rows.iter().zip(y) {
            let z = margin(r, &w, b);
            let prob = 1.0 / (1.0 + (-z).exp());
            let resid = (prob - if yi { 1.0 } else { 0.0 }) / n;
            let curv = prob * (1.0 - prob) / n;
            let idx: Vec<usize> = r.iter().copied().chain(std::iter::once(n_features)).collect();
            for &a in &idx {
                g[a] += resid;
                for &c in &idx {
                    h[(a, c)] += curv;
                }
            }
        }
        for j in 0..n_features {
            g[j] += l2 * w[j];
            h[(j, j)] += l2;
        }
        fit.iterations = it;
        fit.gradient_norm = g.norm();
        if fit.gradient_norm <= TOL {
            fit.converged = true;
            break;
        }
        if it == MAX_ITER {
            break;
        }
        for i in 0..p {
            h[(i, i)] += 1e-10;
        }
        let step = h.cholesky().map(|c| c.solve(&g)).unwrap_or_else(|| g.clone());
        let slope = -g.dot(&step);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-12 {
            let cw: Vec<f64> = w.iter().enumerate().map(|(j, x)| x - alpha * step[j]).collect();
            let cb = b - alpha * step[n_features];
            let v = objective(rows, y, &cw, cb, l2);
            if v.is_finite() && v <= value + 1e-4 * alpha * slope {
                w = cw;
                b = cb;
                value = v;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    fit.weights = w;
    fit.bias = b;
    fit.objective = value;
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub instance_method: InstanceMethod,
    pub n_top: usize,
    pub n_bottom: usize,
    pub l2: f64,
    pub exclusions: Vec<String>,
}

impl DiscriminatorParams {
    pub fn new(instance_method: InstanceMethod) -> Self {
        Self {
            instance_method,
            n_top: 10,
            n_bottom: 10,
            l2: 0.01,
            exclusions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    pub weight: f64,
    pub n_top: usize,
    pub n_bottom: usize,
}

/// Bag-of-words logistic regression separating the most influential
/// training instances (class 1) from the least influential (class 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub test_id: String,
    pub params: DiscriminatorParams,
    /// Tokens present in any selected instance, by descending weight (ties
    /// lexicographic). Tokens absent from the selection have weight 0.
    pub weights: Vec<TokenWeight>,
    pub bias: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub objective: f64,
    pub zero_objective: f64,
}

fn presence(inst: &Instance) -> BTreeSet<u32> {
    inst.model_input()
        .into_iter()
        .filter(|&id| id as usize >= RESERVED)
        .collect()
}

pub fn lr_discriminator(
    attributor: &InstanceAttributor<'_>,
    z_test: &Instance,
    params: &DiscriminatorParams,
) -> Result<DiscriminatorReport> {
    let train = attributor.train;
    if params.n_top == 0 || params.n_bottom == 0 {
        return Err(Error::InvalidParameter("n_top and n_bottom must be >= 1".into()));
    }
    if params.n_top + params.n_bottom > train.len() {
        return Err(Error::InvalidParameter(format!(
            "n_top + n_bottom = {} exceeds the training set size {}",
            params.n_top + params.n_bottom,
            train.len()
        )));
    }
    let z = attributor.model.as_predicted(z_test)?;
    let (order, _) = attributor.ranked_indices(&z, params.instance_method)?;
    let vocab = &attributor.model.vocab;
    let excluded: BTreeSet<&str> = params.exclusions.iter().map(String::as_str).collect();

    let selected: Vec<(usize, bool)> = order[..params.n_top]
        .iter()
        .map(|&i| (i, true))
        .chain(order[train.len() - params.n_bottom..].iter().map(|&i| (i, false)))
        .collect();
    let mut feature_of: BTreeMap<u32, usize> = BTreeMap::new();
    let sets: Vec<BTreeSet<u32>> = selected
        .iter()
        .map(|&(i, _)| {
            presence(&train.instances[i])
                .into_iter()
                .filter(|&id| !excluded.contains(vocab.token(id)))
                .collect()
        })
        .collect();
    for s in &sets {
        for &id in s {
            feature_of.entry(id).or_insert(0);
        }
    }
    for (k, v) in feature_of.values_mut().enumerate() {
        *v = k;
    }
    let rows: Vec<Vec<usize>> = sets
        .iter()
        .map(|s| s.iter().map(|id| feature_of[id]).collect())
        .collect();
    let y: Vec<bool> = selected.iter().map(|&(_, top)| top).collect();
    let fit = fit_logistic(&rows, &y, feature_of.len(), params.l2)?;

    let mut weights: Vec<TokenWeight> = feature_of
        .iter()
        .map(|(&id, &j)| {
            let (n_top, n_bottom) = rows.iter().zip(&y).fold((0, 0), |(t, b), (r, &yi)| {
                match (r.contains(&j), yi) {
                    (true, true) => (t + 1, b),
                    (true, false) => (t, b + 1),
                    _ => (t, b),
                }
            });
            TokenWeight {
                token: vocab.token(id).to_string(),
                weight: fit.weights[j],
                n_top,
                n_bottom,
            }
        })
        .collect();
    weights.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.token.cmp(&b.token)));
    Ok(DiscriminatorReport {
        test_id: z.id.clone(),
        params: params.clone(),
        weights,
        bias: fit.bias,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        converged: fit.converged,
        objective: fit.objective,
        zero_objective: fit.zero_objective,
    })
}
