use crate::corpus::{Instance, PAD};
use crate::error::{Error, Result};
use crate::model::{dot, ModelSnapshot};

/// A differentiable scalar of the pooled representation.
///
/// Everything the attribution methods differentiate (a target logit, the
/// loss, an instance-attribution score) depends on token embeddings only
/// through the mean-pooled representation, so per-position embedding
/// gradients follow from `gradient` by the chain rule through the mean.
pub trait PooledScalar: Sync {
    fn value(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<f64>;
    fn gradient(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<Vec<f64>>;
}

/// Pre-softmax logit of one class.
#[derive(Debug, Clone, Copy)]
pub struct TargetLogit(pub usize);

impl PooledScalar for TargetLogit {
    fn value(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<f64> {
        Ok(model.head_pass(pooled).logits[self.0])
    }

    fn gradient(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<Vec<f64>> {
        let pass = model.head_pass(pooled);
        let d_features = model.head.weight.row(self.0);
        Ok(model.features_to_pooled(&pass.features, d_features))
    }
}

/// Cross-entropy loss for a fixed label.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss(pub usize);

impl PooledScalar for InstanceLoss {
    fn value(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<f64> {
        let p = model.head_pass(pooled).probabilities[self.0];
        Ok(-p.max(f64::MIN_POSITIVE).ln())
    }

    fn gradient(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<Vec<f64>> {
        let pass = model.head_pass(pooled);
        let mut delta = pass.probabilities;
        delta[self.0] -= 1.0;
        let d_features = model.head.weight.t_matvec(&delta);
        Ok(model.features_to_pooled(&pass.features, &d_features))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl PooledScalar for Constant {
    fn value(&self, _: &ModelSnapshot, _: &[f64]) -> Result<f64> {
        Ok(self.0)
    }

    fn gradient(&self, model: &ModelSnapshot, _: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; model.dim()])
    }
}

/// Wrap a pair of closures as a [`PooledScalar`].
pub struct PooledFn<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> PooledScalar for PooledFn<V, G>
where
    V: Fn(&ModelSnapshot, &[f64]) -> Result<f64> + Sync,
    G: Fn(&ModelSnapshot, &[f64]) -> Result<Vec<f64>> + Sync,
{
    fn value(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<f64> {
        (self.value)(model, pooled)
    }

    fn gradient(&self, model: &ModelSnapshot, pooled: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(model, pooled)
    }
}

/// Gradient of `scalar` with respect to the embedding used at each position
/// of `instance`. Repeated tokens get one gradient per position; PAD
/// positions, which are not pooled, get zeros.
pub fn grad_embeddings(
    model: &ModelSnapshot,
    instance: &Instance,
    scalar: &dyn PooledScalar,
) -> Result<Vec<Vec<f64>>> {
    let (ids, rows, n) = model.position_embeddings(instance)?;
    let pooled = model.pool(&ids, &rows);
    let d = model.dim();
    if n == 0 {
        return Ok(vec![vec![0.0; d]; ids.len()]);
    }
    let g = scalar.gradient(model, &pooled)?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding gradient"));
    }
    let inv = 1.0 / n as f64;
    let per_position: Vec<f64> = g.iter().map(|x| x * inv).collect();
    Ok(ids
        .iter()
        .map(|&id| {
            if id == PAD {
                vec![0.0; d]
            } else {
                per_position.clone()
            }
        })
        .collect())
}

impl ModelSnapshot {
    /// Gradient of the cross-entropy at `pooled` for `label` with respect to
    /// the head parameters, laid out as `W` row-major then `b`.
    pub fn head_grad_at(&self, pooled: &[f64], label: usize) -> Vec<f64> {
        let pass = self.head_pass(pooled);
        let mut delta = pass.probabilities;
        delta[label] -= 1.0;
        let h = pass.features.len();
        let c = delta.len();
        let mut g = Vec::with_capacity(c * (h + 1));
        for &dc in &delta {
            g.extend(pass.features.iter().map(|f| dc * f));
        }
        g.extend_from_slice(&delta);
        g
    }

    /// `∂(vᵀ g(r)) / ∂r` where `g(r)` is [`Self::head_grad_at`] for `label`.
    pub fn head_grad_vjp(&self, pooled: &[f64], label: usize, v: &[f64]) -> Vec<f64> {
        let pass = self.head_pass(pooled);
        let h = pass.features.len();
        let p = &pass.probabilities;
        let mut delta = p.clone();
        delta[label] -= 1.0;

        // g = [δ ⊗ f ; δ]; q_c = ∂(vᵀg)/∂δ_c, plus the direct path through f
        let mut d_features = vec![0.0; h];
        let q: Vec<f64> = (0..delta.len())
            .map(|c| {
                let vw = &v[c * h..(c + 1) * h];
                for (df, vk) in d_features.iter_mut().zip(vw) {
                    *df += delta[c] * vk;
                }
                dot(vw, &pass.features) + v[delta.len() * h + c]
            })
            .collect();
        // δ = p − e_y, ∂p/∂z = diag(p) − p pᵀ
        let pq = dot(p, &q);
        let d_logits: Vec<f64> = p.iter().zip(&q).map(|(pc, qc)| pc * (qc - pq)).collect();
        let via_logits = self.head.weight.t_matvec(&d_logits);
        for (df, x) in d_features.iter_mut().zip(via_logits) {
            *df += x;
        }
        self.features_to_pooled(&pass.features, &d_features)
    }
}

/// Per-instance loss gradient with respect to the head parameters
/// (length `C·h + C`).
pub fn head_grad(model: &ModelSnapshot, instance: &Instance) -> Result<Vec<f64>> {
    let pooled = model.pooled(instance)?;
    let g = model.head_grad_at(&pooled, instance.label);
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("head gradient"));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::norm;
    use crate::testutil::{rel_err, toy_model};

    fn fd_position_grad(
        m: &ModelSnapshot,
        inst: &Instance,
        f: &dyn Fn(&ModelSnapshot, &[f64]) -> f64,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let (ids, rows, _) = m.position_embeddings(inst).unwrap();
        let mut out = vec![vec![0.0; m.dim()]; ids.len()];
        for j in 0..ids.len() {
            for k in 0..m.dim() {
                let mut plus = rows.clone();
                plus[j][k] += step;
                let mut minus = rows.clone();
                minus[j][k] -= step;
                out[j][k] = (f(m, &m.pool(&ids, &plus)) - f(m, &m.pool(&ids, &minus))) / (2.0 * step);
            }
        }
        out
    }

    #[test]
    fn constant_scalar_has_zero_gradient() {
        let m = toy_model(3, 2);
        let inst = m.encode_text("x", "great dull plot", None);
        let g = grad_embeddings(&m, &inst, &Constant(4.2)).unwrap();
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_gradients_match_central_differences() {
        for hidden in [0, 5] {
            let m = toy_model(hidden, 11);
            let inst = m.encode_text("x", "great plot great dull cast", None);
            for (scalar, f) in [
                (
                    Box::new(TargetLogit(1)) as Box<dyn PooledScalar>,
                    Box::new(|m: &ModelSnapshot, r: &[f64]| m.head_pass(r).logits[1])
                        as Box<dyn Fn(&ModelSnapshot, &[f64]) -> f64>,
                ),
                (
                    Box::new(InstanceLoss(0)),
                    Box::new(|m: &ModelSnapshot, r: &[f64]| -m.head_pass(r).probabilities[0].ln()),
                ),
            ] {
                let g = grad_embeddings(&m, &inst, scalar.as_ref()).unwrap();
                let fd = fd_position_grad(&m, &inst, f.as_ref(), 1e-5);
                let flat_g: Vec<f64> = g.concat();
                let flat_fd: Vec<f64> = fd.concat();
                assert!(rel_err(&flat_g, &flat_fd) <= 1e-4, "hidden={hidden}");
            }
        }
    }

    #[test]
    fn mean_pooling_gradient_is_one_over_n() {
        let m = toy_model(0, 1);
        let inst = m.encode_text("x", "great plot dull cast", None);
        let k = 2;
        let probe = PooledFn {
            value: move |_: &ModelSnapshot, r: &[f64]| Ok(r[k]),
            gradient: move |m: &ModelSnapshot, _: &[f64]| {
                let mut g = vec![0.0; m.dim()];
                g[k] = 1.0;
                Ok(g)
            },
        };
        let g = grad_embeddings(&m, &inst, &probe).unwrap();
        for row in g {
            for (dim, x) in row.iter().enumerate() {
                let expected = if dim == k { 0.25 } else { 0.0 };
                assert_eq!(*x, expected);
            }
        }
    }

    #[test]
    fn head_gradient_matches_central_differences() {
        for hidden in [0, 4] {
            let m = toy_model(hidden, 7);
            let inst = m.encode_text("x", "dull cast great", None).with_label(1);
            let g = head_grad(&m, &inst).unwrap();
            assert_eq!(g.len(), m.config.head_param_count());
            let theta = m.head_params();
            let loss = |t: &[f64]| {
                let mut mm = m.clone();
                mm.set_head_params(t).unwrap();
                let r = mm.pooled(&inst).unwrap();
                -mm.head_pass(&r).probabilities[1].ln()
            };
            let fd: Vec<f64> = (0..theta.len())
                .map(|i| {
                    let mut a = theta.clone();
                    a[i] += 1e-5;
                    let mut b = theta.clone();
                    b[i] -= 1e-5;
                    (loss(&a) - loss(&b)) / 2e-5
                })
                .collect();
            assert!(rel_err(&g, &fd) <= 1e-4);
        }
    }

    #[test]
    fn head_gradient_vanishes_when_confident() {
        let mut m = toy_model(0, 3);
        let inst = m.encode_text("x", "great plot", None).with_label(1);
        m.head.bias = vec![-40.0, 40.0];
        assert!(norm(&head_grad(&m, &inst).unwrap()) < 1e-12);
        let twin = inst.clone();
        assert_eq!(head_grad(&m, &inst).unwrap(), head_grad(&m, &twin).unwrap());
    }

    #[test]
    fn head_grad_vjp_matches_central_differences() {
        for hidden in [0, 6] {
            let m = toy_model(hidden, 5);
            let r: Vec<f64> = (0..m.dim()).map(|i| 0.3 * ((i as f64) * 0.7).sin()).collect();
            let v: Vec<f64> = (0..m.config.head_param_count())
                .map(|i| ((i as f64) * 1.3).cos())
                .collect();
            let analytic = m.head_grad_vjp(&r, 1, &v);
            let fd: Vec<f64> = (0..r.len())
                .map(|k| {
                    let mut a = r.clone();
                    a[k] += 1e-5;
                    let mut b = r.clone();
                    b[k] -= 1e-5;
                    (dot(&v, &m.head_grad_at(&a, 1)) - dot(&v, &m.head_grad_at(&b, 1))) / 2e-5
                })
                .collect();
            assert!(rel_err(&analytic, &fd) <= 1e-4);
        }
    }
}
