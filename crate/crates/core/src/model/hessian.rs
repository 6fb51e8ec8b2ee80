use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{dot, ModelSnapshot};

/// Factorized damped head Hessian `H + λ_damp·I`, where `H` is the mean
/// per-instance cross-entropy Hessian over a dataset plus `λ_reg·I`.
///
/// Built once per (snapshot, dataset) and shared read-only across a sweep.
#[derive(Debug, Clone)]
pub struct HessianContext {
    damped: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    snapshot_hash: String,
    dataset_hash: String,
}

/// Index of head parameter `(class, k)` in the flat layout, with `k == h`
/// addressing the bias.
#[inline]
fn param_index(class: usize, k: usize, h: usize, classes: usize) -> usize {
    if k < h {
        class * h + k
    } else {
        classes * h + class
    }
}

impl HessianContext {
    pub fn new(model: &ModelSnapshot, dataset: &Dataset) -> Result<Self> {
        Self::with_damping(model, dataset, model.config.damping)
    }

    pub fn with_damping(model: &ModelSnapshot, dataset: &Dataset, damping: f64) -> Result<Self> {
        model.check_dataset(dataset)?;
        if dataset.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !(damping > 0.0) {
            return Err(Error::InvalidParameter("damping must be > 0".into()));
        }
        let h = model.config.head_input_dim();
        let classes = model.num_classes();
        let p = model.config.head_param_count();
        let mut m = DMatrix::<f64>::zeros(p, p);
        for inst in &dataset.instances {
            let pooled = model.pooled(inst)?;
            let pass = model.head_pass(&pooled);
            let mut feat = pass.features;
            feat.push(1.0);
            let probs = &pass.probabilities;
            for c in 0..classes {
                for c2 in 0..classes {
                    let a = if c == c2 { probs[c] } else { 0.0 } - probs[c] * probs[c2];
                    if a == 0.0 {
                        continue;
                    }
                    for (k, fk) in feat.iter().enumerate() {
                        let row = param_index(c, k, h, classes);
                        for (k2, fk2) in feat.iter().enumerate() {
                            m[(row, param_index(c2, k2, h, classes))] += a * fk * fk2;
                        }
                    }
                }
            }
        }
        m /= dataset.len() as f64;
        let shift = model.config.l2_penalty + damping;
        for i in 0..p {
            m[(i, i)] += shift;
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("head Hessian"));
        }
        let factor = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self {
            damped: m,
            factor,
            snapshot_hash: model.hash(),
            dataset_hash: dataset.hash(),
        })
    }

    pub fn dim(&self) -> usize {
        self.damped.nrows()
    }

    /// The damped matrix `H + λ_damp·I` itself.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.damped
    }

    pub fn snapshot_hash(&self) -> &str {
        &self.snapshot_hash
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    /// `(H + λ_damp·I)⁻¹ v`
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let x = self.factor.solve(&DVector::from_column_slice(v));
        if x.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Hessian solve"));
        }
        Ok(x.as_slice().to_vec())
    }

    /// `gᵀ (H + λ_damp·I)⁻¹ g`, the squared norm `‖H^{-1/2} g‖²`.
    pub fn quad_inv(&self, g: &[f64]) -> Result<f64> {
        Ok(dot(g, &self.solve(g)?))
    }
}

/// One-shot `(H + λ_damp·I)⁻¹ v` over `dataset`.
pub fn head_hessian_solve(model: &ModelSnapshot, dataset: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
    HessianContext::new(model, dataset)?.solve(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::head_grad;
    use crate::testutil::{toy_dataset, toy_model};

    #[test]
    fn zero_rhs_gives_zero() {
        let m = toy_model(0, 4);
        let ds = toy_dataset(&m, 12, 4);
        let x = head_hessian_solve(&m, &ds, &vec![0.0; m.config.head_param_count()]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_damping_approaches_scaled_identity() {
        let m = toy_model(3, 4);
        let ds = toy_dataset(&m, 12, 4);
        let damping = 1e8;
        let ctx = HessianContext::with_damping(&m, &ds, damping).unwrap();
        let v: Vec<f64> = (0..ctx.dim()).map(|i| i as f64 - 2.5).collect();
        let x = ctx.solve(&v).unwrap();
        for (xi, vi) in x.iter().zip(&v) {
            assert!((xi - vi / damping).abs() <= 1e-6 * vi.abs().max(1.0) / damping);
        }
    }

    #[test]
    fn residual_is_tiny() {
        for hidden in [0, 5] {
            let m = toy_model(hidden, 9);
            let ds = toy_dataset(&m, 20, 9);
            let ctx = HessianContext::new(&m, &ds).unwrap();
            let v: Vec<f64> = (0..ctx.dim()).map(|i| ((i * 7 % 5) as f64).sin() + 0.1).collect();
            let x = ctx.solve(&v).unwrap();
            let ax = ctx.matrix() * DVector::from_column_slice(&x);
            let r: f64 = ax.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(r / dot(&v, &v).sqrt() <= 1e-8);
        }
    }

    #[test]
    fn matches_finite_difference_of_mean_gradient() {
        // H (undamped, without λ_reg) is the Jacobian of the mean loss gradient
        let m = toy_model(2, 13);
        let ds = toy_dataset(&m, 10, 13);
        let damping = 1e-3;
        let ctx = HessianContext::with_damping(&m, &ds, damping).unwrap();
        let theta = m.head_params();
        let mean_grad = |t: &[f64]| {
            let mut mm = m.clone();
            mm.set_head_params(t).unwrap();
            let mut g = vec![0.0; t.len()];
            for inst in &ds.instances {
                for (gi, x) in g.iter_mut().zip(head_grad(&mm, inst).unwrap()) {
                    *gi += x / ds.len() as f64;
                }
            }
            g
        };
        let shift = m.config.l2_penalty + damping;
        for j in 0..theta.len() {
            let mut a = theta.clone();
            a[j] += 1e-5;
            let mut b = theta.clone();
            b[j] -= 1e-5;
            let (ga, gb) = (mean_grad(&a), mean_grad(&b));
            for i in 0..theta.len() {
                let fd = (ga[i] - gb[i]) / 2e-5;
                let analytic = ctx.matrix()[(i, j)] - if i == j { shift } else { 0.0 };
                assert!((fd - analytic).abs() <= 1e-6, "({i},{j}) {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn rejects_wrong_length() {
        let m = toy_model(0, 1);
        let ds = toy_dataset(&m, 4, 1);
        let ctx = HessianContext::new(&m, &ds).unwrap();
        assert!(matches!(ctx.solve(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }
}
