//! Closed-form Gaussian identities: densities, KL and 2-Wasserstein between
//! diagonal Gaussians, quadratic-form expectations, cross-entropy, products of
//! densities, and the paired latent prior for unit-Gaussian and mixture bases.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Gaussian with diagonal covariance `diag(var)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), var.len())?;
        if mean.is_empty() {
            return Err(Error::InvalidParameter("zero-dimensional Gaussian".into()));
        }
        if var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("variances must be positive and finite".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("mean must be finite".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// From a mean and per-dimension standard deviations.
    pub fn from_std(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        Self::new(mean, std.iter().map(|s| s * s).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn log_det(&self) -> f64 {
        self.var.iter().map(|v| v.ln()).sum()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * ((xi - m).powi(2) / v + (2.0 * PI * v).ln()))
            .sum())
    }
}

/// Gaussian with a dense symmetric positive-definite covariance.
#[derive(Clone, Debug)]
pub struct FullGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

impl FullGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::InvalidParameter("covariance must be square".into()));
        }
        check_dim(mean.len(), cov.nrows())?;
        let asym = max_asymmetry(&cov);
        if asym > 1e-12 {
            return Err(Error::NotSymmetric(asym));
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn from_diag(g: &DiagGaussian) -> Self {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(g.var()));
        Self::new(DVector::from_column_slice(g.mean()), cov).expect("diagonal positive variances")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `(x - μ)ᵀ Σ⁻¹ (x - μ)` via a triangular solve.
    fn mahalanobis(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor is non-singular");
        y.norm_squared()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let x = DVector::from_column_slice(x);
        Ok(-0.5 * (self.mahalanobis(&x) + self.log_det() + self.dim() as f64 * LN_2PI))
    }
}

/// Mixture of diagonal Gaussians. Weights are stored as unnormalised logits
/// and mapped through a softmax, so any logit vector yields a valid simplex point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    logits: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl GmmPrior {
    pub fn new(logits: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        check_dim(logits.len(), means.len())?;
        check_dim(logits.len(), vars.len())?;
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter("zero-dimensional mixture".into()));
        }
        for (m, v) in means.iter().zip(&vars) {
            check_dim(d, m.len())?;
            check_dim(d, v.len())?;
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidParameter("mixture variances must be positive".into()));
            }
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidParameter("mixture logits must be finite".into()));
        }
        Ok(Self { logits, means, vars })
    }

    /// From explicit weights on the simplex.
    pub fn from_weights(weights: &[f64], means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w) || w == 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "weights must be positive and sum to one".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w.ln()).collect(), means, vars)
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().into_iter().map(f64::exp).collect()
    }

    /// The unit-Gaussian base as a one-component mixture.
    pub fn standard(dim: usize) -> Self {
        Self {
            logits: vec![0.0],
            means: vec![vec![0.0; dim]],
            vars: vec![vec![1.0; dim]],
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// KL(q ‖ p) between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim(q.dim(), p.dim())?;
    Ok(0.5
        * q.mean
            .iter()
            .zip(&q.var)
            .zip(p.mean.iter().zip(&p.var))
            .map(|((mq, vq), (mp, vp))| vq / vp + (mq - mp).powi(2) / vp - 1.0 + (vp / vq).ln())
            .sum::<f64>())
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_diag(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(a.mean
        .iter()
        .zip(&a.var)
        .zip(b.mean.iter().zip(&b.var))
        .map(|((ma, va), (mb, vb))| (ma - mb).powi(2) + (va.sqrt() - vb.sqrt()).powi(2))
        .sum())
}

/// `E[(x - a)ᵀ A (x - a)] = Tr(AΣ) + (μ - a)ᵀ A (μ - a)` for `x ~ g`.
pub fn expected_quadratic_form(a_mat: &DMatrix<f64>, g: &FullGaussian, shift: &DVector<f64>) -> Result<f64> {
    if !a_mat.is_square() {
        return Err(Error::InvalidParameter("quadratic form matrix must be square".into()));
    }
    check_dim(g.dim(), a_mat.nrows())?;
    check_dim(g.dim(), shift.len())?;
    let asym = max_asymmetry(a_mat);
    if asym > 1e-12 {
        return Err(Error::NotSymmetric(asym));
    }
    let diff = g.mean() - shift;
    Ok((a_mat * g.cov()).trace() + diff.dot(&(a_mat * &diff)))
}

/// `E_{x~a}[-log b(x)]`.
pub fn cross_entropy(a: &FullGaussian, b: &FullGaussian) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let prec = b.precision();
    let diff = a.mean() - b.mean();
    let d = a.dim() as f64;
    Ok(0.5 * ((a.cov() * &prec).trace() + diff.dot(&(&prec * &diff)) + b.log_det() + d * LN_2PI))
}

pub fn entropy(a: &FullGaussian) -> f64 {
    let d = a.dim() as f64;
    0.5 * (d + d * LN_2PI + a.log_det())
}

/// Writes `a(x)·b(x) = c(x)·s` and returns `(c, log s)` with
/// `s = N(0; μ_a − μ_b, Σ_a + Σ_b)`.
pub fn gaussian_product(a: &FullGaussian, b: &FullGaussian) -> Result<(FullGaussian, f64)> {
    check_dim(a.dim(), b.dim())?;
    let pa = a.precision();
    let pb = b.precision();
    let cov_c = (&pa + &pb).try_inverse().ok_or(Error::NotPositiveDefinite)?;
    let cov_c = (&cov_c + cov_c.transpose()) * 0.5;
    let mean_c = &cov_c * (&pa * a.mean() + &pb * b.mean());
    let c = FullGaussian::new(mean_c, cov_c)?;
    let sum = FullGaussian::new(DVector::zeros(a.dim()), a.cov() + b.cov())?;
    let diff = a.mean() - b.mean();
    let log_scale = sum.log_density(diff.as_slice())?;
    Ok((c, log_scale))
}

fn log_normal_at_zero_diag(x: impl Iterator<Item = (f64, f64)>) -> f64 {
    // log N(0; x, diag(v)) = log N(x; 0, diag(v))
    x.map(|(xi, v)| -0.5 * (xi * xi / v + (2.0 * PI * v).ln())).sum()
}

/// Log of `N(0; z − z′, 2Σaug) · N((z + z′)/2; 0, I + Σaug/2)`.
pub fn paired_prior_log_density(z: &[f64], z2: &[f64], sigma_aug: &[f64]) -> Result<f64> {
    check_dim(z.len(), z2.len())?;
    check_dim(z.len(), sigma_aug.len())?;
    if sigma_aug.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParameter(
            "augmentation variances must be positive".into(),
        ));
    }
    let diff = log_normal_at_zero_diag(z.iter().zip(z2).zip(sigma_aug).map(|((a, b), s)| (a - b, 2.0 * s)));
    let mid = log_normal_at_zero_diag(
        z.iter()
            .zip(z2)
            .zip(sigma_aug)
            .map(|((a, b), s)| (0.5 * (a + b), 1.0 + 0.5 * s)),
    );
    Ok(diff + mid)
}

/// Paired prior when the base latent distribution is the mixture `prior`.
pub fn gmm_paired_prior_log_density(z: &[f64], z2: &[f64], sigma_aug: &[f64], prior: &GmmPrior) -> Result<f64> {
    check_dim(z.len(), z2.len())?;
    check_dim(z.len(), sigma_aug.len())?;
    check_dim(z.len(), prior.dim())?;
    if sigma_aug.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParameter(
            "augmentation variances must be positive".into(),
        ));
    }
    let diff = log_normal_at_zero_diag(z.iter().zip(z2).zip(sigma_aug).map(|((a, b), s)| (a - b, 2.0 * s)));
    let terms: Vec<f64> = prior
        .log_weights()
        .iter()
        .zip(prior.means.iter().zip(&prior.vars))
        .map(|(lw, (mu, var))| {
            lw + log_normal_at_zero_diag(
                (0..z.len()).map(|i| (0.5 * (z[i] + z2[i]) - mu[i], var[i] + 0.5 * sigma_aug[i])),
            )
        })
        .collect();
    Ok(diff + log_sum_exp(&terms))
}
