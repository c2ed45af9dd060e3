//! Training objectives: the single-input ELBO and the variational bound on an
//! augmented pair `(x, x′)` whose latent prior is the paired prior, both for a
//! unit-Gaussian base and for a learnable Gaussian-mixture base.
//!
//! Everything here assumes diagonal posteriors and a diagonal augmentation
//! covariance `Σaug`, so determinants and inverses are per-dimension.
//!
//! The KL term for the unit-Gaussian base is
//!
//! ```text
//! −¼ Σ_j { (1/s_j + 1/(2+s_j))(v_j + v′_j) + (m_j − m′_j)²/s_j + (m_j + m′_j)²/(2+s_j) }
//!   + ½ Σ_j { log v_j + log v′_j + 2 − log s_j − log(2+s_j) }
//! ```
//!
//! which is exactly `−KL(q(z|x) q(z′|x′) ‖ p(z, z′))`; the constant is `d`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{kl_diag, log_sum_exp, DiagGaussian, GmmPrior};
use crate::model::{recon_loglik_graph, reparameterize_graph, ModelVars, ReconLikelihood, VaeModel};
use crate::oracle::{mc_estimate, sample_diag, McEstimate};
use crate::tensor::{Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RavenBoundConfig {
    sigma_aug: Vec<f64>,
    pub recon: ReconLikelihood,
    /// Reparameterized samples per datum for the mixture expectation.
    pub gmm_samples: usize,
}

impl RavenBoundConfig {
    pub fn new(sigma_aug: Vec<f64>, recon: ReconLikelihood) -> Result<Self> {
        if sigma_aug.is_empty() || sigma_aug.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(
                "augmentation variances must be positive and finite".into(),
            ));
        }
        Ok(Self {
            sigma_aug,
            recon,
            gmm_samples: 1,
        })
    }

    /// `Σaug = std²·I` in `d` dimensions.
    pub fn isotropic(d: usize, std: f64, recon: ReconLikelihood) -> Result<Self> {
        Self::new(vec![std * std; d], recon)
    }

    pub fn sigma_aug(&self) -> &[f64] {
        &self.sigma_aug
    }

    pub fn latent_dim(&self) -> usize {
        self.sigma_aug.len()
    }

    fn check(&self, a: &DiagGaussian, b: &DiagGaussian) -> Result<()> {
        for got in [a.dim(), b.dim()] {
            if got != self.latent_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.latent_dim(),
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Batch-averaged pieces of the pair bound; `total = recon_x + recon_x2 + kl_term`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub recon_x: f64,
    pub recon_x2: f64,
    pub kl_term: f64,
    pub term3: f64,
    pub total: f64,
}

pub fn vanilla_elbo(posterior: &DiagGaussian, recon_loglik: f64) -> Result<f64> {
    if !recon_loglik.is_finite() {
        return Err(Error::NonFinite { op: "vanilla_elbo" });
    }
    Ok(recon_loglik - kl_diag(posterior, &DiagGaussian::standard(posterior.dim()))?)
}

/// `(μ−μ′)ᵀ Σaug⁻¹ (μ−μ′) + (μ+μ′)ᵀ (2I+Σaug)⁻¹ (μ+μ′)`.
pub fn term3(qx: &DiagGaussian, qx2: &DiagGaussian, cfg: &RavenBoundConfig) -> Result<f64> {
    cfg.check(qx, qx2)?;
    Ok((0..cfg.latent_dim())
        .map(|j| {
            let (m, m2, s) = (qx.mean()[j], qx2.mean()[j], cfg.sigma_aug[j]);
            (m - m2).powi(2) / s + (m + m2).powi(2) / (2.0 + s)
        })
        .sum())
}

/// The same quantity written as
/// `2μᵀΣaug⁻¹μ + 2μ′ᵀΣaug⁻¹μ′ − (μ+μ′)ᵀ Σaug⁻¹ (½I + Σaug⁻¹)⁻¹ Σaug⁻¹ (μ+μ′)`,
/// which separates the pull of each code towards the origin from the
/// push of their sum away from it.
pub fn term3_decomposed(qx: &DiagGaussian, qx2: &DiagGaussian, cfg: &RavenBoundConfig) -> Result<f64> {
    cfg.check(qx, qx2)?;
    Ok((0..cfg.latent_dim())
        .map(|j| {
            let (m, m2) = (qx.mean()[j], qx2.mean()[j]);
            let inv = 1.0 / cfg.sigma_aug[j];
            let sum = m + m2;
            2.0 * inv * m * m + 2.0 * inv * m2 * m2 - sum * inv * (1.0 / (0.5 + inv)) * inv * sum
        })
        .sum())
}

/// `−KL(q(z|x) q(z′|x′) ‖ p(z, z′))` for the unit-Gaussian base.
pub fn raven_kl_term(qx: &DiagGaussian, qx2: &DiagGaussian, cfg: &RavenBoundConfig) -> Result<f64> {
    cfg.check(qx, qx2)?;
    let mut acc = 0.0;
    for j in 0..cfg.latent_dim() {
        let s = cfg.sigma_aug[j];
        let (v, v2) = (qx.var()[j], qx2.var()[j]);
        let trace = (1.0 / s + 1.0 / (2.0 + s)) * (v + v2);
        acc += -0.25 * trace + 0.5 * (v.ln() + v2.ln() + 2.0 - s.ln() - (2.0 + s).ln());
    }
    Ok(acc - 0.25 * term3(qx, qx2, cfg)?)
}

/// `E_q[log N(0; z − z′, 2Σaug)]`.
pub fn expected_log_diff_kernel(qx: &DiagGaussian, qx2: &DiagGaussian, cfg: &RavenBoundConfig) -> Result<f64> {
    cfg.check(qx, qx2)?;
    Ok((0..cfg.latent_dim())
        .map(|j| {
            let s = cfg.sigma_aug[j];
            let (m, m2) = (qx.mean()[j], qx2.mean()[j]);
            -0.25 * ((qx.var()[j] + qx2.var()[j]) / s + (m - m2).powi(2) / s) - 0.5 * (s.ln() + (4.0 * PI).ln())
        })
        .sum())
}

/// `E_q[log N((z + z′)/2; 0, I + ½Σaug)]`.
pub fn expected_log_mid_kernel(qx: &DiagGaussian, qx2: &DiagGaussian, cfg: &RavenBoundConfig) -> Result<f64> {
    cfg.check(qx, qx2)?;
    Ok((0..cfg.latent_dim())
        .map(|j| {
            let t = 2.0 + cfg.sigma_aug[j];
            let (m, m2) = (qx.mean()[j], qx2.mean()[j]);
            -0.25 * ((qx.var()[j] + qx2.var()[j]) / t + (m + m2).powi(2) / t) - 0.5 * (t.ln() + PI.ln())
        })
        .sum())
}

/// Entropy of the factorized pair posterior.
pub fn pair_entropy(qx: &DiagGaussian, qx2: &DiagGaussian) -> f64 {
    let d = qx.dim() as f64 + qx2.dim() as f64;
    0.5 * (d + d * LN_2PI + qx.log_det() + qx2.log_det())
}

/// Closed-form part of the mixture-base KL term: everything except
/// `E_q[log Σ_c π_c N((z+z′)/2; μ_c, Σ_c + ½Σaug)]`.
pub fn gmm_closed_part(qx: &DiagGaussian, qx2: &DiagGaussian, cfg: &RavenBoundConfig) -> Result<f64> {
    cfg.check(qx, qx2)?;
    let d = cfg.latent_dim() as f64;
    let mut acc = d + 0.5 * d * PI.ln();
    for j in 0..cfg.latent_dim() {
        let s = cfg.sigma_aug[j];
        let (m, m2, v, v2) = (qx.mean()[j], qx2.mean()[j], qx.var()[j], qx2.var()[j]);
        acc += -0.25 * ((v + v2) / s + (m - m2).powi(2) / s) + 0.5 * (v.ln() + v2.ln()) - 0.5 * s.ln();
    }
    Ok(acc)
}

/// `log Σ_c π_c N(m̄; μ_c, Σ_c + ½Σaug)` at one midpoint `m̄`.
pub fn gmm_mid_log_density(mid: &[f64], sigma_aug: &[f64], prior: &GmmPrior) -> f64 {
    let terms: Vec<f64> = prior
        .log_weights()
        .iter()
        .zip(prior.means().iter().zip(prior.vars()))
        .map(|(lw, (mu, var))| {
            lw + mid
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let v = var[j] + 0.5 * sigma_aug[j];
                    -0.5 * ((x - mu[j]).powi(2) / v + (2.0 * PI * v).ln())
                })
                .sum::<f64>()
        })
        .collect();
    log_sum_exp(&terms)
}

/// Monte Carlo estimate of the mixture expectation under the pair posterior.
pub fn gmm_mixture_expectation<R: Rng>(
    qx: &DiagGaussian,
    qx2: &DiagGaussian,
    cfg: &RavenBoundConfig,
    prior: &GmmPrior,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    cfg.check(qx, qx2)?;
    if prior.dim() != cfg.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.latent_dim(),
            got: prior.dim(),
        });
    }
    let d = cfg.latent_dim();
    let (mut z, mut z2, mut mid) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    Ok(mc_estimate(rng, samples.max(2), |r| {
        sample_diag(r, qx.mean(), qx.var(), &mut z);
        sample_diag(r, qx2.mean(), qx2.var(), &mut z2);
        for j in 0..d {
            mid[j] = 0.5 * (z[j] + z2[j]);
        }
        gmm_mid_log_density(&mid, &cfg.sigma_aug, prior)
    }))
}

/// Graph handles for the pieces of a pair objective; scalars are batch means.
#[derive(Clone, Copy, Debug)]
pub struct PairTerms {
    pub recon_x: Var,
    pub recon_x2: Var,
    pub kl_term: Var,
    pub term3: Var,
    pub total: Var,
    pub mu: Var,
    pub mu2: Var,
}

/// Graph handles for the single-input ELBO.
#[derive(Clone, Copy, Debug)]
pub struct SingleTerms {
    pub recon: Var,
    pub kl_term: Var,
    pub total: Var,
    pub mu: Var,
}

impl PairTerms {
    pub fn breakdown(&self, g: &Graph) -> BoundBreakdown {
        BoundBreakdown {
            recon_x: g.value(self.recon_x).item(),
            recon_x2: g.value(self.recon_x2).item(),
            kl_term: g.value(self.kl_term).item(),
            term3: g.value(self.term3).item(),
            total: g.value(self.total).item(),
        }
    }
}

fn const_vec(g: &mut Graph, data: Vec<f64>) -> Var {
    g.constant(Tensor::vector(data))
}

/// Per-datum `−KL(q ‖ N(0, I))`, shape `[B]`.
pub fn neg_kl_standard_rows(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    // −½ Σ (μ² + v − log v − 1)
    let m2 = g.square(mu)?;
    let v = g.exp(logvar)?;
    let a = g.add(m2, v)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum_rows(c)?;
    g.scale(s, -0.5)
}

/// Per-datum pair KL term and `③`, both shape `[B]`.
pub fn raven_kl_rows(
    g: &mut Graph,
    (mu, logvar): (Var, Var),
    (mu2, logvar2): (Var, Var),
    sigma_aug: &[f64],
) -> Result<(Var, Var)> {
    let trace_w = const_vec(g, sigma_aug.iter().map(|s| 1.0 / s + 1.0 / (2.0 + s)).collect());
    let inv_s = const_vec(g, sigma_aug.iter().map(|s| 1.0 / s).collect());
    let inv_t = const_vec(g, sigma_aug.iter().map(|s| 1.0 / (2.0 + s)).collect());
    let constant: f64 = sigma_aug.iter().map(|s| 0.5 * (2.0 - s.ln() - (2.0 + s).ln())).sum();

    let v = g.exp(logvar)?;
    let v2 = g.exp(logvar2)?;
    let vs = g.add(v, v2)?;
    let trace = g.mul(vs, trace_w)?;

    let dm = g.sub(mu, mu2)?;
    let dm2 = g.square(dm)?;
    let diff_part = g.mul(dm2, inv_s)?;
    let sm = g.add(mu, mu2)?;
    let sm2 = g.square(sm)?;
    let sum_part = g.mul(sm2, inv_t)?;
    let t3_elem = g.add(diff_part, sum_part)?;
    let t3 = g.sum_rows(t3_elem)?;

    let quad = g.add(trace, t3_elem)?;
    let quad = g.sum_rows(quad)?;
    let quad = g.scale(quad, -0.25)?;
    let lv = g.add(logvar, logvar2)?;
    let lv = g.sum_rows(lv)?;
    let lv = g.scale(lv, 0.5)?;
    let kl = g.add(quad, lv)?;
    let kl = g.add_scalar(kl, constant)?;
    Ok((kl, t3))
}

/// Per-datum closed part of the mixture-base KL term and the `Σaug`-only
/// part of `③`, both shape `[B]`.
pub fn gmm_closed_rows(
    g: &mut Graph,
    (mu, logvar): (Var, Var),
    (mu2, logvar2): (Var, Var),
    sigma_aug: &[f64],
) -> Result<(Var, Var)> {
    let d = sigma_aug.len() as f64;
    let inv_s = const_vec(g, sigma_aug.iter().map(|s| 1.0 / s).collect());
    let constant = d + 0.5 * d * PI.ln() - 0.5 * sigma_aug.iter().map(|s| s.ln()).sum::<f64>();

    let v = g.exp(logvar)?;
    let v2 = g.exp(logvar2)?;
    let vs = g.add(v, v2)?;
    let dm = g.sub(mu, mu2)?;
    let dm2 = g.square(dm)?;
    let inner = g.add(vs, dm2)?;
    let inner = g.mul(inner, inv_s)?;
    let inner = g.sum_rows(inner)?;
    let quad = g.scale(inner, -0.25)?;
    let diff = g.mul(dm2, inv_s)?;
    let diff = g.sum_rows(diff)?;

    let lv = g.add(logvar, logvar2)?;
    let lv = g.sum_rows(lv)?;
    let lv = g.scale(lv, 0.5)?;
    let out = g.add(quad, lv)?;
    let out = g.add_scalar(out, constant)?;
    Ok((out, diff))
}

/// Per-datum `log Σ_c π_c N((z+z′)/2; μ_c, Σ_c + ½Σaug)` with the mixture
/// parameters as graph nodes (`logits [C]`, `means [C,d]`, `logvars [C,d]`).
pub fn gmm_mid_log_density_rows(
    g: &mut Graph,
    z: Var,
    z2: Var,
    (logits, means, logvars): (Var, Var, Var),
    sigma_aug: &[f64],
) -> Result<Var> {
    let d = sigma_aug.len();
    let c = g.value(logits).numel();
    let half_s = const_vec(g, sigma_aug.iter().map(|s| 0.5 * s).collect());
    let sum = g.add(z, z2)?;
    let mid = g.scale(sum, 0.5)?;

    let mut cols = Vec::with_capacity(c);
    for k in 0..c {
        let mu_k = g.row(means, k)?;
        let lv_k = g.row(logvars, k)?;
        let var_k = g.exp(lv_k)?;
        let var_k = g.add(var_k, half_s)?;
        let diff = g.sub(mid, mu_k)?;
        let sq = g.square(diff)?;
        let q = g.div(sq, var_k)?;
        let q = g.sum_rows(q)?;
        let q = g.scale(q, -0.5)?;
        let log_var = g.log(var_k)?;
        let log_det = g.sum(log_var)?;
        let log_det = g.scale(log_det, -0.5)?;
        let col = g.add(q, log_det)?;
        cols.push(g.add_scalar(col, -0.5 * d as f64 * LN_2PI)?);
    }
    let table = g.concat_cols(&cols)?;

    let row_logits = g.reshape(logits, vec![1, c])?;
    let lse = g.logsumexp_rows(row_logits)?;
    let lse = g.reshape(lse, vec![])?;
    let log_w = g.sub(logits, lse)?;
    let table = g.add(table, log_w)?;
    g.logsumexp_rows(table)
}

/// Single-input ELBO on a `[B, D]` batch with noise `eps` of shape `[B, d]`.
pub fn vanilla_objective(
    g: &mut Graph,
    mv: &ModelVars,
    x: Var,
    eps: &Tensor,
    recon: ReconLikelihood,
) -> Result<SingleTerms> {
    let (mu, logvar) = mv.encode(g, x)?;
    let e = g.constant(eps.clone());
    let z = reparameterize_graph(g, mu, logvar, e)?;
    let logits = mv.decode(g, z)?;
    let rec = recon_loglik_graph(g, logits, x, recon)?;
    let kl = neg_kl_standard_rows(g, mu, logvar)?;
    let tot = g.add(rec, kl)?;
    Ok(SingleTerms {
        recon: g.mean(rec)?,
        kl_term: g.mean(kl)?,
        total: g.mean(tot)?,
        mu,
    })
}

fn check_pair(g: &Graph, x: Var, x2: Var) -> Result<()> {
    let (a, b) = (g.value(x).shape(), g.value(x2).shape());
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "pair bound",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn pair_recon(
    g: &mut Graph,
    mv: &ModelVars,
    x: Var,
    x2: Var,
    eps: &Tensor,
    eps2: &Tensor,
    recon: ReconLikelihood,
) -> Result<((Var, Var), (Var, Var), (Var, Var), (Var, Var))> {
    check_pair(g, x, x2)?;
    let (mu, logvar) = mv.encode(g, x)?;
    let (mu2, logvar2) = mv.encode(g, x2)?;
    let e = g.constant(eps.clone());
    let e2 = g.constant(eps2.clone());
    let z = reparameterize_graph(g, mu, logvar, e)?;
    let z2 = reparameterize_graph(g, mu2, logvar2, e2)?;
    let l = mv.decode(g, z)?;
    let l2 = mv.decode(g, z2)?;
    let r = recon_loglik_graph(g, l, x, recon)?;
    let r2 = recon_loglik_graph(g, l2, x2, recon)?;
    Ok(((mu, logvar), (mu2, logvar2), (z, z2), (r, r2)))
}

/// Pair bound with the unit-Gaussian base, one reparameterized sample per datum.
pub fn raven_objective(
    g: &mut Graph,
    mv: &ModelVars,
    x: Var,
    x2: Var,
    eps: &Tensor,
    eps2: &Tensor,
    cfg: &RavenBoundConfig,
) -> Result<PairTerms> {
    let (q, q2, _, (r, r2)) = pair_recon(g, mv, x, x2, eps, eps2, cfg.recon)?;
    let (kl, t3) = raven_kl_rows(g, q, q2, &cfg.sigma_aug)?;
    let rr = g.add(r, r2)?;
    let tot = g.add(rr, kl)?;
    Ok(PairTerms {
        recon_x: g.mean(r)?,
        recon_x2: g.mean(r2)?,
        kl_term: g.mean(kl)?,
        term3: g.mean(t3)?,
        total: g.mean(tot)?,
        mu: q.0,
        mu2: q2.0,
    })
}

/// Pair bound with the model's mixture base. `noise[0]` drives the
/// reconstruction sample; every pair in `noise` contributes to the mixture
/// expectation.
pub fn gmm_raven_objective(
    g: &mut Graph,
    mv: &ModelVars,
    x: Var,
    x2: Var,
    noise: &[(Tensor, Tensor)],
    cfg: &RavenBoundConfig,
) -> Result<PairTerms> {
    let gmm = mv
        .gmm()
        .ok_or_else(|| Error::InvalidParameter("model has no mixture prior".into()))?;
    let (first, rest) = noise
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("mixture bound needs at least one noise sample".into()))?;
    let (q, q2, (z, z2), (r, r2)) = pair_recon(g, mv, x, x2, &first.0, &first.1, cfg.recon)?;
    let (closed, t3) = gmm_closed_rows(g, q, q2, &cfg.sigma_aug)?;
    let params = (gmm.logits, gmm.means, gmm.logvars);

    let mut expect = gmm_mid_log_density_rows(g, z, z2, params, &cfg.sigma_aug)?;
    for (e, e2) in rest {
        let ev = g.constant(e.clone());
        let ev2 = g.constant(e2.clone());
        let zk = reparameterize_graph(g, q.0, q.1, ev)?;
        let zk2 = reparameterize_graph(g, q2.0, q2.1, ev2)?;
        let term = gmm_mid_log_density_rows(g, zk, zk2, params, &cfg.sigma_aug)?;
        expect = g.add(expect, term)?;
    }
    let expect = g.scale(expect, 1.0 / noise.len() as f64)?;
    let kl = g.add(closed, expect)?;

    let rr = g.add(r, r2)?;
    let tot = g.add(rr, kl)?;
    Ok(PairTerms {
        recon_x: g.mean(r)?,
        recon_x2: g.mean(r2)?,
        kl_term: g.mean(kl)?,
        term3: g.mean(t3)?,
        total: g.mean(tot)?,
        mu: q.0,
        mu2: q2.0,
    })
}

/// Evaluates the unit-Gaussian pair bound on a batch pair with given noise.
pub fn raven_bound(
    model: &VaeModel,
    x: &Tensor,
    x2: &Tensor,
    eps: &Tensor,
    eps2: &Tensor,
    cfg: &RavenBoundConfig,
) -> Result<BoundBreakdown> {
    check_latent(model, cfg)?;
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let xv2 = g.constant(x2.clone());
    let terms = raven_objective(&mut g, &mv, xv, xv2, eps, eps2, cfg)?;
    Ok(terms.breakdown(&g))
}

/// Evaluates the mixture-base pair bound on a batch pair with given noise.
pub fn gmm_raven_bound(
    model: &VaeModel,
    x: &Tensor,
    x2: &Tensor,
    noise: &[(Tensor, Tensor)],
    cfg: &RavenBoundConfig,
) -> Result<BoundBreakdown> {
    check_latent(model, cfg)?;
    model.gmm_prior()?;
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let xv2 = g.constant(x2.clone());
    let terms = gmm_raven_objective(&mut g, &mv, xv, xv2, noise, cfg)?;
    Ok(terms.breakdown(&g))
}

fn check_latent(model: &VaeModel, cfg: &RavenBoundConfig) -> Result<()> {
    if model.latent_dim() != cfg.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.latent_dim(),
            got: cfg.latent_dim(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::oracle::{mc_estimate, normal_logpdf, pair_joint_log_density, rng, standard_normal, MixtureBase};
    use crate::tensor::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop, prop_assert, prop_assume, proptest};

    fn diag(m: &[f64], v: &[f64]) -> DiagGaussian {
        DiagGaussian::new(m.to_vec(), v.to_vec()).unwrap()
    }

    fn cfg1(s: f64) -> RavenBoundConfig {
        RavenBoundConfig::new(vec![s], ReconLikelihood::BernoulliCrossEntropy).unwrap()
    }

    fn random_posterior(r: &mut impl Rng, d: usize) -> DiagGaussian {
        diag(
            &(0..d).map(|_| r.random_range(-1.5..1.5)).collect::<Vec<_>>(),
            &(0..d).map(|_| r.random_range(0.2..2.0)).collect::<Vec<_>>(),
        )
    }

    fn random_instance(r: &mut impl Rng, d: usize) -> (DiagGaussian, DiagGaussian, RavenBoundConfig) {
        let a = random_posterior(r, d);
        let b = random_posterior(r, d);
        let s = (0..d).map(|_| r.random_range(0.1..2.0)).collect();
        (
            a,
            b,
            RavenBoundConfig::new(s, ReconLikelihood::BernoulliCrossEntropy).unwrap(),
        )
    }

    #[test]
    fn vanilla_elbo_examples() {
        assert_eq!(vanilla_elbo(&DiagGaussian::standard(3), 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(vanilla_elbo(&diag(&[1.0], &[1.0]), 0.0).unwrap(), -0.5, epsilon = 1e-15);
        assert!(vanilla_elbo(&diag(&[0.3], &[0.5]), -2.0).unwrap() <= -2.0);
        assert!(vanilla_elbo(&DiagGaussian::standard(1), f64::NAN).is_err());
    }

    #[test]
    fn term3_examples() {
        let c = cfg1(1.0);
        let z = DiagGaussian::standard(1);
        assert_eq!(term3(&z, &z, &c).unwrap(), 0.0);
        let one = diag(&[1.0], &[1.0]);
        let minus = diag(&[-1.0], &[1.0]);
        assert_abs_diff_eq!(term3(&one, &one, &c).unwrap(), 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(term3(&one, &minus, &c).unwrap(), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(term3_decomposed(&one, &one, &c).unwrap(), 4.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn fixed_instance_equals_exact_kl() {
        // Joint prior over (z, z′) is N(0, [[2,1],[1,2]]), posterior is N(0, I₂):
        // KL = ½(tr Σ_p⁻¹ − 2 + log det Σ_p) = ½(4/3 − 2 + log 3).
        let z = DiagGaussian::standard(1);
        let exact = -0.5 * (4.0 / 3.0 - 2.0 + 3f64.ln());
        assert_abs_diff_eq!(raven_kl_term(&z, &z, &cfg1(1.0)).unwrap(), exact, epsilon = 1e-14);
        assert_abs_diff_eq!(exact, -0.215_972_8, epsilon = 1e-7);
    }

    #[test]
    fn kl_term_is_sum_of_derivation_pieces() {
        let mut r = rng(21);
        for _ in 0..50 {
            let (a, b, c) = random_instance(&mut r, 4);
            let pieces = expected_log_diff_kernel(&a, &b, &c).unwrap()
                + expected_log_mid_kernel(&a, &b, &c).unwrap()
                + pair_entropy(&a, &b);
            assert_abs_diff_eq!(raven_kl_term(&a, &b, &c).unwrap(), pieces, epsilon = 1e-11);
        }
    }

    #[test]
    fn derivation_expectations_match_monte_carlo() {
        let mut r = rng(22);
        let (a, b, c) = random_instance(&mut r, 2);
        let s = c.sigma_aug().to_vec();
        let (mut z, mut z2) = ([0.0; 2], [0.0; 2]);
        let diff = mc_estimate(&mut r, 200_000, |r| {
            sample_diag(r, a.mean(), a.var(), &mut z);
            sample_diag(r, b.mean(), b.var(), &mut z2);
            (0..2).map(|j| normal_logpdf(0.0, z[j] - z2[j], 2.0 * s[j])).sum()
        });
        assert!(
            diff.agrees(expected_log_diff_kernel(&a, &b, &c).unwrap(), 3.0),
            "{diff:?}"
        );
        let mid = mc_estimate(&mut r, 200_000, |r| {
            sample_diag(r, a.mean(), a.var(), &mut z);
            sample_diag(r, b.mean(), b.var(), &mut z2);
            (0..2)
                .map(|j| normal_logpdf(0.5 * (z[j] + z2[j]), 0.0, 1.0 + 0.5 * s[j]))
                .sum()
        });
        assert!(mid.agrees(expected_log_mid_kernel(&a, &b, &c).unwrap(), 3.0), "{mid:?}");
    }

    #[test]
    fn kl_term_matches_monte_carlo_kl() {
        let mut r = rng(23);
        let (a, b, c) = random_instance(&mut r, 3);
        let base = MixtureBase::standard(3);
        let (mut z, mut z2) = ([0.0; 3], [0.0; 3]);
        let est = mc_estimate(&mut r, 200_000, |r| {
            sample_diag(r, a.mean(), a.var(), &mut z);
            sample_diag(r, b.mean(), b.var(), &mut z2);
            a.log_density(&z).unwrap() + b.log_density(&z2).unwrap()
                - pair_joint_log_density(&z, &z2, c.sigma_aug(), &base)
        });
        assert!(est.agrees(-raven_kl_term(&a, &b, &c).unwrap(), 3.0), "{est:?}");
    }

    #[test]
    fn remark_one_offset_is_constant() {
        let s = (5f64.sqrt() - 1.0) / 2.0;
        let c = RavenBoundConfig::new(vec![s; 3], ReconLikelihood::BernoulliCrossEntropy).unwrap();
        let typical = DiagGaussian::standard(3);
        let mut r = rng(24);
        let values: Vec<f64> = (0..100)
            .map(|_| {
                let (q, _, _) = random_instance(&mut r, 3);
                raven_kl_term(&q, &typical, &c).unwrap() + kl_diag(&q, &typical).unwrap()
            })
            .collect();
        let mean = values.iter().sum::<f64>() / 100.0;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
        assert!(var < 1e-10, "variance {var}");
    }

    #[test]
    fn gmm_closed_part_plus_expectation_collapses_to_unit_base() {
        let mut r = rng(25);
        let (a, b, c) = random_instance(&mut r, 2);
        let prior = GmmPrior::standard(2);
        let est = gmm_mixture_expectation(&a, &b, &c, &prior, 200_000, &mut r).unwrap();
        // E[log N(m̄; 0, I + ½S)] written directly in terms of the moments of m̄
        let mid_exact: f64 = (0..2)
            .map(|j| {
                let v = 1.0 + 0.5 * c.sigma_aug()[j];
                let m = 0.5 * (a.mean()[j] + b.mean()[j]);
                let var_mid = 0.25 * (a.var()[j] + b.var()[j]);
                -0.5 * ((m * m + var_mid) / v + (2.0 * PI * v).ln())
            })
            .sum();
        assert_abs_diff_eq!(mid_exact, expected_log_mid_kernel(&a, &b, &c).unwrap(), epsilon = 1e-12);
        assert!(est.agrees(mid_exact, 3.0), "{est:?}");
        let total = gmm_closed_part(&a, &b, &c).unwrap() + mid_exact;
        assert_abs_diff_eq!(total, raven_kl_term(&a, &b, &c).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let c = cfg1(1.0);
        let z2 = DiagGaussian::standard(2);
        assert!(raven_kl_term(&z2, &z2, &c).is_err());
        assert!(term3(&DiagGaussian::standard(1), &z2, &c).is_err());
        assert!(RavenBoundConfig::new(vec![0.0], ReconLikelihood::GaussianMse).is_err());
    }

    fn toy(gmm: Option<usize>) -> VaeModel {
        let arch = Architecture {
            input_dim: 8,
            hidden: vec![5],
            latent_dim: 2,
            gmm_components: gmm,
        };
        VaeModel::new(arch, &mut rng(31)).unwrap()
    }

    fn toy_batch(seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut r = rng(seed);
        let mut t = |rows, cols, unit: bool| {
            let data = (0..rows * cols)
                .map(|_| {
                    if unit {
                        r.random_range(0.0..1.0)
                    } else {
                        standard_normal(&mut r)
                    }
                })
                .collect();
            Tensor::matrix(rows, cols, data).unwrap()
        };
        (t(4, 8, true), t(4, 8, true), t(4, 2, false), t(4, 2, false))
    }

    #[test]
    fn breakdown_is_additive_and_kl_non_positive() {
        let m = toy(None);
        let (x, x2, e, e2) = toy_batch(1);
        let c = RavenBoundConfig::isotropic(2, 0.1, ReconLikelihood::BernoulliCrossEntropy).unwrap();
        let b = raven_bound(&m, &x, &x2, &e, &e2, &c).unwrap();
        assert_abs_diff_eq!(b.total, b.recon_x + b.recon_x2 + b.kl_term, epsilon = 1e-10);
        assert!(b.kl_term <= 0.0);
        assert!(b.total <= b.recon_x + b.recon_x2);
    }

    #[test]
    fn identical_pair_identical_recon() {
        let m = toy(None);
        let (x, _, e, _) = toy_batch(2);
        let c = RavenBoundConfig::isotropic(2, 0.2, ReconLikelihood::BernoulliCrossEntropy).unwrap();
        let b = raven_bound(&m, &x, &x, &e, &e, &c).unwrap();
        assert_eq!(b.recon_x, b.recon_x2);
    }

    #[test]
    fn graph_kl_rows_match_scalar_closed_form() {
        let m = toy(None);
        let (x, x2, e, e2) = toy_batch(3);
        let c = RavenBoundConfig::new(vec![0.3, 0.05], ReconLikelihood::BernoulliCrossEntropy).unwrap();
        let p = m.encode(&x).unwrap();
        let p2 = m.encode(&x2).unwrap();
        let expected: f64 = (0..4)
            .map(|i| raven_kl_term(&p.gaussian(i).unwrap(), &p2.gaussian(i).unwrap(), &c).unwrap())
            .sum::<f64>()
            / 4.0;
        let b = raven_bound(&m, &x, &x2, &e, &e2, &c).unwrap();
        assert_abs_diff_eq!(b.kl_term, expected, epsilon = 1e-12);
    }

    #[test]
    fn pair_shape_mismatch_rejected() {
        let m = toy(None);
        let (x, _, e, e2) = toy_batch(4);
        let short = x.select_rows(&[0, 1]);
        let c = RavenBoundConfig::isotropic(2, 0.2, ReconLikelihood::BernoulliCrossEntropy).unwrap();
        assert!(raven_bound(&m, &x, &short, &e, &e2, &c).is_err());
    }

    #[test]
    fn encoder_gradient_of_bound_matches_finite_differences() {
        let m = toy(None);
        let (x, x2, e, e2) = toy_batch(5);
        let c = RavenBoundConfig::isotropic(2, 0.3, ReconLikelihood::BernoulliCrossEntropy).unwrap();
        for name in ["enc0.w", "enc.mean.w", "enc.logvar.b", "enc0.slope"] {
            let idx = m.names().iter().position(|n| n == name).unwrap();
            let err = finite_diff_check(
                |g, p| {
                    let mut mv = m.bind(g, false);
                    mv.replace_var(idx, p);
                    let xv = g.constant(x.clone());
                    let xv2 = g.constant(x2.clone());
                    Ok(raven_objective(g, &mv, xv, xv2, &e, &e2, &c)?.total)
                },
                &m.params()[idx],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn gmm_single_unit_component_matches_unit_bound_in_expectation() {
        let mut m = toy(Some(1));
        m.param_mut("gmm.means").unwrap().data_mut().fill(0.0);
        let (x, x2, _, _) = toy_batch(6);
        let c = RavenBoundConfig::isotropic(2, 0.3, ReconLikelihood::BernoulliCrossEntropy).unwrap();
        let mut r = rng(7);
        let mut noise = || {
            let data: Vec<f64> = (0..8).map(|_| standard_normal(&mut r)).collect();
            Tensor::matrix(4, 2, data).unwrap()
        };
        let n = 4000;
        let mut gmm_vals = Vec::with_capacity(n);
        let mut unit_vals = Vec::with_capacity(n);
        for _ in 0..n {
            let (e, e2) = (noise(), noise());
            gmm_vals.push(
                gmm_raven_bound(&m, &x, &x2, &[(e.clone(), e2.clone())], &c)
                    .unwrap()
                    .total,
            );
            unit_vals.push(raven_bound(&m, &x, &x2, &e, &e2, &c).unwrap().total);
        }
        let diffs: Vec<f64> = gmm_vals.iter().zip(&unit_vals).map(|(a, b)| a - b).collect();
        let mut it = diffs.iter();
        let est = mc_estimate(&mut r, n, |_| *it.next().unwrap());
        assert!(est.agrees(0.0, 3.0), "{est:?}");
    }

    #[test]
    fn gmm_bound_needs_mixture() {
        let m = toy(None);
        let (x, x2, e, e2) = toy_batch(8);
        let c = RavenBoundConfig::isotropic(2, 0.3, ReconLikelihood::BernoulliCrossEntropy).unwrap();
        assert!(gmm_raven_bound(&m, &x, &x2, &[(e, e2)], &c).is_err());
    }

    #[test]
    fn gmm_graph_density_matches_scalar() {
        let m = toy(Some(3));
        let prior = m.gmm_prior().unwrap().unwrap();
        let s = [0.2, 0.05];
        let z = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        let z2 = Tensor::matrix(2, 2, vec![0.1, 0.0, 0.8, 0.9]).unwrap();
        let mut g = Graph::new();
        let mv = m.bind(&mut g, false);
        let gv = mv.gmm().unwrap();
        let zv = g.constant(z.clone());
        let zv2 = g.constant(z2.clone());
        let rows = gmm_mid_log_density_rows(&mut g, zv, zv2, (gv.logits, gv.means, gv.logvars), &s).unwrap();
        for i in 0..2 {
            let mid: Vec<f64> = (0..2).map(|j| 0.5 * (z.row(i)[j] + z2.row(i)[j])).collect();
            assert_abs_diff_eq!(
                g.value(rows).data()[i],
                gmm_mid_log_density(&mid, &s, &prior),
                epsilon = 1e-12
            );
        }
    }

    proptest! {
        #[test]
        fn term3_forms_agree(
            m in prop::collection::vec(-3.0f64..3.0, 4),
            m2 in prop::collection::vec(-3.0f64..3.0, 4),
            s in prop::collection::vec(1e-3f64..3.0, 4),
        ) {
            let c = RavenBoundConfig::new(s, ReconLikelihood::BernoulliCrossEntropy).unwrap();
            let a = diag(&m, &[1.0; 4]);
            let b = diag(&m2, &[1.0; 4]);
            let t = term3(&a, &b, &c).unwrap();
            let td = term3_decomposed(&a, &b, &c).unwrap();
            prop_assert!((t - td).abs() < 1e-10 * t.abs().max(1.0));
        }

        #[test]
        fn kl_term_symmetric_and_non_positive(
            m in prop::collection::vec(-2.0f64..2.0, 3),
            m2 in prop::collection::vec(-2.0f64..2.0, 3),
            v in prop::collection::vec(0.05f64..3.0, 3),
            v2 in prop::collection::vec(0.05f64..3.0, 3),
            s in prop::collection::vec(1e-3f64..2.0, 3),
        ) {
            let c = RavenBoundConfig::new(s, ReconLikelihood::BernoulliCrossEntropy).unwrap();
            let a = diag(&m, &v);
            let b = diag(&m2, &v2);
            let ab = raven_kl_term(&a, &b, &c).unwrap();
            prop_assert!((ab - raven_kl_term(&b, &a, &c).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= 0.0);
        }

        #[test]
        fn kl_term_decreases_with_separation(
            mid in prop::collection::vec(-1.0f64..1.0, 2),
            dir in prop::collection::vec(-1.0f64..1.0, 2),
            s in 1e-3f64..2.0,
        ) {
            prop_assume!(dir.iter().map(|x| x * x).sum::<f64>() > 1e-4);
            let c = RavenBoundConfig::new(vec![s; 2], ReconLikelihood::BernoulliCrossEntropy).unwrap();
            let mut last = f64::INFINITY;
            for k in 0..5 {
                let t = 0.25 * k as f64;
                let a = diag(&[mid[0] + t * dir[0], mid[1] + t * dir[1]], &[0.5, 0.5]);
                let b = diag(&[mid[0] - t * dir[0], mid[1] - t * dir[1]], &[0.5, 0.5]);
                let v = raven_kl_term(&a, &b, &c).unwrap();
                prop_assert!(v < last);
                last = v;
            }
        }
    }
}
