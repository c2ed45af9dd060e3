//! Oracle suites that check every Gaussian closed form and the pair bound
//! against quadrature, Monte Carlo, or an independent exact computation.
//! Each check yields one [`VerifyRow`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bound::{raven_kl_term, term3, term3_decomposed, RavenBoundConfig};
use crate::error::Result;
use crate::gaussian::{
    cross_entropy, entropy, expected_quadratic_form, gaussian_product, gmm_paired_prior_log_density, kl_diag,
    paired_prior_log_density, DiagGaussian, FullGaussian, GmmPrior,
};
use crate::model::ReconLikelihood;
use crate::oracle::{
    full_logpdf, mc_estimate, pair_joint_log_density, paired_prior_quadrature, random_spd, rng, sample_diag,
    sample_full, MixtureBase,
};

/// Monte Carlo sample count per instance.
pub const MC_SAMPLES: usize = 1_000_000;
/// Standard errors allowed between a closed form and its MC estimate.
pub const MC_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRow {
    pub suite: &'static str,
    pub identity: &'static str,
    pub instance: usize,
    /// Seed that regenerates this instance on its own.
    pub seed: u64,
    pub value: f64,
    pub reference: f64,
    /// Absolute error, or standard errors for Monte Carlo rows.
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl VerifyRow {
    fn exact(
        suite: &'static str,
        identity: &'static str,
        instance: usize,
        seed: u64,
        value: f64,
        reference: f64,
        tol: f64,
    ) -> Self {
        let error = (value - reference).abs();
        Self {
            suite,
            identity,
            instance,
            seed,
            value,
            reference,
            error,
            tolerance: tol,
            pass: error < tol,
        }
    }

    fn mc(
        suite: &'static str,
        identity: &'static str,
        instance: usize,
        seed: u64,
        value: f64,
        est: crate::oracle::McEstimate,
    ) -> Self {
        let z = est.z_score(value);
        Self {
            suite,
            identity,
            instance,
            seed,
            value,
            reference: est.mean,
            error: z,
            tolerance: MC_SIGMAS,
            pass: z <= MC_SIGMAS,
        }
    }
}

pub const CSV_HEADER: &str = "suite,identity,instance,seed,value,reference,error,tolerance,pass";

pub fn write_csv<W: Write>(mut w: W, manifest: &str, rows: &[VerifyRow]) -> Result<()> {
    writeln!(w, "# manifest {manifest}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.12e},{:.12e},{:.3e},{:e},{}",
            r.suite, r.identity, r.instance, r.seed, r.value, r.reference, r.error, r.tolerance, r.pass
        )?;
    }
    Ok(())
}

/// Per-instance seeds for one suite, derived from the run seed.
fn instance_seeds(seed: u64, suite: u64, n: usize) -> Vec<u64> {
    let mut r = rng(seed);
    r.set_stream(suite);
    (0..n).map(|_| r.next_u64()).collect()
}

fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo.ln()..hi.ln()).exp()
}

fn random_vec(r: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| r.random_range(lo..hi)).collect()
}

fn random_diag(r: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    DiagGaussian::new(random_vec(r, d, -1.5, 1.5), random_vec(r, d, 0.2, 2.0)).expect("positive variances")
}

fn random_full(r: &mut ChaCha8Rng, d: usize) -> FullGaussian {
    let mean = DVector::from_vec(random_vec(r, d, -1.0, 1.0));
    FullGaussian::new(mean, random_spd(r, d)).expect("SPD covariance")
}

/// Lower Cholesky factor computed independently of the library types.
fn cholesky(cov: &DMatrix<f64>) -> DMatrix<f64> {
    cov.clone().cholesky().expect("SPD covariance").l()
}

/// Closed-form paired prior against nested quadrature of the defining integral.
pub fn prior_quadrature_suite(seed: u64, instances: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::with_capacity(instances);
    for (i, s) in instance_seeds(seed, 1, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 2;
        let z = random_vec(&mut r, d, -2.0, 2.0);
        let z2 = random_vec(&mut r, d, -2.0, 2.0);
        let sa: Vec<f64> = (0..d).map(|_| log_uniform(&mut r, 1e-3, 2.0)).collect();
        let closed = paired_prior_log_density(&z, &z2, &sa)?;
        let quad = paired_prior_quadrature(&z, &z2, &sa, &MixtureBase::standard(d))?;
        rows.push(VerifyRow::exact(
            "gaussian",
            "paired_prior_vs_quadrature",
            i,
            s,
            closed,
            quad,
            1e-6,
        ));
    }
    Ok(rows)
}

/// Mixture paired prior against quadrature, for 1, 2 and 3 components.
pub fn gmm_prior_quadrature_suite(seed: u64, instances_per_c: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for c in 1..=3usize {
        for (i, s) in instance_seeds(seed, 10 + c as u64, instances_per_c)
            .into_iter()
            .enumerate()
        {
            let mut r = rng(s);
            let d = 1 + i % 2;
            let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let means: Vec<Vec<f64>> = (0..c).map(|_| random_vec(&mut r, d, -2.0, 2.0)).collect();
            let vars: Vec<Vec<f64>> = (0..c).map(|_| random_vec(&mut r, d, 0.3, 2.0)).collect();
            let z = random_vec(&mut r, d, -2.0, 2.0);
            let z2 = random_vec(&mut r, d, -2.0, 2.0);
            let sa: Vec<f64> = (0..d).map(|_| log_uniform(&mut r, 1e-3, 2.0)).collect();
            let prior = GmmPrior::from_weights(&weights, means.clone(), vars.clone())?;
            let closed = gmm_paired_prior_log_density(&z, &z2, &sa, &prior)?;
            let base = MixtureBase { weights, means, vars };
            let quad = paired_prior_quadrature(&z, &z2, &sa, &base)?;
            let identity = match c {
                1 => "gmm_prior_vs_quadrature_c1",
                2 => "gmm_prior_vs_quadrature_c2",
                _ => "gmm_prior_vs_quadrature_c3",
            };
            rows.push(VerifyRow::exact("gaussian", identity, i, s, closed, quad, 1e-6));
        }
    }
    Ok(rows)
}

/// `(X⁻¹ + Y⁻¹)⁻¹ = X (X + Y)⁻¹ Y` for SPD pairs; error is the max entry gap.
pub fn inverse_sum_suite(seed: u64, instances: usize) -> Vec<VerifyRow> {
    instance_seeds(seed, 2, instances)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng(s);
            let d = 1 + i % 5;
            let x = random_spd(&mut r, d);
            let y = random_spd(&mut r, d);
            let inv = |m: &DMatrix<f64>| m.clone().try_inverse().expect("invertible");
            let lhs = inv(&(inv(&x) + inv(&y)));
            let rhs = &x * inv(&(&x + &y)) * &y;
            let err = (lhs - rhs).amax();
            VerifyRow::exact("gaussian", "inverse_sum_identity", i, s, err, 0.0, 1e-10)
        })
        .collect()
}

/// `E[(x−a)ᵀA(x−a)]` against Monte Carlo.
pub fn quadratic_form_suite(seed: u64, instances: usize, samples: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for (i, s) in instance_seeds(seed, 3, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 4;
        let raw = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let a_mat = (&raw + raw.transpose()) * 0.5;
        let g = random_full(&mut r, d);
        let shift = DVector::from_vec(random_vec(&mut r, d, -1.0, 1.0));
        let closed = expected_quadratic_form(&a_mat, &g, &shift)?;
        let l = cholesky(g.cov());
        let est = mc_estimate(&mut r, samples, |r| {
            let x = sample_full(r, g.mean(), &l) - &shift;
            x.dot(&(&a_mat * &x))
        });
        rows.push(VerifyRow::mc("gaussian", "quadratic_form_vs_mc", i, s, closed, est));
    }
    Ok(rows)
}

/// Gaussian cross-entropy and entropy against Monte Carlo of `−log b(x)`.
pub fn cross_entropy_suite(seed: u64, instances: usize, samples: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for (i, s) in instance_seeds(seed, 4, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 4;
        let a = random_full(&mut r, d);
        let b = random_full(&mut r, d);
        let l = cholesky(a.cov());
        let b_inv = b.cov().clone().try_inverse().expect("invertible");
        let b_logdet = b.cov().clone().lu().determinant().ln();
        let c = 0.5 * (b_logdet + d as f64 * (2.0 * std::f64::consts::PI).ln());
        let (closed, identity) = if i % 4 == 3 {
            (entropy(&a), "entropy_vs_mc")
        } else {
            (cross_entropy(&a, &b)?, "cross_entropy_vs_mc")
        };
        let est = if i % 4 == 3 {
            mc_estimate(&mut r, samples, |r| {
                -full_logpdf(&sample_full(r, a.mean(), &l), a.mean(), a.cov())
            })
        } else {
            mc_estimate(&mut r, samples, |r| {
                let x = sample_full(r, a.mean(), &l) - b.mean();
                0.5 * x.dot(&(&b_inv * &x)) + c
            })
        };
        rows.push(VerifyRow::mc("gaussian", identity, i, s, closed, est));
    }
    Ok(rows)
}

/// Product of two Gaussian densities: pointwise identity and its normalizer.
pub fn product_suite(seed: u64, instances: usize, samples: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for (i, s) in instance_seeds(seed, 5, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 3;
        let a = random_full(&mut r, d);
        let b = random_full(&mut r, d);
        let (c, log_scale) = gaussian_product(&a, &b)?;
        let worst = (0..50)
            .map(|_| {
                let x = DVector::from_vec(random_vec(&mut r, d, -3.0, 3.0));
                let lhs = full_logpdf(&x, a.mean(), a.cov()) + full_logpdf(&x, b.mean(), b.cov());
                let rhs = full_logpdf(&x, c.mean(), c.cov()) + log_scale;
                (lhs - rhs).abs()
            })
            .fold(0.0, f64::max);
        rows.push(VerifyRow::exact(
            "gaussian",
            "product_pointwise",
            i,
            s,
            worst,
            0.0,
            1e-10,
        ));
        // ∫ a(x) b(x) dx = E_a[b(x)] = exp(log_scale)
        let l = cholesky(a.cov());
        let b_inv = b.cov().clone().try_inverse().expect("invertible");
        let b_norm = -0.5 * (b.cov().clone().lu().determinant().ln() + d as f64 * (2.0 * std::f64::consts::PI).ln());
        let est = mc_estimate(&mut r, samples, |r| {
            let x = sample_full(r, a.mean(), &l) - b.mean();
            (b_norm - 0.5 * x.dot(&(&b_inv * &x))).exp()
        });
        rows.push(VerifyRow::mc(
            "gaussian",
            "product_normalizer_vs_mc",
            i,
            s,
            log_scale.exp(),
            est,
        ));
    }
    Ok(rows)
}

/// Diagonal KL against Monte Carlo of `log q − log p`.
pub fn kl_suite(seed: u64, instances: usize, samples: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for (i, s) in instance_seeds(seed, 6, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 4;
        let q = random_diag(&mut r, d);
        let p = random_diag(&mut r, d);
        let closed = kl_diag(&q, &p)?;
        let mut x = vec![0.0; d];
        let est = mc_estimate(&mut r, samples, |r| {
            sample_diag(r, q.mean(), q.var(), &mut x);
            (0..d)
                .map(|j| {
                    crate::oracle::normal_logpdf(x[j], q.mean()[j], q.var()[j])
                        - crate::oracle::normal_logpdf(x[j], p.mean()[j], p.var()[j])
                })
                .sum::<f64>()
        });
        rows.push(VerifyRow::mc("gaussian", "kl_diag_vs_mc", i, s, closed, est));
    }
    Ok(rows)
}

/// Third bound term against its expanded quadratic-form decomposition.
pub fn term3_suite(seed: u64, instances: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::with_capacity(instances);
    for (i, s) in instance_seeds(seed, 7, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 5;
        let qa = random_diag(&mut r, d);
        let qb = random_diag(&mut r, d);
        let sa = (0..d).map(|_| log_uniform(&mut r, 1e-3, 2.0)).collect();
        let cfg = RavenBoundConfig::new(sa, ReconLikelihood::BernoulliCrossEntropy)?;
        let direct = term3(&qa, &qb, &cfg)?;
        let expanded = term3_decomposed(&qa, &qb, &cfg)?;
        rows.push(VerifyRow::exact(
            "bound",
            "term3_vs_decomposition",
            i,
            s,
            direct,
            expanded,
            1e-10,
        ));
    }
    Ok(rows)
}

/// Exact KL between Gaussians of any dimension, computed by dense algebra.
fn full_kl(mq: &DVector<f64>, cq: &DMatrix<f64>, mp: &DVector<f64>, cp: &DMatrix<f64>) -> f64 {
    let k = mq.len() as f64;
    let inv = cp.clone().try_inverse().expect("invertible");
    let diff = mp - mq;
    let ln_det = |m: &DMatrix<f64>| m.clone().lu().determinant().ln();
    0.5 * ((&inv * cq).trace() + diff.dot(&(&inv * &diff)) - k + ln_det(cp) - ln_det(cq))
}

/// Joint of `(z, z′)` under the unit-Gaussian base: coordinates `j` and
/// `d + j` share variance `1 + s_j` and covariance 1.
fn joint_prior_cov(sa: &[f64]) -> DMatrix<f64> {
    let d = sa.len();
    let mut c = DMatrix::zeros(2 * d, 2 * d);
    for (j, s) in sa.iter().enumerate() {
        c[(j, j)] = 1.0 + s;
        c[(d + j, d + j)] = 1.0 + s;
        c[(j, d + j)] = 1.0;
        c[(d + j, j)] = 1.0;
    }
    c
}

fn stacked(qa: &DiagGaussian, qb: &DiagGaussian) -> (DVector<f64>, DMatrix<f64>) {
    let m = DVector::from_iterator(qa.dim() * 2, qa.mean().iter().chain(qb.mean()).copied());
    let c = DMatrix::from_diagonal(&DVector::from_iterator(
        qa.dim() * 2,
        qa.var().iter().chain(qb.var()).copied(),
    ));
    (m, c)
}

/// The pair KL term against the exact joint-Gaussian KL and against Monte
/// Carlo of `log q − log p` with an independently written joint density.
pub fn pair_kl_suite(seed: u64, instances: usize, samples: usize) -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    for (i, s) in instance_seeds(seed, 8, instances).into_iter().enumerate() {
        let mut r = rng(s);
        let d = 1 + i % 5;
        let qa = random_diag(&mut r, d);
        let qb = random_diag(&mut r, d);
        let sa: Vec<f64> = (0..d).map(|_| r.random_range(0.1..2.0)).collect();
        let cfg = RavenBoundConfig::new(sa.clone(), ReconLikelihood::BernoulliCrossEntropy)?;
        let value = raven_kl_term(&qa, &qb, &cfg)?;
        let (m, c) = stacked(&qa, &qb);
        let exact = -full_kl(&m, &c, &DVector::zeros(2 * d), &joint_prior_cov(&sa));
        rows.push(VerifyRow::exact(
            "bound",
            "pair_kl_vs_joint_gaussian",
            i,
            s,
            value,
            exact,
            1e-10,
        ));

        let base = MixtureBase::standard(d);
        let (mut z, mut z2) = (vec![0.0; d], vec![0.0; d]);
        let est = mc_estimate(&mut r, samples, |r| {
            sample_diag(r, qa.mean(), qa.var(), &mut z);
            sample_diag(r, qb.mean(), qb.var(), &mut z2);
            let lq: f64 = (0..d)
                .map(|j| {
                    crate::oracle::normal_logpdf(z[j], qa.mean()[j], qa.var()[j])
                        + crate::oracle::normal_logpdf(z2[j], qb.mean()[j], qb.var()[j])
                })
                .sum();
            pair_joint_log_density(&z, &z2, &sa, &base) - lq
        });
        rows.push(VerifyRow::mc("bound", "pair_kl_vs_mc", i, s, value, est));
    }
    // d = 1, unit augmentation variance, both posteriors standard.
    let std1 = DiagGaussian::standard(1);
    let cfg = RavenBoundConfig::new(vec![1.0], ReconLikelihood::BernoulliCrossEntropy)?;
    let value = raven_kl_term(&std1, &std1, &cfg)?;
    let exact = -full_kl(
        &DVector::zeros(2),
        &DMatrix::identity(2, 2),
        &DVector::zeros(2),
        &joint_prior_cov(&[1.0]),
    );
    rows.push(VerifyRow::exact(
        "bound",
        "pair_kl_fixed_instance",
        0,
        0,
        value,
        exact,
        1e-10,
    ));
    Ok(rows)
}

/// The augmentation variance that makes the pair KL term, with the second
/// posterior pinned to the base, differ from `−KL(q‖N(0, I))` by a constant.
pub fn remark_sigma() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

/// Spread of `raven_kl_term + KL(q‖N(0,I))` over random posteriors when the
/// second posterior is standard normal.
pub fn consistency_spread(seed: u64, instances: usize, d: usize) -> Result<f64> {
    let cfg = RavenBoundConfig::new(vec![remark_sigma(); d], ReconLikelihood::BernoulliCrossEntropy)?;
    let mut r = rng(seed);
    r.set_stream(9);
    let std = DiagGaussian::standard(d);
    let values = (0..instances)
        .map(|_| {
            let q = random_diag(&mut r, d);
            Ok(raven_kl_term(&q, &std, &cfg)? + kl_diag(&q, &std)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyPlan {
    pub quadrature_instances: usize,
    pub gmm_instances_per_c: usize,
    pub term3_instances: usize,
    pub mc_instances: usize,
    pub mc_samples: usize,
}

impl Default for VerifyPlan {
    fn default() -> Self {
        Self {
            quadrature_instances: 100,
            gmm_instances_per_c: 100,
            term3_instances: 1000,
            mc_instances: 20,
            mc_samples: MC_SAMPLES,
        }
    }
}

/// Runs every suite.
pub fn run_all(seed: u64, plan: &VerifyPlan) -> Result<Vec<VerifyRow>> {
    let mut rows = prior_quadrature_suite(seed, plan.quadrature_instances)?;
    rows.extend(gmm_prior_quadrature_suite(seed, plan.gmm_instances_per_c)?);
    rows.extend(inverse_sum_suite(seed, plan.quadrature_instances));
    rows.extend(quadratic_form_suite(seed, plan.mc_instances, plan.mc_samples)?);
    rows.extend(cross_entropy_suite(seed, plan.mc_instances, plan.mc_samples)?);
    rows.extend(product_suite(seed, plan.mc_instances, plan.mc_samples)?);
    rows.extend(kl_suite(seed, plan.mc_instances, plan.mc_samples)?);
    rows.extend(term3_suite(seed, plan.term3_instances)?);
    rows.extend(pair_kl_suite(seed, plan.mc_instances, plan.mc_samples)?);
    let spread = consistency_spread(seed, 100, 3)?;
    rows.push(VerifyRow::exact(
        "bound",
        "single_bound_consistency_variance",
        0,
        seed,
        spread,
        0.0,
        1e-10,
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyPlan {
        VerifyPlan {
            quadrature_instances: 6,
            gmm_instances_per_c: 2,
            term3_instances: 50,
            mc_instances: 4,
            mc_samples: 20_000,
        }
    }

    #[test]
    fn small_plan_passes() {
        let rows = run_all(3, &small()).unwrap();
        let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn rows_are_reproducible_from_their_seed() {
        let a = prior_quadrature_suite(11, 4).unwrap();
        let b = prior_quadrature_suite(11, 4).unwrap();
        assert_eq!(a, b);
        let seeds: std::collections::HashSet<u64> = a.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn joint_kl_oracle_hand_value() {
        // KL(N(0,I₂) ‖ N(0, [[2,1],[1,2]])) = ½(4/3 − 2 + log 3)
        let kl = full_kl(
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            &joint_prior_cov(&[1.0]),
        );
        assert!((kl - 0.5 * (4.0 / 3.0 - 2.0 + 3f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn csv_rows_have_header_width() {
        let rows = inverse_sum_suite(1, 3);
        let mut out = Vec::new();
        write_csv(&mut out, "m", &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        let width = CSV_HEADER.split(',').count();
        assert!(text.lines().skip(2).all(|l| l.split(',').count() == width));
    }
}
