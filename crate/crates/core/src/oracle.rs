//! Numerical oracles used to check the closed forms: adaptive Gauss–Legendre
//! quadrature, seeded Monte Carlo estimators, and densities written out
//! directly from the generative model rather than from the closed forms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Seeded generator used by every Monte Carlo check.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // three-term recurrence for P_n and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

const GL_POINTS: usize = 16;
const MAX_DEPTH: usize = 30;

/// Adaptive Gauss–Legendre integration of a log-integrand over `[a, b]`,
/// returning the log of the integral. `panel` sets the initial panel width;
/// each panel is bisected until the 16-point rule and its two halves agree
/// to `rel_tol` of the running total.
pub fn log_integrate<F: Fn(f64) -> f64>(log_f: F, a: f64, b: f64, panel: f64, rel_tol: f64) -> f64 {
    assert!(b > a && panel > 0.0);
    let (nodes, weights) = gauss_legendre(GL_POINTS);
    let panels = ((b - a) / panel).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;

    // Scale by the largest sampled log value so the integrand stays near 1.
    let mut shift = f64::NEG_INFINITY;
    for p in 0..panels {
        let (lo, hi) = (a + p as f64 * h, a + (p + 1) as f64 * h);
        for &t in &nodes {
            shift = shift.max(log_f(0.5 * (lo + hi) + 0.5 * (hi - lo) * t));
        }
    }
    if shift == f64::NEG_INFINITY {
        return shift;
    }
    let f = |x: f64| (log_f(x) - shift).exp();
    let rule = |lo: f64, hi: f64| -> f64 {
        let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        r * nodes.iter().zip(&weights).map(|(&t, &w)| w * f(c + r * t)).sum::<f64>()
    };
    let coarse: f64 = (0..panels)
        .map(|p| rule(a + p as f64 * h, a + (p + 1) as f64 * h))
        .sum();
    let abs_tol = rel_tol * coarse.abs().max(f64::MIN_POSITIVE) / panels as f64;

    fn refine(rule: &dyn Fn(f64, f64) -> f64, lo: f64, hi: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let mid = 0.5 * (lo + hi);
        let (l, r) = (rule(lo, mid), rule(mid, hi));
        if (l + r - whole).abs() <= tol || depth >= MAX_DEPTH {
            l + r
        } else {
            refine(rule, lo, mid, l, 0.5 * tol, depth + 1) + refine(rule, mid, hi, r, 0.5 * tol, depth + 1)
        }
    }

    let total: f64 = (0..panels)
        .map(|p| {
            let (lo, hi) = (a + p as f64 * h, a + (p + 1) as f64 * h);
            refine(&rule, lo, hi, rule(lo, hi), abs_tol, 0)
        })
        .sum();
    shift + total.ln()
}

/// Log-density of a univariate normal, written independently of the
/// library's Gaussian types.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + (2.0 * PI * var).ln())
}

/// Base latent density for the quadrature oracle: a diagonal Gaussian
/// mixture (a single standard component gives the unit-Gaussian base).
#[derive(Clone, Debug)]
pub struct MixtureBase {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl MixtureBase {
    pub fn standard(d: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![vec![0.0; d]],
            vars: vec![vec![1.0; d]],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(w, (m, v))| {
                w.ln()
                    + x.iter()
                        .zip(m.iter().zip(v))
                        .map(|(&xi, (&mi, &vi))| normal_logpdf(xi, mi, vi))
                        .sum::<f64>()
            })
            .collect();
        let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }
}

/// `log ∫ a(z|z̃) a(z′|z̃) p(z̃) dz̃` by nested quadrature, for d ∈ {1, 2},
/// with `a(·|z̃) = N(z̃, diag(sigma_aug))`.
pub fn paired_prior_quadrature(z: &[f64], z2: &[f64], sigma_aug: &[f64], base: &MixtureBase) -> Result<f64> {
    let d = z.len();
    if z2.len() != d || sigma_aug.len() != d || base.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: z2.len().min(sigma_aug.len()).min(base.dim()),
        });
    }
    // a(z|t)·a(z′|t) ∝ N(t; (z+z′)/2, s/2), so the mass sits within a few
    // √s of the midpoint whatever the base density does.
    let window = |i: usize| {
        let s = sigma_aug[i].sqrt();
        let mid = 0.5 * (z[i] + z2[i]);
        (mid - 12.0 * s, mid + 12.0 * s, 2.0 * s)
    };
    let kernel = |i: usize, t: f64| normal_logpdf(z[i], t, sigma_aug[i]) + normal_logpdf(z2[i], t, sigma_aug[i]);
    const TOL: f64 = 1e-12;
    match d {
        1 => {
            let (a, b, h) = window(0);
            Ok(log_integrate(|t| kernel(0, t) + base.log_pdf(&[t]), a, b, h, TOL))
        }
        2 => {
            let (a0, b0, h0) = window(0);
            let (a1, b1, h1) = window(1);
            let outer = |t0: f64| {
                let inner = log_integrate(|t1| kernel(1, t1) + base.log_pdf(&[t0, t1]), a1, b1, h1, TOL);
                kernel(0, t0) + inner
            };
            Ok(log_integrate(outer, a0, b0, h0, TOL))
        }
        _ => Err(Error::InvalidParameter("quadrature oracle supports d = 1 or 2".into())),
    }
}

/// Joint log-density of `(z, z′)` under `z̃ ~ base`, `z = z̃ + a`, `z′ = z̃ + a′`
/// with `a, a′ ~ N(0, diag(sigma_aug))`. Each mixture component gives, per
/// dimension, a bivariate normal with covariance `[[v+s, v], [v, v+s]]`.
pub fn pair_joint_log_density(z: &[f64], z2: &[f64], sigma_aug: &[f64], base: &MixtureBase) -> f64 {
    let terms: Vec<f64> = base
        .weights
        .iter()
        .zip(base.means.iter().zip(&base.vars))
        .map(|(w, (m, v))| {
            let mut lp = w.ln();
            for i in 0..z.len() {
                let (a, b) = (z[i] - m[i], z2[i] - m[i]);
                let (c11, c12) = (v[i] + sigma_aug[i], v[i]);
                let det = c11 * c11 - c12 * c12;
                let quad = (c11 * a * a - 2.0 * c12 * a * b + c11 * b * b) / det;
                lp += -0.5 * quad - (2.0 * PI).ln() - 0.5 * det.ln();
            }
            lp
        })
        .collect();
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn agrees(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.std_err
    }

    /// Distance to `value` measured in standard errors.
    pub fn z_score(&self, value: f64) -> f64 {
        (value - self.mean).abs() / self.std_err.max(f64::MIN_POSITIVE)
    }
}

/// Monte Carlo mean of `f` over `n` draws, using Welford's update.
pub fn mc_estimate<R: Rng, F: FnMut(&mut R) -> f64>(rng: &mut R, n: usize, mut f: F) -> McEstimate {
    assert!(n >= 2);
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=n {
        let x = f(rng);
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n - 1) as f64;
    McEstimate {
        mean,
        std_err: (var / n as f64).sqrt(),
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws from `N(mean, diag(var))` into `out`.
pub fn sample_diag<R: Rng>(rng: &mut R, mean: &[f64], var: &[f64], out: &mut [f64]) {
    for ((o, m), v) in out.iter_mut().zip(mean).zip(var) {
        *o = m + v.sqrt() * standard_normal(rng);
    }
}

/// Draws from `N(mean, L Lᵀ)` given the lower Cholesky factor `l`.
pub fn sample_full<R: Rng>(rng: &mut R, mean: &DVector<f64>, l: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_fn(mean.len(), |_, _| standard_normal(rng));
    mean + l * e
}

/// Log-density of `N(mean, cov)` via an LU-based inverse and determinant.
pub fn full_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let lu = cov.clone().lu();
    let det = lu.determinant();
    let inv = lu.try_inverse().expect("non-singular covariance");
    let diff = x - mean;
    -0.5 * (diff.dot(&(inv * &diff)) + det.ln() + x.len() as f64 * (2.0 * PI).ln())
}

/// Random symmetric positive-definite matrix with a dominant diagonal.
pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
    m = &m * m.transpose();
    for i in 0..d {
        m[(i, i)] += 0.5 + rng.random_range(0.0..1.0) + d as f64 * 0.25;
    }
    (&m + m.transpose()) * 0.5
}
