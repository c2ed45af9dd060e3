//! Browser demo bindings.
//!
//! Three views, each backed by the core library: the one-dimensional paired
//! prior density, the pair KL term as two posteriors drift apart, and the
//! path a PGD attack takes on a tiny two-pixel encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raven_core::bound::{raven_kl_term, RavenBoundConfig};
use raven_core::gaussian::{paired_prior_log_density, DiagGaussian};
use raven_core::model::{Architecture, ReconLikelihood, VaeModel};
use raven_core::robustness::{pgd_attack, AttackConfig, AttackObjective};
use raven_core::Tensor;
use wasm_bindgen::prelude::*;

fn js_err(e: raven_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `n × n` grid of `log p(z, z′)` for scalar latents, with both
/// axes spanning `[-extent, extent]`. Row index is `z′`, column index is `z`.
#[wasm_bindgen]
pub fn prior_grid(sigma: f64, n: usize, extent: f64) -> Result<Vec<f64>, JsError> {
    if n < 2 {
        return Err(JsError::new("grid needs at least 2 points per axis"));
    }
    let at = |i: usize| -extent + 2.0 * extent * i as f64 / (n - 1) as f64;
    let var = [sigma * sigma];
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(paired_prior_log_density(&[at(c)], &[at(r)], &var).map_err(js_err)?);
        }
    }
    Ok(out)
}

/// Pair KL term for `q = N(s/2, v)` and `q′ = N(−s/2, v)` at `n` evenly
/// spaced separations `s ∈ [0, max_sep]`. Returns `[s₀, t₀, s₁, t₁, …]`.
#[wasm_bindgen]
pub fn bound_curve(sigma: f64, posterior_std: f64, max_sep: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let cfg = RavenBoundConfig::isotropic(1, sigma, ReconLikelihood::default()).map_err(js_err)?;
    let var = posterior_std * posterior_std;
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let s = if n > 1 {
            max_sep * i as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let q = DiagGaussian::new(vec![s / 2.0], vec![var]).map_err(js_err)?;
        let q2 = DiagGaussian::new(vec![-s / 2.0], vec![var]).map_err(js_err)?;
        out.push(s);
        out.push(raven_kl_term(&q, &q2, &cfg).map_err(js_err)?);
    }
    Ok(out)
}

/// A randomly initialised 2 → 16 → 2 encoder, fixed by `model_seed`.
fn toy_model(model_seed: u64) -> Result<VaeModel, raven_core::Error> {
    let arch = Architecture {
        input_dim: 2,
        hidden: vec![16],
        latent_dim: 2,
        gmm_components: None,
    };
    VaeModel::new(arch, &mut ChaCha8Rng::seed_from_u64(model_seed))
}

/// Best perturbation after each of `1..=iterations` PGD steps against the
/// toy encoder at input `(x0, x1)`. The attack is deterministic for a fixed
/// seed, so running it with growing iteration counts traces one path.
/// Returns `[ε₀, ε₁, objective]` triples.
#[wasm_bindgen]
pub fn pgd_path(
    x0: f64,
    x1: f64,
    delta: f64,
    objective: &str,
    iterations: usize,
    model_seed: u64,
) -> Result<Vec<f64>, JsError> {
    let objective: AttackObjective = objective.parse().map_err(js_err)?;
    let model = toy_model(model_seed).map_err(js_err)?;
    let x = Tensor::matrix(1, 2, vec![x0, x1]).map_err(js_err)?;
    let mut out = Vec::with_capacity(3 * iterations);
    for k in 1..=iterations {
        let mut cfg = AttackConfig::new(delta, objective, 0);
        cfg.iterations = k;
        let res = pgd_attack(&model, &x, &cfg).map_err(js_err)?;
        out.extend_from_slice(res.eps.row(0));
        out.push(res.objective[0]);
    }
    Ok(out)
}
