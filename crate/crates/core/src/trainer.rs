//! Augmentation pairing, the RAdam optimizer and the training loop for the
//! four regimes: single-input VAE, noise-augmented VAE, and the pair bound
//! with a unit-Gaussian or mixture latent base.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bound::{gmm_raven_objective, raven_objective, vanilla_objective, RavenBoundConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Architecture, VaeModel};
use crate::oracle::standard_normal;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Vanilla,
    NoiseVae,
    Raven,
    RavenGmm,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Vanilla, Regime::NoiseVae, Regime::Raven, Regime::RavenGmm];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Vanilla => "vanilla",
            Regime::NoiseVae => "noise_vae",
            Regime::Raven => "raven",
            Regime::RavenGmm => "raven_gmm",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown regime {s:?}")))
    }
}

/// How augmented pairs are formed. Only `(x̃, x̃ + ε)` is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    #[default]
    OriginalPlusNoisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Standard deviation of the additive pixel noise.
    pub noise_std: f64,
    pub pairing: Pairing,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            pairing: Pairing::OriginalPlusNoisy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub bound: RavenBoundConfig,
    pub augmentation: AugmentationSpec,
    /// Global gradient-norm ceiling; a divergence guard, not a tuning knob.
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if !(self.augmentation.noise_std >= 0.0 && self.augmentation.noise_std.is_finite()) {
            return Err(Error::InvalidParameter("noise std must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParameter("clip norm must be positive".into()));
        }
        if self.bound.latent_dim() != self.architecture.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.architecture.latent_dim,
                got: self.bound.latent_dim(),
            });
        }
        match (self.regime, self.architecture.gmm_components) {
            (Regime::RavenGmm, None) => Err(Error::InvalidParameter(
                "raven_gmm needs a mixture prior (set the number of components)".into(),
            )),
            (Regime::RavenGmm, Some(_)) if self.bound.gmm_samples == 0 => Err(Error::InvalidParameter(
                "mixture bound needs at least one sample".into(),
            )),
            (r, Some(_)) if r != Regime::RavenGmm => Err(Error::InvalidParameter(format!(
                "regime {r} does not use a mixture prior"
            ))),
            _ => Ok(()),
        }
    }
}

/// Adds `N(0, noise_std²)` to every pixel of `x`, returning `(x, x + ε)`.
pub fn make_pair<R: Rng>(x: &Tensor, spec: &AugmentationSpec, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if !(spec.noise_std >= 0.0) {
        return Err(Error::InvalidParameter("noise std must be non-negative".into()));
    }
    let noisy = x
        .data()
        .iter()
        .map(|&v| v + spec.noise_std * standard_normal(rng))
        .collect();
    Ok((x.clone(), Tensor::new(x.shape().to_vec(), noisy)?))
}

/// Rectified Adam.
#[derive(Clone, Debug)]
pub struct RAdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RAdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Length of the approximated simple moving average at step `t`;
    /// the adaptive update is used only when it exceeds 4.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if !(lr >= 0.0) {
            return Err(Error::InvalidParameter("learning rate must be non-negative".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "radam gradient" });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "radam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let t = self.t;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let rho_t = self.rho(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rect = (rho_t > 4.0)
            .then(|| ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt());

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let update = match rect {
                    Some(r) => r * m_hat / ((*vi / bc2).sqrt() + self.eps),
                    None => m_hat,
                };
                pd[i] -= lr * update;
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` to global norm `max_norm` when above it; returns the
/// norm before clipping if clipping happened.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Option<f64> {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return None;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Some(norm)
}

/// One optimizer step's worth of logged values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub regime: Regime,
    pub loss: f64,
    pub recon_x: f64,
    pub recon_x2: Option<f64>,
    pub kl_term: f64,
    pub term3: Option<f64>,
    /// Batch mean of `‖μ_x − μ_x′‖²` for pair regimes.
    pub pair_gap: Option<f64>,
    /// Gradient norm before clipping, when clipping was applied.
    pub clipped_norm: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,epoch,regime,loss,recon_x,recon_x2,kl_term,term3,pair_gap,clipped_norm";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.17e},{:.17e},{},{:.17e},{},{},{}",
            self.step,
            self.epoch,
            self.regime,
            self.loss,
            self.recon_x,
            opt(self.recon_x2),
            self.kl_term,
            opt(self.term3),
            opt(self.pair_gap),
            opt(self.clipped_norm)
        )
    }
}

/// Writes the metrics log as CSV; `manifest` is recorded in a leading comment.
pub fn write_metrics_csv<W: Write>(mut w: W, manifest: &str, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "# manifest {manifest}")?;
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss or gradient stopped training at `step`; the model
    /// holds the last finite parameters.
    Diverged {
        step: usize,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub metrics: Vec<MetricsRow>,
    pub status: TrainStatus,
    /// Wall-clock seconds per completed epoch.
    pub epoch_seconds: Vec<f64>,
}

/// Independent generator streams derived from the run seed.
struct Streams {
    init: ChaCha8Rng,
    shuffle: ChaCha8Rng,
    augment: ChaCha8Rng,
    latent: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(1),
            shuffle: stream(2),
            augment: stream(3),
            latent: stream(4),
        }
    }
}

fn normal_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

fn pair_gap(mu: &Tensor, mu2: &Tensor) -> f64 {
    let sq: f64 = mu.data().iter().zip(mu2.data()).map(|(a, b)| (a - b).powi(2)).sum();
    sq / mu.rows() as f64
}

/// Trains from a fresh initialization. `on_epoch` runs after every completed
/// epoch with the current model (e.g. to write a checkpoint).
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(usize, &VaeModel) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.dim() != config.architecture.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.architecture.input_dim,
            got: data.dim(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut streams = Streams::new(config.seed);
    let mut model = VaeModel::new(config.architecture.clone(), &mut streams.init)?;
    let mut opt = RAdamState::new(model.params());
    let mut metrics = Vec::new();
    let mut epoch_seconds = Vec::new();
    let d = config.architecture.latent_dim;
    let n = data.len();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        // Entries `i >= n` are noisy copies of row `i − n` (noise-augmented regime only).
        let copies = if config.regime == Regime::NoiseVae { 2 } else { 1 };
        let mut order: Vec<usize> = (0..copies * n).collect();
        order.shuffle(&mut streams.shuffle);

        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<usize> = chunk.iter().map(|&i| i % n).collect();
            let mut x = data.images.select_rows(&rows);
            let b = rows.len();

            let mut g = Graph::new();
            let mv = model.bind(&mut g, true);
            let result = (|| -> Result<(crate::tensor::Var, MetricsRow)> {
                match config.regime {
                    Regime::Vanilla | Regime::NoiseVae => {
                        if config.regime == Regime::NoiseVae {
                            let width = x.row_len();
                            for (k, &i) in chunk.iter().enumerate() {
                                if i >= n {
                                    for v in &mut x.data_mut()[k * width..(k + 1) * width] {
                                        *v += config.augmentation.noise_std * standard_normal(&mut streams.augment);
                                    }
                                }
                            }
                        }
                        let eps = normal_tensor(&mut streams.latent, b, d);
                        let xv = g.constant(x.clone());
                        let terms = vanilla_objective(&mut g, &mv, xv, &eps, config.bound.recon)?;
                        let loss = g.neg(terms.total)?;
                        let row = MetricsRow {
                            step,
                            epoch,
                            regime: config.regime,
                            loss: g.value(loss).item(),
                            recon_x: g.value(terms.recon).item(),
                            recon_x2: None,
                            kl_term: g.value(terms.kl_term).item(),
                            term3: None,
                            pair_gap: None,
                            clipped_norm: None,
                        };
                        Ok((loss, row))
                    }
                    Regime::Raven | Regime::RavenGmm => {
                        let (x1, x2) = make_pair(&x, &config.augmentation, &mut streams.augment)?;
                        let xv = g.constant(x1);
                        let xv2 = g.constant(x2);
                        let terms = if config.regime == Regime::Raven {
                            let eps = normal_tensor(&mut streams.latent, b, d);
                            let eps2 = normal_tensor(&mut streams.latent, b, d);
                            raven_objective(&mut g, &mv, xv, xv2, &eps, &eps2, &config.bound)?
                        } else {
                            let noise: Vec<(Tensor, Tensor)> = (0..config.bound.gmm_samples)
                                .map(|_| {
                                    (
                                        normal_tensor(&mut streams.latent, b, d),
                                        normal_tensor(&mut streams.latent, b, d),
                                    )
                                })
                                .collect();
                            gmm_raven_objective(&mut g, &mv, xv, xv2, &noise, &config.bound)?
                        };
                        let loss = g.neg(terms.total)?;
                        let bd = terms.breakdown(&g);
                        let row = MetricsRow {
                            step,
                            epoch,
                            regime: config.regime,
                            loss: g.value(loss).item(),
                            recon_x: bd.recon_x,
                            recon_x2: Some(bd.recon_x2),
                            kl_term: bd.kl_term,
                            term3: Some(bd.term3),
                            pair_gap: Some(pair_gap(g.value(terms.mu), g.value(terms.mu2))),
                            clipped_norm: None,
                        };
                        Ok((loss, row))
                    }
                }
            })();

            let (loss, mut row) = match result {
                Ok(v) => v,
                Err(e @ (Error::NonFinite { .. } | Error::NonPositive { .. } | Error::DivisionByZero { .. })) => {
                    return Ok(diverged(model, metrics, epoch_seconds, step, e));
                }
                Err(e) => return Err(e),
            };
            let mut grads_map = g.backward(loss)?;
            let mut grads: Vec<Tensor> = mv.vars().iter().map(|&v| grads_map.take(v, &g)).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                let e = Error::NonFinite { op: "gradient" };
                return Ok(diverged(model, metrics, epoch_seconds, step, e));
            }
            row.clipped_norm = clip_global_norm(&mut grads, config.clip_norm);
            if let Some(norm) = row.clipped_norm {
                log::info!("step {step}: gradient norm {norm:.3e} clipped to {}", config.clip_norm);
            }
            opt.step(model.params_mut(), &grads, config.learning_rate)?;
            metrics.push(row);
            step += 1;
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
        on_epoch(epoch, &model)?;
    }

    Ok(TrainOutcome {
        model,
        metrics,
        status: TrainStatus::Completed,
        epoch_seconds,
    })
}

fn diverged(model: VaeModel, metrics: Vec<MetricsRow>, epoch_seconds: Vec<f64>, step: usize, e: Error) -> TrainOutcome {
    log::warn!("training diverged at step {step}: {e}");
    TrainOutcome {
        model,
        metrics,
        status: TrainStatus::Diverged {
            step,
            reason: e.to_string(),
        },
        epoch_seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_blobs;
    use crate::model::ReconLikelihood;
    use crate::oracle::{mc_estimate, rng};
    use approx::assert_abs_diff_eq;

    fn toy_config(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            architecture: Architecture {
                input_dim: 8,
                hidden: vec![16],
                latent_dim: 2,
                gmm_components: (regime == Regime::RavenGmm).then_some(3),
            },
            epochs: 5,
            batch_size: 20,
            learning_rate: 0.01,
            seed: 5,
            bound: RavenBoundConfig::isotropic(2, 0.1, ReconLikelihood::BernoulliCrossEntropy).unwrap(),
            augmentation: AugmentationSpec::default(),
            clip_norm: 100.0,
        }
    }

    #[test]
    fn zero_noise_pair_is_exact_copy() {
        let x = synth_blobs(2, 5, 8, 1.0, 1).images;
        let spec = AugmentationSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let (a, b) = make_pair(&x, &spec, &mut rng(1)).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn pair_noise_moments() {
        let x = Tensor::full(&[100, 1000], 0.5);
        let (a, b) = make_pair(&x, &AugmentationSpec::default(), &mut rng(2)).unwrap();
        let diffs: Vec<f64> = b.data().iter().zip(a.data()).map(|(p, q)| p - q).collect();
        let mut it = diffs.iter();
        let mean = mc_estimate(&mut rng(0), diffs.len(), |_| *it.next().unwrap());
        assert!(mean.agrees(0.0, 3.0), "{mean:?}");
        // variance of squared noise is 2σ⁴, so the std-error of the variance is σ²·√(2/n)
        let var: f64 = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let se = 0.05f64.powi(2) * (2.0 / diffs.len() as f64).sqrt();
        assert!((var - 0.0025).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn pair_stream_is_reproducible() {
        let x = synth_blobs(2, 5, 8, 1.0, 1).images;
        let spec = AugmentationSpec::default();
        assert_eq!(
            make_pair(&x, &spec, &mut rng(9)).unwrap(),
            make_pair(&x, &spec, &mut rng(9)).unwrap()
        );
    }

    #[test]
    fn radam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let before = p.clone();
        let mut s = RAdamState::new(&p);
        for _ in 0..20 {
            s.step(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn radam_first_step_is_momentum_only() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut s = RAdamState::new(&p);
        assert_abs_diff_eq!(s.rho(1), 1.0, epsilon = 1e-9);
        s.step(&mut p, &[Tensor::vector(vec![0.3])], 0.1).unwrap();
        // m̂ after one step equals the gradient itself
        assert_abs_diff_eq!(p[0].item(), 1.0 - 0.1 * 0.3, epsilon = 1e-15);
    }

    #[test]
    fn radam_bias_corrected_moment_tracks_constant_gradient() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut s = RAdamState::new(&p);
        for _ in 0..200 {
            s.step(&mut p, &[Tensor::vector(vec![0.7])], 1e-3).unwrap();
        }
        let m_hat = s.m[0].item() / (1.0 - s.beta1.powi(200));
        assert_abs_diff_eq!(m_hat, 0.7, epsilon = 1e-12);
        assert!(s.rho(200) > 4.0);
    }

    #[test]
    fn radam_zero_lr_is_bit_identical() {
        let mut p = vec![Tensor::vector(vec![0.1, 3.0, -7.5])];
        let before = p.clone();
        let mut s = RAdamState::new(&p);
        s.step(&mut p, &[Tensor::vector(vec![1.0, -1.0, 2.0])], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn radam_rejects_non_finite_gradient() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut s = RAdamState::new(&p);
        assert!(s.step(&mut p, &[Tensor::vector(vec![f64::NAN])], 0.1).is_err());
    }

    #[test]
    fn clipping_rescales_to_ceiling() {
        let mut g = vec![Tensor::vector(vec![30.0, 40.0])];
        assert_eq!(clip_global_norm(&mut g, 100.0), None);
        assert_eq!(clip_global_norm(&mut g, 5.0), Some(50.0));
        assert_abs_diff_eq!(global_norm(&g), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_combinations_rejected() {
        let mut c = toy_config(Regime::RavenGmm);
        c.architecture.gmm_components = None;
        assert!(c.validate().is_err());
        let mut c = toy_config(Regime::Raven);
        c.architecture.gmm_components = Some(2);
        assert!(c.validate().is_err());
        let mut c = toy_config(Regime::Vanilla);
        c.epochs = 0;
        assert!(c.validate().is_err());
        assert!("ravenn".parse::<Regime>().is_err());
        assert_eq!("noise_vae".parse::<Regime>().unwrap(), Regime::NoiseVae);
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let data = synth_blobs(3, 20, 8, 2.0, 4);
        let c = toy_config(Regime::Raven);
        let a = train(&c, &data, |_, _| Ok(())).unwrap();
        let b = train(&c, &data, |_, _| Ok(())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn raven_bound_improves_on_blobs() {
        let data = synth_blobs(3, 40, 8, 2.0, 6);
        let mut c = toy_config(Regime::Raven);
        c.epochs = 34; // 6 steps per epoch, ~200 steps
        let out = train(&c, &data, |_, _| Ok(())).unwrap();
        assert_eq!(out.status, TrainStatus::Completed);
        let totals: Vec<f64> = out.metrics.iter().map(|r| -r.loss).collect();
        assert!(totals.len() >= 200);
        let first = totals[..10].iter().sum::<f64>() / 10.0;
        let last = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last > first, "{first} -> {last}");
    }

    #[test]
    fn every_regime_stays_finite() {
        let data = synth_blobs(3, 20, 8, 2.0, 7);
        for regime in Regime::ALL {
            let out = train(&toy_config(regime), &data, |_, _| Ok(())).unwrap();
            assert_eq!(out.status, TrainStatus::Completed, "{regime}");
            assert!(out.metrics.iter().all(|r| r.loss.is_finite()), "{regime}");
            assert!(out.model.is_finite());
        }
    }

    #[test]
    fn noise_regime_doubles_the_epoch() {
        let data = synth_blobs(2, 20, 8, 2.0, 8);
        let mut c = toy_config(Regime::NoiseVae);
        c.epochs = 1;
        let noisy = train(&c, &data, |_, _| Ok(())).unwrap();
        c.regime = Regime::Vanilla;
        let plain = train(&c, &data, |_, _| Ok(())).unwrap();
        assert_eq!(noisy.metrics.len(), 2 * plain.metrics.len());
    }

    #[test]
    fn metrics_csv_has_manifest_and_header() {
        let row = MetricsRow {
            step: 0,
            epoch: 0,
            regime: Regime::Vanilla,
            loss: 1.5,
            recon_x: -1.0,
            recon_x2: None,
            kl_term: -0.5,
            term3: None,
            pair_gap: None,
            clipped_norm: None,
        };
        let mut out = Vec::new();
        write_metrics_csv(&mut out, "abc", &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# manifest abc");
        assert_eq!(lines[1], METRICS_HEADER);
        assert_eq!(lines[2].split(',').count(), METRICS_HEADER.split(',').count());
    }
}
