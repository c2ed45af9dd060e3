//! Latent-space PGD attacks, linear-probe evaluation of encoder means, and
//! the robustness metrics (adversarial accuracy, reconstruction MSE,
//! latent-pair distance).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::oracle::standard_normal;
use crate::tensor::{Graph, Tensor, Var};

/// Rows attacked together in one graph.
const ATTACK_CHUNK: usize = 32;
/// Rows encoded together when no gradients are needed.
const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// `KL(q(·|x) ‖ q(·|x+ε))`.
    Kl,
    /// Squared 2-Wasserstein distance between the two posteriors.
    W2,
}

impl AttackObjective {
    pub const ALL: [AttackObjective; 2] = [AttackObjective::Kl, AttackObjective::W2];

    pub fn name(self) -> &'static str {
        match self {
            AttackObjective::Kl => "kl",
            AttackObjective::W2 => "w2",
        }
    }
}

impl fmt::Display for AttackObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(AttackObjective::Kl),
            "w2" => Ok(AttackObjective::W2),
            _ => Err(Error::InvalidParameter(format!("unknown attack objective {s:?}"))),
        }
    }
}

/// Where PGD starts inside the budget ball.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdStart {
    /// `ε = 0`. Both objectives are stationary there, so the first sign step
    /// follows round-off in the gradient.
    Zero,
    /// Uniform in `[-step, step]` per pixel.
    #[default]
    Jitter,
    /// Uniform over the whole budget box.
    Uniform,
}

impl FromStr for PgdStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PgdStart::Zero),
            "jitter" => Ok(PgdStart::Jitter),
            "uniform" => Ok(PgdStart::Uniform),
            _ => Err(Error::InvalidParameter(format!("unknown PGD start {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ budget δ.
    pub budget: f64,
    pub iterations: usize,
    pub step: f64,
    pub objective: AttackObjective,
    pub start: PgdStart,
    pub seed: u64,
}

impl AttackConfig {
    /// 50 iterations with step δ/25.
    pub fn new(budget: f64, objective: AttackObjective, seed: u64) -> Self {
        Self {
            budget,
            iterations: 50,
            step: budget / 25.0,
            objective,
            start: PgdStart::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "attack budget {} must be ≥ 0",
                self.budget
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("attack needs at least one iteration".into()));
        }
        if self.budget > 0.0 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter("attack step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Best perturbation per row, `[B, D]`.
    pub eps: Tensor,
    /// Objective at the returned perturbation.
    pub objective: Vec<f64>,
    /// Objective at the starting point.
    pub start_objective: Vec<f64>,
    /// Rows whose objective became non-finite; their perturbation is the best
    /// finite iterate seen before the failure.
    pub failed: Vec<bool>,
}

impl AttackResult {
    pub fn failures(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count()
    }

    /// Fraction of non-failed rows where the attack raised the objective
    /// above its starting value.
    pub fn improved_fraction(&self) -> f64 {
        let ok: Vec<usize> = (0..self.failed.len()).filter(|&i| !self.failed[i]).collect();
        if ok.is_empty() {
            return 0.0;
        }
        ok.iter()
            .filter(|&&i| self.objective[i] > self.start_objective[i])
            .count() as f64
            / ok.len() as f64
    }
}

/// Per-row divergence between a fixed clean posterior and the attacked one.
fn objective_rows(g: &mut Graph, objective: AttackObjective, clean: (Var, Var), adv: (Var, Var)) -> Result<Var> {
    let (mu0, lv0) = clean;
    let (mu, lv) = adv;
    let diff = g.sub(mu0, mu)?;
    let diff2 = g.square(diff)?;
    let per_dim = match objective {
        AttackObjective::Kl => {
            // ½[lv − lv0 + (e^{lv0} + (μ0 − μ)²) e^{−lv} − 1]
            let v0 = g.exp(lv0)?;
            let num = g.add(v0, diff2)?;
            let neg_lv = g.neg(lv)?;
            let inv_v = g.exp(neg_lv)?;
            let ratio = g.mul(num, inv_v)?;
            let dlv = g.sub(lv, lv0)?;
            let s = g.add(dlv, ratio)?;
            let s = g.add_scalar(s, -1.0)?;
            g.scale(s, 0.5)?
        }
        AttackObjective::W2 => {
            let h0 = g.scale(lv0, 0.5)?;
            let s0 = g.exp(h0)?;
            let h = g.scale(lv, 0.5)?;
            let s = g.exp(h)?;
            let ds = g.sub(s0, s)?;
            let ds2 = g.square(ds)?;
            g.add(diff2, ds2)?
        }
    };
    g.sum_rows(per_dim)
}

/// Objective value per row of `x + eps`, plus its gradient w.r.t. `eps`.
fn objective_and_grad(
    model: &VaeModel,
    objective: AttackObjective,
    x: &Tensor,
    clean: &(Tensor, Tensor),
    eps: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let ev = g.param(eps.clone());
    let xa = g.add(xv, ev)?;
    let adv = mv.encode(&mut g, xa)?;
    let mu0 = g.constant(clean.0.clone());
    let lv0 = g.constant(clean.1.clone());
    let rows = objective_rows(&mut g, objective, (mu0, lv0), adv)?;
    let total = g.sum(rows)?;
    let values = g.value(rows).data().to_vec();
    let mut grads = g.backward(total)?;
    Ok((values, grads.take(ev, &g)))
}

fn clean_posterior(model: &VaeModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (mu, lv) = mv.encode(&mut g, xv)?;
    Ok((g.value(mu).clone(), g.value(lv).clone()))
}

fn start_point(cfg: &AttackConfig, rows: &[usize], width: usize) -> Tensor {
    let radius = match cfg.start {
        PgdStart::Zero => 0.0,
        PgdStart::Jitter => cfg.step.min(cfg.budget),
        PgdStart::Uniform => cfg.budget,
    };
    let mut data = vec![0.0; rows.len() * width];
    if radius > 0.0 {
        for (k, &r) in rows.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            for v in &mut data[k * width..(k + 1) * width] {
                *v = rng.random_range(-radius..=radius);
            }
        }
    }
    Tensor::matrix(rows.len(), width, data).expect("start shape")
}

/// Attacks the rows `rows` (global indices, used for per-row random streams).
fn attack_chunk(model: &VaeModel, x: &Tensor, rows: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    let b = x.rows();
    let width = x.row_len();
    let clean = clean_posterior(model, x)?;
    let mut eps = start_point(cfg, rows, width);
    // ε = 0 is always a candidate with objective exactly 0.
    let mut best_eps = Tensor::zeros(&[b, width]);
    let mut best = vec![0.0; b];
    let mut start_objective = vec![0.0; b];

    for it in 0..=cfg.iterations {
        let (values, grad) = objective_and_grad(model, cfg.objective, x, &clean, &eps)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "attack objective" });
        }
        for (i, &v) in values.iter().enumerate() {
            if it == 0 {
                start_objective[i] = v;
            }
            if v > best[i] {
                best[i] = v;
                best_eps.row_mut(i).copy_from_slice(eps.row(i));
            }
        }
        if it == cfg.iterations {
            break;
        }
        for (e, gv) in eps.data_mut().iter_mut().zip(grad.data()) {
            let s = if *gv > 0.0 {
                1.0
            } else if *gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *e = (*e + cfg.step * s).clamp(-cfg.budget, cfg.budget);
        }
    }
    Ok(AttackResult {
        eps: best_eps,
        objective: best,
        start_objective,
        failed: vec![false; b],
    })
}

/// Attacks one row at a time after a chunk failed, so a single bad row only
/// marks itself.
fn attack_rows_individually(model: &VaeModel, x: &Tensor, rows: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    let width = x.row_len();
    let mut out = AttackResult {
        eps: Tensor::zeros(&[rows.len(), width]),
        objective: vec![0.0; rows.len()],
        start_objective: vec![0.0; rows.len()],
        failed: vec![false; rows.len()],
    };
    for (k, &r) in rows.iter().enumerate() {
        let xi = x.select_rows(&[k]);
        match attack_chunk(model, &xi, &[r], cfg) {
            Ok(res) => {
                out.eps.row_mut(k).copy_from_slice(res.eps.row(0));
                out.objective[k] = res.objective[0];
                out.start_objective[k] = res.start_objective[0];
            }
            Err(Error::NonFinite { .. } | Error::NonPositive { .. } | Error::DivisionByZero { .. }) => {
                log::warn!("attack failed on sample {r}");
                out.failed[k] = true;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// ℓ∞ PGD against the encoder posterior: sign-gradient ascent on the chosen
/// divergence with projection onto `‖ε‖∞ ≤ δ` after every step. Returns the
/// best iterate per row. Inputs `x + ε` are not clamped to the pixel range.
pub fn pgd_attack(model: &VaeModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if x.rank() != 2 || x.row_len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.shape().last().copied().unwrap_or(0),
        });
    }
    let n = x.rows();
    let width = x.row_len();
    if cfg.budget == 0.0 {
        return Ok(AttackResult {
            eps: Tensor::zeros(&[n, width]),
            objective: vec![0.0; n],
            start_objective: vec![0.0; n],
            failed: vec![false; n],
        });
    }
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(ATTACK_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let run = |rows: &Vec<usize>| -> Result<AttackResult> {
        let xb = x.select_rows(rows);
        match attack_chunk(model, &xb, rows, cfg) {
            Ok(r) => Ok(r),
            Err(Error::NonFinite { .. } | Error::NonPositive { .. } | Error::DivisionByZero { .. }) => {
                attack_rows_individually(model, &xb, rows, cfg)
            }
            Err(e) => Err(e),
        }
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<AttackResult>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<AttackResult>> = chunks.iter().map(run).collect();

    let mut eps = Vec::with_capacity(n * width);
    let mut out = AttackResult {
        eps: Tensor::zeros(&[0]),
        objective: Vec::with_capacity(n),
        start_objective: Vec::with_capacity(n),
        failed: Vec::with_capacity(n),
    };
    for part in parts {
        let part = part?;
        eps.extend_from_slice(part.eps.data());
        out.objective.extend(part.objective);
        out.start_objective.extend(part.start_objective);
        out.failed.extend(part.failed);
    }
    out.eps = Tensor::matrix(n, width, eps)?;
    Ok(out)
}

/// `x + eps`, unclamped.
pub fn perturb(x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(eps.data()).map(|(a, b)| a + b).collect(),
    )
}

/// Encoder means for every row of `x`, `[N, d]`. No sampling.
pub fn extract_representations(model: &VaeModel, x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    let d = model.latent_dim();
    let mut out = Vec::with_capacity(n * d);
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let rows: Vec<usize> = (start..(start + ENCODE_CHUNK).min(n)).collect();
        out.extend_from_slice(model.encode(&x.select_rows(&rows))?.mean.data());
    }
    Tensor::matrix(n, d, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iterations: usize,
    /// Stop once the full-batch gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3000,
            tolerance: 1e-5,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    classes: usize,
    dim: usize,
    /// `[K, D+1]`, the last column is the bias.
    weights: Vec<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Only one class was present in the training labels.
    pub degenerate: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

struct ProbeData {
    /// Standardized features with a trailing 1, `[N, D+1]`.
    x: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    cols: usize,
}

impl ProbeData {
    /// Mean cross-entropy and its gradient.
    fn loss_grad(&self, w: &[f64], k: usize, want_grad: bool) -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut grad = if want_grad { vec![0.0; w.len()] } else { Vec::new() };
        let mut logits = vec![0.0; k];
        for i in 0..self.n {
            let xi = &self.x[i * self.cols..(i + 1) * self.cols];
            for (c, l) in logits.iter_mut().enumerate() {
                *l = w[c * self.cols..(c + 1) * self.cols]
                    .iter()
                    .zip(xi)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - logits[self.labels[i]];
            if want_grad {
                for c in 0..k {
                    let p = (logits[c] - lse).exp() - f64::from(c == self.labels[i]);
                    for (gw, xv) in grad[c * self.cols..(c + 1) * self.cols].iter_mut().zip(xi) {
                        *gw += p * xv;
                    }
                }
            }
        }
        let inv = 1.0 / self.n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, grad)
    }
}

fn standardizer(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (z.rows(), z.row_len());
    let mut center = vec![0.0; d];
    for i in 0..n {
        for (c, v) in center.iter_mut().zip(z.row(i)) {
            *c += v;
        }
    }
    center.iter_mut().for_each(|c| *c /= n as f64);
    let mut scale = vec![0.0; d];
    for i in 0..n {
        for ((s, v), c) in scale.iter_mut().zip(z.row(i)).zip(&center) {
            *s += (v - c).powi(2);
        }
    }
    for s in &mut scale {
        let sd = (*s / n as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }
    (center, scale)
}

/// Fits a linear probe by full-batch gradient descent with Armijo
/// backtracking on the mean cross-entropy.
pub fn fit_linear_probe(z: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<LinearProbe> {
    if z.rank() != 2 || z.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: z.shape().first().copied().unwrap_or(0),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidParameter("probe needs at least one sample".into()));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite { op: "probe input" });
    }
    let classes = labels.iter().max().unwrap() + 1;
    let dim = z.row_len();
    let cols = dim + 1;
    let (center, scale) = standardizer(z);
    let distinct = labels.iter().any(|&l| l != labels[0]);
    let mut probe = LinearProbe {
        classes,
        dim,
        weights: vec![0.0; classes * cols],
        center,
        scale,
        degenerate: !distinct,
        iterations: 0,
        grad_norm: 0.0,
    };
    if !distinct {
        log::warn!("linear probe fitted on a single class; predictions are constant");
        probe.weights[labels[0] * cols + dim] = 1.0;
        return Ok(probe);
    }

    let n = labels.len();
    let mut x = Vec::with_capacity(n * cols);
    for i in 0..n {
        x.extend(probe.standardize(z.row(i)));
        x.push(1.0);
    }
    let data = ProbeData {
        x,
        labels: labels.to_vec(),
        n,
        cols,
    };
    let mut w = probe.weights.clone();
    let (mut loss, mut grad) = data.loss_grad(&w, classes, true);
    let mut step = 1.0;
    let mut it = 0;
    let mut gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    while it < cfg.max_iterations && gnorm >= cfg.tolerance {
        step *= 2.0;
        loop {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let (tl, _) = data.loss_grad(&trial, classes, false);
            if tl <= loss - 1e-4 * step * gnorm * gnorm {
                w = trial;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        if step < 1e-20 {
            break;
        }
        (loss, grad) = data.loss_grad(&w, classes, true);
        gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        it += 1;
    }
    probe.weights = w;
    probe.iterations = it;
    probe.grad_norm = gnorm;
    Ok(probe)
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.classes
    }

    fn standardize<'a>(&'a self, row: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        row.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((v, c), s)| (v - c) / s)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        if z.rank() != 2 || z.row_len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.shape().last().copied().unwrap_or(0),
            });
        }
        let cols = self.dim + 1;
        Ok((0..z.rows())
            .map(|i| {
                let xi: Vec<f64> = self.standardize(z.row(i)).chain(std::iter::once(1.0)).collect();
                (0..self.classes)
                    .map(|c| {
                        let w = &self.weights[c * cols..(c + 1) * cols];
                        (c, w.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>())
                    })
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    )
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, z: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(z)?, labels))
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn per_class_accuracy(pred: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if l < classes {
            total[l] += 1;
            hit[l] += usize::from(p == l);
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
}

/// Mean over rows of `Σ_pixels (x − sigmoid(decode(μ_x)))²`.
pub fn recon_mse(model: &VaeModel, x: &Tensor) -> Result<f64> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::InvalidParameter("empty input".into()));
    }
    let mut total = 0.0;
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let rows: Vec<usize> = (start..(start + ENCODE_CHUNK).min(n)).collect();
        let xb = x.select_rows(&rows);
        let logits = model.decode(&model.encode(&xb)?.mean)?;
        total += logits
            .data()
            .iter()
            .zip(xb.data())
            .map(|(l, v)| (v - 1.0 / (1.0 + (-l).exp())).powi(2))
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n−1)-normalized standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

/// `‖μ_x − μ_{x+ε}‖²` per row with `ε ~ N(0, noise_std²)` drawn from `seed`,
/// so every model sees the same noise realization.
pub fn latent_pair_distances(model: &VaeModel, x: &Tensor, noise_std: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = x
        .data()
        .iter()
        .map(|v| v + noise_std * standard_normal(&mut rng))
        .collect();
    let noisy = Tensor::new(x.shape().to_vec(), noisy)?;
    let a = extract_representations(model, x)?;
    let b = extract_representations(model, &noisy)?;
    Ok((0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(p, q)| (p - q).powi(2)).sum())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub deltas: Vec<f64>,
    pub objectives: Vec<AttackObjective>,
    pub iterations: usize,
    pub start: PgdStart,
    pub seed: u64,
    /// Noise std for the latent-pair distance.
    pub pair_noise_std: f64,
}

pub const DEFAULT_DELTAS: [f64; 5] = [0.0, 0.05, 0.1, 0.15, 0.2];

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            deltas: DEFAULT_DELTAS.to_vec(),
            objectives: AttackObjective::ALL.to_vec(),
            iterations: 50,
            start: PgdStart::default(),
            seed: 0,
            pair_noise_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialCell {
    pub objective: AttackObjective,
    pub delta: f64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub failures: usize,
    /// Fraction of samples where PGD raised the objective above its start.
    pub improved_fraction: f64,
    pub max_abs_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub clean_per_class: Vec<f64>,
    pub adversarial: Vec<AdversarialCell>,
    pub recon_mse: f64,
    pub latent_pair_distance: MeanStd,
    pub probe_degenerate: bool,
}

impl EvalReport {
    pub fn cell(&self, objective: AttackObjective, delta: f64) -> Option<&AdversarialCell> {
        self.adversarial
            .iter()
            .find(|c| c.objective == objective && c.delta == delta)
    }

    pub fn attack_failures(&self) -> usize {
        self.adversarial.iter().map(|c| c.failures).sum()
    }
}

/// Runs every `(objective, δ)` attack on `test` and classifies the attacked
/// encoder means with `probe`.
pub fn evaluate(
    model: &VaeModel,
    probe: &LinearProbe,
    test: &Dataset,
    cfg: &EvalConfig,
    label: &str,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let classes = probe.classes().max(test.num_classes());
    let z = extract_representations(model, &test.images)?;
    let clean_pred = probe.predict(&z)?;
    let clean_accuracy = accuracy(&clean_pred, &test.labels);
    let mut adversarial = Vec::new();
    for &objective in &cfg.objectives {
        for &delta in &cfg.deltas {
            let attack = AttackConfig {
                iterations: cfg.iterations,
                start: cfg.start,
                ..AttackConfig::new(delta, objective, cfg.seed)
            };
            let res = pgd_attack(model, &test.images, &attack)?;
            let attacked = perturb(&test.images, &res.eps)?;
            let pred = probe.predict(&extract_representations(model, &attacked)?)?;
            log::info!(
                "{label} {objective} δ={delta}: accuracy {:.4}",
                accuracy(&pred, &test.labels)
            );
            adversarial.push(AdversarialCell {
                objective,
                delta,
                accuracy: accuracy(&pred, &test.labels),
                per_class: per_class_accuracy(&pred, &test.labels, classes),
                failures: res.failures(),
                improved_fraction: if delta > 0.0 { res.improved_fraction() } else { 0.0 },
                max_abs_eps: res.eps.max_abs(),
            });
        }
    }
    let distances = latent_pair_distances(model, &test.images, cfg.pair_noise_std, cfg.seed)?;
    Ok(EvalReport {
        label: label.to_string(),
        samples: test.len(),
        clean_accuracy,
        clean_per_class: per_class_accuracy(&clean_pred, &test.labels, classes),
        adversarial,
        recon_mse: recon_mse(model, &test.images)?,
        latent_pair_distance: MeanStd::of(&distances),
        probe_degenerate: probe.degenerate,
    })
}

/// True when accuracy never rises with δ, except for at most one rise of
/// at most `slack`.
pub fn is_monotone_in_delta(points: &[(f64, f64)], slack: f64) -> bool {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rises: Vec<f64> = sorted
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .filter(|&d| d > 0.0)
        .collect();
    rises.is_empty() || (rises.len() == 1 && rises[0] <= slack)
}

pub const ACCURACY_CSV_HEADER: &str = "label,objective,delta,accuracy,failures";

/// Accuracy-versus-δ rows for the report plotter.
pub fn write_accuracy_csv<W: Write>(mut w: W, manifest: &str, reports: &[EvalReport]) -> Result<()> {
    writeln!(w, "# manifest {manifest}")?;
    writeln!(w, "{ACCURACY_CSV_HEADER}")?;
    for r in reports {
        for c in &r.adversarial {
            writeln!(
                w,
                "{},{},{},{:.6},{}",
                r.label, c.objective, c.delta, c.accuracy, c.failures
            )?;
        }
    }
    Ok(())
}

/// Latent means with labels, one row per sample, for external embedding tools.
pub fn write_latents_csv<W: Write>(mut w: W, manifest: &str, z: &Tensor, labels: &[usize]) -> Result<()> {
    if z.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: z.rows(),
        });
    }
    writeln!(w, "# manifest {manifest}")?;
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..z.row_len()).map(|j| format!("z{j}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, l) in labels.iter().enumerate() {
        let vals: Vec<String> = z.row(i).iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(w, "{l},{}", vals.join(","))?;
    }
    Ok(())
}
