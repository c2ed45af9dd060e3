//! MLP encoder/decoder with PReLU activations, the reparameterization step,
//! reconstruction log-likelihoods and the on-disk checkpoint format.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, GmmPrior};
use crate::tensor::{io as tensor_io, Graph, Tensor, Var};

const PRELU_INIT: f64 = 0.25;

/// Layer widths. The encoder is `input → hidden… → (d, d)` and the decoder
/// mirrors it as `d → reversed hidden… → input`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Number of mixture components in a learnable latent prior, if any.
    #[serde(default)]
    pub gmm_components: Option<usize>,
}

impl Architecture {
    /// The 784-500-250-d layout used for MNIST-family images.
    pub fn mnist(latent_dim: usize) -> Self {
        Self {
            input_dim: 784,
            hidden: vec![500, 250],
            latent_dim,
            gmm_components: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        if self.gmm_components == Some(0) {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        Ok(())
    }
}

/// Which per-pixel likelihood the decoder output is scored with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconLikelihood {
    /// Bernoulli cross-entropy on sigmoid probabilities.
    #[default]
    BernoulliCrossEntropy,
    /// `−½‖x − σ(l)‖²`, unit observation variance.
    GaussianMse,
}

/// Encoder output for a batch: rows are data points.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorOutput {
    pub mean: Tensor,
    pub std: Tensor,
}

impl PosteriorOutput {
    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.numel() == 0
    }

    pub fn gaussian(&self, i: usize) -> Result<DiagGaussian> {
        DiagGaussian::from_std(self.mean.row(i).to_vec(), self.std.row(i))
    }
}

/// Parameters of a VAE, stored as a flat list of named tensors in a fixed
/// layout so optimizers and checkpoints can treat them uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn uniform_layer<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
        Tensor::vector(b),
    )
}

impl VaeModel {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };

        let mut width = arch.input_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            let (w, b) = uniform_layer(rng, width, h);
            push(format!("enc{i}.w"), w);
            push(format!("enc{i}.b"), b);
            push(format!("enc{i}.slope"), Tensor::scalar(PRELU_INIT));
            width = h;
        }
        for head in ["mean", "logvar"] {
            let (w, b) = uniform_layer(rng, width, arch.latent_dim);
            push(format!("enc.{head}.w"), w);
            push(format!("enc.{head}.b"), b);
        }

        width = arch.latent_dim;
        for (i, &h) in arch.hidden.iter().rev().enumerate() {
            let (w, b) = uniform_layer(rng, width, h);
            push(format!("dec{i}.w"), w);
            push(format!("dec{i}.b"), b);
            push(format!("dec{i}.slope"), Tensor::scalar(PRELU_INIT));
            width = h;
        }
        let (w, b) = uniform_layer(rng, width, arch.input_dim);
        push("dec.out.w".into(), w);
        push("dec.out.b".into(), b);

        if let Some(c) = arch.gmm_components {
            // uniform weights, unit variances, means drawn from U(−1, 1)
            let d = arch.latent_dim;
            let means = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            push("gmm.logits".into(), Tensor::vector(vec![0.0; c]));
            push("gmm.means".into(), Tensor::matrix(c, d, means)?);
            push("gmm.logvars".into(), Tensor::zeros(&[c, d]));
        }

        Ok(Self { arch, names, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// The learnable mixture prior, when the architecture has one.
    pub fn gmm_prior(&self) -> Result<Option<GmmPrior>> {
        let (Some(logits), Some(means), Some(logvars)) = (
            self.param("gmm.logits"),
            self.param("gmm.means"),
            self.param("gmm.logvars"),
        ) else {
            return Ok(None);
        };
        let c = logits.numel();
        GmmPrior::new(
            logits.data().to_vec(),
            (0..c).map(|i| means.row(i).to_vec()).collect(),
            (0..c)
                .map(|i| logvars.row(i).iter().map(|v| v.exp()).collect())
                .collect(),
        )
        .map(Some)
    }

    /// Inserts every parameter into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        ModelVars {
            hidden_layers: self.arch.hidden.len(),
            has_gmm: self.arch.gmm_components.is_some(),
            vars,
        }
    }

    /// Encodes a `[B, D]` batch without recording gradients.
    pub fn encode(&self, x: &Tensor) -> Result<PosteriorOutput> {
        check_input(x, self.input_dim())?;
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (mu, logvar) = mv.encode(&mut g, xv)?;
        let std = g.value(logvar).map(|lv| (0.5 * lv).exp());
        Ok(PosteriorOutput {
            mean: g.value(mu).clone(),
            std,
        })
    }

    /// Decoder logits for a `[B, d]` batch of codes.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let l = mv.decode(&mut g, zv)?;
        Ok(g.value(l).clone())
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in self.names.iter().zip(&self.params) {
            let file = format!("{name}.bin");
            tensor_io::save(&dir.join(&file), t)?;
            entries.push(ParamEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            architecture: self.arch.clone(),
            latent_dim: self.arch.latent_dim,
            input_dim: self.arch.input_dim,
            config_hash: config_hash.to_string(),
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint and returns it with the stored configuration hash.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        manifest.architecture.validate()?;
        let mut reference = Self::new(manifest.architecture.clone(), &mut crate::oracle::rng(0))?;
        if reference.names.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, manifest lists {}",
                reference.names.len(),
                manifest.params.len()
            )));
        }
        for (i, entry) in manifest.params.iter().enumerate() {
            if entry.name != reference.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is {}, expected {}",
                    entry.name, reference.names[i]
                )));
            }
            let t = tensor_io::load(&dir.join(&entry.file))?;
            if t.shape() != reference.params[i].shape() || t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{} has shape {:?}", entry.name, t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{} holds non-finite values", entry.name)));
            }
            reference.params[i] = t;
        }
        Ok((reference, manifest.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    architecture: Architecture,
    latent_dim: usize,
    input_dim: usize,
    config_hash: String,
    params: Vec<ParamEntry>,
}

fn check_input(x: &Tensor, d: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "encode input" });
    }
    Ok(())
}

/// Model parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    hidden_layers: usize,
    has_gmm: bool,
    vars: Vec<Var>,
}

/// Handles to the learnable mixture prior inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    pub logits: Var,
    pub means: Var,
    pub logvars: Var,
}

impl ModelVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the node used for parameter `idx`, e.g. to differentiate
    /// with respect to a single parameter tensor.
    pub fn replace_var(&mut self, idx: usize, var: Var) {
        self.vars[idx] = var;
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// `(mean, log-variance)` for a `[B, D]` input node.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let v = &self.vars;
        let mut h = x;
        for i in 0..self.hidden_layers {
            let a = Self::linear(g, h, v[3 * i], v[3 * i + 1])?;
            h = g.prelu(a, v[3 * i + 2])?;
        }
        let k = 3 * self.hidden_layers;
        let mu = Self::linear(g, h, v[k], v[k + 1])?;
        let logvar = Self::linear(g, h, v[k + 2], v[k + 3])?;
        Ok((mu, logvar))
    }

    /// Decoder logits for a `[B, d]` code node.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let v = &self.vars;
        let base = 3 * self.hidden_layers + 4;
        let mut h = z;
        for i in 0..self.hidden_layers {
            let j = base + 3 * i;
            let a = Self::linear(g, h, v[j], v[j + 1])?;
            h = g.prelu(a, v[j + 2])?;
        }
        let j = base + 3 * self.hidden_layers;
        Self::linear(g, h, v[j], v[j + 1])
    }

    pub fn gmm(&self) -> Option<GmmVars> {
        if !self.has_gmm {
            return None;
        }
        let j = 6 * self.hidden_layers + 6;
        Some(GmmVars {
            logits: self.vars[j],
            means: self.vars[j + 1],
            logvars: self.vars[j + 2],
        })
    }
}

/// `z = μ + exp(½·logvar) ⊙ ε` on the graph.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// `z = μ + σ ⊙ ε` for a whole batch.
pub fn reparameterize(p: &PosteriorOutput, eps: &Tensor) -> Result<Tensor> {
    if p.mean.shape() != eps.shape() || p.std.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: p.mean.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let data = p
        .mean
        .data()
        .iter()
        .zip(p.std.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(p.mean.shape().to_vec(), data)
}

/// Per-datum reconstruction log-likelihood on the graph, shape `[B]`.
/// Noisy training inputs can leave [0, 1]. The Bernoulli likelihood is
/// unbounded above for such targets, so they are scored against a clamped,
/// detached copy; the encoder still sees the unclamped input.
pub fn recon_loglik_graph(g: &mut Graph, logits: Var, x: Var, kind: ReconLikelihood) -> Result<Var> {
    match kind {
        ReconLikelihood::BernoulliCrossEntropy => {
            let x = if g.value(x).data().iter().all(|v| (0.0..=1.0).contains(v)) {
                x
            } else {
                let clamped = g.value(x).map(|v| v.clamp(0.0, 1.0));
                g.constant(clamped)
            };
            // x·log σ(l) + (1−x)·log(1−σ(l)) = x·l − softplus(l)
            let xl = g.mul(x, logits)?;
            let sp = g.softplus(logits)?;
            let per_pixel = g.sub(xl, sp)?;
            g.sum_rows(per_pixel)
        }
        ReconLikelihood::GaussianMse => {
            let p = g.sigmoid(logits)?;
            let diff = g.sub(x, p)?;
            let sq = g.square(diff)?;
            let s = g.sum_rows(sq)?;
            g.scale(s, -0.5)
        }
    }
}

/// Per-datum reconstruction log-likelihood of `x ∈ [0,1]` under `logits`.
pub fn recon_loglik(logits: &Tensor, x: &Tensor, kind: ReconLikelihood) -> Result<Vec<f64>> {
    if logits.shape() != x.shape() || x.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "recon_loglik",
            lhs: logits.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter(
            "reconstruction targets must lie in [0, 1]".into(),
        ));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let xv = g.constant(x.clone());
    let r = recon_loglik_graph(&mut g, l, xv, kind)?;
    Ok(g.value(r).data().to_vec())
}
