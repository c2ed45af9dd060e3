//! The `raven` command-line driver: argument parsing, run manifests and the
//! five subcommands.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bound::RavenBoundConfig;
use crate::dataset::{load_split, split_paths, subsample, synth_blobs, Dataset, Split};
use crate::model::{Architecture, ReconLikelihood, VaeModel};
use crate::report::{markdown_table, parse_accuracy_csv, render_svg};
use crate::robustness::{
    evaluate, extract_representations, fit_linear_probe, pgd_attack, write_accuracy_csv, write_latents_csv,
    AttackConfig, AttackObjective, EvalConfig, EvalReport, PgdStart, ProbeConfig, DEFAULT_DELTAS,
};
use crate::trainer::{train, write_metrics_csv, AugmentationSpec, Pairing, Regime, TrainConfig, TrainStatus};
use crate::verify::{self, VerifyPlan};

#[derive(Debug, Parser)]
#[command(name = "raven", version, about = "Robust augmented VAE workbench")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every closed form against its numerical oracle.
    Verify(VerifyArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run PGD attacks against a trained encoder.
    Attack(AttackArgs),
    /// Fit a linear probe and measure clean/adversarial accuracy, MSE and latent-pair distance.
    Evaluate(EvaluateArgs),
    /// Render accuracy-vs-δ plots and a table from evaluation CSVs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Synth,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Synth => "synth",
        }
    }

    /// Augmentation kernel std per dataset.
    fn default_sigma_aug(self) -> f64 {
        match self {
            DatasetKind::Mnist => 0.01,
            DatasetKind::Fmnist => 0.04,
            DatasetKind::Synth => 0.1,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetKind,
    /// Directory with the four IDX files; defaults to $RAVEN_DATA_DIR, then data/<dataset>.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Class-stratified subsample size of the training split.
    #[arg(long)]
    pub subsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write verify.csv and run.json here instead of printing the CSV.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Fewer instances and samples, for smoke runs.
    #[arg(long)]
    pub quick: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "raven")]
    pub regime: RegimeArg,
    /// Augmentation kernel standard deviation σ (Σaug = σ²I); dataset default when omitted.
    #[arg(long)]
    pub sigma_aug: Option<f64>,
    /// Std of the additive pixel noise used to form pairs.
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    /// Hidden widths of the encoder (the decoder mirrors them).
    #[arg(long, value_delimiter = ',', default_value = "500,250")]
    pub hidden: Vec<usize>,
    /// Mixture components of the latent base (raven_gmm only).
    #[arg(long)]
    pub gmm_components: Option<usize>,
    /// Monte Carlo samples for the mixture term.
    #[arg(long, default_value_t = 1)]
    pub gmm_samples: usize,
    #[arg(long, value_enum, default_value = "bernoulli")]
    pub recon: ReconArg,
    #[arg(long, default_value_t = 100.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Flat `key = value` file; explicit flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum RegimeArg {
    Vanilla,
    NoiseVae,
    Raven,
    RavenGmm,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Vanilla => Regime::Vanilla,
            RegimeArg::NoiseVae => Regime::NoiseVae,
            RegimeArg::Raven => Regime::Raven,
            RegimeArg::RavenGmm => Regime::RavenGmm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconArg {
    Bernoulli,
    Mse,
}

impl From<ReconArg> for ReconLikelihood {
    fn from(r: ReconArg) -> Self {
        match r {
            ReconArg::Bernoulli => ReconLikelihood::BernoulliCrossEntropy,
            ReconArg::Mse => ReconLikelihood::GaussianMse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveArg {
    Kl,
    W2,
}

impl From<ObjectiveArg> for AttackObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Kl => AttackObjective::Kl,
            ObjectiveArg::W2 => AttackObjective::W2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StartArg {
    Zero,
    Jitter,
    Uniform,
}

impl From<StartArg> for PgdStart {
    fn from(s: StartArg) -> Self {
        match s {
            StartArg::Zero => PgdStart::Zero,
            StartArg::Jitter => PgdStart::Jitter,
            StartArg::Uniform => PgdStart::Uniform,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AttackOptions {
    /// Comma-separated ℓ∞ budgets.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DELTAS.to_vec())]
    pub delta_grid: Vec<f64>,
    /// Attack objective; both when omitted.
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// PGD starting point.
    #[arg(long, value_enum, default_value = "jitter")]
    pub pgd_start: StartArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl AttackOptions {
    fn objectives(&self) -> Vec<AttackObjective> {
        match self.objective {
            Some(o) => vec![o.into()],
            None => AttackObjective::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackOptions,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Model checkpoint directories (repeatable).
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Series labels, one per model; defaults to the training regime.
    #[arg(long)]
    pub label: Vec<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Class-stratified subsample size of the test split.
    #[arg(long)]
    pub test_subsample: Option<usize>,
    #[command(flatten)]
    pub attack: AttackOptions,
    /// Noise std for the latent-pair distance.
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Accuracy CSVs written by `evaluate` (repeatable).
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation. `hash` covers the command, the resolved
/// configuration and the content of every input file, but not timestamps.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub hash: String,
    pub version: &'static str,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outcome: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, inputs: &[PathBuf]) -> anyhow::Result<Self> {
        let mut digests = Vec::new();
        for p in inputs {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            digests.push(InputDigest {
                path: p.display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(&config)?);
        for d in &digests {
            h.update([0]);
            h.update(d.sha256.as_bytes());
        }
        Ok(Self {
            command: command.to_string(),
            config,
            seed,
            inputs: digests,
            hash: hex::encode(h.finalize()),
            version: env!("CARGO_PKG_VERSION"),
            started_unix: now(),
            finished_unix: None,
            outcome: None,
        })
    }

    fn finish(&mut self, dir: &Path, outcome: serde_json::Value) -> anyhow::Result<()> {
        self.finished_unix = Some(now());
        self.outcome = Some(outcome);
        write(dir.join("run.json"), serde_json::to_string_pretty(self)?)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Inserts `--key value` pairs from a flat config file for every key not
/// already given on the command line. Lines are `key = value`; `#` starts a
/// comment; `true` turns a key into a bare switch.
pub fn expand_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv);
    };
    let path = argv.get(pos + 1).context("--config needs a file")?.clone();
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let given: HashSet<String> = argv
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut out = argv;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{path}:{}: expected `key = value`", lineno + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            bail!("{path}:{}: config files cannot include other config files", lineno + 1);
        }
        if given.contains(&key) {
            continue;
        }
        out.push(format!("--{key}"));
        if value != "true" {
            out.push(value.to_string());
        }
    }
    Ok(out)
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn dispatch(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Attack(a) => cmd_attack(a).map(|_| 0),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| 0),
        Command::Report(a) => cmd_report(a).map(|_| 0),
    }
}

fn data_dir(args: &DataArgs) -> PathBuf {
    args.data_dir
        .clone()
        .or_else(|| std::env::var_os("RAVEN_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| Path::new("data").join(args.dataset.name()))
}

/// Ten 784-pixel blob classes; train and test share centers.
fn synth_split(split: Split) -> Dataset {
    const TRAIN_PER_CLASS: usize = 100;
    let all = synth_blobs(10, 130, 784, 1.0, 2024);
    let mut seen = [0usize; 10];
    let rows: Vec<usize> = (0..all.len())
        .filter(|&i| {
            let l = all.labels[i];
            seen[l] += 1;
            (seen[l] <= TRAIN_PER_CLASS) == (split == Split::Train)
        })
        .collect();
    let mut ds = all.select(&rows);
    ds.name = "synth".into();
    ds.split = split.tag().into();
    ds
}

/// Loads a split, optionally subsampled, and returns the files it read.
fn load_data(args: &DataArgs, split: Split, n: Option<usize>, seed: u64) -> anyhow::Result<(Dataset, Vec<PathBuf>)> {
    let (ds, files) = match args.dataset {
        DatasetKind::Synth => (synth_split(split), Vec::new()),
        kind => {
            let dir = data_dir(args);
            let (img, lbl) = split_paths(&dir, split);
            for p in [&img, &lbl] {
                if !p.exists() {
                    bail!(
                        "missing {} (set --data-dir or RAVEN_DATA_DIR to a directory with the IDX files)",
                        p.display()
                    );
                }
            }
            let ds = load_split(kind.name(), &dir, split).with_context(|| format!("loading {}", dir.display()))?;
            (ds, vec![img, lbl])
        }
    };
    let ds = match n {
        Some(n) => subsample(&ds, n, seed)?,
        None => ds,
    };
    Ok((ds, files))
}

fn model_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading model directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<i32> {
    let plan = if args.quick {
        VerifyPlan {
            quadrature_instances: 10,
            gmm_instances_per_c: 4,
            term3_instances: 100,
            mc_instances: 4,
            mc_samples: 100_000,
        }
    } else {
        VerifyPlan::default()
    };
    let config = serde_json::json!({ "quick": args.quick });
    let mut manifest = RunManifest::new("verify", config, args.seed, &[])?;
    let rows = verify::run_all(args.seed, &plan)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    match &args.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut buf = Vec::new();
            verify::write_csv(&mut buf, &manifest.hash, &rows)?;
            write(dir.join("verify.csv"), buf)?;
            manifest.finish(dir, serde_json::json!({ "rows": rows.len(), "failed": failed }))?;
        }
        None => verify::write_csv(std::io::stdout().lock(), &manifest.hash, &rows)?,
    }
    for r in rows.iter().filter(|r| !r.pass) {
        eprintln!(
            "FAIL {}/{} instance {} (seed {}): error {:.3e} > {:e}",
            r.suite, r.identity, r.instance, r.seed, r.error, r.tolerance
        );
    }
    eprintln!("{} of {} checks passed", rows.len() - failed, rows.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

pub fn train_config(args: &TrainArgs, input_dim: usize) -> anyhow::Result<TrainConfig> {
    let regime: Regime = args.regime.into();
    let sigma = args.sigma_aug.unwrap_or(args.data.dataset.default_sigma_aug());
    let mut bound = RavenBoundConfig::isotropic(args.latent_dim, sigma, args.recon.into())?;
    bound.gmm_samples = args.gmm_samples;
    Ok(TrainConfig {
        regime,
        architecture: Architecture {
            input_dim,
            hidden: args.hidden.clone(),
            latent_dim: args.latent_dim,
            gmm_components: args.gmm_components,
        },
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        seed: args.seed,
        bound,
        augmentation: AugmentationSpec {
            noise_std: args.noise_std,
            pairing: Pairing::OriginalPlusNoisy,
        },
        clip_norm: args.clip_norm,
    })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let (data, files) = load_data(&args.data, Split::Train, args.data.subsample, args.seed)?;
    let config = train_config(&args, data.dim())?;
    config.validate()?;
    let resolved = serde_json::json!({ "args": &args, "train": &config });
    let mut manifest = RunManifest::new("train", resolved, args.seed, &files)?;
    let out = &args.out_dir;
    fs::create_dir_all(out.join("checkpoints"))?;
    log::info!(
        "training {} on {} samples ({})",
        config.regime,
        data.len(),
        manifest.hash
    );

    let hash = manifest.hash.clone();
    let outcome = train(&config, &data, |epoch, model| {
        let dir = out.join("checkpoints").join(format!("epoch-{:03}", epoch + 1));
        model.save(&dir, &hash)?;
        log::info!("epoch {} done", epoch + 1);
        Ok(())
    })?;
    outcome.model.save(&out.join("model"), &manifest.hash)?;

    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &manifest.hash, &outcome.metrics)?;
    write(out.join("metrics.csv"), buf)?;
    let mut timing = format!("# manifest {}\nepoch,seconds\n", manifest.hash);
    for (e, s) in outcome.epoch_seconds.iter().enumerate() {
        timing.push_str(&format!("{},{s:.3}\n", e + 1));
    }
    write(out.join("timing.csv"), timing)?;
    manifest.finish(out, serde_json::to_value(&outcome.status)?)?;
    if let TrainStatus::Diverged { step, reason } = &outcome.status {
        bail!("training diverged at step {step}: {reason}; last finite parameters saved");
    }
    Ok(())
}

fn load_model(dir: &Path) -> anyhow::Result<VaeModel> {
    let (model, _) = VaeModel::load(dir).with_context(|| format!("loading model {}", dir.display()))?;
    Ok(model)
}

fn cmd_attack(args: AttackArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let (test, mut files) = load_data(&args.data, Split::Test, args.data.subsample, args.attack.seed)?;
    files.extend(model_files(&args.model)?);
    let mut manifest = RunManifest::new("attack", serde_json::to_value(&args)?, args.attack.seed, &files)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut csv = format!(
        "# manifest {}\nobjective,delta,samples,max_abs_eps,mean_objective,failures,improved_fraction\n",
        manifest.hash
    );
    let mut failures = 0;
    for objective in args.attack.objectives() {
        for &delta in &args.attack.delta_grid {
            let cfg = AttackConfig {
                iterations: args.attack.iterations,
                start: args.attack.pgd_start.into(),
                ..AttackConfig::new(delta, objective, args.attack.seed)
            };
            let res = pgd_attack(&model, &test.images, &cfg)?;
            let mean = res.objective.iter().sum::<f64>() / res.objective.len().max(1) as f64;
            failures += res.failures();
            csv.push_str(&format!(
                "{objective},{delta},{},{:.6e},{mean:.6e},{},{:.4}\n",
                test.len(),
                res.eps.max_abs(),
                res.failures(),
                res.improved_fraction()
            ));
        }
    }
    write(args.out_dir.join("attack.csv"), csv)?;
    manifest.finish(&args.out_dir, serde_json::json!({ "failures": failures }))
}

fn default_label(model_dir: &Path) -> String {
    let run = model_dir.parent().map(|p| p.join("run.json"));
    if let Some(text) = run.and_then(|p| fs::read_to_string(p).ok()) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(r) = v.pointer("/config/train/regime").and_then(|r| r.as_str()) {
                return r.to_string();
            }
        }
    }
    model_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    if !args.label.is_empty() && args.label.len() != args.model.len() {
        bail!("got {} labels for {} models", args.label.len(), args.model.len());
    }
    let seed = args.attack.seed;
    let (train_set, mut files) = load_data(&args.data, Split::Train, args.data.subsample, seed)?;
    let (test, test_files) = load_data(&args.data, Split::Test, args.test_subsample, seed)?;
    files.extend(test_files);
    for m in &args.model {
        files.extend(model_files(m)?);
    }
    let mut manifest = RunManifest::new("evaluate", serde_json::to_value(&args)?, seed, &files)?;
    fs::create_dir_all(&args.out_dir)?;
    let cfg = EvalConfig {
        deltas: args.attack.delta_grid.clone(),
        objectives: args.attack.objectives(),
        iterations: args.attack.iterations,
        start: args.attack.pgd_start.into(),
        seed,
        pair_noise_std: args.noise_std,
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for (i, dir) in args.model.iter().enumerate() {
        let model = load_model(dir)?;
        let label = args.label.get(i).cloned().unwrap_or_else(|| default_label(dir));
        let z_train = extract_representations(&model, &train_set.images)?;
        let probe = fit_linear_probe(&z_train, &train_set.labels, &ProbeConfig::default())?;
        let report = evaluate(&model, &probe, &test, &cfg, &label)?;
        let z_test = extract_representations(&model, &test.images)?;
        let mut buf = Vec::new();
        write_latents_csv(&mut buf, &manifest.hash, &z_test, &test.labels)?;
        write(args.out_dir.join(format!("latents-{i}-{label}.csv")), buf)?;
        reports.push(report);
    }
    write(args.out_dir.join("eval.json"), serde_json::to_string_pretty(&reports)?)?;
    let mut buf = Vec::new();
    write_accuracy_csv(&mut buf, &manifest.hash, &reports)?;
    write(args.out_dir.join("accuracy.csv"), buf)?;
    let failures: usize = reports.iter().map(|r| r.attack_failures()).sum();
    if failures > 0 {
        eprintln!("warning: {failures} attacked samples failed (non-finite objective)");
    }
    manifest.finish(&args.out_dir, serde_json::json!({ "attack_failures": failures }))
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let mut points = Vec::new();
    let mut manifests = Vec::new();
    for p in &args.input {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let (m, pts) = parse_accuracy_csv(&text).with_context(|| format!("parsing {}", p.display()))?;
        manifests.extend(m);
        points.extend(pts);
    }
    if points.is_empty() {
        bail!("no accuracy rows in the inputs");
    }
    fs::create_dir_all(&args.out_dir)?;
    for objective in AttackObjective::ALL {
        if points.iter().any(|p| p.objective == objective) {
            write(
                args.out_dir.join(format!("accuracy-{objective}.svg")),
                render_svg(&points, objective),
            )?;
        }
    }
    let mut table = String::new();
    for m in &manifests {
        table.push_str(&format!("<!-- manifest {m} -->\n"));
    }
    table.push_str(&markdown_table(&points));
    write(args.out_dir.join("table.md"), table)
}
