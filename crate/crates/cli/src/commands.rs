//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diaformer::data::{
    generate_synthetic, load_dataset, save_dataset, DiagnosisRecord, GeneratorSpec, LoadOptions,
    SymptomVocab,
};
use diaformer::infer::{evaluate, InferenceConfig};
use diaformer::net::{build_input, Checkpoint, Diaformer, LabelMode, ModelConfig};
use diaformer::tensor::grad_check;
use diaformer::train::{fit, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "diaformer", version, about = "Symptom inquiry and diagnosis with a transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Run simulated dialogues on a dataset and print metrics.
    Eval(EvalArgs),
    /// Sample a synthetic dataset.
    GenerateData(GenerateArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub rho_e: Option<f64>,
    #[arg(long)]
    pub rho_p: Option<f64>,
    #[arg(long)]
    pub max_turns: Option<usize>,
}

impl ThresholdArgs {
    fn apply(&self, mut cfg: InferenceConfig) -> InferenceConfig {
        if let Some(v) = self.rho_e {
            cfg.rho_e = v as _;
        }
        if let Some(v) = self.rho_p {
            cfg.rho_p = v as _;
        }
        if let Some(v) = self.max_turns {
            cfg.max_turns = v;
        }
        cfg
    }
}

/// Network shape for a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { layers: 5, hidden: 512, heads: 8, dropout: 0.1 }
    }
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelShape,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training records (JSON array).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out records for early stopping.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Accept records with an empty self-report.
    #[arg(long)]
    pub allow_empty_explicit: bool,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub allow_empty_explicit: bool,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Generator spec (JSON); the built-in planted spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Move the last N records to `--test-out`.
    #[arg(long, requires = "test_out")]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_records: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "DIAFORMER_BIND", default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value_t = 1800)]
    pub ttl_secs: u64,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

fn load_records(path: &Path, allow_empty_explicit: bool) -> Result<Vec<DiagnosisRecord>> {
    load_dataset(path, LoadOptions { allow_empty_explicit })
        .with_context(|| format!("loading {}", path.display()))
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v as _;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.layers {
        cfg.model.layers = v;
    }
    if let Some(v) = args.hidden {
        cfg.model.hidden = v;
    }
    if let Some(v) = args.heads {
        cfg.model.heads = v;
    }
    cfg.inference = args.thresholds.apply(cfg.inference);

    let train = load_records(&args.data, args.allow_empty_explicit)?;
    let valid = match &args.valid {
        Some(p) => load_records(p, args.allow_empty_explicit)?,
        None => Vec::new(),
    };
    let all: Vec<DiagnosisRecord> = train.iter().chain(&valid).cloned().collect();
    let vocab = SymptomVocab::build(&all)?;
    let train = vocab.encode_all(&train)?;
    let valid = vocab.encode_all(&valid)?;

    let mut model_cfg = ModelConfig::small(&vocab, cfg.model.layers, cfg.model.hidden, cfg.model.heads);
    model_cfg.dropout = cfg.model.dropout as _;
    let mut model = Diaformer::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;

    let mut metrics: Option<BufWriter<File>> = match &args.metrics {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let report = fit(
        &mut model,
        &train,
        (!valid.is_empty()).then_some(valid.as_slice()),
        &vocab,
        &cfg.train,
        &cfg.inference,
        metrics.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Checkpoint::new(model, vocab).save(&args.out)?;
    eprintln!(
        "trained {} epochs{}; checkpoint written to {}",
        report.history.len(),
        report.best_epoch.map(|e| format!(", kept epoch {e}")).unwrap_or_default(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<String> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let records = load_records(&args.data, args.allow_empty_explicit)?;
    let records = ckpt.vocab.encode_all(&records)?;
    let cfg = args.thresholds.apply(InferenceConfig::default());
    let metrics = evaluate(&ckpt.model, &ckpt.vocab, &records, &cfg)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(json)
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => GeneratorSpec::load(p)?,
        None => GeneratorSpec::planted_default(),
    };
    if let Some(n) = args.n_records {
        spec.n_records = n;
    }
    let seed = args.seed.unwrap_or(spec.seed);
    let mut records = generate_synthetic(&spec, seed)?;
    if let (Some(k), Some(test_out)) = (args.test_count, &args.test_out) {
        if k > records.len() {
            bail!("--test-count {k} exceeds {} records", records.len());
        }
        let test = records.split_off(records.len() - k);
        save_dataset(test_out, &test)?;
    }
    save_dataset(&args.out, &records)?;
    Ok(())
}

/// Returns the largest relative error found.
pub fn gradcheck(args: &GradcheckArgs) -> Result<f64> {
    let vocab = SymptomVocab::from_names(
        (0..8).map(|i| format!("s{i}")).collect(),
        (0..3).map(|i| format!("d{i}")).collect(),
    );
    let mut cfg = ModelConfig::small(&vocab, args.layers, args.hidden, args.heads);
    cfg.dropout = 0.0;
    let model = Diaformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let record = diaformer::data::EncodedRecord {
        explicit: vec![(0, true), (1, false)],
        implicit: vec![(2, true), (3, false), (4, true)],
        disease: 1,
    };
    let seq = build_input(
        &record,
        &[2, 0, 1],
        &[vec![1, 2, 0], vec![0, 2, 1]],
        LabelMode::Synchronous,
        &vocab,
    )?;
    let mut store = model.params().clone();
    let report = grad_check(&mut store, |g, st| {
        let out = model.forward_with(g, st, &[&seq.input], None).expect("forward");
        Ok(model.loss(g, &out, &[&seq]).expect("loss").total)
    })?;
    Ok(report.max_rel_error as f64)
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let cfg = args.thresholds.apply(InferenceConfig::default());
    cfg.validate()?;
    let state = AppState::new(ckpt.model, ckpt.vocab, cfg, Duration::from_secs(args.ttl_secs));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(state, &args.bind))
}
