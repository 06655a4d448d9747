//! Run configuration and the end-to-end steps the CLI wires together:
//! dataset build, reference fitting, preference training, evaluation and
//! hyperparameter sweeps. Every report carries the resolved config and a
//! content hash of its inputs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::augment::{build_triplets, AugmentConfig, AugmentReport, GeneratorClient, HttpGenerator, LanguagePack};
use crate::corpus::{CorpusError, PairRecord};
use crate::dialogue::{ActionKind, Trajectory};
use crate::evaluation::{evaluate_cases, build_eval_cases, EvalCase, EvalError, Metric, MetricsReport};
use crate::objective::LossConfig;
use crate::pairing::{build_pairs, BuildReport, CompositionConfig, PairingError};
use crate::policy::{sft_fit, sft_fit_examples, PolicyError, StateFeatures, ToyPolicy};
use crate::synth::{self, SeedCorpusConfig, SftCorpusConfig};
use crate::training::{split_train_val, train_dpo_with, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Pairing(_) => "pairing",
            PipelineError::Policy(_) => "policy",
            PipelineError::Train(_) => "training",
            PipelineError::Eval(_) => "evaluation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/mini_corpus.json".into(),
            dataset: "out/dataset.jsonl".into(),
            checkpoints: "out/checkpoints".into(),
            reports: "out/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub endpoint: String,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl GeneratorConfig {
    /// The bearer token, if any, is read from [`crate::augment::GENERATOR_TOKEN_ENV`].
    pub fn client(&self) -> HttpGenerator {
        HttpGenerator::new(self.endpoint.clone(), Duration::from_secs(self.timeout_secs), self.retries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seeds: SeedCorpusConfig,
    pub sft: SftCorpusConfig,
    pub benchmark: SeedCorpusConfig,
    /// Seeds behind the tool-free chat prior used when SFT is skipped.
    pub chat: SeedCorpusConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seeds: SeedCorpusConfig::default(),
            sft: SftCorpusConfig::default(),
            benchmark: synth::default_benchmark_config(),
            chat: SeedCorpusConfig {
                seed: 42,
                n_easy: 300,
                n_hard: 300,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub composition: CompositionConfig,
    pub augment: AugmentConfig,
    pub sft: SftConfig,
    pub train: TrainConfig<f64>,
    pub generator: Option<GeneratorConfig>,
    pub synth: SynthConfig,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: Paths::default(),
            composition: CompositionConfig::default(),
            augment: AugmentConfig::default(),
            sft: SftConfig::default(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            generator: None,
            synth: SynthConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// `"default"` or a JSON file; missing keys take defaults.
    pub fn load(spec: &str) -> Result<Self, PipelineError> {
        if spec == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(spec).map_err(|e| PipelineError::Io {
            path: spec.into(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let p = &self.paths;
        let all = [&p.corpus, &p.dataset, &p.checkpoints, &p.reports];
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(PipelineError::Config(format!("path {} is used twice", a.display())));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Git blob id of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Wraps a report body with its provenance.
pub fn with_provenance(kind: &str, config: &Value, inputs: &BTreeMap<String, String>, body: Value) -> Value {
    json!({
        "report": kind,
        "config": config,
        "inputs": inputs,
        "result": body,
    })
}

pub fn to_pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<PairRecord>,
    pub augment: AugmentReport,
    pub build: BuildReport,
}

pub fn build_dataset(seeds: &[Trajectory], cfg: &RunConfig, strict: bool) -> Result<Dataset, PipelineError> {
    let lang = LanguagePack::default();
    let client = cfg.generator.as_ref().map(GeneratorConfig::client);
    let generator = client.as_ref().map(|c| c as &dyn GeneratorClient);
    let (triplets, augment) = build_triplets(seeds, &cfg.augment, &lang, generator);
    let (pairs, build) = build_pairs(&triplets, &cfg.composition, cfg.seed, strict, &lang)?;
    Ok(Dataset { pairs, augment, build })
}

pub fn fit_reference(sft_corpus: &[Trajectory], cfg: &RunConfig) -> Result<ToyPolicy<f64>, PipelineError> {
    Ok(sft_fit(sft_corpus, cfg.sft.epochs, cfg.sft.lr, None)?)
}

/// Starting point without supervised tool-use data: a fit of the chat prior.
pub fn chat_base(cfg: &RunConfig) -> Result<ToyPolicy<f64>, PipelineError> {
    let examples: Vec<(StateFeatures, ActionKind)> = synth::chat_examples(&cfg.synth.chat);
    Ok(sft_fit_examples(&examples, cfg.sft.epochs, cfg.sft.lr, None)?)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub policy: ToyPolicy<f64>,
    pub history: TrainHistory,
    pub checkpoints: Vec<(usize, ToyPolicy<f64>)>,
}

/// Split, then preference-train `init` against `reference` with `loss`.
pub fn train(
    pairs: &[PairRecord],
    init: &ToyPolicy<f64>,
    reference: &ToyPolicy<f64>,
    train_cfg: &TrainConfig<f64>,
    checkpoint_every: usize,
) -> Result<Trained, PipelineError> {
    let (train, val) = split_train_val(pairs, train_cfg.val_fraction, train_cfg.seed)?;
    let mut checkpoints = Vec::new();
    let (policy, history) = train_dpo_with(init, reference, &train, &val, train_cfg, |epoch, p| {
        if checkpoint_every > 0 && epoch % checkpoint_every == 0 {
            checkpoints.push((epoch, p.clone()));
        }
    })?;
    Ok(Trained {
        policy,
        history,
        checkpoints,
    })
}

pub fn variant_config(base: &TrainConfig<f64>, loss: LossConfig<f64>) -> TrainConfig<f64> {
    TrainConfig { loss, ..base.clone() }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Beta,
    Gamma,
    Rho,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: Axis,
    pub value: f64,
    pub loss: LossConfig<f64>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Pairs of consecutive ρ points where Call accuracy went up.
    pub fn rho_call_increases(&self) -> Vec<(f64, f64, f64, f64)> {
        let rho: Vec<&SweepPoint> = self.points.iter().filter(|p| p.axis == Axis::Rho).collect();
        rho.windows(2)
            .filter_map(|w| {
                let (a, b) = (w[0].report.accuracy(Metric::Call), w[1].report.accuracy(Metric::Call));
                (b > a).then_some((w[0].value, w[1].value, a, b))
            })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let points: Vec<Value> = self
            .points
            .iter()
            .map(|p| {
                json!({
                    "axis": p.axis,
                    "value": p.value,
                    "loss": p.loss,
                    "metrics": p.report.to_json(),
                })
            })
            .collect();
        let increases = self.rho_call_increases();
        let has_rho = self.points.iter().any(|p| p.axis == Axis::Rho);
        let mut out = json!({ "points": points });
        if has_rho {
            out["rho_call_non_increasing"] = json!(increases.is_empty());
            if !increases.is_empty() {
                out["rho_call_deviation"] = json!(increases
                    .iter()
                    .map(|(r0, r1, a, b)| format!("Call rose from {a:.4} at rho={r0} to {b:.4} at rho={r1}"))
                    .collect::<Vec<_>>());
            }
        }
        out
    }
}

/// One-at-a-time sweep: each axis is varied over its values with the
/// other hyperparameters at `base`.
pub fn sweep(
    pairs: &[PairRecord],
    reference: &ToyPolicy<f64>,
    cases: &[EvalCase],
    base: &TrainConfig<f64>,
    axes: &[(Axis, Vec<f64>)],
) -> Result<SweepResult, PipelineError> {
    let (train_set, val) = split_train_val(pairs, base.val_fraction, base.seed)?;
    let mut points = Vec::new();
    for (axis, values) in axes {
        for &value in values {
            let mut loss = base.loss;
            match axis {
                Axis::Beta => loss.beta = value,
                Axis::Gamma => loss.gamma = value,
                Axis::Rho => loss.rho = value,
            }
            let cfg = variant_config(base, loss);
            let (policy, _) = train_dpo_with(reference, reference, &train_set, &val, &cfg, |_, _| {})?;
            points.push(SweepPoint {
                axis: *axis,
                value,
                loss,
                report: evaluate_cases(&policy, cases)?,
            });
        }
    }
    Ok(SweepResult { points })
}

pub fn eval_cases(benchmark: &[Trajectory]) -> Result<Vec<EvalCase>, PipelineError> {
    Ok(build_eval_cases(benchmark)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(content_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(content_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.composition, CompositionConfig::default());

        let mut dup = RunConfig::default();
        dup.paths.reports = dup.paths.dataset.clone();
        assert!(matches!(dup.validate(), Err(PipelineError::Config(_))));
    }
}
