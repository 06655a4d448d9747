//! `diatool` command-line entry point.
//!
//! Every command reads its inputs, writes its artifacts, and prints a JSON
//! report to stdout. Reports carry the resolved config and the git blob
//! hash of each input, never timestamps, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use diatool::augment::{build_triplets, stratify, triplet_to_json, GeneratorClient, LanguagePack};
use diatool::corpus::{parse_corpus, read_pairs, write_corpus, write_pairs, CorpusFormat};
use diatool::dialogue::{classify_query_type, validate_trajectory, Trajectory};
use diatool::evaluation::{evaluate_cases, evaluate_transcripts, parse_transcripts, RuleJudge};
use diatool::objective::{read_log_ratios, score_log_ratios, LossConfig, VARIANTS};
use diatool::pairing::dataset_stats;
use diatool::pipeline::{self, content_hash, to_pretty, with_provenance, Axis, PipelineError, RunConfig};
use diatool::policy::ToyPolicy;
use diatool::synth;
use diatool::training::{gradcheck_random, Optimizer};

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

macro_rules! impl_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind, e.to_string())
            }
        })*
    };
}

impl_from! {
    diatool::corpus::CorpusError => "corpus",
    diatool::pairing::PairingError => "pairing",
    diatool::policy::PolicyError => "policy",
    diatool::training::TrainError => "training",
    diatool::evaluation::EvalError => "evaluation",
    diatool::objective::ExchangeError => "objective",
    diatool::objective::ObjectiveError => "objective",
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "diatool", version, about = "Tool-use preference datasets and turn-weighted preference training")]
struct Cli {
    /// `default` or a JSON config file; missing keys take defaults.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Overrides the run seed (augmentation, pair sampling, training shuffle).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic seed, SFT and benchmark corpora.
    Synth(SynthArgs),
    /// Parse, validate and classify a corpus.
    Ingest(IngestArgs),
    /// Derive Type 2 / Type 3 triplets from Type 1 seeds.
    Augment(AugmentArgs),
    /// Build the preference dataset.
    Pair(PairArgs),
    /// Turn statistics of a dataset.
    Stats(StatsArgs),
    /// Fit the reference policy on a supervised corpus.
    Sft(SftArgs),
    /// Preference-train a policy against a frozen reference.
    DpoTrain(DpoArgs),
    /// Per-turn evaluation of a policy or of transcripts.
    Eval(EvalArgs),
    /// Finite-difference check of the loss gradient.
    Gradcheck(GradcheckArgs),
    /// One-at-a-time sweep over beta, gamma and rho.
    Sweep(SweepArgs),
    /// Score externally computed per-turn log-ratios.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, required_unless_present = "seeds_only")]
    out_dir: Option<PathBuf>,
    /// Seed corpus size overrides.
    #[arg(long)]
    n_easy: Option<usize>,
    #[arg(long)]
    n_hard: Option<usize>,
    /// Write only the seed corpus, to this file.
    #[arg(long)]
    seeds_only: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<CorpusFormat>,
    /// Re-serialize the parsed corpus here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
    /// Fail instead of scaling down when triplets are scarce.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SftArgs {
    #[arg(long, required_unless_present = "chat_prior")]
    corpus: Option<PathBuf>,
    /// Fit the tool-free chat prior instead of a corpus.
    #[arg(long, conflicts_with = "corpus")]
    chat_prior: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DpoArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Frozen reference policy.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Starting policy; defaults to the reference.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Named loss variant; the flags below refine it.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    no_phi: bool,
    #[arg(long)]
    no_psi: bool,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    adam: bool,
    #[arg(long)]
    out: PathBuf,
    /// Directory for history.json, steps.csv and epochs.csv.
    #[arg(long)]
    history_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "transcripts", requires = "benchmark")]
    policy: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// JSONL of `{"gold": record, "predicted": [messages]}` lines.
    #[arg(long, conflicts_with = "policy")]
    transcripts: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 8)]
    max_turns: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
    /// One report per point plus `sweep.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    log_ratios: PathBuf,
    #[arg(long, default_value = "full")]
    variant: String,
    /// Score in single precision.
    #[arg(long)]
    f32: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_format(s: &str) -> std::result::Result<CorpusFormat, String> {
    match s {
        "json" | "json_array" => Ok(CorpusFormat::JsonArray),
        "jsonl" => Ok(CorpusFormat::Jsonl),
        other => Err(format!("unknown format {other:?}; expected json or jsonl")),
    }
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

struct Input {
    text: String,
    hash: String,
}

fn read_input(path: &Path) -> Result<Input> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    let hash = content_hash(text.as_bytes());
    Ok(Input { text, hash })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn format_for(path: &Path) -> CorpusFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => CorpusFormat::JsonArray,
        _ => CorpusFormat::Jsonl,
    }
}

fn read_corpus(path: &Path, format: Option<CorpusFormat>) -> Result<(Vec<Trajectory>, String)> {
    let input = read_input(path)?;
    let format = format.unwrap_or_else(|| CorpusFormat::sniff(&input.text));
    Ok((parse_corpus(&input.text, format)?, input.hash))
}

fn read_policy(path: &Path) -> Result<(ToyPolicy<f64>, String)> {
    let input = read_input(path)?;
    Ok((ToyPolicy::from_json_str(&input.text)?, input.hash))
}

fn inputs<const N: usize>(items: [(&str, &str); N]) -> BTreeMap<String, String> {
    items.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &RunConfig, args: SynthArgs) -> Result<Value> {
    let mut seeds_cfg = cfg.synth.seeds;
    if let Some(n) = args.n_easy {
        seeds_cfg.n_easy = n;
    }
    if let Some(n) = args.n_hard {
        seeds_cfg.n_hard = n;
    }
    let mut outputs = BTreeMap::new();
    let mut put = |path: PathBuf, records: &[Trajectory]| -> Result<()> {
        let text = write_corpus(records, format_for(&path));
        write_file(&path, &text)?;
        outputs.insert(
            path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            json!({"records": records.len(), "hash": content_hash(text.as_bytes())}),
        );
        Ok(())
    };
    let seeds = synth::seed_corpus(&seeds_cfg);
    match args.seeds_only {
        Some(path) => put(path, &seeds)?,
        None => {
            let dir = args.out_dir.unwrap_or_default();
            put(dir.join("seeds.jsonl"), &seeds)?;
            put(dir.join("sft_corpus.jsonl"), &synth::sft_corpus(&cfg.synth.sft))?;
            put(dir.join("benchmark.jsonl"), &synth::benchmark(&cfg.synth.benchmark))?;
        }
    }
    Ok(with_provenance("synth", &cfg.to_json(), &BTreeMap::new(), json!({ "outputs": outputs })))
}

fn cmd_ingest(cfg: &RunConfig, args: IngestArgs) -> Result<Value> {
    let path = args.corpus.unwrap_or_else(|| cfg.paths.corpus.clone());
    let (records, hash) = read_corpus(&path, args.format)?;
    let mut query_types: BTreeMap<String, usize> = BTreeMap::new();
    let mut strata: BTreeMap<String, usize> = BTreeMap::new();
    let mut invalid = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let report = validate_trajectory(r);
        if !report.ok {
            invalid.push(json!({"record": i, "violations": report.violations}));
            continue;
        }
        match classify_query_type(r) {
            Ok(q) => {
                *query_types.entry(format!("{q:?}").to_lowercase()).or_default() += 1;
                if q == diatool::dialogue::QueryType::Type1 {
                    *strata.entry(format!("{:?}", stratify(r)).to_lowercase()).or_default() += 1;
                }
            }
            Err(e) => invalid.push(json!({"record": i, "error": e.to_string()})),
        }
    }
    if let Some(out) = &args.out {
        write_file(out, &write_corpus(&records, format_for(out)))?;
    }
    let body = json!({
        "records": records.len(),
        "valid": records.len() - invalid.len(),
        "query_types": query_types,
        "type1_strata": strata,
        "invalid": invalid,
    });
    Ok(with_provenance("ingest", &cfg.to_json(), &inputs([("corpus", &hash)]), body))
}

fn generator(cfg: &RunConfig) -> Option<diatool::augment::HttpGenerator> {
    cfg.generator.as_ref().map(|g| g.client())
}

fn cmd_augment(cfg: &RunConfig, args: AugmentArgs) -> Result<Value> {
    let path = args.corpus.unwrap_or_else(|| cfg.paths.corpus.clone());
    let (seeds, hash) = read_corpus(&path, None)?;
    let client = generator(cfg);
    let (triplets, report) = build_triplets(
        &seeds,
        &cfg.augment,
        &LanguagePack::default(),
        client.as_ref().map(|c| c as &dyn GeneratorClient),
    );
    let text: String = triplets
        .iter()
        .map(|t| serde_json::to_string(&triplet_to_json(t)).expect("json serializes") + "\n")
        .collect();
    write_file(&args.out, &text)?;
    Ok(with_provenance("augment", &cfg.to_json(), &inputs([("corpus", &hash)]), json!(report)))
}

fn cmd_pair(cfg: &RunConfig, args: PairArgs) -> Result<Value> {
    let corpus = args.corpus.unwrap_or_else(|| cfg.paths.corpus.clone());
    let out = args.out.unwrap_or_else(|| cfg.paths.dataset.clone());
    if out.exists() && !args.force {
        return Err(CliError::new(
            "exists",
            format!("{} already exists; pass --force to overwrite", out.display()),
        ));
    }
    let (seeds, hash) = read_corpus(&corpus, None)?;
    let dataset = pipeline::build_dataset(&seeds, cfg, args.strict)?;
    let text = write_pairs(&dataset.pairs)?;
    write_file(&out, &text)?;
    let body = json!({
        "dataset_hash": content_hash(text.as_bytes()),
        "augment": dataset.augment,
        "build": dataset.build,
    });
    let report = with_provenance("pair", &cfg.to_json(), &inputs([("corpus", &hash)]), body);
    let report_path = args.report.unwrap_or_else(|| cfg.paths.reports.join("pair.json"));
    write_file(&report_path, &to_pretty(&report))?;
    Ok(report)
}

fn cmd_stats(cfg: &RunConfig, args: StatsArgs) -> Result<Value> {
    let path = args.dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
    let input = read_input(&path)?;
    let pairs = read_pairs(&input.text)?;
    let report = with_provenance(
        "stats",
        &cfg.to_json(),
        &inputs([("dataset", &input.hash)]),
        json!({"pairs": pairs.len(), "stats": dataset_stats(&pairs)}),
    );
    if let Some(p) = &args.report {
        write_file(p, &to_pretty(&report))?;
    }
    Ok(report)
}

fn cmd_sft(cfg: &RunConfig, args: SftArgs) -> Result<Value> {
    let (policy, ins) = match args.corpus {
        Some(path) if !args.chat_prior => {
            let (records, hash) = read_corpus(&path, None)?;
            (pipeline::fit_reference(&records, cfg)?, inputs([("corpus", &hash)]))
        }
        _ => (pipeline::chat_base(cfg)?, BTreeMap::new()),
    };
    let text = policy.to_json_string();
    write_file(&args.out, &text)?;
    let body = json!({"policy_hash": content_hash(text.as_bytes()), "chat_prior": args.chat_prior});
    Ok(with_provenance("sft", &cfg.to_json(), &ins, body))
}

fn loss_from_flags(base: LossConfig<f64>, args: &DpoArgs) -> Result<LossConfig<f64>> {
    let mut loss = match &args.variant {
        Some(name) => {
            let v = LossConfig::<f64>::variant(name).ok_or_else(|| {
                CliError::new("config", format!("unknown variant {name:?}; expected one of {VARIANTS:?}"))
            })?;
            LossConfig {
                beta: base.beta,
                gamma: base.gamma,
                rho: if v.rho == 0.0 { 0.0 } else { base.rho },
                ..v
            }
        }
        None => base,
    };
    if args.no_phi {
        loss.use_phi = false;
        loss.use_psi = false;
    }
    if args.no_psi {
        loss.use_psi = false;
    }
    if let Some(v) = args.rho {
        loss.rho = v;
    }
    if let Some(v) = args.beta {
        loss.beta = v;
    }
    if let Some(v) = args.gamma {
        loss.gamma = v;
    }
    loss.validate()?;
    Ok(loss)
}

fn cmd_dpo_train(cfg: &RunConfig, args: DpoArgs) -> Result<Value> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.loss = loss_from_flags(train_cfg.loss, &args)?;
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if args.adam {
        train_cfg.optimizer = Optimizer::adam();
    }
    train_cfg.validate()?;

    let dataset_path = args.dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let dataset = read_input(&dataset_path)?;
    let pairs = read_pairs(&dataset.text)?;
    let (reference, ref_hash) = read_policy(&args.reference)?;
    let (init, init_hash) = match &args.init {
        Some(p) => read_policy(p)?,
        None => (reference.clone(), ref_hash.clone()),
    };
    let every = args.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    let trained = pipeline::train(&pairs, &init, &reference, &train_cfg, every)?;

    let text = trained.policy.to_json_string();
    write_file(&args.out, &text)?;
    let ckpt_dir = args.checkpoints.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone());
    let mut checkpoints = BTreeMap::new();
    for (epoch, p) in &trained.checkpoints {
        let path = ckpt_dir.join(format!("epoch-{epoch:04}.json"));
        let t = p.to_json_string();
        write_file(&path, &t)?;
        checkpoints.insert(epoch.to_string(), content_hash(t.as_bytes()));
    }
    if let Some(dir) = &args.history_dir {
        write_file(&dir.join("history.json"), &trained.history.to_json_string())?;
        write_file(&dir.join("steps.csv"), &trained.history.steps_csv())?;
        write_file(&dir.join("epochs.csv"), &trained.history.epochs_csv())?;
    }
    let mut resolved = cfg.clone();
    resolved.train = train_cfg.clone();
    let body = json!({
        "loss": train_cfg.loss,
        "pairs": pairs.len(),
        "initial_loss": trained.history.initial_loss,
        "final_loss": trained.history.final_loss(),
        "epochs": trained.history.epochs,
        "policy_hash": content_hash(text.as_bytes()),
        "checkpoints": checkpoints,
    });
    let ins = inputs([("dataset", &dataset.hash), ("reference", &ref_hash), ("init", &init_hash)]);
    Ok(with_provenance("dpo-train", &resolved.to_json(), &ins, body))
}

fn cmd_eval(cfg: &RunConfig, args: EvalArgs) -> Result<Value> {
    let (report, ins) = match (&args.transcripts, &args.policy, &args.benchmark) {
        (Some(t), _, _) => {
            let input = read_input(t)?;
            let lines = parse_transcripts(&input.text)?;
            (evaluate_transcripts(&lines, &RuleJudge)?, inputs([("transcripts", &input.hash)]))
        }
        (None, Some(p), Some(b)) => {
            let (policy, policy_hash) = read_policy(p)?;
            let (bench, bench_hash) = read_corpus(b, None)?;
            let cases = pipeline::eval_cases(&bench)?;
            (
                evaluate_cases(&policy, &cases)?,
                inputs([("policy", &policy_hash), ("benchmark", &bench_hash)]),
            )
        }
        _ => return Err(CliError::new("usage", "eval needs --policy with --benchmark, or --transcripts")),
    };
    let out = with_provenance("eval", &cfg.to_json(), &ins, report.to_json());
    if let Some(p) = &args.out {
        write_file(p, &to_pretty(&out))?;
    }
    Ok(out)
}

fn cmd_gradcheck(cfg: &RunConfig, args: GradcheckArgs) -> Result<Value> {
    let summary = gradcheck_random(args.pairs, args.max_turns, args.h, cfg.seed)?;
    if summary.max_rel_error.is_nan() || summary.max_rel_error >= args.tolerance {
        return Err(CliError::new(
            "gradcheck",
            format!(
                "max relative error {:e} on pair {} exceeds {:e}",
                summary.max_rel_error, summary.worst_pair, args.tolerance
            ),
        ));
    }
    let body = json!({"summary": summary, "tolerance": args.tolerance, "max_turns": args.max_turns});
    Ok(with_provenance("gradcheck", &json!({"seed": cfg.seed}), &BTreeMap::new(), body))
}

fn cmd_sweep(cfg: &RunConfig, args: SweepArgs) -> Result<Value> {
    let dataset_path = args.dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let dataset = read_input(&dataset_path)?;
    let pairs = read_pairs(&dataset.text)?;
    let (reference, ref_hash) = read_policy(&args.reference)?;
    let (bench, bench_hash) = read_corpus(&args.benchmark, None)?;
    let cases = pipeline::eval_cases(&bench)?;
    let axes: Vec<(Axis, Vec<f64>)> = [(Axis::Beta, args.beta), (Axis::Gamma, args.gamma), (Axis::Rho, args.rho)]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if axes.is_empty() {
        return Err(CliError::new("usage", "sweep needs at least one of --beta, --gamma, --rho"));
    }
    let result = pipeline::sweep(&pairs, &reference, &cases, &cfg.train, &axes)?;
    let ins = inputs([("dataset", &dataset.hash), ("reference", &ref_hash), ("benchmark", &bench_hash)]);
    let config = cfg.to_json();
    for p in &result.points {
        let name = format!("{}-{}.json", serde_json::to_value(p.axis).expect("axis").as_str().unwrap_or("axis"), p.value);
        let body = json!({"axis": p.axis, "value": p.value, "loss": p.loss, "metrics": p.report.to_json()});
        write_file(&args.out_dir.join(name), &to_pretty(&with_provenance("sweep-point", &config, &ins, body)))?;
    }
    let summary = with_provenance("sweep", &config, &ins, result.to_json());
    write_file(&args.out_dir.join("sweep.json"), &to_pretty(&summary))?;
    Ok(summary)
}

fn cmd_score(cfg: &RunConfig, args: ScoreArgs) -> Result<Value> {
    let input = read_input(&args.log_ratios)?;
    let lines = read_log_ratios(&input.text)?;
    let loss = LossConfig::<f64>::variant(&args.variant)
        .ok_or_else(|| CliError::new("config", format!("unknown variant {:?}", args.variant)))?;
    let scored = if args.f32 {
        score_log_ratios::<f32>(&lines, &loss.cast())?
    } else {
        score_log_ratios::<f64>(&lines, &loss)?
    };
    let text: String = scored
        .iter()
        .map(|s| serde_json::to_string(s).expect("json serializes") + "\n")
        .collect();
    write_file(&args.out, &text)?;
    let mean = scored.iter().map(|s| s.loss).sum::<f64>() / scored.len().max(1) as f64;
    let body = json!({"lines": scored.len(), "mean_loss": mean, "loss": loss, "f32": args.f32});
    Ok(with_provenance("score", &cfg.to_json(), &inputs([("log_ratios", &input.hash)]), body))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.augment.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let report = match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a)?,
        Command::Ingest(a) => cmd_ingest(&cfg, a)?,
        Command::Augment(a) => cmd_augment(&cfg, a)?,
        Command::Pair(a) => cmd_pair(&cfg, a)?,
        Command::Stats(a) => cmd_stats(&cfg, a)?,
        Command::Sft(a) => cmd_sft(&cfg, a)?,
        Command::DpoTrain(a) => cmd_dpo_train(&cfg, a)?,
        Command::Eval(a) => cmd_eval(&cfg, a)?,
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a)?,
        Command::Sweep(a) => cmd_sweep(&cfg, a)?,
        Command::Score(a) => cmd_score(&cfg, a)?,
    };
    print!("{}", to_pretty(&report));
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind, &e.message, 1),
    }
}
