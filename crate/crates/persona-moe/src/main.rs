//! Command-line surface: dataset synthesis, staged training, inference
//! with router-weight inspection, and evaluation reports.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use persona_moe::eval;
use persona_moe::lm::{DecodeMode, DecodeParams};
use persona_moe::router::PersonaEncoder;
use persona_moe::synth::{self, corpus, DeterministicBackend, GeneratorBackend, HttpBackend, HttpConfig};
use persona_moe::train::data::split_train_val;
use persona_moe::train::pipeline::{self, ModelState};
use persona_moe::train::{run_full, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "persona-moe",
    version,
    about = "Trait-adaptive language model: synthesis, staged training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a trait-labeled training corpus.
    Synthesize(SynthesizeArgs),
    /// Run one training stage or the full pipeline.
    Train(TrainArgs),
    /// Answer a query from a checkpoint, optionally showing router weights.
    Infer(InferArgs),
    /// Write an evaluation report from a checkpoint and a labeled dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Hermetic rule-based generator (no network).
    Synthetic,
    /// JSON completion endpoint; API key read from an environment variable.
    Http,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// Query source: a text file with one query per line, or `builtin:N`.
    #[arg(long)]
    queries: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path for accepted records.
    #[arg(long)]
    out: PathBuf,
    /// Output JSON path for acceptance/rejection counts.
    #[arg(long)]
    stats: PathBuf,
    /// HTTP backend: completion endpoint URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// HTTP backend: model identifier sent with each request.
    #[arg(long)]
    model: Option<String>,
    /// HTTP backend: NAME of the environment variable holding the API key.
    /// The key itself is never persisted.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// One of: 1, 2, 3, all.
    #[arg(long)]
    stage: String,
    /// Training records (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// TOML hyperparameter file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to resume from when running a single stage. Defaults to
    /// the previous stage's checkpoint inside --out.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Query text, or `-` to read the query from stdin.
    #[arg(long)]
    query: String,
    /// Print the ten router weights in canonical pole order.
    #[arg(long)]
    show_weights: bool,
    /// Deterministic decoding (the default).
    #[arg(long, conflicts_with_all = ["temp", "seed"])]
    greedy: bool,
    /// Sampling temperature; enables stochastic decoding.
    #[arg(long)]
    temp: Option<f64>,
    /// Sampling seed (requires --temp).
    #[arg(long, requires = "temp")]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(subcommand)]
    which: EvalCmd,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Routing accuracy and weight-mass statistics over labeled records.
    Route(EvalCommon),
    /// Paired encoder probe on single-pole records (trained vs untrained).
    Probe(EvalProbe),
    /// Marker expression rates over labeled responses.
    Traits(EvalCommon),
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output JSON report path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalProbe {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synthesize(a) => run_synthesize(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::Eval(a) => match a.which {
            EvalCmd::Route(c) => run_eval_route(c),
            EvalCmd::Probe(p) => run_eval_probe(p),
            EvalCmd::Traits(c) => run_eval_traits(c),
        },
    }
}

fn load_queries(spec: &str, seed: u64) -> Result<Vec<String>> {
    if let Some(n) = spec.strip_prefix("builtin:") {
        let n: usize = n.parse().with_context(|| format!("bad builtin count {n:?}"))?;
        if n == 0 {
            bail!("builtin query count must be positive");
        }
        return Ok(corpus::builtin_queries(n, seed));
    }
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading queries from {spec}"))?;
    let queries: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if queries.is_empty() {
        bail!("query file {spec} contains no queries");
    }
    Ok(queries)
}

fn run_synthesize(a: SynthesizeArgs) -> Result<()> {
    let queries = load_queries(&a.queries, a.seed)?;
    let backend: Box<dyn GeneratorBackend> = match a.backend {
        BackendKind::Synthetic => Box::new(DeterministicBackend),
        BackendKind::Http => {
            let mut cfg = HttpConfig::default();
            if let Some(e) = a.endpoint {
                cfg.endpoint = e;
            }
            if let Some(m) = a.model {
                cfg.model = m;
            }
            cfg.api_key_env = a.api_key_env;
            cfg.timeout_secs = a.timeout_secs;
            cfg.max_retries = a.max_retries;
            Box::new(HttpBackend::new(cfg)?)
        }
    };
    let (records, stats) = synth::synthesize_dataset(backend.as_ref(), &queries, a.seed)?;
    synth::write_jsonl(&records, &a.out)?;
    synth::write_stats(&stats, &a.stats)?;
    println!(
        "synthesized {} records from {} queries ({} rejected) -> {}",
        stats.accepted,
        stats.input,
        stats.rejected_total(),
        a.out.display()
    );
    Ok(())
}

fn sha256_hex(data: &str) -> String {
    hex::encode(Sha256::digest(data.as_bytes()))
}

fn config_digest(config: &TrainingConfig) -> Result<String> {
    Ok(sha256_hex(&config.to_toml_string()?))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainingConfig::from_path(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let records = synth::read_jsonl(&a.data)?;

    match a.stage.as_str() {
        "all" => {
            let (_state, report) = run_full(&records, &config, Some(&a.out))?;
            println!(
                "trained all stages in {:.1}s: stage2 routing {:.3}, stage3 routing {:.3} -> {}",
                report.wall_seconds,
                report.stage2.routing_accuracy,
                report.stage3.routing_accuracy,
                a.out.display()
            );
            Ok(())
        }
        "1" | "2" | "3" => run_single_stage(&a, &config, &records),
        other => bail!("unknown stage {other:?}; expected 1, 2, 3, or all"),
    }
}

fn run_single_stage(a: &TrainArgs, config: &TrainingConfig, records: &[synth::Record]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let stage: u8 = a.stage.parse().expect("caller matched 1|2|3");
    std::fs::create_dir_all(&a.out)?;

    // Stage 1 without --from starts fresh: base warm-up, then experts.
    let fresh_start = stage == 1 && a.from.is_none();
    let (mut state, resumed_from) = if fresh_start {
        (ModelState::init(config)?, None)
    } else {
        let (expected_tag, default_dir) = match stage {
            1 => ("prep", a.out.join("ckpt-prep")),
            2 => ("stage1", a.out.join("ckpt-stage1")),
            _ => ("stage2", a.out.join("ckpt-stage2")),
        };
        let dir = a.from.clone().unwrap_or(default_dir);
        let (state, tag, _) = ModelState::load(&dir)
            .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
        if tag != expected_tag {
            bail!(
                "stage {stage} must resume from a {expected_tag:?} checkpoint, found {tag:?} in {}",
                dir.display()
            );
        }
        (state, Some(dir))
    };

    // The checkpoint's config fixes the architecture; a CLI config may only
    // retune the stage hyperparameters.
    if resumed_from.is_some() {
        if state.config.model != config.model
            || state.config.encoder != config.encoder
            || state.config.lora != config.lora
            || state.config.router != config.router
        {
            bail!("config architecture sections do not match the checkpoint; drop them or retrain from scratch");
        }
        state.config = config.clone();
    }

    let (train, val) =
        split_train_val(records, state.config.val_fraction, state.config.seed.wrapping_add(5));
    let mut metrics = Vec::new();
    match stage {
        1 => {
            if fresh_start {
                pipeline::run_prep(&mut state, &train, &mut metrics)?;
                state.save(&a.out.join("ckpt-prep"), "prep", state.config.prep.steps)?;
            }
            let heldout = pipeline::run_stage1(&mut state, &train, &val, &mut metrics)?;
            state.save(&a.out.join("ckpt-stage1"), "stage1", state.config.stage1.steps)?;
            let drops: Vec<String> = heldout
                .iter()
                .map(|h| format!("e{} {:.3}->{:.3}", h.expert, h.initial, h.final_loss))
                .collect();
            println!("stage1 heldout LM loss per expert: {}", drops.join(", "));
        }
        2 => {
            let out = pipeline::run_stage2(&mut state, &train, &val, &mut metrics)?;
            state.save(&a.out.join("ckpt-stage2"), "stage2", state.config.stage2.steps)?;
            println!("stage2 routing accuracy {:.3}, heldout LM {:.3}", out.routing_accuracy, out.heldout_lm);
        }
        _ => {
            let out = pipeline::run_stage3(&mut state, &train, &val, &mut metrics)?;
            state.save(&a.out.join("ckpt-stage3"), "stage3", state.config.stage3.steps)?;
            println!("stage3 routing accuracy {:.3}, heldout LM {:.3}", out.routing_accuracy, out.heldout_lm);
        }
    }
    std::fs::write(
        a.out.join(format!("resolved_config-stage{stage}.toml")),
        state.config.to_toml_string()?,
    )?;
    pipeline::write_metrics(&a.out.join(format!("metrics-stage{stage}.jsonl")), &metrics)?;
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let query = if a.query == "-" {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        let q = buf.trim().to_string();
        if q.is_empty() {
            bail!("stdin query is empty");
        }
        q
    } else {
        a.query.clone()
    };
    let (state, _, _) = ModelState::load(&a.ckpt)
        .with_context(|| format!("loading checkpoint from {}", a.ckpt.display()))?;
    let params = DecodeParams {
        mode: match a.temp {
            Some(t) => DecodeMode::Sample {
                temperature: t,
                seed: a.seed.unwrap_or(0),
            },
            None => DecodeMode::Greedy,
        },
        max_new_tokens: a.max_new_tokens,
    };
    let (response, w) = eval::infer(&state, &query, &params)?;
    println!("{response}");
    if a.show_weights {
        println!("router weights:");
        print!("{}", eval::format_weights(&w));
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct Report<T: serde::Serialize> {
    config_digest: String,
    #[serde(flatten)]
    result: T,
}

fn write_report<T: serde::Serialize>(path: &Path, config: &TrainingConfig, result: T) -> Result<()> {
    let report = Report {
        config_digest: config_digest(config)?,
        result,
    };
    std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn load_state_and_data(common: &EvalCommon) -> Result<(ModelState, Vec<synth::Record>)> {
    let (state, _, _) = ModelState::load(&common.ckpt)
        .with_context(|| format!("loading checkpoint from {}", common.ckpt.display()))?;
    let records = synth::read_jsonl(&common.data)?;
    Ok((state, records))
}

fn run_eval_route(c: EvalCommon) -> Result<()> {
    let (state, records) = load_state_and_data(&c)?;
    let result = eval::eval_routing(&state, &records)?;
    println!(
        "routing accuracy {:.3} over {} records ({} excluded), positive mass {:.3}",
        result.accuracy, result.records, result.excluded, result.mean_positive_mass
    );
    write_report(&c.report, &state.config, result)
}

fn run_eval_probe(p: EvalProbe) -> Result<()> {
    let (state, records) = load_state_and_data(&p.common)?;
    // Single-pole records form the 10-class probe set; the label is the
    // active pole's index.
    let texts: Vec<(String, usize)> = records
        .iter()
        .filter(|r| r.p.count_active() == 1)
        .map(|r| (r.query.clone(), r.p.poles()[0].index()))
        .collect();
    let baseline = PersonaEncoder::init(state.config.encoder.clone(), state.config.seed.wrapping_add(2))?;
    let result = eval::probe_eval(
        &state.encoder,
        &baseline,
        &texts,
        persona_moe::pole::NUM_POLES,
        p.folds,
        state.config.seed,
    )?;
    println!(
        "probe accuracy: trained {:.3} vs untrained {:.3} over {} folds",
        result.trained_accuracy, result.baseline_accuracy, result.folds
    );
    write_report(&p.common.report, &state.config, result)
}

fn run_eval_traits(c: EvalCommon) -> Result<()> {
    let (state, records) = load_state_and_data(&c)?;
    let pairs: Vec<_> = records.iter().map(|r| (r.p.clone(), r.response.clone())).collect();
    let result = eval::trait_expression_check(&pairs);
    if result.empty {
        eprintln!("warning: no responses to score; report contains an empty matrix");
    } else {
        let rates: Vec<String> = result.active_rates.iter().map(|r| format!("{r:.2}")).collect();
        println!("active-pole marker rates: [{}]", rates.join(", "));
    }
    write_report(&c.report, &state.config, result)
}
