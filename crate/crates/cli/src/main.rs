use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use srm::bench::{self, BenchOptions, DecodeMode};
use srm::checkpoint;
use srm::equivalence;
use srm::model::GenerateOptions;
use srm::par;
use srm::rlvr::arithmetic::{arithmetic_questions, STOP_TOKEN};
use srm::rlvr::grpo::{grpo_train_step, mean_reward, GrpoConfig};
use srm::rlvr::passk::pass_at_k;
use srm::rlvr::verifier::{CommandVerifier, ExactMatch, Verifier};
use srm::tokenizer;
use srm::train::{copy_accuracy, copy_task_batch, train_loop, DataSource, OptimizerConfig, OptimizerState, RunConfig, RunOutputs};
use srm::{ModelParams, SamplerSpec, SrmConfig, SrmError};

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "srm", version, about = "Structured recurrent mixer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run file.
    Train(TrainArgs),
    /// Sample continuations of a prompt.
    Generate(GenerateArgs),
    /// Measure decode throughput and latency per batch size.
    Bench(BenchArgs),
    /// Compare parallel and recurrent logits over a grid of configurations.
    CheckEquivalence(EquivalenceArgs),
    /// Fine-tune on toy arithmetic with GRPO.
    Grpo(GrpoArgs),
    /// Unbiased pass@k from n samples with c correct.
    Passk(PasskArgs),
    /// Parameter count, cache size and compression capacity of a config.
    Inspect(InspectArgs),
}

/// A checkpoint, or a config to initialize from `--seed`.
#[derive(Args)]
struct ModelSource {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelSource {
    fn load(&self) -> anyhow::Result<ModelParams<f32>> {
        match (&self.checkpoint, &self.config) {
            (Some(path), _) => checkpoint::load(path).with_context(|| format!("loading {}", path.display())),
            (None, Some(path)) => Ok(ModelParams::init(&read_model_config(path)?, self.seed)?),
            (None, None) => Err(SrmError::Config {
                field: "--checkpoint".into(),
                reason: "pass --checkpoint or --config".into(),
            }
            .into()),
        }
    }

    fn model_config(&self) -> anyhow::Result<SrmConfig> {
        match (&self.checkpoint, &self.config) {
            (Some(path), _) => Ok(checkpoint::load::<f32>(path)?.config),
            (None, Some(path)) => read_model_config(path),
            (None, None) => Ok(self.load()?.config),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Where to save the final parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON lines of per-step metrics.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingArgs {
    /// Zero selects greedy decoding.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
}

impl SamplingArgs {
    fn spec(&self) -> anyhow::Result<SamplerSpec> {
        Ok(SamplerSpec::new(self.temperature, self.top_p)?)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Samples drawn for the prompt.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Logits,
    Argmax,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    batch: Vec<usize>,
    /// Timed decode steps per batch size.
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Skip batch sizes whose caches exceed this many bytes.
    #[arg(long)]
    memory_budget: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GrpoArgs {
    /// Starting parameters, also the frozen reference for the KL term.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to save the fine-tuned parameters.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    steps: u64,
    #[arg(long, default_value_t = 9)]
    max_operand: u32,
    #[arg(long, default_value_t = 4)]
    questions_per_step: usize,
    /// Training batch after balanced resampling.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    group: usize,
    #[arg(long, default_value_t = 4)]
    max_new: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value_t = 0.04)]
    beta: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// External verifier; receives the question id as its last argument and
    /// the completion on stdin, and prints 1 or 0.
    #[arg(long)]
    verifier_cmd: Option<PathBuf>,
    #[arg(long = "verifier-arg")]
    verifier_args: Vec<String>,
    /// JSON lines of per-step reports.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PasskArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    c: usize,
    #[arg(long)]
    k: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    bytes_per_scalar: usize,
    #[arg(long, default_value_t = 2.0)]
    bytes_per_param: f64,
    #[arg(long, default_value_t = 0.5)]
    tokens_per_byte: f64,
    #[arg(long, default_value_t = 14.8)]
    compression_ratio: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A check ran to completion and did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn read_model_config(path: &Path) -> anyhow::Result<SrmConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::model_from_toml_str(&text).with_context(|| format!("in {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut run = RunConfig::from_toml_str(&text).with_context(|| format!("in {}", args.config.display()))?;
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    if let Some(b) = args.batch {
        run.train.batch_size = b;
    }
    if let Some(s) = args.steps {
        run.train.steps = s;
    }
    let data = run.data_source()?;
    let params = ModelParams::<f32>::init(&run.model, run.train.seed)?;
    let outputs = RunOutputs {
        metrics: args.metrics.clone(),
        checkpoint: args.checkpoint.clone(),
    };
    let held_out = match &data {
        DataSource::Copy(spec) => Some((spec.clone(), copy_task_batch(spec, 64, run.train.seed ^ 0xe7a1))),
        _ => None,
    };
    let outcome = train_loop(params, &data, &run.train, &outputs, |step, m| {
        let Some((_, batch)) = &held_out else {
            return Ok(f64::NAN);
        };
        let (correct, total) = copy_accuracy(&m.forward_parallel(&batch.tokens)?, batch);
        let acc = correct as f64 / total as f64;
        eprintln!("step {step}: copy accuracy {acc:.4}");
        Ok(acc)
    })?;
    let Some(last) = outcome.records.last() else {
        println!("no steps run");
        return Ok(());
    };
    println!("step {} loss {:.4} accuracy {:.4}", last.step, last.loss, last.accuracy);
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "config": run,
                "final": last,
            }),
        )?;
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let model = args.model.load()?;
    let mut prompt = vec![tokenizer::BOS];
    prompt.extend(tokenizer::encode(&args.prompt));
    let prompts = vec![prompt; args.batch];
    let opts = GenerateOptions::new(args.max_new, args.sampling.spec()?, args.model.seed);
    let gens = model.generate(&prompts, &opts)?;
    let mut rows = Vec::new();
    for (i, g) in gens.iter().enumerate() {
        let text = tokenizer::decode(&g.tokens);
        println!("{i}\t{text:?}");
        rows.push(json!({ "index": i, "text": text, "tokens": g.tokens, "logprobs": g.logprobs }));
    }
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "config": model.config,
                "prompt": args.prompt,
                "seed": args.model.seed,
                "samples": rows,
            }),
        )?;
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> anyhow::Result<()> {
    if !par::set_workers(args.workers) {
        eprintln!("warning: worker pool already sized, running with {}", par::workers());
    }
    let model = args.model.load()?;
    let modes = match args.mode {
        ModeArg::Logits => vec![DecodeMode::LogitsOnly],
        ModeArg::Argmax => vec![DecodeMode::Argmax],
        ModeArg::Both => vec![DecodeMode::LogitsOnly, DecodeMode::Argmax],
    };
    let opts = BenchOptions {
        batch_sizes: args.batch.clone(),
        gen_len: args.max_new,
        modes,
        memory_budget: args.memory_budget,
    };
    let reports = bench::bench_decode(&model, &opts)?;
    println!("{:>6} {:>12} {:>12} {:>10} {:>10} {:>14}", "batch", "mode", "tok/s", "p50 ms", "p95 ms", "cache B/sample");
    for r in &reports {
        let mode = match r.mode {
            DecodeMode::LogitsOnly => "logits-only",
            DecodeMode::Argmax => "+argmax",
        };
        if r.allocation_failed {
            println!("{:>6} {:>12} {:>12}", r.batch_size, mode, "no memory");
            continue;
        }
        println!(
            "{:>6} {:>12} {:>12.1} {:>10.3} {:>10.3} {:>14}",
            r.batch_size, mode, r.tokens_per_second, r.p50_step_ms, r.p95_step_ms, r.cache_bytes_per_sample
        );
    }
    // the first batch that fit, scanning downward, bounds concurrency
    let ceiling = reports.iter().filter(|r| !r.allocation_failed).map(|r| r.batch_size).max();
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({
                "schema_version": bench::REPORT_SCHEMA_VERSION,
                "concurrency_ceiling": ceiling,
                "rows": reports,
            }),
        )?;
    }
    Ok(())
}

fn check_equivalence(args: EquivalenceArgs) -> anyhow::Result<()> {
    let cases = equivalence::default_sweep(args.seed);
    let report = equivalence::run_sweep(&cases)?;
    println!("configs checked: {}", report.cases.len());
    println!("max |parallel - recurrent| 32-bit cache: {:.3e} (tolerance {:.0e})", report.max_diff_full, report.tolerance_full);
    println!("max |parallel - recurrent| 16-bit cache: {:.3e} (tolerance {:.0e})", report.max_diff_half, report.tolerance_half);
    if let Some(path) = &args.report {
        let mut value = serde_json::to_value(&report)?;
        value["schema_version"] = json!(REPORT_SCHEMA_VERSION);
        value["seed"] = json!(args.seed);
        write_json(path, &value)?;
    }
    if !report.passed() {
        return Err(CheckFailed("parallel and recurrent forms disagree beyond tolerance".into()).into());
    }
    Ok(())
}

fn grpo(args: GrpoArgs) -> anyhow::Result<()> {
    let mut params: ModelParams<f32> = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let reference = params.clone();
    let questions = arithmetic_questions(args.max_operand);
    let verifier: Box<dyn Verifier> = match &args.verifier_cmd {
        Some(program) => Box::new(CommandVerifier {
            program: program.clone(),
            args: args.verifier_args.clone(),
        }),
        None => Box::new(ExactMatch),
    };
    let cfg = GrpoConfig {
        group_size: args.group,
        batch: args.batch,
        beta: args.beta,
        sampler: args.sampling.spec()?,
        max_new: args.max_new,
        stop_token: Some(STOP_TOKEN),
        seed: args.seed,
        optimizer: OptimizerConfig {
            lr: args.lr,
            ..GrpoConfig::default().optimizer
        },
    };
    let mut log = match &args.report {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut opt = OptimizerState::new(&params, cfg.optimizer.clone());
    let per_step = args.questions_per_step.clamp(1, questions.len());
    for step in 0..args.steps {
        let start = step as usize * per_step;
        let batch: Vec<_> = (0..per_step).map(|i| questions[(start + i) % questions.len()].clone()).collect();
        let r = grpo_train_step(&mut params, &reference, &mut opt, &batch, verifier.as_ref(), &cfg, step)?;
        eprintln!("step {}: reward {:.3} kl {:.5} pass@1 {:.3}", step, r.pool_reward, r.kl, r.pass_at_1);
        if let Some(w) = log.as_mut() {
            let mut v = serde_json::to_value(&r)?;
            v["schema_version"] = json!(REPORT_SCHEMA_VERSION);
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")?;
        }
    }
    let reward = mean_reward(&params, &questions, verifier.as_ref(), &cfg, cfg.group_size, args.seed ^ 0xe7a1)?;
    println!("mean reward {reward:.4}");
    if let Some(path) = &args.out {
        checkpoint::save(&params, path)?;
    }
    Ok(())
}

fn passk(args: PasskArgs) -> anyhow::Result<()> {
    // every input comes from flags, so a bad triple is a usage error
    let p = pass_at_k(args.n, args.c, args.k).map_err(|e| SrmError::Config {
        field: "--k".into(),
        reason: e.to_string(),
    })?;
    println!("{p:.6}");
    Ok(())
}

fn inspect(args: InspectArgs) -> anyhow::Result<()> {
    let cfg = args.model.model_config()?;
    let bytes = bench::cache_bytes(&cfg, args.batch, args.bytes_per_scalar);
    let per_sample = bench::cache_bytes(&cfg, 1, args.bytes_per_scalar).srm;
    let capacity = bench::compression_capacity(cfg.d_model, args.bytes_per_param, args.tokens_per_byte, args.compression_ratio)?;
    println!("parameters: {}", grouped(cfg.param_count() as u64));
    println!("cache scalars per sample: {}", grouped(cfg.cache_scalars_per_sample() as u64));
    println!("cache bytes per sample: {}", grouped(per_sample));
    println!("cache bytes for batch {}: {}", args.batch, grouped(bytes.srm));
    println!("attention cache bytes for batch {} at n_ctx {}: {}", args.batch, cfg.n_ctx, grouped(bytes.attention));
    println!("compression capacity (tokens): {}", grouped(capacity));
    if let Some(path) = &args.report {
        write_json(
            path,
            &json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "config": cfg,
                "parameters": cfg.param_count(),
                "cache_bytes_per_sample": per_sample,
                "cache_bytes": bytes.srm,
                "attention_cache_bytes": bytes.attention,
                "compression_capacity": capacity,
            }),
        )?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<SrmError>()) {
        Some(SrmError::Config { .. }) => 1,
        _ => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Bench(a) => run_bench(a),
        Command::CheckEquivalence(a) => check_equivalence(a),
        Command::Grpo(a) => {
            if a.group == 0 || a.batch == 0 {
                bail!(SrmError::Config {
                    field: "--group".into(),
                    reason: "group and batch must be positive".into(),
                });
            }
            grpo(a)
        }
        Command::Passk(a) => passk(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
