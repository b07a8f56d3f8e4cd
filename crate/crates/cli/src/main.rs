//! `hitl`: generate a synthetic world, collect or simulate feedback, train
//! the reward model and the policy, evaluate, and run the ablations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hitl_core::config::RunConfig;
use hitl_core::corpus::{export_jsonl, read_jsonl, Comparison, Dialogue, HighlightSet, SummaryRecord, SummarySource};
use hitl_core::pipeline::{self, Feedback, FeedbackSource};
use hitl_core::policy::PolicyModel;
use hitl_core::reward_global::GlobalRewardModel;
use hitl_core::synthfeed::{generate_world, summary_id, World};
use hitl_core::textproc::Vocabulary;
use hitl_service::store::{replay, write_export, Export, LogEntry, LOG_FILE};
use hitl_service::{ServiceConfig, Store};
use serde::Serialize;

const WORLD_FILE: &str = "world.json";
const POLICY_FILE: &str = "policy.ckpt";
const REWARD_FILE: &str = "reward_model.ckpt";
const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser, Debug)]
#[command(name = "hitl", version, about = "Human-in-the-loop dialogue summarization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed and every stage seed derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs of this command.
    #[arg(long, global = true, default_value = "runs/latest")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world and its JSONL corpus files.
    GenWorld,
    /// Supervised pretraining of the baseline policy.
    Pretrain(WorldArg),
    /// Train the global reward model on exported or simulated comparisons.
    TrainReward(TrainRewardArgs),
    /// Fine-tune the pretrained policy with PPO.
    TrainPpo(TrainPpoArgs),
    /// Greedy summaries of a split.
    Summarize(SummarizeArgs),
    /// Compare two sets of summaries against references and the hidden oracle.
    Evaluate(EvaluateArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Write the service's accepted submissions as JSONL.
    Export(ExportArgs),
    /// Fine-tune with synthesis, noisy and clean feedback on the same dialogues.
    AblateQuality,
    /// Fine-tune with increasing annotation budgets.
    AblateCount,
}

#[derive(Args, Debug)]
struct WorldArg {
    /// Output directory of `gen-world`.
    #[arg(long)]
    world: PathBuf,
}

#[derive(Args, Debug)]
struct FeedbackArgs {
    /// Directory with `highlights.jsonl` and `comparisons.jsonl` (from `export`).
    #[arg(long, conflicts_with = "source")]
    feedback: Option<PathBuf>,
    /// Simulate feedback of this kind instead.
    #[arg(long, value_enum)]
    source: Option<Source>,
    /// Number of dialogues to annotate when simulating.
    #[arg(long)]
    dialogues: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainRewardArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    feedback: FeedbackArgs,
}

#[derive(Args, Debug)]
struct TrainPpoArgs {
    #[command(flatten)]
    world: WorldArg,
    /// Output directory of `pretrain`.
    #[arg(long)]
    policy: PathBuf,
    /// Output directory of `train-reward`; its feedback is reused for highlights.
    #[arg(long)]
    reward: PathBuf,
    /// Save a policy checkpoint every this many logging windows (0 disables).
    #[arg(long, default_value_t = 5)]
    checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[command(flatten)]
    world: WorldArg,
    /// Directory holding `policy.ckpt` (from `pretrain` or `train-ppo`).
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    world: WorldArg,
    /// Summaries JSONL, or `reference` for the world's references.
    #[arg(long)]
    candidate: String,
    /// Summaries JSONL, or `reference` for the world's references.
    #[arg(long)]
    baseline: String,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Service configuration (TOML); `HITL_SERVICE__*` variables override it.
    #[arg(long)]
    service_config: Option<PathBuf>,
    /// Serve this world's corpus instead of the configured paths.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// The service's data directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Synthesis,
    Noisy,
    Clean,
}

impl From<Source> for FeedbackSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Synthesis => FeedbackSource::Synthesis,
            Source::Noisy => FeedbackSource::Noisy,
            Source::Clean => FeedbackSource::Clean,
        }
    }
}

/// Failure classes mapped onto the exit status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<hitl_core::Error>() {
            return match e {
                hitl_core::Error::Numeric(_) | hitl_core::Error::Grad(_) => 3,
                hitl_core::Error::Config(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(UsageError(format!("config file {} does not exist", p.display())).into());
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    let cfg = cfg.with_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = &cli.common.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let snapshot = cfg.to_toml_string()?;
    std::fs::write(out.join("config.toml"), &snapshot)?;
    log::info!("resolved configuration:\n{snapshot}");

    match cli.command {
        Command::GenWorld => gen_world(&cfg, out),
        Command::Pretrain(a) => pretrain(&cfg, &a, out),
        Command::TrainReward(a) => train_reward(&cfg, &a, out),
        Command::TrainPpo(a) => train_ppo(&cfg, &a, out),
        Command::Summarize(a) => summarize(&cfg, &a, out),
        Command::Evaluate(a) => evaluate(&cfg, &a, out),
        Command::Serve(a) => serve(&a, out),
        Command::Export(a) => export(&a, out),
        Command::AblateQuality => {
            let report = pipeline::ablate_quality(&cfg, |p| log::info!("{} seed {}: {:.4}", p.label, p.seed, p.mean_oracle_reward))?;
            write_json(&out.join("ablate_quality.json"), &report)?;
            print_averages(&report);
            Ok(())
        }
        Command::AblateCount => {
            let report = pipeline::ablate_count(&cfg, |p| log::info!("{} seed {}: {:.4}", p.label, p.seed, p.mean_oracle_reward))?;
            write_json(&out.join("ablate_count.json"), &report)?;
            print_averages(&report);
            println!("non-decreasing: {}", report.is_non_decreasing());
            Ok(())
        }
    }
}

fn print_averages(report: &pipeline::AblationReport) {
    for (label, v) in &report.averages {
        println!("{label}\t{v:.4}");
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn need(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        bail!("missing input {}", path.display())
    }
}

fn load_world(dir: &Path) -> Result<World> {
    let path = need(dir.join(WORLD_FILE))?;
    let file = File::open(&path)?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn load_vocab(world: &World, cfg: &RunConfig) -> Result<Vocabulary> {
    Ok(pipeline::build_vocabulary(world, cfg.vocab_min_freq)?)
}

fn load_policy(dir: &Path, vocab: &Vocabulary, cfg: &RunConfig) -> Result<PolicyModel> {
    let mut model = PolicyModel::new(vocab.len(), cfg.policy.clone())?;
    let path = need(dir.join(POLICY_FILE))?;
    model.load(&path).with_context(|| format!("cannot load {}", path.display()))?;
    Ok(model)
}

fn gen_world(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world = generate_world(&cfg.world)?;
    write_json(&out.join(WORLD_FILE), &world)?;
    export_jsonl(&world.dialogues, out.join("dialogues.jsonl"))?;
    export_jsonl(&world.summaries, out.join("summaries.jsonl"))?;
    write_json(&out.join("facts.json"), &world.facts)?;
    write_json(&out.join("oracle.json"), &world.oracle)?;
    println!("{} dialogues, {} summaries", world.dialogues.len(), world.summaries.len());
    Ok(())
}

fn pretrain(cfg: &RunConfig, a: &WorldArg, out: &Path) -> Result<()> {
    let world = load_world(&a.world)?;
    let vocab = load_vocab(&world, cfg)?;
    let (model, report) = pipeline::pretrain_policy(&world, &vocab, cfg)?;
    model.save(out.join(POLICY_FILE))?;
    vocab.save(out.join(VOCAB_FILE))?;
    write_json(&out.join("pretrain.json"), &report)?;
    if let Some(p) = report.validation_perplexity.last() {
        println!("validation perplexity {p:.4}");
    }
    Ok(())
}

fn load_feedback(dir: &Path) -> Result<Feedback> {
    let highlights: Vec<HighlightSet> = read_jsonl(need(dir.join("highlights.jsonl"))?)?;
    let comparisons: Vec<Comparison> = read_jsonl(need(dir.join("comparisons.jsonl"))?)?;
    let extra = dir.join("extra_summaries.jsonl");
    let extra_summaries: Vec<SummaryRecord> = if extra.exists() { read_jsonl(extra)? } else { Vec::new() };
    Ok(Feedback {
        highlights,
        comparisons,
        extra_summaries,
    })
}

fn save_feedback(f: &Feedback, dir: &Path) -> Result<()> {
    write_export(
        &Export {
            highlights: f.highlights.clone(),
            comparisons: f.comparisons.clone(),
        },
        dir,
    )?;
    export_jsonl(&f.extra_summaries, dir.join("extra_summaries.jsonl"))?;
    Ok(())
}

fn train_reward(cfg: &RunConfig, a: &TrainRewardArgs, out: &Path) -> Result<()> {
    let world = load_world(&a.world.world)?;
    let vocab = load_vocab(&world, cfg)?;
    let feedback = match (&a.feedback.feedback, a.feedback.source) {
        (Some(dir), _) => load_feedback(dir)?,
        (None, Some(src)) => {
            let budget = a.feedback.dialogues.unwrap_or(cfg.feedback.dialogues);
            pipeline::collect_feedback(&world, &cfg.feedback, src.into(), budget)?
        }
        (None, None) => pipeline::collect_feedback(&world, &cfg.feedback, cfg.feedback.source, cfg.feedback.dialogues)?,
    };
    if feedback.comparisons.is_empty() {
        return Err(UsageError("no comparisons to train on".into()).into());
    }
    let (model, report) = pipeline::train_reward(&world, &vocab, &feedback, cfg)?;
    model.save(out.join(REWARD_FILE))?;
    save_feedback(&feedback, out)?;
    write_json(&out.join("reward_report.json"), &report)?;
    match report.pooled_accuracy {
        Some(acc) => println!("held-out pairwise accuracy {acc:.4}"),
        None => println!("no held-out strict pairs"),
    }
    Ok(())
}

fn train_ppo(cfg: &RunConfig, a: &TrainPpoArgs, out: &Path) -> Result<()> {
    let world = load_world(&a.world.world)?;
    let vocab = load_vocab(&world, cfg)?;
    let pretrained = load_policy(&a.policy, &vocab, cfg)?;
    let mut rm = GlobalRewardModel::new(vocab.clone(), cfg.reward_model.clone());
    rm.load_params(need(a.reward.join(REWARD_FILE))?)?;
    let feedback = load_feedback(&a.reward)?;

    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let mut windows = 0usize;
    let every = a.checkpoint_every;
    let outcome = pipeline::fine_tune(&world, &vocab, &pretrained, &rm, &feedback, cfg, &mut |stats, policy| {
        serde_json::to_writer(&mut log, stats)?;
        log.write_all(b"\n")?;
        log.flush()?;
        windows += 1;
        if every > 0 && windows.is_multiple_of(every) {
            policy.save(ckpt_dir.join(format!("policy-{:06}.ckpt", stats.episode)))?;
        }
        Ok(())
    })?;
    outcome.policy.save(out.join(POLICY_FILE))?;
    outcome.value_function.params().save(out.join("value.ckpt"))?;
    if let Some(last) = outcome.curve.last() {
        println!(
            "episode {}: reward {:.4}, kl {:.4}, clip {:.3}",
            last.episode, last.mean_env_reward, last.mean_kl, last.clip_fraction
        );
    }
    if outcome.discarded > 0 {
        println!("discarded {} empty trajectories", outcome.discarded);
    }
    Ok(())
}

fn split(world: &World, s: Split) -> &[Dialogue] {
    match s {
        Split::Train => world.train_dialogues(),
        Split::Test => world.test_dialogues(),
        Split::All => &world.dialogues,
    }
}

fn summarize(cfg: &RunConfig, a: &SummarizeArgs, out: &Path) -> Result<()> {
    let world = load_world(&a.world.world)?;
    let vocab = load_vocab(&world, cfg)?;
    let policy = load_policy(&a.policy, &vocab, cfg)?;
    let dialogues = split(&world, a.split);
    let texts = pipeline::summarize_all(&policy, &vocab, dialogues)?;
    let records: Vec<SummaryRecord> = dialogues
        .iter()
        .zip(texts)
        .map(|(d, text)| SummaryRecord {
            id: summary_id(&d.id, SummarySource::Policy),
            dialogue_id: d.id.clone(),
            text,
            source: SummarySource::Policy,
        })
        .collect();
    let n = export_jsonl(&records, out.join("summaries.jsonl"))?;
    println!("{n} summaries");
    Ok(())
}

fn load_system(world: &World, spec: &str) -> Result<std::collections::HashMap<String, String>> {
    if spec == "reference" {
        return Ok(world
            .dialogues
            .iter()
            .filter_map(|d| d.reference_summary.clone().map(|r| (d.id.clone(), r)))
            .collect());
    }
    let records: Vec<SummaryRecord> = read_jsonl(need(PathBuf::from(spec))?)?;
    Ok(records.into_iter().map(|r| (r.dialogue_id, r.text)).collect())
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs, out: &Path) -> Result<()> {
    let world = load_world(&a.world.world)?;
    let cand = load_system(&world, &a.candidate)?;
    let base = load_system(&world, &a.baseline)?;
    let dialogues: Vec<Dialogue> = world
        .dialogues
        .iter()
        .filter(|d| cand.contains_key(&d.id) && base.contains_key(&d.id))
        .cloned()
        .collect();
    if dialogues.is_empty() {
        return Err(anyhow!("the two systems share no dialogues"));
    }
    let x: Vec<String> = dialogues.iter().map(|d| cand[&d.id].clone()).collect();
    let y: Vec<String> = dialogues.iter().map(|d| base[&d.id].clone()).collect();
    let report = pipeline::compare_systems(&world, &dialogues, &x, &y, &cfg.evaluation)?;
    write_json(&out.join("evaluation.json"), &report)?;
    println!(
        "{} dialogues: ROUGE-1/2/L candidate {:.4}/{:.4}/{:.4}, baseline {:.4}/{:.4}/{:.4}; win rate {:.3}; p = {:.4}",
        report.dialogues,
        report.candidate.rouge1,
        report.candidate.rouge2,
        report.candidate.rouge_l,
        report.baseline.rouge1,
        report.baseline.rouge2,
        report.baseline.rouge_l,
        report.win_rate,
        report.p_value
    );
    Ok(())
}

fn serve(a: &ServeArgs, out: &Path) -> Result<()> {
    let mut cfg = match &a.service_config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig {
            data_dir: out.join("data"),
            ..Default::default()
        },
    };
    if let Some(w) = &a.world {
        cfg.corpus_path = need(w.join("dialogues.jsonl"))?;
        cfg.summaries_path = need(w.join("summaries.jsonl"))?;
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    let cfg = cfg.with_env_overrides()?;
    let store = Arc::new(Store::open(cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(hitl_service::serve(store))?;
    Ok(())
}

fn export(a: &ExportArgs, out: &Path) -> Result<()> {
    let entries = replay(&need(a.data.join(LOG_FILE))?)?;
    let mut export = Export::default();
    for e in entries {
        match e {
            LogEntry::Highlight { record, .. } => export.highlights.push(record),
            LogEntry::Comparison { record, .. } => export.comparisons.push(record),
        }
    }
    let (h, c) = write_export(&export, out)?;
    println!("{h} highlight sets, {c} comparisons");
    Ok(())
}
