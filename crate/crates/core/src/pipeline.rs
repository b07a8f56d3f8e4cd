//! Experiment stages on the synthetic world, shared by the CLI and the
//! acceptance tests: feedback collection, pretraining, reward-model
//! training, PPO fine-tuning, evaluation and the two ablation sweeps.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Comparison, Corpus, Dialogue, Dimension, HighlightSet, SummaryRecord, SummarySource};
use crate::metrics::{mean, permutation_test, rouge_l, rouge_n, win_rate, Vote};
use crate::policy::{
    kl_divergence, pretrain_supervised, PolicyContext, PolicyModel, PretrainReport, SupervisedExample,
};
use crate::ppo::{train_hitl_observed, HitlData, HitlOutcome, ValueFunction, WindowObserver};
use crate::reward_global::{train_reward_model, GlobalRewardModel, SummaryIndex, ValidationReport};
use crate::synthfeed::{
    generate_world, greedy_highlights, sample_pairs, simulate_annotator, simulate_highlights, summary_id,
    synthetic_preferences, World,
};
use crate::textproc::Vocabulary;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    /// Greedy highlights and reference-versus-utterance preferences.
    Synthesis,
    /// Simulated annotators with label noise and missed highlights.
    Noisy,
    /// Simulated annotators at the world's own noise level.
    Clean,
}

impl FeedbackSource {
    pub const ALL: [FeedbackSource; 3] = [Self::Synthesis, Self::Noisy, Self::Clean];

    pub fn name(self) -> &'static str {
        match self {
            Self::Synthesis => "synthesis",
            Self::Noisy => "noisy",
            Self::Clean => "clean",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub source: FeedbackSource,
    /// Number of training dialogues to annotate; each gets one highlight set
    /// and `pairs_per_dialogue` comparisons.
    pub dialogues: usize,
    pub pairs_per_dialogue: usize,
    pub max_spans: usize,
    pub noisy_preference_noise: f64,
    pub noisy_highlight_miss: f64,
    pub seed: u64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            source: FeedbackSource::Clean,
            dialogues: 1000,
            pairs_per_dialogue: 3,
            max_spans: 8,
            noisy_preference_noise: 0.3,
            noisy_highlight_miss: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub highlights: Vec<HighlightSet>,
    pub comparisons: Vec<Comparison>,
    /// Summaries referenced by the comparisons that are not part of the world.
    pub extra_summaries: Vec<SummaryRecord>,
}

fn dialogue_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Annotates `budget` training dialogues (all of them if fewer exist).
/// Dialogues are visited in a seed-fixed order and each uses its own random
/// stream, so a smaller budget yields a subset of a larger one.
pub fn collect_feedback(
    world: &World,
    cfg: &FeedbackConfig,
    source: FeedbackSource,
    budget: usize,
) -> Result<Feedback> {
    let train = world.train_dialogues();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let (noise, miss) = match source {
        FeedbackSource::Noisy => (cfg.noisy_preference_noise, cfg.noisy_highlight_miss),
        _ => (world.config.preference_noise, world.config.highlight_miss),
    };
    let mut out = Feedback::default();
    for idx in order.into_iter().take(budget) {
        let d = &train[idx];
        let mut rng = dialogue_rng(cfg.seed, idx);
        match source {
            FeedbackSource::Synthesis => {
                let reference = world
                    .summaries
                    .iter()
                    .find(|s| s.dialogue_id == d.id && s.source == SummarySource::Reference)
                    .ok_or_else(|| Error::InvalidArgument(format!("no reference for `{}`", d.id)))?;
                out.highlights
                    .push(greedy_highlights(d, &reference.text, cfg.max_spans, "synthesis")?);
                for k in 0..cfg.pairs_per_dialogue {
                    let (mut c, mut neg) = synthetic_preferences(d, reference, "synthesis", &mut rng)?;
                    neg.id = format!("{}{k}", summary_id(&d.id, SummarySource::SyntheticNegative));
                    c.summary_b_id = neg.id.clone();
                    out.comparisons.push(c);
                    out.extra_summaries.push(neg);
                }
            }
            FeedbackSource::Noisy | FeedbackSource::Clean => {
                let facts = world.facts.get(&d.id).map(Vec::as_slice).unwrap_or(&[]);
                out.highlights.push(simulate_highlights(d, facts, miss, source.name(), &mut rng));
                let baselines: Vec<&SummaryRecord> = world.baselines(&d.id).collect();
                for (a, b) in sample_pairs(&baselines, cfg.pairs_per_dialogue, &mut rng) {
                    out.comparisons
                        .push(simulate_annotator(d, a, b, &world.oracle, noise, source.name(), &mut rng)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn build_vocabulary(world: &World, min_freq: usize) -> Result<Vocabulary> {
    let texts: Vec<String> = world
        .dialogues
        .iter()
        .map(Dialogue::full_text)
        .chain(world.summaries.iter().map(|s| s.text.clone()))
        .collect();
    Vocabulary::build(&texts, min_freq)
}

pub fn supervised_examples(dialogues: &[Dialogue], vocab: &Vocabulary, max_length: usize) -> Vec<SupervisedExample> {
    dialogues
        .iter()
        .filter_map(|d| {
            d.reference_summary
                .as_deref()
                .map(|r| SupervisedExample::new(vocab, &d.full_text(), r, max_length))
        })
        .collect()
}

/// The generated world, its vocabulary and the supervised baseline.
pub struct Prepared {
    pub world: World,
    pub vocab: Vocabulary,
    pub pretrained: PolicyModel,
    pub pretrain_report: PretrainReport,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let vocab = build_vocabulary(&world, cfg.vocab_min_freq)?;
    let (pretrained, pretrain_report) = pretrain_policy(&world, &vocab, cfg)?;
    Ok(Prepared {
        world,
        vocab,
        pretrained,
        pretrain_report,
    })
}

pub fn pretrain_policy(world: &World, vocab: &Vocabulary, cfg: &RunConfig) -> Result<(PolicyModel, PretrainReport)> {
    let examples = supervised_examples(world.train_dialogues(), vocab, cfg.policy.max_length);
    let model = PolicyModel::new(vocab.len(), cfg.policy.clone())?;
    pretrain_supervised(model, &examples, &cfg.pretrain)
}

pub fn summary_index(world: &World, feedback: &Feedback) -> SummaryIndex {
    SummaryIndex::new(world.summaries.iter().chain(&feedback.extra_summaries).cloned())
}

pub fn train_reward(
    world: &World,
    vocab: &Vocabulary,
    feedback: &Feedback,
    cfg: &RunConfig,
) -> Result<(GlobalRewardModel, ValidationReport)> {
    let corpus = Corpus::new(world.dialogues.clone())?;
    let model = GlobalRewardModel::new(vocab.clone(), cfg.reward_model.clone());
    train_reward_model(model, &corpus, &summary_index(world, feedback), &feedback.comparisons, &cfg.reward_training)
}

pub fn highlight_map(highlights: &[HighlightSet]) -> HashMap<String, Vec<HighlightSet>> {
    let mut map: HashMap<String, Vec<HighlightSet>> = HashMap::new();
    for h in highlights {
        map.entry(h.dialogue_id.clone()).or_default().push(h.clone());
    }
    map
}

/// PPO from the pretrained policy on the dialogues that received feedback.
pub fn fine_tune(
    world: &World,
    vocab: &Vocabulary,
    pretrained: &PolicyModel,
    reward_model: &GlobalRewardModel,
    feedback: &Feedback,
    cfg: &RunConfig,
    observer: &mut WindowObserver<'_>,
) -> Result<HitlOutcome> {
    let highlights = highlight_map(&feedback.highlights);
    let mut dialogues: Vec<&Dialogue> = world
        .train_dialogues()
        .iter()
        .filter(|d| highlights.contains_key(&d.id))
        .collect();
    if dialogues.is_empty() {
        dialogues = world.train_dialogues().iter().collect();
    }
    let (shift, scale) = reward_normalization(world, reward_model, &dialogues)?;
    let data = HitlData {
        highlights,
        global_shift: shift,
        global_scale: scale,
        ..HitlData::new(vocab, dialogues, cfg.local_reward)
    };
    let value_fn = ValueFunction::from_reward_model(reward_model, cfg.value_head_hidden, cfg.ppo.seed ^ 0x5eed);
    let reference = pretrained.clone_frozen();
    train_hitl_observed(
        pretrained.clone(),
        &reference,
        reward_model,
        value_fn,
        &data,
        &cfg.weights,
        &cfg.gae,
        &cfg.ppo,
        observer,
    )
}

/// Shift and scale for the reward-model score: the mean over reference
/// summaries of `dialogues` and the standard deviation over their reference
/// and baseline summaries.
pub fn reward_normalization(world: &World, rm: &GlobalRewardModel, dialogues: &[&Dialogue]) -> Result<(f64, f64)> {
    let by_id: HashMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.id.as_str(), *d)).collect();
    let mut refs = Vec::new();
    let mut all = Vec::new();
    for s in &world.summaries {
        let Some(d) = by_id.get(s.dialogue_id.as_str()) else { continue };
        if !(s.source == SummarySource::Reference || s.source.is_baseline()) {
            continue;
        }
        let r = rm.global_reward(d, &s.text)?;
        if s.source == SummarySource::Reference {
            refs.push(r);
        }
        all.push(r);
    }
    if refs.is_empty() || all.len() < 2 {
        return Ok((0.0, 1.0));
    }
    let m = mean(&all);
    let var = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64;
    Ok((mean(&refs), var.sqrt().max(1e-6)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Simulated judges per test dialogue; must be odd.
    pub raters: usize,
    pub rater_noise: f64,
    pub permutation_resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            raters: 3,
            rater_noise: 0.1,
            permutation_resamples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    /// Mean hidden-oracle score per dimension, indexed like [`Dimension::ALL`].
    pub oracle: [f64; 5],
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl SystemScores {
    pub fn overall(&self) -> f64 {
        self.oracle[Dimension::Overall.index()]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dialogues: usize,
    pub candidate: SystemScores,
    pub baseline: SystemScores,
    /// Fraction of test dialogues where the judges' majority prefers the candidate.
    pub win_rate: f64,
    /// Permutation-test p-value of the per-dialogue overall oracle scores.
    pub p_value: f64,
}

/// Greedy summaries of `dialogues`.
pub fn summarize_all(policy: &PolicyModel, vocab: &Vocabulary, dialogues: &[Dialogue]) -> Result<Vec<String>> {
    dialogues
        .iter()
        .map(|d| policy.summarize(vocab, &d.full_text()))
        .collect()
}

pub fn score_system(world: &World, dialogues: &[Dialogue], summaries: &[String]) -> Result<(SystemScores, Vec<f64>)> {
    let mut s = SystemScores::default();
    let mut overall = Vec::with_capacity(dialogues.len());
    let n = dialogues.len().max(1) as f64;
    for (d, text) in dialogues.iter().zip(summaries) {
        let o = world.oracle.scores(&d.id, text)?;
        for (acc, v) in s.oracle.iter_mut().zip(o) {
            *acc += v / n;
        }
        overall.push(o[Dimension::Overall.index()]);
        if let Some(r) = &d.reference_summary {
            s.rouge1 += rouge_n(text, r, 1).f1 / n;
            s.rouge2 += rouge_n(text, r, 2).f1 / n;
            s.rouge_l += rouge_l(text, r).f1 / n;
        }
    }
    Ok((s, overall))
}

/// Pairwise judgment of two systems' test summaries by simulated judges on
/// the overall dimension. A judge who sees no difference picks at random.
pub fn compare_systems(
    world: &World,
    dialogues: &[Dialogue],
    candidate: &[String],
    baseline: &[String],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if cfg.raters.is_multiple_of(2) {
        return Err(Error::Config("evaluation.raters must be odd".into()));
    }
    let (cand, cand_overall) = score_system(world, dialogues, candidate)?;
    let (base, base_overall) = score_system(world, dialogues, baseline)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut votes = Vec::with_capacity(dialogues.len());
    for ((d, x), y) in dialogues.iter().zip(candidate).zip(baseline) {
        let rec = |id: &str, text: &str| SummaryRecord {
            id: id.into(),
            dialogue_id: d.id.clone(),
            text: text.into(),
            source: SummarySource::Policy,
        };
        let (a, b) = (rec("x", x), rec("y", y));
        let mut item = Vec::with_capacity(cfg.raters);
        for r in 0..cfg.raters {
            let c = simulate_annotator(d, &a, &b, &world.oracle, cfg.rater_noise, &format!("judge{r}"), &mut rng)?;
            let s = c.score(Dimension::Overall);
            let x_wins = if s == 0 { rng.gen_bool(0.5) } else { s > 0 };
            item.push(if x_wins { Vote::X } else { Vote::Y });
        }
        votes.push(item);
    }
    let p_value = permutation_test(&cand_overall, &base_overall, cfg.permutation_resamples, &mut rng)?;
    Ok(Evaluation {
        dialogues: dialogues.len(),
        candidate: cand,
        baseline: base,
        win_rate: win_rate(&votes)?,
        p_value,
    })
}

/// Mean exact per-token `KL(π || π_ref)` along one sampled trajectory per dialogue.
pub fn mean_token_kl(
    policy: &PolicyModel,
    reference: &PolicyModel,
    vocab: &Vocabulary,
    dialogues: &[Dialogue],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut steps = 0usize;
    for d in dialogues {
        let ctx = PolicyContext::from_text(vocab, &d.full_text());
        let traj = policy.sample(None, &d.id, &ctx, false, &mut rng)?;
        let p = policy.step_log_distributions(&ctx, &traj.tokens)?;
        let q = reference.step_log_distributions(&ctx, &traj.tokens)?;
        for (a, b) in p.iter().zip(&q) {
            total += kl_divergence(a, b);
            steps += 1;
        }
    }
    if steps == 0 {
        return Err(Error::EmptyInput("no sampled tokens"));
    }
    Ok(total / steps as f64)
}

/// Everything one feedback → reward model → PPO run produces.
pub struct RunOutcome {
    pub feedback: Feedback,
    pub reward_model: GlobalRewardModel,
    pub reward_report: ValidationReport,
    pub hitl: HitlOutcome,
    pub evaluation: Evaluation,
    pub mean_token_kl: f64,
}

pub fn run_from_feedback(prep: &Prepared, cfg: &RunConfig, feedback: Feedback) -> Result<RunOutcome> {
    let (reward_model, reward_report) = train_reward(&prep.world, &prep.vocab, &feedback, cfg)?;
    let hitl = fine_tune(&prep.world, &prep.vocab, &prep.pretrained, &reward_model, &feedback, cfg, &mut |_, _| Ok(()))?;
    let test = prep.world.test_dialogues();
    let tuned = summarize_all(&hitl.policy, &prep.vocab, test)?;
    let base = summarize_all(&prep.pretrained, &prep.vocab, test)?;
    let evaluation = compare_systems(&prep.world, test, &tuned, &base, &cfg.evaluation)?;
    let kl = mean_token_kl(&hitl.policy, &prep.pretrained, &prep.vocab, test, cfg.evaluation.seed)?;
    Ok(RunOutcome {
        feedback,
        reward_model,
        reward_report,
        hitl,
        evaluation,
        mean_token_kl: kl,
    })
}

pub fn run_source(prep: &Prepared, cfg: &RunConfig, source: FeedbackSource, budget: usize) -> Result<RunOutcome> {
    let feedback = collect_feedback(&prep.world, &cfg.feedback, source, budget)?;
    run_from_feedback(prep, cfg, feedback)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub budgets: Vec<usize>,
    pub sources: Vec<FeedbackSource>,
    /// Seeds per setting; seed `k` uses top-level seed `seed + k`.
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            budgets: vec![400, 600, 1000],
            sources: FeedbackSource::ALL.to_vec(),
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub seed: u64,
    pub label: String,
    pub mean_oracle_reward: f64,
    pub win_rate: f64,
    pub reward_model_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub points: Vec<AblationPoint>,
    /// `(label, mean over seeds of mean_oracle_reward)` in sweep order.
    pub averages: Vec<(String, f64)>,
}

impl AblationReport {
    /// Averages `points` per label, in the order of `labels`.
    pub fn from_points(points: Vec<AblationPoint>, labels: &[String]) -> Self {
        Self {
            points,
            averages: Vec::new(),
        }
        .finish(labels)
    }

    fn finish(mut self, labels: &[String]) -> Self {
        self.averages = labels
            .iter()
            .map(|l| {
                let v: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|p| &p.label == l)
                    .map(|p| p.mean_oracle_reward)
                    .collect();
                (l.clone(), mean(&v))
            })
            .collect();
        self
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.averages.windows(2).all(|w| w[1].1 >= w[0].1)
    }
}

/// The configuration of ablation seed `k`.
pub fn seeded(cfg: &RunConfig, k: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.reseed(cfg.seed + k as u64);
    c
}

pub fn point(seed: u64, label: String, run: &RunOutcome) -> AblationPoint {
    AblationPoint {
        seed,
        label,
        mean_oracle_reward: run.evaluation.candidate.overall(),
        win_rate: run.evaluation.win_rate,
        reward_model_accuracy: run.reward_report.pooled_accuracy,
    }
}

/// Mean oracle reward of the fine-tuned policy for each annotation budget.
pub fn ablate_count(cfg: &RunConfig, mut progress: impl FnMut(&AblationPoint)) -> Result<AblationReport> {
    let labels: Vec<String> = cfg.ablation.budgets.iter().map(|b| b.to_string()).collect();
    let mut report = AblationReport::default();
    for k in 0..cfg.ablation.seeds {
        let c = seeded(cfg, k);
        let prep = prepare(&c)?;
        for (budget, label) in cfg.ablation.budgets.iter().zip(&labels) {
            let run = run_source(&prep, &c, c.feedback.source, *budget)?;
            let p = point(c.seed, label.clone(), &run);
            progress(&p);
            report.points.push(p);
        }
    }
    Ok(report.finish(&labels))
}

/// Mean oracle reward of the fine-tuned policy for each feedback source.
pub fn ablate_quality(cfg: &RunConfig, mut progress: impl FnMut(&AblationPoint)) -> Result<AblationReport> {
    let labels: Vec<String> = cfg.ablation.sources.iter().map(|s| s.name().to_string()).collect();
    let mut report = AblationReport::default();
    for k in 0..cfg.ablation.seeds {
        let c = seeded(cfg, k);
        let prep = prepare(&c)?;
        for (source, label) in cfg.ablation.sources.iter().zip(&labels) {
            let run = run_source(&prep, &c, *source, c.feedback.dialogues)?;
            let p = point(c.seed, label.clone(), &run);
            progress(&p);
            report.points.push(p);
        }
    }
    Ok(report.finish(&labels))
}
