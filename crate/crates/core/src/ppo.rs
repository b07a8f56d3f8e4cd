//! PPO fine-tuning against the KL-anchored combined reward.
//!
//! The environment reward `w_l·r_l + w_g·r_g` is paid on the final token; the
//! anchor `-β (log π - log π_ref)` is paid on every token (or, optionally, all
//! at the end), so the per-token rewards always sum to the sequence reward.

use std::collections::HashMap;

use ndgrad::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, HighlightSet};
use crate::policy::{PolicyContext, PolicyModel, Trajectory};
use crate::reward_global::{
    pair_features_ids, DialogueFeatures, EncoderSlots, GlobalRewardModel, HeadInit, HeadSlots,
};
use crate::reward_local::{local_reward, LocalRewardConfig};
use crate::textproc::Vocabulary;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w_l: f64,
    pub w_g: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_l: 1.0,
            w_g: 1.5,
            beta: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_l, self.w_g, self.beta].iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("reward weights must be finite".into()))
        }
    }

    pub fn environment_reward(&self, r_l: f64, r_g: f64) -> f64 {
        self.w_l * r_l + self.w_g * r_g
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlPlacement {
    #[default]
    PerToken,
    Terminal,
}

/// Per-token rewards with the anchor on every token (see [`KlPlacement`]).
pub fn assemble_rewards(traj: &Trajectory, r_l: f64, r_g: f64, w: &RewardWeights) -> Result<Vec<f64>> {
    assemble_rewards_with(traj, r_l, r_g, w, KlPlacement::PerToken)
}

pub fn assemble_rewards_with(
    traj: &Trajectory,
    r_l: f64,
    r_g: f64,
    w: &RewardWeights,
    placement: KlPlacement,
) -> Result<Vec<f64>> {
    let n = traj.tokens.len();
    if traj.log_probs.len() != n {
        return Err(Error::DimensionMismatch(n, traj.log_probs.len()));
    }
    if traj.ref_log_probs.len() != n {
        return Err(Error::DimensionMismatch(n, traj.ref_log_probs.len()));
    }
    if n == 0 {
        return Err(Error::EmptyInput("trajectory"));
    }
    let mut rewards: Vec<f64> = match placement {
        KlPlacement::PerToken => traj
            .log_probs
            .iter()
            .zip(&traj.ref_log_probs)
            .map(|(a, b)| -w.beta * (a - b))
            .collect(),
        KlPlacement::Terminal => {
            let mut r = vec![0.0; n];
            r[n - 1] = -w.beta * traj.log_ratio_sum();
            r
        }
    };
    rewards[n - 1] += w.environment_reward(r_l, r_g);
    Ok(rewards)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.95,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(Error::Config("gamma and lambda must be in [0, 1]".into()))
        }
    }
}

/// Generalized advantage estimates and returns by backward recursion.
pub fn gae(rewards: &[f64], values: &[f64], terminal_value: f64, cfg: &GaeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::DimensionMismatch(rewards.len(), values.len()));
    }
    if rewards.is_empty() {
        return Err(Error::EmptyInput("rewards"));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = terminal_value;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + cfg.gamma * next_value - values[t];
        running = delta + cfg.gamma * cfg.lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Graph output with one row per (episode, step) or padding.
pub struct Rows {
    pub values: Var,
    pub rows: Vec<Option<(usize, usize)>>,
}

/// Something with trainable parameters that assigns log-probabilities to
/// the actions of an episode.
pub trait Actor<E> {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Log-probabilities of every taken action, as a rank-1 graph node.
    fn action_log_probs(&self, g: &mut Graph, vars: &[Var], episodes: &[&E]) -> Result<Rows>;
}

/// Something with trainable parameters that predicts the return before each action.
pub trait Critic<E> {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn state_values(&self, g: &mut Graph, vars: &[Var], episodes: &[&E]) -> Result<Rows>;
}

#[derive(Clone, Debug)]
pub struct PpoSample<E> {
    pub episode: E,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub epochs_per_batch: usize,
    pub batch_size: usize,
    pub total_episodes: usize,
    pub value_loss_coef: f64,
    pub normalize_advantages: bool,
    pub policy_learning_rate: f64,
    pub value_learning_rate: f64,
    pub max_grad_norm: f64,
    pub kl_placement: KlPlacement,
    /// Episodes per logged window.
    pub log_window: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            epochs_per_batch: 4,
            batch_size: 8,
            total_episodes: 5000,
            value_loss_coef: 0.5,
            normalize_advantages: true,
            policy_learning_rate: 1e-4,
            value_learning_rate: 1e-3,
            max_grad_norm: 1.0,
            kl_placement: KlPlacement::PerToken,
            log_window: 200,
            seed: 0,
        }
    }
}

impl PpoConfig {
    // Negated comparisons below reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs_per_batch == 0 {
            return Err(Error::Config("batch_size and epochs_per_batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Clipped surrogate objective (to be maximized).
    pub surrogate: f64,
    pub value_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Mean of `old log π - new log π` over tokens.
    pub approx_kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub epochs: Vec<EpochStats>,
}

impl PpoDiagnostics {
    pub fn last(&self) -> EpochStats {
        self.epochs.last().copied().unwrap_or_default()
    }
}

/// Adam state for both networks, kept across updates.
pub struct PpoOptimizer {
    pub actor: Adam,
    pub critic: Adam,
}

impl PpoOptimizer {
    pub fn new(cfg: &PpoConfig) -> Self {
        Self {
            actor: Adam::new(AdamConfig::with_lr(cfg.policy_learning_rate)),
            critic: Adam::new(AdamConfig::with_lr(cfg.value_learning_rate)),
        }
    }
}

fn normalized_advantages<E>(samples: &[PpoSample<E>], normalize: bool) -> Vec<Vec<f64>> {
    let adv: Vec<Vec<f64>> = samples.iter().map(|s| s.advantages.clone()).collect();
    if !normalize {
        return adv;
    }
    let all: Vec<f64> = adv.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    // A constant batch keeps its centring only.
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    adv.into_iter()
        .map(|v| v.into_iter().map(|a| (a - mean) * scale).collect())
        .collect()
}

/// Graph node whose gradient is the clipped-surrogate gradient (negated, for
/// minimization), together with the statistics of this pass.
pub fn surrogate_loss<E, A: Actor<E>>(
    actor: &A,
    g: &mut Graph,
    vars: &[Var],
    samples: &[PpoSample<E>],
    advantages: &[Vec<f64>],
    clip_epsilon: f64,
) -> Result<(Var, EpochStats)> {
    let eps: Vec<&E> = samples.iter().map(|s| &s.episode).collect();
    let out = actor.action_log_probs(g, vars, &eps)?;
    let new = g.value(out.values).data().to_vec();
    let n_rows = out.rows.len();
    let tokens = out.rows.iter().filter(|r| r.is_some()).count();
    if tokens == 0 {
        return Err(Error::EmptyInput("ppo batch has no actions"));
    }
    let nt = tokens as f64;
    let mut old = vec![0.0; n_rows];
    let mut weights = vec![0.0; n_rows];
    let mut stats = EpochStats::default();
    for (r, row) in out.rows.iter().enumerate() {
        let Some((i, t)) = *row else { continue };
        let lp_old = *samples[i]
            .old_log_probs
            .get(t)
            .ok_or(Error::DimensionMismatch(t + 1, samples[i].old_log_probs.len()))?;
        let a = *advantages[i]
            .get(t)
            .ok_or(Error::DimensionMismatch(t + 1, advantages[i].len()))?;
        old[r] = lp_old;
        let ratio = (new[r] - lp_old).exp();
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped_term = ratio * a;
        let clipped_term = clipped * a;
        if clipped_term < unclipped_term {
            stats.surrogate += clipped_term / nt;
        } else {
            stats.surrogate += unclipped_term / nt;
            weights[r] = a / nt;
        }
        if (ratio - 1.0).abs() > clip_epsilon {
            stats.clip_fraction += 1.0 / nt;
        }
        stats.mean_ratio += ratio / nt;
        stats.approx_kl += (lp_old - new[r]) / nt;
    }
    let shape = g.value(out.values).shape().to_vec();
    let old_c = g.constant(Tensor::new(shape.clone(), old)?);
    let w_c = g.constant(Tensor::new(shape, weights)?);
    let diff = g.sub(out.values, old_c)?;
    let ratio = g.exp(diff);
    let weighted = g.mul(ratio, w_c)?;
    let total = g.sum(weighted);
    Ok((g.neg(total), stats))
}

/// Mean squared error between critic values and returns.
pub fn value_loss<E, C: Critic<E>>(critic: &C, g: &mut Graph, vars: &[Var], samples: &[PpoSample<E>]) -> Result<Var> {
    let eps: Vec<&E> = samples.iter().map(|s| &s.episode).collect();
    let out = critic.state_values(g, vars, &eps)?;
    let n = out.rows.iter().filter(|r| r.is_some()).count();
    if n == 0 {
        return Err(Error::EmptyInput("value batch"));
    }
    let mut target = vec![0.0; out.rows.len()];
    let mut mask = vec![0.0; out.rows.len()];
    for (r, row) in out.rows.iter().enumerate() {
        if let Some((i, t)) = *row {
            target[r] = *samples[i]
                .returns
                .get(t)
                .ok_or(Error::DimensionMismatch(t + 1, samples[i].returns.len()))?;
            mask[r] = 1.0 / n as f64;
        }
    }
    let shape = g.value(out.values).shape().to_vec();
    let t = g.constant(Tensor::new(shape.clone(), target)?);
    let m = g.constant(Tensor::new(shape, mask)?);
    let d = g.sub(out.values, t)?;
    let sq = g.mul(d, d)?;
    let w = g.mul(sq, m)?;
    Ok(g.sum(w))
}

/// `epochs_per_batch` full-batch passes of clipped-surrogate ascent for the
/// actor and value regression for the critic.
pub fn ppo_update<E, A: Actor<E>, C: Critic<E>>(
    actor: &mut A,
    critic: &mut C,
    samples: &[PpoSample<E>],
    cfg: &PpoConfig,
    opt: &mut PpoOptimizer,
) -> Result<PpoDiagnostics> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("ppo batch"));
    }
    let advantages = normalized_advantages(samples, cfg.normalize_advantages);
    let mut diag = PpoDiagnostics::default();
    for epoch in 0..cfg.epochs_per_batch {
        let mut g = Graph::new();
        let vars = actor.params().bind(&mut g);
        let (loss, mut stats) = surrogate_loss(actor, &mut g, &vars, samples, &advantages, cfg.clip_epsilon)?;
        if !stats.surrogate.is_finite() || !g.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite PPO surrogate in epoch {epoch}: {stats:?}"
            )));
        }
        g.backward(loss)?;
        let mut grads = actor.params().grads(&g, &vars);
        ndgrad::clip_grad_norm(&mut grads, cfg.max_grad_norm);
        opt.actor.step(actor.params_mut(), &grads)?;

        let mut g = Graph::new();
        let vars = critic.params().bind(&mut g);
        let vl = value_loss(critic, &mut g, &vars, samples)?;
        stats.value_loss = g.value(vl).item();
        if !stats.value_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite value loss in epoch {epoch}: {stats:?}")));
        }
        let scaled = g.scale(vl, cfg.value_loss_coef);
        g.backward(scaled)?;
        let mut grads = critic.params().grads(&g, &vars);
        ndgrad::clip_grad_norm(&mut grads, cfg.max_grad_norm);
        opt.critic.step(critic.params_mut(), &grads)?;
        diag.epochs.push(stats);
    }
    Ok(diag)
}

/// One rollout of the summarization policy.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub context: PolicyContext,
    pub dialogue_index: usize,
}

impl Actor<Rollout> for PolicyModel {
    fn params(&self) -> &ParamSet {
        PolicyModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        PolicyModel::params_mut(self)
    }

    fn action_log_probs(&self, g: &mut Graph, vars: &[Var], episodes: &[&Rollout]) -> Result<Rows> {
        let ctx: Vec<&PolicyContext> = episodes.iter().map(|e| &e.context).collect();
        let tgt: Vec<&[usize]> = episodes.iter().map(|e| e.trajectory.tokens.as_slice()).collect();
        let out = self.forward_batch(g, vars, &ctx, &tgt)?;
        Ok(Rows {
            values: out.log_probs,
            rows: out.rows,
        })
    }
}

/// Prefix-value critic: a copy of the reward-model encoder with a fresh head.
#[derive(Clone, Debug)]
pub struct ValueFunction {
    vocab: Vocabulary,
    params: ParamSet,
    encoder: EncoderSlots,
    head: HeadSlots,
    dialogues: Vec<DialogueFeatures>,
}

impl ValueFunction {
    /// The encoder starts bit-identical to the reward model's.
    pub fn from_reward_model(rm: &GlobalRewardModel, head_hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = rm.encoder_tensors();
        let width = w.shape()[1];
        let mut params = ParamSet::new();
        let encoder = EncoderSlots {
            w: params.insert("encoder.w", w.clone()),
            b: params.insert("encoder.b", b.clone()),
        };
        let head = HeadSlots::register(&mut params, "value.head", width, head_hidden, HeadInit::Random, &mut rng);
        Self {
            vocab: rm.vocab().clone(),
            params,
            encoder,
            head,
            dialogues: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn encoder_tensors(&self) -> (&Tensor, &Tensor) {
        (self.params.get(self.encoder.w), self.params.get(self.encoder.b))
    }

    /// Registers the dialogues whose rollouts will be valued; rollouts refer
    /// to them by index.
    pub fn set_dialogues(&mut self, dialogues: &[&Dialogue]) {
        self.dialogues = dialogues.iter().map(|d| DialogueFeatures::new(&self.vocab, d)).collect();
    }

    fn prefix_rows(&self, dialogue: usize, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let df = self
            .dialogues
            .get(dialogue)
            .ok_or_else(|| Error::InvalidArgument(format!("value function has no dialogue {dialogue}")))?;
        Ok((0..tokens.len())
            .map(|t| pair_features_ids(&self.vocab, df, &tokens[..t]))
            .collect())
    }

    /// Value before each token of `tokens`.
    pub fn values(&self, dialogue: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let rows = self.prefix_rows(dialogue, tokens)?;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let n = rows.len();
        let x = Tensor::matrix(n, rows[0].len(), rows.concat())?;
        let rep = self.encoder.forward_values(&self.params, &x)?;
        Ok(self.head.forward_values(&self.params, &rep)?.into_data())
    }
}

impl Critic<Rollout> for ValueFunction {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn state_values(&self, g: &mut Graph, vars: &[Var], episodes: &[&Rollout]) -> Result<Rows> {
        let mut all = Vec::new();
        let mut rows = Vec::new();
        for (i, e) in episodes.iter().enumerate() {
            let r = self.prefix_rows(e.dialogue_index, &e.trajectory.tokens)?;
            for t in 0..r.len() {
                rows.push(Some((i, t)));
            }
            all.extend(r);
        }
        if all.is_empty() {
            return Err(Error::EmptyInput("value batch"));
        }
        let x = g.constant(Tensor::matrix(all.len(), all[0].len(), all.concat())?);
        let rep = self.encoder.forward(g, vars, x)?;
        let v = self.head.forward(g, vars, rep)?;
        Ok(Rows { values: v, rows })
    }
}

/// Dialogues to train on and their highlight sets.
pub struct HitlData<'a> {
    pub vocab: &'a Vocabulary,
    pub dialogues: Vec<&'a Dialogue>,
    pub highlights: HashMap<String, Vec<HighlightSet>>,
    pub local: LocalRewardConfig,
    /// Affine map `(r_g - shift) / scale` applied to the reward-model score
    /// so that its spread is comparable to the KL term.
    pub global_shift: f64,
    pub global_scale: f64,
}

impl<'a> HitlData<'a> {
    pub fn new(vocab: &'a Vocabulary, dialogues: Vec<&'a Dialogue>, local: LocalRewardConfig) -> Self {
        Self {
            vocab,
            dialogues,
            highlights: HashMap::new(),
            local,
            global_shift: 0.0,
            global_scale: 1.0,
        }
    }

    pub fn normalized_global(&self, raw: f64) -> f64 {
        (raw - self.global_shift) / self.global_scale
    }

    /// Mean local reward over the dialogue's highlight sets; 0 without any.
    pub fn local_reward(&self, dialogue: &Dialogue, summary: &str) -> Result<f64> {
        let Some(sets) = self.highlights.get(&dialogue.id).filter(|s| !s.is_empty()) else {
            return Ok(0.0);
        };
        let mut total = 0.0;
        for h in sets {
            total += local_reward(dialogue, summary, h, self.vocab, &self.local)?.value;
        }
        Ok(total / sets.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    /// Episodes completed at the end of this window.
    pub episode: usize,
    pub mean_env_reward: f64,
    pub mean_local_reward: f64,
    pub mean_global_reward: f64,
    /// Mean per-token `log π - log π_ref` of the sampled tokens.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub value_loss: f64,
}

pub struct HitlOutcome {
    pub policy: PolicyModel,
    pub value_function: ValueFunction,
    pub curve: Vec<WindowStats>,
    pub discarded: usize,
}

/// Collects, scores and advantage-annotates one rollout; `None` for an empty
/// trajectory.
#[allow(clippy::too_many_arguments)]
fn prepare(
    rollout: Rollout,
    data: &HitlData<'_>,
    rm: &GlobalRewardModel,
    rm_features: &[DialogueFeatures],
    value_fn: &ValueFunction,
    weights: &RewardWeights,
    gae_cfg: &GaeConfig,
    placement: KlPlacement,
) -> Result<Option<(PpoSample<Rollout>, f64, f64)>> {
    if rollout.trajectory.is_empty() {
        return Ok(None);
    }
    let d = data.dialogues[rollout.dialogue_index];
    let text = data.vocab.decode(rollout.trajectory.content());
    let r_l = data.local_reward(d, &text)?;
    let r_g = data.normalized_global(rm.global_reward_with(&rm_features[rollout.dialogue_index], &text)?);
    let rewards = assemble_rewards_with(&rollout.trajectory, r_l, r_g, weights, placement)?;
    let values = value_fn.values(rollout.dialogue_index, &rollout.trajectory.tokens)?;
    let (advantages, returns) = gae(&rewards, &values, 0.0, gae_cfg)?;
    let old = rollout.trajectory.log_probs.clone();
    Ok(Some((
        PpoSample {
            episode: rollout,
            old_log_probs: old,
            advantages,
            returns,
        },
        r_l,
        r_g,
    )))
}

/// Rollout → reward assembly → GAE → PPO update, until `total_episodes`
/// trajectories have been sampled.
#[allow(clippy::too_many_arguments)]
pub fn train_hitl(
    policy: PolicyModel,
    reference: &PolicyModel,
    reward_model: &GlobalRewardModel,
    value_fn: ValueFunction,
    data: &HitlData<'_>,
    weights: &RewardWeights,
    gae_cfg: &GaeConfig,
    cfg: &PpoConfig,
) -> Result<HitlOutcome> {
    train_hitl_observed(policy, reference, reward_model, value_fn, data, weights, gae_cfg, cfg, &mut |_, _| Ok(()))
}

/// Called after each logging window with its statistics and the current policy.
pub type WindowObserver<'a> = dyn FnMut(&WindowStats, &PolicyModel) -> Result<()> + 'a;

/// [`train_hitl`] that reports every logging window to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn train_hitl_observed(
    mut policy: PolicyModel,
    reference: &PolicyModel,
    reward_model: &GlobalRewardModel,
    mut value_fn: ValueFunction,
    data: &HitlData<'_>,
    weights: &RewardWeights,
    gae_cfg: &GaeConfig,
    cfg: &PpoConfig,
    observer: &mut WindowObserver<'_>,
) -> Result<HitlOutcome> {
    weights.validate()?;
    gae_cfg.validate()?;
    cfg.validate()?;
    if data.dialogues.is_empty() {
        return Err(Error::EmptyInput("no dialogues for PPO"));
    }
    if !(data.global_scale.is_finite() && data.global_scale > 0.0) {
        return Err(Error::InvalidArgument(format!("global_scale must be positive, got {}", data.global_scale)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let contexts: Vec<PolicyContext> = data
        .dialogues
        .iter()
        .map(|d| PolicyContext::from_text(data.vocab, &d.full_text()))
        .collect();
    let rm_features: Vec<DialogueFeatures> = data
        .dialogues
        .iter()
        .map(|d| DialogueFeatures::new(reward_model.vocab(), d))
        .collect();
    value_fn.set_dialogues(&data.dialogues);
    let mut opt = PpoOptimizer::new(cfg);
    let indices: Vec<usize> = (0..data.dialogues.len()).collect();

    let mut curve = Vec::new();
    let mut window = WindowAcc::default();
    let mut episodes = 0usize;
    let mut discarded = 0usize;
    while episodes < cfg.total_episodes {
        let n = cfg.batch_size.min(cfg.total_episodes - episodes);
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            let i = *indices.choose(&mut rng).expect("non-empty");
            let trajectory = policy.sample(Some(reference), &data.dialogues[i].id, &contexts[i], false, &mut rng)?;
            episodes += 1;
            let rollout = Rollout {
                trajectory,
                context: contexts[i].clone(),
                dialogue_index: i,
            };
            match prepare(rollout, data, reward_model, &rm_features, &value_fn, weights, gae_cfg, cfg.kl_placement)? {
                Some((sample, r_l, r_g)) => {
                    window.add_episode(&sample.episode.trajectory, r_l, r_g, weights);
                    batch.push(sample);
                }
                None => {
                    discarded += 1;
                    log::warn!("discarded an empty trajectory at episode {episodes}");
                }
            }
        }
        if !batch.is_empty() {
            let diag = ppo_update(&mut policy, &mut value_fn, &batch, cfg, &mut opt)?;
            window.add_update(&diag.last());
        }
        if window.episodes >= cfg.log_window.max(1) || episodes >= cfg.total_episodes {
            if window.episodes > 0 {
                let stats = window.finish(episodes);
                log::info!(
                    "episode {}: reward {:.4} kl {:.4} clip {:.3}",
                    stats.episode,
                    stats.mean_env_reward,
                    stats.mean_kl,
                    stats.clip_fraction
                );
                observer(&stats, &policy)?;
                curve.push(stats);
            }
            window = WindowAcc::default();
        }
    }
    Ok(HitlOutcome {
        policy,
        value_function: value_fn,
        curve,
        discarded,
    })
}

#[derive(Default)]
struct WindowAcc {
    episodes: usize,
    env: f64,
    local: f64,
    global: f64,
    kl: f64,
    tokens: usize,
    updates: usize,
    clip: f64,
    ratio: f64,
    value_loss: f64,
}

impl WindowAcc {
    fn add_episode(&mut self, t: &Trajectory, r_l: f64, r_g: f64, w: &RewardWeights) {
        self.episodes += 1;
        self.env += w.environment_reward(r_l, r_g);
        self.local += r_l;
        self.global += r_g;
        self.kl += t.log_ratio_sum();
        self.tokens += t.len();
    }

    fn add_update(&mut self, s: &EpochStats) {
        self.updates += 1;
        self.clip += s.clip_fraction;
        self.ratio += s.mean_ratio;
        self.value_loss += s.value_loss;
    }

    fn finish(&self, episode: usize) -> WindowStats {
        let e = self.episodes.max(1) as f64;
        let u = self.updates.max(1) as f64;
        WindowStats {
            episode,
            mean_env_reward: self.env / e,
            mean_local_reward: self.local / e,
            mean_global_reward: self.global / e,
            mean_kl: self.kl / self.tokens.max(1) as f64,
            clip_fraction: self.clip / u,
            mean_ratio: self.ratio / u,
            value_loss: self.value_loss / u,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(lp: Vec<f64>, rp: Vec<f64>) -> Trajectory {
        Trajectory {
            dialogue_id: "d".into(),
            tokens: vec![5; lp.len()],
            log_probs: lp,
            ref_log_probs: rp,
            terminated_by_eos: false,
        }
    }

    #[test]
    fn reward_assembly_worked_example() {
        let t = traj(vec![-0.5, -0.4, -0.6], vec![-0.55, -0.45, -0.6]);
        let r = assemble_rewards(&t, 0.5, 2.0, &RewardWeights::default()).unwrap();
        assert!((r.iter().sum::<f64>() - 3.495).abs() < 1e-12);
    }

    #[test]
    fn identical_policies_pay_only_terminal() {
        let t = traj(vec![-1.0, -2.0], vec![-1.0, -2.0]);
        let r = assemble_rewards(&t, 1.0, 1.0, &RewardWeights::default()).unwrap();
        assert_eq!(r, vec![0.0, 2.5]);
        let w = RewardWeights { beta: 0.0, ..Default::default() };
        let t = traj(vec![-1.0, -2.0], vec![-3.0, -0.5]);
        assert_eq!(assemble_rewards(&t, 1.0, 1.0, &w).unwrap(), vec![0.0, 2.5]);
    }

    #[test]
    fn terminal_placement_conserves() {
        let t = traj(vec![-1.0, -2.0, -0.1], vec![-1.5, -1.0, -0.3]);
        let w = RewardWeights::default();
        let a = assemble_rewards_with(&t, 0.3, 0.7, &w, KlPlacement::PerToken).unwrap();
        let b = assemble_rewards_with(&t, 0.3, 0.7, &w, KlPlacement::Terminal).unwrap();
        assert!((a.iter().sum::<f64>() - b.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(&b[..2], &[0.0, 0.0]);
    }

    #[test]
    fn assemble_errors() {
        let mut t = traj(vec![-1.0], vec![-1.0]);
        t.ref_log_probs.clear();
        assert!(assemble_rewards(&t, 0.0, 0.0, &RewardWeights::default()).is_err());
        let t = traj(vec![], vec![]);
        assert!(assemble_rewards(&t, 0.0, 0.0, &RewardWeights::default()).is_err());
    }

    #[test]
    fn gae_worked_example() {
        let (a, r) = gae(&[0.0, 0.0, 1.0], &[0.5; 3], 0.0, &GaeConfig::default()).unwrap();
        for (x, y) in a.iter().zip([0.45125, 0.475, 0.5]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((r[0] - 0.95125).abs() < 1e-12);
        assert!(gae(&[1.0], &[], 0.0, &GaeConfig::default()).is_err());
    }

    #[test]
    fn gae_limits() {
        let rewards = [0.3, -0.2, 1.1, 0.4];
        let values = [0.1, 0.7, -0.3, 0.2];
        let td = GaeConfig { gamma: 1.0, lambda: 0.0 };
        let (a, _) = gae(&rewards, &values, 0.0, &td).unwrap();
        for t in 0..4 {
            let next = if t + 1 < 4 { values[t + 1] } else { 0.0 };
            assert_eq!(a[t], rewards[t] + next - values[t]);
        }
        let mc = GaeConfig { gamma: 1.0, lambda: 1.0 };
        let (a, _) = gae(&rewards, &values, 0.0, &mc).unwrap();
        for t in 0..4 {
            let tail: f64 = rewards[t..].iter().sum();
            assert!((a[t] - (tail - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_advantages_are_centred_not_scaled() {
        let s = vec![PpoSample {
            episode: (),
            old_log_probs: vec![0.0; 3],
            advantages: vec![2.0; 3],
            returns: vec![0.0; 3],
        }];
        assert_eq!(normalized_advantages(&s, true), vec![vec![0.0; 3]]);
        assert_eq!(normalized_advantages(&s, false), vec![vec![2.0; 3]]);
    }
}
