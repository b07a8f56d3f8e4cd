//! Autoregressive summarization policy: a tanh recurrent decoder conditioned
//! on a learned projection of the dialogue's mean token embedding.

use std::path::Path;

use ndgrad::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::reward_global::xavier;
use crate::textproc::{Vocabulary, BOS, EOS, PAD};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_length: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            max_length: 32,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Normalized bag of the dialogue's non-special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyContext {
    bag: Vec<(usize, f64)>,
}

impl PolicyContext {
    pub fn from_ids(ids: &[usize]) -> Self {
        let mut counts = std::collections::BTreeMap::new();
        let mut n = 0usize;
        for &id in ids.iter().filter(|&&i| !Vocabulary::is_special(i)) {
            *counts.entry(id).or_insert(0usize) += 1;
            n += 1;
        }
        Self {
            bag: counts
                .into_iter()
                .map(|(id, c)| (id, c as f64 / n as f64))
                .collect(),
        }
    }

    pub fn from_text(vocab: &Vocabulary, text: &str) -> Self {
        Self::from_ids(&vocab.encode(text))
    }

    pub fn bag(&self) -> &[(usize, f64)] {
        &self.bag
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slots {
    emb: usize,
    ctx_w: usize,
    ctx_b: usize,
    w_x: usize,
    w_h: usize,
    w_c: usize,
    b_h: usize,
    w_o: usize,
    b_o: usize,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    vocab_size: usize,
    params: ParamSet,
    slots: Slots,
}

/// A sampled summary with per-token log-probabilities under the acting policy
/// and under the reference policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dialogue_id: String,
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    pub terminated_by_eos: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens before the terminating EOS.
    pub fn content(&self) -> &[usize] {
        if self.terminated_by_eos {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// `Σ_t log π(t) - log π_ref(t)`.
    pub fn log_ratio_sum(&self) -> f64 {
        self.log_probs.iter().zip(&self.ref_log_probs).map(|(a, b)| a - b).sum()
    }
}

/// Teacher-forced log-probabilities of a batch, one graph row per
/// (step, sequence), time-major.
pub struct BatchLogProbs {
    /// Shape `[steps * batch]`.
    pub log_probs: Var,
    /// `rows[i] = Some((sequence, step))` for real tokens, `None` for padding.
    pub rows: Vec<Option<(usize, usize)>>,
}

fn log_softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

impl PolicyModel {
    // Negated comparisons below reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(vocab_size: usize, config: PolicyConfig) -> Result<Self> {
        if config.max_length == 0 {
            return Err(Error::Config("max_length must be at least 1".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if vocab_size <= EOS {
            return Err(Error::Config("vocabulary too small".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, e, h) = (vocab_size, config.embed_dim, config.hidden_dim);
        let mut params = ParamSet::new();
        let emb = Tensor::matrix(v, e, (0..v * e).map(|_| rng.gen_range(-0.1..0.1)).collect())?;
        let slots = Slots {
            emb: params.insert("policy.embedding", emb),
            ctx_w: params.insert("policy.context.w", xavier(&mut rng, e, h)),
            ctx_b: params.insert("policy.context.b", Tensor::zeros(&[1, h])),
            w_x: params.insert("policy.cell.w_x", xavier(&mut rng, e, h)),
            w_h: params.insert("policy.cell.w_h", xavier(&mut rng, h, h)),
            w_c: params.insert("policy.cell.w_c", xavier(&mut rng, h, h)),
            b_h: params.insert("policy.cell.b", Tensor::zeros(&[1, h])),
            w_o: params.insert("policy.out.w", xavier(&mut rng, h, v)),
            b_o: params.insert("policy.out.b", Tensor::zeros(&[1, v])),
        };
        Ok(Self {
            config,
            vocab_size,
            params,
            slots,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Deep copy used as the frozen reference policy.
    pub fn clone_frozen(&self) -> Self {
        self.clone()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.params.load(path)?)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size) {
            Some(t) => Err(Error::InvalidArgument(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn p(&self, slot: usize) -> &[f64] {
        self.params.get(slot).data()
    }

    /// `row · W` for a row-major `W` of shape `[row.len(), cols]`.
    fn vec_mat(row: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &x) in row.iter().enumerate() {
            if x != 0.0 {
                for (o, wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                    *o += x * wv;
                }
            }
        }
    }

    /// Initial hidden state and the per-step context term.
    fn start(&self, ctx: &PolicyContext) -> (Vec<f64>, Vec<f64>) {
        let (e, h) = (self.config.embed_dim, self.config.hidden_dim);
        let emb = self.p(self.slots.emb);
        let mut mean = vec![0.0; e];
        for &(id, wgt) in &ctx.bag {
            if id < self.vocab_size {
                for (m, v) in mean.iter_mut().zip(&emb[id * e..(id + 1) * e]) {
                    *m += wgt * v;
                }
            }
        }
        let mut c = vec![0.0; h];
        Self::vec_mat(&mean, self.p(self.slots.ctx_w), h, &mut c);
        for (x, b) in c.iter_mut().zip(self.p(self.slots.ctx_b)) {
            *x = (*x + b).tanh();
        }
        let mut cc = vec![0.0; h];
        Self::vec_mat(&c, self.p(self.slots.w_c), h, &mut cc);
        for (x, b) in cc.iter_mut().zip(self.p(self.slots.b_h)) {
            *x += b;
        }
        (c, cc)
    }

    fn step(&self, state: &[f64], cc: &[f64], input: usize) -> Vec<f64> {
        let (e, h) = (self.config.embed_dim, self.config.hidden_dim);
        let x = &self.p(self.slots.emb)[input * e..(input + 1) * e];
        let mut a = vec![0.0; h];
        let mut b = vec![0.0; h];
        Self::vec_mat(x, self.p(self.slots.w_x), h, &mut a);
        Self::vec_mat(state, self.p(self.slots.w_h), h, &mut b);
        a.iter()
            .zip(&b)
            .zip(cc)
            .map(|((x, y), c)| (x + y + c).tanh())
            .collect()
    }

    /// Tempered next-token log-distribution from a hidden state.
    fn log_dist(&self, state: &[f64]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut logits = vec![0.0; v];
        Self::vec_mat(state, self.p(self.slots.w_o), v, &mut logits);
        let t = self.config.temperature;
        for (l, b) in logits.iter_mut().zip(self.p(self.slots.b_o)) {
            *l = (*l + b) / t;
        }
        log_softmax_in_place(&mut logits);
        logits
    }

    /// Teacher-forced next-token log-distributions before each token.
    pub fn step_log_distributions(&self, ctx: &PolicyContext, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let (mut state, cc) = self.start(ctx);
        let mut out = Vec::with_capacity(tokens.len());
        let mut input = BOS;
        for &t in tokens {
            state = self.step(&state, &cc, input);
            out.push(self.log_dist(&state));
            input = t;
        }
        Ok(out)
    }

    /// Teacher-forced per-token log-probabilities of `tokens`.
    pub fn log_prob(&self, ctx: &PolicyContext, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .step_log_distributions(ctx, tokens)?
            .iter()
            .zip(tokens)
            .map(|(d, &t)| d[t])
            .collect())
    }

    /// Ancestral sampling (or argmax when `greedy`) until EOS or `max_length`.
    /// Reference log-probabilities come from `reference`, or from this model
    /// when none is given.
    pub fn sample(
        &self,
        reference: Option<&PolicyModel>,
        dialogue_id: &str,
        ctx: &PolicyContext,
        greedy: bool,
        rng: &mut impl Rng,
    ) -> Result<Trajectory> {
        let (mut state, cc) = self.start(ctx);
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        let mut input = BOS;
        let mut eos = false;
        while tokens.len() < self.config.max_length {
            state = self.step(&state, &cc, input);
            let dist = self.log_dist(&state);
            let tok = if greedy {
                argmax(&dist)
            } else {
                sample_index(&dist, rng)
            };
            tokens.push(tok);
            log_probs.push(dist[tok]);
            input = tok;
            if tok == EOS {
                eos = true;
                break;
            }
        }
        let ref_log_probs = match reference {
            Some(r) => r.log_prob(ctx, &tokens)?,
            None => log_probs.clone(),
        };
        Ok(Trajectory {
            dialogue_id: dialogue_id.into(),
            tokens,
            log_probs,
            ref_log_probs,
            terminated_by_eos: eos,
        })
    }

    pub fn greedy(&self, ctx: &PolicyContext) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.sample(None, "", ctx, true, &mut rng)?.tokens)
    }

    /// Greedy summary text, specials dropped.
    pub fn summarize(&self, vocab: &Vocabulary, dialogue_text: &str) -> Result<String> {
        let ctx = PolicyContext::from_text(vocab, dialogue_text);
        Ok(vocab.decode(&self.greedy(&ctx)?))
    }

    /// Batched teacher-forced forward pass on the graph.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        vars: &[Var],
        contexts: &[&PolicyContext],
        targets: &[&[usize]],
    ) -> Result<BatchLogProbs> {
        if contexts.len() != targets.len() {
            return Err(Error::DimensionMismatch(contexts.len(), targets.len()));
        }
        if targets.is_empty() {
            return Err(Error::EmptyInput("policy batch"));
        }
        for t in targets {
            self.check_tokens(t)?;
        }
        let b = targets.len();
        let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::EmptyInput("policy batch has no tokens"));
        }
        let v = self.vocab_size;
        let s = &self.slots;

        let mut bag = vec![0.0; b * v];
        for (i, c) in contexts.iter().enumerate() {
            for &(id, w) in &c.bag {
                if id < v {
                    bag[i * v + id] = w;
                }
            }
        }
        let bag = g.constant(Tensor::matrix(b, v, bag)?);
        let mean = g.matmul(bag, vars[s.emb])?;
        let c = g.matmul(mean, vars[s.ctx_w])?;
        let c = g.add(c, vars[s.ctx_b])?;
        let c = g.tanh(c);
        let cc = g.matmul(c, vars[s.w_c])?;
        let cc = g.add(cc, vars[s.b_h])?;

        let mut onehot = vec![0.0; steps * b * v];
        let mut flat_targets = vec![PAD; steps * b];
        let mut rows = vec![None; steps * b];
        for t in 0..steps {
            for (i, seq) in targets.iter().enumerate() {
                let r = t * b + i;
                let input = if t == 0 { BOS } else { seq.get(t - 1).copied().unwrap_or(PAD) };
                onehot[r * v + input] = 1.0;
                if let Some(&tok) = seq.get(t) {
                    flat_targets[r] = tok;
                    rows[r] = Some((i, t));
                }
            }
        }
        let x = g.constant(Tensor::matrix(steps * b, v, onehot)?);
        let xe = g.matmul(x, vars[s.emb])?;
        let xw = g.matmul(xe, vars[s.w_x])?;

        let mut h = c;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice(xw, t * b, (t + 1) * b)?;
            let rec = g.matmul(h, vars[s.w_h])?;
            let pre = g.add(xt, rec)?;
            let pre = g.add(pre, cc)?;
            h = g.tanh(pre);
            states.push(h);
        }
        let all = g.concat(&states, 0)?;
        let logits = g.matmul(all, vars[s.w_o])?;
        let logits = g.add(logits, vars[s.b_o])?;
        let logits = if self.config.temperature != 1.0 {
            g.scale(logits, 1.0 / self.config.temperature)
        } else {
            logits
        };
        let ce = g.softmax_cross_entropy(logits, &flat_targets)?;
        Ok(BatchLogProbs {
            log_probs: g.neg(ce),
            rows,
        })
    }

    /// Mean teacher-forced cross-entropy per token of a batch.
    pub fn nll_loss(&self, g: &mut Graph, vars: &[Var], contexts: &[&PolicyContext], targets: &[&[usize]]) -> Result<Var> {
        let out = self.forward_batch(g, vars, contexts, targets)?;
        let n = out.rows.iter().filter(|r| r.is_some()).count() as f64;
        let mask: Vec<f64> = out.rows.iter().map(|r| if r.is_some() { -1.0 / n } else { 0.0 }).collect();
        let len = mask.len();
        let m = g.constant(Tensor::new(vec![len], mask)?);
        let weighted = g.mul(out.log_probs, m)?;
        Ok(g.sum(weighted))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a log-distribution by inverse CDF.
pub fn sample_index(log_dist: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_dist.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass; fall back to the most likely token.
    argmax(log_dist)
}

/// Exact `KL(p || q)` between two log-distributions.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(p, q)| if p.is_finite() { p.exp() * (p - q) } else { 0.0 })
        .sum()
}

/// Dialogue context plus target summary tokens (ending in EOS).
#[derive(Clone, Debug)]
pub struct SupervisedExample {
    pub context: PolicyContext,
    pub target: Vec<usize>,
}

impl SupervisedExample {
    /// Encodes `summary`, truncating so the target including EOS fits `max_length`.
    pub fn new(vocab: &Vocabulary, dialogue_text: &str, summary: &str, max_length: usize) -> Self {
        let mut target = vocab.encode(summary);
        target.truncate(max_length.saturating_sub(1));
        target.push(EOS);
        Self {
            context: PolicyContext::from_text(vocab, dialogue_text),
            target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            validation_fraction: 0.1,
            max_grad_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-token training cross-entropy over each epoch.
    pub train_loss: Vec<f64>,
    /// Per-token cross-entropy on the held-out part after each epoch.
    pub validation_loss: Vec<f64>,
    pub validation_perplexity: Vec<f64>,
}

/// Per-token cross-entropy of `examples` under `model`, no gradients.
pub fn mean_nll(model: &PolicyModel, examples: &[SupervisedExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(32) {
        let mut g = Graph::new();
        let vars = model.params().bind_frozen(&mut g);
        let ctx: Vec<&PolicyContext> = chunk.iter().map(|e| &e.context).collect();
        let tgt: Vec<&[usize]> = chunk.iter().map(|e| e.target.as_slice()).collect();
        let n: usize = tgt.iter().map(|t| t.len()).sum();
        let loss = model.nll_loss(&mut g, &vars, &ctx, &tgt)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyInput("no target tokens"));
    }
    Ok(total / count as f64)
}

/// Maximum-likelihood training on reference summaries.
pub fn pretrain_supervised(
    mut model: PolicyModel,
    examples: &[SupervisedExample],
    cfg: &PretrainConfig,
) -> Result<(PolicyModel, PretrainReport)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no reference summaries to pretrain on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(examples.len() - 1);
    let val: Vec<SupervisedExample> = order[..n_val].iter().map(|&i| examples[i].clone()).collect();
    let mut train: Vec<usize> = order[n_val..].to_vec();

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut report = PretrainReport::default();
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut tokens = 0usize;
        for chunk in train.chunks(cfg.batch_size.max(1)) {
            let ctx: Vec<&PolicyContext> = chunk.iter().map(|&i| &examples[i].context).collect();
            let tgt: Vec<&[usize]> = chunk.iter().map(|&i| examples[i].target.as_slice()).collect();
            let n: usize = tgt.iter().map(|t| t.len()).sum();
            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let loss = model.nll_loss(&mut g, &vars, &ctx, &tgt)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite pretraining loss in epoch {epoch}")));
            }
            sum += lv * n as f64;
            tokens += n;
            g.backward(loss)?;
            let mut grads = model.params().grads(&g, &vars);
            ndgrad::clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.step(model.params_mut(), &grads)?;
        }
        report.train_loss.push(sum / tokens.max(1) as f64);
        if !val.is_empty() {
            let vl = mean_nll(&model, &val)?;
            report.validation_loss.push(vl);
            report.validation_perplexity.push(vl.exp());
        }
        log::debug!(
            "pretrain epoch {}: train {:.4} val {:?}",
            epoch + 1,
            report.train_loss.last().unwrap(),
            report.validation_loss.last()
        );
    }
    Ok((model, report))
}
