//! Multi-dimension preference reward model.
//!
//! A shared encoder maps fixed text features of a (dialogue, summary) pair to
//! a dense representation; one two-layer head per [`Dimension`] turns the
//! representation into a scalar score. Training minimizes the pairwise
//! logistic loss `-ln σ(score(preferred) - score(other))` per supervised
//! dimension. The global reward is the sum of the five head scores.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndgrad::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Comparison, Corpus, Dialogue, Dimension, SummaryRecord};
use crate::textproc::{cosine, tokenize, EmbeddingVector, Vocabulary};
use crate::{Error, Result};

/// Fixed per-dialogue inputs to the feature map, computed once.
#[derive(Clone, Debug)]
pub struct DialogueFeatures {
    pub embedding: EmbeddingVector,
    pub token_count: usize,
    pub token_ids: HashSet<usize>,
    pub bigrams: HashSet<[usize; 2]>,
    pub trigrams: HashSet<[usize; 3]>,
}

impl DialogueFeatures {
    pub fn new(vocab: &Vocabulary, dialogue: &Dialogue) -> Self {
        let text = dialogue.full_text();
        let ids = vocab.encode(&text);
        Self {
            embedding: vocab.embed_ids(&ids),
            token_count: tokenize(&text).len(),
            bigrams: ids.windows(2).map(|w| [w[0], w[1]]).collect(),
            trigrams: ids.windows(3).map(|w| [w[0], w[1], w[2]]).collect(),
            token_ids: ids.into_iter().collect(),
        }
    }
}

/// Number of scalar interaction features appended after the three
/// embedding blocks.
pub const SCALAR_FEATURES: usize = 10;

const COUNT_SCALE: f64 = 10.0;

/// `[dialogue emb, summary emb, dialogue ⊙ summary, cosine, length ratio,
/// novel-token ratio, repeated-trigram ratio, unseen-bigram ratio,
/// unseen-trigram ratio, then the length, repeated, unseen-bigram and
/// unseen-trigram counts]`.
///
/// "Unseen" n-grams are absent from the dialogue. The bag-of-words blocks
/// cannot tell a faithful sentence from one that recombines dialogue words.
pub fn pair_features(vocab: &Vocabulary, dialogue: &DialogueFeatures, summary: &str) -> Vec<f64> {
    let ids = vocab.encode(summary);
    pair_features_ids(vocab, dialogue, &ids)
}

pub fn pair_features_ids(vocab: &Vocabulary, dialogue: &DialogueFeatures, summary_ids: &[usize]) -> Vec<f64> {
    let s = vocab.embed_ids(summary_ids);
    let d = dialogue.embedding.values();
    let f = d.len();
    let mut out = Vec::with_capacity(3 * f + SCALAR_FEATURES);
    out.extend_from_slice(d);
    out.extend_from_slice(s.values());
    out.extend(d.iter().zip(s.values()).map(|(a, b)| a * b));
    out.push(cosine(&dialogue.embedding, &s).unwrap_or(0.0));
    let len = summary_ids.len();
    out.push(len as f64 / dialogue.token_count.max(1) as f64);
    let novel = summary_ids.iter().filter(|t| !dialogue.token_ids.contains(t)).count();
    let distinct: HashSet<&[usize]> = summary_ids.windows(3).collect();
    let repeated = len.saturating_sub(2) - distinct.len();
    let unseen_bi = summary_ids.windows(2).filter(|w| !dialogue.bigrams.contains(&[w[0], w[1]])).count();
    let unseen_tri = summary_ids.windows(3).filter(|w| !dialogue.trigrams.contains(&[w[0], w[1], w[2]])).count();
    let ratio = |part: usize, whole: usize| if whole == 0 { 0.0 } else { part as f64 / whole as f64 };
    out.push(ratio(novel, len));
    out.push(ratio(repeated, len.saturating_sub(2)));
    out.push(ratio(unseen_bi, len.saturating_sub(1)));
    out.push(ratio(unseen_tri, len.saturating_sub(2)));
    // Absolute counts, scaled to roughly unit range.
    for count in [len, repeated, unseen_bi, unseen_tri] {
        out.push(count as f64 / COUNT_SCALE);
    }
    out
}

pub fn feature_dim(vocab: &Vocabulary) -> usize {
    3 * vocab.len() + SCALAR_FEATURES
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    Random,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub encoder_width: usize,
    pub head_hidden: usize,
    pub head_init: HeadInit,
    pub seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            encoder_width: 64,
            head_hidden: 256,
            head_init: HeadInit::Random,
            seed: 0,
        }
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Slots of one scoring head inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl HeadSlots {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        width: usize,
        hidden: usize,
        init: HeadInit,
        rng: &mut impl Rng,
    ) -> Self {
        let (w1, w2) = match init {
            HeadInit::Random => (xavier(rng, width, hidden), xavier(rng, hidden, 1)),
            HeadInit::Zero => (Tensor::zeros(&[width, hidden]), Tensor::zeros(&[hidden, 1])),
        };
        Self {
            w1: params.insert(format!("{prefix}.w1"), w1),
            b1: params.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: params.insert(format!("{prefix}.w2"), w2),
            b2: params.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, 1])),
        }
    }

    /// `tanh(rep W1 + b1) W2 + b2`, one score per row.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], rep: Var) -> Result<Var> {
        let h = g.matmul(rep, vars[self.w1])?;
        let h = g.add(h, vars[self.b1])?;
        let h = g.tanh(h);
        let o = g.matmul(h, vars[self.w2])?;
        Ok(g.add(o, vars[self.b2])?)
    }

    pub fn forward_values(&self, params: &ParamSet, rep: &Tensor) -> Result<Tensor> {
        let h = add_row(&rep.matmul(params.get(self.w1))?, params.get(self.b1)).map(f64::tanh);
        Ok(add_row(&h.matmul(params.get(self.w2))?, params.get(self.b2)))
    }
}

/// Slots of the shared feature encoder inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSlots {
    pub w: usize,
    pub b: usize,
}

impl EncoderSlots {
    pub fn forward(&self, g: &mut Graph, vars: &[Var], features: Var) -> Result<Var> {
        let h = g.matmul(features, vars[self.w])?;
        let h = g.add(h, vars[self.b])?;
        Ok(g.tanh(h))
    }

    pub fn forward_values(&self, params: &ParamSet, features: &Tensor) -> Result<Tensor> {
        Ok(add_row(&features.matmul(params.get(self.w))?, params.get(self.b)).map(f64::tanh))
    }
}

pub(crate) fn add_row(m: &Tensor, row: &Tensor) -> Tensor {
    let n = row.len();
    let data = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + row.data()[i % n])
        .collect();
    Tensor::new(m.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct GlobalRewardModel {
    pub config: RewardModelConfig,
    vocab: Vocabulary,
    params: ParamSet,
    encoder: EncoderSlots,
    heads: [HeadSlots; 5],
}

impl GlobalRewardModel {
    pub fn new(vocab: Vocabulary, config: RewardModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let fdim = feature_dim(&vocab);
        let encoder = EncoderSlots {
            w: params.insert("encoder.w", xavier(&mut rng, fdim, config.encoder_width)),
            b: params.insert("encoder.b", Tensor::zeros(&[1, config.encoder_width])),
        };
        let heads = Dimension::ALL.map(|d| {
            HeadSlots::register(
                &mut params,
                &format!("head.{d}"),
                config.encoder_width,
                config.head_hidden,
                config.head_init,
                &mut rng,
            )
        });
        Self {
            config,
            vocab,
            params,
            encoder,
            heads,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder_slots(&self) -> EncoderSlots {
        self.encoder
    }

    pub fn head_slots(&self, d: Dimension) -> HeadSlots {
        self.heads[d.index()]
    }

    /// The encoder's weight and bias tensors.
    pub fn encoder_tensors(&self) -> (&Tensor, &Tensor) {
        (self.params.get(self.encoder.w), self.params.get(self.encoder.b))
    }

    pub fn features(&self, dialogue: &DialogueFeatures, summary: &str) -> Vec<f64> {
        pair_features(&self.vocab, dialogue, summary)
    }

    fn feature_matrix(&self, rows: Vec<Vec<f64>>) -> Result<Tensor> {
        let n = rows.len();
        let d = feature_dim(&self.vocab);
        Ok(Tensor::matrix(n, d, rows.concat())?)
    }

    /// Encoder representation of one (dialogue, summary) pair, shape `[1, width]`.
    pub fn encode(&self, dialogue: &Dialogue, summary: &str) -> Result<Tensor> {
        let df = DialogueFeatures::new(&self.vocab, dialogue);
        let x = self.feature_matrix(vec![self.features(&df, summary)])?;
        self.encoder.forward_values(&self.params, &x)
    }

    /// All five dimension scores for each feature row.
    pub fn scores_for_features(&self, rows: Vec<Vec<f64>>) -> Result<Vec<[f64; 5]>> {
        let n = rows.len();
        let x = self.feature_matrix(rows)?;
        let rep = self.encoder.forward_values(&self.params, &x)?;
        let mut out = vec![[0.0; 5]; n];
        for d in Dimension::ALL {
            let s = self.heads[d.index()].forward_values(&self.params, &rep)?;
            for (r, v) in s.data().iter().enumerate() {
                out[r][d.index()] = *v;
            }
        }
        Ok(out)
    }

    pub fn score_all(&self, dialogue: &DialogueFeatures, summary: &str) -> Result<[f64; 5]> {
        Ok(self.scores_for_features(vec![self.features(dialogue, summary)])?[0])
    }

    pub fn score(&self, dialogue: &Dialogue, summary: &str, d: Dimension) -> Result<f64> {
        let df = DialogueFeatures::new(&self.vocab, dialogue);
        Ok(self.score_all(&df, summary)?[d.index()])
    }

    /// Sum of the five dimension scores.
    pub fn global_reward(&self, dialogue: &Dialogue, summary: &str) -> Result<f64> {
        let df = DialogueFeatures::new(&self.vocab, dialogue);
        self.global_reward_with(&df, summary)
    }

    pub fn global_reward_with(&self, dialogue: &DialogueFeatures, summary: &str) -> Result<f64> {
        Ok(self.score_all(dialogue, summary)?.iter().sum())
    }

    /// Graph version of the per-dimension scores: `[rows, 1]` per head.
    pub fn score_graph(&self, g: &mut Graph, vars: &[Var], features: Var) -> Result<[Var; 5]> {
        let rep = self.encoder.forward(g, vars, features)?;
        let mut out = [rep; 5];
        for d in Dimension::ALL {
            out[d.index()] = self.heads[d.index()].forward(g, vars, rep)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load_params(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.params.load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionLabel {
    pub dimension: Dimension,
    pub weight: f64,
}

/// `preferred` beat `other` on each supervised dimension. A `target` of 0.5
/// marks a soft tie instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub dialogue_id: String,
    pub preferred_summary_id: String,
    pub other_summary_id: String,
    pub dimensions: Vec<DimensionLabel>,
    pub target: f64,
}

impl PreferencePair {
    pub fn supervises(&self, d: Dimension) -> bool {
        self.dimensions.iter().any(|l| l.dimension == d)
    }

    /// The same fact stated from the other side.
    pub fn swapped(&self) -> Self {
        Self {
            preferred_summary_id: self.other_summary_id.clone(),
            other_summary_id: self.preferred_summary_id.clone(),
            target: 1.0 - self.target,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairOptions {
    /// Keep "equal" judgments as soft 0.5 targets instead of dropping them.
    pub soft_ties: bool,
    /// Weight "mostly better" (±2) judgments twice as much as ±1.
    pub weight_strong: bool,
}

pub fn comparison_to_pairs(c: &Comparison, opts: &PairOptions) -> Vec<PreferencePair> {
    let mut a_better = Vec::new();
    let mut b_better = Vec::new();
    let mut ties = Vec::new();
    for d in Dimension::ALL {
        let s = c.score(d);
        let weight = if opts.weight_strong && s.abs() == 2 { 2.0 } else { 1.0 };
        let label = DimensionLabel { dimension: d, weight };
        match s.signum() {
            1 => a_better.push(label),
            -1 => b_better.push(label),
            _ if opts.soft_ties => ties.push(label),
            _ => {}
        }
    }
    let make = |pref: &str, other: &str, dims: Vec<DimensionLabel>, target: f64| PreferencePair {
        dialogue_id: c.dialogue_id.clone(),
        preferred_summary_id: pref.to_string(),
        other_summary_id: other.to_string(),
        dimensions: dims,
        target,
    };
    let mut out = Vec::new();
    if !a_better.is_empty() {
        out.push(make(&c.summary_a_id, &c.summary_b_id, a_better, 1.0));
    }
    if !b_better.is_empty() {
        out.push(make(&c.summary_b_id, &c.summary_a_id, b_better, 1.0));
    }
    if !ties.is_empty() {
        out.push(make(&c.summary_a_id, &c.summary_b_id, ties, 0.5));
    }
    out
}

/// `-w [t ln σ(Δ) + (1 - t) ln σ(-Δ)]` for one score gap, evaluated directly.
pub fn pair_loss_value(delta: f64, target: f64, weight: f64) -> f64 {
    let ls = |x: f64| {
        if x >= 0.0 {
            -(-x).exp().ln_1p()
        } else {
            x - x.exp().ln_1p()
        }
    };
    -weight * (target * ls(delta) + (1.0 - target) * ls(-delta))
}

/// Resolves summary ids to records.
#[derive(Clone, Debug, Default)]
pub struct SummaryIndex {
    by_id: HashMap<String, SummaryRecord>,
}

impl SummaryIndex {
    pub fn new(records: impl IntoIterator<Item = SummaryRecord>) -> Self {
        Self {
            by_id: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&SummaryRecord> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown summary `{id}`")))
    }

    pub fn text(&self, id: &str) -> Result<&str> {
        Ok(&self.get(id)?.text)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn insert(&mut self, record: SummaryRecord) {
        self.by_id.insert(record.id.clone(), record);
    }
}

/// A pair with its feature rows resolved.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    pub pair: PreferencePair,
    pub preferred: Vec<f64>,
    pub other: Vec<f64>,
}

pub fn encode_pairs(
    model: &GlobalRewardModel,
    corpus: &Corpus,
    summaries: &SummaryIndex,
    pairs: &[PreferencePair],
) -> Result<Vec<EncodedPair>> {
    let mut cache: HashMap<&str, DialogueFeatures> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !cache.contains_key(p.dialogue_id.as_str()) {
            let d = corpus.get(&p.dialogue_id)?;
            cache.insert(&p.dialogue_id, DialogueFeatures::new(model.vocab(), d));
        }
        let df = &cache[p.dialogue_id.as_str()];
        out.push(EncodedPair {
            preferred: model.features(df, summaries.text(&p.preferred_summary_id)?),
            other: model.features(df, summaries.text(&p.other_summary_id)?),
            pair: p.clone(),
        });
    }
    Ok(out)
}

/// Mean pairwise loss of a batch as a graph node.
pub fn batch_loss(model: &GlobalRewardModel, g: &mut Graph, vars: &[Var], batch: &[&EncodedPair]) -> Result<Var> {
    let n = batch.len();
    let fdim = feature_dim(model.vocab());
    let pref = Tensor::matrix(n, fdim, batch.iter().flat_map(|p| p.preferred.iter().copied()).collect())?;
    let other = Tensor::matrix(n, fdim, batch.iter().flat_map(|p| p.other.iter().copied()).collect())?;
    let xp = g.constant(pref);
    let xo = g.constant(other);
    let sp = model.score_graph(g, vars, xp)?;
    let so = model.score_graph(g, vars, xo)?;
    let mut terms = Vec::new();
    for d in Dimension::ALL {
        let mut pos = vec![0.0; n];
        let mut neg = vec![0.0; n];
        for (r, p) in batch.iter().enumerate() {
            if let Some(l) = p.pair.dimensions.iter().find(|l| l.dimension == d) {
                pos[r] = l.weight * p.pair.target;
                neg[r] = l.weight * (1.0 - p.pair.target);
            }
        }
        if pos.iter().chain(&neg).all(|w| *w == 0.0) {
            continue;
        }
        let delta = g.sub(sp[d.index()], so[d.index()])?;
        let ls_pos = g.log_sigmoid(delta);
        let wp = g.constant(Tensor::matrix(n, 1, pos)?);
        let t = g.mul(ls_pos, wp)?;
        terms.push(g.sum(t));
        if neg.iter().any(|w| *w != 0.0) {
            let nd = g.neg(delta);
            let ls_neg = g.log_sigmoid(nd);
            let wn = g.constant(Tensor::matrix(n, 1, neg)?);
            let t = g.mul(ls_neg, wn)?;
            terms.push(g.sum(t));
        }
    }
    if terms.is_empty() {
        return Err(Error::EmptyInput("batch has no supervised dimensions"));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Summed loss of one pair over its supervised dimensions.
pub fn pairwise_loss(model: &GlobalRewardModel, pair: &EncodedPair) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params().bind_frozen(&mut g);
    let loss = batch_loss(model, &mut g, &vars, &[pair])?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub pairs: PairOptions,
    pub max_grad_norm: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            learning_rate: 3e-3,
            validation_fraction: 0.2,
            seed: 0,
            pairs: PairOptions::default(),
            max_grad_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub train_pairs: usize,
    pub validation_pairs: usize,
    /// Held-out accuracy of each head on the pairs it supervises.
    pub per_dimension_accuracy: BTreeMap<Dimension, Option<f64>>,
    /// Held-out accuracy pooled over every (pair, dimension) label.
    pub pooled_accuracy: Option<f64>,
    /// Mean training loss before training, then after each epoch.
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

fn mean_loss(model: &GlobalRewardModel, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let vars = model.params().bind_frozen(&mut g);
    let mut total = 0.0;
    for chunk in pairs.chunks(64) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let loss = batch_loss(model, &mut g, &vars, &refs)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Accuracy per dimension; `None` where a dimension has no strict labels.
pub type PerDimension = BTreeMap<Dimension, Option<f64>>;

/// Per-dimension and pooled accuracy: a strict label counts as correct when
/// the preferred summary scores strictly higher.
pub fn pair_accuracy(
    model: &GlobalRewardModel,
    pairs: &[EncodedPair],
) -> Result<(PerDimension, Option<f64>)> {
    let mut hits = [0usize; 5];
    let mut totals = [0usize; 5];
    for p in pairs.iter().filter(|p| p.pair.target == 1.0) {
        let s = model.scores_for_features(vec![p.preferred.clone(), p.other.clone()])?;
        for l in &p.pair.dimensions {
            let j = l.dimension.index();
            totals[j] += 1;
            if s[0][j] > s[1][j] {
                hits[j] += 1;
            }
        }
    }
    let per = Dimension::ALL
        .iter()
        .map(|d| {
            let j = d.index();
            (*d, (totals[j] > 0).then(|| hits[j] as f64 / totals[j] as f64))
        })
        .collect();
    let all: usize = totals.iter().sum();
    let pooled = (all > 0).then(|| hits.iter().sum::<usize>() as f64 / all as f64);
    Ok((per, pooled))
}

/// Splits comparisons 8:2 (by default), converts both parts to preference
/// pairs and fits the model with Adam on the training part.
pub fn train_reward_model(
    mut model: GlobalRewardModel,
    corpus: &Corpus,
    summaries: &SummaryIndex,
    comparisons: &[Comparison],
    cfg: &RewardTrainConfig,
) -> Result<(GlobalRewardModel, ValidationReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<&Comparison> = comparisons.iter().collect();
    order.shuffle(&mut rng);
    let n_val = (order.len() as f64 * cfg.validation_fraction).round() as usize;
    let (val_c, train_c) = order.split_at(n_val.min(order.len()));
    let to_pairs = |cs: &[&Comparison]| -> Vec<PreferencePair> {
        cs.iter()
            .flat_map(|c| comparison_to_pairs(c, &cfg.pairs))
            .collect()
    };
    let train_pairs = to_pairs(train_c);
    if train_pairs.is_empty() {
        return Err(Error::EmptyInput("no usable preference pairs after tie filtering"));
    }
    let train = encode_pairs(&model, corpus, summaries, &train_pairs)?;
    let val = encode_pairs(&model, corpus, summaries, &to_pairs(val_c))?;

    let mut report = ValidationReport {
        train_pairs: train.len(),
        validation_pairs: val.len(),
        ..Default::default()
    };
    report.train_loss.push(mean_loss(&model, &train)?);
    report.validation_loss.push(mean_loss(&model, &val)?);

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let loss = batch_loss(&model, &mut g, &vars, &batch)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Numeric(format!("non-finite reward-model loss in epoch {epoch}")));
            }
            g.backward(loss)?;
            let mut grads = model.params().grads(&g, &vars);
            ndgrad::clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.step(model.params_mut(), &grads)?;
        }
        report.train_loss.push(mean_loss(&model, &train)?);
        report.validation_loss.push(mean_loss(&model, &val)?);
        log::debug!(
            "reward model epoch {}: train {:.4} val {:.4}",
            epoch + 1,
            report.train_loss.last().unwrap(),
            report.validation_loss.last().unwrap()
        );
    }
    let (per, pooled) = pair_accuracy(&model, &val)?;
    report.per_dimension_accuracy = per;
    report.pooled_accuracy = pooled;
    Ok((model, report))
}

/// A pair with a strict human preference, for agreement measurement.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPair<'a> {
    pub dialogue: &'a Dialogue,
    pub preferred: &'a str,
    pub other: &'a str,
}

/// Fraction of pairs on which `scorer` ranks the preferred summary strictly higher.
pub fn agreement_rate(
    pairs: &[LabeledPair<'_>],
    mut scorer: impl FnMut(&Dialogue, &str) -> f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("agreement pairs"));
    }
    let agree = pairs
        .iter()
        .filter(|p| scorer(p.dialogue, p.preferred) > scorer(p.dialogue, p.other))
        .count();
    Ok(agree as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["alice books the hotel", "bob buys tickets on monday"], 1).unwrap()
    }

    fn dialogue() -> Dialogue {
        Dialogue {
            id: "d".into(),
            turns: vec![
                Turn::new("alice", "i will book the hotel"),
                Turn::new("bob", "tickets on monday"),
            ],
            reference_summary: None,
        }
    }

    #[test]
    fn closed_form_losses() {
        assert!((pair_loss_value(0.0, 1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((pair_loss_value(1.0, 1.0, 1.0) - 0.313_261_69).abs() < 1e-8);
        assert!((pair_loss_value(10.0, 1.0, 1.0) - 4.5398e-5).abs() < 1e-8);
    }

    #[test]
    fn zero_heads_score_zero() {
        let m = GlobalRewardModel::new(
            vocab(),
            RewardModelConfig {
                head_init: HeadInit::Zero,
                ..Default::default()
            },
        );
        let d = dialogue();
        assert_eq!(m.global_reward(&d, "alice books the hotel").unwrap(), 0.0);
        for dim in Dimension::ALL {
            assert_eq!(m.score(&d, "anything", dim).unwrap(), 0.0);
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = GlobalRewardModel::new(vocab(), RewardModelConfig::default());
        let d = dialogue();
        let a = m.encode(&d, "alice books the hotel").unwrap();
        assert_eq!(a.shape(), &[1, 64]);
        assert_eq!(a, m.encode(&d, "alice books the hotel").unwrap());
        assert_ne!(a, m.encode(&d, "bob buys tickets").unwrap());
    }

    #[test]
    fn global_reward_is_sum_of_heads() {
        let m = GlobalRewardModel::new(vocab(), RewardModelConfig::default());
        let d = dialogue();
        let s = "bob buys tickets on monday";
        let sum: f64 = Dimension::ALL.iter().map(|&j| m.score(&d, s, j).unwrap()).sum();
        assert!((m.global_reward(&d, s).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn graph_and_value_paths_agree() {
        let m = GlobalRewardModel::new(vocab(), RewardModelConfig::default());
        let df = DialogueFeatures::new(m.vocab(), &dialogue());
        let f = m.features(&df, "alice buys the tickets");
        let direct = m.scores_for_features(vec![f.clone()]).unwrap()[0];
        let mut g = Graph::new();
        let vars = m.params().bind_frozen(&mut g);
        let x = g.constant(Tensor::row(f));
        let s = m.score_graph(&mut g, &vars, x).unwrap();
        for d in Dimension::ALL {
            assert!((g.value(s[d.index()]).item() - direct[d.index()]).abs() < 1e-12);
        }
    }

    #[test]
    fn comparison_conversion() {
        let c = Comparison {
            dialogue_id: "d".into(),
            summary_a_id: "a".into(),
            summary_b_id: "b".into(),
            annotator_id: "x".into(),
            scores: [
                (Dimension::Coherence, 2),
                (Dimension::Accuracy, 1),
                (Dimension::Coverage, 0),
                (Dimension::Conciseness, -1),
                (Dimension::Overall, 0),
            ]
            .into_iter()
            .collect(),
        };
        let pairs = comparison_to_pairs(&c, &PairOptions::default());
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].preferred_summary_id, "a");
        assert_eq!(pairs[0].dimensions.len(), 2);
        assert_eq!(pairs[1].preferred_summary_id, "b");
        assert!(pairs[1].supervises(Dimension::Conciseness));

        let soft = comparison_to_pairs(
            &c,
            &PairOptions {
                soft_ties: true,
                weight_strong: true,
            },
        );
        assert_eq!(soft.len(), 3);
        assert_eq!(soft[0].dimensions[0].weight, 2.0);
        assert_eq!(soft[2].target, 0.5);
    }

    #[test]
    fn agreement_tie_rule() {
        let d = dialogue();
        let pairs = vec![
            LabeledPair {
                dialogue: &d,
                preferred: "good",
                other: "bad",
            };
            4
        ];
        assert_eq!(agreement_rate(&pairs, |_, _| 1.0).unwrap(), 0.0);
        let oracle = |_: &Dialogue, s: &str| if s == "good" { 1.0 } else { 0.0 };
        assert_eq!(agreement_rate(&pairs, oracle).unwrap(), 1.0);
        assert!(agreement_rate(&[], oracle).is_err());
    }
}
