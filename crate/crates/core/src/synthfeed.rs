//! Synthetic feedback: a templated dialogue world with a hidden scoring
//! oracle, simulated annotators, and the synthesis baselines (greedy
//! highlights and random-utterance negatives).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    split_sentences, Comparison, Dialogue, Dimension, HighlightSet, Span, SummaryRecord, SummarySource, Turn,
};
use crate::metrics::rouge_n_tokens;
use crate::textproc::tokenize;
use crate::{Error, Result};

pub const PEOPLE: [&str; 6] = ["alice", "bob", "carol", "dave", "emma", "frank"];
pub const EVENTS: [[&str; 2]; 12] = [
    ["buy", "tickets"],
    ["book", "hotel"],
    ["call", "mom"],
    ["fix", "car"],
    ["pay", "rent"],
    ["clean", "kitchen"],
    ["visit", "grandma"],
    ["return", "books"],
    ["order", "pizza"],
    ["walk", "dog"],
    ["bake", "cake"],
    ["paint", "fence"],
];
pub const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
pub const TOPICS: [&str; 6] = ["weather", "traffic", "lunch", "movie", "game", "music"];
pub const MOODS: [&str; 4] = ["nice", "awful", "great", "boring"];
/// Small-talk words besides topics and moods.
const CHATTER: [&str; 3] = ["chat", "about", "today"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldConfig {
    pub dialogues: usize,
    /// Dialogues held out for evaluation, taken from the end.
    pub test_dialogues: usize,
    pub facts_per_dialogue: usize,
    pub distractors_per_dialogue: usize,
    pub seed: u64,
    /// Chance that a reference summary ends with a small-talk clause.
    pub filler_probability: f64,
    /// Per-dimension flip probability of simulated comparisons.
    pub preference_noise: f64,
    /// Chance that a simulated highlighter misses a fact.
    pub highlight_miss: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            dialogues: 1200,
            test_dialogues: 200,
            facts_per_dialogue: 3,
            distractors_per_dialogue: 3,
            seed: 0,
            filler_probability: 0.7,
            preference_noise: 0.0,
            highlight_miss: 0.0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("filler_probability", self.filler_probability),
            ("preference_noise", self.preference_noise),
            ("highlight_miss", self.highlight_miss),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.facts_per_dialogue == 0 || self.facts_per_dialogue > EVENTS.len() {
            return Err(Error::Config(format!(
                "facts_per_dialogue must be in 1..={}",
                EVENTS.len()
            )));
        }
        if self.test_dialogues > self.dialogues {
            return Err(Error::Config("test_dialogues exceeds dialogues".into()));
        }
        Ok(())
    }
}

/// One planned event: who does what on which day, and where it was said.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub person: String,
    pub event: usize,
    pub day: String,
    pub span: Span,
}

impl Fact {
    pub fn key_tokens(&self) -> Vec<String> {
        let [a, b] = EVENTS[self.event];
        vec![self.person.clone(), a.into(), b.into(), self.day.clone()]
    }

    pub fn realize(&self) -> String {
        let [a, b] = EVENTS[self.event];
        format!("{} will {a} {b} on {} .", self.person, self.day)
    }
}

/// Interpretable properties of a summary that the oracle scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFeatures {
    /// Mean over facts of the fraction of that fact's key tokens present.
    pub coverage: f64,
    pub distractor_tokens: f64,
    /// Fact-vocabulary tokens that do not belong to this dialogue's facts.
    pub hallucinated_tokens: f64,
    /// Trigram occurrences beyond the first of each distinct trigram.
    pub repeated_trigrams: f64,
    /// Sentences that follow neither the fact nor the chatter template.
    pub malformed_sentences: f64,
    pub length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub coverage: f64,
    pub distractor: f64,
    pub hallucination: f64,
    pub repetition: f64,
    pub malformed: f64,
    pub length: f64,
}

impl FeatureWeights {
    fn apply(&self, f: &OracleFeatures) -> f64 {
        self.coverage * f.coverage
            + self.distractor * f.distractor_tokens
            + self.hallucination * f.hallucinated_tokens
            + self.repetition * f.repeated_trigrams
            + self.malformed * f.malformed_sentences
            + self.length * f.length
    }
}

const fn w(coverage: f64, distractor: f64, hallucination: f64, repetition: f64, malformed: f64, length: f64) -> FeatureWeights {
    FeatureWeights {
        coverage,
        distractor,
        hallucination,
        repetition,
        malformed,
        length,
    }
}

/// Ground-truth judge of the synthetic world. Only simulated annotators and
/// evaluation see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenOracle {
    /// Indexed by [`Dimension::index`].
    pub weights: [FeatureWeights; 5],
    /// Score gaps at or below this are "equal".
    pub tie_band: f64,
    /// Gaps at or above this are "mostly better".
    pub strong_threshold: f64,
    facts: BTreeMap<String, Vec<Vec<String>>>,
    fact_vocab: BTreeSet<String>,
    distractor_vocab: BTreeSet<String>,
}

impl HiddenOracle {
    pub fn new(facts: BTreeMap<String, Vec<Vec<String>>>) -> Self {
        let fact_vocab = PEOPLE
            .iter()
            .chain(EVENTS.iter().flatten())
            .chain(DAYS.iter())
            .map(|s| s.to_string())
            .collect();
        let distractor_vocab = TOPICS
            .iter()
            .chain(MOODS.iter())
            .chain(CHATTER.iter())
            .map(|s| s.to_string())
            .collect();
        Self {
            weights: [
                w(0.0, 0.0, -0.5, -1.0, -1.5, 0.0),
                w(0.5, 0.0, -2.0, 0.0, 0.0, 0.0),
                w(3.0, 0.0, 0.0, 0.0, 0.0, -0.02),
                w(0.0, -0.6, 0.0, -0.5, 0.0, -0.05),
                w(3.0, -0.5, -1.0, -0.5, -1.0, -0.01),
            ],
            tie_band: 0.05,
            strong_threshold: 0.5,
            facts,
            fact_vocab,
            distractor_vocab,
        }
    }

    pub fn knows(&self, dialogue_id: &str) -> bool {
        self.facts.contains_key(dialogue_id)
    }

    pub fn features(&self, dialogue_id: &str, summary: &str) -> Result<OracleFeatures> {
        let facts = self
            .facts
            .get(dialogue_id)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle has no dialogue `{dialogue_id}`")))?;
        let tokens = tokenize(summary);
        let present: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
        let coverage = if facts.is_empty() {
            0.0
        } else {
            facts
                .iter()
                .map(|keys| keys.iter().filter(|k| present.contains(k.as_str())).count() as f64 / keys.len() as f64)
                .sum::<f64>()
                / facts.len() as f64
        };
        let own: BTreeSet<&str> = facts.iter().flatten().map(String::as_str).collect();
        let hallucinated = tokens
            .iter()
            .filter(|t| self.fact_vocab.contains(t.as_str()) && !own.contains(t.as_str()))
            .count();
        let distractor = tokens.iter().filter(|t| self.distractor_vocab.contains(t.as_str())).count();
        let mut trigrams: HashMap<&[String], usize> = HashMap::new();
        if tokens.len() >= 3 {
            for g in tokens.windows(3) {
                *trigrams.entry(g).or_insert(0) += 1;
            }
        }
        let repeated: usize = trigrams.values().map(|c| c - 1).sum();
        let mut malformed = 0;
        let mut rest: &[String] = &tokens;
        while !rest.is_empty() {
            let (sentence, tail) = match rest.iter().position(|t| t == ".") {
                Some(i) => (Some(&rest[..i]), &rest[i + 1..]),
                None => (None, &[][..]),
            };
            if !sentence.is_some_and(well_formed) {
                malformed += 1;
            }
            rest = tail;
        }
        Ok(OracleFeatures {
            coverage,
            distractor_tokens: distractor as f64,
            hallucinated_tokens: hallucinated as f64,
            repeated_trigrams: repeated as f64,
            malformed_sentences: malformed as f64,
            length: tokens.len() as f64,
        })
    }

    pub fn scores(&self, dialogue_id: &str, summary: &str) -> Result<[f64; 5]> {
        let f = self.features(dialogue_id, summary)?;
        Ok(self.weights.map(|w| w.apply(&f)))
    }

    pub fn score(&self, dialogue_id: &str, summary: &str, d: Dimension) -> Result<f64> {
        Ok(self.scores(dialogue_id, summary)?[d.index()])
    }

    /// Maps a score gap (A minus B) onto the signed 5-point scale.
    pub fn grade(&self, gap: f64) -> i8 {
        let mag = if gap.abs() <= self.tie_band {
            0
        } else if gap.abs() < self.strong_threshold {
            1
        } else {
            2
        };
        if gap < 0.0 {
            -mag
        } else {
            mag
        }
    }
}

/// A sentence (without its period) reads like a fact or like chatter.
fn well_formed(s: &[String]) -> bool {
    let s: Vec<&str> = s.iter().map(String::as_str).collect();
    match s.as_slice() {
        [p, "will", a, b, "on", d] => PEOPLE.contains(p) && EVENTS.contains(&[*a, *b]) && DAYS.contains(d),
        ["they", "chat", "about", "the", t] => TOPICS.contains(t),
        _ => false,
    }
}

/// A generated corpus plus everything needed to judge and annotate it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub config: SyntheticWorldConfig,
    pub dialogues: Vec<Dialogue>,
    pub facts: BTreeMap<String, Vec<Fact>>,
    /// Reference and the four baseline summaries of every dialogue.
    pub summaries: Vec<SummaryRecord>,
    pub oracle: HiddenOracle,
}

impl World {
    pub fn train_dialogues(&self) -> &[Dialogue] {
        &self.dialogues[..self.dialogues.len() - self.config.test_dialogues]
    }

    pub fn test_dialogues(&self) -> &[Dialogue] {
        &self.dialogues[self.dialogues.len() - self.config.test_dialogues..]
    }

    pub fn baselines<'a>(&'a self, dialogue_id: &'a str) -> impl Iterator<Item = &'a SummaryRecord> + 'a {
        self.summaries
            .iter()
            .filter(move |s| s.dialogue_id == dialogue_id && s.source.is_baseline())
    }
}

pub fn summary_id(dialogue_id: &str, source: SummarySource) -> String {
    let tag = match source {
        SummarySource::BaselineA => "a",
        SummarySource::BaselineB => "b",
        SummarySource::BaselineC => "c",
        SummarySource::BaselineD => "d",
        SummarySource::Policy => "policy",
        SummarySource::Reference => "ref",
        SummarySource::SyntheticNegative => "neg",
    };
    format!("{dialogue_id}/{tag}")
}

fn filler(topic: &str) -> String {
    format!("they chat about the {topic} .")
}

/// Perturbations an imperfect summarization system applies to the facts.
#[derive(Clone, Copy)]
struct SystemProfile {
    drop: f64,
    filler: f64,
    repeat: f64,
    hallucinate: f64,
    /// Probability of deleting one token from one sentence.
    garble: f64,
}

const SYSTEMS: [SystemProfile; 4] = [
    SystemProfile { drop: 0.6, filler: 0.3, repeat: 0.0, hallucinate: 0.1, garble: 0.1 },
    SystemProfile { drop: 0.1, filler: 0.7, repeat: 0.2, hallucinate: 0.0, garble: 0.4 },
    SystemProfile { drop: 0.2, filler: 0.1, repeat: 0.6, hallucinate: 0.1, garble: 0.1 },
    SystemProfile { drop: 0.1, filler: 0.2, repeat: 0.1, hallucinate: 0.6, garble: 0.2 },
];

fn system_summary(facts: &[Fact], topics: &[&str], profile: SystemProfile, rng: &mut impl Rng) -> String {
    let mut sentences: Vec<String> = facts.iter().map(Fact::realize).collect();
    if sentences.len() > 1 && rng.gen_bool(profile.drop) {
        sentences.remove(rng.gen_range(0..sentences.len()));
    }
    if rng.gen_bool(profile.hallucinate) {
        let own: Vec<usize> = facts.iter().map(|f| f.event).collect();
        let people: Vec<&str> = facts.iter().map(|f| f.person.as_str()).collect();
        let event = loop {
            let e = rng.gen_range(0..EVENTS.len());
            if !own.contains(&e) {
                break e;
            }
        };
        let person = *PEOPLE
            .iter()
            .filter(|p| !people.contains(p))
            .collect::<Vec<_>>()
            .choose(rng)
            .unwrap_or(&&PEOPLE[0]);
        let fake = Fact {
            person: person.to_string(),
            event,
            day: DAYS.choose(rng).unwrap().to_string(),
            span: Span::new(0, 0, 1),
        };
        let at = rng.gen_range(0..sentences.len());
        sentences[at] = fake.realize();
    }
    if rng.gen_bool(profile.repeat) {
        let s = sentences.choose(rng).unwrap().clone();
        sentences.push(s);
    }
    if rng.gen_bool(profile.filler) {
        let topic = topics.choose(rng).copied().unwrap_or(TOPICS[0]);
        sentences.push(filler(topic));
    }
    if rng.gen_bool(profile.garble) {
        let at = rng.gen_range(0..sentences.len());
        let mut words: Vec<&str> = sentences[at].split(' ').collect();
        words.remove(rng.gen_range(0..words.len() - 1));
        sentences[at] = words.join(" ");
    }
    sentences.join(" ")
}

/// Builds the seeded world. Fact turns read `i will <verb> <object> on <day> .`
/// and the recorded fact span covers `<verb> <object> on <day>`.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.dialogues.to_string().len().max(4);
    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    let mut all_facts = BTreeMap::new();
    let mut summaries = Vec::new();
    for n in 0..cfg.dialogues {
        let id = format!("d{n:0width$}");
        let cast: Vec<&str> = PEOPLE.choose_multiple(&mut rng, 3).copied().collect();
        let mut events: Vec<usize> = (0..EVENTS.len()).collect();
        events.shuffle(&mut rng);
        events.truncate(cfg.facts_per_dialogue);
        let topics: Vec<&str> = (0..cfg.distractors_per_dialogue)
            .map(|_| *TOPICS.choose(&mut rng).unwrap())
            .collect();

        // (is_fact, slot) in speaking order.
        let mut order: Vec<(bool, usize)> = (0..cfg.facts_per_dialogue)
            .map(|i| (true, i))
            .chain((0..cfg.distractors_per_dialogue).map(|i| (false, i)))
            .collect();
        order.shuffle(&mut rng);

        let mut turns = Vec::new();
        let mut facts = Vec::new();
        for (is_fact, slot) in order {
            if is_fact {
                let person = cast[slot % cast.len()];
                let event = events[slot];
                let day = *DAYS.choose(&mut rng).unwrap();
                let [a, b] = EVENTS[event];
                let body = format!("{a} {b} on {day}");
                let text = format!("i will {body} .");
                let start = "i will ".len();
                facts.push(Fact {
                    person: person.into(),
                    event,
                    day: day.into(),
                    span: Span::new(turns.len(), start, start + body.chars().count()),
                });
                turns.push(Turn::new(person, text));
            } else {
                let speaker = *cast.choose(&mut rng).unwrap();
                let mood = *MOODS.choose(&mut rng).unwrap();
                turns.push(Turn::new(speaker, format!("the {} was {mood} today .", topics[slot])));
            }
        }

        // References list facts in catalog order so the order is recoverable
        // from the dialogue's bag of words.
        let mut sorted = facts.clone();
        sorted.sort_by_key(|f| f.event);
        let mut reference = sorted.iter().map(Fact::realize).collect::<Vec<_>>().join(" ");
        if rng.gen_bool(cfg.filler_probability) {
            let topic = topics.choose(&mut rng).copied().unwrap_or(TOPICS[0]);
            reference.push(' ');
            reference.push_str(&filler(topic));
        }
        summaries.push(SummaryRecord {
            id: summary_id(&id, SummarySource::Reference),
            dialogue_id: id.clone(),
            text: reference.clone(),
            source: SummarySource::Reference,
        });
        for (source, profile) in SummarySource::BASELINES.iter().zip(SYSTEMS) {
            summaries.push(SummaryRecord {
                id: summary_id(&id, *source),
                dialogue_id: id.clone(),
                text: system_summary(&sorted, &topics, profile, &mut rng),
                source: *source,
            });
        }
        dialogues.push(Dialogue {
            id: id.clone(),
            turns,
            reference_summary: Some(reference),
        });
        all_facts.insert(id, facts);
    }
    let oracle = HiddenOracle::new(
        all_facts
            .iter()
            .map(|(id, fs)| (id.clone(), fs.iter().map(Fact::key_tokens).collect()))
            .collect(),
    );
    Ok(World {
        config: cfg.clone(),
        dialogues,
        facts: all_facts,
        summaries,
        oracle,
    })
}

/// Greedy extractive oracle: repeatedly adds the sentence that most raises
/// ROUGE-1 F1 of the selection against the reference, earliest sentence on ties.
pub fn greedy_highlights(
    dialogue: &Dialogue,
    reference_summary: &str,
    max_spans: usize,
    annotator_id: &str,
) -> Result<HighlightSet> {
    if dialogue.turns.is_empty() {
        return Err(Error::EmptyInput("dialogue turns"));
    }
    let reference = tokenize(reference_summary);
    let mut candidates = Vec::new();
    for (ti, turn) in dialogue.turns.iter().enumerate() {
        for (s, e) in split_sentences(&turn.text) {
            let text: String = turn.text.chars().skip(s).take(e - s).collect();
            candidates.push((Span::new(ti, s, e), tokenize(&text)));
        }
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut selected: Vec<String> = Vec::new();
    let mut best = 0.0;
    while chosen.len() < max_spans {
        let mut pick: Option<(usize, f64)> = None;
        for (i, (_, toks)) in candidates.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut trial = selected.clone();
            trial.extend(toks.iter().cloned());
            let f = rouge_n_tokens(&trial, &reference, 1).f1;
            if f > best && pick.is_none_or(|(_, pf)| f > pf) {
                pick = Some((i, f));
            }
        }
        let Some((i, f)) = pick else { break };
        chosen.push(i);
        selected.extend(candidates[i].1.iter().cloned());
        best = f;
    }
    chosen.sort_unstable();
    Ok(HighlightSet {
        dialogue_id: dialogue.id.clone(),
        annotator_id: annotator_id.into(),
        spans: chosen.into_iter().map(|i| candidates[i].0).collect(),
    })
}

/// Reference versus a uniformly drawn utterance, reference mostly better on
/// every dimension. Returns the negative as a summary record too.
pub fn synthetic_preferences(
    dialogue: &Dialogue,
    reference: &SummaryRecord,
    annotator_id: &str,
    rng: &mut impl Rng,
) -> Result<(Comparison, SummaryRecord)> {
    let turn = dialogue
        .turns
        .choose(rng)
        .ok_or(Error::EmptyInput("dialogue turns"))?;
    let negative = SummaryRecord {
        id: summary_id(&dialogue.id, SummarySource::SyntheticNegative),
        dialogue_id: dialogue.id.clone(),
        text: turn.text.clone(),
        source: SummarySource::SyntheticNegative,
    };
    let comparison = Comparison {
        dialogue_id: dialogue.id.clone(),
        summary_a_id: reference.id.clone(),
        summary_b_id: negative.id.clone(),
        annotator_id: annotator_id.into(),
        scores: Dimension::ALL.iter().map(|d| (*d, 2)).collect(),
    };
    Ok((comparison, negative))
}

/// Oracle-graded comparison with independent per-dimension label noise. A
/// flipped strict label changes sign; a flipped tie becomes ±1 at random.
pub fn simulate_annotator(
    dialogue: &Dialogue,
    summary_a: &SummaryRecord,
    summary_b: &SummaryRecord,
    oracle: &HiddenOracle,
    noise: f64,
    annotator_id: &str,
    rng: &mut impl Rng,
) -> Result<Comparison> {
    let a = oracle.scores(&dialogue.id, &summary_a.text)?;
    let b = oracle.scores(&dialogue.id, &summary_b.text)?;
    let mut scores = BTreeMap::new();
    for d in Dimension::ALL {
        let mut s = oracle.grade(a[d.index()] - b[d.index()]);
        if noise > 0.0 && rng.gen_bool(noise) {
            s = if s == 0 {
                if rng.gen_bool(0.5) {
                    1
                } else {
                    -1
                }
            } else {
                -s
            };
        }
        scores.insert(d, s);
    }
    Ok(Comparison {
        dialogue_id: dialogue.id.clone(),
        summary_a_id: summary_a.id.clone(),
        summary_b_id: summary_b.id.clone(),
        annotator_id: annotator_id.into(),
        scores,
    })
}

/// Highlights each fact span, skipping each with probability `miss`.
pub fn simulate_highlights(
    dialogue: &Dialogue,
    facts: &[Fact],
    miss: f64,
    annotator_id: &str,
    rng: &mut impl Rng,
) -> HighlightSet {
    let mut spans: Vec<Span> = facts
        .iter()
        .filter(|_| !(miss > 0.0 && rng.gen_bool(miss)))
        .map(|f| f.span)
        .collect();
    spans.sort_by_key(|s| (s.turn_index, s.char_start));
    HighlightSet {
        dialogue_id: dialogue.id.clone(),
        annotator_id: annotator_id.into(),
        spans,
    }
}

/// `k` distinct unordered pairs drawn uniformly without replacement from
/// all pairs of `ids`.
pub fn sample_pairs<T: Clone>(ids: &[T], k: usize, rng: &mut impl Rng) -> Vec<(T, T)> {
    let mut all = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            all.push((ids[i].clone(), ids[j].clone()));
        }
    }
    all.shuffle(rng);
    all.truncate(k);
    all
}
