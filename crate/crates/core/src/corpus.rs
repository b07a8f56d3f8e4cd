//! Dialogues, candidate summaries and the two kinds of feedback collected on
//! them, plus their JSONL file formats.
//!
//! All four record kinds are stored one JSON object per line. Field order on
//! output follows struct declaration order, so exported files are stable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("duplicate dialogue id `{0}`")]
    DuplicateId(String),
    #[error("unknown dialogue `{0}`")]
    UnknownDialogue(String),
    #[error("span out of range: {0}")]
    SpanOutOfRange(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self::Invalid {
            field,
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }

    /// Number of Unicode scalar values in the text; span offsets count these.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_summary: Option<String>,
}

impl Dialogue {
    /// All turns rendered as `speaker: text` lines.
    pub fn full_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker, t.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Character range inside a single turn, `char_start..char_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub turn_index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl Span {
    pub fn new(turn_index: usize, char_start: usize, char_end: usize) -> Self {
        Self {
            turn_index,
            char_start,
            char_end,
        }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.turn_index == other.turn_index
            && self.char_start < other.char_end
            && other.char_start < self.char_end
    }

    pub fn check(&self, dialogue: &Dialogue) -> Result<()> {
        let turn = dialogue.turns.get(self.turn_index).ok_or_else(|| {
            CorpusError::SpanOutOfRange(format!(
                "turn {} of {} in `{}`",
                self.turn_index,
                dialogue.turns.len(),
                dialogue.id
            ))
        })?;
        if self.char_start >= self.char_end || self.char_end > turn.char_len() {
            return Err(CorpusError::SpanOutOfRange(format!(
                "{}..{} in turn {} of length {}",
                self.char_start,
                self.char_end,
                self.turn_index,
                turn.char_len()
            )));
        }
        Ok(())
    }

    /// The annotated text, verbatim.
    pub fn text(&self, dialogue: &Dialogue) -> Result<String> {
        self.check(dialogue)?;
        Ok(char_slice(
            &dialogue.turns[self.turn_index].text,
            self.char_start,
            self.char_end,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSet {
    pub dialogue_id: String,
    pub annotator_id: String,
    pub spans: Vec<Span>,
}

impl HighlightSet {
    /// Checks every span against `dialogue` and rejects overlaps within a turn.
    pub fn check(&self, dialogue: &Dialogue) -> Result<()> {
        if self.dialogue_id != dialogue.id {
            return Err(CorpusError::invalid(
                "dialogue_id",
                format!("`{}` does not match `{}`", self.dialogue_id, dialogue.id),
            ));
        }
        for s in &self.spans {
            s.check(dialogue)?;
        }
        for (i, a) in self.spans.iter().enumerate() {
            if let Some(b) = self.spans[i + 1..].iter().find(|b| a.overlaps(b)) {
                return Err(CorpusError::invalid(
                    "spans",
                    format!("spans {a:?} and {b:?} overlap"),
                ));
            }
        }
        Ok(())
    }

    pub fn texts(&self, dialogue: &Dialogue) -> Result<Vec<String>> {
        self.spans.iter().map(|s| s.text(dialogue)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SummarySource {
    BaselineA,
    BaselineB,
    BaselineC,
    BaselineD,
    Policy,
    Reference,
    SyntheticNegative,
}

impl SummarySource {
    pub const BASELINES: [SummarySource; 4] = [
        SummarySource::BaselineA,
        SummarySource::BaselineB,
        SummarySource::BaselineC,
        SummarySource::BaselineD,
    ];

    pub fn is_baseline(self) -> bool {
        Self::BASELINES.contains(&self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub dialogue_id: String,
    pub text: String,
    pub source: SummarySource,
}

/// The five judged aspects, declared in their canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Coherence,
    Accuracy,
    Coverage,
    Conciseness,
    Overall,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Coherence,
        Dimension::Accuracy,
        Dimension::Coverage,
        Dimension::Conciseness,
        Dimension::Overall,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Coherence => "coherence",
            Dimension::Accuracy => "accuracy",
            Dimension::Coverage => "coverage",
            Dimension::Conciseness => "conciseness",
            Dimension::Overall => "overall",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| CorpusError::invalid("dimension", format!("unknown dimension `{s}`")))
    }
}

/// Pairwise judgment, signed from summary A's side: `+2` is "A mostly
/// better", `-2` is "B mostly better", `0` is "equal".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub dialogue_id: String,
    pub summary_a_id: String,
    pub summary_b_id: String,
    pub annotator_id: String,
    pub scores: BTreeMap<Dimension, i8>,
}

impl Comparison {
    pub fn score(&self, d: Dimension) -> i8 {
        self.scores.get(&d).copied().unwrap_or(0)
    }

    /// The same judgment with A and B exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            dialogue_id: self.dialogue_id.clone(),
            summary_a_id: self.summary_b_id.clone(),
            summary_b_id: self.summary_a_id.clone(),
            annotator_id: self.annotator_id.clone(),
            scores: self.scores.iter().map(|(d, s)| (*d, -s)).collect(),
        }
    }
}

/// Checks a record's own invariants.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

fn non_empty(field: &'static str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        Err(CorpusError::invalid(field, "must be non-empty"))
    } else {
        Ok(())
    }
}

impl Validate for Dialogue {
    fn validate(&self) -> Result<()> {
        non_empty("id", &self.id)?;
        if self.turns.is_empty() {
            return Err(CorpusError::invalid("turns", "must contain at least one turn"));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.speaker.trim().is_empty() {
                return Err(CorpusError::invalid("speaker", format!("turn {i} has no speaker")));
            }
            if t.text.trim().is_empty() {
                return Err(CorpusError::invalid("text", format!("turn {i} has no text")));
            }
        }
        Ok(())
    }
}

impl Validate for SummaryRecord {
    fn validate(&self) -> Result<()> {
        non_empty("id", &self.id)?;
        non_empty("dialogue_id", &self.dialogue_id)?;
        non_empty("text", &self.text)
    }
}

impl Validate for HighlightSet {
    fn validate(&self) -> Result<()> {
        non_empty("dialogue_id", &self.dialogue_id)?;
        non_empty("annotator_id", &self.annotator_id)?;
        for s in &self.spans {
            if s.char_start >= s.char_end {
                return Err(CorpusError::invalid("spans", format!("empty span {s:?}")));
            }
        }
        Ok(())
    }
}

impl Validate for Comparison {
    fn validate(&self) -> Result<()> {
        non_empty("dialogue_id", &self.dialogue_id)?;
        non_empty("summary_a_id", &self.summary_a_id)?;
        non_empty("summary_b_id", &self.summary_b_id)?;
        if self.summary_a_id == self.summary_b_id {
            return Err(CorpusError::invalid(
                "summary_b_id",
                "must differ from summary_a_id",
            ));
        }
        for d in Dimension::ALL {
            match self.scores.get(&d) {
                None => {
                    return Err(CorpusError::invalid(
                        "scores",
                        format!("missing dimension `{d}`"),
                    ))
                }
                Some(s) if !(-2..=2).contains(s) => {
                    return Err(CorpusError::invalid(
                        "scores",
                        format!("`{d}` score {s} outside -2..=2"),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Reads one validated record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned + Validate>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes one JSON object per line and returns the number written.
pub fn export_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

/// Loads `dialogues.jsonl`, validating every record and id uniqueness.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let dialogues: Vec<Dialogue> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for d in &dialogues {
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()));
        }
    }
    Ok(dialogues)
}

/// Dialogues indexed by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self> {
        let mut index = HashMap::with_capacity(dialogues.len());
        for (i, d) in dialogues.iter().enumerate() {
            d.validate()?;
            if index.insert(d.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { dialogues, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_corpus(path)?)
    }

    pub fn get(&self, id: &str) -> Result<&Dialogue> {
        self.index
            .get(id)
            .map(|&i| &self.dialogues[i])
            .ok_or_else(|| CorpusError::UnknownDialogue(id.to_string()))
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter()
    }
}

/// A contiguous piece of one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub turn_index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

/// Unit from which the non-highlighted set is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Sentence,
    Utterance,
}

/// Sentence ranges (in chars) of `text`. A sentence ends at `.`, `!` or `?`
/// followed by whitespace or end of text; surrounding whitespace is trimmed.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let push = |out: &mut Vec<(usize, usize)>, s: usize, e: usize| {
        let mut s = s;
        let mut e = e;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            out.push((s, e));
        }
    };
    for i in 0..chars.len() {
        let terminal = matches!(chars[i], '.' | '!' | '?');
        let boundary = i + 1 == chars.len() || chars[i + 1].is_whitespace();
        if terminal && boundary {
            push(&mut out, start, i + 1);
            start = i + 1;
        }
    }
    push(&mut out, start, chars.len());
    out
}

/// Every sentence (or utterance) of the dialogue, tagged with whether it
/// intersects a highlighted span.
pub fn partition_units(
    dialogue: &Dialogue,
    highlights: &HighlightSet,
    granularity: Granularity,
) -> Result<Vec<(Segment, bool)>> {
    for s in &highlights.spans {
        s.check(dialogue)?;
    }
    let mut out = Vec::new();
    for (ti, turn) in dialogue.turns.iter().enumerate() {
        let ranges = match granularity {
            Granularity::Sentence => split_sentences(&turn.text),
            Granularity::Utterance => vec![(0, turn.char_len())],
        };
        for (s, e) in ranges {
            let unit = Span::new(ti, s, e);
            let hit = highlights.spans.iter().any(|h| h.overlaps(&unit));
            out.push((
                Segment {
                    turn_index: ti,
                    char_start: s,
                    char_end: e,
                    text: char_slice(&turn.text, s, e),
                },
                hit,
            ));
        }
    }
    Ok(out)
}

/// The non-highlighted units of the dialogue: those not intersecting any span.
pub fn complement_spans(
    dialogue: &Dialogue,
    highlights: &HighlightSet,
    granularity: Granularity,
) -> Result<Vec<Segment>> {
    Ok(partition_units(dialogue, highlights, granularity)?
        .into_iter()
        .filter_map(|(seg, hit)| (!hit).then_some(seg))
        .collect())
}

pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue() -> Dialogue {
        Dialogue {
            id: "d1".into(),
            turns: vec![
                Turn::new("A", "Hi there. How are you?"),
                Turn::new("B", "I need the report by friday. It is urgent! Thanks"),
                Turn::new("A", "ok"),
            ],
            reference_summary: Some("B needs the report by friday.".into()),
        }
    }

    fn hs(spans: Vec<Span>) -> HighlightSet {
        HighlightSet {
            dialogue_id: "d1".into(),
            annotator_id: "ann".into(),
            spans,
        }
    }

    #[test]
    fn sentence_split_rules() {
        let t = "I need the report by friday. It is urgent! Thanks";
        let s: Vec<String> = split_sentences(t)
            .into_iter()
            .map(|(a, b)| char_slice(t, a, b))
            .collect();
        assert_eq!(s, vec!["I need the report by friday.", "It is urgent!", "Thanks"]);
        assert_eq!(split_sentences("no terminator here"), vec![(0, 18)]);
        // A period inside a token does not end a sentence.
        assert_eq!(split_sentences("version 1.5 ships").len(), 1);
    }

    #[test]
    fn complement_with_one_span_in_middle_turn() {
        let d = dialogue();
        // "the report" inside the first sentence of turn 1.
        let h = hs(vec![Span::new(1, 7, 17)]);
        let n: Vec<String> = complement_spans(&d, &h, Granularity::Sentence)
            .unwrap()
            .into_iter()
            .map(|s| s.text)
            .collect();
        assert_eq!(
            n,
            vec!["Hi there.", "How are you?", "It is urgent!", "Thanks", "ok"]
        );
    }

    #[test]
    fn complement_edge_cases() {
        let d = dialogue();
        let all = complement_spans(&d, &hs(vec![]), Granularity::Sentence).unwrap();
        assert_eq!(all.len(), 6);
        let cover = hs(vec![
            Span::new(0, 0, 22),
            Span::new(1, 0, 49),
            Span::new(2, 0, 2),
        ]);
        assert!(complement_spans(&d, &cover, Granularity::Sentence)
            .unwrap()
            .is_empty());
        let bad = hs(vec![Span::new(5, 0, 1)]);
        assert!(matches!(
            complement_spans(&d, &bad, Granularity::Sentence),
            Err(CorpusError::SpanOutOfRange(_))
        ));
    }

    #[test]
    fn utterance_granularity() {
        let d = dialogue();
        let h = hs(vec![Span::new(1, 7, 17)]);
        let n = complement_spans(&d, &h, Granularity::Utterance).unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].text, "Hi there. How are you?");
    }

    #[test]
    fn overlapping_highlights_rejected() {
        let d = dialogue();
        let h = hs(vec![Span::new(1, 0, 10), Span::new(1, 9, 12)]);
        assert!(h.check(&d).is_err());
        let ok = hs(vec![Span::new(1, 0, 10), Span::new(1, 10, 12)]);
        ok.check(&d).unwrap();
        assert_eq!(ok.texts(&d).unwrap()[0], "I need the");
    }

    #[test]
    fn comparison_validation() {
        let mut c = Comparison {
            dialogue_id: "d1".into(),
            summary_a_id: "s1".into(),
            summary_b_id: "s2".into(),
            annotator_id: "a".into(),
            scores: Dimension::ALL.iter().map(|d| (*d, 1)).collect(),
        };
        c.validate().unwrap();
        assert_eq!(c.swapped().swapped(), c);
        c.scores.remove(&Dimension::Accuracy);
        assert!(c.validate().unwrap_err().to_string().contains("accuracy"));
        c.scores.insert(Dimension::Accuracy, 3);
        assert!(c.validate().is_err());
    }
}
