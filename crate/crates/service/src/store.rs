//! Task plan, append-only submission log and the in-memory index over it.
//!
//! The task plan is a pure function of the corpus, the summaries and the
//! config, so restarting only needs to replay the log to restore every
//! task's status. All writes go through one mutex; readers clone an `Arc`
//! of the latest immutable snapshot.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hitl_core::corpus::{
    export_jsonl, CorpusError, Comparison, Dialogue, Dimension, HighlightSet, Span, SummaryRecord, Validate,
};
use hitl_core::metrics::fleiss_kappa;
use hitl_core::textproc::{cosine, Vocabulary};
use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::{ServiceError, ServiceResult};

pub const LOG_FILE: &str = "submissions.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Highlight,
    Comparison,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Highlight => "highlight",
            Self::Comparison => "comparison",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = ServiceError;

    fn from_str(s: &str) -> ServiceResult<Self> {
        match s {
            "highlight" => Ok(Self::Highlight),
            "comparison" => Ok(Self::Comparison),
            _ => Err(ServiceError::invalid("kind", format!("unknown task kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Submitted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub kind: TaskKind,
    pub dialogue_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_a_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_b_id: Option<String>,
    pub assigned_annotator: String,
    pub status: TaskStatus,
}

/// One line of the submission log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Highlight { task_id: String, record: HighlightSet },
    Comparison { task_id: String, record: Comparison },
}

impl LogEntry {
    fn task_id(&self) -> &str {
        match self {
            Self::Highlight { task_id, .. } | Self::Comparison { task_id, .. } => task_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator_id: String,
    pub highlights_submitted: usize,
    pub highlights_total: usize,
    pub comparisons_submitted: usize,
    pub comparisons_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// `None` where kappa is undefined (every rating in one category).
    pub kappa: BTreeMap<Dimension, Option<f64>>,
    /// Comparison items rated by at least two annotators.
    pub shared_comparisons: usize,
    /// Ratings per item used for kappa (the smallest count among shared items).
    pub raters_per_item: usize,
    /// Mean pairwise cosine between annotators' highlighted text per shared dialogue.
    pub highlight_similarity: Option<f64>,
    pub shared_highlight_dialogues: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub highlights: Vec<HighlightSet>,
    pub comparisons: Vec<Comparison>,
}

/// Builds every annotator's task list: per dialogue, one highlight task then
/// up to `pairs_per_dialogue` comparison tasks over a pair set fixed per
/// dialogue (shared by all annotators).
pub fn plan_tasks(dialogues: &[Dialogue], summaries: &[SummaryRecord], cfg: &ServiceConfig) -> Vec<Task> {
    let mut by_dialogue: HashMap<&str, Vec<&SummaryRecord>> = HashMap::new();
    for s in summaries {
        by_dialogue.entry(s.dialogue_id.as_str()).or_default().push(s);
    }
    let pairs: Vec<Vec<(String, String)>> = dialogues
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut cands: Vec<&SummaryRecord> = by_dialogue
                .get(d.id.as_str())
                .map(|v| v.iter().copied().filter(|s| s.source.is_baseline()).collect())
                .unwrap_or_default();
            if cands.len() < 2 {
                // Corpora without baseline tags: compare whatever is there.
                cands = by_dialogue.get(d.id.as_str()).cloned().unwrap_or_default();
            }
            let mut all = Vec::new();
            for a in 0..cands.len() {
                for b in a + 1..cands.len() {
                    all.push((cands[a].id.clone(), cands[b].id.clone()));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            all.shuffle(&mut rng);
            all.truncate(cfg.pairs_per_dialogue);
            all
        })
        .collect();
    let mut tasks = Vec::new();
    for annotator in &cfg.annotators {
        for (d, ps) in dialogues.iter().zip(&pairs) {
            tasks.push(Task {
                task_id: format!("{annotator}/{}/h", d.id),
                kind: TaskKind::Highlight,
                dialogue_id: d.id.clone(),
                summary_a_id: None,
                summary_b_id: None,
                assigned_annotator: annotator.clone(),
                status: TaskStatus::Open,
            });
            for (k, (a, b)) in ps.iter().enumerate() {
                tasks.push(Task {
                    task_id: format!("{annotator}/{}/c{k}", d.id),
                    kind: TaskKind::Comparison,
                    dialogue_id: d.id.clone(),
                    summary_a_id: Some(a.clone()),
                    summary_b_id: Some(b.clone()),
                    assigned_annotator: annotator.clone(),
                    status: TaskStatus::Open,
                });
            }
        }
    }
    tasks
}

/// Immutable view of all tasks and accepted submissions.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    tasks: Vec<Task>,
    task_index: HashMap<String, usize>,
    by_annotator: HashMap<String, Vec<usize>>,
    entries: Vec<LogEntry>,
}

impl Snapshot {
    fn new(tasks: Vec<Task>) -> Self {
        let task_index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        let mut by_annotator: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            by_annotator.entry(t.assigned_annotator.clone()).or_default().push(i);
        }
        Self {
            tasks,
            task_index,
            by_annotator,
            entries: Vec::new(),
        }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, task_id: &str) -> ServiceResult<&Task> {
        self.task_index
            .get(task_id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| ServiceError::UnknownTask(task_id.into()))
    }

    /// Accepted submissions in log order.
    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    fn annotator_tasks(&self, annotator: &str) -> ServiceResult<impl Iterator<Item = &Task>> {
        let idx = self
            .by_annotator
            .get(annotator)
            .ok_or_else(|| ServiceError::UnknownAnnotator(annotator.into()))?;
        Ok(idx.iter().map(|&i| &self.tasks[i]))
    }

    fn highlight_done(&self, annotator: &str, dialogue_id: &str) -> bool {
        self.task_index
            .get(&format!("{annotator}/{dialogue_id}/h"))
            .is_none_or(|&i| self.tasks[i].status == TaskStatus::Submitted)
    }

    /// The annotator's first open task of `kind` (any kind if `None`) whose
    /// dialogue's highlight task, if it is a comparison, is already done.
    pub fn next_task(&self, annotator: &str, kind: Option<TaskKind>) -> ServiceResult<Option<Task>> {
        Ok(self
            .annotator_tasks(annotator)?
            .filter(|t| t.status == TaskStatus::Open)
            .filter(|t| kind.is_none_or(|k| k == t.kind))
            .find(|t| t.kind == TaskKind::Highlight || self.highlight_done(annotator, &t.dialogue_id))
            .cloned())
    }

    pub fn progress(&self, annotator: &str) -> ServiceResult<Progress> {
        let mut p = Progress {
            annotator_id: annotator.into(),
            highlights_submitted: 0,
            highlights_total: 0,
            comparisons_submitted: 0,
            comparisons_total: 0,
        };
        for t in self.annotator_tasks(annotator)? {
            let done = usize::from(t.status == TaskStatus::Submitted);
            match t.kind {
                TaskKind::Highlight => {
                    p.highlights_total += 1;
                    p.highlights_submitted += done;
                }
                TaskKind::Comparison => {
                    p.comparisons_total += 1;
                    p.comparisons_submitted += done;
                }
            }
        }
        Ok(p)
    }

    pub fn export(&self) -> Export {
        let mut out = Export::default();
        for e in &self.entries {
            match e {
                LogEntry::Highlight { record, .. } => out.highlights.push(record.clone()),
                LogEntry::Comparison { record, .. } => out.comparisons.push(record.clone()),
            }
        }
        out
    }

    /// Task statuses in plan order, serialized; equal across restarts.
    pub fn status_fingerprint(&self) -> String {
        serde_json::to_string(&self.tasks).expect("tasks serialize")
    }

    fn apply(&mut self, entry: LogEntry) -> ServiceResult<()> {
        let i = *self
            .task_index
            .get(entry.task_id())
            .ok_or_else(|| ServiceError::UnknownTask(entry.task_id().into()))?;
        if self.tasks[i].status == TaskStatus::Submitted {
            return Err(ServiceError::Conflict(entry.task_id().into()));
        }
        self.tasks[i].status = TaskStatus::Submitted;
        self.entries.push(entry);
        Ok(())
    }
}

/// Submission body for a highlight task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSubmission {
    pub annotator_id: String,
    pub task_id: String,
    pub spans: Vec<Span>,
}

/// Submission body for a comparison task. Scores are keyed by dimension name
/// and signed from summary A's side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSubmission {
    pub annotator_id: String,
    pub task_id: String,
    pub scores: BTreeMap<String, i64>,
}

pub struct Store {
    cfg: ServiceConfig,
    dialogues: HashMap<String, Dialogue>,
    summaries: HashMap<String, SummaryRecord>,
    vocab: Vocabulary,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<File>,
    log_path: PathBuf,
}

impl Store {
    /// Loads the corpus named in `cfg` and opens (or creates) the log.
    pub fn open(cfg: ServiceConfig) -> ServiceResult<Self> {
        let dialogues = hitl_core::corpus::load_corpus(&cfg.corpus_path)?;
        let summaries: Vec<SummaryRecord> = hitl_core::corpus::read_jsonl(&cfg.summaries_path)?;
        Self::with_corpus(cfg, dialogues, summaries)
    }

    pub fn with_corpus(cfg: ServiceConfig, dialogues: Vec<Dialogue>, summaries: Vec<SummaryRecord>) -> ServiceResult<Self> {
        cfg.validate()?;
        let texts: Vec<String> = dialogues.iter().map(Dialogue::full_text).collect();
        let vocab = Vocabulary::build(&texts, 1)?;
        let mut snap = Snapshot::new(plan_tasks(&dialogues, &summaries, &cfg));
        std::fs::create_dir_all(&cfg.data_dir)?;
        let log_path = cfg.data_dir.join(LOG_FILE);
        for entry in replay(&log_path)? {
            let line = snap.entries.len() + 1;
            snap.apply(entry).map_err(|e| ServiceError::CorruptLog {
                line,
                message: e.to_string(),
            })?;
        }
        let writer = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self {
            dialogues: dialogues.into_iter().map(|d| (d.id.clone(), d)).collect(),
            summaries: summaries.into_iter().map(|s| (s.id.clone(), s)).collect(),
            vocab,
            snapshot: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(writer),
            log_path,
            cfg,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    pub fn dialogue(&self, id: &str) -> ServiceResult<&Dialogue> {
        self.dialogues.get(id).ok_or_else(|| ServiceError::UnknownDialogue(id.into()))
    }

    /// Summaries of one dialogue, ordered by id.
    pub fn summaries_of(&self, dialogue_id: &str) -> Vec<&SummaryRecord> {
        let mut v: Vec<&SummaryRecord> = self.summaries.values().filter(|s| s.dialogue_id == dialogue_id).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    fn open_task(snap: &Snapshot, annotator: &str, task_id: &str, kind: TaskKind) -> ServiceResult<Task> {
        if !snap.by_annotator.contains_key(annotator) {
            return Err(ServiceError::UnknownAnnotator(annotator.into()));
        }
        let task = snap.task(task_id)?;
        if task.assigned_annotator != annotator {
            return Err(ServiceError::NotAssigned {
                task: task_id.into(),
                owner: task.assigned_annotator.clone(),
            });
        }
        if task.kind != kind {
            return Err(ServiceError::WrongKind {
                task: task_id.into(),
                expected: kind.name(),
                actual: task.kind.name(),
            });
        }
        if task.status == TaskStatus::Submitted {
            return Err(ServiceError::Conflict(task_id.into()));
        }
        if kind == TaskKind::Comparison && !snap.highlight_done(annotator, &task.dialogue_id) {
            return Err(ServiceError::OutOfOrder(task.dialogue_id.clone()));
        }
        Ok(task.clone())
    }

    /// Validates against the current state, appends to the log, then
    /// publishes a new snapshot. Runs entirely under the writer lock.
    fn commit(&self, build: impl FnOnce(&Snapshot) -> ServiceResult<LogEntry>) -> ServiceResult<LogEntry> {
        let mut file = self.writer.lock();
        let current = self.snapshot();
        let entry = build(&current)?;
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        file.write_all(&line)?;
        if self.cfg.fsync {
            file.sync_data()?;
        }
        let mut next = (*current).clone();
        next.apply(entry.clone())?;
        *self.snapshot.write() = Arc::new(next);
        Ok(entry)
    }

    pub fn submit_highlights(&self, sub: &HighlightSubmission) -> ServiceResult<HighlightSet> {
        let entry = self.commit(|snap| {
            let task = Self::open_task(snap, &sub.annotator_id, &sub.task_id, TaskKind::Highlight)?;
            let n = sub.spans.len();
            if n < self.cfg.min_spans {
                return Err(ServiceError::invalid(
                    "spans",
                    format!("minimum {} spans, got {n}", self.cfg.min_spans),
                ));
            }
            if n > self.cfg.max_spans {
                return Err(ServiceError::invalid(
                    "spans",
                    format!("maximum {} spans, got {n}", self.cfg.max_spans),
                ));
            }
            let record = HighlightSet {
                dialogue_id: task.dialogue_id.clone(),
                annotator_id: sub.annotator_id.clone(),
                spans: sub.spans.clone(),
            };
            record.validate().map_err(span_error)?;
            record.check(self.dialogue(&task.dialogue_id)?).map_err(span_error)?;
            Ok(LogEntry::Highlight {
                task_id: task.task_id,
                record,
            })
        })?;
        match entry {
            LogEntry::Highlight { record, .. } => Ok(record),
            LogEntry::Comparison { .. } => unreachable!("highlight commit produced a comparison"),
        }
    }

    pub fn submit_comparison(&self, sub: &ComparisonSubmission) -> ServiceResult<Comparison> {
        let entry = self.commit(|snap| {
            let task = Self::open_task(snap, &sub.annotator_id, &sub.task_id, TaskKind::Comparison)?;
            let mut scores = BTreeMap::new();
            for name in sub.scores.keys() {
                name.parse::<Dimension>()
                    .map_err(|_| ServiceError::invalid(format!("scores.{name}"), format!("unknown dimension `{name}`")))?;
            }
            for d in Dimension::ALL {
                let field = format!("scores.{}", d.name());
                let s = *sub
                    .scores
                    .get(d.name())
                    .ok_or_else(|| ServiceError::invalid(&field, format!("missing dimension `{}`", d.name())))?;
                if !(-2..=2).contains(&s) {
                    return Err(ServiceError::invalid(&field, format!("score {s} outside -2..=2")));
                }
                scores.insert(d, s as i8);
            }
            let record = Comparison {
                dialogue_id: task.dialogue_id.clone(),
                summary_a_id: task.summary_a_id.clone().unwrap_or_default(),
                summary_b_id: task.summary_b_id.clone().unwrap_or_default(),
                annotator_id: sub.annotator_id.clone(),
                scores,
            };
            record.validate()?;
            Ok(LogEntry::Comparison {
                task_id: task.task_id,
                record,
            })
        })?;
        match entry {
            LogEntry::Comparison { record, .. } => Ok(record),
            LogEntry::Highlight { .. } => unreachable!("comparison commit produced a highlight"),
        }
    }

    /// Fleiss' kappa per dimension over comparisons rated by two or more
    /// annotators, and highlight similarity over dialogues highlighted by two
    /// or more annotators.
    pub fn agreement(&self) -> ServiceResult<AgreementReport> {
        let snap = self.snapshot();
        let mut items: BTreeMap<(String, String, String), Vec<&Comparison>> = BTreeMap::new();
        let mut highlights: BTreeMap<&str, Vec<&HighlightSet>> = BTreeMap::new();
        for e in snap.entries() {
            match e {
                LogEntry::Comparison { record, .. } => {
                    // Orient every rating the same way so that swapped pairs line up.
                    let c = if record.summary_a_id <= record.summary_b_id {
                        record.clone()
                    } else {
                        record.swapped()
                    };
                    let key = (c.dialogue_id.clone(), c.summary_a_id.clone(), c.summary_b_id.clone());
                    items.entry(key).or_default().push(record);
                }
                LogEntry::Highlight { record, .. } => highlights.entry(&record.dialogue_id).or_default().push(record),
            }
        }
        let shared: Vec<Vec<i8>> = items
            .values()
            .filter(|v| v.len() >= 2)
            .map(|v| {
                v.iter()
                    .flat_map(|c| {
                        let flip = c.summary_a_id > c.summary_b_id;
                        Dimension::ALL.map(|d| if flip { -c.score(d) } else { c.score(d) })
                    })
                    .collect()
            })
            .collect();
        let shared_hl: Vec<&Vec<&HighlightSet>> = highlights.values().filter(|v| v.len() >= 2).collect();
        if shared.is_empty() && shared_hl.is_empty() {
            return Err(ServiceError::NoOverlap);
        }
        let raters = shared.iter().map(|v| v.len() / 5).min().unwrap_or(0);
        let mut kappa = BTreeMap::new();
        for d in Dimension::ALL {
            let value = if shared.is_empty() {
                None
            } else {
                let table: Vec<Vec<usize>> = shared
                    .iter()
                    .map(|flat| {
                        let mut row = vec![0usize; 5];
                        for r in 0..raters {
                            row[(flat[r * 5 + d.index()] + 2) as usize] += 1;
                        }
                        row
                    })
                    .collect();
                fleiss_kappa(&table).ok()
            };
            kappa.insert(d, value);
        }
        let mut sims = Vec::new();
        for sets in &shared_hl {
            let d = self.dialogue(&sets[0].dialogue_id)?;
            let texts: Vec<String> = sets
                .iter()
                .map(|h| h.texts(d).map(|t| t.join(" ")))
                .collect::<Result<_, CorpusError>>()?;
            for i in 0..texts.len() {
                for j in i + 1..texts.len() {
                    sims.push(cosine(&self.vocab.embed(&texts[i]), &self.vocab.embed(&texts[j]))?);
                }
            }
        }
        Ok(AgreementReport {
            kappa,
            shared_comparisons: shared.len(),
            raters_per_item: raters,
            highlight_similarity: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
            shared_highlight_dialogues: shared_hl.len(),
        })
    }

    /// Writes `highlights.jsonl` and `comparisons.jsonl` under `dir`.
    pub fn export_to(&self, dir: impl AsRef<Path>) -> ServiceResult<(usize, usize)> {
        write_export(&self.snapshot().export(), dir)
    }
}

pub fn write_export(export: &Export, dir: impl AsRef<Path>) -> ServiceResult<(usize, usize)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let h = export_jsonl(&export.highlights, dir.join("highlights.jsonl"))?;
    let c = export_jsonl(&export.comparisons, dir.join("comparisons.jsonl"))?;
    Ok((h, c))
}

fn span_error(e: CorpusError) -> ServiceError {
    match e {
        CorpusError::Invalid { field, message } => ServiceError::invalid(field, message),
        CorpusError::SpanOutOfRange(m) => ServiceError::invalid("spans", m),
        other => ServiceError::Corpus(other),
    }
}

/// Reads the log. A final line without its newline is a write torn by a
/// crash: it is dropped and the file truncated to the last complete record.
pub fn replay(path: &Path) -> ServiceResult<Vec<LogEntry>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            log::warn!("dropping a torn record at the end of {}", path.display());
            OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
            break;
        }
        good_len += n as u64;
        if buf.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let entry: LogEntry = serde_json::from_slice(&buf).map_err(|e| ServiceError::CorruptLog {
            line: line_no,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}
