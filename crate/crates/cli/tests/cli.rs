use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use hitl_core::corpus::Dimension;
use hitl_core::synthfeed::World;
use hitl_service::store::{ComparisonSubmission, HighlightSubmission, TaskKind};
use hitl_service::{ServiceConfig, Store};

const SMALL: &str = r#"
[world]
dialogues = 40
test_dialogues = 8
[pretrain]
epochs = 1
[ppo]
total_episodes = 16
log_window = 8
[feedback]
dialogues = 12
[evaluation]
permutation_resamples = 100
"#;

fn hitl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hitl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hitl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) {
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();
}

#[test]
fn gen_world_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(d, &["--config", "small.toml", "--out-dir", "a", "gen-world"]);
    ok(d, &["--config", "small.toml", "--out-dir", "b", "gen-world"]);
    ok(d, &["--config", "small.toml", "--seed", "9", "--out-dir", "c", "gen-world"]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/dialogues.jsonl"), read("b/dialogues.jsonl"));
    assert_eq!(read("a/summaries.jsonl"), read("b/summaries.jsonl"));
    assert_ne!(read("a/dialogues.jsonl"), read("c/dialogues.jsonl"));
    let snapshot = String::from_utf8(read("c/config.toml")).unwrap();
    assert!(snapshot.contains("dialogues = 40"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(hitl(d, &["--help"]).status.code(), Some(0));
    assert_eq!(hitl(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(hitl(d, &["--config", "missing.toml", "gen-world"]).status.code(), Some(1));
    std::fs::write(d.join("bad.toml"), "[ppo]\nclip_epsilon = -1.0\n").unwrap();
    assert_eq!(hitl(d, &["--config", "bad.toml", "gen-world"]).status.code(), Some(1));
    assert_eq!(hitl(d, &["pretrain", "--world", "nowhere"]).status.code(), Some(2));
}

#[test]
fn environment_overrides_reach_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let out = Command::new(env!("CARGO_BIN_EXE_hitl"))
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("HITL__WORLD__DIALOGUES", "30")
        .args(["--config", "small.toml", "--out-dir", "w", "gen-world"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("30 dialogues"));
}

#[test]
fn full_chain_composes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let c = ["--config", "small.toml"];
    let run = |extra: &[&str]| ok(d, &[&c[..], extra].concat());
    run(&["--out-dir", "w", "gen-world"]);
    run(&["--out-dir", "p", "pretrain", "--world", "w"]);
    run(&["--out-dir", "r", "train-reward", "--world", "w", "--source", "synthesis"]);
    run(&["--out-dir", "t", "train-ppo", "--world", "w", "--policy", "p", "--reward", "r", "--checkpoint-every", "1"]);
    run(&["--out-dir", "s", "summarize", "--world", "w", "--policy", "t"]);
    run(&["--out-dir", "e", "evaluate", "--world", "w", "--candidate", "s/summaries.jsonl", "--baseline", "reference"]);

    let log = std::fs::read_to_string(d.join("t/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(std::fs::read_dir(d.join("t/checkpoints")).unwrap().count(), 2);
    let summaries = std::fs::read_to_string(d.join("s/summaries.jsonl")).unwrap();
    assert_eq!(summaries.lines().count(), 8);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("e/evaluation.json")).unwrap()).unwrap();
    assert_eq!(report["dialogues"], 8);
    assert_eq!(report["baseline"]["rouge1"], 1.0);
}

#[test]
fn reference_against_itself_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(d, &["--config", "small.toml", "--out-dir", "w", "gen-world"]);
    let line = ok(
        d,
        &["--config", "small.toml", "--out-dir", "e", "evaluate", "--world", "w", "--candidate", "reference", "--baseline", "reference"],
    );
    assert!(line.contains("candidate 1.0000/1.0000/1.0000"), "{line}");
    assert!(line.contains("p = 1.0000"), "{line}");
}

#[test]
fn service_submissions_export_and_train_a_reward_model() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(d, &["--config", "small.toml", "--out-dir", "w", "gen-world"]);
    let world: World = serde_json::from_str(&std::fs::read_to_string(d.join("w/world.json")).unwrap()).unwrap();

    let data = d.join("data");
    let cfg = ServiceConfig {
        data_dir: data.clone(),
        annotators: vec!["ann".into()],
        fsync: false,
        ..Default::default()
    };
    let store = Store::with_corpus(cfg, world.dialogues.clone(), world.summaries.clone()).unwrap();
    let text = |id: &str| world.summaries.iter().find(|s| s.id == id).unwrap().text.clone();
    let mut comparisons = 0;
    while let Some(task) = store.snapshot().next_task("ann", None).unwrap() {
        match task.kind {
            TaskKind::Highlight => {
                let spans = world.facts[&task.dialogue_id].iter().map(|f| f.span).collect();
                store
                    .submit_highlights(&HighlightSubmission {
                        annotator_id: "ann".into(),
                        task_id: task.task_id.clone(),
                        spans,
                    })
                    .unwrap();
            }
            TaskKind::Comparison => {
                let (a, b) = (task.summary_a_id.clone().unwrap(), task.summary_b_id.clone().unwrap());
                let mut scores = BTreeMap::new();
                for dim in Dimension::ALL {
                    let gap = world.oracle.score(&task.dialogue_id, &text(&a), dim).unwrap()
                        - world.oracle.score(&task.dialogue_id, &text(&b), dim).unwrap();
                    scores.insert(dim.name().to_string(), i64::from(world.oracle.grade(gap)));
                }
                store
                    .submit_comparison(&ComparisonSubmission {
                        annotator_id: "ann".into(),
                        task_id: task.task_id.clone(),
                        scores,
                    })
                    .unwrap();
                comparisons += 1;
            }
        }
    }
    drop(store);

    let stdout = ok(d, &["--out-dir", "x", "export", "--data", data.to_str().unwrap()]);
    assert_eq!(stdout.trim(), format!("{} highlight sets, {comparisons} comparisons", world.dialogues.len()));
    let out = ok(d, &["--config", "small.toml", "--out-dir", "r", "train-reward", "--world", "w", "--feedback", "x"]);
    assert!(out.starts_with("held-out pairwise accuracy"), "{out}");
}
