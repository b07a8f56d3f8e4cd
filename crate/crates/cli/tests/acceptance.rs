//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=name,name` runs a subset. Criteria listed in
//! `KNOWN_FAILING` are reported but do not fail the run unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use hitl_core::config::RunConfig;
use hitl_core::corpus::{Corpus, Dialogue, Dimension, SummaryRecord};
use hitl_core::metrics::{lcs_len, rouge_l_tokens, rouge_n_tokens};
use hitl_core::pipeline::{self, AblationPoint, AblationReport, Prepared, RunOutcome};
use hitl_core::policy::{PolicyConfig, PolicyContext, PolicyModel, Trajectory};
use hitl_core::ppo::{assemble_rewards, assemble_rewards_with, gae, GaeConfig, KlPlacement, RewardWeights};
use hitl_core::reward_global::{
    agreement_rate, batch_loss, pair_loss_value, pairwise_loss, train_reward_model, DialogueFeatures, DimensionLabel,
    EncodedPair, GlobalRewardModel, LabeledPair, PreferencePair, RewardModelConfig, SummaryIndex,
};
use hitl_core::synthfeed::{generate_world, sample_pairs, simulate_annotator, SyntheticWorldConfig, World};
use hitl_core::textproc::EOS;
use hitl_service::store::{ComparisonSubmission, HighlightSubmission, TaskKind, LOG_FILE};
use hitl_service::{ServiceConfig, Store};
use ndgrad::{central_difference, op_gradient_report, relative_error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_FAILING: &[&str] = &[];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

/// Seeded runs shared between the end-to-end, KL and annotation-count criteria.
#[derive(Default)]
struct Runs {
    seeds: Vec<SeedRun>,
}

struct SeedRun {
    config: RunConfig,
    prep: Prepared,
    outcome: RunOutcome,
    elapsed: Duration,
}

const SEEDS: usize = 3;

impl Runs {
    fn get(&mut self, k: usize) -> Result<&SeedRun> {
        while self.seeds.len() <= k {
            let i = self.seeds.len();
            let config = pipeline::seeded(&RunConfig::default(), i);
            let start = Instant::now();
            let prep = pipeline::prepare(&config)?;
            let outcome = pipeline::run_source(&prep, &config, config.feedback.source, config.feedback.dialogues)?;
            let elapsed = start.elapsed();
            eprintln!(
                "  seed {}: win rate {:.3}, overall {:.4} vs {:.4}, {:.0?}",
                config.seed,
                outcome.evaluation.win_rate,
                outcome.evaluation.candidate.overall(),
                outcome.evaluation.baseline.overall(),
                elapsed
            );
            self.seeds.push(SeedRun {
                config,
                prep,
                outcome,
                elapsed,
            });
        }
        Ok(&self.seeds[k])
    }
}

fn autodiff(_: &mut Runs) -> Result<Verdict> {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = op_gradient_report(17, 5)
        .into_iter()
        .map(|c| (c.op.to_string(), c.max_rel_error))
        .collect();

    let world = generate_world(&SyntheticWorldConfig {
        dialogues: 4,
        test_dialogues: 0,
        seed: 5,
        ..Default::default()
    })?;
    let vocab = pipeline::build_vocabulary(&world, 1)?;

    let rm = GlobalRewardModel::new(
        vocab.clone(),
        RewardModelConfig {
            encoder_width: 6,
            head_hidden: 5,
            seed: 9,
            ..Default::default()
        },
    );
    let encoded: Vec<EncodedPair> = world
        .dialogues
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let df = DialogueFeatures::new(&vocab, d);
            let base: Vec<&SummaryRecord> = world.baselines(&d.id).collect();
            let dims: Vec<DimensionLabel> = Dimension::ALL
                .iter()
                .take(1 + i)
                .map(|&dimension| DimensionLabel { dimension, weight: 1.0 + i as f64 })
                .collect();
            EncodedPair {
                pair: PreferencePair {
                    dialogue_id: d.id.clone(),
                    preferred_summary_id: base[0].id.clone(),
                    other_summary_id: base[1].id.clone(),
                    dimensions: dims,
                    target: if i == 3 { 0.5 } else { 1.0 },
                },
                preferred: rm.features(&df, &base[0].text),
                other: rm.features(&df, &base[1].text),
            }
        })
        .collect();
    let batch: Vec<&EncodedPair> = encoded.iter().collect();
    let rm_loss = |m: &GlobalRewardModel, train: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = if train { m.params().bind(&mut g) } else { m.params().bind_frozen(&mut g) };
        let loss = batch_loss(m, &mut g, &vars, &batch)?;
        let value = g.value(loss).item();
        if !train {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, m.params().grads(&g, &vars)))
    };
    let (_, analytic) = rm_loss(&rm, true)?;
    let mut probe = rm.clone();
    let numeric = central_difference(rm.params(), 1e-5, |p| {
        *probe.params_mut() = p.clone();
        rm_loss(&probe, false).expect("loss").0
    });
    worst.push(("reward-model loss".into(), max_rel(&analytic, &numeric)));

    let policy = PolicyModel::new(
        vocab.len(),
        PolicyConfig {
            embed_dim: 5,
            hidden_dim: 6,
            max_length: 12,
            seed: 4,
            ..Default::default()
        },
    )?;
    let contexts: Vec<PolicyContext> = world
        .dialogues
        .iter()
        .map(|d| PolicyContext::from_text(&vocab, &d.full_text()))
        .collect();
    let targets: Vec<Vec<usize>> = world
        .dialogues
        .iter()
        .map(|d| {
            let mut t = vocab.encode(d.reference_summary.as_deref().unwrap_or(""));
            t.truncate(10);
            t.push(EOS);
            t
        })
        .collect();
    let ctx: Vec<&PolicyContext> = contexts.iter().collect();
    let tgt: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let nll = |m: &PolicyModel, train: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = if train { m.params().bind(&mut g) } else { m.params().bind_frozen(&mut g) };
        let loss = m.nll_loss(&mut g, &vars, &ctx, &tgt)?;
        let value = g.value(loss).item();
        if !train {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, m.params().grads(&g, &vars)))
    };
    let (_, analytic) = nll(&policy, true)?;
    let mut probe = policy.clone();
    let numeric = central_difference(policy.params(), 1e-5, |p| {
        *probe.params_mut() = p.clone();
        nll(&probe, false).expect("loss").0
    });
    worst.push(("policy loss".into(), max_rel(&analytic, &numeric)));

    let elapsed = start.elapsed();
    let (name, max) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        max < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{} checks, worst {max:.2e} ({name}), {elapsed:.1?}", worst.len()),
    )
}

fn max_rel(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| relative_error(*p, *q)))
        .fold(0.0, f64::max)
}

fn gae_oracle(_: &mut Runs) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = GaeConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=50);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let terminal = rng.gen_range(-1.0..1.0);
        let (adv, _) = gae(&rewards, &values, terminal, &cfg)?;
        #[allow(clippy::needless_range_loop)]
        for t in 0..n {
            let mut sum = 0.0;
            for k in t..n {
                let next = if k + 1 < n { values[k + 1] } else { terminal };
                let delta = rewards[k] + cfg.gamma * next - values[k];
                sum += (cfg.gamma * cfg.lambda).powi((k - t) as i32) * delta;
            }
            worst = worst.max((adv[t] - sum).abs());
        }
    }
    verdict(worst < 1e-10, format!("max |error| {worst:.2e} over 100 trajectories"))
}

fn conservation(_: &mut Runs) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = rng.gen_range(1..=40);
        let traj = Trajectory {
            dialogue_id: "d".into(),
            tokens: vec![4; n],
            log_probs: (0..n).map(|_| rng.gen_range(-6.0..0.0)).collect(),
            ref_log_probs: (0..n).map(|_| rng.gen_range(-6.0..0.0)).collect(),
            terminated_by_eos: false,
        };
        let w = RewardWeights {
            w_l: rng.gen_range(0.0..2.0),
            w_g: rng.gen_range(0.0..2.0),
            beta: rng.gen_range(0.0..1.0),
        };
        let (r_l, r_g) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let rewards = if i % 2 == 0 {
            assemble_rewards(&traj, r_l, r_g, &w)?
        } else {
            assemble_rewards_with(&traj, r_l, r_g, &w, KlPlacement::Terminal)?
        };
        let ratio: f64 = traj.log_probs.iter().zip(&traj.ref_log_probs).map(|(a, b)| a - b).sum();
        let expected = w.w_l * r_l + w.w_g * r_g - w.beta * ratio;
        worst = worst.max((rewards.iter().sum::<f64>() - expected).abs());
    }
    verdict(worst < 1e-12, format!("max |error| {worst:.2e} over 1000 trajectories"))
}

fn preference_closed_forms(_: &mut Runs) -> Result<Verdict> {
    let zero = pair_loss_value(0.0, 1.0, 1.0);
    let one = pair_loss_value(1.0, 1.0, 1.0);
    let mut swaps_exact = true;
    for delta in [-7.0, -1.0, -0.125, 0.0, 0.5, 3.0, 25.0] {
        swaps_exact &= pair_loss_value(delta, 1.0, 1.0) == pair_loss_value(-delta, 0.0, 1.0);
        swaps_exact &= pair_loss_value(delta, 0.5, 2.0) == pair_loss_value(-delta, 0.5, 2.0);
    }
    // And through the model: swapping an encoded pair leaves its loss unchanged.
    let world = generate_world(&SyntheticWorldConfig {
        dialogues: 3,
        test_dialogues: 0,
        seed: 8,
        ..Default::default()
    })?;
    let vocab = pipeline::build_vocabulary(&world, 1)?;
    let rm = GlobalRewardModel::new(vocab.clone(), RewardModelConfig::default());
    for d in &world.dialogues {
        let df = DialogueFeatures::new(&vocab, d);
        let b: Vec<&SummaryRecord> = world.baselines(&d.id).collect();
        let p = EncodedPair {
            pair: PreferencePair {
                dialogue_id: d.id.clone(),
                preferred_summary_id: b[0].id.clone(),
                other_summary_id: b[2].id.clone(),
                dimensions: Dimension::ALL.iter().map(|&dimension| DimensionLabel { dimension, weight: 1.0 }).collect(),
                target: 1.0,
            },
            preferred: rm.features(&df, &b[0].text),
            other: rm.features(&df, &b[2].text),
        };
        let s = EncodedPair {
            pair: p.pair.swapped(),
            preferred: p.other.clone(),
            other: p.preferred.clone(),
        };
        swaps_exact &= pairwise_loss(&rm, &p)? == pairwise_loss(&rm, &s)?;
    }
    verdict(
        zero == std::f64::consts::LN_2 && (one - 0.31326169).abs() < 1e-8 && swaps_exact,
        format!("-ln s(0) = {zero}, -ln s(1) = {one:.8}, swaps exact: {swaps_exact}"),
    )
}

fn reward_model_recovery(_: &mut Runs) -> Result<Verdict> {
    let start = Instant::now();
    let world = generate_world(&SyntheticWorldConfig {
        dialogues: 300,
        test_dialogues: 0,
        seed: 41,
        ..Default::default()
    })?;
    let vocab = pipeline::build_vocabulary(&world, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut pairs: Vec<(&Dialogue, &SummaryRecord, &SummaryRecord)> = Vec::new();
    for d in &world.dialogues {
        let b: Vec<&SummaryRecord> = world.baselines(&d.id).collect();
        for (x, y) in sample_pairs(&b, 3, &mut rng) {
            pairs.push((d, x, y));
        }
    }
    ensure!(pairs.len() >= 625, "world too small");
    let (train, held_out) = pairs[..625].split_at(500);
    let label = |noise: f64, seed: u64| -> Result<Vec<_>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train
            .iter()
            .map(|(d, a, b)| Ok(simulate_annotator(d, a, b, &world.oracle, noise, "sim", &mut rng)?))
            .collect()
    };
    let mut eval_pairs = Vec::new();
    for (d, a, b) in held_out {
        let c = simulate_annotator(d, a, b, &world.oracle, 0.0, "sim", &mut rng)?;
        match c.score(Dimension::Overall).signum() {
            1 => eval_pairs.push(LabeledPair { dialogue: d, preferred: &a.text, other: &b.text }),
            -1 => eval_pairs.push(LabeledPair { dialogue: d, preferred: &b.text, other: &a.text }),
            _ => {}
        }
    }
    let corpus = Corpus::new(world.dialogues.clone())?;
    let summaries = SummaryIndex::new(world.summaries.clone());
    let defaults = RunConfig::default();
    let mut train_cfg = defaults.reward_training.clone();
    train_cfg.validation_fraction = 0.0;
    let agreement = |noise: f64| -> Result<f64> {
        let model = GlobalRewardModel::new(vocab.clone(), defaults.reward_model.clone());
        let (model, _) = train_reward_model(model, &corpus, &summaries, &label(noise, 42)?, &train_cfg)?;
        Ok(agreement_rate(&eval_pairs, |d, s| model.global_reward(d, s).expect("score"))?)
    };
    let clean = agreement(0.0)?;
    let noisy = agreement(0.3)?;
    let elapsed = start.elapsed();
    verdict(
        clean >= 0.95 && noisy < clean && elapsed < Duration::from_secs(120),
        format!(
            "agreement {clean:.4} clean vs {noisy:.4} with 30% flips on {} held-out pairs, {elapsed:.1?}",
            eval_pairs.len()
        ),
    )
}

fn rouge_oracle(_: &mut Runs) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let alphabet = ["a", "b", "c", "d"];
    let words = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(0..=10);
        (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
    };
    let f = |o: usize, h: usize, r: usize| -> f64 {
        if h == 0 || r == 0 || o == 0 {
            0.0
        } else {
            let (p, q) = (o as f64 / h as f64, o as f64 / r as f64);
            2.0 * p * q / (p + q)
        }
    };
    let mut mismatches = 0;
    for _ in 0..100 {
        let (h, r) = (words(&mut rng), words(&mut rng));
        for n in 1..=2 {
            let hg: Vec<&[String]> = if h.len() < n { vec![] } else { h.windows(n).collect() };
            let rg: Vec<&[String]> = if r.len() < n { vec![] } else { r.windows(n).collect() };
            let mut counts: BTreeMap<&[String], (usize, usize)> = BTreeMap::new();
            for g in &hg {
                counts.entry(g).or_default().0 += 1;
            }
            for g in &rg {
                counts.entry(g).or_default().1 += 1;
            }
            let overlap: usize = counts.values().map(|(a, b)| a.min(b)).copied().sum();
            if rouge_n_tokens(&h, &r, n).f1 != f(overlap, hg.len(), rg.len()) {
                mismatches += 1;
            }
        }
        let mut lcs = 0;
        for mask in 0u32..(1 << h.len()) {
            let sub: Vec<&String> = (0..h.len()).filter(|i| mask >> i & 1 == 1).map(|i| &h[i]).collect();
            let mut it = r.iter();
            if sub.len() > lcs && sub.iter().all(|s| it.any(|x| x == *s)) {
                lcs = sub.len();
            }
        }
        if lcs_len(&h, &r) != lcs || rouge_l_tokens(&h, &r).f1 != f(lcs, h.len(), r.len()) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches over 100 string pairs"))
}

fn end_to_end(runs: &mut Runs) -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..SEEDS {
        let r = runs.get(k)?;
        let e = &r.outcome.evaluation;
        pass &= e.win_rate >= 0.70 && e.dialogues == 200 && r.elapsed < Duration::from_secs(15 * 60);
        parts.push(format!("seed {}: {:.3} on {} ({:.0?})", r.config.seed, e.win_rate, e.dialogues, r.elapsed));
    }
    verdict(pass, format!("win rate vs pretrained: {}", parts.join(", ")))
}

fn kl_anchoring(runs: &mut Runs) -> Result<Verdict> {
    let r = runs.get(0)?;
    let mut strong = r.config.clone();
    strong.weights.beta = 10.0;
    let anchored = pipeline::run_from_feedback(&r.prep, &strong, r.outcome.feedback.clone())?;
    let loose = r.outcome.mean_token_kl;
    verdict(
        anchored.mean_token_kl < loose,
        format!(
            "mean per-token KL {:.5} at beta {} vs {loose:.5} at beta {}",
            anchored.mean_token_kl, strong.weights.beta, r.config.weights.beta
        ),
    )
}

fn annotation_count(runs: &mut Runs) -> Result<Verdict> {
    let budgets = RunConfig::default().ablation.budgets;
    let labels: Vec<String> = budgets.iter().map(|b| b.to_string()).collect();
    let mut points: Vec<AblationPoint> = Vec::new();
    for k in 0..SEEDS {
        let r = runs.get(k)?;
        for (&budget, label) in budgets.iter().zip(&labels) {
            let p = if budget == r.config.feedback.dialogues {
                pipeline::point(r.config.seed, label.clone(), &r.outcome)
            } else {
                let run = pipeline::run_source(&r.prep, &r.config, r.config.feedback.source, budget)?;
                pipeline::point(r.config.seed, label.clone(), &run)
            };
            eprintln!("  seed {} budget {label}: {:.4}", p.seed, p.mean_oracle_reward);
            points.push(p);
        }
    }
    let report = AblationReport::from_points(points, &labels);
    let shown: Vec<String> = report.averages.iter().map(|(l, v)| format!("{l}: {v:.4}")).collect();
    verdict(report.is_non_decreasing(), format!("3-seed mean oracle reward {}", shown.join(", ")))
}

fn service(_: &mut Runs) -> Result<Verdict> {
    let world: World = generate_world(&SyntheticWorldConfig {
        dialogues: 20,
        test_dialogues: 0,
        seed: 51,
        ..Default::default()
    })?;
    let dir = tempfile::tempdir()?;
    let annotators: Vec<String> = (0..4).map(|i| format!("ann{i}")).collect();
    let cfg = ServiceConfig {
        data_dir: dir.path().to_path_buf(),
        annotators: annotators.clone(),
        fsync: false,
        ..Default::default()
    };
    let store = Store::with_corpus(cfg.clone(), world.dialogues.clone(), world.summaries.clone())?;
    let n = store.snapshot().tasks().len();
    let accepted: usize = std::thread::scope(|s| {
        let handles: Vec<_> = annotators
            .iter()
            .enumerate()
            .map(|(i, ann)| {
                let (store, world) = (&store, &world);
                s.spawn(move || annotate(store, world, ann, i as u64))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("annotator thread")).sum()
    });
    let persisted = std::fs::read_to_string(dir.path().join(LOG_FILE))?.lines().count();
    let snapshot = store.snapshot();
    let (fingerprint, entries) = (snapshot.status_fingerprint(), snapshot.entries().to_vec());
    drop(snapshot);
    drop(store);
    let log_before = std::fs::read(dir.path().join(LOG_FILE))?;
    let reopened = Store::with_corpus(cfg, world.dialogues.clone(), world.summaries.clone())?;
    let same = reopened.snapshot().status_fingerprint() == fingerprint
        && reopened.snapshot().entries() == &entries[..]
        && std::fs::read(dir.path().join(LOG_FILE))? == log_before;
    verdict(
        accepted == n && persisted == n && entries.len() == n && same,
        format!("{n} tasks, {accepted} accepted, {persisted} persisted by 4 concurrent annotators; restart identical: {same}"),
    )
}

fn annotate(store: &Store, world: &World, ann: &str, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = |id: &Option<String>| world.summaries.iter().find(|s| Some(&s.id) == id.as_ref()).expect("summary");
    let mut accepted = 0;
    while let Some(t) = store.snapshot().next_task(ann, None).expect("annotator") {
        match t.kind {
            TaskKind::Highlight => {
                let spans = world.facts[&t.dialogue_id].iter().map(|f| f.span).collect();
                store
                    .submit_highlights(&HighlightSubmission {
                        annotator_id: ann.into(),
                        task_id: t.task_id.clone(),
                        spans,
                    })
                    .expect("highlight accepted");
            }
            TaskKind::Comparison => {
                let d = world.dialogues.iter().find(|d| d.id == t.dialogue_id).expect("dialogue");
                let c = simulate_annotator(d, text(&t.summary_a_id), text(&t.summary_b_id), &world.oracle, 0.1, ann, &mut rng)
                    .expect("oracle");
                store
                    .submit_comparison(&ComparisonSubmission {
                        annotator_id: ann.into(),
                        task_id: t.task_id.clone(),
                        scores: Dimension::ALL.iter().map(|d| (d.name().to_string(), i64::from(c.score(*d)))).collect(),
                    })
                    .expect("comparison accepted");
            }
        }
        accepted += 1;
    }
    accepted
}

type Criterion = fn(&mut Runs) -> Result<Verdict>;

fn main() {
    // `cargo test -- --list` and filters are for libtest targets; ignore them here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, Criterion); 10] = [
        ("autodiff-gradients", autodiff),
        ("gae-oracle", gae_oracle),
        ("reward-conservation", conservation),
        ("preference-loss-closed-forms", preference_closed_forms),
        ("reward-model-recovery", reward_model_recovery),
        ("rouge-oracle", rouge_oracle),
        ("end-to-end-win-rate", end_to_end),
        ("kl-anchoring", kl_anchoring),
        ("annotation-count-trend", annotation_count),
        ("service-conservation-recovery", service),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut runs = Runs::default();
    let mut unexpected = 0;
    for (name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == name)) {
            continue;
        }
        let (pass, detail) = match check(&mut runs) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let known = KNOWN_FAILING.contains(&name);
        let tag = match (pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{tag} {name}: {detail}");
        if !pass && (strict || !known) {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        std::process::exit(1);
    }
}
