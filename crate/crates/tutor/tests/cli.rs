use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use tutor::commands::{self, GameChoice, TrainOptions};
use tutor::{Checkpoint, CliError, Overrides, Profile, RunConfig};
use tutor_core::env::ConceptDataset;
use tutor_core::grammar::{SentenceKind, EOS_ID};
use tutor_core::train::{report, EpisodeTrace, TurnTrace};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tutor"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// A few iterations at batch 2: enough to exercise every artifact.
fn tiny(mode: &str) -> Overrides {
    Overrides {
        set: vec![
            "train.iterations=3".into(),
            "train.batch_size=2".into(),
            "train.replay_sample=1".into(),
            "train.probe_every=2".into(),
            "train.probe_sessions=3".into(),
        ],
        mode: Some(mode.into()),
        ..Overrides::default()
    }
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = tiny("proposed").resolve().unwrap();
    let opts = TrainOptions {
        out: dir.to_path_buf(),
        ..TrainOptions::default()
    };
    commands::train(&cfg, &opts).unwrap()
}

#[test]
fn resolution_order_is_profile_file_set_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[train]\ngamma = 0.5\nbatch_size = 3\nseed = 9\n[env]\nvariation_ratio = 0.25\n").unwrap();
    let cfg = Overrides {
        config: Some(path),
        set: vec!["train.batch_size=5".into()],
        seed: Some(11),
        mode: Some("reinforce".into()),
        ..Overrides::default()
    }
    .resolve()
    .unwrap();
    assert_eq!(cfg.profile, Profile::Desk);
    assert_eq!(cfg.train.gamma, 0.5);
    assert_eq!(cfg.train.batch_size, 5);
    assert_eq!(cfg.train.seed, 11);
    assert_eq!(cfg.train.mode.as_str(), "reinforce");
    assert_eq!(cfg.env.variation_ratio, 0.25);
    assert_eq!(cfg.agent, RunConfig::for_profile(Profile::Desk).agent);
}

#[test]
fn paper_profile_selects_full_dimensions() {
    let cfg = Overrides {
        profile: Some(Profile::Paper),
        ..Overrides::default()
    }
    .resolve()
    .unwrap();
    assert_eq!(cfg.agent.state_dim, 1024);
    assert_eq!(cfg.data.train, "preset:animal");
    assert_eq!(cfg.train.optimizer.learning_rate, 1e-5);
}

#[test]
fn config_errors_name_the_field() {
    let err = |set: &str| {
        Overrides {
            set: vec![set.into()],
            ..Overrides::default()
        }
        .resolve()
        .unwrap_err()
        .to_string()
    };
    assert!(err("train.gamma=\"x\"").contains("train.gamma"));
    assert!(err("train.bogus=1").contains("train.bogus"));
    assert!(err("train.gamma=0").contains("gamma"));
    assert!(err("env.variation_ratio=2").contains("ratio"));
}

#[test]
fn resolved_config_round_trips() {
    let cfg = tiny("imitation").resolve().unwrap();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn manifest_round_trips() {
    let ds = ConceptDataset::desk_test();
    let text = tutor::manifest::to_text(&ds);
    assert_eq!(tutor::manifest::parse(&text).unwrap(), ds);
    assert!(tutor::manifest::parse("name = \"x\"\nsplit = \"test\"\nclasses = [\"a\"]\ninstances = [1, 2]\n").is_err());
}

#[test]
fn missing_manifest_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--set",
        "data.train=/definitely/not/here.toml",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("here.toml"));
}

#[test]
fn unknown_key_exits_with_config_code() {
    let out = run(&["config", "--set", "agent.wings=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("agent.wings"));
}

#[test]
fn manifest_file_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.toml");
    let mut ds = ConceptDataset::desk_train();
    ds.classes.truncate(3);
    ds.instances.truncate(3);
    fs::write(&path, tutor::manifest::to_text(&ds)).unwrap();
    let mut o = tiny("imitation");
    o.set.push(format!("data.train=\"{}\"", path.display()));
    let run_dir = commands::train(&o.resolve().unwrap(), &TrainOptions {
        out: dir.path().join("runs"),
        ..TrainOptions::default()
    })
    .unwrap();
    let ckpt = Checkpoint::load(&run_dir.join(commands::FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.vocab.class_names().len(), 3 + 4);
}

#[test]
fn train_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = trained(dir.path());
    let b = trained(dir.path());
    assert_ne!(a, b);
    let ma = fs::read(a.join(commands::METRICS_FILE)).unwrap();
    let mb = fs::read(b.join(commands::METRICS_FILE)).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    let lines: Vec<serde_json::Value> = String::from_utf8(ma)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for key in ["iter", "mode", "task", "mean_reward", "L_I", "L_R", "L_V", "probe_success_rate", "wallclock"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    assert!(lines[0]["probe_success_rate"].is_null());
    assert!(lines[1]["probe_success_rate"].is_number());
    let saved = RunConfig::from_toml(&fs::read_to_string(a.join(commands::CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(saved, tiny("proposed").resolve().unwrap());
    assert!(a.file_name().unwrap().to_str().unwrap().starts_with(&saved.hash()[..12]));
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = tiny("reinforce");
    o.set.push("checkpoint_every=1".into());
    let run_dir = commands::train(&o.resolve().unwrap(), &TrainOptions {
        out: dir.path().to_path_buf(),
        ..TrainOptions::default()
    })
    .unwrap();
    for name in ["iter-000001.ckpt", "iter-000002.ckpt", commands::FINAL_CHECKPOINT] {
        assert!(run_dir.join(name).exists(), "{name}");
    }
    assert_eq!(Checkpoint::load(&run_dir.join("iter-000002.ckpt")).unwrap().iteration, 2);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained(dir.path()).join(commands::FINAL_CHECKPOINT);
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.iteration, 3);
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    assert_eq!(bytes, fs::read(&path).unwrap());
    let again = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(again.store.shape_table(), ckpt.store.shape_table());
    for ((_, _, a), (_, _, b)) in again.store.iter().zip(ckpt.store.iter()) {
        assert_eq!(a, b);
    }

    let is_ckpt_err = |b: &[u8]| matches!(Checkpoint::read_from(&mut &b[..]), Err(CliError::Checkpoint(_)));
    assert!(is_ckpt_err(&bytes[..bytes.len() - 5]));
    let mut flipped = bytes.clone();
    flipped[0] ^= 1;
    assert!(is_ckpt_err(&flipped));
    // A config byte: the stored hash no longer matches.
    let mut edited = bytes.clone();
    edited[8 + 4 + 32 + 8 + 2] ^= 1;
    assert!(is_ckpt_err(&edited));

    // Same tensors under a config with another width fail the shape check.
    let mut wrong = ckpt.clone();
    wrong.config.agent.state_dim += 1;
    let mut buf = Vec::new();
    wrong.write_to(&mut buf).unwrap();
    assert!(is_ckpt_err(&buf));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes[..100]).unwrap();
    let out = run(&["eval", bad.to_str().unwrap(), "--sessions", "2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_reports_interval_and_refuses_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained(dir.path()).join(commands::FINAL_CHECKPOINT);
    let ckpt = Checkpoint::load(&path).unwrap();
    let rep = commands::eval(&ckpt, &GameChoice::default(), 20, 0).unwrap();
    assert_eq!(rep.sessions, 20);
    assert!(rep.interval.0 <= rep.success_rate && rep.success_rate <= rep.interval.1);

    let overlap = GameChoice {
        dataset: Some("preset:desk-train".into()),
        ..GameChoice::default()
    };
    assert!(matches!(commands::eval(&ckpt, &overlap, 5, 0), Err(CliError::Config(_))));
    let out = run(&["eval", path.to_str().unwrap(), "--dataset", "preset:desk-train", "--sessions", "2"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["eval", path.to_str().unwrap(), "--sessions", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sessions"], 4);
}

#[test]
fn all_silent_learner_scores_minus_six() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let games = commands::build_games(&cfg).unwrap();
    let outcomes = (0..200).map(|seed| {
        let (mut state, _) = games.test.reset(seed);
        let mut total = 0.0;
        loop {
            let t = games.test.step(&mut state, &[EOS_ID]).unwrap();
            total += t.reward;
            if t.done {
                return (t.success, total);
            }
        }
    });
    let rep = report(outcomes);
    assert_eq!(rep.success_rate, 0.0);
    // Silence is never a correct reply, never ends a session early, and
    // always costs -1, so every session lasts six turns.
    assert_eq!(rep.avg_reward, -6.0);
}

/// Transcript parsed back into (object, learner text, judged class) per turn.
fn parse_transcript(text: &str) -> Vec<(String, String, String)> {
    let mut turns = Vec::new();
    let mut object = String::new();
    let mut learner = String::new();
    for line in text.lines() {
        let l = line.trim_start();
        if let Some(rest) = l.strip_prefix("turn ") {
            object = rest.split("object ").nth(1).unwrap().split_whitespace().next().unwrap().to_string();
        } else if let Some(rest) = l.strip_prefix("learner:") {
            learner = rest.trim().to_string();
        } else if let Some(rest) = l.strip_prefix("judged: ") {
            let class = rest.split_whitespace().next().unwrap().to_string();
            turns.push((object.clone(), learner.clone(), class));
        }
    }
    turns
}

#[test]
fn transcript_round_trips_through_the_judge() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::load(&trained(dir.path()).join(commands::FINAL_CHECKPOINT)).unwrap();
    let game = commands::checkpoint_game(&ckpt, &GameChoice::default(), false).unwrap();
    let text = commands::transcript(&ckpt, &game, 12, 100).unwrap();
    let footers = text.lines().filter(|l| l.trim_start().starts_with("SUCCESS") || l.trim_start().starts_with("FAILURE"));
    assert_eq!(footers.count(), 12);
    let vocab = game.grammar().vocab();
    let turns = parse_transcript(&text);
    assert!(!turns.is_empty());
    for (object, learner, judged) in turns {
        let tokens = vocab.encode(&learner).unwrap();
        let class = vocab.class_id(&object).unwrap();
        let again = game.grammar().judge(&tokens, class);
        assert_eq!(commands::utterance_name(again), judged, "{object}: `{learner}`");
    }
}

#[test]
fn silent_learner_renders_empty_lines() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let games = commands::build_games(&cfg).unwrap();
    let game = &games.test;
    let (mut state, obs) = game.reset(4);
    let mut teacher = obs.sentence;
    let mut turns = Vec::new();
    loop {
        let (context, class, instance) = (state.context(), state.object(), state.instance());
        let taught = state.is_taught(class);
        let t = game.step(&mut state, &[EOS_ID]).unwrap();
        turns.push(TurnTrace {
            context,
            taught,
            teacher: std::mem::take(&mut teacher),
            image: Arc::new(game.dataset().synth_image(class, instance)),
            class,
            instance,
            learner: vec![EOS_ID],
            utterance: t.utterance,
            reward: t.reward,
            log_prob: 0.0,
            confidence: 0.0,
            value: 0.0,
            attention: Vec::new(),
            importance: None,
            teacher_gates: Vec::new(),
            speaker_gates: Vec::new(),
            action: None,
        });
        teacher = t.observation.sentence;
        if t.done {
            break;
        }
    }
    let ep = EpisodeTrace {
        seed: 4,
        turns,
        success: false,
    };
    let mut text = String::new();
    commands::render_session(&mut text, game, 0, &ep);
    let learner_lines: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with("learner:")).collect();
    assert_eq!(learner_lines.len(), 6);
    assert!(learner_lines.iter().all(|l| l.trim() == "learner:"));
    assert!(text.contains("FAILURE  reward -6.0"));
    assert!(ep.turns.iter().any(|t| t.context != SentenceKind::Statement));
}

#[test]
fn trace_attention_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::load(&trained(dir.path()).join(commands::FINAL_CHECKPOINT)).unwrap();
    let game = commands::checkpoint_game(&ckpt, &GameChoice::default(), true).unwrap();
    for seed in 0..5 {
        let csv = commands::trace(&ckpt, &game, seed).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("turn,speaker,position,word,eta,g_mem,g"));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let turns: usize = rows.iter().map(|r| r[0].parse::<usize>().unwrap()).max().unwrap();
        for t in 1..=turns {
            let teacher: Vec<&Vec<&str>> = rows
                .iter()
                .filter(|r| r[0] == t.to_string() && r[1] == "teacher" && r[3] != "<eos>")
                .collect();
            if teacher.is_empty() {
                continue;
            }
            let eta: f64 = teacher.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
            assert!((eta - 1.0).abs() < 1e-9, "turn {t}: {eta}");
            let g_mem: Vec<&str> = teacher.iter().map(|r| r[5]).collect();
            assert!(g_mem.iter().all(|g| *g == g_mem[0]));
            for r in &teacher {
                let g: f64 = r[6].parse().unwrap();
                assert!((0.0..=1.0).contains(&g));
            }
        }
    }
}

#[test]
fn features_have_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained(dir.path()).join(commands::FINAL_CHECKPOINT);
    let ckpt = Checkpoint::load(&path).unwrap();
    for pool in ["preset:desk-train", "preset:desk-test"] {
        let choice = GameChoice {
            dataset: Some(pool.into()),
            ..GameChoice::default()
        };
        let game = commands::checkpoint_game(&ckpt, &choice, true).unwrap();
        let csv = commands::features(&ckpt, &game).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), game.dataset().num_images());
        for r in rows {
            assert_eq!(r.split(',').count(), 2 + ckpt.config.agent.key_dim);
        }
    }
    let out_file = dir.path().join("f.csv");
    let out = run(&["features", path.to_str().unwrap(), "--out", out_file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out_file).unwrap().lines().count(), 1 + 12);
}

#[test]
fn transcript_and_trace_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained(dir.path()).join(commands::FINAL_CHECKPOINT);
    let out = run(&["transcript", path.to_str().unwrap(), "--sessions", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("session 0"));
    let out = run(&["trace", path.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("turn,speaker"));
}
