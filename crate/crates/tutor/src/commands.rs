//! The subcommands, as plain functions returning their output.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tutor_core::autodiff::Graph;
use tutor_core::env::{class_overlap, ConceptDataset, EnvConfig, Game};
use tutor_core::grammar::{Grammar, SentenceKind, UtteranceClass, Vocabulary};
use tutor_core::train::{greedy_episodes, summarize, unroll, EpisodeTrace, EvalReport, Policy, Source, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// The two games of a run, sharing one vocabulary.
pub struct Games {
    pub vocab: Vocabulary,
    pub train: Game,
    pub test: Game,
}

pub fn build_games(cfg: &RunConfig) -> Result<Games> {
    let train = manifest::load(&cfg.data.train)?;
    let test = manifest::load(&cfg.data.test)?;
    check_disjoint(&train, &test)?;
    let mut names = train.classes.clone();
    names.extend(test.classes.iter().cloned());
    let vocab = Vocabulary::new(&names).map_err(|e| CliError::Config(format!("data: {e}")))?;
    Ok(Games {
        train: game(train, &vocab, cfg.env)?,
        test: game(test, &vocab, cfg.env)?,
        vocab,
    })
}

fn check_disjoint(train: &ConceptDataset, test: &ConceptDataset) -> Result<()> {
    let shared = class_overlap(train, test);
    if shared.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "test classes overlap the training classes: {}",
            shared.join(", ")
        )))
    }
}

fn game(ds: ConceptDataset, vocab: &Vocabulary, env: EnvConfig) -> Result<Game> {
    Game::new(ds, Grammar::new(vocab.clone()), env).map_err(|e| CliError::Config(format!("env: {e}")))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Parent of the run directory.
    pub out: PathBuf,
    /// Record seconds since start in each metric record. Off by default so
    /// that metric streams of equal runs are byte-identical.
    pub wallclock: bool,
    /// Echo each record to stderr.
    pub verbose: bool,
}

/// Trains per `cfg` and returns the run directory.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let games = build_games(cfg)?;
    let dir = run_dir(&opts.out, cfg)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    fs::write(dir.join(VOCAB_FILE), games.vocab.to_text())?;
    let mut metrics = std::io::BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.agent.clone(), &games.train)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let start = Instant::now();
    while trainer.iteration() < cfg.train.iterations {
        let mut rec = trainer
            .step(&games.train, Some(&games.test))
            .map_err(|e| CliError::Other(e.into()))?;
        if opts.wallclock {
            rec.wallclock = Some(start.elapsed().as_secs_f64());
        }
        let line = serde_json::to_string(&rec).map_err(|e| CliError::Other(e.into()))?;
        writeln!(metrics, "{line}")?;
        if opts.verbose {
            eprintln!("{line}");
        }
        let it = trainer.iteration();
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.train.iterations {
            snapshot(cfg, &games.vocab, &trainer).save(&dir.join(format!("iter-{it:06}.ckpt")))?;
        }
    }
    metrics.flush()?;
    snapshot(cfg, &games.vocab, &trainer).save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(dir)
}

fn snapshot(cfg: &RunConfig, vocab: &Vocabulary, trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        iteration: trainer.iteration() as u64,
        store: trainer.store.clone(),
    }
}

/// `<out>/<config hash prefix>-<unix seconds>`, suffixed when taken.
fn run_dir(out: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("{}-{stamp}", &cfg.hash()[..12]);
    fs::create_dir_all(out)?;
    let mut dir = out.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = out.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

/// Which pool a checkpoint command plays on.
#[derive(Clone, Debug, Default)]
pub struct GameChoice {
    /// Dataset reference; defaults to the checkpoint's test pool.
    pub dataset: Option<String>,
    pub variation_ratio: Option<f64>,
}

/// A game over `choice`'s dataset with the checkpoint's vocabulary. Refuses
/// datasets that share classes with the training pool unless `allow_train`.
pub fn checkpoint_game(ckpt: &Checkpoint, choice: &GameChoice, allow_train: bool) -> Result<Game> {
    let reference = choice.dataset.as_deref().unwrap_or(&ckpt.config.data.test);
    let ds = manifest::load(reference)?;
    if !allow_train {
        check_disjoint(&manifest::load(&ckpt.config.data.train)?, &ds)?;
    }
    if let Some(missing) = ds.classes.iter().find(|c| ckpt.vocab.class_id(c).is_err()) {
        return Err(CliError::Config(format!("class `{missing}` is not in the checkpoint vocabulary")));
    }
    let mut env = ckpt.config.env;
    if let Some(r) = choice.variation_ratio {
        env.variation_ratio = r;
    }
    env.validate().map_err(|e| CliError::Config(format!("env: {e}")))?;
    game(ds, &ckpt.vocab, env)
}

fn episodes(ckpt: &Checkpoint, game: &Game, seeds: std::ops::Range<u64>) -> Result<Vec<EpisodeTrace>> {
    let agent = ckpt.agent()?;
    greedy_episodes(&agent, &ckpt.store, game, seeds).map_err(|e| CliError::Other(e.into()))
}

/// Greedy sessions `seed..seed + sessions` on held-out classes.
pub fn eval(ckpt: &Checkpoint, choice: &GameChoice, sessions: usize, seed: u64) -> Result<EvalReport> {
    let game = checkpoint_game(ckpt, choice, false)?;
    Ok(summarize(&episodes(ckpt, &game, seed..seed + sessions as u64)?))
}

pub fn utterance_name(u: UtteranceClass) -> &'static str {
    match u {
        UtteranceClass::Question => "question",
        UtteranceClass::CorrectStatement => "correct_statement",
        UtteranceClass::WrongStatement => "wrong_statement",
        UtteranceClass::Silence => "silence",
        UtteranceClass::Invalid => "invalid",
    }
}

pub fn context_name(k: SentenceKind) -> &'static str {
    match k {
        SentenceKind::Question => "question",
        SentenceKind::Silence => "silence",
        SentenceKind::Statement => "statement",
    }
}

/// Human-readable dialogues, one block per session:
///
/// ```text
/// session 0 (seed 0)
///   turn 1  object apple  act question  taught no
///     teacher: what
///     learner: what
///     judged: question  reward +0.1
///   SUCCESS  reward +1.1
/// ```
pub fn transcript(ckpt: &Checkpoint, game: &Game, sessions: usize, seed: u64) -> Result<String> {
    let mut out = String::new();
    for (i, ep) in episodes(ckpt, game, seed..seed + sessions as u64)?.iter().enumerate() {
        render_session(&mut out, game, i, ep);
    }
    Ok(out)
}

/// Appends one session block of [`transcript`] to `out`.
pub fn render_session(out: &mut String, game: &Game, index: usize, ep: &EpisodeTrace) {
    let vocab = game.grammar().vocab();
    writeln!(out, "session {index} (seed {})", ep.seed).unwrap();
    for (t, turn) in ep.turns.iter().enumerate() {
        let object = &game.dataset().classes[turn.class];
        writeln!(
            out,
            "  turn {}  object {object}  act {}  taught {}",
            t + 1,
            context_name(turn.context),
            if turn.taught { "yes" } else { "no" }
        )
        .unwrap();
        writeln!(out, "    teacher: {}", vocab.decode(&turn.teacher)).unwrap();
        writeln!(out, "    learner: {}", vocab.decode(&turn.learner)).unwrap();
        writeln!(out, "    judged: {}  reward {:+}", utterance_name(turn.utterance), turn.reward).unwrap();
    }
    let outcome = if ep.success { "SUCCESS" } else { "FAILURE" };
    writeln!(out, "  {outcome}  reward {:+.1}", ep.total_reward()).unwrap();
}

/// Per-word gate trace of one greedy session as CSV with columns
/// `turn,speaker,position,word,eta,g_mem,g`. Teacher rows carry the word
/// attention, the sentence's importance gate and the fusion gate used to
/// predict that word; learner rows carry only the fusion gate.
pub fn trace(ckpt: &Checkpoint, game: &Game, seed: u64) -> Result<String> {
    let agent = ckpt.agent()?;
    let mut g = Graph::new(&ckpt.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = Source::Live {
        game,
        seed,
        policy: Policy::Argmax,
    };
    let ep = unroll(&agent, &mut g, source, true, &mut rng).map_err(|e| CliError::Other(e.into()))?;
    let vocab = game.grammar().vocab();
    let mut out = String::from("turn,speaker,position,word,eta,g_mem,g\n");
    let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for (t, turn) in ep.trace.turns.iter().enumerate() {
        let words = turn.teacher.iter().map(|&w| vocab.token(w)).chain(["<eos>"]);
        for (i, word) in words.enumerate() {
            let eta = turn.attention.get(i).copied();
            let g_mem = if i < turn.teacher.len() { turn.importance } else { None };
            let gate = turn.teacher_gates.get(i).copied();
            writeln!(out, "{},teacher,{i},{word},{},{},{}", t + 1, num(eta), num(g_mem), num(gate)).unwrap();
        }
        for (i, (&w, &gate)) in turn.learner.iter().zip(&turn.speaker_gates).enumerate() {
            writeln!(out, "{},learner,{i},{},,,{gate}", t + 1, vocab.token(w)).unwrap();
        }
    }
    Ok(out)
}

/// Visual key of every image in `game`'s dataset as CSV:
/// `class,instance,f0,...`.
pub fn features(ckpt: &Checkpoint, game: &Game) -> Result<String> {
    let agent = ckpt.agent()?;
    let ds = game.dataset();
    let dim = ckpt.config.agent.key_dim;
    let mut out = String::from("class,instance");
    for i in 0..dim {
        write!(out, ",f{i}").unwrap();
    }
    out.push('\n');
    for (c, name) in ds.classes.iter().enumerate() {
        for inst in 0..ds.instances[c] {
            let mut g = Graph::new(&ckpt.store);
            let key = agent
                .encode_image(&mut g, &game.image(c, inst))
                .map_err(|e| CliError::Other(e.into()))?;
            write!(out, "{name},{inst}").unwrap();
            for v in g.value(key) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}
