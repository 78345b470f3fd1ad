use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{unroll, EpisodeTrace, Policy, Result, Source};
use crate::agent::Agent;
use crate::autodiff::{Graph, ParamStore};
use crate::env::Game;
use crate::grammar::{SentenceKind, UtteranceClass};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub avg_reward: f64,
    /// 95% Wilson score interval of the success rate.
    pub interval: (f64, f64),
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * libm::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Greedy sessions, one per seed.
pub fn greedy_episodes(
    agent: &Agent,
    store: &ParamStore,
    game: &Game,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<EpisodeTrace>> {
    // Greedy decoding never draws from this generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    seeds
        .into_iter()
        .map(|seed| {
            let mut g = Graph::new(store);
            let policy = Policy::Argmax;
            Ok(unroll(agent, &mut g, Source::Live { game, seed, policy }, false, &mut rng)?.trace)
        })
        .collect()
}

/// Success rate and average reward of greedy sessions.
pub fn evaluate(
    agent: &Agent,
    store: &ParamStore,
    game: &Game,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<EvalReport> {
    Ok(summarize(&greedy_episodes(agent, store, game, seeds)?))
}

pub fn summarize(episodes: &[EpisodeTrace]) -> EvalReport {
    report(episodes.iter().map(|e| (e.success, e.total_reward())))
}

/// Report over `(success, total reward)` pairs, one per session.
pub fn report(outcomes: impl IntoIterator<Item = (bool, f64)>) -> EvalReport {
    let (mut sessions, mut successes, mut total) = (0usize, 0usize, 0.0);
    for (success, reward) in outcomes {
        sessions += 1;
        successes += success as usize;
        total += reward;
    }
    let n = sessions.max(1) as f64;
    EvalReport {
        sessions,
        successes,
        success_rate: successes as f64 / n,
        avg_reward: total / n,
        interval: wilson_interval(successes, sessions, 1.96),
    }
}

/// Behavior on first and second encounters of a class within a session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneShotReport {
    /// Classes whose first appearance was a question or silence.
    pub first_encounters: usize,
    /// ... and the learner asked a question there.
    pub first_questions: usize,
    /// First question or silence about a class after it was named.
    pub second_encounters: usize,
    /// ... and the learner named it correctly.
    pub second_correct: usize,
}

impl OneShotReport {
    pub fn question_rate(&self) -> f64 {
        self.first_questions as f64 / self.first_encounters.max(1) as f64
    }

    pub fn answer_rate(&self) -> f64 {
        self.second_correct as f64 / self.second_encounters.max(1) as f64
    }

    pub fn add(&mut self, episode: &EpisodeTrace) {
        let mut seen: Vec<usize> = Vec::new();
        let mut answered: Vec<usize> = Vec::new();
        for turn in &episode.turns {
            let asked = matches!(turn.context, SentenceKind::Question | SentenceKind::Silence);
            if !seen.contains(&turn.class) {
                seen.push(turn.class);
                if asked && !turn.taught {
                    self.first_encounters += 1;
                    self.first_questions += (turn.utterance == UtteranceClass::Question) as usize;
                }
            }
            if asked && turn.taught && !answered.contains(&turn.class) {
                answered.push(turn.class);
                self.second_encounters += 1;
                self.second_correct += (turn.utterance == UtteranceClass::CorrectStatement) as usize;
            }
        }
    }
}

/// Tallies first/second encounter behavior over greedy sessions.
pub fn one_shot_probe(
    agent: &Agent,
    store: &ParamStore,
    game: &Game,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<OneShotReport> {
    let mut report = OneShotReport::default();
    for ep in greedy_episodes(agent, store, game, seeds)? {
        report.add(&ep);
    }
    Ok(report)
}
