//! Joint training: imitation of the teacher, policy gradient with a value
//! baseline and target network, experience replay, and the baseline modes.

mod eval;
mod replay;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentError, Decode};
use crate::autodiff::{Adagrad, AdagradConfig, AutodiffError, GradStore, Graph, NodeId, ParamStore};
use crate::env::{EnvError, Game, Image};
use crate::grammar::{SentenceKind, TaskLevel, TokenId, UtteranceClass};

pub use eval::{
    evaluate, greedy_episodes, one_shot_probe, report, summarize, wilson_interval, EvalReport, OneShotReport,
};
pub use replay::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("cannot sample from an empty replay buffer")]
    EmptyReplay,
    #[error("expected {expected} value estimates, got {found}")]
    MissingValue { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

type Result<T> = core::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Imitation plus policy gradient on sampled utterances.
    #[default]
    Proposed,
    /// Policy gradient only.
    Reinforce,
    /// Imitation only, greedy decoding.
    Imitation,
    /// Imitation plus a Gaussian policy over the control vector.
    ImitationGaussianRl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Proposed, Mode::Reinforce, Mode::Imitation, Mode::ImitationGaussianRl];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::Reinforce => "reinforce",
            Mode::Imitation => "imitation",
            Mode::ImitationGaussianRl => "imitation_gaussian_rl",
        }
    }

    pub fn uses_imitation(self) -> bool {
        self != Mode::Reinforce
    }

    /// Whether a policy-gradient term (and so the value head) is trained.
    pub fn uses_policy_gradient(self) -> bool {
        self != Mode::Imitation
    }

    /// Decoding policy used while collecting training episodes.
    pub fn train_policy(self, sigma: f64) -> Policy {
        match self {
            Mode::Proposed | Mode::Reinforce => Policy::Sample,
            Mode::Imitation => Policy::Argmax,
            Mode::ImitationGaussianRl => Policy::Gaussian { sigma },
        }
    }
}

impl core::str::FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown mode `{s}`")))
    }
}

/// How the learner chooses its utterance on a live turn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Policy {
    Sample,
    Argmax,
    /// Greedy decoding from `ĉ = c + σ·ε`, `ε ~ N(0, I)`.
    Gaussian { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Discount of the policy-gradient advantage.
    pub gamma: f64,
    /// Discount of the value-loss bootstrap through the target network.
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdagradConfig,
    pub replay_capacity: usize,
    /// Stored episodes replayed per iteration.
    pub replay_sample: usize,
    pub replay_imitation: bool,
    pub replay_policy: bool,
    /// Iterations between copies of the value head into its target.
    pub target_sync: usize,
    pub gaussian_sigma: f64,
    /// Iterations between held-out probes; 0 disables them.
    pub probe_every: usize,
    pub probe_sessions: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Proposed,
            gamma: 0.99,
            lambda: 0.99,
            batch_size: 16,
            iterations: 2000,
            optimizer: AdagradConfig::default(),
            replay_capacity: 1000,
            replay_sample: 4,
            replay_imitation: true,
            replay_policy: true,
            target_sync: 10,
            gaussian_sigma: 0.1,
            probe_every: 50,
            probe_sessions: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for single-core runs of the desk-scale agent.
    pub fn desk() -> Self {
        TrainConfig {
            optimizer: AdagradConfig {
                learning_rate: 1e-3,
                ..AdagradConfig::default()
            },
            iterations: 600,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.gamma) {
            return Err(TrainError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !in_unit(self.lambda) {
            return Err(TrainError::Config(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.replay_capacity == 0 {
            return Err(TrainError::Config("replay_capacity must be at least 1".into()));
        }
        if self.target_sync == 0 {
            return Err(TrainError::Config("target_sync must be at least 1".into()));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(TrainError::Config("gaussian_sigma must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && o.decay > 0.0 && o.decay <= 1.0 && o.epsilon > 0.0) {
            return Err(TrainError::Config("optimizer settings out of range".into()));
        }
        Ok(())
    }
}

// ── episode traces ───────────────────────────────────────────────────

/// One turn: the teacher sentence the learner read and what it said back.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnTrace {
    pub context: SentenceKind,
    pub taught: bool,
    /// Teacher tokens without the end token.
    pub teacher: Vec<TokenId>,
    pub image: Arc<Image>,
    pub class: usize,
    pub instance: usize,
    pub learner: Vec<TokenId>,
    pub utterance: UtteranceClass,
    pub reward: f64,
    /// Log-probability of `learner` under the speaker.
    pub log_prob: f64,
    pub confidence: f64,
    pub value: f64,
    /// Word attention over `teacher`; empty for silence.
    pub attention: Vec<f64>,
    pub importance: Option<f64>,
    /// Fusion gate per scored teacher token (end token included).
    pub teacher_gates: Vec<f64>,
    pub speaker_gates: Vec<f64>,
    /// Perturbed control vector of the Gaussian policy.
    pub action: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub turns: Vec<TurnTrace>,
    pub success: bool,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.turns.iter().map(|t| t.reward).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward).collect()
    }
}

/// Where an unrolled episode comes from.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    /// A fresh session of `game`.
    Live { game: &'a Game, seed: u64, policy: Policy },
    /// A stored episode, replayed with its recorded utterances; `sigma`
    /// scores recorded Gaussian actions.
    Replay { trace: &'a EpisodeTrace, sigma: f64 },
}

/// Graph handles of one unrolled episode.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub trace: EpisodeTrace,
    /// Teacher-sentence negative log-likelihood per turn (when scored).
    pub nll: Vec<NodeId>,
    /// Log-probability of each learner utterance.
    pub log_probs: Vec<NodeId>,
    /// Gaussian log-density of each perturbed control, up to a constant.
    pub log_densities: Vec<NodeId>,
    pub values: Vec<NodeId>,
    pub target_values: Vec<f64>,
}

/// Counts of loss terms built, for checking what each mode touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub imitation_terms: usize,
    pub policy_terms: usize,
    pub value_terms: usize,
    pub episodes: usize,
    pub replayed: usize,
}

/// Runs one episode on `g`. `imitation` scores every teacher sentence.
pub fn unroll(
    agent: &Agent,
    g: &mut Graph<'_>,
    source: Source<'_>,
    imitation: bool,
    rng: &mut dyn RngCore,
) -> Result<Unrolled> {
    let mut session = agent.begin_session(g);
    let mut out = Unrolled {
        trace: EpisodeTrace {
            seed: 0,
            turns: Vec::new(),
            success: false,
        },
        nll: Vec::new(),
        log_probs: Vec::new(),
        log_densities: Vec::new(),
        values: Vec::new(),
        target_values: Vec::new(),
    };
    let mut live = match source {
        Source::Live { game, seed, policy } => {
            out.trace.seed = seed;
            let (state, obs) = game.reset(seed);
            Some((game, state, obs, policy))
        }
        Source::Replay { trace, .. } => {
            out.trace.seed = trace.seed;
            out.trace.success = trace.success;
            None
        }
    };
    let mut t = 0;
    loop {
        let (sentence, image, stored) = match (&live, source) {
            (Some((_, state, obs, _)), _) => {
                if state.is_done() {
                    break;
                }
                (obs.sentence.clone(), obs.image.clone(), None)
            }
            (None, Source::Replay { trace, .. }) => match trace.turns.get(t) {
                Some(turn) => (turn.teacher.clone(), turn.image.clone(), Some(turn)),
                None => break,
            },
            (None, Source::Live { .. }) => unreachable!("live episodes keep their state"),
        };
        let interp = agent.interpret_turn(g, &mut session, &sentence, &image, imitation)?;
        if let Some(nll) = interp.nll {
            out.nll.push(nll);
        }
        let value = agent.value_estimate(g, interp.h_i, interp.confidence, false)?;
        let target = agent.value_estimate(g, interp.h_i, interp.confidence, true)?;
        out.values.push(value);
        out.target_values.push(g.scalar(target));

        let gaussian = match (&live, source, stored) {
            (Some((.., Policy::Gaussian { sigma })), ..) => Some((*sigma, None)),
            (None, Source::Replay { sigma, .. }, Some(turn)) => turn.action.clone().map(|a| (sigma, Some(a))),
            _ => None,
        };
        let (utterance, action) = if let Some((sigma, recorded)) = gaussian {
            let control = agent.control(g, interp.h_i, interp.confidence)?;
            let action = match recorded {
                Some(a) => a,
                None => g
                    .value(control)
                    .iter()
                    .map(|c| c + sigma * rand::Rng::sample::<f64, _>(rng, StandardNormal))
                    .collect(),
            };
            let target = g.constant_vec(action.clone());
            let diff = g.sub(target, control)?;
            let sq = g.hadamard(diff, diff)?;
            let sq = g.sum_reduce(sq);
            out.log_densities.push(g.scale(sq, -0.5 / (sigma * sigma)));
            let decode = match stored {
                Some(turn) => Decode::Forced(&turn.learner),
                None => Decode::Argmax,
            };
            // The speaker starts from the control plus a constant offset, so
            // later imitation terms still reach the controller and h_I.
            let noise: Vec<f64> = action.iter().zip(g.value(control)).map(|(a, c)| a - c).collect();
            let noise = g.constant_vec(noise);
            let start = g.add(control, noise)?;
            let u = agent.speak_from(g, &mut session, start, interp.r, interp.confidence, decode, rng)?;
            (u, Some(action))
        } else {
            let decode = match (stored, &live) {
                (Some(turn), _) => Decode::Forced(&turn.learner),
                (None, Some((.., Policy::Argmax))) => Decode::Argmax,
                _ => Decode::Sample,
            };
            let (_, u) = agent.speak_turn(g, &mut session, &interp, decode, rng)?;
            (u, None)
        };
        out.log_probs.push(utterance.log_prob);

        let mut turn = TurnTrace {
            context: SentenceKind::Silence,
            taught: false,
            teacher: sentence,
            image,
            class: 0,
            instance: 0,
            learner: utterance.tokens.clone(),
            utterance: UtteranceClass::Silence,
            reward: 0.0,
            log_prob: g.scalar(utterance.log_prob),
            confidence: g.scalar(interp.confidence),
            value: g.scalar(value),
            attention: interp
                .extraction
                .as_ref()
                .map(|e| g.value(e.attention).to_vec())
                .unwrap_or_default(),
            importance: interp.extraction.as_ref().map(|e| g.scalar(e.importance)),
            teacher_gates: interp.gates.clone(),
            speaker_gates: utterance.gates.clone(),
            action,
        };
        match (&mut live, stored) {
            (Some((game, state, obs, _)), _) => {
                let tr = game.step(state, &utterance.tokens)?;
                let rec = *state.trace().last().expect("step records the turn");
                turn.context = rec.context;
                turn.taught = rec.taught;
                turn.class = rec.class;
                turn.instance = rec.instance;
                turn.utterance = rec.utterance;
                turn.reward = rec.reward;
                out.trace.success = tr.success;
                *obs = tr.observation;
            }
            (None, Some(s)) => {
                turn.context = s.context;
                turn.taught = s.taught;
                turn.class = s.class;
                turn.instance = s.instance;
                turn.utterance = s.utterance;
                turn.reward = s.reward;
            }
            _ => unreachable!(),
        }
        out.trace.turns.push(turn);
        t += 1;
    }
    Ok(out)
}

// ── losses ───────────────────────────────────────────────────────────

/// `A^t = r^{t+1} + γ·V(t+1) − V(t)`, with `V = 0` past the last turn.
pub fn advantages(rewards: &[f64], values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(TrainError::MissingValue {
            expected: rewards.len(),
            found: values.len(),
        });
    }
    Ok((0..rewards.len())
        .map(|t| rewards[t] + gamma * values.get(t + 1).copied().unwrap_or(0.0) - values[t])
        .collect())
}

/// Regression targets `r^{t+1} + λ·V'(t+1)`, bootstrapping 0 at the end.
pub fn value_targets(rewards: &[f64], target_values: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != target_values.len() {
        return Err(TrainError::MissingValue {
            expected: rewards.len(),
            found: target_values.len(),
        });
    }
    Ok((0..rewards.len())
        .map(|t| rewards[t] + lambda * target_values.get(t + 1).copied().unwrap_or(0.0))
        .collect())
}

/// Sum of the per-turn teacher-sentence negative log-likelihoods.
pub fn imitation_loss(g: &mut Graph<'_>, nll: &[NodeId]) -> Result<Option<NodeId>> {
    Ok(g.add_all(nll)?)
}

/// `−Σ_t A^t · log p(a^t)`; minimising it ascends the expected return.
pub fn policy_loss(g: &mut Graph<'_>, log_probs: &[NodeId], advantages: &[f64]) -> Result<Option<NodeId>> {
    if log_probs.len() != advantages.len() {
        return Err(TrainError::MissingValue {
            expected: log_probs.len(),
            found: advantages.len(),
        });
    }
    let terms: Vec<NodeId> = log_probs
        .iter()
        .zip(advantages)
        .map(|(&lp, &a)| g.scale(lp, -a))
        .collect();
    Ok(g.add_all(&terms)?)
}

/// `Σ_t (y^t − V(t))²`.
pub fn value_loss(g: &mut Graph<'_>, values: &[NodeId], targets: &[f64]) -> Result<Option<NodeId>> {
    if values.len() != targets.len() {
        return Err(TrainError::MissingValue {
            expected: targets.len(),
            found: values.len(),
        });
    }
    let mut terms = Vec::with_capacity(values.len());
    for (&v, &y) in values.iter().zip(targets) {
        let y = g.constant(crate::autodiff::Tensor::scalar(y));
        let d = g.sub(y, v)?;
        terms.push(g.hadamard(d, d)?);
    }
    Ok(g.add_all(&terms)?)
}

/// Which terms of the joint loss to build for one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub imitation: bool,
    pub policy: bool,
}

/// Loss node of one episode and the values of its parts.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpisodeLoss {
    pub total: Option<NodeId>,
    pub imitation: f64,
    pub policy: f64,
    pub value: f64,
}

/// Joint loss `L^I + L^R (+ L^V)` of an unrolled episode for `mode`.
pub fn episode_loss(
    g: &mut Graph<'_>,
    ep: &Unrolled,
    mode: Mode,
    mask: LossMask,
    gamma: f64,
    lambda: f64,
    counters: &mut Counters,
) -> Result<EpisodeLoss> {
    let mut out = EpisodeLoss::default();
    let mut parts = Vec::new();
    if mode.uses_imitation() && mask.imitation {
        if let Some(l) = imitation_loss(g, &ep.nll)? {
            counters.imitation_terms += ep.nll.len();
            out.imitation = g.scalar(l);
            parts.push(l);
        }
    }
    if mode.uses_policy_gradient() && mask.policy {
        let rewards = ep.trace.rewards();
        let values: Vec<f64> = ep.values.iter().map(|&v| g.scalar(v)).collect();
        let adv = advantages(&rewards, &values, gamma)?;
        let actions = if mode == Mode::ImitationGaussianRl {
            &ep.log_densities
        } else {
            &ep.log_probs
        };
        if let Some(l) = policy_loss(g, actions, &adv)? {
            counters.policy_terms += actions.len();
            out.policy = g.scalar(l);
            parts.push(l);
        }
        let targets = value_targets(&rewards, &ep.target_values, lambda)?;
        if let Some(l) = value_loss(g, &ep.values, &targets)? {
            counters.value_terms += ep.values.len();
            out.value = g.scalar(l);
            parts.push(l);
        }
    }
    out.total = g.add_all(&parts)?;
    Ok(out)
}

// ── trainer ──────────────────────────────────────────────────────────

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub mode: Mode,
    pub task: TaskLevel,
    pub mean_reward: f64,
    #[serde(rename = "L_I")]
    pub l_i: Option<f64>,
    #[serde(rename = "L_R")]
    pub l_r: Option<f64>,
    #[serde(rename = "L_V")]
    pub l_v: Option<f64>,
    pub probe_success_rate: Option<f64>,
    /// Seconds since the run started; filled in by callers that keep time.
    pub wallclock: Option<f64>,
}

/// Seeds of the held-out probe sessions, fixed across a run.
pub const PROBE_SEED_BASE: u64 = 0x5eed_0000_0000;

/// Parameters, optimizer and replay state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub agent: Agent,
    pub store: ParamStore,
    optimizer: Adagrad,
    replay: ReplayBuffer<EpisodeTrace>,
    rng: ChaCha8Rng,
    iter: usize,
    pub counters: Counters,
}

impl Trainer {
    /// Fresh agent for `game`'s vocabulary, with keys centred on its images.
    pub fn new(config: TrainConfig, agent_config: AgentConfig, game: &Game) -> Result<Self> {
        config.validate()?;
        agent_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let vocab = game.grammar().vocab().len();
        let agent = Agent::init(agent_config, vocab, &mut store, &mut rng)?;
        let ds = game.dataset();
        let images: Vec<Arc<Image>> = (0..ds.num_classes())
            .flat_map(|c| (0..ds.instances[c]).map(move |i| (c, i)))
            .map(|(c, i)| game.image(c, i))
            .collect();
        agent.center_keys(&mut store, images.iter().map(|i| &**i))?;
        agent.sync_target(&mut store);
        Self::resume(config, agent, store, rng)
    }

    /// Continues from existing parameters.
    pub fn resume(config: TrainConfig, agent: Agent, store: ParamStore, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let optimizer = Adagrad::new(config.optimizer, &store);
        let replay = ReplayBuffer::new(config.replay_capacity)?;
        Ok(Trainer {
            config,
            agent,
            store,
            optimizer,
            replay,
            rng,
            iter: 0,
            counters: Counters::default(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn replay(&self) -> &ReplayBuffer<EpisodeTrace> {
        &self.replay
    }

    /// Collects a batch, replays stored episodes, takes one optimizer step
    /// and, when due, probes `probe` with greedy decoding.
    pub fn step(&mut self, game: &Game, probe: Option<&Game>) -> Result<MetricRecord> {
        let cfg = &self.config;
        let mode = cfg.mode;
        let weight = 1.0 / cfg.batch_size as f64;
        let policy = mode.train_policy(cfg.gaussian_sigma);
        let mut grads = GradStore::zeros_like(&self.store);
        let mut fresh = Vec::with_capacity(cfg.batch_size);
        let (mut reward, mut l_i, mut l_r, mut l_v) = (0.0, 0.0, 0.0, 0.0);
        let full = LossMask {
            imitation: true,
            policy: true,
        };
        for _ in 0..cfg.batch_size {
            let seed = self.rng.next_u64();
            let mut g = Graph::new(&self.store);
            let ep = unroll(&self.agent, &mut g, Source::Live { game, seed, policy }, mode.uses_imitation(), &mut self.rng)?;
            let loss = episode_loss(&mut g, &ep, mode, full, cfg.gamma, cfg.lambda, &mut self.counters)?;
            if let Some(total) = loss.total {
                g.backward_into(total, weight, &mut grads)?;
            }
            reward += ep.trace.total_reward();
            l_i += loss.imitation;
            l_r += loss.policy;
            l_v += loss.value;
            self.counters.episodes += 1;
            fresh.push(ep.trace);
        }
        let mask = LossMask {
            imitation: cfg.replay_imitation,
            policy: cfg.replay_policy,
        };
        if cfg.replay_sample > 0 && !self.replay.is_empty() && (mask.imitation || mask.policy) {
            let picked: Vec<EpisodeTrace> = self
                .replay
                .sample(cfg.replay_sample, &mut self.rng)?
                .into_iter()
                .cloned()
                .collect();
            for trace in &picked {
                let mut g = Graph::new(&self.store);
                let source = Source::Replay {
                    trace,
                    sigma: cfg.gaussian_sigma,
                };
                let ep = unroll(&self.agent, &mut g, source, mode.uses_imitation() && mask.imitation, &mut self.rng)?;
                let loss = episode_loss(&mut g, &ep, mode, mask, cfg.gamma, cfg.lambda, &mut self.counters)?;
                if let Some(total) = loss.total {
                    g.backward_into(total, weight, &mut grads)?;
                }
                self.counters.replayed += 1;
            }
        }
        for trace in fresh {
            self.replay.push(trace);
        }
        self.optimizer.step(&mut self.store, &grads)?;
        self.iter += 1;
        if self.iter.is_multiple_of(self.config.target_sync) {
            self.agent.sync_target(&mut self.store);
        }
        let cfg = &self.config;
        let probe_success_rate = match probe {
            Some(p) if cfg.probe_every > 0 && self.iter.is_multiple_of(cfg.probe_every) => {
                let seeds = PROBE_SEED_BASE..PROBE_SEED_BASE + cfg.probe_sessions as u64;
                Some(evaluate(&self.agent, &self.store, p, seeds)?.success_rate)
            }
            _ => None,
        };
        let n = cfg.batch_size as f64;
        Ok(MetricRecord {
            iter: self.iter,
            mode,
            task: game.config().task,
            mean_reward: reward / n,
            l_i: mode.uses_imitation().then_some(l_i / n),
            l_r: mode.uses_policy_gradient().then_some(l_r / n),
            l_v: mode.uses_policy_gradient().then_some(l_v / n),
            probe_success_rate,
            wallclock: None,
        })
    }

    /// Runs the configured number of iterations, handing each record to `sink`.
    pub fn run(&mut self, game: &Game, probe: Option<&Game>, mut sink: impl FnMut(&MetricRecord)) -> Result<()> {
        while self.iter < self.config.iterations {
            let rec = self.step(game, probe)?;
            sink(&rec);
        }
        Ok(())
    }
}
