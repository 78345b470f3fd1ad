//! The teacher/learner conversation game.
//!
//! A session samples two classes. Each turn the teacher picks an act
//! (question, silence or statement) about one object, the learner answers
//! with a token sequence, and [`Game::step`] returns the reward and the next
//! teacher sentence.

mod dataset;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Grammar, GrammarError, SentenceKind, TaskLevel, TokenId, UtteranceClass, EOS_ID};

pub use dataset::{
    class_overlap, synth_image, ConceptDataset, Image, ImageSpec, Split, ANIMAL_CLASSES,
    FRUIT_CLASSES,
};

pub const QUESTION_REWARD: f64 = 0.1;
pub const INCORRECT_REWARD: f64 = -1.0;
pub const CORRECT_REWARD: f64 = 1.0;
pub const STATEMENT_REWARD: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("dataset needs at least 2 classes, has {0}")]
    TooFewClasses(usize),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("variation ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("max_steps must be positive")]
    ZeroSteps,
    #[error("session already finished")]
    SessionFinished,
    #[error("session still running")]
    SessionRunning,
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub max_steps: usize,
    /// Probability that a turn shows a non-canonical image instance.
    pub variation_ratio: f64,
    pub task: TaskLevel,
    /// Whether asking about an object the teacher already named this session
    /// counts against session success (it is still rewarded).
    pub question_on_taught_breaks_success: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_steps: 6,
            variation_ratio: 0.0,
            task: TaskLevel::Word,
            question_on_taught_breaks_success: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_steps == 0 {
            return Err(EnvError::ZeroSteps);
        }
        if !(0.0..=1.0).contains(&self.variation_ratio) {
            return Err(EnvError::InvalidRatio(self.variation_ratio));
        }
        Ok(())
    }
}

/// What the learner sees on one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Teacher sentence without the end-of-sentence token; empty for silence.
    pub sentence: Vec<TokenId>,
    pub image: Arc<Image>,
}

/// One learner turn as the judge saw it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// The teacher act the learner responded to.
    pub context: SentenceKind,
    /// Whether the teacher had named the object earlier in the session.
    pub taught: bool,
    pub utterance: UtteranceClass,
    pub reward: f64,
    pub class: usize,
    pub instance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub utterance: UtteranceClass,
    pub reward: f64,
    /// Next teacher sentence and image; after the last turn the sentence is
    /// empty and the image unchanged.
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct SessionState {
    rng: ChaCha8Rng,
    classes: [usize; 2],
    object: usize,
    instance: usize,
    context: SentenceKind,
    taught: Vec<usize>,
    step: usize,
    done: bool,
    sentence: Vec<TokenId>,
    trace: Vec<TurnRecord>,
}

impl SessionState {
    pub fn classes(&self) -> [usize; 2] {
        self.classes
    }

    /// Dataset class index of the current object.
    pub fn object(&self) -> usize {
        self.object
    }

    pub fn instance(&self) -> usize {
        self.instance
    }

    pub fn context(&self) -> SentenceKind {
        self.context
    }

    pub fn taught(&self) -> &[usize] {
        &self.taught
    }

    pub fn is_taught(&self, class: usize) -> bool {
        self.taught.contains(&class)
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trace(&self) -> &[TurnRecord] {
        &self.trace
    }

    pub fn total_reward(&self) -> f64 {
        self.trace.iter().map(|t| t.reward).sum()
    }
}

/// Whether a single learner utterance was the right behavior for its context.
pub fn turn_correct(
    context: SentenceKind,
    taught: bool,
    utterance: UtteranceClass,
    question_on_taught_breaks_success: bool,
) -> bool {
    match context {
        SentenceKind::Statement => utterance == UtteranceClass::CorrectStatement,
        SentenceKind::Question | SentenceKind::Silence => {
            if taught {
                utterance == UtteranceClass::CorrectStatement
                    || (!question_on_taught_breaks_success && utterance == UtteranceClass::Question)
            } else {
                utterance == UtteranceClass::Question
            }
        }
    }
}

/// True iff the session has at least one turn and every turn was correct.
pub fn session_success(trace: &[TurnRecord], question_on_taught_breaks_success: bool) -> bool {
    !trace.is_empty()
        && trace
            .iter()
            .all(|t| turn_correct(t.context, t.taught, t.utterance, question_on_taught_breaks_success))
}

/// A dataset, its images, and the teacher.
#[derive(Clone, Debug)]
pub struct Game {
    dataset: ConceptDataset,
    grammar: Grammar,
    class_tokens: Vec<TokenId>,
    images: Vec<Vec<Arc<Image>>>,
    config: EnvConfig,
}

impl Game {
    pub fn new(dataset: ConceptDataset, grammar: Grammar, config: EnvConfig) -> Result<Self, EnvError> {
        dataset.validate()?;
        config.validate()?;
        if dataset.num_classes() < 2 {
            return Err(EnvError::TooFewClasses(dataset.num_classes()));
        }
        let class_tokens = dataset
            .classes
            .iter()
            .map(|c| grammar.vocab().class_id(c))
            .collect::<Result<Vec<_>, _>>()?;
        let images = (0..dataset.num_classes())
            .map(|c| {
                (0..dataset.instances[c])
                    .map(|i| Arc::new(dataset.synth_image(c, i)))
                    .collect()
            })
            .collect();
        Ok(Game {
            dataset,
            grammar,
            class_tokens,
            images,
            config,
        })
    }

    pub fn dataset(&self) -> &ConceptDataset {
        &self.dataset
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Same game with a different variation ratio.
    pub fn with_variation_ratio(&self, ratio: f64) -> Result<Self, EnvError> {
        let mut g = self.clone();
        g.config.variation_ratio = ratio;
        g.config.validate()?;
        Ok(g)
    }

    /// Vocabulary id of the name of dataset class `class`.
    pub fn class_token(&self, class: usize) -> TokenId {
        self.class_tokens[class]
    }

    pub fn image(&self, class: usize, instance: usize) -> Arc<Image> {
        self.images[class][instance].clone()
    }

    pub fn observation(&self, state: &SessionState) -> Observation {
        Observation {
            sentence: state.sentence.clone(),
            image: self.image(state.object, state.instance),
        }
    }

    /// Starts a session: two distinct classes, a random object among them
    /// and a uniformly drawn first teacher act.
    pub fn reset(&self, seed: u64) -> (SessionState, Observation) {
        let mut state = self.blank_state(seed);
        self.new_object_turn(&mut state);
        let obs = self.observation(&state);
        (state, obs)
    }

    /// Starts a session with a chosen first object and teacher act; the
    /// rest of the session is random as usual.
    pub fn reset_with(
        &self,
        seed: u64,
        classes: [usize; 2],
        object: usize,
        act: SentenceKind,
    ) -> Result<(SessionState, Observation), EnvError> {
        let n = self.dataset.num_classes();
        if classes[0] == classes[1] || classes.iter().any(|&c| c >= n) || !classes.contains(&object) {
            return Err(EnvError::Dataset(alloc::format!(
                "invalid session classes {classes:?} / object {object}"
            )));
        }
        let mut state = self.blank_state(seed);
        state.classes = classes;
        state.object = object;
        self.teacher_turn(&mut state, act);
        let obs = self.observation(&state);
        Ok((state, obs))
    }

    fn blank_state(&self, seed: u64) -> SessionState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dataset.num_classes();
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        SessionState {
            rng,
            classes: [a, b],
            object: a,
            instance: 0,
            context: SentenceKind::Silence,
            taught: Vec::new(),
            step: 0,
            done: false,
            sentence: Vec::new(),
            trace: Vec::new(),
        }
    }

    fn new_object_turn(&self, state: &mut SessionState) {
        state.object = state.classes[state.rng.gen_range(0..2)];
        let kind = SentenceKind::ALL[state.rng.gen_range(0..3)];
        self.teacher_turn(state, kind);
    }

    fn teacher_turn(&self, state: &mut SessionState, kind: SentenceKind) {
        let (object, ratio) = (state.object, self.config.variation_ratio);
        state.instance = self.dataset.sample_instance(object, ratio, &mut state.rng);
        state.context = kind;
        let mut sentence = self
            .grammar
            .generate(kind, Some(self.class_tokens[object]), self.config.task, &mut state.rng)
            .expect("dataset classes are in the vocabulary");
        if sentence.last() == Some(&EOS_ID) {
            sentence.pop();
        }
        state.sentence = sentence;
        if kind == SentenceKind::Statement && !state.taught.contains(&object) {
            state.taught.push(object);
        }
    }

    /// Judges `learner_tokens` against the current object, assigns the
    /// reward and advances the teacher.
    pub fn step(&self, state: &mut SessionState, learner_tokens: &[TokenId]) -> Result<Transition, EnvError> {
        if state.done {
            return Err(EnvError::SessionFinished);
        }
        let utterance = self.grammar.judge(learner_tokens, self.class_tokens[state.object]);
        let taught = state.is_taught(state.object);
        let context = state.context;
        let mut done = false;
        let mut next_same_object = false;
        let reward = match context {
            SentenceKind::Question | SentenceKind::Silence => match utterance {
                UtteranceClass::Question => {
                    next_same_object = true;
                    QUESTION_REWARD
                }
                UtteranceClass::Silence => {
                    next_same_object = true;
                    INCORRECT_REWARD
                }
                UtteranceClass::CorrectStatement => {
                    done = true;
                    CORRECT_REWARD
                }
                _ => INCORRECT_REWARD,
            },
            SentenceKind::Statement => {
                if utterance == UtteranceClass::CorrectStatement {
                    STATEMENT_REWARD
                } else {
                    INCORRECT_REWARD
                }
            }
        };
        state.trace.push(TurnRecord {
            context,
            taught,
            utterance,
            reward,
            class: state.object,
            instance: state.instance,
        });
        state.step += 1;
        if state.step >= self.config.max_steps {
            done = true;
        }
        state.done = done;
        if done {
            state.sentence.clear();
        } else if next_same_object {
            self.teacher_turn(state, SentenceKind::Statement);
        } else {
            self.new_object_turn(state);
        }
        let success = done && session_success(&state.trace, self.config.question_on_taught_breaks_success);
        Ok(Transition {
            utterance,
            reward,
            observation: self.observation(state),
            done,
            success,
        })
    }

    /// Success of a finished session.
    pub fn session_success(&self, state: &SessionState) -> Result<bool, EnvError> {
        if !state.done {
            return Err(EnvError::SessionRunning);
        }
        Ok(session_success(&state.trace, self.config.question_on_taught_breaks_success))
    }
}

#[cfg(test)]
mod tests;
