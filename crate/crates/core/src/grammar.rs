//! Teacher grammar, vocabulary and the utterance judge.
//!
//! ```text
//! start     → question | silence | statement
//! question  → "what" | "what" M | "tell what" N
//! statement → [prefix] G          (8 prefixes, including none)
//! ```

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const EOS_ID: TokenId = 0;
pub const PAD_ID: TokenId = 1;

/// Grammar terminals other than object names, in vocabulary order.
pub const TERMINALS: [&str; 12] = [
    "what", "is", "it", "this", "there", "do", "you", "see", "can", "observe", "tell", "i",
];

/// Continuations of "what".
pub const QUESTION_M: [&[&str]; 7] = [
    &["is", "it"],
    &["is", "this"],
    &["is", "there"],
    &["do", "you", "see"],
    &["can", "you", "see"],
    &["do", "you", "observe"],
    &["can", "you", "observe"],
];

/// Continuations of "tell what".
pub const QUESTION_N: [&[&str]; 7] = [
    &["it", "is"],
    &["this", "is"],
    &["there", "is"],
    &["you", "see"],
    &["you", "can", "see"],
    &["you", "observe"],
    &["you", "can", "observe"],
];

/// Prefixes placed before the object name, A1 (bare name) first.
pub const STATEMENT_PREFIXES: [&[&str]; 8] = [
    &[],
    &["it", "is"],
    &["this", "is"],
    &["there", "is"],
    &["i", "see"],
    &["i", "observe"],
    &["i", "can", "see"],
    &["i", "can", "observe"],
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("class name `{0}` collides with a reserved token or grammar terminal")]
    ReservedName(String),
    #[error("class name `{0}` listed twice")]
    DuplicateClass(String),
    #[error("class name `{0}` must be a single non-empty word")]
    InvalidName(String),
    #[error("vocabulary line {line}: expected `{expected}`, found `{found}`")]
    VocabularyLayout {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
}

/// Token ↔ id table: reserved tokens, then terminals, then class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
    first_class: TokenId,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(class_names: &[S]) -> Result<Self, GrammarError> {
        let mut tokens: Vec<String> = [EOS, PAD].iter().map(|s| s.to_string()).collect();
        tokens.extend(TERMINALS.iter().map(|s| s.to_string()));
        let first_class = tokens.len();
        let mut index: BTreeMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for name in class_names {
            let name = name.as_ref();
            if name.is_empty() || name.split_whitespace().count() != 1 || name.contains(char::is_whitespace) {
                return Err(GrammarError::InvalidName(name.to_string()));
            }
            if index.contains_key(name) {
                return Err(if tokens[first_class..].iter().any(|t| t == name) {
                    GrammarError::DuplicateClass(name.to_string())
                } else {
                    GrammarError::ReservedName(name.to_string())
                });
            }
            index.insert(name.to_string(), tokens.len());
            tokens.push(name.to_string());
        }
        Ok(Vocabulary {
            tokens,
            index,
            first_class,
        })
    }

    /// Number of tokens `k`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn class_names(&self) -> &[String] {
        &self.tokens[self.first_class..]
    }

    pub fn is_class(&self, id: TokenId) -> bool {
        id >= self.first_class && id < self.tokens.len()
    }

    pub fn class_id(&self, name: &str) -> Result<TokenId, GrammarError> {
        self.id(name)
            .filter(|i| self.is_class(*i))
            .ok_or_else(|| GrammarError::UnknownClass(name.to_string()))
    }

    /// Whitespace tokenisation over the fixed token set.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, GrammarError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| GrammarError::UnknownToken(w.to_string())))
            .collect()
    }

    /// Space-joined tokens, stopping at the first end-of-sentence.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS_ID {
                break;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GrammarError> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let fixed = 2 + TERMINALS.len();
        let expected: Vec<&str> = [EOS, PAD].into_iter().chain(TERMINALS).collect();
        for (i, want) in expected.iter().enumerate() {
            let found = lines.get(i).copied().unwrap_or("");
            if found != *want {
                return Err(GrammarError::VocabularyLayout {
                    line: i + 1,
                    expected: want.to_string(),
                    found: found.to_string(),
                });
            }
        }
        Vocabulary::new(&lines[fixed.min(lines.len())..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceKind {
    Question,
    Silence,
    Statement,
}

impl SentenceKind {
    pub const ALL: [SentenceKind; 3] = [
        SentenceKind::Question,
        SentenceKind::Silence,
        SentenceKind::Statement,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceClass {
    Question,
    CorrectStatement,
    WrongStatement,
    Silence,
    Invalid,
}

/// Which productions the teacher speaks with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    /// Only the bare "what" question and bare-name statements.
    #[default]
    Word,
    /// The full grammar.
    Sentence,
}

/// The derivation a sentence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Derivation {
    Question,
    Silence,
    Statement { class: TokenId },
}

/// Teacher sentence generator and learner utterance judge.
#[derive(Clone, Debug)]
pub struct Grammar {
    vocab: Vocabulary,
}

impl Grammar {
    pub fn new(vocab: Vocabulary) -> Self {
        Grammar { vocab }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn ids(&self, words: &[&str]) -> Vec<TokenId> {
        words
            .iter()
            .map(|w| self.vocab.id(w).expect("grammar terminal missing from vocabulary"))
            .collect()
    }

    /// A random sentence of `kind` followed by EOS. Each production is chosen
    /// uniformly among the alternatives allowed at `level`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        kind: SentenceKind,
        class: Option<TokenId>,
        level: TaskLevel,
        rng: &mut R,
    ) -> Result<Vec<TokenId>, GrammarError> {
        let mut out = match kind {
            SentenceKind::Silence => Vec::new(),
            SentenceKind::Question => {
                let form = if level == TaskLevel::Word {
                    0
                } else {
                    rng.gen_range(0..3)
                };
                match form {
                    0 => self.ids(&["what"]),
                    1 => {
                        let mut v = self.ids(&["what"]);
                        v.extend(self.ids(QUESTION_M[rng.gen_range(0..QUESTION_M.len())]));
                        v
                    }
                    _ => {
                        let mut v = self.ids(&["tell", "what"]);
                        v.extend(self.ids(QUESTION_N[rng.gen_range(0..QUESTION_N.len())]));
                        v
                    }
                }
            }
            SentenceKind::Statement => {
                let class = match class {
                    Some(c) if self.vocab.is_class(c) => c,
                    Some(c) => return Err(GrammarError::UnknownClass(alloc::format!("#{c}"))),
                    None => return Err(GrammarError::UnknownClass(String::from("<none>"))),
                };
                let prefix = if level == TaskLevel::Word {
                    0
                } else {
                    rng.gen_range(0..STATEMENT_PREFIXES.len())
                };
                let mut v = self.ids(STATEMENT_PREFIXES[prefix]);
                v.push(class);
                v
            }
        };
        out.push(EOS_ID);
        Ok(out)
    }

    /// Classifies a learner utterance. A single trailing EOS is ignored; any
    /// other reserved token makes the utterance invalid.
    pub fn judge(&self, tokens: &[TokenId], target_class: TokenId) -> UtteranceClass {
        let body = match tokens.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => tokens,
        };
        if body.is_empty() {
            return UtteranceClass::Silence;
        }
        if body.iter().any(|&t| t >= self.vocab.len() || t == EOS_ID || t == PAD_ID) {
            return UtteranceClass::Invalid;
        }
        let words: Vec<&str> = body.iter().map(|&t| self.vocab.token(t)).collect();
        if is_question(&words) {
            return UtteranceClass::Question;
        }
        let (&last, prefix) = body.split_last().expect("non-empty");
        if self.vocab.is_class(last) && STATEMENT_PREFIXES.iter().any(|p| *p == &words[..prefix.len()]) {
            return if last == target_class {
                UtteranceClass::CorrectStatement
            } else {
                UtteranceClass::WrongStatement
            };
        }
        UtteranceClass::Invalid
    }

    /// Every sentence derivable with object names drawn from `classes`
    /// (without EOS), paired with its derivation. The silence sentence is
    /// the empty sequence.
    pub fn enumerate_language(&self, classes: &[TokenId]) -> Vec<(Vec<TokenId>, Derivation)> {
        let mut out = Vec::new();
        out.push((Vec::new(), Derivation::Silence));
        out.push((self.ids(&["what"]), Derivation::Question));
        for m in QUESTION_M {
            let mut v = self.ids(&["what"]);
            v.extend(self.ids(m));
            out.push((v, Derivation::Question));
        }
        for n in QUESTION_N {
            let mut v = self.ids(&["tell", "what"]);
            v.extend(self.ids(n));
            out.push((v, Derivation::Question));
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for &c in classes {
            if !seen.insert(c) {
                continue;
            }
            for p in STATEMENT_PREFIXES {
                let mut v = self.ids(p);
                v.push(c);
                out.push((v, Derivation::Statement { class: c }));
            }
        }
        out
    }
}

fn is_question(words: &[&str]) -> bool {
    match words {
        ["what"] => true,
        ["what", rest @ ..] => QUESTION_M.contains(&rest),
        ["tell", "what", rest @ ..] => QUESTION_N.contains(&rest),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grammar(classes: &[&str]) -> Grammar {
        Grammar::new(Vocabulary::new(classes).unwrap())
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(&["monkey", "frog"]).unwrap();
        assert_eq!(v.len(), 2 + TERMINALS.len() + 2);
        assert_eq!(v.id(EOS), Some(EOS_ID));
        assert_eq!(v.id(PAD), Some(PAD_ID));
        assert!(v.is_class(v.id("frog").unwrap()));
        assert!(!v.is_class(v.id("what").unwrap()));
        assert_eq!(v.class_names(), &["monkey".to_string(), "frog".to_string()]);
    }

    #[test]
    fn vocabulary_rejects_collisions() {
        assert_eq!(
            Vocabulary::new(&["what"]),
            Err(GrammarError::ReservedName("what".into()))
        );
        assert_eq!(
            Vocabulary::new(&["cat", "cat"]),
            Err(GrammarError::DuplicateClass("cat".into()))
        );
        assert!(matches!(Vocabulary::new(&["sea horse"]), Err(GrammarError::InvalidName(_))));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::new(&["apple", "fig"]).unwrap();
        let text = v.to_text();
        assert_eq!(text.lines().nth(1), Some(PAD));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        let broken = text.replacen("what", "wat", 1);
        assert!(matches!(
            Vocabulary::from_text(&broken),
            Err(GrammarError::VocabularyLayout { line: 3, .. })
        ));
    }

    #[test]
    fn silence_is_just_eos() {
        let g = grammar(&["monkey"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = g
            .generate(SentenceKind::Silence, None, TaskLevel::Sentence, &mut rng)
            .unwrap();
        assert_eq!(s, vec![EOS_ID]);
    }

    #[test]
    fn generated_forms_include_paper_examples() {
        let g = grammar(&["monkey"]);
        let monkey = g.vocab().id("monkey").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut questions = BTreeSet::new();
        let mut statements = BTreeSet::new();
        for _ in 0..2000 {
            let q = g.generate(SentenceKind::Question, None, TaskLevel::Sentence, &mut rng).unwrap();
            questions.insert(g.vocab().decode(&q));
            let s = g
                .generate(SentenceKind::Statement, Some(monkey), TaskLevel::Sentence, &mut rng)
                .unwrap();
            statements.insert(g.vocab().decode(&s));
        }
        assert!(questions.contains("what is it"));
        assert!(statements.contains("this is monkey"));
        assert_eq!(questions.len(), 15);
        assert_eq!(statements.len(), 8);
    }

    #[test]
    fn word_level_uses_bare_forms_only() {
        let g = grammar(&["monkey"]);
        let monkey = g.vocab().id("monkey").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = g.generate(SentenceKind::Question, None, TaskLevel::Word, &mut rng).unwrap();
            assert_eq!(g.vocab().decode(&q), "what");
            let s = g.generate(SentenceKind::Statement, Some(monkey), TaskLevel::Word, &mut rng).unwrap();
            assert_eq!(s, vec![monkey, EOS_ID]);
        }
    }

    #[test]
    fn statement_requires_known_class() {
        let g = grammar(&["monkey"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let what = g.vocab().id("what").unwrap();
        assert!(g
            .generate(SentenceKind::Statement, Some(what), TaskLevel::Word, &mut rng)
            .is_err());
        assert!(g
            .generate(SentenceKind::Statement, None, TaskLevel::Word, &mut rng)
            .is_err());
    }

    #[test]
    fn judge_examples() {
        let g = grammar(&["cucumber", "apple"]);
        let v = g.vocab();
        let cucumber = v.id("cucumber").unwrap();
        let j = |s: &str| g.judge(&v.encode(s).unwrap(), cucumber);
        assert_eq!(j("what do you see"), UtteranceClass::Question);
        assert_eq!(j(""), UtteranceClass::Silence);
        assert_eq!(j("there is cucumber"), UtteranceClass::CorrectStatement);
        assert_eq!(j("there is apple"), UtteranceClass::WrongStatement);
        assert_eq!(j("is there cucumber"), UtteranceClass::Invalid);
        assert_eq!(j("what what"), UtteranceClass::Invalid);
        assert_eq!(j("cucumber cucumber"), UtteranceClass::Invalid);
        let mut with_eos = v.encode("it is cucumber").unwrap();
        with_eos.push(EOS_ID);
        assert_eq!(g.judge(&with_eos, cucumber), UtteranceClass::CorrectStatement);
        assert_eq!(g.judge(&[EOS_ID], cucumber), UtteranceClass::Silence);
        assert_eq!(g.judge(&[PAD_ID], cucumber), UtteranceClass::Invalid);
        assert_eq!(g.judge(&[EOS_ID, EOS_ID], cucumber), UtteranceClass::Invalid);
    }

    #[test]
    fn language_sizes() {
        let g = grammar(&["a", "b", "c"]);
        let a = g.vocab().id("a").unwrap();
        let one = g.enumerate_language(&[a]);
        let q = one.iter().filter(|(_, d)| *d == Derivation::Question).count();
        let s = one
            .iter()
            .filter(|(_, d)| matches!(d, Derivation::Statement { .. }))
            .count();
        assert_eq!((q, s), (15, 8));
        let none = g.enumerate_language(&[]);
        assert_eq!(none.len(), 16);
        assert!(none
            .iter()
            .all(|(_, d)| matches!(d, Derivation::Question | Derivation::Silence)));
        let ids: Vec<TokenId> = ["a", "b", "c"].iter().map(|c| g.vocab().id(c).unwrap()).collect();
        let all = g.enumerate_language(&ids);
        let distinct: BTreeSet<_> = all.iter().map(|(s, _)| s.clone()).collect();
        assert_eq!(distinct.len(), all.len());
        assert!(all.iter().all(|(s, _)| s.len() <= 5));
    }

    #[test]
    fn generated_sentences_are_in_the_language() {
        let g = grammar(&["a", "b"]);
        let ids: Vec<TokenId> = ["a", "b"].iter().map(|c| g.vocab().id(c).unwrap()).collect();
        let lang: BTreeSet<Vec<TokenId>> = g.enumerate_language(&ids).into_iter().map(|(s, _)| s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..500 {
            let kind = SentenceKind::ALL[i % 3];
            let level = if i % 2 == 0 { TaskLevel::Word } else { TaskLevel::Sentence };
            let mut s = g.generate(kind, Some(ids[i % 2]), level, &mut rng).unwrap();
            assert_eq!(s.pop(), Some(EOS_ID));
            assert!(lang.contains(&s));
        }
    }
}
