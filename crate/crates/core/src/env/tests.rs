use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grammar::Vocabulary;

fn game(ds: ConceptDataset, config: EnvConfig) -> Game {
    let vocab = Vocabulary::new(&ds.classes).unwrap();
    Game::new(ds, Grammar::new(vocab), config).unwrap()
}

fn desk() -> Game {
    game(ConceptDataset::desk_train(), EnvConfig::default())
}

fn words(g: &Game, text: &str) -> Vec<TokenId> {
    g.grammar().vocab().encode(text).unwrap()
}

/// Learner utterance of the requested judge class for the current object.
fn utterance(g: &Game, state: &SessionState, class: UtteranceClass) -> Vec<TokenId> {
    let [a, b] = state.classes();
    let other = if state.object() == a { b } else { a };
    match class {
        UtteranceClass::Question => words(g, "what is it"),
        UtteranceClass::Silence => vec![],
        UtteranceClass::CorrectStatement => vec![g.class_token(state.object())],
        UtteranceClass::WrongStatement => vec![g.class_token(other)],
        UtteranceClass::Invalid => words(g, "is what"),
    }
}

/// Behaves correctly given privileged knowledge of the session.
fn oracle_policy(g: &Game, state: &SessionState) -> Vec<TokenId> {
    let knows = state.context() == SentenceKind::Statement || state.is_taught(state.object());
    if knows {
        vec![g.class_token(state.object())]
    } else {
        words(g, "what")
    }
}

#[test]
fn reset_is_deterministic() {
    let g = desk();
    let (s1, o1) = g.reset(42);
    let (s2, o2) = g.reset(42);
    assert_eq!(o1, o2);
    assert_eq!(s1.classes(), s2.classes());
    assert_eq!(s1.context(), s2.context());
}

#[test]
fn reset_samples_distinct_classes_and_all_acts() {
    let g = desk();
    let mut counts = [0usize; 3];
    for seed in 0..3000 {
        let (s, obs) = g.reset(seed);
        let [a, b] = s.classes();
        assert_ne!(a, b);
        assert!(s.classes().contains(&s.object()));
        assert_eq!(s.step_index(), 0);
        let k = SentenceKind::ALL.iter().position(|k| *k == s.context()).unwrap();
        counts[k] += 1;
        assert_eq!(obs.sentence.is_empty(), s.context() == SentenceKind::Silence);
    }
    for c in counts {
        assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.04, "{counts:?}");
    }
}

#[test]
fn too_few_classes_is_an_error() {
    let ds = ConceptDataset::new("one", Split::Train, &["cat"], vec![2], ImageSpec::default()).unwrap();
    let vocab = Vocabulary::new(&ds.classes).unwrap();
    assert_eq!(
        Game::new(ds, Grammar::new(vocab), EnvConfig::default()).unwrap_err(),
        EnvError::TooFewClasses(1)
    );
}

#[test]
fn reward_table_is_exhaustive() {
    // (teacher asked or silent?, learner class) -> reward, written out by hand.
    let table = [
        (true, UtteranceClass::Question, 0.1),
        (true, UtteranceClass::Silence, -1.0),
        (true, UtteranceClass::CorrectStatement, 1.0),
        (true, UtteranceClass::WrongStatement, -1.0),
        (true, UtteranceClass::Invalid, -1.0),
        (false, UtteranceClass::Question, -1.0),
        (false, UtteranceClass::Silence, -1.0),
        (false, UtteranceClass::CorrectStatement, 0.0),
        (false, UtteranceClass::WrongStatement, -1.0),
        (false, UtteranceClass::Invalid, -1.0),
    ];
    let g = desk();
    for (asked, class, reward) in table {
        let acts: &[SentenceKind] = if asked {
            &[SentenceKind::Question, SentenceKind::Silence]
        } else {
            &[SentenceKind::Statement]
        };
        for &act in acts {
            let (mut s, _) = g.reset_with(7, [2, 5], 5, act).unwrap();
            let u = utterance(&g, &s, class);
            let tr = g.step(&mut s, &u).unwrap();
            assert_eq!(tr.utterance, class);
            assert_eq!(tr.reward, reward, "{act:?} {class:?}");
            assert_eq!(tr.done, asked && class == UtteranceClass::CorrectStatement);
        }
    }
}

#[test]
fn asking_gets_the_name() {
    let g = desk();
    let (mut s, obs) = g.reset_with(1, [0, 1], 1, SentenceKind::Question).unwrap();
    assert_eq!(g.grammar().vocab().decode(&obs.sentence), "what");
    let tr = g.step(&mut s, &words(&g, "what is it")).unwrap();
    assert_eq!(tr.reward, QUESTION_REWARD);
    assert!(tr.observation.sentence.contains(&g.class_token(1)));
    assert!(s.is_taught(1));
    assert_eq!(s.context(), SentenceKind::Statement);
}

#[test]
fn silence_still_gets_the_name() {
    let g = desk();
    let (mut s, _) = g.reset_with(1, [0, 1], 0, SentenceKind::Question).unwrap();
    let tr = g.step(&mut s, &[]).unwrap();
    assert_eq!(tr.reward, INCORRECT_REWARD);
    assert!(tr.observation.sentence.contains(&g.class_token(0)));
    assert!(!tr.done);
}

#[test]
fn correct_statement_when_silent_about_taught_object_succeeds() {
    let g = desk();
    let mut found = false;
    for seed in 0..500 {
        let (mut s, _) = g.reset(seed);
        loop {
            let ctx = s.context();
            let taught = s.is_taught(s.object());
            let u = oracle_policy(&g, &s);
            let tr = g.step(&mut s, &u).unwrap();
            if ctx == SentenceKind::Silence && taught {
                assert_eq!(tr.reward, CORRECT_REWARD);
                assert!(tr.done && tr.success);
                found = true;
            }
            if tr.done {
                assert!(tr.success);
                break;
            }
        }
    }
    assert!(found);
}

#[test]
fn all_silent_learner_scores_minus_six() {
    let g = desk();
    for seed in 0..100 {
        let (mut s, _) = g.reset(seed);
        let mut steps = 0;
        loop {
            let tr = g.step(&mut s, &[]).unwrap();
            steps += 1;
            if tr.done {
                assert!(!tr.success);
                break;
            }
        }
        assert_eq!(steps, 6);
        assert_eq!(s.total_reward(), -6.0);
        assert!(!g.session_success(&s).unwrap());
    }
}

#[test]
fn question_about_taught_object_breaks_success_by_default() {
    for breaks in [true, false] {
        let config = EnvConfig {
            question_on_taught_breaks_success: breaks,
            ..EnvConfig::default()
        };
        let g = game(ConceptDataset::desk_train(), config);
        let mut checked = 0;
        for seed in 0..300 {
            let (mut s, _) = g.reset(seed);
            let mut asked_taught = false;
            loop {
                let u = if s.context() != SentenceKind::Statement && s.is_taught(s.object()) && !asked_taught {
                    asked_taught = true;
                    words(&g, "what")
                } else {
                    oracle_policy(&g, &s)
                };
                let tr = g.step(&mut s, &u).unwrap();
                if tr.done {
                    if asked_taught {
                        assert_eq!(tr.success, !breaks);
                        checked += 1;
                    }
                    break;
                }
            }
        }
        assert!(checked > 10);
    }
}

#[test]
fn figure_style_trace_is_success() {
    let trace = [
        TurnRecord {
            context: SentenceKind::Question,
            taught: false,
            utterance: UtteranceClass::Question,
            reward: 0.1,
            class: 0,
            instance: 0,
        },
        TurnRecord {
            context: SentenceKind::Statement,
            taught: true,
            utterance: UtteranceClass::CorrectStatement,
            reward: 0.0,
            class: 0,
            instance: 0,
        },
        TurnRecord {
            context: SentenceKind::Silence,
            taught: true,
            utterance: UtteranceClass::CorrectStatement,
            reward: 1.0,
            class: 0,
            instance: 3,
        },
    ];
    assert!(session_success(&trace, true));
    assert!(!session_success(&[], true));
    let mut wrong = trace;
    wrong[0].utterance = UtteranceClass::CorrectStatement;
    assert!(!session_success(&wrong, true));
}

#[test]
fn step_after_done_is_an_error() {
    let g = desk();
    let (mut s, _) = g.reset_with(3, [0, 1], 0, SentenceKind::Question).unwrap();
    s.taught.push(0);
    let tr = g.step(&mut s, &[g.class_token(0)]).unwrap();
    assert!(tr.done);
    assert_eq!(g.step(&mut s, &[]), Err(EnvError::SessionFinished));
}

#[test]
fn wrong_answer_moves_on() {
    let g = desk();
    let mut switched = 0;
    for seed in 0..200 {
        let (mut s, _) = g.reset_with(seed, [0, 1], 0, SentenceKind::Question).unwrap();
        g.step(&mut s, &[g.class_token(1)]).unwrap();
        assert_eq!(s.is_taught(0), s.context() == SentenceKind::Statement && s.object() == 0);
        if s.object() == 1 {
            switched += 1;
        }
    }
    assert!((60..140).contains(&switched), "{switched}");
}

#[test]
fn preset_sizes() {
    let a = ConceptDataset::animal();
    assert_eq!((a.num_classes(), a.num_images()), (40, 408));
    let f = ConceptDataset::fruit();
    assert_eq!((f.num_classes(), f.num_images()), (16, 48));
    assert!(class_overlap(&a, &f).is_empty());
    assert!(class_overlap(&ConceptDataset::desk_train(), &ConceptDataset::desk_test()).is_empty());
    assert_eq!(class_overlap(&a, &ConceptDataset::desk_train()).len(), 8);
}

#[test]
fn images_are_deterministic_and_clipped() {
    let ds = ConceptDataset::desk_train();
    for c in 0..3 {
        for i in 0..3 {
            let img = ds.synth_image(c, i);
            assert_eq!(img, ds.synth_image(c, i));
            assert_eq!(img.data().len(), 16 * 16 * 3);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert_ne!(ds.synth_image(0, 1), ds.synth_image(0, 2));
    let chw = ds.synth_image(1, 0).to_chw();
    assert_eq!(chw[16 * 16 + 5], ds.synth_image(1, 0).pixel(0, 5, 1));
}

#[test]
fn classes_are_farther_apart_than_instances() {
    let ds = ConceptDataset::animal();
    let imgs: Vec<Vec<Image>> = (0..10).map(|c| (0..5).map(|i| ds.synth_image(c, i)).collect()).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0, 0.0, 0);
    for c1 in 0..10 {
        for i1 in 0..5 {
            for c2 in 0..10 {
                for i2 in 0..5 {
                    if (c1, i1) >= (c2, i2) {
                        continue;
                    }
                    let d = imgs[c1][i1].l2_distance(&imgs[c2][i2]);
                    if c1 == c2 {
                        intra += d;
                        n_intra += 1;
                    } else {
                        inter += d;
                        n_inter += 1;
                    }
                }
            }
        }
    }
    let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
    assert!(inter > 2.0 * intra, "inter {inter} intra {intra}");
}

#[test]
fn sample_instance_frequencies() {
    let ds = ConceptDataset::desk_train();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let canon = |ratio: f64, rng: &mut ChaCha8Rng| {
        (0..10_000).filter(|_| ds.sample_instance(0, ratio, rng) == 0).count() as f64 / 10_000.0
    };
    assert_eq!(canon(0.0, &mut rng), 1.0);
    assert_eq!(canon(1.0, &mut rng), 0.0);
    assert!((canon(0.5, &mut rng) - 0.5).abs() <= 0.02);
}

#[test]
fn config_validation() {
    let bad = EnvConfig {
        variation_ratio: 1.5,
        ..EnvConfig::default()
    };
    assert_eq!(bad.validate(), Err(EnvError::InvalidRatio(1.5)));
    let zero = EnvConfig {
        max_steps: 0,
        ..EnvConfig::default()
    };
    assert_eq!(zero.validate(), Err(EnvError::ZeroSteps));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sessions_are_bounded(seed in any::<u64>(), policy_seed in any::<u64>(), ratio in 0.0f64..=1.0) {
        let g = desk().with_variation_ratio(ratio).unwrap();
        let (mut s, _) = g.reset(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
        let vocab_len = g.grammar().vocab().len();
        let mut last = None;
        while !s.is_done() {
            prop_assert!(s.step_index() < 6);
            prop_assert!(s.taught().iter().all(|c| s.classes().contains(c)));
            let u: Vec<TokenId> = if rng.gen_bool(0.5) {
                oracle_policy(&g, &s)
            } else {
                (0..rng.gen_range(0..4)).map(|_| rng.gen_range(2..vocab_len)).collect()
            };
            let tr = g.step(&mut s, &u).unwrap();
            prop_assert!([1.0, 0.1, 0.0, -1.0].contains(&tr.reward));
            last = Some(tr);
        }
        let tr = last.unwrap();
        prop_assert!(s.trace().len() <= 6);
        if tr.success {
            prop_assert!(tr.reward == CORRECT_REWARD || tr.reward == STATEMENT_REWARD || tr.reward == QUESTION_REWARD);
        }
    }
}
