use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use earkey::harness::{
    evaluate, evaluate_user, lexicon_decoder, split_leave_one_session, train_user, Corpus,
    ExperimentConfig, TrainOutcome, UserSplit,
};
use earkey::nn::Checkpoint;
use earkey::synth::ManifestEntry;
use earkey::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        ..Default::default()
    };
    cfg.data.n_users = 3;
    cfg.data.rounds = 2;
    cfg.data.sessions = 2;
    cfg.data.lexicon.size = Some(3);
    cfg.model.channels = 8;
    cfg.model.hidden = 8;
    cfg.model.embed = 8;
    cfg.model.dilations = vec![1, 2];
    cfg.model.gru_layers = 1;
    cfg.train.epochs = 6;
    cfg.train.batch_n = 3;
    cfg.train.lr = 0.01;
    cfg
}

struct Fixture {
    cfg: ExperimentConfig,
    corpus: Corpus,
    splits: Vec<UserSplit>,
    outcomes: BTreeMap<String, TrainOutcome>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let corpus = Corpus::synthesize(&cfg).unwrap();
        let splits = split_leave_one_session(&corpus.entries, cfg.seed).unwrap();
        let outcomes = splits
            .iter()
            .map(|s| {
                (
                    s.user.clone(),
                    train_user(&cfg, &corpus, &splits, &s.user).unwrap(),
                )
            })
            .collect();
        Fixture {
            cfg,
            corpus,
            splits,
            outcomes,
        }
    })
}

fn checkpoints(f: &Fixture) -> BTreeMap<String, Checkpoint> {
    f.outcomes
        .iter()
        .map(|(u, o)| (u.clone(), o.checkpoint.clone()))
        .collect()
}

fn beam(
    f: &Fixture,
) -> impl Fn(&ManifestEntry, &earkey::nn::Inference) -> earkey::Result<Vec<String>> {
    lexicon_decoder(f.cfg.data.lexicon.load().unwrap(), f.cfg.eval.beam_width)
}

#[test]
fn loss_decreases_over_training() {
    for (user, o) in &fixture().outcomes {
        let means = o.epoch_means();
        assert_eq!(means.len(), 6);
        assert!(means[5] < means[0], "{user}: {means:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let user = &f.splits[1].user;
    let again = train_user(&f.cfg, &f.corpus, &f.splits, user).unwrap();
    let first = &f.outcomes[user];
    assert_eq!(
        again.checkpoint.to_bytes().unwrap(),
        first.checkpoint.to_bytes().unwrap()
    );
    assert_eq!(again.losses, first.losses);
}

#[test]
fn batches_put_genuine_first_and_word_matched_attackers_second() {
    let f = fixture();
    let entry = |id: &str| &f.corpus.entries[f.corpus.index_of(id).unwrap()];
    for split in &f.splits {
        let o = &f.outcomes[&split.user];
        assert_eq!(o.skipped_batches, 0);
        assert!(!o.batches.is_empty());
        let train: BTreeSet<&str> = split
            .train
            .iter()
            .map(|&i| f.corpus.entries[i].utterance_id.as_str())
            .collect();
        for b in &o.batches {
            assert_eq!(b.genuine.len(), b.attackers.len());
            assert!(b.genuine.len() <= f.cfg.train.batch_n);
            for (g, a) in b.genuine.iter().zip(&b.attackers) {
                assert!(train.contains(g.as_str()));
                let (g, a) = (entry(g), entry(a));
                assert_ne!(a.user, split.user);
                assert_eq!(a.word, g.word);
            }
        }
    }
}

#[test]
fn nothing_from_a_test_session_is_consumed() {
    let f = fixture();
    let test_ids: BTreeSet<String> = f
        .splits
        .iter()
        .flat_map(|s| {
            s.test
                .iter()
                .map(|&i| f.corpus.entries[i].utterance_id.clone())
        })
        .collect();
    for o in f.outcomes.values() {
        assert!(!o.consumed.is_empty());
        assert!(o.consumed.is_disjoint(&test_ids));
        for b in &o.batches {
            assert!(b
                .attackers
                .iter()
                .chain(&b.genuine)
                .all(|id| !test_ids.contains(id)));
        }
    }
}

#[test]
fn missing_attacker_words_skip_batches() {
    let f = fixture();
    let target = &f.splits[0].user;
    let dropped = &f.corpus.entries[f.splits[0].train[0]].word;
    // remove the word from every other user's training side
    let splits: Vec<UserSplit> = f
        .splits
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if &s.user != target {
                s.train.retain(|&i| &f.corpus.entries[i].word != dropped);
            }
            s
        })
        .collect();
    let o = train_user(&f.cfg, &f.corpus, &splits, target).unwrap();
    assert!(o.skipped_batches > 0);
    for b in &o.batches {
        assert!(b
            .genuine
            .iter()
            .all(|id| !id.contains(&format!("/{dropped}/"))));
    }
}

#[test]
fn oracle_decoder_scores_perfect_top1() {
    let f = fixture();
    let oracle = |e: &ManifestEntry, _: &earkey::nn::Inference| Ok(vec![e.word.clone()]);
    let report = evaluate(&f.cfg, &f.corpus, &f.splits, &checkpoints(f), &oracle).unwrap();
    assert_eq!(report.mean_top1, 1.0);
    assert!(report.users.iter().all(|u| u.top1 == 1.0 && u.top3 == 1.0));
}

#[test]
fn report_is_consistent_and_reproducible() {
    let f = fixture();
    let dec = beam(f);
    let report = evaluate(&f.cfg, &f.corpus, &f.splits, &checkpoints(f), &dec).unwrap();
    let again = evaluate(&f.cfg, &f.corpus, &f.splits, &checkpoints(f), &dec).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
    assert_eq!(report.config_fingerprint, f.cfg.fingerprint());
    for u in &report.users {
        assert!(u.top1 <= u.top2 && u.top2 <= u.top3, "{u:?}");
        let split = f.splits.iter().find(|s| s.user == u.user).unwrap();
        let others: usize = f
            .splits
            .iter()
            .filter(|s| s.user != u.user)
            .map(|s| s.test.len())
            .sum();
        assert_eq!(u.genuine_trials, split.test.len());
        assert_eq!(u.attack_trials, others);
        assert!((0.0..=1.0).contains(&u.eer));
    }
    let csv = report.users_csv();
    assert_eq!(csv.lines().count(), 1 + report.users.len());
    let tests: usize = f.splits.iter().map(|s| s.test.len()).sum();
    assert_eq!(tests, f.corpus.len() / 2);
    assert_eq!(report.genuine_trials, tests);
    assert_eq!(report.attack_trials, (f.splits.len() - 1) * tests);
}

#[test]
fn evaluation_needs_a_test_split_and_a_threshold() {
    let f = fixture();
    let dec = beam(f);
    let user = &f.splits[0].user;
    let ck = &f.outcomes[user].checkpoint;
    let mut splits = f.splits.clone();
    splits[0].test.clear();
    let err = evaluate_user(ck, &f.corpus, &splits, user, f.cfg.eval.score_mode, &dec).unwrap_err();
    assert!(matches!(err, Error::Data(_)));

    let bare = Checkpoint::new(ck.model.clone());
    assert!(evaluate_user(
        &bare,
        &f.corpus,
        &f.splits,
        user,
        f.cfg.eval.score_mode,
        &dec
    )
    .is_err());
    assert!(evaluate_user(
        ck,
        &f.corpus,
        &f.splits,
        "nobody",
        f.cfg.eval.score_mode,
        &dec
    )
    .is_err());
}

#[test]
fn feature_directory_round_trips_the_corpus() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    f.corpus.save_features(dir.path()).unwrap();
    let back = Corpus::from_feature_dir(dir.path(), &f.cfg).unwrap();
    assert_eq!(back.entries, f.corpus.entries);
    assert_eq!(back.features.len(), f.corpus.features.len());
    // stored as f32
    for (a, b) in back
        .features
        .iter()
        .flatten()
        .zip(f.corpus.features.iter().flatten())
    {
        for (x, y) in a.ar_coeffs.iter().zip(&b.ar_coeffs) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }
}
