//! Experiment orchestration: corpus loading, the leave-one-session split,
//! training and evaluation.

mod config;
mod eval;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{FeaturePair, FrontEnd};
use crate::error::{Error, Result};
use crate::io::{read_features, read_wav, write_features};
use crate::synth::{derive_seed, read_manifest, synth_corpus, write_manifest, ManifestEntry};

pub use config::{
    DataConfig, EvalConfig, ExperimentConfig, LexiconConfig, LossConfig, TrainConfig,
};
pub use eval::{
    calibrate_user, evaluate, evaluate_user, lexicon_decoder, score_utterance, Calibration,
    Decoder, EvalReport, ScoreNorm, UserReport,
};
pub use train::{
    batch_objective, train_user, BatchLosses, BatchRecord, LossRow, TrainBatch, TrainOutcome,
};

/// Manifest entries with their extracted window features.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub features: Vec<Vec<FeaturePair>>,
}

fn feature_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join(format!("{}.ekft", entry.utterance_id))
}

impl Corpus {
    /// Synthesizes the configured dataset in memory and extracts features.
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        let fe = FrontEnd::new(cfg.feature_config())?;
        let mut features = Vec::new();
        let entries = synth_corpus(&cfg.dataset_spec()?, &fe.probe, |_, utt| {
            features.push(fe.process(&utt.rx_audio)?.1);
            Ok(())
        })?;
        Ok(Self { entries, features })
    }

    /// Reads `manifest.jsonl` under `root` and extracts features from each WAV.
    pub fn from_wav_tree(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let fe = FrontEnd::new(cfg.feature_config())?;
        let entries = read_manifest(&root.join("manifest.jsonl"))?;
        let features = entries
            .iter()
            .map(|e| Ok(fe.process(&read_wav(&root.join(&e.path))?)?.1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, features })
    }

    /// Reads a feature directory written by [`Corpus::save_features`].
    pub fn from_feature_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let fc = cfg.feature_config();
        let entries = read_manifest(&dir.join("manifest.jsonl"))?;
        let features = entries
            .iter()
            .map(|e| read_features(&feature_path(dir, e), fc.ar_order, fc.mel_width()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, features })
    }

    pub fn save_features(&self, dir: &Path) -> Result<()> {
        for (e, f) in self.entries.iter().zip(&self.features) {
            write_features(&feature_path(dir, e), f)?;
        }
        write_manifest(&dir.join("manifest.jsonl"), &self.entries)
    }

    /// Features directory if configured and present, else the WAV tree,
    /// else in-memory synthesis.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        if let Some(dir) = &cfg.data.features {
            if dir.join("manifest.jsonl").is_file() {
                return Self::from_feature_dir(dir, cfg);
            }
        }
        match &cfg.data.root {
            Some(root) => Self::from_wav_tree(root, cfg),
            None => Self::synthesize(cfg),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted distinct user ids.
    pub fn users(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.user.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn index_of(&self, utterance_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.utterance_id == utterance_id)
    }
}

/// One user's held-out session and the corpus indices on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user: String,
    pub test_session: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out one randomly chosen session per user.
pub fn split_leave_one_session(entries: &[ManifestEntry], seed: u64) -> Result<Vec<UserSplit>> {
    if entries.is_empty() {
        return Err(Error::Data("cannot split an empty manifest".into()));
    }
    let mut sessions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in entries {
        sessions.entry(&e.user).or_default().insert(&e.session);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5e55]));
    let mut out = Vec::with_capacity(sessions.len());
    for (user, ss) in sessions {
        if ss.len() < 2 {
            return Err(Error::Data(format!(
                "user {user} has a single session; leave-one-session-out needs two"
            )));
        }
        let ss: Vec<&str> = ss.into_iter().collect();
        let test_session = ss.choose(&mut rng).expect("non-empty").to_string();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, e) in entries.iter().enumerate().filter(|(_, e)| e.user == user) {
            if e.session == test_session {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        out.push(UserSplit {
            user: user.to_string(),
            test_session,
            train,
            test,
        });
    }
    Ok(out)
}
