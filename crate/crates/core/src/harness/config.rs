use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auth::ScoreMode;
use crate::decode::{Lexicon, DEFAULT_BEAM_WIDTH};
use crate::dsp::FeatureConfig;
use crate::error::{config, Error, Result};
use crate::losses::LossWeights;
use crate::nn::ModelConfig;
use crate::synth::DatasetSpec;

/// Where the vocabulary comes from. At most one of the fields may be set;
/// with none set the full built-in list is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LexiconConfig {
    pub words: Option<Vec<String>>,
    pub file: Option<PathBuf>,
    /// First `size` built-in words.
    pub size: Option<usize>,
}

impl LexiconConfig {
    pub fn load(&self) -> Result<Lexicon> {
        match (&self.words, &self.file, self.size) {
            (None, None, None) => Ok(Lexicon::builtin()),
            (Some(w), None, None) => Lexicon::new(w.clone(), "inline"),
            (None, Some(f), None) => Lexicon::from_file(f),
            (None, None, Some(n)) => Lexicon::builtin_prefix(n),
            _ => config("lexicon: set at most one of words, file, size"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// WAV tree with `manifest.jsonl`.
    pub root: Option<PathBuf>,
    /// Directory of `.ekft` feature files mirroring the WAV tree.
    pub features: Option<PathBuf>,
    pub n_users: usize,
    pub rounds: usize,
    pub sessions: usize,
    /// Omit for noiseless synthesis.
    pub snr_db: Option<f64>,
    pub probe_seed: u64,
    pub lexicon: LexiconConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            features: None,
            n_users: 11,
            rounds: 4,
            sessions: 2,
            snr_db: Some(20.0),
            probe_seed: 7,
            lexicon: LexiconConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            tau: 0.7,
            margin: w.margin,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Genuine utterances per batch; each is paired with one attacker.
    pub batch_n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// L2 penalty coefficient added to every parameter gradient.
    pub weight_decay: f64,
    /// Std of Gaussian jitter added to standardized inputs during training.
    pub input_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_n: 50,
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: 5.0,
            weight_decay: 0.0,
            input_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub score_mode: ScoreMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            score_mode: ScoreMode::LivePair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_users < 2 {
            return config("data.n_users must be at least 2");
        }
        if d.rounds == 0 || d.sessions == 0 {
            return config("data.rounds and data.sessions must be positive");
        }
        if d.snr_db.is_some_and(|s| !s.is_finite()) {
            return config("data.snr_db must be finite (omit it for noiseless data)");
        }
        d.lexicon.load()?;
        self.model.validate()?;
        if self.model.classes != crate::decode::NUM_CLASSES {
            return config(format!(
                "model.classes must be {}",
                crate::decode::NUM_CLASSES
            ));
        }
        let feats = FeatureConfig::default();
        if self.model.ultra_dim != feats.ar_order || self.model.whisper_dim != feats.mel_width() {
            return config(format!(
                "model input widths must match the front end ({} AR, {} mel)",
                feats.ar_order,
                feats.mel_width()
            ));
        }
        let l = &self.loss;
        if !(l.tau > 0.0 && l.tau.is_finite()) {
            return config("loss.tau must be positive");
        }
        l.weights().validate()?;
        let t = &self.train;
        if t.batch_n == 0 {
            return config("train.batch_n must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return config("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return config("train.momentum must lie in [0, 1)");
        }
        for (name, v) in [
            ("clip_norm", t.clip_norm),
            ("weight_decay", t.weight_decay),
            ("input_noise", t.input_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!("train.{name} must be finite and non-negative"));
            }
        }
        if self.eval.beam_width == 0 {
            return config("eval.beam_width must be positive");
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            n_users: self.data.n_users,
            lexicon: self.data.lexicon.load()?.words,
            rounds: self.data.rounds,
            sessions: self.data.sessions,
            snr_db: self.data.snr_db,
            seed: self.seed,
        })
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            probe_seed: self.data.probe_seed,
            ..FeatureConfig::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.fingerprint().len(), 64);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("[train]\nlr = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nn_users = 1").is_err());
        assert!(ExperimentConfig::from_toml("[data.lexicon]\nsize = 3\nwords = [\"a\"]").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nchannels = 0").is_err());
        let ok = ExperimentConfig::from_toml("seed = 9\n[data.lexicon]\nsize = 10").unwrap();
        assert_eq!(ok.seed, 9);
        assert_eq!(ok.data.lexicon.load().unwrap().len(), 10);
    }
}
