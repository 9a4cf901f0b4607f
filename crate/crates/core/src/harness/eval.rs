use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, ExperimentConfig, UserSplit};
use crate::auth::{
    auth_metrics, calibrate_threshold, decide, enroll, score, ReferenceSet, ScoreMode, Threshold,
};
use crate::decode::{beam_decode, lexicon_topn, Lexicon};
use crate::dsp::FeaturePair;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Inference, Model};
use crate::synth::ManifestEntry;

/// Ranked lexicon words for one genuine utterance.
pub type Decoder<'a> = dyn Fn(&ManifestEntry, &Inference) -> Result<Vec<String>> + 'a;

/// Beam search followed by lexicon top-3 rescoring.
pub fn lexicon_decoder(
    lexicon: Lexicon,
    width: usize,
) -> impl Fn(&ManifestEntry, &Inference) -> Result<Vec<String>> {
    move |_, inf| {
        let hyps = beam_decode(&inf.log_probs, width, width)?;
        lexicon_topn(&hyps, &lexicon, 3.min(lexicon.len()))
    }
}

/// Verification score of one utterance plus the forward-pass outputs.
pub fn score_utterance(
    model: &Model,
    feats: &[FeaturePair],
    mode: ScoreMode,
    refs: Option<&ReferenceSet>,
    spell: bool,
) -> Result<(f64, Inference)> {
    let inf = model.infer(feats, spell)?;
    let s = score(&inf.a_w, &inf.a_u, refs, mode)?;
    Ok((s, inf))
}

fn enroll_split(model: &Model, corpus: &Corpus, ix: &[usize], user: &str) -> Result<ReferenceSet> {
    let utts: Vec<Vec<FeaturePair>> = ix.iter().map(|&i| corpus.features[i].clone()).collect();
    enroll(model, &utts, user, 0)
}

/// Standardization of one target model's raw scores by its training-split
/// impostor statistics, so scores of different per-user models share a scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNorm {
    pub mean: f64,
    pub std: f64,
}

impl ScoreNorm {
    pub const IDENTITY: Self = Self {
        mean: 0.0,
        std: 1.0,
    };

    pub fn fit(impostor: &[f64]) -> Result<Self> {
        if impostor.is_empty() {
            return Err(Error::Data(
                "score normalization needs impostor scores".into(),
            ));
        }
        let n = impostor.len() as f64;
        let mean = impostor.iter().sum::<f64>() / n;
        let var = impostor.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(1e-6),
        })
    }

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    /// Stored statistics, or the identity for checkpoints without them.
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        match ck.extra("score_norm").map(|t| t.values.as_slice()) {
            Some(&[mean, std]) => Self { mean, std },
            _ => Self::IDENTITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Operating point on normalized scores.
    pub threshold: Threshold,
    pub norm: ScoreNorm,
}

/// Score normalization and Youden-optimal threshold from training-split
/// scores. In reference-match mode each genuine utterance is scored
/// against the other enrolled utterances only.
pub fn calibrate_user(
    model: &Model,
    corpus: &Corpus,
    genuine: &[usize],
    impostor: &[usize],
    mode: ScoreMode,
) -> Result<Calibration> {
    let live =
        |i: usize| score_utterance(model, &corpus.features[i], ScoreMode::LivePair, None, false);
    let (g, im): (Vec<f64>, Vec<f64>) = match mode {
        ScoreMode::LivePair => (
            genuine
                .iter()
                .map(|&i| live(i).map(|s| s.0))
                .collect::<Result<_>>()?,
            impostor
                .iter()
                .map(|&i| live(i).map(|s| s.0))
                .collect::<Result<_>>()?,
        ),
        ScoreMode::ReferenceMatch => {
            if genuine.len() < 2 {
                return Err(Error::Data(
                    "reference-match calibration needs two genuine utterances".into(),
                ));
            }
            let user = corpus.entries[genuine[0]].user.as_str();
            let refs = enroll_split(model, corpus, genuine, user)?;
            let mut g = Vec::with_capacity(genuine.len());
            for k in 0..genuine.len() {
                let others: Vec<_> = (0..refs.len())
                    .filter(|&j| j != k)
                    .map(|j| refs.pairs[j].clone())
                    .collect();
                let loo = ReferenceSet::new(user, 0, others)?;
                g.push(score(&refs.pairs[k].0, &refs.pairs[k].1, Some(&loo), mode)?);
            }
            let im = impostor
                .iter()
                .map(|&i| {
                    score_utterance(model, &corpus.features[i], mode, Some(&refs), false)
                        .map(|s| s.0)
                })
                .collect::<Result<_>>()?;
            (g, im)
        }
    };
    let norm = ScoreNorm::fit(&im)?;
    let z = |v: &[f64]| v.iter().map(|&s| norm.apply(s)).collect::<Vec<f64>>();
    Ok(Calibration {
        threshold: calibrate_threshold(&z(&g), &z(&im))?,
        norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub user: String,
    pub test_session: String,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub thr: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub eer: f64,
    pub genuine_trials: usize,
    pub attack_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub score_mode: ScoreMode,
    pub users: Vec<UserReport>,
    pub mean_top1: f64,
    pub mean_top2: f64,
    pub mean_top3: f64,
    /// Pooled over every target user's trials at that user's threshold.
    pub tpr: f64,
    pub fpr: f64,
    /// From the pooled genuine and attack scores, each shifted by its
    /// user's threshold so every per-user decision boundary sits at zero.
    pub eer: f64,
    pub mean_user_eer: f64,
    pub genuine_trials: usize,
    pub attack_trials: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn users_csv(&self) -> String {
        let mut out = String::from(
            "user,test_session,top1,top2,top3,thr,tpr,fpr,eer,genuine_trials,attack_trials\n",
        );
        for u in &self.users {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                u.user,
                u.test_session,
                u.top1,
                u.top2,
                u.top3,
                u.thr,
                u.tpr,
                u.fpr,
                u.eer,
                u.genuine_trials,
                u.attack_trials
            ));
        }
        out
    }
}

/// Per-user report plus the normalized trial scores.
pub fn evaluate_user(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    splits: &[UserSplit],
    target: &str,
    mode: ScoreMode,
    decoder: &Decoder<'_>,
) -> Result<(UserReport, Vec<f64>, Vec<f64>)> {
    let split = splits
        .iter()
        .find(|s| s.user == target)
        .ok_or_else(|| Error::Data(format!("unknown user {target}")))?;
    if split.test.is_empty() {
        return Err(Error::Data(format!(
            "user {target} has an empty test split"
        )));
    }
    let thr = checkpoint
        .extra("threshold")
        .and_then(|t| t.values.first().copied())
        .ok_or_else(|| {
            Error::Data(format!(
                "checkpoint for {target} has no calibrated threshold"
            ))
        })?;
    let model = &checkpoint.model;
    let norm = ScoreNorm::from_checkpoint(checkpoint);
    let refs = match mode {
        ScoreMode::LivePair => None,
        ScoreMode::ReferenceMatch => Some(enroll_split(model, corpus, &split.train, target)?),
    };

    let mut hits = [0usize; 3];
    let mut genuine = Vec::with_capacity(split.test.len());
    for &i in &split.test {
        let (s, inf) = score_utterance(model, &corpus.features[i], mode, refs.as_ref(), true)?;
        genuine.push(norm.apply(s));
        let ranked = decoder(&corpus.entries[i], &inf)?;
        if let Some(pos) = ranked.iter().position(|w| *w == corpus.entries[i].word) {
            for h in hits.iter_mut().skip(pos) {
                *h += 1;
            }
        }
    }
    let mut impostor = Vec::new();
    for other in splits.iter().filter(|s| s.user != target) {
        for &i in &other.test {
            let s = score_utterance(model, &corpus.features[i], mode, refs.as_ref(), false)?.0;
            impostor.push(norm.apply(s));
        }
    }
    let m = auth_metrics(&genuine, &impostor, thr)?;
    let n = split.test.len() as f64;
    let report = UserReport {
        user: target.to_string(),
        test_session: split.test_session.clone(),
        top1: hits[0] as f64 / n,
        top2: hits[1] as f64 / n,
        top3: hits[2] as f64 / n,
        thr,
        tpr: m.tpr,
        fpr: m.fpr,
        eer: m.eer,
        genuine_trials: genuine.len(),
        attack_trials: impostor.len(),
    };
    Ok((report, genuine, impostor))
}

/// Leave-one-session-out evaluation of every user with its own checkpoint.
pub fn evaluate(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    splits: &[UserSplit],
    checkpoints: &BTreeMap<String, Checkpoint>,
    decoder: &Decoder<'_>,
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mode = cfg.eval.score_mode;
    let mut users = Vec::with_capacity(splits.len());
    let (mut all_g, mut all_i) = (Vec::new(), Vec::new());
    let (mut tp, mut fp) = (0usize, 0usize);
    for split in splits {
        let ck = checkpoints
            .get(&split.user)
            .ok_or_else(|| Error::Data(format!("no checkpoint for user {}", split.user)))?;
        let (r, g, i) = evaluate_user(ck, corpus, splits, &split.user, mode, decoder)?;
        tp += g.iter().filter(|&&s| decide(s, r.thr)).count();
        fp += i.iter().filter(|&&s| decide(s, r.thr)).count();
        // center on the user's own operating point before pooling
        all_g.extend(g.iter().map(|s| s - r.thr));
        all_i.extend(i.iter().map(|s| s - r.thr));
        users.push(r);
    }
    let pooled = auth_metrics(&all_g, &all_i, f64::NAN)?;
    let k = users.len() as f64;
    let mean = |f: fn(&UserReport) -> f64| users.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        config_fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        score_mode: mode,
        mean_top1: mean(|u| u.top1),
        mean_top2: mean(|u| u.top2),
        mean_top3: mean(|u| u.top3),
        tpr: tp as f64 / all_g.len() as f64,
        fpr: fp as f64 / all_i.len() as f64,
        eer: pooled.eer,
        mean_user_eer: mean(|u| u.eer),
        genuine_trials: all_g.len(),
        attack_trials: all_i.len(),
        users,
    })
}
