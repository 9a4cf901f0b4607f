//! Enrollment, scoring, threshold calibration and verification metrics.

mod refset;

use serde::{Deserialize, Serialize};

use crate::dsp::FeaturePair;
use crate::error::{config, Error, Result};
use crate::losses::cosine;
use crate::nn::Model;

pub use refset::ReferenceSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Cosine between the live whisper and ultrasonic auth vectors.
    #[default]
    LivePair,
    /// Best cosine between the live ultrasonic vector and any enrolled
    /// whisper vector.
    ReferenceMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub thr: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub utterance_id: String,
    pub score: f64,
    pub thr: f64,
    pub accept: bool,
    pub mode: ScoreMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub thr: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthMetrics {
    pub thr: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub eer: f64,
    /// Ordered by increasing threshold.
    pub roc: Vec<RocPoint>,
}

/// Runs the auth heads over each registration utterance.
pub fn enroll(
    model: &Model,
    utterances: &[Vec<FeaturePair>],
    user_id: &str,
    created_at: u64,
) -> Result<ReferenceSet> {
    if utterances.is_empty() {
        return config("enrollment needs at least one utterance");
    }
    let pairs = utterances
        .iter()
        .map(|u| model.infer(u, false).map(|inf| (inf.a_w, inf.a_u)))
        .collect::<Result<Vec<_>>>()?;
    ReferenceSet::new(user_id, created_at, pairs)
}

pub fn score(
    whisper: &[f64],
    ultra: &[f64],
    refs: Option<&ReferenceSet>,
    mode: ScoreMode,
) -> Result<f64> {
    match mode {
        ScoreMode::LivePair => cosine(whisper, ultra),
        ScoreMode::ReferenceMatch => {
            let refs = refs.filter(|r| !r.pairs.is_empty()).ok_or_else(|| {
                Error::Data("reference-match scoring needs an enrolled reference set".into())
            })?;
            let mut best = f64::NEG_INFINITY;
            for (w, _) in &refs.pairs {
                best = best.max(cosine(ultra, w)?);
            }
            Ok(best)
        }
    }
}

/// Accept iff `score > thr`; the boundary rejects.
pub fn decide(score: f64, thr: f64) -> bool {
    score > thr
}

pub fn verify(
    utterance_id: &str,
    whisper: &[f64],
    ultra: &[f64],
    refs: Option<&ReferenceSet>,
    thr: f64,
    mode: ScoreMode,
) -> Result<VerdictRecord> {
    let s = score(whisper, ultra, refs, mode)?;
    Ok(VerdictRecord {
        utterance_id: utterance_id.to_string(),
        score: s,
        thr,
        accept: decide(s, thr),
        mode,
    })
}

fn check_scores(genuine: &[f64], impostor: &[f64]) -> Result<()> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Data("need both genuine and impostor scores".into()));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification scores"));
    }
    Ok(())
}

/// Candidate thresholds in increasing order: below every score, each
/// midpoint between adjacent distinct pooled scores, and the maximum.
fn candidates(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let mut pooled: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    out.extend(pooled.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(*pooled.last().expect("non-empty"));
    out
}

fn accepted(scores: &[f64], thr: f64) -> usize {
    scores.iter().filter(|&&s| decide(s, thr)).count()
}

/// Youden-optimal threshold over midpoint candidates; ties go to the larger
/// threshold.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64]) -> Result<Threshold> {
    check_scores(genuine, impostor)?;
    let (np, nn) = (genuine.len() as i128, impostor.len() as i128);
    let mut best: Option<(i128, f64, usize, usize)> = None;
    for t in candidates(genuine, impostor) {
        if t == f64::NEG_INFINITY {
            continue;
        }
        let (tp, fp) = (accepted(genuine, t), accepted(impostor, t));
        // J·np·nn, exact in integers
        let j = tp as i128 * nn - fp as i128 * np;
        if best.is_none_or(|b| j >= b.0) {
            best = Some((j, t, tp, fp));
        }
    }
    let (_, thr, tp, fp) = best.expect("at least one candidate");
    let tpr = tp as f64 / np as f64;
    let fpr = fp as f64 / nn as f64;
    Ok(Threshold {
        thr,
        tpr,
        fpr,
        j: tpr - fpr,
    })
}

/// Equal error rate from an ROC ordered by increasing threshold, by linear
/// interpolation where `FPR − (1 − TPR)` changes sign.
pub fn eer_from_roc(roc: &[RocPoint]) -> f64 {
    let gap = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    let Some(j) = roc.iter().position(|p| gap(p) <= 0.0) else {
        return roc.last().map_or(0.5, |p| p.fpr);
    };
    let dj = gap(&roc[j]);
    if dj == 0.0 || j == 0 {
        return roc[j].fpr;
    }
    let (a, b) = (&roc[j - 1], &roc[j]);
    let da = gap(a);
    let lambda = da / (da - dj);
    a.fpr + lambda * (b.fpr - a.fpr)
}

pub fn auth_metrics(genuine: &[f64], impostor: &[f64], thr: f64) -> Result<AuthMetrics> {
    check_scores(genuine, impostor)?;
    let rate = |scores: &[f64], t: f64| accepted(scores, t) as f64 / scores.len() as f64;
    let roc: Vec<RocPoint> = candidates(genuine, impostor)
        .into_iter()
        .map(|t| RocPoint {
            thr: t,
            tpr: rate(genuine, t),
            fpr: rate(impostor, t),
        })
        .collect();
    Ok(AuthMetrics {
        thr,
        tpr: rate(genuine, thr),
        fpr: rate(impostor, thr),
        eer: eer_from_roc(&roc),
        roc,
    })
}
