//! CTC decoding and word-level ranking.
//!
//! Class layout: letters occupy `0..K-1` (`a`, `b`, …) and the blank is the
//! last class, so the 27-way spelling head maps 26 to blank.

mod lexicon;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::losses::{ctc_loss, log_sum_exp};

pub use lexicon::{lexicon_topn, Lexicon, BUILTIN_WORDS};

pub const NUM_CLASSES: usize = 27;
pub const BLANK: usize = NUM_CLASSES - 1;
pub const DEFAULT_BEAM_WIDTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub letters: String,
    pub log_prob: f64,
    #[serde(skip)]
    pub rank: usize,
}

/// One JSON line of decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub hypotheses: Vec<Hypothesis>,
    pub top_words: Vec<String>,
}

pub fn letter_of(class: usize) -> char {
    debug_assert!(class < 26);
    (b'a' + class as u8) as char
}

/// Class indices of a lowercase word.
pub fn word_labels(word: &str) -> Result<Vec<usize>> {
    word.bytes()
        .map(|b| match b {
            b'a'..=b'z' => Ok((b - b'a') as usize),
            _ => Err(Error::Data(format!("word {word:?} is not lowercase a-z"))),
        })
        .collect()
}

pub fn labels_to_string(labels: &[usize]) -> String {
    labels.iter().map(|&c| letter_of(c)).collect()
}

fn check_matrix(log_probs: &[Vec<f64>]) -> Result<usize> {
    let k = log_probs.first().map_or(NUM_CLASSES, Vec::len);
    if k < 2 || log_probs.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(
            "log-probability rows must share a width ≥ 2".into(),
        ));
    }
    if k > NUM_CLASSES {
        return Err(Error::Shape(format!("{k} classes exceed the alphabet")));
    }
    Ok(k)
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

pub fn greedy_decode(log_probs: &[Vec<f64>]) -> Result<String> {
    let k = check_matrix(log_probs)?;
    let path: Vec<usize> = log_probs
        .iter()
        .map(|row| {
            // first maximum wins
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    Ok(labels_to_string(&collapse(&path, k - 1)))
}

#[derive(Clone, Copy)]
struct Beam {
    blank: f64,
    label: f64,
}

impl Beam {
    const EMPTY: Beam = Beam {
        blank: f64::NEG_INFINITY,
        label: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_sum_exp([self.blank, self.label])
    }
}

fn lse_into(slot: &mut f64, v: f64) {
    *slot = log_sum_exp([*slot, v]);
}

/// Prefix beam search with exact rescoring.
///
/// Searches with every width `1..=width`, pools the surviving prefixes and
/// scores each by its exact CTC posterior. Pooling makes the top posterior
/// non-decreasing in `width`, which a single pruned search does not
/// guarantee. Ties rank the lexicographically smaller prefix first.
pub fn beam_decode(log_probs: &[Vec<f64>], width: usize, n_best: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return config("beam width must be at least 1");
    }
    if n_best == 0 || n_best > width {
        return config(format!("n_best must be in 1..={width}, got {n_best}"));
    }
    let k = check_matrix(log_probs)?;
    let blank = k - 1;
    let mut pool = BTreeSet::new();
    for w in 1..=width {
        pool.extend(prefix_search(log_probs, k, w));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for prefix in pool {
        let out = ctc_loss(log_probs, &prefix, blank)?;
        if out.feasible {
            scored.push((prefix, (-out.loss).min(0.0)));
        }
    }
    // pool iteration is lexicographic and the sort is stable
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored
        .into_iter()
        .take(n_best)
        .enumerate()
        .map(|(i, (prefix, log_prob))| Hypothesis {
            letters: labels_to_string(&prefix),
            log_prob,
            rank: i + 1,
        })
        .collect())
}

/// Classic prefix beam search; returns the surviving prefixes.
fn prefix_search(log_probs: &[Vec<f64>], k: usize, width: usize) -> Vec<Vec<usize>> {
    let blank = k - 1;
    let mut beams: Vec<(Vec<usize>, Beam)> = vec![(
        Vec::new(),
        Beam {
            blank: 0.0,
            label: f64::NEG_INFINITY,
        },
    )];
    for row in log_probs {
        let mut next: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            let stay = next.entry(prefix.clone()).or_insert(Beam::EMPTY);
            lse_into(&mut stay.blank, beam.total() + row[blank]);
            if let Some(&last) = prefix.last() {
                // repeated emission without a blank collapses onto the prefix
                lse_into(&mut stay.label, beam.label + row[last]);
            }
            for c in (0..k).filter(|&c| c != blank) {
                let mut ext = prefix.clone();
                ext.push(c);
                let from = if prefix.last() == Some(&c) {
                    beam.blank
                } else {
                    beam.total()
                };
                let slot = next.entry(ext).or_insert(Beam::EMPTY);
                lse_into(&mut slot.label, from + row[c]);
            }
        }
        beams = prune(next, width);
    }
    beams.into_iter().map(|(p, _)| p).collect()
}

fn prune(next: BTreeMap<Vec<usize>, Beam>, width: usize) -> Vec<(Vec<usize>, Beam)> {
    let mut all: Vec<(Vec<usize>, Beam)> = next
        .into_iter()
        .filter(|(_, b)| b.total() > f64::NEG_INFINITY)
        .collect();
    all.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
    all.truncate(width);
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(path: &[usize], k: usize) -> Vec<Vec<f64>> {
        path.iter()
            .map(|&c| (0..k).map(|j| if j == c { 0.0 } else { -30.0 }).collect())
            .collect()
    }

    #[test]
    fn greedy_examples() {
        let (a, b) = (0, 1);
        assert_eq!(
            greedy_decode(&one_hot(&[a, a, BLANK, b, b], 27)).unwrap(),
            "ab"
        );
        assert_eq!(greedy_decode(&one_hot(&[BLANK; 4], 27)).unwrap(), "");
        assert_eq!(greedy_decode(&one_hot(&[a, BLANK, a], 27)).unwrap(), "aa");
        assert_eq!(greedy_decode(&[]).unwrap(), "");
    }

    #[test]
    fn beam_all_blank() {
        let lp = one_hot(&[2, 2, 2], 3);
        let hyps = beam_decode(&lp, 4, 1).unwrap();
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].letters, "");
        assert!(hyps[0].log_prob > -1e-9);
    }

    #[test]
    fn beam_argument_errors() {
        let lp = one_hot(&[0], 3);
        assert!(matches!(beam_decode(&lp, 0, 1), Err(Error::Config(_))));
        assert!(beam_decode(&lp, 2, 3).is_err());
        assert!(beam_decode(&lp, 2, 0).is_err());
    }

    #[test]
    fn beam_merges_alignments() {
        // "a" via (a,a), (a,␣), (␣,a) under uniform two-class frames
        let lp = vec![vec![0.5f64.ln(); 2]; 2];
        let hyps = beam_decode(&lp, 4, 2).unwrap();
        assert_eq!(hyps[0].letters, "a");
        assert!((hyps[0].log_prob - 0.75f64.ln()).abs() < 1e-12);
        assert_eq!(hyps[1].letters, "");
        assert!((hyps[1].log_prob - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn word_label_round_trip() {
        assert_eq!(word_labels("cab").unwrap(), vec![2, 0, 1]);
        assert_eq!(labels_to_string(&[2, 0, 1]), "cab");
        assert!(word_labels("Cab").is_err());
    }
}
