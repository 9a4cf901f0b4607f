use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Hypothesis;
use crate::error::{config, Error, Result};

/// Default vocabulary: short everyday words, all distinct.
pub const BUILTIN_WORDS: [&str; 50] = [
    "ear", "tea", "cat", "dog", "sun", "map", "key", "box", "pen", "cup", "hat", "bed", "red",
    "fox", "owl", "jam", "ice", "gym", "zip", "wax", "call", "open", "stop", "play", "home",
    "mail", "note", "book", "time", "lock", "song", "blue", "fish", "milk", "rain", "snow", "wind",
    "door", "lamp", "vote", "quiz", "yard", "jump", "king", "west", "help", "next", "back", "mute",
    "photo",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub source: String,
}

impl Lexicon {
    pub fn new(words: Vec<String>, source: impl Into<String>) -> Result<Self> {
        if words.is_empty() {
            return config("lexicon is empty");
        }
        let mut seen = HashSet::new();
        for w in &words {
            if w.is_empty() || !w.bytes().all(|b| b.is_ascii_lowercase()) {
                return Err(Error::Data(format!(
                    "lexicon word {w:?} is not lowercase a-z"
                )));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::Data(format!("lexicon word {w:?} appears twice")));
            }
        }
        Ok(Self {
            words,
            source: source.into(),
        })
    }

    pub fn builtin() -> Self {
        Self {
            words: BUILTIN_WORDS.iter().map(|w| w.to_string()).collect(),
            source: "builtin".into(),
        }
    }

    /// The first `n` built-in words.
    pub fn builtin_prefix(n: usize) -> Result<Self> {
        if n == 0 || n > BUILTIN_WORDS.len() {
            return config(format!(
                "built-in lexicon has 1..={} words, asked for {n}",
                BUILTIN_WORDS.len()
            ));
        }
        Self::new(
            BUILTIN_WORDS[..n].iter().map(|w| w.to_string()).collect(),
            format!("builtin:{n}"),
        )
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self::new(words, path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Ranks lexicon words by their smallest edit distance to any hypothesis;
/// ties go to the word whose closest hypothesis has the higher posterior,
/// then alphabetical order. An empty hypothesis list acts as the empty string.
pub fn lexicon_topn(hyps: &[Hypothesis], lexicon: &Lexicon, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return config("top-n needs n ≥ 1");
    }
    let fallback = [Hypothesis {
        letters: String::new(),
        log_prob: 0.0,
        rank: 1,
    }];
    let hyps = if hyps.is_empty() { &fallback[..] } else { hyps };
    let mut scored: Vec<(usize, f64, &str)> = lexicon
        .words
        .iter()
        .map(|w| {
            let best = hyps
                .iter()
                .map(|h| (strsim::levenshtein(&h.letters, w), h.log_prob))
                .min_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)))
                .expect("at least one hypothesis");
            (best.0, best.1, w.as_str())
        })
        .collect();
    scored.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then(a.2.cmp(b.2))
    });
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(_, _, w)| w.to_string())
        .collect())
}
