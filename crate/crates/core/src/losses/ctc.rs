//! Connectionist temporal classification loss, forward-backward in log space.

use super::log_sum_exp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    /// `-log P(target | log_probs)`; `+inf` when the target cannot fit.
    pub loss: f64,
    /// `∂loss/∂log_probs[t][k]`, all zero for infeasible targets.
    pub grad: Vec<Vec<f64>>,
    pub feasible: bool,
}

/// Frames needed to emit `target`: one per label plus a blank between
/// each pair of repeated labels.
pub fn ctc_feasible(frames: usize, target: &[usize]) -> bool {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    frames >= target.len() + repeats
}

/// CTC loss of a `T × K` matrix of per-frame log-probabilities against
/// `target` (class indices, none equal to `blank`).
pub fn ctc_loss(log_probs: &[Vec<f64>], target: &[usize], blank: usize) -> Result<CtcOutput> {
    let t_len = log_probs.len();
    let k = log_probs.first().map_or(0, |r| r.len());
    if log_probs.iter().any(|r| r.len() != k) || (t_len > 0 && blank >= k) {
        return Err(Error::Shape(
            "ragged log-probability matrix or blank out of range".into(),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == blank || c >= k.max(1)) {
        return Err(Error::Data(format!(
            "target label {bad} invalid for {k} classes with blank {blank}"
        )));
    }
    let zero_grad = || vec![vec![0.0; k]; t_len];
    if !ctc_feasible(t_len, target) {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: zero_grad(),
            feasible: false,
        });
    }
    if t_len == 0 {
        return Ok(CtcOutput {
            loss: 0.0,
            grad: zero_grad(),
            feasible: true,
        });
    }

    let s_len = 2 * target.len() + 1;
    let label = |s: usize| {
        if s.is_multiple_of(2) {
            blank
        } else {
            target[s / 2]
        }
    };
    // skip transition s-2 -> s allowed onto a label that differs from the previous label
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let neg_inf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![neg_inf; s_len]; t_len];
    alpha[0][0] = log_probs[0][blank];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][label(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[t - 1][s]];
            if s >= 1 {
                terms.push(alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                terms.push(alpha[t - 1][s - 2]);
            }
            alpha[t][s] = log_sum_exp(terms) + log_probs[t][label(s)];
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![vec![neg_inf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |sp: usize| beta[t + 1][sp] + log_probs[t + 1][label(sp)];
            let mut terms = vec![next(s)];
            if s + 1 < s_len {
                terms.push(next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms.push(next(s + 2));
            }
            beta[t][s] = log_sum_exp(terms);
        }
    }

    let log_p = if s_len > 1 {
        log_sum_exp([alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2]])
    } else {
        alpha[t_len - 1][0]
    };
    if log_p == neg_inf {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: zero_grad(),
            feasible: false,
        });
    }

    let mut grad = zero_grad();
    for t in 0..t_len {
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); k];
        for s in 0..s_len {
            per_class[label(s)].push(alpha[t][s] + beta[t][s]);
        }
        for (c, terms) in per_class.into_iter().enumerate() {
            if !terms.is_empty() {
                grad[t][c] = -(log_sum_exp(terms) - log_p).exp();
            }
        }
    }
    Ok(CtcOutput {
        loss: -log_p,
        grad,
        feasible: true,
    })
}
