//! Training objectives with analytic gradients.
//!
//! Embedding sets are passed as slices of column vectors (one `Vec<f64>`
//! of length `d` per sample). Every loss returns its value together with
//! the gradient of that value with respect to each input.

mod clwum;
mod ctc;
mod total;
mod triplet;

pub use clwum::{clwum_loss, similarity_matrix, ClwumOutput};
pub use ctc::{ctc_feasible, ctc_loss, CtcOutput};
pub use total::{total_loss, LossWeights};
pub use triplet::{angular_triplet_loss, TripletOutput, ARCCOS_EPS};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("cosine"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Accumulates `scale · ∂cos(a, b)/∂a` into `ga` and `scale · ∂cos/∂b` into `gb`.
pub(crate) fn cosine_backward(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    let s = dot(a, b) / (na * nb);
    for i in 0..a.len() {
        ga[i] += scale * (b[i] / (na * nb) - s * a[i] / (na * na));
        gb[i] += scale * (a[i] / (na * nb) - s * b[i] / (nb * nb));
    }
}

pub(crate) fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_set(name: &'static str, set: &[Vec<f64>], d: usize) -> Result<()> {
    for v in set {
        if v.len() != d {
            return Err(Error::Shape(format!(
                "{name}: expected dimension {d}, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        if l2_norm(v) == 0.0 {
            return Err(Error::ZeroNorm(name));
        }
    }
    Ok(())
}
