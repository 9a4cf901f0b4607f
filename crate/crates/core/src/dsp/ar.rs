//! Burg estimation of autoregressive coefficients.
//!
//! The recursion minimizes the summed forward and backward prediction
//! error at each stage, which keeps every reflection coefficient inside the
//! unit interval and the resulting all-pole model stable, even on windows
//! only a few times longer than the model order.

use crate::dsp::boost_second_diff;
use crate::error::{Error, Result};

/// White-noise conditioning added to the reflection denominators, relative
/// to the window energy. Band-limited input (the ultrasonic stream is empty
/// below 17.5 kHz) otherwise drives the prediction gain, and the
/// coefficients, towards overflow.
pub const DEFAULT_AR_CONDITIONING: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    /// Predictor coefficients: `x[n] ≈ Σ_k coeffs[k-1] · x[n-k]`.
    pub coeffs: Vec<f64>,
    pub reflection: Vec<f64>,
    /// Final prediction-error power per sample.
    pub error_power: f64,
}

pub fn burg(x: &[f64], order: usize, conditioning: f64) -> Result<ArModel> {
    let n = x.len();
    if n <= 2 * order || n < 2 {
        return Err(Error::TooShort {
            needed: 2 * order + 1,
            got: n,
        });
    }
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    if var <= 0.0 || !energy.is_finite() {
        return Err(Error::SilentCapture);
    }

    let mut f = x.to_vec();
    let mut b = x.to_vec();
    // error filter A(z) = 1 + a_1 z^-1 + ...
    let mut a: Vec<f64> = Vec::with_capacity(order);
    let mut reflection = Vec::with_capacity(order);
    let mut err = energy / n as f64;
    let floor = 2.0 * conditioning * energy;

    for m in 0..order {
        let mut num = 0.0;
        let mut den = floor;
        for i in m + 1..n {
            let (fi, bi) = (f[i], b[i - 1]);
            num += fi * bi;
            den += fi * fi + bi * bi;
        }
        let k = if den > 0.0 { -2.0 * num / den } else { 0.0 };

        let prev = a.clone();
        for j in 0..m {
            a[j] = prev[j] + k * prev[m - 1 - j];
        }
        a.push(k);
        reflection.push(k);

        for i in (m + 1..n).rev() {
            let fi = f[i];
            let bi = b[i - 1];
            f[i] = fi + k * bi;
            b[i] = bi + k * fi;
        }
        err *= 1.0 - k * k;
    }

    Ok(ArModel {
        coeffs: a.iter().map(|v| -v).collect(),
        reflection,
        error_power: err.max(0.0),
    })
}

/// AR features of one ultrasonic window: second-order difference boost,
/// then a Burg fit of the given order.
pub fn ar_features(window: &[f64], order: usize) -> Result<Vec<f64>> {
    if window.len() <= 2 * order + 2 {
        return Err(Error::TooShort {
            needed: 2 * order + 3,
            got: window.len(),
        });
    }
    let boosted = boost_second_diff(window)?;
    Ok(burg(&boosted, order, DEFAULT_AR_CONDITIONING)?.coeffs)
}
