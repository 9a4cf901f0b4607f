use super::{check_set, cosine, cosine_backward, log_sum_exp};
use crate::error::{config, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClwumOutput {
    pub loss: f64,
    /// `S[i][j] = cos(w_i, u_j)`.
    pub similarity: Vec<Vec<f64>>,
    pub grad_w: Vec<Vec<f64>>,
    pub grad_u: Vec<Vec<f64>>,
}

pub fn similarity_matrix(w: &[Vec<f64>], u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    w.iter()
        .map(|wi| u.iter().map(|uj| cosine(wi, uj)).collect())
        .collect()
}

/// Cross-modal contrastive loss over the genuine-user columns: each
/// whisper embedding must pick out its own ultrasonic partner among the N
/// candidates under a temperature-scaled softmax of cosine similarities.
pub fn clwum_loss(w_g: &[Vec<f64>], u_g: &[Vec<f64>], tau: f64) -> Result<ClwumOutput> {
    if tau.is_nan() || tau <= 0.0 {
        return config(format!("temperature must be positive, got {tau}"));
    }
    let n = w_g.len();
    if n == 0 || u_g.len() != n {
        return Err(Error::Shape(format!(
            "need matching nonempty sets, got {} and {}",
            n,
            u_g.len()
        )));
    }
    let d = w_g[0].len();
    check_set("whisper embeddings", w_g, d)?;
    check_set("ultrasonic embeddings", u_g, d)?;

    let s = similarity_matrix(w_g, u_g)?;
    let mut loss = 0.0;
    let mut grad_w = vec![vec![0.0; d]; n];
    let mut grad_u = vec![vec![0.0; d]; n];
    for i in 0..n {
        let lse = log_sum_exp(s[i].iter().map(|v| v / tau));
        loss += lse - s[i][i] / tau;
        for j in 0..n {
            let p = (s[i][j] / tau - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            let g = (p - target) / (tau * n as f64);
            if g != 0.0 {
                let (gw, gu) = (&mut grad_w[i], &mut grad_u[j]);
                cosine_backward(&w_g[i], &u_g[j], g, gw, gu);
            }
        }
    }
    Ok(ClwumOutput {
        loss: loss / n as f64,
        similarity: s,
        grad_w,
        grad_u,
    })
}
