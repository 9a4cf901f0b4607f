use super::{check_set, cosine, cosine_backward};
use crate::error::{Error, Result};

/// arccos inputs are clamped to `[-1 + ε, 1 - ε]`.
pub const ARCCOS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub s_pos: Vec<f64>,
    pub s_neg: Vec<f64>,
    /// Index of the hardest (most similar) attacker for each anchor.
    pub hardest: Vec<usize>,
    pub grad_w: Vec<Vec<f64>>,
    pub grad_pos: Vec<Vec<f64>>,
    pub grad_neg: Vec<Vec<f64>>,
}

fn clamped(s: f64) -> (f64, bool) {
    let lim = 1.0 - ARCCOS_EPS;
    if s > lim {
        (lim, true)
    } else if s < -lim {
        (-lim, true)
    } else {
        (s, false)
    }
}

/// d/ds arccos(clamp(s)), zero where the clamp is active.
fn darccos(s: f64) -> f64 {
    let (c, hit) = clamped(s);
    if hit {
        0.0
    } else {
        -1.0 / (1.0 - c * c).sqrt()
    }
}

/// Angular triplet hinge: for each genuine whisper anchor, the angle to its
/// own ultrasonic vector must undercut the angle to the hardest attacker
/// ultrasonic vector by `margin` radians.
pub fn angular_triplet_loss(
    w: &[Vec<f64>],
    u_pos: &[Vec<f64>],
    u_neg: &[Vec<f64>],
    margin: f64,
) -> Result<TripletOutput> {
    let n = w.len();
    if n == 0 || u_pos.len() != n || u_neg.is_empty() {
        return Err(Error::Shape(format!(
            "triplet sets: {} anchors, {} positives, {} negatives",
            n,
            u_pos.len(),
            u_neg.len()
        )));
    }
    let d = w[0].len();
    check_set("anchors", w, d)?;
    check_set("positives", u_pos, d)?;
    check_set("negatives", u_neg, d)?;

    let mut out = TripletOutput {
        loss: 0.0,
        s_pos: Vec::with_capacity(n),
        s_neg: Vec::with_capacity(n),
        hardest: Vec::with_capacity(n),
        grad_w: vec![vec![0.0; d]; n],
        grad_pos: vec![vec![0.0; d]; n],
        grad_neg: vec![vec![0.0; d]; u_neg.len()],
    };
    for i in 0..n {
        let sp = cosine(&w[i], &u_pos[i])?;
        let mut hard = (0, f64::NEG_INFINITY);
        for (j, neg) in u_neg.iter().enumerate() {
            let s = cosine(&w[i], neg)?;
            if s > hard.1 {
                hard = (j, s);
            }
        }
        let (j, sn) = hard;
        let hinge = margin + (clamped(sp).0.acos() - clamped(sn).0.acos());
        if hinge > 0.0 {
            out.loss += hinge;
            let scale = 1.0 / n as f64;
            let (gw, gp) = (&mut out.grad_w[i], &mut out.grad_pos[i]);
            cosine_backward(&w[i], &u_pos[i], scale * darccos(sp), gw, gp);
            cosine_backward(
                &w[i],
                &u_neg[j],
                -scale * darccos(sn),
                &mut out.grad_w[i],
                &mut out.grad_neg[j],
            );
        }
        out.s_pos.push(sp);
        out.s_neg.push(sn);
        out.hardest.push(j);
    }
    out.loss /= n as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at_angle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn equal_similarities_give_margin() {
        let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let u = vec![at_angle(0.3), at_angle(1.9)];
        let out = angular_triplet_loss(&w, &u, &u, 0.2).unwrap();
        // hardest negative of each anchor is its own positive here
        assert_eq!(out.loss, 0.2);
    }

    #[test]
    fn separated_pair_is_zero() {
        let w = vec![vec![1.0, 0.0]];
        let out = angular_triplet_loss(&w, &[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn direct_angle_evaluation() {
        let w = vec![at_angle(0.0)];
        let out = angular_triplet_loss(&w, &[at_angle(1.0)], &[at_angle(0.5)], 0.2).unwrap();
        assert!((out.loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn picks_hardest_negative() {
        let w = vec![at_angle(0.0)];
        let negs = vec![at_angle(2.0), at_angle(0.4), at_angle(1.0)];
        let out = angular_triplet_loss(&w, &[at_angle(0.5)], &negs, 0.2).unwrap();
        assert_eq!(out.hardest, vec![1]);
        assert!((out.loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_vectors() {
        let z = vec![vec![0.0, 0.0]];
        let v = vec![vec![1.0, 0.0]];
        assert!(matches!(
            angular_triplet_loss(&z, &v, &v, 0.2),
            Err(Error::ZeroNorm(_))
        ));
    }
}
