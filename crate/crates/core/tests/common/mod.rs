//! Oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use earkey::harness::{batch_objective, LossConfig, TrainBatch};
use earkey::losses::{angular_triplet_loss, clwum_loss, ctc_loss};
use earkey::nn::{Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Rows of log-softmax over random logits.
pub fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = log_sum_exp(logits.iter().copied());
            logits.iter().map(|l| l - z).collect()
        })
        .collect()
}

/// Merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
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

/// Every length-`t` path over `k` classes.
pub fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![Vec::new()];
    for _ in 0..t {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    paths
}

/// `-log P(target)` by summing every path that collapses onto it.
pub fn brute_ctc_nll(log_probs: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let k = log_probs.first().map_or(1, Vec::len);
    let terms = all_paths(log_probs.len(), k)
        .into_iter()
        .filter(|p| collapse_path(p, blank) == target)
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(t, &c)| log_probs[t][c])
                .sum::<f64>()
        });
    -log_sum_exp(terms)
}

/// Every label sequence over the non-blank classes up to length `max_len`.
pub fn all_labelings(k: usize, blank: usize, max_len: usize) -> Vec<Vec<usize>> {
    let letters: Vec<usize> = (0..k).filter(|&c| c != blank).collect();
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p: &Vec<usize>| {
                letters.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn unflatten(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        whisper_dim: 5,
        ultra_dim: 4,
        channels: 3,
        hidden: 2,
        embed: 3,
        dilations: vec![1, 2],
        gru_layers: 1,
        ..Default::default()
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

/// A randomly perturbed tiny model and a batch of `n` genuine utterances
/// with two-letter targets plus `n` attackers.
pub fn random_batch(seed: u64, n: usize, frames: usize) -> (Model, TrainBatch) {
    let mut r = rng(seed);
    let cfg = tiny_model_config();
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    for t in &mut model.params.tensors {
        for v in &mut t.values {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let mut batch = TrainBatch::default();
    for _ in 0..n {
        let target = vec![r.random_range(0..26), r.random_range(0..26)];
        batch.genuine.push((
            random_matrix(&mut r, frames, cfg.whisper_dim),
            random_matrix(&mut r, frames, cfg.ultra_dim),
            target,
        ));
        batch.attackers.push((
            random_matrix(&mut r, frames, cfg.whisper_dim),
            random_matrix(&mut r, frames, cfg.ultra_dim),
        ));
    }
    (model, batch)
}

/// Relative error of the combined objective's parameter gradient against
/// central differences over every parameter.
pub fn composition_grad_error(model: &Model, batch: &TrainBatch, loss: &LossConfig) -> f64 {
    let (_, analytic) = batch_objective(model, batch, loss).unwrap();
    let value = |m: &Model| batch_objective(m, batch, loss).unwrap().0.l_total;
    let h = 1e-5;
    let mut numeric = Vec::new();
    for p in 0..model.params.len() {
        for i in 0..model.params.tensors[p].numel() {
            let (mut mp, mut mm) = (model.clone(), model.clone());
            mp.params.tensors[p].values[i] += h;
            mm.params.tensors[p].values[i] -= h;
            numeric.push((value(&mp) - value(&mm)) / (2.0 * h));
        }
    }
    rel_err(&flatten(&analytic), &numeric)
}

pub const EPS: f64 = 1e-9;

/// 1..=12 scores on a 0.05 grid, so ties are common.
pub fn grid_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=12);
    (0..n)
        .map(|_| rng.random_range(-20..=20) as f64 / 20.0)
        .collect()
}

/// Every pooled score ± ε plus both extremes, in increasing order.
pub fn sweep(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let mut ts = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &s in genuine.iter().chain(impostor) {
        ts.push(s - EPS);
        ts.push(s + EPS);
    }
    ts.sort_by(f64::total_cmp);
    ts
}

pub fn count(scores: &[f64], t: f64) -> usize {
    scores.iter().filter(|&&s| s > t).count()
}

pub fn oracle_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = sweep(genuine, impostor)
        .into_iter()
        .map(|t| {
            (
                count(genuine, t) as f64 / genuine.len() as f64,
                count(impostor, t) as f64 / impostor.len() as f64,
            )
        })
        .collect();
    let gap = |(tpr, fpr): (f64, f64)| fpr - (1.0 - tpr);
    for j in 0..pts.len() {
        let dj = gap(pts[j]);
        if dj <= 0.0 {
            if dj == 0.0 || j == 0 {
                return pts[j].1;
            }
            let da = gap(pts[j - 1]);
            let lambda = da / (da - dj);
            return pts[j - 1].1 + lambda * (pts[j].1 - pts[j - 1].1);
        }
    }
    unreachable!("the +inf threshold rejects everything")
}

/// Posterior of every labeling by summing all `K^T` frame paths; the last
/// class is blank.
pub fn posteriors(lp: &[Vec<f64>]) -> std::collections::BTreeMap<Vec<usize>, f64> {
    let k = lp[0].len();
    let mut out = std::collections::BTreeMap::new();
    for path in all_paths(lp.len(), k) {
        let p: f64 = path
            .iter()
            .enumerate()
            .map(|(i, &c)| lp[i][c])
            .sum::<f64>()
            .exp();
        *out.entry(collapse_path(&path, k - 1)).or_insert(0.0) += p;
    }
    out
}

/// Gradient check of the contrastive loss on a random instance.
pub fn clwum_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (1 + seed as usize % 4, 2 + seed as usize % 4);
    let (w, u) = (random_vectors(&mut r, n, d), random_vectors(&mut r, n, d));
    let out = clwum_loss(&w, &u, 0.7).unwrap();
    let mut x = flatten(&w);
    x.extend(flatten(&u));
    let f = |x: &[f64]| {
        let (a, b) = x.split_at(n * d);
        clwum_loss(&unflatten(a, d), &unflatten(b, d), 0.7)
            .unwrap()
            .loss
    };
    let mut analytic = flatten(&out.grad_w);
    analytic.extend(flatten(&out.grad_u));
    rel_err(&analytic, &numeric_grad(&f, &x, 1e-5))
}

/// Gradient check of the angular triplet loss; `None` for instances within
/// 1e-3 rad of the hinge, where the loss is not differentiable.
pub fn triplet_grad_error(seed: u64) -> Option<f64> {
    let mut r = rng(1000 + seed);
    let (n, m, d) = (1 + seed as usize % 3, 1 + seed as usize % 4, 3);
    let w = random_vectors(&mut r, n, d);
    let pos = random_vectors(&mut r, n, d);
    let neg = random_vectors(&mut r, m, d);
    let margin = 1.0;
    let out = angular_triplet_loss(&w, &pos, &neg, margin).unwrap();
    if out
        .s_pos
        .iter()
        .zip(&out.s_neg)
        .any(|(p, q)| (p.acos() - q.acos() + margin).abs() < 1e-3)
    {
        return None;
    }
    let mut x = flatten(&w);
    x.extend(flatten(&pos));
    x.extend(flatten(&neg));
    let f = |x: &[f64]| {
        let (a, rest) = x.split_at(n * d);
        let (b, c) = rest.split_at(n * d);
        angular_triplet_loss(&unflatten(a, d), &unflatten(b, d), &unflatten(c, d), margin)
            .unwrap()
            .loss
    };
    let mut analytic = flatten(&out.grad_w);
    analytic.extend(flatten(&out.grad_pos));
    analytic.extend(flatten(&out.grad_neg));
    Some(rel_err(&analytic, &numeric_grad(&f, &x, 1e-6)))
}

/// Gradient check of the CTC loss with respect to its log-probabilities.
pub fn ctc_grad_error(seed: u64) -> f64 {
    let mut r = rng(2000 + seed);
    let (t, k) = (5 + seed as usize % 3, 3 + seed as usize % 3);
    let lp = random_log_probs(&mut r, t, k);
    let target: Vec<usize> = (0..1 + seed as usize % 3)
        .map(|_| r.random_range(0..k - 1))
        .collect();
    let out = ctc_loss(&lp, &target, k - 1).unwrap();
    assert!(out.feasible);
    let f = |x: &[f64]| ctc_loss(&unflatten(x, k), &target, k - 1).unwrap().loss;
    rel_err(&flatten(&out.grad), &numeric_grad(&f, &flatten(&lp), 1e-5))
}
