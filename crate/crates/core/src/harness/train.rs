use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::eval::calibrate_user;
use super::{Corpus, ExperimentConfig, LossConfig, UserSplit};
use crate::decode::{word_labels, BLANK};
use crate::error::{Error, Result};
use crate::losses::{angular_triplet_loss, clwum_loss, ctc_loss, total_loss};
use crate::nn::{Checkpoint, FeatureNorm, Model, Tape, Tensor, Var};
use crate::synth::derive_seed;

/// Prepared inputs of one batch: genuine `(whisper, ultrasonic, letters)`
/// followed by word-matched attacker `(whisper, ultrasonic)` pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub genuine: Vec<(Tensor, Tensor, Vec<usize>)>,
    pub attackers: Vec<(Tensor, Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub l_cl: f64,
    pub l_auth: f64,
    pub l_ctc: f64,
    pub l_total: f64,
    /// Genuine utterances whose word cannot fit their window count.
    pub ctc_skipped: usize,
}

/// Value and parameter gradient of the combined objective on one batch.
///
/// The contrastive term sees only genuine columns, the triplet term uses
/// genuine anchors and positives against attacker negatives, and the CTC
/// term averages over genuine utterances whose target fits.
pub fn batch_objective(
    model: &Model,
    batch: &TrainBatch,
    loss: &LossConfig,
) -> Result<(BatchLosses, Vec<Vec<f64>>)> {
    if batch.genuine.is_empty() || batch.attackers.is_empty() {
        return Err(Error::Shape(
            "a batch needs genuine and attacker utterances".into(),
        ));
    }
    let weights = loss.weights();
    let mut tape = Tape::new();
    let mut gen = Vec::with_capacity(batch.genuine.len());
    for (xw, xu, _) in &batch.genuine {
        gen.push(model.forward_utterance(&mut tape, xw, xu, true)?);
    }
    let mut att = Vec::with_capacity(batch.attackers.len());
    for (xw, xu) in &batch.attackers {
        att.push(model.forward_utterance(&mut tape, xw, xu, false)?);
    }
    let vals = |vars: &mut dyn Iterator<Item = Var>| -> Vec<Vec<f64>> {
        vars.map(|v| tape.value(v).to_vec()).collect()
    };
    let z_w = vals(&mut gen.iter().map(|g| g.z_w));
    let z_u = vals(&mut gen.iter().map(|g| g.z_u));
    let a_w = vals(&mut gen.iter().map(|g| g.a_w));
    let a_u = vals(&mut gen.iter().map(|g| g.a_u));
    let a_neg = vals(&mut att.iter().map(|a| a.a_u));

    let cl = clwum_loss(&z_w, &z_u, loss.tau)?;
    let tr = angular_triplet_loss(&a_w, &a_u, &a_neg, weights.margin)?;

    let mut ctc = Vec::new();
    let mut skipped = 0;
    for (g, (_, _, target)) in gen.iter().zip(&batch.genuine) {
        let lp = g.log_probs.expect("spelling requested");
        let rows = tape.to_tensor(lp).to_rows();
        let out = ctc_loss(&rows, target, BLANK)?;
        if out.feasible {
            ctc.push((lp, out));
        } else {
            skipped += 1;
        }
    }
    let l_ctc = if ctc.is_empty() {
        0.0
    } else {
        ctc.iter().map(|(_, o)| o.loss).sum::<f64>() / ctc.len() as f64
    };
    let l_total = total_loss(cl.loss, tr.loss, l_ctc, &weights);
    if !l_total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }

    let scaled = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<f64>>();
    let mut seeds: Vec<(Var, Vec<f64>)> = Vec::new();
    for (i, g) in gen.iter().enumerate() {
        seeds.push((g.z_w, scaled(&cl.grad_w[i], weights.alpha)));
        seeds.push((g.z_u, scaled(&cl.grad_u[i], weights.alpha)));
        seeds.push((g.a_w, scaled(&tr.grad_w[i], weights.beta)));
        seeds.push((g.a_u, scaled(&tr.grad_pos[i], weights.beta)));
    }
    for (j, a) in att.iter().enumerate() {
        seeds.push((a.a_u, scaled(&tr.grad_neg[j], weights.beta)));
    }
    let ctc_scale = weights.gamma / ctc.len().max(1) as f64;
    for (lp, out) in &ctc {
        let flat: Vec<f64> = out.grad.iter().flatten().map(|x| x * ctc_scale).collect();
        seeds.push((*lp, flat));
    }
    let refs: Vec<(Var, &[f64])> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
    let grads = tape.backward(&refs);
    let mut store = model.params.zeros_like();
    grads.accumulate_params(&tape, &mut store);
    let losses = BatchLosses {
        l_cl: cl.loss,
        l_auth: tr.loss,
        l_ctc,
        l_total,
        ctc_skipped: skipped,
    };
    Ok((losses, store))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: BatchLosses,
}

/// Provenance of one optimizer step: genuine ids occupy columns `1..=N`,
/// their word-matched attackers columns `N+1..=2N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub genuine: Vec<String>,
    pub attackers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with fitted input normalization; extras `score_norm` and
    /// `threshold` hold the score standardization and decision threshold.
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
    pub batches: Vec<BatchRecord>,
    pub skipped_batches: usize,
    /// Every utterance id read by training or calibration.
    pub consumed: BTreeSet<String>,
}

impl TrainOutcome {
    pub fn threshold(&self) -> f64 {
        self.checkpoint
            .extra("threshold")
            .map_or(0.0, |t| t.values[0])
    }

    /// Mean `L_total` of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.losses {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.losses.l_total;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,epoch,l_cl,l_auth,l_ctc,l_total,ctc_skipped")?;
        for r in &self.losses {
            let l = &r.losses;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.epoch, l.l_cl, l.l_auth, l.l_ctc, l.l_total, l.ctc_skipped
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

fn prepared(model: &Model, corpus: &Corpus, i: usize) -> Result<(Tensor, Tensor)> {
    model.prepare_pairs(&corpus.features[i])
}

/// Trains the model for `target`: its train-split utterances are genuine,
/// every other user's train-split utterances are the attacker pool.
pub fn train_user(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    splits: &[UserSplit],
    target: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t_idx = splits
        .iter()
        .position(|s| s.user == target)
        .ok_or_else(|| Error::Data(format!("unknown user {target}")))?;
    let genuine = &splits[t_idx].train;
    if genuine.is_empty() {
        return Err(Error::Data(format!(
            "user {target} has no training utterances"
        )));
    }
    let attackers: Vec<usize> = splits
        .iter()
        .filter(|s| s.user != target)
        .flat_map(|s| s.train.iter().copied())
        .collect();
    if attackers.is_empty() {
        return Err(Error::Data("training needs at least one other user".into()));
    }
    let mut by_word: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &attackers {
        by_word
            .entry(corpus.entries[i].word.as_str())
            .or_default()
            .push(i);
    }

    let mut model = Model::new(
        cfg.model.clone(),
        derive_seed(&[cfg.seed, 10, t_idx as u64]),
    )?;
    let pool: Vec<usize> = genuine.iter().chain(&attackers).copied().collect();
    let windows = || pool.iter().flat_map(|&i| corpus.features[i].iter());
    model.norm_w = FeatureNorm::fit(
        windows().map(|f| f.mel_patch.as_slice()),
        cfg.model.whisper_dim,
    )?;
    model.norm_u = FeatureNorm::fit(
        windows().map(|f| f.ar_coeffs.as_slice()),
        cfg.model.ultra_dim,
    )?;

    let mut cache: BTreeMap<usize, (Tensor, Tensor)> = BTreeMap::new();
    for &i in &pool {
        cache.insert(i, prepared(&model, corpus, i)?);
    }
    let mut consumed: BTreeSet<String> = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 11, t_idx as u64]));
    let mut velocity = model.params.zeros_like();
    let (mut losses, mut batches, mut skipped_batches) = (Vec::new(), Vec::new(), 0);
    let tc = cfg.train;
    for epoch in 0..tc.epochs {
        let mut order = genuine.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_n) {
            let mut matched = Vec::with_capacity(chunk.len());
            for &g in chunk {
                let word = corpus.entries[g].word.as_str();
                match by_word.get(word).and_then(|c| c.choose(&mut rng)) {
                    Some(&a) => matched.push(a),
                    None => break,
                }
            }
            if matched.len() < chunk.len() {
                log::warn!("{target}: no word-matched attacker for a batch; skipping it");
                skipped_batches += 1;
                continue;
            }
            let mut batch = TrainBatch::default();
            for &g in chunk {
                let (xw, xu) = jittered(&cache[&g], tc.input_noise, &mut rng)?;
                batch
                    .genuine
                    .push((xw, xu, word_labels(&corpus.entries[g].word)?));
            }
            for &a in &matched {
                batch
                    .attackers
                    .push(jittered(&cache[&a], tc.input_noise, &mut rng)?);
            }
            let (l, mut grads) = batch_objective(&model, &batch, &cfg.loss)?;
            if tc.weight_decay > 0.0 {
                for (g, p) in grads.iter_mut().zip(&model.params.tensors) {
                    for (gi, w) in g.iter_mut().zip(&p.values) {
                        *gi += tc.weight_decay * w;
                    }
                }
            }
            clip(&mut grads, tc.clip_norm);
            for ((p, v), g) in model
                .params
                .tensors
                .iter_mut()
                .zip(&mut velocity)
                .zip(&grads)
            {
                for ((w, vi), gi) in p.values.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = tc.momentum * *vi + gi;
                    *w -= tc.lr * *vi;
                }
            }
            let step = losses.len();
            losses.push(LossRow {
                step,
                epoch,
                losses: l,
            });
            let ids = |ix: &[usize]| -> Vec<String> {
                ix.iter()
                    .map(|&i| corpus.entries[i].utterance_id.clone())
                    .collect()
            };
            let record = BatchRecord {
                step,
                genuine: ids(chunk),
                attackers: ids(&matched),
            };
            consumed.extend(record.genuine.iter().cloned());
            consumed.extend(record.attackers.iter().cloned());
            batches.push(record);
            log::debug!(
                "{target} epoch {epoch} step {step}: L_total {:.5}",
                l.l_total
            );
        }
    }
    let cal = calibrate_user(&model, corpus, genuine, &attackers, cfg.eval.score_mode)?;
    consumed.extend(pool.iter().map(|&i| corpus.entries[i].utterance_id.clone()));
    let mut checkpoint = Checkpoint::new(model);
    checkpoint.set_extra("threshold", Tensor::new(vec![1], vec![cal.threshold.thr])?);
    checkpoint.set_extra(
        "score_norm",
        Tensor::new(vec![2], vec![cal.norm.mean, cal.norm.std])?,
    );
    Ok(TrainOutcome {
        checkpoint,
        losses,
        batches,
        skipped_batches,
        consumed,
    })
}

fn jittered(x: &(Tensor, Tensor), std: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let mut out = x.clone();
    if std > 0.0 {
        let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for v in out.0.values.iter_mut().chain(out.1.values.iter_mut()) {
            *v += noise.sample(rng);
        }
    }
    Ok(out)
}

/// Rescales the whole gradient when its global norm exceeds `max_norm`.
fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}
