//! Synthetic acoustic world.
//!
//! Each user gets an ear-canal impulse response, a per-letter articulation
//! map that perturbs it while a letter is being mouthed, and a whisper voice
//! made of per-letter formant resonators. An utterance is the continuous
//! probe stream convolved with the frame-wise impulse response, passed
//! through a fixed zero-phase tilt, plus band-limited whisper and white
//! noise.

mod dataset;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{sosfiltfilt, Butterworth, FilterKind, ProbeSignal, FILTER_ORDER, SAMPLE_RATE};
use crate::error::{config, Error, Result};

pub use dataset::{
    derive_seed, read_manifest, synth_corpus, synth_dataset, write_manifest, DatasetSpec,
    ManifestEntry,
};

pub const IR_TAPS: usize = 64;
pub const LEAD_FRAMES: usize = 6;
pub const TAIL_FRAMES: usize = 6;
pub const FRAMES_PER_LETTER: usize = 3;
/// Minimum pairwise L2 distance between users' base impulse responses.
pub const MIN_IR_DISTANCE: f64 = 0.1;

const REFLECTION_STD: f64 = 0.25;
const REFLECTION_DECAY: f64 = 6.0;
const GESTURE_STD: f64 = 0.06;
/// Re-seating jitter relative to the reflection envelope at each tap.
const SESSION_JITTER: f64 = 0.1;
const REFLECTION_GAIN: f64 = 0.4;
const WHISPER_RMS: f64 = 0.05;
/// Whisper band edge; below the 12 kHz analysis cutoff so its transition
/// band stays clear of the ultrasonic probe and the analysis filter.
const WHISPER_SYNTH_CUTOFF: f64 = 10_000.0;
/// Zero-phase 3-tap kernel standing in for the transducer's high-band roll-off.
const TILT: [f64; 3] = [0.2, 0.6, 0.2];
/// Seed of the letter-to-formant table shared by every synthetic speaker.
const LANGUAGE_SEED: u64 = 0x5151_0003;

/// One resonance: centre frequency and bandwidth in Hz, linear gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    pub seed: u64,
    /// Unit-energy ear-canal response.
    pub base_ir: Vec<f64>,
    /// Per-letter additive tap perturbation at full articulation.
    pub articulation_map: Vec<Vec<f64>>,
    /// Per-letter formant set of this speaker's whisper.
    pub whisper_voice: Vec<[Formant; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub rx_audio: Vec<f64>,
    pub word: String,
    pub user_id: String,
    pub session_id: String,
    /// Sample index of the first utterance frame's symbol boundary.
    pub true_delay: usize,
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    /// `(letter, start, end)` sample spans, end exclusive.
    pub letter_spans: Vec<(char, usize, usize)>,
}

/// Frames covered by a word: lead-in, three per letter, tail.
pub fn utterance_frames(word_len: usize) -> usize {
    LEAD_FRAMES + FRAMES_PER_LETTER * word_len + TAIL_FRAMES
}

fn unit_energy(v: &mut [f64]) {
    let e = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= e);
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn draw_ir(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ir = vec![0.0; IR_TAPS];
    ir[0] = 1.0;
    for (j, tap) in ir.iter_mut().enumerate().skip(1) {
        let z: f64 = StandardNormal.sample(rng);
        *tap = REFLECTION_STD * (-(j as f64) / REFLECTION_DECAY).exp() * z;
    }
    unit_energy(&mut ir);
    ir
}

fn formant(rng: &mut ChaCha8Rng, lo: f64, hi: f64, bandwidth: f64, gain: f64) -> Formant {
    Formant {
        freq: rng.random_range(lo..hi),
        bandwidth,
        gain,
    }
}

/// Letter-to-formant table shared by all speakers.
fn language() -> Vec<[Formant; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(LANGUAGE_SEED);
    (0..26)
        .map(|_| {
            let f1 = formant(&mut rng, 250.0, 900.0, 90.0, 1.0);
            let f2 = formant(&mut rng, 900.0, 2600.0, 120.0, 0.7);
            let f3 = formant(&mut rng, 2600.0, 4200.0, 180.0, 0.4);
            // frication band, strength varies by letter
            let gain = rng.random_range(0.0..0.8);
            let fric = formant(&mut rng, 4500.0, 9000.0, 900.0, gain);
            [f1, f2, f3, fric]
        })
        .collect()
}

fn build_profile(user_id: &str, seed: u64, rng: &mut ChaCha8Rng, base_ir: Vec<f64>) -> UserProfile {
    let articulation_map = (0..26)
        .map(|_| {
            let mut d = vec![0.0; IR_TAPS];
            for (j, tap) in d.iter_mut().enumerate().skip(1) {
                let z: f64 = StandardNormal.sample(rng);
                *tap = GESTURE_STD * (-(j as f64) / (2.0 * REFLECTION_DECAY)).exp() * z;
            }
            d
        })
        .collect();
    let scale = rng.random_range(0.92..1.08);
    let whisper_voice = language()
        .into_iter()
        .map(|set| {
            set.map(|f| Formant {
                freq: f.freq * scale * rng.random_range(0.97..1.03),
                ..f
            })
        })
        .collect();
    UserProfile {
        user_id: user_id.to_string(),
        seed,
        base_ir,
        articulation_map,
        whisper_voice,
    }
}

/// Deterministic profile from a seed.
pub fn synth_user(user_id: &str, seed: u64) -> UserProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ir = draw_ir(&mut rng);
    build_profile(user_id, seed, &mut rng, ir)
}

/// Profiles for several users; a base response closer than
/// [`MIN_IR_DISTANCE`] to an earlier user's is redrawn from the same stream.
pub fn synth_users(ids_and_seeds: &[(String, u64)]) -> Vec<UserProfile> {
    let mut out: Vec<UserProfile> = Vec::with_capacity(ids_and_seeds.len());
    for (id, seed) in ids_and_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let mut ir = draw_ir(&mut rng);
        while out
            .iter()
            .any(|p| l2_distance(&p.base_ir, &ir) <= MIN_IR_DISTANCE)
        {
            ir = draw_ir(&mut rng);
        }
        out.push(build_profile(id, *seed, &mut rng, ir));
    }
    out
}

/// Two-pole resonator with unit peak gain, applied in place.
fn resonate(x: &[f64], f: &Formant, out: &mut [f64]) {
    let fs = SAMPLE_RATE as f64;
    let r = (-PI * f.bandwidth / fs).exp();
    let theta = 2.0 * PI * f.freq / fs;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let norm = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
    let (mut y1, mut y2) = (0.0, 0.0);
    for (o, &v) in out.iter_mut().zip(x) {
        let y = norm * v + a1 * y1 + a2 * y2;
        *o += f.gain * y;
        y2 = y1;
        y1 = y;
    }
}

/// Placement for one session: the base response shifts slightly when the
/// earbud is re-seated.
pub fn session_ir(user: &UserProfile, session_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
    let mut ir = user.base_ir.clone();
    for (j, tap) in ir.iter_mut().enumerate().skip(1) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *tap += SESSION_JITTER * REFLECTION_STD * (-(j as f64) / REFLECTION_DECAY).exp() * z;
    }
    unit_energy(&mut ir);
    ir
}

/// Knobs of a single take.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TakeParams {
    pub session_seed: u64,
    pub take_seed: u64,
    /// `None` disables the noise term.
    pub snr_db: Option<f64>,
}

pub fn synth_utterance(
    probe: &ProbeSignal,
    user: &UserProfile,
    word: &str,
    session_id: &str,
    take: TakeParams,
) -> Result<SynthUtterance> {
    synth_utterance_parts(probe, user, word, session_id, take).map(|(u, _)| u)
}

/// Additive components of a capture, for ground-truth checks.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceParts {
    /// Tilted ultrasonic reflection.
    pub reflection: Vec<f64>,
    /// Band-limited whisper.
    pub whisper: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Like [`synth_utterance`], also returning the separate components.
pub fn synth_utterance_parts(
    probe: &ProbeSignal,
    user: &UserProfile,
    word: &str,
    session_id: &str,
    take: TakeParams,
) -> Result<(SynthUtterance, UtteranceParts)> {
    if word.is_empty() {
        return config("cannot synthesize an empty word");
    }
    let letters: Vec<usize> = word
        .bytes()
        .map(|b| match b {
            b'a'..=b'z' => Ok((b - b'a') as usize),
            _ => Err(Error::Data(format!("word {word:?} is not lowercase a-z"))),
        })
        .collect::<Result<_>>()?;
    if let Some(snr) = take.snr_db {
        if !snr.is_finite() {
            return config("finite snr_db required; use None for a noiseless take");
        }
    }
    let n = probe.len();
    let frames = utterance_frames(letters.len());
    let len = (frames + 2) * n;
    let mut rng = ChaCha8Rng::seed_from_u64(take.take_seed);
    let k = rng.random_range(0..2 * n);

    // per-frame articulation weight and letter, relative to the boundary at k
    let rest = session_ir(user, take.session_seed);
    let envelope = [0.6, 1.0, 0.6];
    let strength: Vec<f64> = letters.iter().map(|_| rng.random_range(0.9..1.1)).collect();
    let frame_ir = |f: isize| -> Vec<f64> {
        let mut ir = rest.clone();
        if f >= LEAD_FRAMES as isize {
            let rel = f as usize - LEAD_FRAMES;
            let (li, phase) = (rel / FRAMES_PER_LETTER, rel % FRAMES_PER_LETTER);
            if li < letters.len() {
                let w = envelope[phase] * strength[li];
                for (t, d) in ir.iter_mut().zip(&user.articulation_map[letters[li]]) {
                    *t += w * d;
                }
            }
        }
        ir
    };
    let frame_of = |i: usize| (i as isize - k as isize).div_euclid(n as isize);

    // transmit stream starting IR_TAPS samples before the capture
    let tx = probe.stream(len + IR_TAPS, k + IR_TAPS);
    let mut refl = vec![0.0; len];
    let mut cached: (isize, Vec<f64>) = (isize::MIN, Vec::new());
    for (i, out) in refl.iter_mut().enumerate() {
        let f = frame_of(i);
        if f != cached.0 {
            cached = (f, frame_ir(f));
        }
        let ir = &cached.1;
        let mut acc = 0.0;
        for (j, h) in ir.iter().enumerate() {
            acc += h * tx[i + IR_TAPS - j];
        }
        *out = REFLECTION_GAIN * acc;
    }
    // zero-phase tilt
    let tilted: Vec<f64> = (0..len)
        .map(|i| {
            let at = |j: isize| refl.get(j as usize).copied().unwrap_or(0.0);
            let i = i as isize;
            TILT[0] * at(i - 1) + TILT[1] * at(i) + TILT[2] * at(i + 1)
        })
        .collect();

    let (whisper, letter_spans) = synth_whisper(user, &letters, k, len, n, &mut rng)?;
    let mut noise = vec![0.0; len];
    if let Some(snr) = take.snr_db {
        let p_refl = tilted.iter().map(|v| v * v).sum::<f64>() / len as f64;
        let sigma = (p_refl / 10f64.powf(snr / 10.0)).sqrt();
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        noise.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    }
    let rx: Vec<f64> = (0..len)
        .map(|i| tilted[i] + whisper[i] + noise[i])
        .collect();
    let utt = SynthUtterance {
        rx_audio: rx,
        word: word.to_string(),
        user_id: user.user_id.clone(),
        session_id: session_id.to_string(),
        true_delay: k,
        snr_db: take.snr_db,
        letter_spans,
    };
    Ok((
        utt,
        UtteranceParts {
            reflection: tilted,
            whisper,
            noise,
        },
    ))
}

type Whisper = (Vec<f64>, Vec<(char, usize, usize)>);

/// Formant-filtered noise per letter with a raised-cosine envelope,
/// low-passed below the ultrasonic band.
fn synth_whisper(
    user: &UserProfile,
    letters: &[usize],
    k: usize,
    len: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Whisper> {
    let mut out = vec![0.0; len];
    let mut spans = Vec::with_capacity(letters.len());
    let seg = FRAMES_PER_LETTER * n;
    for (i, &c) in letters.iter().enumerate() {
        let start = k + (LEAD_FRAMES + i * FRAMES_PER_LETTER) * n;
        let end = start + seg;
        let src: Vec<f64> = (0..seg).map(|_| StandardNormal.sample(rng)).collect();
        let mut voiced = vec![0.0; seg];
        for f in &user.whisper_voice[c] {
            resonate(&src, f, &mut voiced);
        }
        let rms = (voiced.iter().map(|v| v * v).sum::<f64>() / seg as f64).sqrt();
        for (j, v) in voiced.iter().enumerate() {
            let env = 0.5 - 0.5 * (2.0 * PI * (j as f64 + 0.5) / seg as f64).cos();
            out[start + j] += WHISPER_RMS * env * v / rms;
        }
        spans.push(((b'a' + c as u8) as char, start, end));
    }
    let lp = Butterworth::new(
        FilterKind::Lowpass,
        FILTER_ORDER,
        WHISPER_SYNTH_CUTOFF,
        SAMPLE_RATE as f64,
    )?;
    Ok((sosfiltfilt(&lp, &out)?, spans))
}
