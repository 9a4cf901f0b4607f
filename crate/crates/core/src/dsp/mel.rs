use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dsp::filter::lowpass_whisper;
use crate::dsp::{window_count, FRAMES_PER_WINDOW, WHISPER_FRAME, WINDOW_STRIDE};
use crate::error::{config, Result};

/// Floor applied to mel energies before the natural log.
pub const MEL_ENERGY_FLOOR: f64 = 1e-10;
pub const LOG_FLOOR: f64 = -23.025850929940457;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank over the one-sided spectrum.
#[derive(Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_fft: usize,
    pub sample_rate: f64,
    /// `n_mels` rows of `n_fft / 2 + 1` weights.
    pub weights: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFilterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFilterbank")
            .field("n_mels", &self.n_mels)
            .field("n_fft", &self.n_fft)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl MelFilterbank {
    pub fn new(
        n_mels: usize,
        n_fft: usize,
        sample_rate: f64,
        fmin: f64,
        fmax: f64,
    ) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 {
            return config("mel filterbank needs n_mels >= 1 and n_fft >= 2");
        }
        if !(fmin >= 0.0 && fmax > fmin && fmax <= sample_rate / 2.0) {
            return config(format!(
                "mel range [{fmin}, {fmax}] invalid for fs={sample_rate}"
            ));
        }
        let n_bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate / n_fft as f64;
                        let up = (f - lo) / (c - lo);
                        let down = (hi - f) / (hi - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            n_mels,
            n_fft,
            sample_rate,
            weights,
            fft,
        })
    }

    /// Whisper-stream bank: 0–12 kHz at 24 kHz with one-symbol frames.
    pub fn whisper(n_mels: usize) -> Result<Self> {
        Self::new(n_mels, WHISPER_FRAME, 24_000.0, 0.0, 12_000.0)
    }

    /// Log mel energies of one rectangular-window frame of `n_fft` samples.
    pub fn log_mel(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        self.weights
            .iter()
            .map(|w| {
                let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(MEL_ENERGY_FLOOR).ln()
            })
            .collect()
    }
}

/// Non-overlapping (hop == n_fft) log-mel frames of a 24 kHz whisper stream,
/// row-major `frames × n_mels`.
pub fn log_mel_frames(bank: &MelFilterbank, whisper: &[f64]) -> Vec<Vec<f64>> {
    whisper
        .chunks_exact(bank.n_fft)
        .map(|f| bank.log_mel(f))
        .collect()
}

/// Whisper features of a symbol-aligned 48 kHz capture: 12 kHz lowpass,
/// decimation by two, log-mel frames grouped into 10-frame windows with a
/// 2-frame stride. Each patch is flattened row-major (`10 × n_mels`).
pub fn whisper_features(aligned_audio: &[f64], bank: &MelFilterbank) -> Result<Vec<Vec<f64>>> {
    if aligned_audio.len() < 2 * bank.n_fft {
        return Ok(Vec::new());
    }
    let low = lowpass_whisper(aligned_audio)?;
    let decimated: Vec<f64> = low.iter().step_by(2).copied().collect();
    Ok(group_patches(&log_mel_frames(bank, &decimated)))
}

pub(crate) fn group_patches(frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..window_count(frames.len()))
        .map(|w| frames[w * WINDOW_STRIDE..w * WINDOW_STRIDE + FRAMES_PER_WINDOW].concat())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn silence_gives_log_floor_patch() {
        let bank = MelFilterbank::whisper(64).unwrap();
        let patches = whisper_features(&vec![0.0; 2046 * 10], &bank).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].len(), 640);
        assert!(patches[0].iter().all(|&v| v == LOG_FLOOR));
        assert!((LOG_FLOOR - MEL_ENERGY_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn tone_energy_lands_in_covering_bin() {
        let bank = MelFilterbank::whisper(64).unwrap();
        // oracle: the band whose triangle has the largest weight at 1 kHz
        let bin = (1000.0 * 1023.0 / 24000.0f64).round() as usize;
        let expect = (0..64)
            .max_by(|&a, &b| bank.weights[a][bin].total_cmp(&bank.weights[b][bin]))
            .unwrap();

        let audio: Vec<f64> = (0..2046 * 14)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 48000.0).sin())
            .collect();
        let patches = whisper_features(&audio, &bank).unwrap();
        assert_eq!(patches.len(), 3);
        for patch in &patches {
            for frame in patch.chunks(64) {
                let arg = frame
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert!(arg.abs_diff(expect) <= 1, "argmax {arg}, expected {expect}");
            }
        }
        // argmax is stable across every frame
        let args: Vec<usize> = patches
            .iter()
            .flat_map(|p| {
                p.chunks(64).map(|f| {
                    f.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .unwrap()
                        .0
                })
            })
            .collect();
        assert!(args.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn short_audio_is_empty() {
        let bank = MelFilterbank::whisper(64).unwrap();
        assert!(whisper_features(&[0.1; 100], &bank).unwrap().is_empty());
    }

    #[test]
    fn filterbank_has_no_empty_bands() {
        let bank = MelFilterbank::whisper(64).unwrap();
        for w in &bank.weights {
            assert!(w.iter().any(|&v| v > 0.0));
        }
    }
}
