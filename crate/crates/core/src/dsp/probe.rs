use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{config, Result};

/// One OFDM transmit symbol: flat amplitude on every bin inside the active
/// band, pseudo-random phases, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub active_band: (f64, f64),
    /// DFT bin indices (1..n/2) carrying a subcarrier.
    pub active_bins: Vec<usize>,
    /// Phase of each active bin before peak normalization, radians.
    pub subcarrier_phases: Vec<f64>,
    pub seed: u64,
}

impl ProbeSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Continuous transmission of the probe with a symbol boundary at
    /// `boundary` (the stream also extends backwards in time).
    pub fn stream(&self, len: usize, boundary: usize) -> Vec<f64> {
        let n = self.samples.len();
        let shift = n - boundary % n;
        (0..len).map(|i| self.samples[(i + shift) % n]).collect()
    }

    /// DFT of the transmitted symbol on the active bins.
    pub fn active_spectrum(&self) -> Vec<Complex64> {
        let n = self.samples.len();
        let mut buf: Vec<Complex64> = self
            .samples
            .iter()
            .map(|&s| Complex64::new(s, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        self.active_bins.iter().map(|&k| buf[k]).collect()
    }
}

pub fn generate_probe(
    seed: u64,
    n_sym: usize,
    sample_rate: u32,
    band: (f64, f64),
) -> Result<ProbeSignal> {
    let (f_lo, f_hi) = band;
    let nyquist = sample_rate as f64 / 2.0;
    if n_sym < 2 || !n_sym.is_multiple_of(2) {
        return config(format!("probe length {n_sym} must be even and at least 2"));
    }
    if !(f_lo > 0.0 && f_hi < nyquist && f_lo <= f_hi) {
        return config(format!(
            "band [{f_lo}, {f_hi}] Hz must lie inside (0, {nyquist})"
        ));
    }
    let bin_hz = sample_rate as f64 / n_sym as f64;
    let active_bins: Vec<usize> = (1..n_sym / 2)
        .filter(|&k| {
            let f = k as f64 * bin_hz;
            f >= f_lo && f <= f_hi
        })
        .collect();
    if active_bins.is_empty() {
        return config(format!(
            "band [{f_lo}, {f_hi}] Hz contains no bin at {bin_hz:.3} Hz resolution"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subcarrier_phases: Vec<f64> = active_bins
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();

    let mut spectrum = vec![Complex64::new(0.0, 0.0); n_sym];
    for (&k, &phase) in active_bins.iter().zip(&subcarrier_phases) {
        let c = Complex64::from_polar(1.0, phase);
        spectrum[k] = c;
        spectrum[n_sym - k] = c.conj();
    }
    FftPlanner::new()
        .plan_fft_inverse(n_sym)
        .process(&mut spectrum);
    let mut samples: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    for s in &mut samples {
        *s /= peak;
    }

    Ok(ProbeSignal {
        samples,
        sample_rate,
        active_band: band,
        active_bins,
        subcarrier_phases,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{SAMPLE_RATE, SYMBOL_LEN, ULTRASONIC_BAND};

    fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        FftPlanner::new()
            .plan_fft_forward(x.len())
            .process(&mut buf);
        buf.iter().map(|c| c.norm()).collect()
    }

    #[test]
    fn default_probe_shape_and_band() {
        let p = generate_probe(7, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND).unwrap();
        assert_eq!(p.len(), 2046);
        assert!((p.duration_secs() - 0.042625).abs() < 1e-6);
        let peak = p.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        assert!((peak - 1.0).abs() < 1e-12);

        let mag = magnitude_spectrum(&p.samples);
        let bin_hz = 48000.0 / 2046.0;
        let (mut inb, mut n_in, mut out_max) = (0.0, 0, 0.0f64);
        for (k, &m) in mag.iter().enumerate().take(1024) {
            let f = k as f64 * bin_hz;
            if (17500.0..=23000.0).contains(&f) {
                inb += m;
                n_in += 1;
            } else {
                out_max = out_max.max(m);
            }
        }
        let mean_in = inb / n_in as f64;
        assert!(20.0 * (mean_in / out_max.max(1e-300)).log10() >= 40.0);
    }

    #[test]
    fn single_bin_band_is_a_sinusoid() {
        let k = 800;
        let f = k as f64 * 48000.0 / 2046.0;
        let p = generate_probe(7, SYMBOL_LEN, SAMPLE_RATE, (f - 1.0, f + 1.0)).unwrap();
        assert_eq!(p.active_bins, vec![k]);
        let phase = p.subcarrier_phases[0];
        let wave: Vec<f64> = (0..2046)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / 2046.0 + phase).cos())
            .collect();
        let peak = wave.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        for (n, (&s, &w)) in p.samples.iter().zip(&wave).enumerate() {
            assert!((s - w / peak).abs() < 1e-9, "sample {n}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_probe(7, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND).unwrap();
        let b = generate_probe(7, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND).unwrap();
        let c = generate_probe(8, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(generate_probe(1, 2046, 48000, (100.0, 110.0)).is_err());
        assert!(generate_probe(1, 2047, 48000, ULTRASONIC_BAND).is_err());
        assert!(generate_probe(1, 2046, 48000, (17500.0, 30000.0)).is_err());
    }

    #[test]
    fn stream_places_boundary() {
        let p = generate_probe(3, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND).unwrap();
        let s = p.stream(3 * 2046, 500);
        assert_eq!(&s[500..500 + 2046], &p.samples[..]);
        assert_eq!(s[499], p.samples[2045]);
    }
}
