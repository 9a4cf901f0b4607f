use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::filter::{isolate_ultrasonic, lowpass_whisper};
use crate::dsp::{ProbeSignal, FINE_SEARCH_RADIUS, FINE_SYMBOLS};
use crate::error::{Error, Result};

/// Received audio snapped to probe symbol boundaries and split into the
/// ultrasonic (48 kHz) and whisper (24 kHz) streams.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCapture {
    pub ultrasonic: Vec<f64>,
    pub whisper: Vec<f64>,
    /// Base lag the fine search was centred on.
    pub coarse_lag: usize,
    /// Refined lag, within the fine search radius of `coarse_lag`.
    pub fine_lag: usize,
    /// First sample of the aligned streams in the original capture
    /// (`fine_lag` reduced modulo one symbol).
    pub start: usize,
    pub num_symbols: usize,
    pub symbol_len: usize,
    /// Fine-alignment quality in (0, 1]; 1 means zero residual phase slope.
    pub quality: f64,
}

impl AlignedCapture {
    /// Recovered symbol delay modulo one symbol.
    pub fn delay(&self) -> usize {
        self.fine_lag % self.symbol_len
    }
}

/// Lag in `[0, N)` maximizing the normalized cross-correlation of one
/// transmitted symbol against the first two received symbols.
///
/// `rx` is expected to be ultrasonic-band content (see [`isolate_ultrasonic`]).
pub fn coarse_align(probe: &ProbeSignal, rx: &[f64]) -> Result<usize> {
    let n = probe.len();
    if rx.len() < 2 * n {
        return Err(Error::TooShort {
            needed: 2 * n,
            got: rx.len(),
        });
    }
    let p_norm = probe.samples.iter().map(|v| v * v).sum::<f64>().sqrt();

    // running window energy over rx[lag..lag+n]
    let mut energy: f64 = rx[..n].iter().map(|v| v * v).sum();
    let mut best: Option<(usize, f64)> = None;
    for lag in 0..n {
        if lag > 0 {
            let out = rx[lag - 1];
            let inc = rx[lag + n - 1];
            energy += inc * inc - out * out;
        }
        let dot: f64 = probe
            .samples
            .iter()
            .zip(&rx[lag..lag + n])
            .map(|(a, b)| a * b)
            .sum();
        let denom = p_norm * energy.max(0.0).sqrt();
        if denom <= 0.0 {
            continue;
        }
        let corr = dot / denom;
        if best.is_none_or(|(_, c)| corr > c) {
            best = Some((lag, corr));
        }
    }
    match best {
        Some((lag, c)) if c > 0.0 => Ok(lag),
        _ => Err(Error::AbsentProbe),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineAlignment {
    pub lag: usize,
    /// Residual delay in samples implied by the phase slope at `lag`.
    pub residual: f64,
    pub quality: f64,
}

/// Integer refinement of `coarse_lag` over `±25` samples: at each
/// candidate, the received symbol's phase against the transmitted spectrum
/// is differenced across adjacent active subcarriers and the candidate with
/// the smallest absolute mean phase slope wins. The differences are
/// accumulated over up to [`FINE_SYMBOLS`] consecutive symbols when the
/// capture holds them.
pub fn fine_align(probe: &ProbeSignal, rx: &[f64], coarse_lag: usize) -> Result<FineAlignment> {
    let n = probe.len();
    let radius = FINE_SEARCH_RADIUS;
    if coarse_lag < radius || coarse_lag + radius + n > rx.len() {
        return Err(Error::Data(format!(
            "fine search window {}..{} out of bounds for capture of {} samples",
            coarse_lag as isize - radius as isize,
            coarse_lag + radius + n,
            rx.len()
        )));
    }
    let tx = probe.active_spectrum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];

    let symbols = ((rx.len() - coarse_lag - radius) / n).clamp(1, FINE_SYMBOLS);

    let mut best: Option<(usize, f64, f64)> = None;
    for lag in coarse_lag - radius..=coarse_lag + radius {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut mag = 0.0;
        for m in 0..symbols {
            let start = lag + m * n;
            for (b, &s) in buf.iter_mut().zip(&rx[start..start + n]) {
                *b = Complex64::new(s, 0.0);
            }
            fft.process(&mut buf);
            let mut prev: Option<(usize, Complex64)> = None;
            for (&k, &t) in probe.active_bins.iter().zip(&tx) {
                let z = buf[k] * t.conj();
                if let Some((pk, pz)) = prev {
                    if pk + 1 == k {
                        acc += z * pz.conj();
                        mag += z.norm() * pz.norm();
                    }
                }
                prev = Some((k, z));
            }
        }
        if mag <= 0.0 {
            return Err(Error::AbsentProbe);
        }
        let slope = acc.arg().abs();
        let better = match best {
            None => true,
            Some((bl, bs, _)) => {
                slope < bs || (slope == bs && lag.abs_diff(coarse_lag) < bl.abs_diff(coarse_lag))
            }
        };
        if better {
            best = Some((lag, slope, acc.arg()));
        }
    }
    let (lag, _, signed) = best.expect("search range is nonempty");
    // phase advances by -2*pi*d/N per bin for a residual delay d
    let residual = -signed * n as f64 / (2.0 * std::f64::consts::PI);
    Ok(FineAlignment {
        lag,
        residual,
        quality: 1.0 / (1.0 + residual.abs()),
    })
}

/// Full alignment of a raw 48 kHz capture: band split, coarse and fine
/// alignment, then both streams cut at the same symbol boundary.
pub fn align_capture(probe: &ProbeSignal, rx: &[f64]) -> Result<AlignedCapture> {
    let n = probe.len();
    let ultra = isolate_ultrasonic(rx)?;
    let coarse = coarse_align(probe, &ultra)?;
    // keep the whole ±radius search inside the capture
    let base = if coarse < FINE_SEARCH_RADIUS {
        coarse + n
    } else {
        coarse
    };
    let fine = fine_align(probe, &ultra, base)?;
    let start = fine.lag % n;
    let num_symbols = (rx.len() - start) / n;
    let end = start + num_symbols * n;

    let low = lowpass_whisper(rx)?;
    let whisper: Vec<f64> = low[start..end].iter().step_by(2).copied().collect();

    Ok(AlignedCapture {
        ultrasonic: ultra[start..end].to_vec(),
        whisper,
        coarse_lag: base,
        fine_lag: fine.lag,
        start,
        num_symbols,
        symbol_len: n,
        quality: fine.quality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{generate_probe, SAMPLE_RATE, SYMBOL_LEN, ULTRASONIC_BAND};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn probe() -> ProbeSignal {
        generate_probe(7, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND).unwrap()
    }

    /// Exhaustive normalized-correlation argmax, written independently of
    /// the running-energy implementation.
    fn correlation_oracle(p: &ProbeSignal, rx: &[f64]) -> usize {
        let n = p.len();
        (0..n)
            .map(|lag| {
                let w = &rx[lag..lag + n];
                let dot: f64 = w.iter().zip(&p.samples).map(|(a, b)| a * b).sum();
                let e: f64 = w.iter().map(|v| v * v).sum();
                (lag, dot / e.sqrt())
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    fn noisy(x: &[f64], snr_db: f64, seed: u64) -> Vec<f64> {
        let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, sigma).unwrap();
        x.iter().map(|&v| v + dist.sample(&mut rng)).collect()
    }

    #[test]
    fn coarse_recovers_constructed_delay() {
        let p = probe();
        let rx = p.stream(3 * 2046, 500);
        assert_eq!(coarse_align(&p, &rx).unwrap(), 500);
    }

    #[test]
    fn coarse_reports_lag_modulo_symbol() {
        let p = probe();
        let rx = p.stream(3 * 2046, 2053);
        assert_eq!(correlation_oracle(&p, &rx), 7);
        assert_eq!(coarse_align(&p, &rx).unwrap(), 7);
    }

    #[test]
    fn coarse_with_noise_agrees_with_oracle() {
        let p = probe();
        let rx = noisy(&p.stream(3 * 2046, 500), 10.0, 11);
        assert_eq!(correlation_oracle(&p, &rx), 500);
        assert_eq!(coarse_align(&p, &rx).unwrap(), 500);
    }

    #[test]
    fn coarse_errors() {
        let p = probe();
        assert!(matches!(
            coarse_align(&p, &[0.0; 100]),
            Err(Error::TooShort { .. })
        ));
        assert!(matches!(
            coarse_align(&p, &vec![0.0; 5000]),
            Err(Error::AbsentProbe)
        ));
    }

    #[test]
    fn fine_zero_offset() {
        let p = probe();
        let rx = p.stream(3 * 2046, 500);
        let f = fine_align(&p, &rx, 500).unwrap();
        assert_eq!(f.lag, 500);
        assert!(f.residual.abs() < 1e-6);
        assert!((f.quality - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fine_corrects_small_offset() {
        let p = probe();
        let rx = p.stream(3 * 2046, 503);
        assert_eq!(fine_align(&p, &rx, 500).unwrap().lag, 503);
        let rx = p.stream(3 * 2046, 478);
        assert_eq!(fine_align(&p, &rx, 500).unwrap().lag, 478);
    }

    #[test]
    fn fine_clamps_out_of_range_offset() {
        let p = probe();
        let rx = p.stream(3 * 2046, 530);
        let f = fine_align(&p, &rx, 500).unwrap();
        assert_eq!(f.lag, 525);
        assert!((f.residual - 5.0).abs() < 1e-6);
        assert!(f.quality < 0.2);
    }

    #[test]
    fn fine_out_of_bounds_is_error() {
        let p = probe();
        let rx = p.stream(3 * 2046, 10);
        assert!(fine_align(&p, &rx, 10).is_err());
        assert!(fine_align(&p, &rx, 3 * 2046 - 2046).is_err());
    }

    #[test]
    fn full_alignment_splits_streams() {
        let p = probe();
        let rx = noisy(&p.stream(12 * 2046, 3000), 20.0, 5);
        let cap = align_capture(&p, &rx).unwrap();
        assert_eq!(cap.delay(), 3000 % 2046);
        assert_eq!(cap.ultrasonic.len(), cap.num_symbols * 2046);
        assert_eq!(cap.whisper.len(), cap.num_symbols * 1023);
        assert!(cap.fine_lag.abs_diff(cap.coarse_lag) <= 25);
        assert_eq!(cap.num_symbols, 11);
    }

    #[test]
    fn full_alignment_near_zero_lag() {
        let p = probe();
        for k in [0, 3, 24, 2040] {
            let rx = p.stream(6 * 2046, k);
            assert_eq!(align_capture(&p, &rx).unwrap().delay(), k);
        }
    }
}
