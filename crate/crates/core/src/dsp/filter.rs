use std::f64::consts::PI;

use crate::dsp::{FILTER_ORDER, SAMPLE_RATE, ULTRASONIC_BAND, WHISPER_CUTOFF};
use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Lowpass,
    Highpass,
}

/// Normalized second-order section, `a0 == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state for a unit step in steady state.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z1 = self.b[2] - self.a[1] * g;
        let z0 = self.b[1] - self.a[0] * g + z1;
        [z0, z1]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        for s in x.iter_mut() {
            let input = *s;
            let y = self.b[0] * input + z[0];
            z[0] = self.b[1] * input - self.a[0] * y + z[1];
            z[1] = self.b[2] * input - self.a[1] * y;
            *s = y;
        }
    }
}

/// Digital Butterworth filter as a cascade of biquads (bilinear transform
/// with frequency prewarping).
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoff: f64,
    pub sample_rate: f64,
    pub sections: Vec<Biquad>,
}

impl Butterworth {
    pub fn new(kind: FilterKind, order: usize, cutoff: f64, sample_rate: f64) -> Result<Self> {
        if order == 0 || !order.is_multiple_of(2) {
            return config(format!(
                "Butterworth order {order} must be even and positive"
            ));
        }
        if !(cutoff > 0.0 && cutoff < sample_rate / 2.0) {
            return config(format!("cutoff {cutoff} Hz outside (0, fs/2)"));
        }
        let k = (PI * cutoff / sample_rate).tan();
        let k2 = k * k;
        let sections = (0..order / 2)
            .map(|i| {
                // s^2 + c s + 1 for each conjugate pole pair of the analog prototype
                let c = 2.0 * (PI * (2 * i + 1) as f64 / (2 * order) as f64).sin();
                let a0 = 1.0 + c * k + k2;
                let a = [2.0 * (k2 - 1.0) / a0, (1.0 - c * k + k2) / a0];
                let b = match kind {
                    FilterKind::Lowpass => [k2 / a0, 2.0 * k2 / a0, k2 / a0],
                    FilterKind::Highpass => [1.0 / a0, -2.0 / a0, 1.0 / a0],
                };
                Biquad { b, a }
            })
            .collect();
        Ok(Self {
            kind,
            order,
            cutoff,
            sample_rate,
            sections,
        })
    }

    /// Odd-extension length used at each edge by [`sosfiltfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Shortest input accepted by the zero-phase filter.
    pub fn warmup_len(&self) -> usize {
        self.pad_len() + 1
    }

    /// Complex frequency response magnitude at `freq` Hz (single pass).
    pub fn magnitude(&self, freq: f64) -> f64 {
        let w = 2.0 * PI * freq / self.sample_rate;
        let z1 = rustfft::num_complex::Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| {
                let num = s.b[0] + z1 * s.b[1] + z2 * s.b[2];
                let den = 1.0 + z1 * s.a[0] + z2 * s.a[1];
                (num / den).norm()
            })
            .product()
    }
}

/// Zero-phase forward-backward filtering with odd-extension padding and
/// steady-state initial conditions. Output length equals input length.
pub fn sosfiltfilt(filter: &Butterworth, x: &[f64]) -> Result<Vec<f64>> {
    let pad = filter.pad_len();
    if x.len() < filter.warmup_len() {
        return Err(Error::TooShort {
            needed: filter.warmup_len(),
            got: x.len(),
        });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    cascade(filter, &mut ext);
    ext.reverse();
    cascade(filter, &mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

fn cascade(filter: &Butterworth, x: &mut [f64]) {
    let mut scale = x[0];
    for s in &filter.sections {
        let zi = s.step_state();
        s.run(x, [zi[0] * scale, zi[1] * scale]);
        scale *= s.dc_gain();
    }
}

fn ultrasonic_highpass() -> Butterworth {
    Butterworth::new(
        FilterKind::Highpass,
        FILTER_ORDER,
        ULTRASONIC_BAND.0,
        SAMPLE_RATE as f64,
    )
    .expect("static filter design")
}

fn whisper_lowpass() -> Butterworth {
    Butterworth::new(
        FilterKind::Lowpass,
        FILTER_ORDER,
        WHISPER_CUTOFF,
        SAMPLE_RATE as f64,
    )
    .expect("static filter design")
}

/// 17.5 kHz zero-phase high-pass of a 48 kHz capture.
pub fn isolate_ultrasonic(audio: &[f64]) -> Result<Vec<f64>> {
    sosfiltfilt(&ultrasonic_highpass(), audio)
}

/// 12 kHz zero-phase low-pass of a 48 kHz capture (anti-alias before decimation).
pub fn lowpass_whisper(audio: &[f64]) -> Result<Vec<f64>> {
    sosfiltfilt(&whisper_lowpass(), audio)
}
