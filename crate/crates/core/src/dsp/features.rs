use crate::dsp::mel::group_patches;
use crate::dsp::{
    align_capture, ar_features, generate_probe, log_mel_frames, slice_windows, AlignedCapture,
    MelFilterbank, ProbeSignal, AR_ORDER, FRAMES_PER_WINDOW, N_MELS, SAMPLE_RATE, SYMBOL_LEN,
    ULTRASONIC_BAND,
};
use crate::error::{config, Result};

/// Twin encoder inputs for one 10-frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub window_index: usize,
    /// Sample span at 48 kHz in the original capture, end exclusive.
    pub window_span: (usize, usize),
    pub ar_coeffs: Vec<f64>,
    /// Row-major `frames_per_window × n_mels` log-mel patch.
    pub mel_patch: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub probe_seed: u64,
    pub ar_order: usize,
    pub n_mels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            probe_seed: 7,
            ar_order: AR_ORDER,
            n_mels: N_MELS,
        }
    }
}

impl FeatureConfig {
    pub fn mel_width(&self) -> usize {
        FRAMES_PER_WINDOW * self.n_mels
    }
}

/// Paired AR and mel features for every full window of an aligned capture.
pub fn extract_features(
    capture: &AlignedCapture,
    bank: &MelFilterbank,
    ar_order: usize,
) -> Result<Vec<FeaturePair>> {
    let spans = slice_windows(capture);
    let mel_frames = log_mel_frames(bank, &capture.whisper);
    let patches = group_patches(&mel_frames);
    debug_assert_eq!(patches.len(), spans.len());

    spans
        .iter()
        .zip(patches)
        .map(|(span, mel_patch)| {
            let lo = span.start_sample - capture.start;
            let hi = span.end_sample - capture.start;
            Ok(FeaturePair {
                window_index: span.index,
                window_span: (span.start_sample, span.end_sample),
                ar_coeffs: ar_features(&capture.ultrasonic[lo..hi], ar_order)?,
                mel_patch,
            })
        })
        .collect()
}

/// Probe, filterbank and feature settings shared across captures.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub probe: ProbeSignal,
    pub bank: MelFilterbank,
    pub config: FeatureConfig,
}

impl FrontEnd {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.ar_order == 0 || 2 * config.ar_order + 2 >= FRAMES_PER_WINDOW * SYMBOL_LEN {
            return self::config(format!("AR order {} out of range", config.ar_order));
        }
        Ok(Self {
            probe: generate_probe(config.probe_seed, SYMBOL_LEN, SAMPLE_RATE, ULTRASONIC_BAND)?,
            bank: MelFilterbank::whisper(config.n_mels)?,
            config,
        })
    }

    pub fn align(&self, rx: &[f64]) -> Result<AlignedCapture> {
        align_capture(&self.probe, rx)
    }

    pub fn process(&self, rx: &[f64]) -> Result<(AlignedCapture, Vec<FeaturePair>)> {
        let capture = self.align(rx)?;
        let features = extract_features(&capture, &self.bank, self.config.ar_order)?;
        Ok((capture, features))
    }
}
