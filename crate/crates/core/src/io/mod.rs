//! On-disk formats: PCM16 WAV captures and `EKFT` feature files.
//!
//! `EKFT` layout, little-endian: magic, u16 version, u32 AR order, u32 mel
//! patch width, u32 record count, then per record u32 window index, u32 span
//! start, u32 span end, AR coefficients and mel patch as f32.

use std::fs;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::{FeaturePair, SAMPLE_RATE};
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"EKFT";
const FEATURE_VERSION: u16 = 1;

/// Writes 48 kHz mono PCM16; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        if !s.is_finite() {
            return Err(Error::NonFinite("audio samples"));
        }
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads a 48 kHz mono PCM16 file into [-1, 1] samples.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let r = WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Data(format!(
            "{}: expected mono PCM16",
            path.display()
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    r.into_samples::<i16>()
        .map(|s| Ok(s? as f64 / i16::MAX as f64))
        .collect()
}

pub fn features_to_bytes(features: &[FeaturePair]) -> Result<Vec<u8>> {
    let (ar, mel) = features
        .first()
        .map_or((0, 0), |f| (f.ar_coeffs.len(), f.mel_patch.len()));
    let mut out = Vec::with_capacity(18 + features.len() * (12 + 4 * (ar + mel)));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for v in [ar, mel, features.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in features {
        if f.ar_coeffs.len() != ar || f.mel_patch.len() != mel {
            return Err(Error::Shape("feature records differ in width".into()));
        }
        for v in [f.window_index, f.window_span.0, f.window_span.1] {
            let v = u32::try_from(v).map_err(|_| Error::Data("window index exceeds u32".into()))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in f.ar_coeffs.iter().chain(&f.mel_patch) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an `EKFT` buffer, checking the widths against the expected AR
/// order and mel patch width.
pub fn features_from_bytes(
    bytes: &[u8],
    ar_order: usize,
    mel_width: usize,
) -> Result<Vec<FeaturePair>> {
    let bad = |m: &str| Error::Format(format!("feature file: {m}"));
    if bytes.len() < 18 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing EKFT header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (ar, mel, count) = (u32_at(6), u32_at(10), u32_at(14));
    if count > 0 && (ar != ar_order || mel != mel_width) {
        return Err(Error::Shape(format!(
            "feature file has widths ({ar}, {mel}), expected ({ar_order}, {mel_width})"
        )));
    }
    let record = 12 + 4 * (ar + mel);
    if bytes.len() != 18 + count * record {
        return Err(bad("length does not match record count"));
    }
    let f32s = |o: usize, n: usize| -> Vec<f64> {
        bytes[o..o + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Ok((0..count)
        .map(|i| {
            let o = 18 + i * record;
            FeaturePair {
                window_index: u32_at(o),
                window_span: (u32_at(o + 4), u32_at(o + 8)),
                ar_coeffs: f32s(o + 12, ar),
                mel_patch: f32s(o + 12 + 4 * ar, mel),
            }
        })
        .collect())
}

pub fn write_features(path: &Path, features: &[FeaturePair]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, features_to_bytes(features)?)?;
    Ok(())
}

pub fn read_features(path: &Path, ar_order: usize, mel_width: usize) -> Result<Vec<FeaturePair>> {
    features_from_bytes(&fs::read(path)?, ar_order, mel_width)
}
