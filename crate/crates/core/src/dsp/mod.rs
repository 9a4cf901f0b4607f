//! Signal front end: OFDM probe synthesis, capture alignment and the twin
//! feature streams (ultrasonic AR coefficients, whisper log-mel patches).

mod align;
mod ar;
mod features;
mod filter;
mod mel;
mod probe;
mod window;

pub use align::{align_capture, coarse_align, fine_align, AlignedCapture, FineAlignment};
pub use ar::{ar_features, burg, ArModel, DEFAULT_AR_CONDITIONING};
pub use features::{extract_features, FeatureConfig, FeaturePair, FrontEnd};
pub use filter::{
    isolate_ultrasonic, lowpass_whisper, sosfiltfilt, Biquad, Butterworth, FilterKind,
};
pub use mel::{log_mel_frames, whisper_features, MelFilterbank, LOG_FLOOR};
pub use probe::{generate_probe, ProbeSignal};
pub use window::{boost_second_diff, slice_windows, window_count, WindowSpan};

/// Probe symbol length in samples (~42.6 ms at 48 kHz).
pub const SYMBOL_LEN: usize = 2046;
pub const SAMPLE_RATE: u32 = 48_000;
/// Ultrasonic sensing band in Hz.
pub const ULTRASONIC_BAND: (f64, f64) = (17_500.0, 23_000.0);
/// Whisper lowpass cutoff in Hz, applied before decimation by two.
pub const WHISPER_CUTOFF: f64 = 12_000.0;
pub const WHISPER_RATE: u32 = SAMPLE_RATE / 2;
/// One whisper mel frame spans one probe symbol after decimation.
pub const WHISPER_FRAME: usize = SYMBOL_LEN / 2;
pub const FRAMES_PER_WINDOW: usize = 10;
pub const WINDOW_STRIDE: usize = 2;
/// Fine alignment search radius in samples around the coarse lag.
pub const FINE_SEARCH_RADIUS: usize = 25;
/// Symbols averaged by the fine phase-slope estimate.
pub const FINE_SYMBOLS: usize = 8;
pub const AR_ORDER: usize = 200;
pub const N_MELS: usize = 64;
/// Order of the Butterworth prototypes for both band-split filters.
pub const FILTER_ORDER: usize = 8;
