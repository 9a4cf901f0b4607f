use crate::dsp::{AlignedCapture, FRAMES_PER_WINDOW, WINDOW_STRIDE};
use crate::error::{Error, Result};

/// A 10-frame analysis window over an aligned capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub index: usize,
    pub start_frame: usize,
    /// Sample range at 48 kHz in the original capture, end exclusive.
    pub start_sample: usize,
    pub end_sample: usize,
}

/// Number of full windows over `frames` frames; partial windows are dropped.
pub fn window_count(frames: usize) -> usize {
    if frames < FRAMES_PER_WINDOW {
        0
    } else {
        (frames - FRAMES_PER_WINDOW) / WINDOW_STRIDE + 1
    }
}

pub fn slice_windows(capture: &AlignedCapture) -> Vec<WindowSpan> {
    let n = capture.symbol_len;
    (0..window_count(capture.num_symbols))
        .map(|index| {
            let start_frame = index * WINDOW_STRIDE;
            let start_sample = capture.start + start_frame * n;
            WindowSpan {
                index,
                start_frame,
                start_sample,
                end_sample: start_sample + FRAMES_PER_WINDOW * n,
            }
        })
        .collect()
}

/// Second-order difference `x[n] - 2x[n-1] + x[n-2]`, compensating the
/// high-frequency roll-off of the earbud transducer.
pub fn boost_second_diff(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: x.len(),
        });
    }
    Ok(x.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect())
}
