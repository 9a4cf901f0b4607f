//! Silent spelling recognition and speaker authentication from paired
//! whisper audio and ultrasonic ear-canal reflections.

pub mod auth;
pub mod decode;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
