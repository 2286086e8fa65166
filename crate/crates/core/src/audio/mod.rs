//! Waveform input, magnitude spectrograms, dataset manifests and the
//! synthetic corpus generator.

mod manifest;
mod spectrogram;
mod synth;
mod wav;

pub use manifest::{Manifest, MosRow, PairRow, Task};
pub use spectrogram::{frame_count, magnitude_spectrogram, Spectrogram, Stft};
pub use synth::{mos_score_for_snr, similarity_score_for_distance, synth_dataset, SynthOptions};
pub use wav::{load_wav, write_wav_pcm16, Waveform};

use std::path::PathBuf;

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 512;
pub const HOP: usize = 256;
/// Frequency bins per frame, `FFT_SIZE / 2 + 1`.
pub const N_BINS: usize = FFT_SIZE / 2 + 1;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated WAV data")]
    Truncated { path: PathBuf },
    #[error("{path}: malformed WAV: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: unsupported encoding {encoding} (expected 16-bit PCM or 32-bit float)")]
    UnsupportedEncoding { path: PathBuf, encoding: String },
    #[error("sample rate {found} Hz is not supported (expected {expected} Hz)")]
    UnsupportedSampleRate { found: u32, expected: u32 },
    #[error("waveform has {samples} samples, fewer than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("{path}: manifest error: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid synthesis request: {0}")]
    InvalidRequest(String),
}
