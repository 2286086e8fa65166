//! Speech quality assessment models that predict mean opinion scores and
//! pairwise speaker-similarity scores from magnitude spectrograms.
//!
//! The crate is self-contained: [`autodiff`] supplies the reverse-mode
//! engine, [`audio`] the WAV/spectrogram frontend and synthetic corpora,
//! [`layers`] the network building blocks, [`model`] the eight assembled
//! variants, and [`train`] the objective, optimizer and evaluation metrics.

pub mod audio;
pub mod autodiff;
pub mod layers;
pub mod model;
pub mod textconf;
pub mod train;
