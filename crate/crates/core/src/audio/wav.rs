use std::io::ErrorKind;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioError;

/// Mono samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Reads a 16-bit PCM or 32-bit float WAV file. Multi-channel files keep
/// only their first channel.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) if io.kind() == ErrorKind::UnexpectedEof => {
            AudioError::Truncated {
                path: path.to_path_buf(),
            }
        }
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            encoding: "unknown".into(),
        },
        other => AudioError::Malformed {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    // once the header parsed, a failed read means the data chunk is short
    let sample_err = |e: hound::Error| match e {
        hound::Error::IoError(_) => AudioError::Truncated {
            path: path.to_path_buf(),
        },
        other => wav_err(other),
    };
    let reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(sample_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(sample_err)?,
        (format, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: path.to_path_buf(),
                encoding: format!("{format:?} {bits}-bit"),
            })
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::Truncated {
            path: path.to_path_buf(),
        });
    }
    let samples = interleaved.into_iter().step_by(channels).collect();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono 16-bit PCM. Samples are clipped to `[-1, 1]`.
pub fn write_wav_pcm16(path: impl AsRef<Path>, wave: &Waveform) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => AudioError::Malformed {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}
