use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioError, Waveform, FFT_SIZE, HOP, N_BINS, SAMPLE_RATE};
use crate::autodiff::Tensor;

/// `N x 257` nonnegative magnitude frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    n_frames: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn from_frames(n_frames: usize, data: Vec<f64>) -> Result<Self, AudioError> {
        if n_frames == 0 || data.len() != n_frames * N_BINS {
            return Err(AudioError::InvalidRequest(format!(
                "spectrogram needs {n_frames} x {N_BINS} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(AudioError::InvalidRequest(
                "spectrogram magnitudes must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { n_frames, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * N_BINS..(i + 1) * N_BINS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Appends all-zero frames up to `n_frames`.
    pub fn zero_padded(&self, n_frames: usize) -> Self {
        let mut data = self.data.clone();
        data.resize(n_frames.max(self.n_frames) * N_BINS, 0.0);
        Self {
            n_frames: n_frames.max(self.n_frames),
            data,
        }
    }

    /// Channels-last network input `[N, 257, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_frames, N_BINS, 1], self.data.clone()).expect("valid shape")
    }
}

/// Number of whole windows: `floor((len - window) / hop) + 1`, or 0.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || hop == 0 {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Short-time Fourier magnitude with a periodic Hann window and no centre
/// padding.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    hop: usize,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new(HOP)
    }
}

impl Stft {
    pub fn new(hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..FFT_SIZE)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FFT_SIZE as f64).cos())
            .collect();
        Self { fft, window, hop }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn compute(&self, wave: &Waveform) -> Result<Spectrogram, AudioError> {
        if wave.sample_rate != SAMPLE_RATE {
            return Err(AudioError::UnsupportedSampleRate {
                found: wave.sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        let n_frames = frame_count(wave.samples.len(), FFT_SIZE, self.hop);
        if n_frames == 0 {
            return Err(AudioError::TooShort {
                samples: wave.samples.len(),
                window: FFT_SIZE,
            });
        }
        let mut data = Vec::with_capacity(n_frames * N_BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for f in 0..n_frames {
            let seg = &wave.samples[f * self.hop..f * self.hop + FFT_SIZE];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            data.extend(buf[..N_BINS].iter().map(|c| c.norm()));
        }
        Ok(Spectrogram { n_frames, data })
    }
}

/// 512-point, hop-256 magnitude spectrogram of a 16 kHz waveform.
pub fn magnitude_spectrogram(wave: &Waveform) -> Result<Spectrogram, AudioError> {
    Stft::default().compute(wave)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn one_second_gives_61_frames() {
        let s = magnitude_spectrogram(&wave(vec![0.0; 16_000])).unwrap();
        assert_eq!(s.n_frames(), 61);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let samples = (0..16_000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let s = magnitude_spectrogram(&wave(samples)).unwrap();
        for f in 0..s.n_frames() {
            let frame = s.frame(f);
            let argmax = (0..N_BINS)
                .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
                .unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn too_short_and_wrong_rate_are_rejected() {
        assert!(matches!(
            magnitude_spectrogram(&wave(vec![0.0; 511])),
            Err(AudioError::TooShort { .. })
        ));
        let w = Waveform {
            samples: vec![0.0; 1000],
            sample_rate: 22_050,
        };
        assert!(matches!(
            magnitude_spectrogram(&w),
            Err(AudioError::UnsupportedSampleRate { .. })
        ));
    }

    #[test]
    fn padding_appends_zero_frames() {
        let s = Spectrogram::from_frames(2, vec![1.0; 2 * N_BINS]).unwrap();
        let p = s.zero_padded(5);
        assert_eq!(p.n_frames(), 5);
        assert_eq!(p.frame(1), s.frame(1));
        assert!(p.frame(4).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn frame_count_matches_enumeration(len in 0usize..5000, window in 1usize..600, hop in 1usize..600) {
            let brute = (0..).map(|k| k * hop).take_while(|start| start + window <= len).count();
            prop_assert_eq!(frame_count(len, window, hop), brute);
        }
    }

    proptest! {
        #[test]
        fn sign_flip_invariance(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..1500).map(|_| rng.random_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let a = magnitude_spectrogram(&wave(x)).unwrap();
            let b = magnitude_spectrogram(&wave(neg)).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }
}
