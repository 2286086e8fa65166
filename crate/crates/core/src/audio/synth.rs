//! Deterministic synthetic corpora for desk-scale training.
//!
//! MOS mode renders harmonic tones in white noise. Each synthetic system has
//! a base SNR (system 0 is noise-free) and every utterance jitters around it;
//! the label is [`mos_score_for_snr`], a logistic curve rising from 1 to 5.
//!
//! Similarity mode renders two harmonic tones per pair. Each system pair has
//! a base pitch distance in semitones (system 0 is always identical pitch)
//! and the label is [`similarity_score_for_distance`], rising from 1 ("same")
//! towards 4 ("different").

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    write_wav_pcm16, AudioError, Manifest, MosRow, PairRow, Task, Waveform, FFT_SIZE, SAMPLE_RATE,
};

const HARMONICS: [f64; 3] = [0.3, 0.15, 0.075];
const PAIR_SNR_DB: f64 = 30.0;
const MAX_SYSTEMS: usize = 10;

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub seed: u64,
    pub n_items: usize,
    pub task: Task,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl SynthOptions {
    pub fn new(seed: u64, n_items: usize, task: Task) -> Self {
        Self {
            seed,
            n_items,
            task,
            min_seconds: 0.2,
            max_seconds: 0.35,
        }
    }
}

/// `1 + 4 / (1 + exp(-(snr - 10) / 5))`; infinite SNR maps to exactly 5.
pub fn mos_score_for_snr(snr_db: f64) -> f64 {
    1.0 + 4.0 / (1.0 + (-(snr_db - 10.0) / 5.0).exp())
}

/// `1 + 3 (1 - exp(-d / 4))` for a pitch distance `d` in semitones.
pub fn similarity_score_for_distance(semitones: f64) -> f64 {
    1.0 + 3.0 * (1.0 - (-semitones.abs() / 4.0).exp())
}

/// Writes `wav/*.wav` and `manifest.csv` under `out_dir`; returns the
/// manifest path.
pub fn synth_dataset(
    out_dir: impl AsRef<Path>,
    opts: &SynthOptions,
) -> Result<PathBuf, AudioError> {
    if opts.n_items < 2 {
        return Err(AudioError::InvalidRequest(format!(
            "need at least 2 items, got {}",
            opts.n_items
        )));
    }
    if !(opts.min_seconds > 0.0 && opts.min_seconds <= opts.max_seconds) {
        return Err(AudioError::InvalidRequest(format!(
            "bad duration range [{}, {}]",
            opts.min_seconds, opts.max_seconds
        )));
    }
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|source| AudioError::Io {
        path: wav_dir.clone(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_systems = (opts.n_items / 2).clamp(2, MAX_SYSTEMS);
    let manifest = match opts.task {
        Task::Mos => {
            let mut rows = Vec::with_capacity(opts.n_items);
            for i in 0..opts.n_items {
                let system = i % n_systems;
                let jitter = rng.random_range(-3.0..=3.0);
                let snr = if system == 0 {
                    f64::INFINITY
                } else {
                    let span = (n_systems - 2).max(1) as f64;
                    30.0 - 35.0 * (system - 1) as f64 / span + jitter
                };
                let len = duration(&mut rng, opts);
                let f0 = rng.random_range(120.0..400.0);
                let wave = render(&mut rng, f0, len, snr);
                let rel = PathBuf::from(format!("wav/utt{i:04}.wav"));
                write_wav_pcm16(out_dir.join(&rel), &wave)?;
                rows.push(MosRow {
                    utt_id: format!("utt{i:04}"),
                    wav_path: rel,
                    score: mos_score_for_snr(snr),
                    system_id: format!("sys{system:02}"),
                });
            }
            Manifest::Mos(rows)
        }
        Task::Similarity => {
            let mut rows = Vec::with_capacity(opts.n_items);
            for i in 0..opts.n_items {
                let system = i % n_systems;
                let jitter = rng.random_range(-1.0..=1.0);
                let distance = if system == 0 {
                    0.0
                } else {
                    (12.0 * system as f64 / (n_systems - 1) as f64 + jitter).max(0.0)
                };
                let f0_a = rng.random_range(120.0..300.0);
                let f0_b = f0_a * 2f64.powf(distance / 12.0);
                let len_a = duration(&mut rng, opts);
                let len_b = duration(&mut rng, opts);
                let wave_a = render(&mut rng, f0_a, len_a, PAIR_SNR_DB);
                let wave_b = render(&mut rng, f0_b, len_b, PAIR_SNR_DB);
                let rel_a = PathBuf::from(format!("wav/pair{i:04}_a.wav"));
                let rel_b = PathBuf::from(format!("wav/pair{i:04}_b.wav"));
                write_wav_pcm16(out_dir.join(&rel_a), &wave_a)?;
                write_wav_pcm16(out_dir.join(&rel_b), &wave_b)?;
                rows.push(PairRow {
                    pair_id: format!("pair{i:04}"),
                    wav_a: rel_a,
                    wav_b: rel_b,
                    score: similarity_score_for_distance(distance),
                    system_pair_id: format!("sp{system:02}"),
                });
            }
            Manifest::Similarity(rows)
        }
    };
    let path = out_dir.join("manifest.csv");
    manifest.write(&path)?;
    Ok(path)
}

fn duration(rng: &mut ChaCha8Rng, opts: &SynthOptions) -> usize {
    let secs = rng.random_range(opts.min_seconds..=opts.max_seconds);
    ((secs * f64::from(SAMPLE_RATE)).round() as usize).max(FFT_SIZE)
}

/// Harmonic tone at `f0` plus uniform white noise at the given SNR.
fn render(rng: &mut ChaCha8Rng, f0: f64, len: usize, snr_db: f64) -> Waveform {
    let phases: Vec<f64> = HARMONICS
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let signal_power: f64 = HARMONICS.iter().map(|a| a * a / 2.0).sum();
    let noise_std = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    // uniform on [-a, a] has standard deviation a / sqrt(3)
    let half_width = noise_std * 3f64.sqrt();
    let sr = f64::from(SAMPLE_RATE);
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let tone: f64 = HARMONICS
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, ph))| a * (2.0 * PI * f0 * (h + 1) as f64 * t + ph).sin())
                .sum();
            let noise = if half_width > 0.0 {
                rng.random_range(-half_width..=half_width)
            } else {
                0.0
            };
            (tone + noise).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}
