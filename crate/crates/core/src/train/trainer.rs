use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, objective, utterance_term, AdamConfig, AdamState, LossItem, TrainError};
use crate::audio::{load_wav, magnitude_spectrogram, Manifest, Spectrogram, Task};
use crate::autodiff::{Graph, Tensor};
use crate::layers::Mode;
use crate::model::{save_checkpoint, Model, ModelConfig, ModelInput};

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the frame-level term.
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Defaults for `model`: batch 16 with both tokens and encoding-layer
    /// pooling, 32 otherwise.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            alpha: 0.8,
            batch_size: if model.use_gqt && model.use_el {
                16
            } else {
                32
            },
            epochs: 200,
            seed: 1,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && a.eps > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2))
        {
            return Err(TrainError::Config(format!(
                "invalid optimizer settings {a:?}"
            )));
        }
        Ok(())
    }
}

/// One scored item: an utterance (MOS) or an utterance pair (similarity).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub system: String,
    pub input: ModelInput,
    pub target: f64,
}

impl Example {
    pub fn task(&self) -> Task {
        match self.input {
            ModelInput::Single { .. } => Task::Mos,
            ModelInput::Pair { .. } => Task::Similarity,
        }
    }
}

fn spectrogram(path: &Path) -> Result<Spectrogram, TrainError> {
    Ok(magnitude_spectrogram(&load_wav(path)?)?)
}

/// Loads audio and computes spectrograms for every manifest row.
pub fn load_examples(manifest: &Manifest) -> Result<Vec<Example>, TrainError> {
    match manifest {
        Manifest::Mos(rows) => rows
            .iter()
            .map(|r| {
                Ok(Example {
                    id: r.utt_id.clone(),
                    system: r.system_id.clone(),
                    input: ModelInput::single(spectrogram(&r.wav_path)?),
                    target: r.score,
                })
            })
            .collect(),
        Manifest::Similarity(rows) => rows
            .iter()
            .map(|r| {
                Ok(Example {
                    id: r.pair_id.clone(),
                    system: r.system_pair_id.clone(),
                    input: ModelInput::pair(spectrogram(&r.wav_a)?, spectrogram(&r.wav_b)?),
                    target: r.score,
                })
            })
            .collect(),
    }
}

/// Fails unless every example matches the model's task.
pub fn check_task(model: &ModelConfig, examples: &[Example]) -> Result<(), TrainError> {
    match examples.iter().find(|e| e.task() != model.task) {
        Some(e) => Err(TrainError::TaskMismatch {
            model: model.variant_name(),
            data: e.task(),
        }),
        None => Ok(()),
    }
}

/// Deterministic 64-bit mix of the inputs (SplitMix64 finalizer chain).
fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const SHUFFLE_STREAM: u64 = 100;

/// Mini-batch Adam training over a fixed example set.
pub struct Trainer<'a> {
    model: Model,
    cfg: TrainConfig,
    data: &'a [Example],
    opt: AdamState,
    shuffle: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, cfg: TrainConfig, data: &'a [Example]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        check_task(model.config(), data)?;
        let opt = AdamState::new(model.params());
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            model,
            cfg,
            data,
            opt,
            shuffle,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled data. Returns the mean training loss
    /// over all examples (dropout active).
    pub fn run_epoch(&mut self) -> Result<f64, TrainError> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total = 0.0;
        for (step, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            total += self.step(step, batch).map_err(|e| TrainError::AtStep {
                epoch: self.epoch + 1,
                step: step + 1,
                source: Box::new(e),
            })?;
        }
        self.epoch += 1;
        Ok(total / self.data.len() as f64)
    }

    /// Gradient of the batch-mean loss, then one optimizer update. Returns
    /// the summed per-example loss.
    fn step(&mut self, step: usize, batch: &[usize]) -> Result<f64, TrainError> {
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = self
            .model
            .params()
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut total = 0.0;
        for (pos, &i) in batch.iter().enumerate() {
            let ex = &self.data[i];
            let seed = mix(&[self.cfg.seed, self.epoch as u64, step as u64, pos as u64]);
            let mut g = Graph::new();
            let p = self.model.params().bind(&mut g);
            let out =
                self.model
                    .forward(&mut g, &p, &ex.input, Mode::Train { dropout_seed: seed })?;
            let term = utterance_term(
                &mut g,
                out.frame_scores,
                out.utterance_score,
                &out.mask,
                ex.target,
                self.cfg.alpha,
            )?;
            let value = g.value(term).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    id: ex.id.clone(),
                    value,
                });
            }
            total += value;
            let scaled = g.scale(term, scale);
            g.backward(scaled)?;
            for (acc, grad) in grads.iter_mut().zip(p.grads(&g)) {
                for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
        }
        adam_step(
            self.model.params_mut(),
            &grads,
            &mut self.opt,
            &self.cfg.adam,
        )?;
        Ok(total)
    }
}

/// Eval-mode utterance-level MSE of `model` on `data`.
pub fn utterance_mse(model: &Model, data: &[Example]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for ex in data {
        let d = model.predict(&ex.input)?.utterance_score - ex.target;
        sum += d * d;
    }
    Ok(sum / data.len() as f64)
}

/// Eval-mode value of the training objective on `data`.
pub fn eval_objective(model: &Model, data: &[Example], alpha: f64) -> Result<f64, TrainError> {
    let outs = data
        .iter()
        .map(|ex| model.predict(&ex.input))
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<LossItem<'_>> = outs
        .iter()
        .zip(data)
        .map(|(o, ex)| LossItem {
            frame_scores: &o.frame_scores,
            mask: &o.mask,
            utterance_score: o.utterance_score,
            target: ex.target,
        })
        .collect();
    objective(&items, alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Index of the first minimum; `None` when empty or any value is NaN.
pub fn select_best(values: &[f64]) -> Option<usize> {
    if values.iter().any(|v| v.is_nan()) {
        return None;
    }
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_mse";

/// Full training run. Writes `log.csv` (one row per epoch) and `best.ckpt`
/// (the epoch with the lowest validation utterance MSE) into `out_dir`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary, TrainError> {
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_task(model_cfg, val_set)?;
    let model = Model::new(model_cfg.clone(), cfg.seed);
    let mut trainer = Trainer::new(model, cfg.clone(), train_set)?;
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let log_path = out_dir.join("log.csv");
    let ckpt_path = out_dir.join("best.ckpt");
    let file = File::create(&log_path).map_err(|e| TrainError::io(&log_path, e))?;
    let mut log_file = BufWriter::new(file);
    writeln!(log_file, "{LOG_HEADER}").map_err(|e| TrainError::io(&log_path, e))?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..cfg.epochs {
        let train_loss = trainer.run_epoch()?;
        let val_mse = utterance_mse(trainer.model(), val_set)?;
        let rec = EpochRecord {
            epoch: trainer.epoch(),
            train_loss,
            val_mse,
        };
        writeln!(log_file, "{},{},{}", rec.epoch, rec.train_loss, rec.val_mse)
            .and_then(|_| log_file.flush())
            .map_err(|e| TrainError::io(&log_path, e))?;
        if val_mse.is_finite() && best.is_none_or(|(_, b)| val_mse < b) {
            best = Some((rec.epoch, val_mse));
            save_checkpoint(trainer.model(), &ckpt_path)?;
        }
        on_epoch(&rec);
        log.push(rec);
    }
    let (best_epoch, best_val_mse) = best.ok_or(TrainError::NoFiniteValidation)?;
    Ok(TrainSummary {
        log,
        best_epoch,
        best_val_mse,
    })
}
