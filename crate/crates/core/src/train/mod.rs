//! Training objective, optimizer, training loop, evaluation metrics and the
//! gradient verification suite.

mod adam;
mod evaluate;
mod gradsuite;
mod loss;
pub mod metrics;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use evaluate::{
    evaluate, export_embeddings, mean_report, predict_all, read_predictions, write_predictions,
    LevelMetrics, MetricsReport, Prediction, SameRatio, SimilarityMetrics,
};
pub use gradsuite::{
    check_names, model_check_name, run_check, CheckOutcome, GradCheckOptions, CHECK_FRAMES,
    GRAD_TOLERANCE,
};
pub use loss::{objective, utterance_term, LossItem};
pub use trainer::{
    check_task, eval_objective, load_examples, select_best, train, utterance_mse, EpochRecord,
    Example, TrainConfig, TrainSummary, Trainer, LOG_HEADER,
};

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::{AudioError, Task};
use crate::autodiff::TensorError;
use crate::model::{CheckpointError, ModelError};
use metrics::MetricError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("utterance has no valid frames")]
    NoValidFrames,
    #[error("{model} cannot score {data} data")]
    TaskMismatch { model: String, data: Task },
    #[error("non-finite loss {value} on `{id}`")]
    NonFiniteLoss { id: String, value: f64 },
    #[error("non-finite gradient {value} in `{param}` at index {index}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },
    #[error("epoch {epoch}, step {step}: {source}")]
    AtStep {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("validation MSE was never finite")]
    NoFiniteValidation,
    #[error("unknown gradient check `{0}`")]
    UnknownCheck(String),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
