//! The eight assembled networks: MOSNet and SIMNet, each with or without
//! global quality tokens and with or without encoding-layer pooling.
//!
//! MOS models map one spectrogram to frame scores and an utterance score.
//! Similarity models zero-pad both utterances of a pair to a common length,
//! run the shared CNN on each, add each utterance's quality embedding to its
//! own feature map when tokens are enabled, concatenate the two maps per
//! frame and continue exactly like the MOS pipeline.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{Spectrogram, Task};
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::layers::{
    apply_quality_skip, gap, Blstm, Bound, Cnn, ElPooling, FrameHead, FrameMask, GqtDims, GqtLayer,
    Mode, ParamStore,
};
use crate::textconf::{KeyValues, TextConfError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{variant} takes {expected} input")]
    InputKind {
        variant: String,
        expected: &'static str,
    },
    #[error("frame mask has {mask} entries but the spectrogram has {frames} frames")]
    MaskLength { mask: usize, frames: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

impl From<TextConfError> for ModelError {
    fn from(e: TextConfError) -> Self {
        ModelError::Config(e.to_string())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub use_gqt: bool,
    pub use_el: bool,
    pub channels: Vec<usize>,
    pub n_tokens: usize,
    pub n_heads: usize,
    /// Number of encoding-layer codewords.
    pub n_codewords: usize,
    pub blstm_hidden: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(task: Task, use_gqt: bool, use_el: bool) -> Self {
        Self {
            task,
            use_gqt,
            use_el,
            channels: vec![16, 16, 32, 32],
            n_tokens: 10,
            n_heads: 8,
            n_codewords: 10,
            blstm_hidden: 128,
            fc_hidden: 128,
            dropout: 0.3,
        }
    }

    /// All eight task/flag combinations, baseline first within each task.
    pub fn all_variants() -> Vec<Self> {
        let mut out = Vec::with_capacity(8);
        for task in [Task::Mos, Task::Similarity] {
            for (gqt, el) in [(false, false), (true, false), (false, true), (true, true)] {
                out.push(Self::new(task, gqt, el));
            }
        }
        out
    }

    /// Display name such as `MOSNet+GQT+EL`.
    pub fn variant_name(&self) -> String {
        let mut s = String::from(match self.task {
            Task::Mos => "MOSNet",
            Task::Similarity => "SIMNet",
        });
        if self.use_gqt {
            s.push_str("+GQT");
        }
        if self.use_el {
            s.push_str("+EL");
        }
        s
    }

    pub const KEYS: [&'static str; 10] = [
        "task",
        "use_gqt",
        "use_el",
        "channels",
        "n_tokens",
        "n_heads",
        "n_codewords",
        "blstm_hidden",
        "fc_hidden",
        "dropout",
    ];

    /// Writes every field, in a fixed order.
    pub fn write_keys(&self, kv: &mut KeyValues) {
        let channels: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        kv.set("task", self.task);
        kv.set("use_gqt", self.use_gqt);
        kv.set("use_el", self.use_el);
        kv.set("channels", channels.join(","));
        kv.set("n_tokens", self.n_tokens);
        kv.set("n_heads", self.n_heads);
        kv.set("n_codewords", self.n_codewords);
        kv.set("blstm_hidden", self.blstm_hidden);
        kv.set("fc_hidden", self.fc_hidden);
        kv.set("dropout", self.dropout);
    }

    /// Overrides fields present in `kv`; other keys are left to the caller.
    pub fn apply_keys(&mut self, kv: &KeyValues) -> Result<(), ModelError> {
        if let Some(v) = kv.parsed("task")? {
            self.task = v;
        }
        if let Some(v) = kv.parsed("use_gqt")? {
            self.use_gqt = v;
        }
        if let Some(v) = kv.parsed("use_el")? {
            self.use_el = v;
        }
        if let Some(v) = kv.get("channels") {
            self.channels = v
                .split(',')
                .map(|c| c.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| ModelError::Config(format!("channels `{v}`: {e}")))?;
        }
        if let Some(v) = kv.parsed("n_tokens")? {
            self.n_tokens = v;
        }
        if let Some(v) = kv.parsed("n_heads")? {
            self.n_heads = v;
        }
        if let Some(v) = kv.parsed("n_codewords")? {
            self.n_codewords = v;
        }
        if let Some(v) = kv.parsed("blstm_hidden")? {
            self.blstm_hidden = v;
        }
        if let Some(v) = kv.parsed("fc_hidden")? {
            self.fc_hidden = v;
        }
        if let Some(v) = kv.parsed("dropout")? {
            self.dropout = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return fail(format!(
                "channels {:?} must be non-empty and positive",
                self.channels
            ));
        }
        if self.n_tokens == 0
            || self.n_codewords == 0
            || self.blstm_hidden == 0
            || self.fc_hidden == 0
        {
            return fail("layer sizes must be positive".into());
        }
        let freq = self
            .channels
            .iter()
            .fold(crate::audio::N_BINS, |f, _| f.div_ceil(3));
        let feature = *self.channels.last().expect("non-empty") * freq;
        if self.n_heads == 0 || !feature.is_multiple_of(self.n_heads) {
            return fail(format!(
                "{} heads do not divide feature width {feature}",
                self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Canonical text form; equal configs give identical text.
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        self.write_keys(&mut kv);
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&Self::KEYS)?;
        let task: Task = kv.required("task")?;
        let mut cfg = Self::new(task, kv.required("use_gqt")?, kv.required("use_el")?);
        cfg.apply_keys(&kv)?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.variant_name())
    }
}

/// One forward input: a single utterance, or an utterance pair.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Single { spec: Spectrogram, mask: FrameMask },
    Pair { a: Spectrogram, b: Spectrogram },
}

impl ModelInput {
    /// A single utterance with every frame valid.
    pub fn single(spec: Spectrogram) -> Self {
        let mask = FrameMask::all_valid(spec.n_frames());
        Self::Single { spec, mask }
    }

    pub fn pair(a: Spectrogram, b: Spectrogram) -> Self {
        Self::Pair { a, b }
    }

    /// Frames processed by the network (the padded length for pairs).
    pub fn n_frames(&self) -> usize {
        match self {
            Self::Single { spec, .. } => spec.n_frames(),
            Self::Pair { a, b } => a.n_frames().max(b.n_frames()),
        }
    }

    /// Frames that take part in pooling and in the frame loss.
    pub fn pooling_mask(&self) -> FrameMask {
        match self {
            Self::Single { mask, .. } => mask.clone(),
            Self::Pair { a, b } => {
                FrameMask::prefix(a.n_frames().min(b.n_frames()), self.n_frames())
            }
        }
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[N, 1]`.
    pub frame_scores: Var,
    /// `[1, 1]`.
    pub utterance_score: Var,
    /// BLSTM output `[N, 2 * blstm_hidden]`.
    pub embeddings: Var,
    pub mask: FrameMask,
}

/// Plain values of an eval-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub frame_scores: Vec<f64>,
    pub utterance_score: f64,
    pub frame_embeddings: Tensor,
    pub mask: FrameMask,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    cnn: Cnn,
    gqt: Option<GqtLayer>,
    blstm: Blstm,
    head: FrameHead,
    pool: Option<ElPooling>,
}

// Each component draws its initial values from its own stream so that
// variants built from one seed share every common parameter.
const STREAM_CNN: u64 = 0;
const STREAM_GQT: u64 = 1;
const STREAM_BLSTM: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_POOL: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Model {
    /// Builds a freshly initialized model.
    ///
    /// # Panics
    /// If `cfg` fails [`ModelConfig::validate`].
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        if let Err(e) = cfg.validate() {
            panic!("{e}");
        }
        let mut params = ParamStore::new();
        let cnn = Cnn::new(
            &mut params,
            "cnn",
            &cfg.channels,
            &mut stream(seed, STREAM_CNN),
        );
        let feature = cnn.output_dim();
        let gqt = cfg.use_gqt.then(|| {
            let dims = GqtDims {
                input_dim: feature,
                gru_hidden: feature,
                n_tokens: cfg.n_tokens,
                token_dim: feature,
                n_heads: cfg.n_heads,
                out_dim: feature,
            };
            GqtLayer::new(&mut params, "gqt", dims, &mut stream(seed, STREAM_GQT))
        });
        let blstm_in = match cfg.task {
            Task::Mos => feature,
            Task::Similarity => 2 * feature,
        };
        let blstm = Blstm::new(
            &mut params,
            "blstm",
            blstm_in,
            cfg.blstm_hidden,
            &mut stream(seed, STREAM_BLSTM),
        );
        let head = FrameHead::new(
            &mut params,
            "head",
            blstm.output_dim(),
            cfg.fc_hidden,
            cfg.dropout,
            &mut stream(seed, STREAM_HEAD),
        );
        let pool = cfg.use_el.then(|| {
            ElPooling::new(
                &mut params,
                "pool",
                cfg.n_codewords,
                &mut stream(seed, STREAM_POOL),
            )
        });
        Self {
            cfg,
            params,
            cnn,
            gqt,
            blstm,
            head,
            pool,
        }
    }

    /// Builds a model around existing parameter values. Names and shapes
    /// must match what `cfg` registers.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut model = Self::new(cfg, 0);
        if model.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "{} expects {} parameter tensors, got {}",
                model.cfg.variant_name(),
                model.params.len(),
                params.len()
            )));
        }
        for ((want, w), (got, v)) in model.params.iter().zip(params.iter()) {
            if want != got || w.shape() != v.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{got}` {:?} does not match expected `{want}` {:?}",
                    v.shape(),
                    w.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Width of the exported frame embeddings.
    pub fn embedding_dim(&self) -> usize {
        self.blstm.output_dim()
    }

    /// Sets every quality-token parameter to zero.
    pub fn zero_gqt(&mut self) {
        self.params.zero_prefix("gqt.");
    }

    /// Makes encoding-layer pooling return the plain frame average. No-op
    /// without encoding-layer pooling.
    pub fn select_gap_slot(&mut self) {
        if let Some(pool) = &self.pool {
            pool.select_gap_slot(&mut self.params);
        }
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_params(&mut self, other: &Model) {
        for id in self.params.ids().collect::<Vec<_>>() {
            if let Some(src) = other.params.find(self.params.name(id)) {
                let src = other.params.get(src);
                if src.shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = src.clone();
                }
            }
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        match (self.cfg.task, input) {
            (Task::Mos, ModelInput::Single { spec, mask }) => {
                if mask.len() != spec.n_frames() {
                    return Err(ModelError::MaskLength {
                        mask: mask.len(),
                        frames: spec.n_frames(),
                    });
                }
                Ok(())
            }
            (Task::Similarity, ModelInput::Pair { .. }) => Ok(()),
            (Task::Mos, _) => Err(ModelError::InputKind {
                variant: self.cfg.variant_name(),
                expected: "single-utterance",
            }),
            (Task::Similarity, _) => Err(ModelError::InputKind {
                variant: self.cfg.variant_name(),
                expected: "utterance-pair",
            }),
        }
    }

    /// CNN features of one utterance, plus its quality embedding when
    /// tokens are enabled. `valid` counts the real frames.
    fn features(
        &self,
        g: &mut Graph,
        p: &Bound,
        spec: &Spectrogram,
        mask: &FrameMask,
    ) -> Result<Var, TensorError> {
        let x = g.constant(spec.to_tensor());
        let feats = self.cnn.forward(g, p, x)?;
        match &self.gqt {
            Some(gqt) => {
                let q = gqt.quality_embedding(g, p, feats, mask)?;
                apply_quality_skip(g, feats, q)
            }
            None => Ok(feats),
        }
    }

    /// Records the forward pass on `g` with parameters bound as `p`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &ModelInput,
        mode: Mode,
    ) -> Result<ForwardVars, ModelError> {
        self.check_input(input)?;
        let x = match input {
            ModelInput::Single { spec, mask } => self.features(g, p, spec, mask)?,
            ModelInput::Pair { a, b } => {
                let n = input.n_frames();
                let fa =
                    self.features(g, p, &a.zero_padded(n), &FrameMask::prefix(a.n_frames(), n))?;
                let fb =
                    self.features(g, p, &b.zero_padded(n), &FrameMask::prefix(b.n_frames(), n))?;
                g.concat(&[fa, fb], 1)?
            }
        };
        let embeddings = self.blstm.forward(g, p, x)?;
        let frame_scores = self.head.forward(g, p, embeddings, mode)?;
        let mask = input.pooling_mask();
        let utterance_score = match &self.pool {
            Some(pool) => pool.forward(g, p, frame_scores, &mask)?,
            None => gap(g, frame_scores, &mask)?,
        };
        Ok(ForwardVars {
            frame_scores,
            utterance_score,
            embeddings,
            mask,
        })
    }

    /// Eval-mode forward with frozen parameters.
    pub fn predict(&self, input: &ModelInput) -> Result<ModelOutput, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, input, Mode::Eval)?;
        Ok(ModelOutput {
            frame_scores: g.value(out.frame_scores).data().to_vec(),
            utterance_score: g.value(out.utterance_score).data()[0],
            frame_embeddings: g.value(out.embeddings).clone(),
            mask: out.mask,
        })
    }
}
