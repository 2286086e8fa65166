//! Finite-difference verification of every layer's backward pass and of
//! the training objective through each assembled model.
//!
//! Each check draws fresh random parameters and inputs per trial, builds a
//! scalar from the layer output, and compares reverse-mode gradients with
//! central differences on a random subset of coordinates of every tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{utterance_term, TrainError};
use crate::audio::{Spectrogram, Task, N_BINS};
use crate::autodiff::{
    grad_check_many, random_tensor, CoordinateSelection, Graph, Tensor, TensorError, Var,
};
use crate::layers::{
    Blstm, Bound, ConvBlock, ElPooling, EncodingLayer, FrameMask, GqtDims, GqtLayer, Gru, Mode,
    ParamStore,
};
use crate::model::{Model, ModelConfig, ModelInput};

/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Frames in the random inputs of the model-level checks.
pub const CHECK_FRAMES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Random coordinates checked per tensor per trial.
    pub coords_per_tensor: usize,
    pub eps: f64,
    /// Adds a term whose value is zero but whose gradient is wrong, to
    /// confirm the harness notices broken backward passes.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            coords_per_tensor: 2,
            eps: 1e-6,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    /// Coordinates replaced because the step crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

const LAYERS: [&str; 6] = [
    "conv_block",
    "blstm",
    "gru",
    "gqt_attention",
    "encoding_layer",
    "el_pooling",
];

/// Check name for a model variant, e.g. `mosnet_gqt_el`.
pub fn model_check_name(cfg: &ModelConfig) -> String {
    cfg.variant_name().to_lowercase().replace('+', "_")
}

/// Every check, layers first.
pub fn check_names() -> Vec<String> {
    LAYERS
        .iter()
        .map(|s| s.to_string())
        .chain(ModelConfig::all_variants().iter().map(model_check_name))
        .collect()
}

/// Random weighted sum of `y`, so every output entry matters.
fn probe(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
    let w = random_tensor(rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// A layer check: parameter store plus extra input tensors, and a forward
/// mapping them to a scalar.
struct Case {
    store: ParamStore,
    inputs: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    forward: Box<dyn Fn(&mut Graph, &Bound, &[Var]) -> Result<Var, TrainError>>,
}

fn build_case(name: &str, rng: &mut ChaCha8Rng) -> Option<Case> {
    let mut store = ParamStore::new();
    let probe_seed: u64 = rng.random();
    let probed =
        move |g: &mut Graph, y: Var| probe(g, y, &mut ChaCha8Rng::seed_from_u64(probe_seed));
    let case = match name {
        "conv_block" => {
            let block = ConvBlock::new(&mut store, "block", 1, 16, rng);
            let x = random_tensor(rng, &[CHECK_FRAMES, N_BINS, 1], 1.0);
            Case {
                store,
                inputs: vec![x],
                forward: Box::new(move |g, p, xs| {
                    let y = block.forward(g, p, xs[0])?;
                    Ok(probed(g, y)?)
                }),
            }
        }
        "blstm" => {
            let blstm = Blstm::new(&mut store, "blstm", 128, 128, rng);
            let x = random_tensor(rng, &[CHECK_FRAMES, 128], 1.0);
            Case {
                store,
                inputs: vec![x],
                forward: Box::new(move |g, p, xs| {
                    let y = blstm.forward(g, p, xs[0])?;
                    Ok(probed(g, y)?)
                }),
            }
        }
        "gru" => {
            let gru = Gru::new(&mut store, "gru", 128, 128, rng);
            randomize_biases(&mut store, rng);
            let x = random_tensor(rng, &[CHECK_FRAMES, 128], 1.0);
            Case {
                store,
                inputs: vec![x],
                forward: Box::new(move |g, p, xs| {
                    let y = gru.last_hidden(g, p, xs[0])?;
                    Ok(probed(g, y)?)
                }),
            }
        }
        "gqt_attention" => {
            let gqt = GqtLayer::new(&mut store, "gqt", GqtDims::default(), rng);
            randomize_biases(&mut store, rng);
            let x = random_tensor(rng, &[CHECK_FRAMES, 128], 1.0);
            Case {
                store,
                inputs: vec![x],
                forward: Box::new(move |g, p, xs| {
                    let mask = FrameMask::all_valid(CHECK_FRAMES);
                    let y = gqt.quality_embedding(g, p, xs[0], &mask)?;
                    Ok(probed(g, y)?)
                }),
            }
        }
        "encoding_layer" => {
            let k = rng.random_range(1..=10);
            let n = rng.random_range(1..=12);
            let el = EncodingLayer::new(&mut store, "el", k, rng);
            *store.get_mut(el.smoothing()) = random_positive(rng, &[k]);
            let x = random_tensor(rng, &[n, 1], 2.0);
            Case {
                store,
                inputs: vec![x],
                forward: Box::new(move |g, p, xs| {
                    let out = el.forward(g, p, xs[0], &FrameMask::all_valid(n))?;
                    Ok(probed(g, out.encoding)?)
                }),
            }
        }
        "el_pooling" => {
            let pool = ElPooling::new(&mut store, "pool", 10, rng);
            let smoothing = pool.encoding_layer().smoothing();
            *store.get_mut(smoothing) = random_positive(rng, &[10]);
            let n = rng.random_range(2..=12);
            let valid = rng.random_range(1..=n);
            let x = random_tensor(rng, &[n, 1], 2.0);
            Case {
                store,
                inputs: vec![x],
                forward: Box::new(move |g, p, xs| {
                    let y = pool.forward(g, p, xs[0], &FrameMask::prefix(valid, n))?;
                    Ok(g.sum(y))
                }),
            }
        }
        _ => {
            let cfg = ModelConfig::all_variants()
                .into_iter()
                .find(|c| model_check_name(c) == name)?;
            let model = Model::new(cfg.clone(), rng.random());
            let store = model.params().clone();
            let input = match cfg.task {
                Task::Mos => ModelInput::single(random_spec(rng, CHECK_FRAMES)),
                Task::Similarity => ModelInput::pair(
                    random_spec(rng, CHECK_FRAMES),
                    random_spec(rng, CHECK_FRAMES - 1),
                ),
            };
            let target = rng.random_range(1.0..5.0);
            let dropout_seed: u64 = rng.random();
            Case {
                store,
                inputs: Vec::new(),
                forward: Box::new(move |g, p, _| {
                    let out = model.forward(g, p, &input, Mode::Train { dropout_seed })?;
                    utterance_term(
                        g,
                        out.frame_scores,
                        out.utterance_score,
                        &out.mask,
                        target,
                        0.8,
                    )
                }),
            }
        }
    };
    Some(case)
}

fn random_spec(rng: &mut ChaCha8Rng, frames: usize) -> Spectrogram {
    let data = (0..frames * N_BINS)
        .map(|_| rng.random_range(0.0..2.0))
        .collect();
    Spectrogram::from_frames(frames, data).expect("nonnegative")
}

fn random_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.2..2.0)).collect(),
    )
    .expect("shape")
}

/// Zero-initialized biases hide errors in their gradient paths.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(".b_") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random_tensor(rng, &shape, 0.5);
        }
    }
}

/// Runs one named check.
pub fn run_check(name: &str, opts: &GradCheckOptions) -> Result<CheckOutcome, TrainError> {
    if !check_names().iter().any(|n| n == name) {
        return Err(TrainError::UnknownCheck(name.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut outcome = CheckOutcome {
        name: name.to_string(),
        trials: 0,
        coordinates: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for trial in 0..opts.trials {
        let case = build_case(name, &mut rng).expect("name checked above");
        let n_params = case.store.len();
        let mut points: Vec<Tensor> = case.store.values().to_vec();
        points.extend(case.inputs.iter().cloned());
        let fault = opts.inject_fault;
        let f = |g: &mut Graph, vars: &[Var]| -> Result<Var, TensorError> {
            let p = Bound::from_vars(vars[..n_params].to_vec());
            let out = (case.forward)(g, &p, &vars[n_params..]).map_err(|e| match e {
                TrainError::Tensor(t) => t,
                other => TensorError::InvalidArgument {
                    op: "grad_check",
                    reason: other.to_string(),
                },
            })?;
            if !fault {
                return Ok(out);
            }
            // s - s is exactly zero, but only the first `s` carries gradient
            let s = g.sum(vars[0]);
            let frozen = g.constant(g.value(s).clone());
            let zero = g.sub(s, frozen)?;
            g.add(out, zero)
        };
        let selection = CoordinateSelection::Sample {
            per_tensor: opts.coords_per_tensor,
            seed: opts.seed.wrapping_add(trial as u64),
        };
        let report = grad_check_many(f, &points, opts.eps, selection)?;
        outcome.trials += 1;
        outcome.coordinates += report.checked;
        outcome.skipped += report.skipped;
        outcome.max_rel_error = outcome.max_rel_error.max(report.max_rel_error);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckOptions {
        GradCheckOptions {
            trials: 2,
            ..Default::default()
        }
    }

    #[test]
    fn names_cover_layers_and_variants() {
        let names = check_names();
        assert_eq!(names.len(), 14);
        assert!(names.contains(&"simnet_gqt_el".to_string()));
        assert!(matches!(
            run_check("nope", &quick()),
            Err(TrainError::UnknownCheck(_))
        ));
    }

    #[test]
    fn small_layers_pass_and_fault_is_caught() {
        for name in ["encoding_layer", "el_pooling", "gru"] {
            let ok = run_check(name, &quick()).unwrap();
            assert!(ok.passed(), "{ok:?}");
            assert_eq!(ok.trials, 2);
            let bad = run_check(
                name,
                &GradCheckOptions {
                    inject_fault: true,
                    ..quick()
                },
            )
            .unwrap();
            assert!(!bad.passed(), "{bad:?}");
        }
    }
}
