//! Network building blocks: the convolutional feature extractor, recurrent
//! layers, the quality-token attention layer, the frame-score head and the
//! two pooling routes (plain average and encoding-layer pooling).
//!
//! Layers own only [`ParamId`]s. Values live in a [`ParamStore`] and are
//! placed on a [`Graph`] once per forward pass through [`ParamStore::bind`].

mod conv;
mod gqt;
mod head;
mod params;
mod pooling;
mod recurrent;

pub use conv::{Cnn, Conv3x3, ConvBlock, FEATURE_DIM};
pub use gqt::{apply_quality_skip, GqtAttention, GqtDims, GqtLayer};
pub use head::{dropout_mask, FrameHead};
pub use params::{Bound, ParamId, ParamStore};
pub use pooling::{gap, ElPooling, EncodingLayer, EncodingOutput};
pub use recurrent::{Blstm, Gru, Lstm};

use crate::autodiff::{Graph, TensorError, Var};

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from `dropout_seed`.
    Train {
        dropout_seed: u64,
    },
}

/// Per-frame validity flags; padded frames are `false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask(Vec<bool>);

impl FrameMask {
    pub fn all_valid(n: usize) -> Self {
        Self(vec![true; n])
    }

    /// First `valid` of `len` frames are real.
    pub fn prefix(valid: usize, len: usize) -> Self {
        Self((0..len).map(|i| i < valid).collect())
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    /// Maximal runs of valid frames as `(start, len)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &v) in self.0.iter().chain(std::iter::once(&false)).enumerate() {
            match (v, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        runs
    }
}

/// Rows of `x` (shape `[N, D]`) whose mask flag is set, in order.
pub fn select_rows(
    g: &mut Graph,
    x: Var,
    mask: &FrameMask,
    op: &'static str,
) -> Result<Var, TensorError> {
    let n = g.shape(x)[0];
    if mask.len() != n {
        return Err(TensorError::ShapeMismatch {
            op,
            left: g.shape(x).to_vec(),
            right: vec![mask.len()],
        });
    }
    let runs = mask.runs();
    match runs.as_slice() {
        [] => Err(TensorError::InvalidArgument {
            op,
            reason: "mask has no valid frames".into(),
        }),
        [(0, len)] if *len == n => Ok(x),
        _ => {
            let parts = runs
                .iter()
                .map(|&(s, len)| g.slice(x, 0, s, len))
                .collect::<Result<Vec<_>, _>>()?;
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                g.concat(&parts, 0)
            }
        }
    }
}
