//! Global quality tokens.
//!
//! A GRU summarizes the shared CNN's frame features into a reference
//! embedding. Multi-head attention then scores a bank of learned tokens
//! against that embedding and returns a convex combination of their value
//! projections, one per head, concatenated. The result is added to every
//! frame feature before the BLSTM.

use rand::Rng;

use super::{select_rows, Bound, FrameMask, Gru, ParamId, ParamStore};
use crate::autodiff::{Graph, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GqtDims {
    pub input_dim: usize,
    pub gru_hidden: usize,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub n_heads: usize,
    /// Quality-embedding width; split evenly across heads.
    pub out_dim: usize,
}

impl Default for GqtDims {
    fn default() -> Self {
        Self {
            input_dim: 128,
            gru_hidden: 128,
            n_tokens: 10,
            token_dim: 128,
            n_heads: 8,
            out_dim: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GqtLayer {
    dims: GqtDims,
    gru: Gru,
    tokens: ParamId,
    w_query: ParamId,
    w_key: ParamId,
    w_value: ParamId,
}

/// Attention result: the embedding `[1, out_dim]` and each head's token
/// weights `[1, n_tokens]`.
#[derive(Clone, Debug)]
pub struct GqtAttention {
    pub embedding: Var,
    pub head_weights: Vec<Var>,
}

impl GqtLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: GqtDims, rng: &mut impl Rng) -> Self {
        assert!(
            dims.out_dim.is_multiple_of(dims.n_heads),
            "embedding width {} not divisible by {} heads",
            dims.out_dim,
            dims.n_heads
        );
        let gru = Gru::new(
            store,
            &format!("{prefix}.gru"),
            dims.input_dim,
            dims.gru_hidden,
            rng,
        );
        let tokens = store.add_uniform(
            format!("{prefix}.tokens"),
            &[dims.n_tokens, dims.token_dim],
            0.5,
            rng,
        );
        let w_query = store.add_glorot(
            format!("{prefix}.w_query"),
            dims.gru_hidden,
            dims.out_dim,
            rng,
        );
        let w_key = store.add_glorot(format!("{prefix}.w_key"), dims.token_dim, dims.out_dim, rng);
        let w_value = store.add_glorot(
            format!("{prefix}.w_value"),
            dims.token_dim,
            dims.out_dim,
            rng,
        );
        Self {
            dims,
            gru,
            tokens,
            w_query,
            w_key,
            w_value,
        }
    }

    pub fn dims(&self) -> GqtDims {
        self.dims
    }

    /// GRU last hidden state over the valid rows of `features`.
    pub fn reference_embedding(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: Var,
        mask: &FrameMask,
    ) -> Result<Var, TensorError> {
        let rows = select_rows(g, features, mask, "gqt_reference")?;
        self.gru.last_hidden(g, p, rows)
    }

    /// Multi-head attention of a `[1, gru_hidden]` reference over the tokens.
    pub fn attend(
        &self,
        g: &mut Graph,
        p: &Bound,
        reference: Var,
    ) -> Result<GqtAttention, TensorError> {
        let d = self.dims;
        let head_dim = d.out_dim / d.n_heads;
        let query = g.matmul(reference, p.var(self.w_query))?;
        let tokens = g.tanh(p.var(self.tokens));
        let keys = g.matmul(tokens, p.var(self.w_key))?;
        let values = g.matmul(tokens, p.var(self.w_value))?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(d.n_heads);
        let mut head_weights = Vec::with_capacity(d.n_heads);
        for h in 0..d.n_heads {
            let q = g.slice(query, 1, h * head_dim, head_dim)?;
            let k = g.slice(keys, 1, h * head_dim, head_dim)?;
            let v = g.slice(values, 1, h * head_dim, head_dim)?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, scale);
            let w = g.softmax_lastdim(logits);
            heads.push(g.matmul(w, v)?);
            head_weights.push(w);
        }
        let embedding = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        Ok(GqtAttention {
            embedding,
            head_weights,
        })
    }

    /// Reference encoding followed by attention: the quality embedding.
    pub fn quality_embedding(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: Var,
        mask: &FrameMask,
    ) -> Result<Var, TensorError> {
        let reference = self.reference_embedding(g, p, features, mask)?;
        Ok(self.attend(g, p, reference)?.embedding)
    }
}

/// Adds the quality embedding to every frame feature row.
pub fn apply_quality_skip(g: &mut Graph, features: Var, quality: Var) -> Result<Var, TensorError> {
    let (fs, qs) = (g.shape(features).to_vec(), g.shape(quality).to_vec());
    if fs.len() != 2 || qs.iter().product::<usize>() != fs[1] {
        return Err(TensorError::ShapeMismatch {
            op: "apply_quality_skip",
            left: fs,
            right: qs,
        });
    }
    g.broadcast_add(features, quality)
}
