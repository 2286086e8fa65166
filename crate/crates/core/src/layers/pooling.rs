//! Utterance-level pooling of frame scores.
//!
//! [`gap`] averages valid frame scores. [`EncodingLayer`] treats each valid
//! frame score `x_i` as a one-dimensional descriptor and, for `K` learned
//! codewords `c_k` with smoothing factors `s_k`, produces
//!
//! ```text
//! r_ik = x_i - c_k
//! w_ik = exp(-s_k r_ik^2) / sum_j exp(-s_j r_ij^2)
//! e_k  = sum_i w_ik r_ik
//! ```
//!
//! [`ElPooling`] runs both in parallel and maps `[e_1..e_K, mean]` through a
//! linear layer to the utterance score.

use rand::Rng;

use super::{select_rows, Bound, FrameMask, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, TensorError, Var};

/// Mean of the valid frame scores as a `[1, 1]` tensor.
pub fn gap(g: &mut Graph, scores: Var, mask: &FrameMask) -> Result<Var, TensorError> {
    let valid = select_rows(g, scores, mask, "gap")?;
    let m = g.mean(valid);
    g.reshape(m, &[1, 1])
}

#[derive(Clone, Debug)]
pub struct EncodingLayer {
    codewords: ParamId,
    smoothing: ParamId,
    k: usize,
}

/// `encoding` is `[1, K]`; `weights` is `[M, K]` over the `M` valid frames.
#[derive(Clone, Debug)]
pub struct EncodingOutput {
    pub encoding: Var,
    pub weights: Var,
}

impl EncodingLayer {
    /// Codewords uniform in `[-1, 1] / sqrt(K)`, smoothing factors 1.
    pub fn new(store: &mut ParamStore, prefix: &str, k: usize, rng: &mut impl Rng) -> Self {
        let codewords = store.add_uniform(
            format!("{prefix}.codewords"),
            &[k],
            1.0 / (k as f64).sqrt(),
            rng,
        );
        let smoothing = store.add(format!("{prefix}.smoothing"), Tensor::ones(&[k]));
        Self {
            codewords,
            smoothing,
            k,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn codewords(&self) -> ParamId {
        self.codewords
    }

    pub fn smoothing(&self) -> ParamId {
        self.smoothing
    }

    /// Residual encoding of the valid entries of `scores` (`[N, 1]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        scores: Var,
        mask: &FrameMask,
    ) -> Result<EncodingOutput, TensorError> {
        if g.shape(scores).len() != 2 || g.shape(scores)[1] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "encoding_layer",
                left: g.shape(scores).to_vec(),
                right: vec![0, 1],
            });
        }
        let x = select_rows(g, scores, mask, "encoding_layer")?;
        let m = g.shape(x)[0];
        let k = self.k;
        let ones_k = g.constant(Tensor::ones(&[1, k]));
        let ones_m = g.constant(Tensor::ones(&[m, 1]));
        let ones_row = g.constant(Tensor::ones(&[1, m]));

        // r_ik = x_i - c_k
        let x_wide = g.matmul(x, ones_k)?;
        let neg_c = g.neg(p.var(self.codewords));
        let residual = g.broadcast_add(x_wide, neg_c)?;
        // w_ik = softmax_k(-s_k r_ik^2)
        let sq = g.square(residual);
        let s_row = g.reshape(p.var(self.smoothing), &[1, k])?;
        let s_wide = g.matmul(ones_m, s_row)?;
        let scaled = g.mul(s_wide, sq)?;
        let logits = g.neg(scaled);
        let weights = g.softmax_lastdim(logits);
        // e_k = sum_i w_ik r_ik
        let weighted = g.mul(weights, residual)?;
        let encoding = g.matmul(ones_row, weighted)?;
        Ok(EncodingOutput { encoding, weights })
    }
}

/// Encoding layer in parallel with GAP, then a linear map of
/// `[e_1, .., e_K, mean]` to one score.
#[derive(Clone, Debug)]
pub struct ElPooling {
    encoding: EncodingLayer,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ElPooling {
    pub fn new(store: &mut ParamStore, prefix: &str, k: usize, rng: &mut impl Rng) -> Self {
        let encoding = EncodingLayer::new(store, &format!("{prefix}.encoding"), k, rng);
        Self {
            encoding,
            fc_w: store.add_glorot(format!("{prefix}.fc.weight"), k + 1, 1, rng),
            fc_b: store.add_zeros(format!("{prefix}.fc.bias"), &[1]),
        }
    }

    pub fn encoding_layer(&self) -> &EncodingLayer {
        &self.encoding
    }

    pub fn fc_weight(&self) -> ParamId {
        self.fc_w
    }

    pub fn fc_bias(&self) -> ParamId {
        self.fc_b
    }

    /// Makes the pooled score equal the plain average: weight 1 on the mean
    /// slot, 0 elsewhere, zero bias.
    pub fn select_gap_slot(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.fc_w).data_mut();
        w.fill(0.0);
        *w.last_mut().expect("k + 1 weights") = 1.0;
        store.get_mut(self.fc_b).data_mut().fill(0.0);
    }

    /// Utterance score `[1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        scores: Var,
        mask: &FrameMask,
    ) -> Result<Var, TensorError> {
        let enc = self.encoding.forward(g, p, scores, mask)?;
        let avg = gap(g, scores, mask)?;
        let joined = g.concat(&[enc.encoding, avg], 1)?;
        let y = g.matmul(joined, p.var(self.fc_w))?;
        g.broadcast_add(y, p.var(self.fc_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    fn layer(c: &[f64], s: &[f64]) -> (ParamStore, EncodingLayer) {
        let mut store = ParamStore::new();
        let el = EncodingLayer::new(&mut store, "el", c.len(), &mut ChaCha8Rng::seed_from_u64(0));
        store.get_mut(el.codewords).data_mut().copy_from_slice(c);
        store.get_mut(el.smoothing).data_mut().copy_from_slice(s);
        (store, el)
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::new();
        let x = scores(&mut g, &[1.0, 2.0, 3.0]);
        let all = gap(&mut g, x, &FrameMask::all_valid(3)).unwrap();
        assert_eq!(g.value(all).data(), &[2.0]);
        let part = gap(&mut g, x, &FrameMask::prefix(2, 3)).unwrap();
        assert_eq!(g.value(part).data(), &[1.5]);
        let one = scores(&mut g, &[4.5]);
        let single = gap(&mut g, one, &FrameMask::all_valid(1)).unwrap();
        assert_eq!(g.value(single).data(), &[4.5]);
        assert!(gap(&mut g, x, &FrameMask::prefix(0, 3)).is_err());
    }

    #[test]
    fn single_codeword_sums_inputs() {
        let (store, el) = layer(&[0.0], &[2.7]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = scores(&mut g, &[1.0, 2.0]);
        let out = el.forward(&mut g, &p, x, &FrameMask::all_valid(2)).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0, 1.0]);
        assert_eq!(g.value(out.encoding).data(), &[3.0]);
    }

    #[test]
    fn two_codeword_example() {
        let (store, el) = layer(&[0.0, 3.0], &[1.0, 1.0]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = scores(&mut g, &[1.0]);
        let out = el.forward(&mut g, &p, x, &FrameMask::all_valid(1)).unwrap();
        let w = g.value(out.weights).data();
        let e = g.value(out.encoding).data();
        // exp(-1) / (exp(-1) + exp(-4)) = 1 / (1 + e^-3)
        let w0 = 1.0 / (1.0 + (-3f64).exp());
        assert!((w[0] - w0).abs() < 1e-15 && (w[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((w[0] - 0.95257).abs() < 1e-5);
        assert!((e[0] - 0.95257).abs() < 1e-5);
        assert!((e[1] - -0.09486).abs() < 1e-5);
    }

    #[test]
    fn frames_at_codeword_contribute_nothing() {
        let (store, el) = layer(&[1.5, -2.0, 0.25], &[0.5, 1.0, 3.0]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = scores(&mut g, &[1.5, 1.5, 1.5]);
        let out = el.forward(&mut g, &p, x, &FrameMask::all_valid(3)).unwrap();
        assert_eq!(g.value(out.encoding).data()[0], 0.0);
    }

    #[test]
    fn masked_frames_are_ignored() {
        let (store, el) = layer(&[0.3, -0.6], &[1.0, 2.0]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let padded = scores(&mut g, &[1.0, 2.0, 99.0]);
        let plain = scores(&mut g, &[1.0, 2.0]);
        let a = el
            .forward(&mut g, &p, padded, &FrameMask::prefix(2, 3))
            .unwrap();
        let b = el
            .forward(&mut g, &p, plain, &FrameMask::all_valid(2))
            .unwrap();
        assert_eq!(g.value(a.encoding), g.value(b.encoding));
        let none = FrameMask::prefix(0, 3);
        assert!(el.forward(&mut g, &p, padded, &none).is_err());
    }

    #[test]
    fn gap_slot_recovers_average() {
        let mut store = ParamStore::new();
        let pool = ElPooling::new(&mut store, "pool", 10, &mut ChaCha8Rng::seed_from_u64(8));
        pool.select_gap_slot(&mut store);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = scores(&mut g, &[3.1, 2.2, 4.7, 1.9]);
        let mask = FrameMask::all_valid(4);
        let pooled = pool.forward(&mut g, &p, x, &mask).unwrap();
        let avg = gap(&mut g, x, &mask).unwrap();
        assert_eq!(g.value(pooled), g.value(avg));
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let mut store = ParamStore::new();
        let pool = ElPooling::new(&mut store, "pool", 10, &mut ChaCha8Rng::seed_from_u64(8));
        let run = |v: &[f64]| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let x = scores(&mut g, v);
            let y = pool
                .forward(&mut g, &p, x, &FrameMask::all_valid(v.len()))
                .unwrap();
            g.value(y).data()[0]
        };
        let a = run(&[0.5, 2.5, -1.0, 3.0, 1.25]);
        let b = run(&[3.0, -1.0, 1.25, 0.5, 2.5]);
        assert!((a - b).abs() < 1e-9);
    }
}
