use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Mode, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, TensorError, Var};

/// Per-frame regression head: FC, ReLU, dropout, FC to one score.
#[derive(Clone, Debug)]
pub struct FrameHead {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    dropout: f64,
}

impl FrameHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            (0.0..1.0).contains(&dropout),
            "dropout rate {dropout} outside [0, 1)"
        );
        Self {
            fc1_w: store.add_glorot(format!("{prefix}.fc1.weight"), input, hidden, rng),
            fc1_b: store.add_zeros(format!("{prefix}.fc1.bias"), &[hidden]),
            fc2_w: store.add_glorot(format!("{prefix}.fc2.weight"), hidden, 1, rng),
            fc2_b: store.add_zeros(format!("{prefix}.fc2.bias"), &[1]),
            dropout,
        }
    }

    pub fn fc2_weight(&self) -> ParamId {
        self.fc2_w
    }

    pub fn fc2_bias(&self) -> ParamId {
        self.fc2_b
    }

    /// Frame scores `[N, 1]` from features `[N, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let h = g.matmul(x, p.var(self.fc1_w))?;
        let h = g.broadcast_add(h, p.var(self.fc1_b))?;
        let mut h = g.relu(h);
        if let Mode::Train { dropout_seed } = mode {
            if self.dropout > 0.0 {
                let mask = dropout_mask(g.shape(h), self.dropout, dropout_seed);
                let mask = g.constant(mask);
                h = g.mul(h, mask)?;
            }
        }
        let y = g.matmul(h, p.var(self.fc2_w))?;
        g.broadcast_add(y, p.var(self.fc2_b))
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        };
    }
    t
}
