use rand::Rng;

use super::{Bound, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, TensorError, Var};

/// Single-direction LSTM with gate layout `[input, forget, output, cell]`.
#[derive(Clone, Debug)]
pub struct Lstm {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_ih = store.add_glorot(format!("{prefix}.w_ih"), input, 4 * hidden, rng);
        let w_hh = store.add_glorot(format!("{prefix}.w_hh"), hidden, 4 * hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{prefix}.bias"), b);
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Hidden states `[N, H]` in input order; `reverse` scans from the end.
    /// Initial hidden and cell states are zero.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        reverse: bool,
    ) -> Result<Var, TensorError> {
        let h = self.hidden;
        let n = g.shape(x)[0];
        let xw = g.matmul(x, p.var(self.w_ih))?;
        let xw = g.broadcast_add(xw, p.var(self.bias))?;
        let mut state: Option<(Var, Var)> = None;
        let mut outputs = vec![None; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let mut z = g.slice(xw, 0, t, 1)?;
            if let Some((h_prev, _)) = state {
                let hw = g.matmul(h_prev, p.var(self.w_hh))?;
                z = g.add(z, hw)?;
            }
            let gates = g.slice(z, 1, 0, 3 * h)?;
            let gates = g.sigmoid(gates);
            let cand = g.slice(z, 1, 3 * h, h)?;
            let cand = g.tanh(cand);
            let i = g.slice(gates, 1, 0, h)?;
            let f = g.slice(gates, 1, h, h)?;
            let o = g.slice(gates, 1, 2 * h, h)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let keep = g.mul(f, c_prev)?;
                c = g.add(c, keep)?;
            }
            let tc = g.tanh(c);
            let h_new = g.mul(o, tc)?;
            state = Some((h_new, c));
            outputs[t] = Some(h_new);
        }
        let outputs: Vec<Var> = outputs
            .into_iter()
            .map(|v| v.expect("every step ran"))
            .collect();
        g.concat(&outputs, 0)
    }
}

/// Forward and backward LSTMs, outputs concatenated per frame: `[N, 2H]`.
#[derive(Clone, Debug)]
pub struct Blstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl Blstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        if g.shape(x).len() != 2 || g.shape(x)[0] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "blstm",
                reason: format!("expects non-empty [N, D] input, got {:?}", g.shape(x)),
            });
        }
        let a = self.fwd.forward(g, p, x, false)?;
        let b = self.bwd.forward(g, p, x, true)?;
        g.concat(&[a, b], 1)
    }
}

/// GRU with reset gate applied after the recurrent projection:
/// `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`, `h' = (1 - z) n + z h`.
#[derive(Clone, Debug)]
pub struct Gru {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w_ih: store.add_glorot(format!("{prefix}.w_ih"), input, 3 * hidden, rng),
            w_hh: store.add_glorot(format!("{prefix}.w_hh"), hidden, 3 * hidden, rng),
            b_ih: store.add_zeros(format!("{prefix}.b_ih"), &[3 * hidden]),
            b_hh: store.add_zeros(format!("{prefix}.b_hh"), &[3 * hidden]),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Final hidden state `[1, H]` after scanning all rows of `x`, starting
    /// from a zero state.
    pub fn last_hidden(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.hidden;
        let n = g.shape(x)[0];
        let xw = g.matmul(x, p.var(self.w_ih))?;
        let xw = g.broadcast_add(xw, p.var(self.b_ih))?;
        let mut state = g.constant(Tensor::zeros(&[1, h]));
        for t in 0..n {
            let xt = g.slice(xw, 0, t, 1)?;
            let hw = g.matmul(state, p.var(self.w_hh))?;
            let hw = g.broadcast_add(hw, p.var(self.b_hh))?;
            let x_rz = g.slice(xt, 1, 0, 2 * h)?;
            let h_rz = g.slice(hw, 1, 0, 2 * h)?;
            let rz = g.add(x_rz, h_rz)?;
            let rz = g.sigmoid(rz);
            let r = g.slice(rz, 1, 0, h)?;
            let z = g.slice(rz, 1, h, h)?;
            let x_n = g.slice(xt, 1, 2 * h, h)?;
            let h_n = g.slice(hw, 1, 2 * h, h)?;
            let gated = g.mul(r, h_n)?;
            let cand = g.add(x_n, gated)?;
            let cand = g.tanh(cand);
            // h' = n + z * (h - n)
            let diff = g.sub(state, cand)?;
            let keep = g.mul(z, diff)?;
            state = g.add(cand, keep)?;
        }
        Ok(state)
    }
}
