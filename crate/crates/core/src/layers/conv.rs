use rand::Rng;

use super::{Bound, ParamId, ParamStore};
use crate::audio::N_BINS;
use crate::autodiff::{Graph, TensorError, Unfold2d, Var};

/// Per-frame feature width after the four blocks: 32 channels x 4 bins.
pub const FEATURE_DIM: usize = 128;

/// 3x3 convolution with bias and ReLU over a channels-last `[T, F, C]` map.
///
/// Time stride is always 1; `freq_stride` subsamples the frequency axis.
/// Both axes use "same" padding, so `F_out = ceil(F / freq_stride)`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    freq_stride: usize,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        freq_stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = 9 * in_channels;
        let fan_out = 9 * out_channels;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add_uniform(
            format!("{prefix}.weight"),
            &[fan_in, out_channels],
            limit,
            rng,
        );
        let bias = store.add_zeros(format!("{prefix}.bias"), &[out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            freq_stride,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv3x3",
                left: shape,
                right: vec![0, 0, self.in_channels],
            });
        }
        let geom = Unfold2d::same(
            shape[0],
            shape[1],
            self.in_channels,
            (3, 3),
            (1, self.freq_stride),
        );
        let patches = g.unfold(x, geom)?;
        let y = g.matmul(patches, p.var(self.weight))?;
        let y = g.broadcast_add(y, p.var(self.bias))?;
        let y = g.relu(y);
        g.reshape(y, &[geom.out_t, geom.out_f, self.out_channels])
    }
}

/// Two stride-1 convolutions followed by one with frequency stride 3.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    convs: [Conv3x3; 3],
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let convs = [
            Conv3x3::new(
                store,
                &format!("{prefix}.conv0"),
                in_channels,
                channels,
                1,
                rng,
            ),
            Conv3x3::new(
                store,
                &format!("{prefix}.conv1"),
                channels,
                channels,
                1,
                rng,
            ),
            Conv3x3::new(
                store,
                &format!("{prefix}.conv2"),
                channels,
                channels,
                3,
                rng,
            ),
        ];
        Self { convs }
    }

    pub fn convs(&self) -> &[Conv3x3; 3] {
        &self.convs
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var, TensorError> {
        for conv in &self.convs {
            x = conv.forward(g, p, x)?;
        }
        Ok(x)
    }
}

/// Stack of conv blocks mapping `[N, 257, 1]` to `[N, C_last * F_last]`.
#[derive(Clone, Debug)]
pub struct Cnn {
    blocks: Vec<ConvBlock>,
    out_channels: usize,
}

impl Cnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut in_channels = 1;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let block =
                    ConvBlock::new(store, &format!("{prefix}.block{i}"), in_channels, c, rng);
                in_channels = c;
                block
            })
            .collect();
        Self {
            blocks,
            out_channels: in_channels,
        }
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    /// Feature width per frame for a 257-bin input.
    pub fn output_dim(&self) -> usize {
        let bins = self.blocks.iter().fold(N_BINS, |f, _| f.div_ceil(3));
        bins * self.out_channels
    }

    /// Frame features; the time axis is preserved.
    pub fn forward(&self, g: &mut Graph, p: &Bound, spec: Var) -> Result<Var, TensorError> {
        let shape = g.shape(spec).to_vec();
        if shape.len() != 3 || shape[1] != N_BINS || shape[2] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cnn",
                left: shape,
                right: vec![0, N_BINS, 1],
            });
        }
        let mut x = spec;
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        let s = g.shape(x).to_vec();
        g.reshape(x, &[s[0], s[1] * s[2]])
    }
}
