//! The QRNN language model: a tied embedding, stacked QRNN layers (masked
//! temporal convolution followed by fo-pooling) and a softmax output that
//! reuses the embedding matrix.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{self, count, matmul, Matrix, OpCounter, Real, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("expected {expected} layer states, got {got}")]
    StateMismatch { expected: usize, got: usize },
    #[error("layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Output channels per layer. The last entry must equal `embed_dim` so
    /// the output projection can share the embedding matrix.
    pub hidden_sizes: Vec<usize>,
    /// Convolution window per layer.
    pub window_sizes: Vec<usize>,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_sizes: Vec<usize>,
        window_sizes: Vec<usize>,
    ) -> Result<Self, ModelError> {
        let cfg = Self {
            vocab_size,
            embed_dim,
            num_layers: hidden_sizes.len(),
            hidden_sizes,
            window_sizes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return bad("vocab_size and embed_dim must be positive".into());
        }
        if self.num_layers == 0 {
            return bad("at least one QRNN layer is required".into());
        }
        if self.hidden_sizes.len() != self.num_layers || self.window_sizes.len() != self.num_layers
        {
            return bad(format!(
                "num_layers = {} but {} hidden sizes and {} window sizes given",
                self.num_layers,
                self.hidden_sizes.len(),
                self.window_sizes.len()
            ));
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive".into());
        }
        if self.window_sizes.contains(&0) {
            return bad("window sizes must be at least 1".into());
        }
        if *self.hidden_sizes.last().unwrap() != self.embed_dim {
            return bad(format!(
                "last hidden size {} must equal embed_dim {} for weight tying",
                self.hidden_sizes.last().unwrap(),
                self.embed_dim
            ));
        }
        Ok(())
    }

    /// Input channels `k` of layer `l`.
    pub fn input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.hidden_sizes[l - 1]
        }
    }

    /// Width `s = k·r` of layer `l`'s weight matrices.
    pub fn stacked_dim(&self, l: usize) -> usize {
        self.input_dim(l) * self.window_sizes[l]
    }
}

/// The three convolution gates of a QRNN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    Z,
    F,
    O,
}

impl Gate {
    pub const ALL: [Gate; 3] = [Gate::Z, Gate::F, Gate::O];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Z => "z",
            Gate::F => "f",
            Gate::O => "o",
        }
    }
}

/// `W_z`, `W_f`, `W_o` of one layer, each `m × (k·r)`. Column block `j`
/// multiplies the input at time `t − (r−1) + j`, so the last block always
/// sees the current input.
#[derive(Debug, Clone, PartialEq)]
pub struct QrnnLayerWeights<T> {
    pub w_z: Matrix<T>,
    pub w_f: Matrix<T>,
    pub w_o: Matrix<T>,
    input_dim: usize,
    window: usize,
}

impl<T: Real> QrnnLayerWeights<T> {
    pub fn new(
        w_z: Matrix<T>,
        w_f: Matrix<T>,
        w_o: Matrix<T>,
        input_dim: usize,
        window: usize,
    ) -> Result<Self, ModelError> {
        if w_z.shape() != w_f.shape() || w_z.shape() != w_o.shape() {
            return Err(ModelError::InvalidConfig(format!(
                "gate weights differ in shape: {:?} {:?} {:?}",
                w_z.shape(),
                w_f.shape(),
                w_o.shape()
            )));
        }
        if window == 0 || w_z.cols() != input_dim * window {
            return Err(ModelError::InvalidConfig(format!(
                "gate weights have {} columns, expected {input_dim}x{window}",
                w_z.cols()
            )));
        }
        Ok(Self {
            w_z,
            w_f,
            w_o,
            input_dim,
            window,
        })
    }

    pub fn zeros(hidden: usize, input_dim: usize, window: usize) -> Self {
        let s = input_dim * window;
        Self {
            w_z: Matrix::zeros(hidden, s),
            w_f: Matrix::zeros(hidden, s),
            w_o: Matrix::zeros(hidden, s),
            input_dim,
            window,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn gate(&self, g: Gate) -> &Matrix<T> {
        match g {
            Gate::Z => &self.w_z,
            Gate::F => &self.w_f,
            Gate::O => &self.w_o,
        }
    }

    pub fn gate_mut(&mut self, g: Gate) -> &mut Matrix<T> {
        match g {
            Gate::Z => &mut self.w_z,
            Gate::F => &mut self.w_f,
            Gate::O => &mut self.w_o,
        }
    }

    pub fn cast<U: Real>(&self) -> QrnnLayerWeights<U> {
        QrnnLayerWeights {
            w_z: self.w_z.cast(),
            w_f: self.w_f.cast(),
            w_o: self.w_o.cast(),
            input_dim: self.input_dim,
            window: self.window,
        }
    }
}

/// Recurrent state of one layer during incremental inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    /// Cell state `c`.
    pub c: Vec<T>,
    /// The last `r−1` inputs, oldest first.
    pub history: VecDeque<Vec<T>>,
}

impl<T: Real> LayerState<T> {
    pub fn new(hidden: usize, input_dim: usize, window: usize) -> Self {
        Self {
            c: vec![T::zero(); hidden],
            history: (0..window - 1)
                .map(|_| vec![T::zero(); input_dim])
                .collect(),
        }
    }
}

/// The network being pruned. Immutable once built; all inference takes
/// `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct QrnnModel<T> {
    config: ModelConfig,
    embedding: Matrix<T>,
    layers: Vec<QrnnLayerWeights<T>>,
}

impl<T: Real> QrnnModel<T> {
    pub fn new(
        config: ModelConfig,
        embedding: Matrix<T>,
        layers: Vec<QrnnLayerWeights<T>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if embedding.shape() != (config.vocab_size, config.embed_dim) {
            return Err(ModelError::InvalidConfig(format!(
                "embedding is {:?}, expected ({}, {})",
                embedding.shape(),
                config.vocab_size,
                config.embed_dim
            )));
        }
        if layers.len() != config.num_layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} layers given for num_layers = {}",
                layers.len(),
                config.num_layers
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let expect = (config.hidden_sizes[l], config.stacked_dim(l));
            if layer.w_z.shape() != expect
                || layer.window != config.window_sizes[l]
                || layer.input_dim != config.input_dim(l)
            {
                return Err(ModelError::InvalidConfig(format!(
                    "layer {l} weights are {:?} (window {}), expected {:?} (window {})",
                    layer.w_z.shape(),
                    layer.window,
                    expect,
                    config.window_sizes[l]
                )));
            }
        }
        Ok(Self {
            config,
            embedding,
            layers,
        })
    }

    /// All-zero weights.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|l| {
                QrnnLayerWeights::zeros(
                    config.hidden_sizes[l],
                    config.input_dim(l),
                    config.window_sizes[l],
                )
            })
            .collect();
        let embedding = Matrix::zeros(config.vocab_size, config.embed_dim);
        Self::new(config, embedding, layers)
    }

    /// Embedding entries uniform in ±0.1; gate weights uniform in ±1/√s.
    pub fn init_random<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        Self::init_uniform(config, rng, 0.1, None)
    }

    /// Uniform initialization with an explicit gate-weight range (defaults to
    /// ±1/√s when `None`).
    pub fn init_uniform<R: Rng>(
        config: ModelConfig,
        rng: &mut R,
        embed_range: f64,
        weight_range: Option<f64>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut fill = |rows: usize, cols: usize, range: f64| {
            let data = (0..rows * cols)
                .map(|_| T::of(rng.random_range(-range..=range)))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        let embedding = fill(config.vocab_size, config.embed_dim, embed_range);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let (m, s) = (config.hidden_sizes[l], config.stacked_dim(l));
            let range = weight_range.unwrap_or(1.0 / (s as f64).sqrt());
            layers.push(QrnnLayerWeights {
                w_z: fill(m, s, range),
                w_f: fill(m, s, range),
                w_o: fill(m, s, range),
                input_dim: config.input_dim(l),
                window: config.window_sizes[l],
            });
        }
        Self::new(config, embedding, layers)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix<T> {
        &self.embedding
    }

    /// The output projection. Tied to the embedding: this is the same matrix.
    pub fn output_projection(&self) -> &Matrix<T> {
        &self.embedding
    }

    pub fn embedding_mut(&mut self) -> &mut Matrix<T> {
        &mut self.embedding
    }

    pub fn layers(&self) -> &[QrnnLayerWeights<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut QrnnLayerWeights<T> {
        &mut self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn initial_states(&self) -> Vec<LayerState<T>> {
        self.layers
            .iter()
            .map(|l| LayerState::new(l.hidden(), l.input_dim, l.window))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> QrnnModel<U> {
        QrnnModel {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(QrnnLayerWeights::cast).collect(),
        }
    }

    /// SHA-256 over every weight (as little-endian f64), used to prove that
    /// training routines leave frozen weights untouched.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |m: &Matrix<T>| {
            for x in m.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        };
        feed(&self.embedding);
        for layer in &self.layers {
            for g in Gate::ALL {
                feed(layer.gate(g));
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Result<Matrix<T>, ModelError> {
        let d = self.config.embed_dim;
        let mut x = Matrix::zeros(d, tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: tok,
                    vocab: self.config.vocab_size,
                });
            }
            x.set_col(t, self.embedding.row(tok as usize));
        }
        Ok(x)
    }

    /// Full-sequence forward from zero state. Returns `vocab × n` logits.
    pub fn forward(
        &self,
        tokens: &[u32],
        counter: Option<&mut OpCounter>,
    ) -> Result<Matrix<T>, ModelError> {
        let mut states = self.initial_states();
        self.forward_from(tokens, &mut states, counter)
    }

    /// Forward continuing from (and updating) `states`.
    pub fn forward_from(
        &self,
        tokens: &[u32],
        states: &mut [LayerState<T>],
        counter: Option<&mut OpCounter>,
    ) -> Result<Matrix<T>, ModelError> {
        self.forward_gated(tokens, states, None, counter)
    }

    /// Forward where each prunable layer's `W_z` pre-activation rows are
    /// scaled by `z_scale[l]` (layers beyond the slice are ungated).
    pub fn forward_gated(
        &self,
        tokens: &[u32],
        states: &mut [LayerState<T>],
        z_scale: Option<&[Vec<T>]>,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<Matrix<T>, ModelError> {
        let h = self.hidden_outputs(tokens, states, z_scale, counter.as_deref_mut())?;
        let last = h.last().expect("at least one layer");
        Ok(matmul(&self.embedding, last, counter)?)
    }

    /// Per-layer hidden outputs `H` (each `m_l × n`), updating `states`.
    pub fn hidden_outputs(
        &self,
        tokens: &[u32],
        states: &mut [LayerState<T>],
        z_scale: Option<&[Vec<T>]>,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<Vec<Matrix<T>>, ModelError> {
        if states.len() != self.layers.len() {
            return Err(ModelError::StateMismatch {
                expected: self.layers.len(),
                got: states.len(),
            });
        }
        let mut x = self.embed(tokens)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (l, (layer, state)) in self.layers.iter().zip(states.iter_mut()).enumerate() {
            let scale = z_scale.and_then(|s| s.get(l)).map(Vec::as_slice);
            let h = run_layer(layer, &x, state, scale, counter.as_deref_mut())?;
            outputs.push(h);
            x = outputs.last().unwrap().clone();
        }
        Ok(outputs)
    }

    /// Consumes one token and returns its next-token logits.
    pub fn step(&self, states: &mut [LayerState<T>], token: u32) -> Result<Vec<T>, ModelError> {
        Ok(self.forward_from(&[token], states, None)?.into_data())
    }

    /// Like [`step`](Self::step) but counting operations.
    pub fn step_counted(
        &self,
        states: &mut [LayerState<T>],
        token: u32,
        counter: &mut OpCounter,
    ) -> Result<Vec<T>, ModelError> {
        Ok(self
            .forward_from(&[token], states, Some(counter))?
            .into_data())
    }
}

/// Parameters in order: embedding, then `W_z`, `W_f`, `W_o` of each layer.
impl<T: Real> crate::grad::Trainable<T> for QrnnModel<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut out = vec![self.embedding.data()];
        for layer in &self.layers {
            out.extend([layer.w_z.data(), layer.w_f.data(), layer.w_o.data()]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.embedding.data_mut()];
        for layer in &mut self.layers {
            out.push(layer.w_z.data_mut());
            out.push(layer.w_f.data_mut());
            out.push(layer.w_o.data_mut());
        }
        out
    }
}

/// Builds the `(k·r) × n` windowed input. Positions before the sequence
/// start come from `history` (zeros for a fresh state).
pub(crate) fn stack_window<T: Real>(
    x: &Matrix<T>,
    window: usize,
    history: &VecDeque<Vec<T>>,
) -> Matrix<T> {
    let (k, n) = x.shape();
    let lag = window - 1;
    let mut out = Matrix::zeros(k * window, n);
    for j in 0..window {
        for t in 0..n {
            // Source time index relative to the sequence start.
            let src = t as isize - lag as isize + j as isize;
            if src >= 0 {
                for i in 0..k {
                    out.set(j * k + i, t, x.get(i, src as usize));
                }
            } else {
                let hist = &history[(lag as isize + src) as usize];
                for i in 0..k {
                    out.set(j * k + i, t, hist[i]);
                }
            }
        }
    }
    out
}

/// History after consuming `x`: the last `r−1` inputs.
pub(crate) fn advance_history<T: Real>(x: &Matrix<T>, history: &mut VecDeque<Vec<T>>) {
    let lag = history.len();
    for t in 0..x.cols() {
        if lag == 0 {
            break;
        }
        history.pop_front();
        history.push_back(x.col(t));
    }
}

/// Masked convolution from a zero-padded start: returns `(Z, F, O)` after
/// their activations.
pub fn masked_conv<T: Real>(
    layer: &QrnnLayerWeights<T>,
    inputs: &Matrix<T>,
    counter: Option<&mut OpCounter>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), ModelError> {
    if inputs.rows() != layer.input_dim {
        return Err(ModelError::ChannelMismatch {
            expected: layer.input_dim,
            got: inputs.rows(),
        });
    }
    let history = (0..layer.window - 1)
        .map(|_| vec![T::zero(); layer.input_dim])
        .collect();
    let stacked = stack_window(inputs, layer.window, &history);
    let (z, f, o) = gate_preactivations(layer, &stacked, None, counter)?;
    Ok((tensor::tanh(&z), tensor::sigmoid(&f), tensor::sigmoid(&o)))
}

pub(crate) fn gate_preactivations<T: Real>(
    layer: &QrnnLayerWeights<T>,
    stacked: &Matrix<T>,
    z_scale: Option<&[T]>,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), ModelError> {
    let mut z = matmul(&layer.w_z, stacked, counter.as_deref_mut())?;
    let f = matmul(&layer.w_f, stacked, counter.as_deref_mut())?;
    let o = matmul(&layer.w_o, stacked, counter)?;
    if let Some(scale) = z_scale {
        if scale.len() != z.rows() {
            return Err(ModelError::ChannelMismatch {
                expected: z.rows(),
                got: scale.len(),
            });
        }
        for (i, &s) in scale.iter().enumerate() {
            for v in z.row_mut(i) {
                *v = *v * s;
            }
        }
    }
    Ok((z, f, o))
}

/// fo-pooling: `c_t = f_t ⊙ c_{t−1} + (1 − f_t) ⊙ z_t`, `h_t = o_t ⊙ c_t`.
/// Returns all `h_t` and the final cell state. Counts 3 multiplications and
/// 2 additions per channel per step.
pub fn fo_pool<T: Real>(
    z: &Matrix<T>,
    f: &Matrix<T>,
    o: &Matrix<T>,
    c0: &[T],
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix<T>, Vec<T>), ModelError> {
    if z.shape() != f.shape() || z.shape() != o.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "fo_pool",
            left: z.shape(),
            right: if z.shape() != f.shape() {
                f.shape()
            } else {
                o.shape()
            },
        }
        .into());
    }
    let (m, n) = z.shape();
    if c0.len() != m {
        return Err(ModelError::ChannelMismatch {
            expected: m,
            got: c0.len(),
        });
    }
    let mut h = Matrix::zeros(m, n);
    let mut c = c0.to_vec();
    for i in 0..m {
        let (zr, fr, or) = (z.row(i), f.row(i), o.row(i));
        let hr = h.row_mut(i);
        let mut ci = c[i];
        for t in 0..n {
            ci = fr[t] * ci + (T::one() - fr[t]) * zr[t];
            hr[t] = or[t] * ci;
        }
        c[i] = ci;
    }
    let cells = (m * n) as u64;
    count(&mut counter, 3 * cells, 2 * cells);
    Ok((h, c))
}

fn run_layer<T: Real>(
    layer: &QrnnLayerWeights<T>,
    x: &Matrix<T>,
    state: &mut LayerState<T>,
    z_scale: Option<&[T]>,
    mut counter: Option<&mut OpCounter>,
) -> Result<Matrix<T>, ModelError> {
    if x.rows() != layer.input_dim {
        return Err(ModelError::ChannelMismatch {
            expected: layer.input_dim,
            got: x.rows(),
        });
    }
    if state.c.len() != layer.hidden() || state.history.len() != layer.window - 1 {
        return Err(ModelError::StateMismatch {
            expected: layer.hidden(),
            got: state.c.len(),
        });
    }
    let stacked = stack_window(x, layer.window, &state.history);
    let (z, f, o) = gate_preactivations(layer, &stacked, z_scale, counter.as_deref_mut())?;
    let (h, c) = fo_pool(
        &tensor::tanh(&z),
        &tensor::sigmoid(&f),
        &tensor::sigmoid(&o),
        &state.c,
        counter,
    )?;
    state.c = c;
    advance_history(x, &mut state.history);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> QrnnModel<f64> {
        let cfg = ModelConfig::new(11, 4, vec![6, 4], vec![2, 1]).unwrap();
        QrnnModel::init_uniform(cfg, &mut ChaCha8Rng::seed_from_u64(seed), 0.5, Some(0.6)).unwrap()
    }

    #[test]
    fn config_requires_tied_last_layer() {
        assert!(ModelConfig::new(10, 4, vec![8, 5], vec![2, 1]).is_err());
        assert!(ModelConfig::new(10, 4, vec![8, 4], vec![0, 1]).is_err());
        assert!(ModelConfig::new(10, 4, vec![8, 4], vec![2]).is_err());
        let cfg = ModelConfig::new(10, 4, vec![8, 4], vec![2, 1]).unwrap();
        assert_eq!(cfg.stacked_dim(0), 8);
        assert_eq!(cfg.stacked_dim(1), 8);
    }

    #[test]
    fn identity_weights_window_one_give_tanh() {
        let eye = Matrix::<f64>::identity(3);
        let layer = QrnnLayerWeights::new(eye.clone(), eye.clone(), eye, 3, 1).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![-0.3, 0.7]]);
        let (z, f, _) = masked_conv(&layer, &x, None).unwrap();
        assert_eq!(z, tensor::tanh(&x));
        assert_eq!(f, tensor::sigmoid(&x));
    }

    #[test]
    fn window_two_unrolled_by_hand() {
        let (a, b) = (0.3f64, -0.7f64);
        let (x1, x2) = (1.5f64, 0.4f64);
        let w = Matrix::from_rows(&[vec![a, b]]);
        let layer = QrnnLayerWeights::new(w.clone(), w.clone(), w, 1, 2).unwrap();
        let x = Matrix::from_rows(&[vec![x1, x2]]);
        let (z, _, _) = masked_conv(&layer, &x, None).unwrap();
        assert!((z.get(0, 0) - (b * x1).tanh()).abs() < 1e-15);
        assert!((z.get(0, 1) - (a * x1 + b * x2).tanh()).abs() < 1e-15);
    }

    #[test]
    fn first_step_sees_zero_padding() {
        let x = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]);
        let history = VecDeque::from(vec![vec![0.0, 0.0]]);
        let s = stack_window(&x, 2, &history);
        assert_eq!(s.col(0), vec![0.0, 0.0, 1.0, 3.0]);
        assert_eq!(s.col(1), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let layer = QrnnLayerWeights::<f32>::zeros(2, 3, 1);
        assert_eq!(
            masked_conv(&layer, &Matrix::zeros(4, 2), None).unwrap_err(),
            ModelError::ChannelMismatch {
                expected: 3,
                got: 4
            }
        );
    }

    #[test]
    fn fo_pool_limits_and_hand_value() {
        let z = Matrix::from_rows(&[vec![0.2, -0.5, 0.9]]);
        let o = Matrix::from_rows(&[vec![0.3, 0.6, 1.0]]);
        let open = Matrix::zeros(1, 3);
        let (h, c) = fo_pool(&z, &open, &o, &[0.7], None).unwrap();
        assert_eq!(h, z.mul(&o).unwrap());
        assert_eq!(c, vec![0.9]);

        let closed = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]);
        let (h, c) = fo_pool(&z, &closed, &o, &[0.7], None).unwrap();
        assert_eq!(c, vec![0.7]);
        assert_eq!(h.row(0), &[0.3 * 0.7, 0.6 * 0.7, 0.7]);

        let one = |v: f64| Matrix::from_rows(&[vec![v]]);
        let (h, c) = fo_pool(&one(1.0), &one(0.5), &one(1.0), &[0.0], None).unwrap();
        assert_eq!(c, vec![0.5]);
        assert_eq!(h.get(0, 0), 0.5);
    }

    #[test]
    fn fo_pool_shape_errors() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 2);
        assert!(fo_pool(&a, &b, &a, &[0.0, 0.0], None).is_err());
        assert!(fo_pool(&a, &a, &a, &[0.0], None).is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let cfg = ModelConfig::new(5, 3, vec![3], vec![1]).unwrap();
        let m = QrnnModel::<f32>::zeros(cfg).unwrap();
        let logits = m.forward(&[2], None).unwrap();
        assert_eq!(logits.shape(), (5, 1));
        assert!(logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logits_shape_and_token_range() {
        let m = toy(1);
        assert_eq!(m.forward(&[1, 2, 3, 10], None).unwrap().shape(), (11, 4));
        assert_eq!(
            m.forward(&[1, 11], None).unwrap_err(),
            ModelError::TokenOutOfRange {
                token: 11,
                vocab: 11
            }
        );
    }

    #[test]
    fn step_matches_forward() {
        let m = toy(2);
        let mut states = m.initial_states();
        assert_eq!(
            m.step(&mut states, 4).unwrap(),
            m.forward(&[4], None).unwrap().col(0)
        );

        let prefix = [3u32, 9, 0, 7, 7];
        let full = m.forward(&prefix, None).unwrap();
        let mut states = m.initial_states();
        for (t, &tok) in prefix.iter().enumerate() {
            let logits = m.step(&mut states, tok).unwrap();
            for (a, b) in logits.iter().zip(full.col(t)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn window_history_holds_previous_input() {
        let m = toy(3);
        let mut states = m.initial_states();
        m.step(&mut states, 5).unwrap();
        assert_eq!(states[0].history[0], m.embedding().row(5).to_vec());
        assert!(states[1].history.is_empty());
    }

    #[test]
    fn step_rejects_wrong_state_count() {
        let m = toy(4);
        let mut states = m.initial_states();
        states.pop();
        assert_eq!(
            m.step(&mut states, 1).unwrap_err(),
            ModelError::StateMismatch {
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn output_projection_is_the_embedding() {
        let mut m = toy(5);
        assert!(std::ptr::eq(m.embedding(), m.output_projection()));
        m.embedding_mut().set(0, 0, 42.0);
        assert_eq!(m.output_projection().get(0, 0), 42.0);
    }

    #[test]
    fn splitting_carries_state() {
        let m = toy(6);
        let seq = [1u32, 4, 2, 8, 8, 3, 0];
        let full = m.forward(&seq, None).unwrap();
        let mut states = m.initial_states();
        let a = m.forward_from(&seq[..3], &mut states, None).unwrap();
        let b = m.forward_from(&seq[3..], &mut states, None).unwrap();
        for t in 0..seq.len() {
            let col = if t < 3 { a.col(t) } else { b.col(t - 3) };
            for (x, y) in col.iter().zip(full.col(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flop_count_is_weight_independent() {
        let (a, b) = (toy(7), toy(8));
        let (mut ca, mut cb) = (OpCounter::new(), OpCounter::new());
        a.forward(&[1, 2, 3], Some(&mut ca)).unwrap();
        b.forward(&[1, 2, 3], Some(&mut cb)).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn checksum_tracks_weights() {
        let mut m = toy(9);
        let before = m.checksum();
        assert_eq!(before, m.clone().checksum());
        m.layer_mut(0).w_f.set(0, 0, 1.0);
        assert_ne!(before, m.checksum());
    }
}
