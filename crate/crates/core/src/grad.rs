//! Reverse-mode gradients for the language model, written out by hand.
//!
//! A forward pass over a batch of equal-length sequences records a [`Tape`]
//! holding every intermediate needed by [`backward`]. Three parameter sets
//! can be differentiated: all base weights (baseline training), the gate
//! `log α` vectors (L0 training, base frozen) and the rank-1 factors (base
//! frozen). Gradients flow through truncated BPTT only: the incoming state
//! of a batch is treated as a constant.

use std::borrow::Cow;

use rand::seq::index::sample;
use thiserror::Error;

use crate::data::BpttBlock;
use crate::gates::{self, GateError, HardConcreteGates};
use crate::model::{
    advance_history, gate_preactivations, stack_window, LayerState, ModelError, QrnnModel,
};
use crate::rng::rng_for;
use crate::sru::{add_rank_one, SruError, SruUpdate};
use crate::tensor::{
    log_softmax, matmul, matmul_nt, matmul_tn, sigmoid, tanh, Matrix, Real, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("batch has no tokens")]
    EmptyBatch,
    #[error("sequence {0} differs in length from the first sequence or its targets")]
    Ragged(usize),
    #[error("{got} initial states given for {expected} sequences")]
    StateCount { expected: usize, got: usize },
    #[error("gate noise shape does not match the gates")]
    NoiseShape,
    #[error("parameter set needs {0}, which the forward pass did not use")]
    MissingExtra(&'static str),
    #[error("log α gradients need sampled gate noise")]
    DeterministicGates,
    #[error("parameter tensor {index} has {params} entries but its gradient has {grads}")]
    ParamShape {
        index: usize,
        params: usize,
        grads: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Sru(#[from] SruError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    AllWeights,
    GateLogAlphas,
    SruFactors,
}

/// Anything exposing its learnable tensors as flat slices in a fixed order.
pub trait Trainable<T> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;
}

/// How gate values are produced during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GateNoise<'a, T> {
    /// Hard concrete samples for the given uniform noise, one vector per layer.
    Sampled(&'a [Vec<T>]),
    /// Deterministic test-time gates.
    Test,
}

/// Optional components on top of the base model.
#[derive(Debug, Clone, Copy)]
pub struct Extras<'a, T> {
    pub gates: Option<(&'a HardConcreteGates<T>, GateNoise<'a, T>)>,
    pub sru: Option<&'a SruUpdate<T>>,
}

impl<T> Extras<'_, T> {
    pub fn none() -> Self {
        Self {
            gates: None,
            sru: None,
        }
    }
}

/// `B` sequences of length `T`. Column `b·T + t` of every recorded matrix
/// is position `t` of sequence `b`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    /// Incoming state per sequence; fresh zero state when `None`.
    pub states: Option<Vec<Vec<LayerState<T>>>>,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Vec<Vec<u32>>, targets: Vec<Vec<u32>>) -> Self {
        Self {
            inputs,
            targets,
            states: None,
        }
    }

    pub fn from_block(block: &BpttBlock, states: Option<Vec<Vec<LayerState<T>>>>) -> Self {
        Self {
            inputs: block.input_sequences(),
            targets: block.target_sequences(),
            states,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }
}

struct LayerTape<T> {
    stacked: Matrix<T>,
    /// `W_z·X̃` before gate scaling; kept only for gated layers.
    raw_z: Option<Matrix<T>>,
    z: Matrix<T>,
    f: Matrix<T>,
    o: Matrix<T>,
    c: Matrix<T>,
    c0: Vec<Vec<T>>,
    h: Matrix<T>,
}

struct GateTape<T> {
    log_alpha: Vec<Vec<T>>,
    lambda: f64,
    z: Vec<Vec<T>>,
    dz: Option<Vec<Vec<T>>>,
}

/// Everything a backward pass needs from one forward pass.
pub struct Tape<'a, T: Real> {
    net: Cow<'a, QrnnModel<T>>,
    sru: Option<SruUpdate<T>>,
    gates: Option<GateTape<T>>,
    seqs: usize,
    len: usize,
    tokens: Vec<u32>,
    targets: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    probs: Matrix<T>,
    ce: T,
    penalty: f64,
    loss: T,
    final_states: Vec<Vec<LayerState<T>>>,
}

impl<T: Real> Tape<'_, T> {
    /// Mean cross-entropy plus `λ·Σ penalty` when gates are present.
    pub fn loss(&self) -> T {
        self.loss
    }

    /// Mean cross-entropy over all tokens of the batch.
    pub fn cross_entropy(&self) -> T {
        self.ce
    }

    /// Expected-L0 penalty (without λ), zero when ungated.
    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn num_tokens(&self) -> usize {
        self.seqs * self.len
    }

    /// State after the last position of each sequence.
    pub fn final_states(&self) -> &[Vec<LayerState<T>>] {
        &self.final_states
    }

    pub fn into_final_states(self) -> Vec<Vec<LayerState<T>>> {
        self.final_states
    }
}

/// Gradients for one [`ParamSet`], in the owner's [`Trainable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub set: ParamSet,
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.tensors.iter_mut().flatten() {
                *g = *g * s;
            }
        }
        norm
    }
}

/// Loss, carried state and gradients of one training step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub cross_entropy: f64,
    pub final_states: Vec<Vec<LayerState<T>>>,
    pub grads: Gradients<T>,
}

fn check_batch<T: Real>(
    model: &QrnnModel<T>,
    batch: &Batch<T>,
) -> Result<(usize, usize), GradError> {
    let seqs = batch.inputs.len();
    let len = batch.inputs.first().map_or(0, Vec::len);
    if seqs == 0 || len == 0 {
        return Err(GradError::EmptyBatch);
    }
    if batch.targets.len() != seqs {
        return Err(GradError::Ragged(batch.targets.len().min(seqs)));
    }
    for (b, (x, y)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        if x.len() != len || y.len() != len {
            return Err(GradError::Ragged(b));
        }
    }
    if let Some(states) = &batch.states {
        if states.len() != seqs {
            return Err(GradError::StateCount {
                expected: seqs,
                got: states.len(),
            });
        }
        for s in states {
            if s.len() != model.num_layers() {
                return Err(ModelError::StateMismatch {
                    expected: model.num_layers(),
                    got: s.len(),
                }
                .into());
            }
        }
    }
    Ok((seqs, len))
}

/// Forward pass recording a tape. The loss equals, bit for bit, the mean of
/// per-token cross-entropies from [`QrnnModel::forward_gated`] run sequence
/// by sequence (plus the gate penalty).
pub fn forward_with_tape<'a, T: Real>(
    model: &'a QrnnModel<T>,
    extras: &Extras<'_, T>,
    batch: &Batch<T>,
) -> Result<Tape<'a, T>, GradError> {
    let (seqs, len) = check_batch(model, batch)?;
    let n = seqs * len;
    let net: Cow<'a, QrnnModel<T>> = match extras.sru {
        Some(s) => Cow::Owned(add_rank_one(model, s)?),
        None => Cow::Borrowed(model),
    };

    let gate_tape = match &extras.gates {
        None => None,
        Some((g, noise)) => {
            g.check(model)?;
            let (z, dz) = match noise {
                GateNoise::Sampled(u) => {
                    if u.len() != g.log_alpha.len()
                        || u.iter().zip(&g.log_alpha).any(|(a, b)| a.len() != b.len())
                    {
                        return Err(GradError::NoiseShape);
                    }
                    let z = g
                        .log_alpha
                        .iter()
                        .zip(u.iter())
                        .map(|(la, ul)| gates::sample_gate_with_noise(la, ul))
                        .collect();
                    let dz = g
                        .log_alpha
                        .iter()
                        .zip(u.iter())
                        .map(|(la, ul)| gates::gate_derivative(la, ul))
                        .collect();
                    (z, Some(dz))
                }
                GateNoise::Test => (g.test_gates(), None),
            };
            Some(GateTape {
                log_alpha: g.log_alpha.clone(),
                lambda: g.lambda,
                z,
                dz,
            })
        }
    };

    let mut states = batch
        .states
        .clone()
        .unwrap_or_else(|| vec![net.initial_states(); seqs]);
    let tokens: Vec<u32> = batch.inputs.concat();
    let targets: Vec<u32> = batch.targets.concat();
    for &t in &targets {
        if t as usize >= net.config().vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: net.config().vocab_size,
            }
            .into());
        }
    }

    let mut x = net.embed(&tokens)?;
    let mut layers = Vec::with_capacity(net.num_layers());
    for (l, layer) in net.layers().iter().enumerate() {
        let (k, r, m) = (layer.input_dim(), layer.window(), layer.hidden());
        for s in &states {
            let st = &s[l];
            if st.c.len() != m
                || st.history.len() != r - 1
                || st.history.iter().any(|h| h.len() != k)
            {
                return Err(ModelError::StateMismatch {
                    expected: m,
                    got: st.c.len(),
                }
                .into());
            }
        }
        let mut stacked = Matrix::zeros(k * r, n);
        for (b, s) in states.iter_mut().enumerate() {
            let cols: Vec<usize> = (b * len..(b + 1) * len).collect();
            let xb = x.select_cols(&cols);
            let sb = stack_window(&xb, r, &s[l].history);
            for row in 0..k * r {
                stacked.row_mut(row)[b * len..(b + 1) * len].copy_from_slice(sb.row(row));
            }
            advance_history(&xb, &mut s[l].history);
        }
        let scale = gate_tape
            .as_ref()
            .and_then(|g| g.z.get(l))
            .map(Vec::as_slice);
        let (mut zpre, fpre, opre) = gate_preactivations(layer, &stacked, None, None)?;
        let raw_z = scale.map(|g| {
            let raw = zpre.clone();
            for (i, &gi) in g.iter().enumerate() {
                for v in zpre.row_mut(i) {
                    *v = *v * gi;
                }
            }
            raw
        });
        let (z, f, o) = (tanh(&zpre), sigmoid(&fpre), sigmoid(&opre));

        let mut c = Matrix::zeros(m, n);
        let mut h = Matrix::zeros(m, n);
        let c0: Vec<Vec<T>> = states.iter().map(|s| s[l].c.clone()).collect();
        for i in 0..m {
            let (zr, fr, or) = (z.row(i), f.row(i), o.row(i));
            for b in 0..seqs {
                let mut ci = c0[b][i];
                for col in b * len..(b + 1) * len {
                    ci = fr[col] * ci + (T::one() - fr[col]) * zr[col];
                    c.data_mut()[i * n + col] = ci;
                    h.data_mut()[i * n + col] = or[col] * ci;
                }
                states[b][l].c[i] = ci;
            }
        }
        layers.push(LayerTape {
            stacked,
            raw_z,
            z,
            f,
            o,
            c,
            c0,
            h: h.clone(),
        });
        x = h;
    }

    let logits = matmul(net.embedding(), &x, None)?;
    let vocab = logits.rows();
    let mut probs = Matrix::zeros(vocab, n);
    let mut ce_sum = T::zero();
    for col in 0..n {
        let lp = log_softmax(&logits.col(col))?;
        ce_sum = ce_sum + -lp[targets[col] as usize];
        for (v, &p) in lp.iter().enumerate() {
            probs.data_mut()[v * n + col] = p.exp();
        }
    }
    let ce = ce_sum / T::of(n as f64);
    let (penalty, loss) = match &gate_tape {
        Some(g) => {
            let p: f64 = g
                .log_alpha
                .iter()
                .map(|la| gates::expected_l0_penalty(la))
                .sum();
            (p, ce + T::of(g.lambda * p))
        }
        None => (0.0, ce),
    };

    Ok(Tape {
        net,
        sru: extras.sru.cloned(),
        gates: gate_tape,
        seqs,
        len,
        tokens,
        targets,
        layers,
        probs,
        ce,
        penalty,
        loss,
        final_states: states,
    })
}

/// Back-propagates a tape into gradients for `set`.
pub fn backward<T: Real>(tape: &Tape<'_, T>, set: ParamSet) -> Result<Gradients<T>, GradError> {
    let n = tape.seqs * tape.len;
    let net = tape.net.as_ref();
    let num_layers = net.num_layers();
    match set {
        ParamSet::GateLogAlphas => {
            let g = tape
                .gates
                .as_ref()
                .ok_or(GradError::MissingExtra("gates"))?;
            if g.dz.is_none() {
                return Err(GradError::DeterministicGates);
            }
        }
        ParamSet::SruFactors if tape.sru.is_none() => {
            return Err(GradError::MissingExtra("a rank-1 update"))
        }
        _ => {}
    }

    let inv_n = T::of(1.0 / n as f64);
    let mut dlogits = tape.probs.clone();
    for (col, &t) in tape.targets.iter().enumerate() {
        let idx = t as usize * n + col;
        dlogits.data_mut()[idx] = dlogits.data()[idx] - T::one();
    }
    for v in dlogits.data_mut() {
        *v = *v * inv_n;
    }

    let top = &tape.layers[num_layers - 1];
    let mut d_embedding = match set {
        ParamSet::AllWeights => Some(matmul_nt(&dlogits, &top.h)),
        _ => None,
    };
    let mut dh = matmul_tn(net.embedding(), &dlogits);

    let mut d_weights: Vec<Option<[Matrix<T>; 3]>> = (0..num_layers).map(|_| None).collect();
    let mut d_gate: Vec<Vec<T>> = Vec::new();
    if let Some(g) = &tape.gates {
        d_gate = g
            .log_alpha
            .iter()
            .map(|la| vec![T::zero(); la.len()])
            .collect();
    }

    for l in (0..num_layers).rev() {
        let lt = &tape.layers[l];
        let layer = &net.layers()[l];
        let (m, k, r) = (layer.hidden(), layer.input_dim(), layer.window());
        let mut dz = Matrix::zeros(m, n);
        let mut df = Matrix::zeros(m, n);
        let mut d_o = Matrix::zeros(m, n);
        for i in 0..m {
            let row = i * n;
            for b in 0..tape.seqs {
                let mut dc_next = T::zero();
                for col in (b * tape.len..(b + 1) * tape.len).rev() {
                    let idx = row + col;
                    let c = lt.c.data()[idx];
                    let c_prev = if col > b * tape.len {
                        lt.c.data()[idx - 1]
                    } else {
                        lt.c0[b][i]
                    };
                    let (z, f, o) = (lt.z.data()[idx], lt.f.data()[idx], lt.o.data()[idx]);
                    let dhv = dh.data()[idx];
                    let dc = dhv * o + dc_next;
                    dz.data_mut()[idx] = dc * (T::one() - f) * (T::one() - z * z);
                    df.data_mut()[idx] = dc * (c_prev - z) * f * (T::one() - f);
                    d_o.data_mut()[idx] = dhv * c * o * (T::one() - o);
                    dc_next = dc * f;
                }
            }
        }

        // Gate scaling: Zpre_i = g_i · (W_z X̃)_i.
        if let (Some(g), Some(raw)) = (&tape.gates, &lt.raw_z) {
            let gl = &g.z[l];
            for i in 0..m {
                let dzr = &mut dz.data_mut()[i * n..(i + 1) * n];
                if set == ParamSet::GateLogAlphas {
                    let a = &raw.data()[i * n..(i + 1) * n];
                    d_gate[l][i] = dzr
                        .iter()
                        .zip(a)
                        .fold(T::zero(), |acc, (&d, &x)| acc + d * x);
                }
                for v in dzr.iter_mut() {
                    *v = *v * gl[i];
                }
            }
        }

        if set != ParamSet::GateLogAlphas {
            d_weights[l] = Some([
                matmul_nt(&dz, &lt.stacked),
                matmul_nt(&df, &lt.stacked),
                matmul_nt(&d_o, &lt.stacked),
            ]);
        }

        let need_input = l > 0 || set == ParamSet::AllWeights;
        if !need_input {
            break;
        }
        let mut dstacked = matmul_tn(&layer.w_z, &dz);
        dstacked.add_assign(&matmul_tn(&layer.w_f, &df))?;
        dstacked.add_assign(&matmul_tn(&layer.w_o, &d_o))?;
        let mut dx = Matrix::zeros(k, n);
        let lag = r - 1;
        for j in 0..r {
            for b in 0..tape.seqs {
                for t in 0..tape.len {
                    let src = t as isize - lag as isize + j as isize;
                    if src < 0 {
                        continue;
                    }
                    let (dst_col, src_col) = (b * tape.len + src as usize, b * tape.len + t);
                    for i in 0..k {
                        let v = dstacked.data()[(j * k + i) * n + src_col];
                        dx.data_mut()[i * n + dst_col] = dx.data()[i * n + dst_col] + v;
                    }
                }
            }
        }
        dh = dx;
    }

    let tensors = match set {
        ParamSet::AllWeights => {
            let mut de = d_embedding.take().expect("computed for all weights");
            let d = net.config().embed_dim;
            for (col, &tok) in tape.tokens.iter().enumerate() {
                let row = de.row_mut(tok as usize);
                for i in 0..d {
                    row[i] = row[i] + dh.data()[i * n + col];
                }
            }
            let mut out = vec![de.into_data()];
            for w in d_weights.into_iter() {
                out.extend(w.expect("every layer visited").map(Matrix::into_data));
            }
            out
        }
        ParamSet::GateLogAlphas => {
            let g = tape.gates.as_ref().expect("checked above");
            let dz = g.dz.as_ref().expect("checked above");
            let lambda = T::of(g.lambda);
            d_gate
                .iter()
                .zip(dz)
                .zip(&g.log_alpha)
                .map(|((dg, dzl), la)| {
                    let dp = gates::penalty_derivative(la);
                    dg.iter()
                        .zip(dzl)
                        .zip(dp)
                        .map(|((&a, &b), p)| a * b + lambda * p)
                        .collect()
                })
                .collect()
        }
        ParamSet::SruFactors => {
            let sru = tape.sru.as_ref().expect("checked above");
            let mut out = Vec::with_capacity(6 * num_layers);
            for (factors, dw) in sru.layers.iter().zip(d_weights) {
                let dw = dw.expect("every layer visited");
                for (rank1, g) in factors.iter().zip(&dw) {
                    let gu = matmul(g, &Matrix::column(&rank1.v), None)?.into_data();
                    let gv = matmul_tn(g, &Matrix::column(&rank1.u)).into_data();
                    out.push(gu);
                    out.push(gv);
                }
            }
            out
        }
    };
    Ok(Gradients { set, tensors })
}

/// Forward plus backward, packaged for a training loop.
pub fn loss_and_gradients<T: Real>(
    model: &QrnnModel<T>,
    extras: &Extras<'_, T>,
    batch: &Batch<T>,
    set: ParamSet,
) -> Result<StepOutput<T>, GradError> {
    let tape = forward_with_tape(model, extras, batch)?;
    let grads = backward(&tape, set)?;
    Ok(StepOutput {
        loss: tape.loss().as_f64(),
        cross_entropy: tape.cross_entropy().as_f64(),
        final_states: tape.into_final_states(),
        grads,
    })
}

/// Adam hyperparameters; no weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn for_params<T, P: Trainable<T>>(cfg: AdamConfig, params: &P) -> Self {
        let sizes: Vec<usize> = params.params().iter().map(|p| p.len()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<T: Real>(
        &mut self,
        params: Vec<&mut [T]>,
        grads: &Gradients<T>,
    ) -> Result<(), GradError> {
        if params.len() != grads.tensors.len() || params.len() != self.m.len() {
            return Err(GradError::ParamShape {
                index: params.len().min(grads.tensors.len()),
                params: params.len(),
                grads: grads.tensors.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
            if p.len() != g.len() || p.len() != self.m[index].len() {
                return Err(GradError::ParamShape {
                    index,
                    params: p.len(),
                    grads: g.len(),
                });
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let step = c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *pi = T::of(pi.as_f64() - step);
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences on up to `samples`
/// coordinates (all coordinates when there are fewer). Relative error is
/// `|a − n| / max(|a|, |n|, FD_ABS_FLOOR)`.
pub fn finite_diff_check(
    model: &QrnnModel<f64>,
    extras: &Extras<'_, f64>,
    batch: &Batch<f64>,
    set: ParamSet,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<FiniteDiffReport, GradError> {
    let tape = forward_with_tape(model, extras, batch)?;
    let grads = backward(&tape, set)?;
    let coords: Vec<(usize, usize)> = grads
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |i| (ti, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= samples {
        coords
    } else {
        let mut rng = rng_for(seed, "finite-diff");
        let mut idx = sample(&mut rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let loss_at = |ti: usize, i: usize, delta: f64| -> Result<f64, GradError> {
        let tape = match set {
            ParamSet::AllWeights => {
                let mut m = model.clone();
                m.params_mut()[ti][i] += delta;
                forward_with_tape(&m, extras, batch)?.loss()
            }
            ParamSet::GateLogAlphas => {
                let (g, noise) = extras.gates.ok_or(GradError::MissingExtra("gates"))?;
                let mut g = g.clone();
                g.params_mut()[ti][i] += delta;
                let e = Extras {
                    gates: Some((&g, noise)),
                    sru: extras.sru,
                };
                forward_with_tape(model, &e, batch)?.loss()
            }
            ParamSet::SruFactors => {
                let mut s = extras
                    .sru
                    .ok_or(GradError::MissingExtra("a rank-1 update"))?
                    .clone();
                s.params_mut()[ti][i] += delta;
                let e = Extras {
                    gates: extras.gates,
                    sru: Some(&s),
                };
                forward_with_tape(model, &e, batch)?.loss()
            }
        };
        Ok(tape)
    };

    let mut report = FiniteDiffReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (ti, i) in chosen {
        let numeric = (loss_at(ti, i, step)? - loss_at(ti, i, -step)?) / (2.0 * step);
        let analytic = grads.tensors[ti][i];
        let denom = analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((ti, i, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> QrnnModel<f64> {
        let cfg = ModelConfig::new(13, 5, vec![6, 5], vec![2, 1]).unwrap();
        QrnnModel::init_uniform(cfg, &mut ChaCha8Rng::seed_from_u64(5), 0.5, Some(0.6)).unwrap()
    }

    fn batch() -> Batch<f64> {
        Batch::new(
            vec![vec![1, 4, 7, 2, 9], vec![3, 3, 12, 0, 5]],
            vec![vec![4, 7, 2, 9, 11], vec![3, 12, 0, 5, 6]],
        )
    }

    #[test]
    fn loss_matches_plain_forward_exactly() {
        let m = model();
        let b = batch();
        let tape = forward_with_tape(&m, &Extras::none(), &b).unwrap();
        let mut sum = 0.0;
        for (x, y) in b.inputs.iter().zip(&b.targets) {
            let logits = m.forward(x, None).unwrap();
            for (t, &target) in y.iter().enumerate() {
                sum += cross_entropy(&logits.col(t), target as usize).unwrap();
            }
        }
        assert_eq!(tape.loss(), sum / 10.0);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let r = finite_diff_check(
            &model(),
            &Extras::none(),
            &batch(),
            ParamSet::AllWeights,
            1e-5,
            80,
            1,
        )
        .unwrap();
        assert_eq!(r.checked, 80);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let m = model();
        let mut g = HardConcreteGates::new(&m, 0.0, 0.01);
        g.log_alpha[0] = vec![0.3, -0.2, 1.0, 0.1, -0.5, 0.7];
        let u = vec![vec![0.31, 0.55, 0.42, 0.66, 0.5, 0.47]];
        let e = Extras {
            gates: Some((&g, GateNoise::Sampled(&u))),
            sru: None,
        };
        let r = finite_diff_check(&m, &e, &batch(), ParamSet::GateLogAlphas, 1e-5, 50, 2).unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn sru_gradients_match_finite_differences() {
        let m = model();
        let mask = crate::pruning::PruneMask::full(m.config());
        let s = crate::sru::init_sru(&m, &mask, 1.0, 8);
        let e = Extras {
            gates: None,
            sru: Some(&s),
        };
        let mut b = batch();
        let mut st = m.initial_states();
        m.forward_from(&[2, 5, 8], &mut st, None).unwrap();
        b.states = Some(vec![st.clone(), st]);
        let r = finite_diff_check(&m, &e, &b, ParamSet::SruFactors, 1e-5, 60, 3).unwrap();
        assert_eq!(r.checked, 60);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn final_states_continue_the_sequence() {
        let m = model();
        let whole: Vec<u32> = vec![1, 4, 7, 2, 9, 3, 8];
        let first = Batch::new(vec![whole[..4].to_vec()], vec![whole[1..5].to_vec()]);
        let tape = forward_with_tape(&m, &Extras::none(), &first).unwrap();
        let mut states = m.initial_states();
        m.forward_from(&whole[..4], &mut states, None).unwrap();
        assert_eq!(tape.final_states()[0], states);
    }

    #[test]
    fn missing_extras_are_reported() {
        let m = model();
        let tape = forward_with_tape(&m, &Extras::none(), &batch()).unwrap();
        assert!(matches!(
            backward(&tape, ParamSet::SruFactors),
            Err(GradError::MissingExtra(_))
        ));
        assert!(matches!(
            backward(&tape, ParamSet::GateLogAlphas),
            Err(GradError::MissingExtra(_))
        ));
    }

    #[test]
    fn ragged_batch_rejected() {
        let m = model();
        let b = Batch::new(vec![vec![1, 2], vec![3]], vec![vec![2, 3], vec![4]]);
        assert_eq!(
            forward_with_tape(&m, &Extras::none(), &b).err(),
            Some(GradError::Ragged(1))
        );
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f64, -2.0];
        let g = Gradients {
            set: ParamSet::AllWeights,
            tensors: vec![vec![0.3, -7.0]],
        };
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[2]);
        adam.update(vec![p.as_mut_slice()], &g).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Gradients {
            set: ParamSet::AllWeights,
            tensors: vec![vec![3.0f64], vec![4.0]],
        };
        assert_eq!(g.clip(1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
