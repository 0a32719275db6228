//! Truncated-BPTT training loop shared by baseline, gate and rank-1 training.

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{bptt_batches, BpttBlock, DataError};
use crate::gates::GateError;
use crate::grad::{
    self, Adam, AdamConfig, Batch, Extras, GradError, ParamSet, StepOutput, Trainable,
};
use crate::model::{ModelConfig, ModelError, QrnnModel};
use crate::rng::rng_for;
use crate::sru::SruError;
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("base model weights changed during training")]
    BaseModified,
    #[error("no λ in the searched range reached a usable operating point")]
    NoFeasiblePoint,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Sru(#[from] SruError),
}

/// Optimizer schedule and batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub bptt: usize,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 5e-3,
            batch_size: 16,
            bptt: 35,
            clip: 5.0,
            seed: 1,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopSummary {
    pub steps: usize,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

impl LoopSummary {
    /// Mean loss over the last `k` steps.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.losses.len().max(1));
        let tail = &self.losses[self.losses.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs `cfg.steps` Adam steps over consecutive BPTT blocks of `stream`,
/// carrying hidden state between blocks and resetting it at each pass over
/// the data. Non-finite losses, gradients or parameters abort with
/// [`TrainError::Divergence`]. `on_step` sees the 1-based step count and the
/// updated parameters after every step.
pub fn run_loop<T, P, F, H>(
    stream: &[u32],
    cfg: &LoopConfig,
    params: &mut P,
    mut step_fn: F,
    mut on_step: H,
) -> Result<LoopSummary, TrainError>
where
    T: Real,
    P: Trainable<T>,
    F: FnMut(&P, &Batch<T>) -> Result<StepOutput<T>, GradError>,
    H: FnMut(usize, &P),
{
    let blocks: Vec<BpttBlock> = bptt_batches(stream, cfg.batch_size, cfg.bptt)?.collect();
    let mut adam = Adam::for_params(AdamConfig::with_lr(cfg.lr), params);
    let mut states = None;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = step % blocks.len();
        if idx == 0 {
            states = None;
        }
        let batch = Batch::from_block(&blocks[idx], states.take());
        let StepOutput {
            loss,
            cross_entropy,
            final_states,
            mut grads,
        } = step_fn(params, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Divergence { step, loss });
        }
        if cfg.clip > 0.0 {
            grads.clip(cfg.clip);
        }
        adam.update(params.params_mut(), &grads)?;
        if params
            .params()
            .iter()
            .any(|p| p.iter().any(|x| !x.is_finite()))
        {
            return Err(TrainError::Divergence { step, loss });
        }
        states = Some(final_states);
        losses.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            info!("step {}: loss {loss:.4} (ce {cross_entropy:.4})", step + 1);
        } else {
            debug!("step {}: loss {loss:.4}", step + 1);
        }
        on_step(step + 1, params);
    }
    Ok(LoopSummary {
        steps: cfg.steps,
        losses,
    })
}

/// Baseline training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Initial embedding entries are uniform in `±embed_init`.
    pub embed_init: f64,
    #[serde(flatten)]
    pub schedule: LoopConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            embed_init: 0.1,
            schedule: LoopConfig::default(),
        }
    }
}

/// Trains a model from scratch with Adam on cross-entropy.
pub fn train_baseline<T: Real>(
    config: ModelConfig,
    stream: &[u32],
    cfg: &BaselineConfig,
) -> Result<(QrnnModel<T>, LoopSummary), TrainError> {
    train_baseline_with(config, stream, cfg, |_, _| {})
}

/// [`train_baseline`] with a hook called after every step.
pub fn train_baseline_with<T: Real>(
    config: ModelConfig,
    stream: &[u32],
    cfg: &BaselineConfig,
    on_step: impl FnMut(usize, &QrnnModel<T>),
) -> Result<(QrnnModel<T>, LoopSummary), TrainError> {
    let mut rng = rng_for(cfg.schedule.seed, "baseline-init");
    let mut model = QrnnModel::init_uniform(config, &mut rng, cfg.embed_init, None)?;
    let summary = run_loop(
        stream,
        &cfg.schedule,
        &mut model,
        |m, batch| grad::loss_and_gradients(m, &Extras::none(), batch, ParamSet::AllWeights),
        on_step,
    )?;
    Ok((model, summary))
}
