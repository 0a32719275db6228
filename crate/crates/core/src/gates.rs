//! L0 regularization with hard concrete gates, one gate per filter.
//!
//! Each prunable layer `l` owns a vector `log α` of mask parameters. During
//! training a gate `z ∈ [0, 1]` is drawn per filter with the reparameterized
//! hard concrete sampler and multiplies the filter's `W_z` pre-activation, so
//! `z_i = 0` forces `Z_i = tanh(0) = 0` and, from a zero cell state, a zero
//! hidden channel. Base weights stay frozen; only `log α` is learned.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, Extras, GateNoise, ParamSet, Trainable};
use crate::model::{Gate, QrnnModel};
use crate::pruning::{apply_mask, FlopsModel, PruneError, PruneMask};
use crate::tensor::{sigmoid_scalar, Real};
use crate::train::{self, LoopConfig, TrainError};

/// Stretch interval lower end.
pub const GAMMA: f64 = -0.1;
/// Stretch interval upper end.
pub const ZETA: f64 = 1.1;
/// Temperature, fixed.
pub const BETA: f64 = 2.0 / 3.0;
/// Initial `log α` for every gate; the test-time gate starts saturated at 1.
pub const DEFAULT_INIT_LOG_ALPHA: f64 = 2.0;

/// `β·ln(−γ/ζ)`; the expected-L0 penalty is `σ(log α − shift)`.
pub fn penalty_shift() -> f64 {
    BETA * (-GAMMA / ZETA).ln()
}

/// `log α` at or below which the test-time gate is exactly zero: `−ln 11`.
pub fn zero_threshold() -> f64 {
    (-GAMMA / ZETA).ln()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("gate layer {layer} has {got} entries, model layer has {expected} filters")]
    LengthMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected gates for {expected} prunable layers, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("every gate of layer {0} is closed; at least one filter must survive")]
    AllClosed(usize),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

/// Mask parameters for every prunable layer (all layers but the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteGates<T> {
    pub log_alpha: Vec<Vec<T>>,
    /// Penalty weight of the expected-L0 term.
    pub lambda: f64,
}

impl<T: Real> HardConcreteGates<T> {
    pub fn new<U: Real>(model: &QrnnModel<U>, init_log_alpha: f64, lambda: f64) -> Self {
        let prunable = model.num_layers() - 1;
        Self {
            log_alpha: model.layers()[..prunable]
                .iter()
                .map(|l| vec![T::of(init_log_alpha); l.hidden()])
                .collect(),
            lambda,
        }
    }

    pub fn check<U: Real>(&self, model: &QrnnModel<U>) -> Result<(), GateError> {
        let prunable = model.num_layers() - 1;
        if self.log_alpha.len() != prunable {
            return Err(GateError::LayerCount {
                expected: prunable,
                got: self.log_alpha.len(),
            });
        }
        for (layer, (la, w)) in self.log_alpha.iter().zip(model.layers()).enumerate() {
            if la.len() != w.hidden() {
                return Err(GateError::LengthMismatch {
                    layer,
                    expected: w.hidden(),
                    got: la.len(),
                });
            }
        }
        Ok(())
    }

    pub fn num_filters(&self) -> usize {
        self.log_alpha.iter().map(Vec::len).sum()
    }

    /// Stored size: 4 bytes per gated filter.
    pub fn storage_bytes(&self) -> usize {
        4 * self.num_filters()
    }

    pub fn test_gates(&self) -> Vec<Vec<T>> {
        self.log_alpha.iter().map(|la| test_gate(la)).collect()
    }

    /// Σ over layers of the expected number of open gates.
    pub fn expected_l0(&self) -> f64 {
        self.log_alpha
            .iter()
            .map(|la| expected_l0_penalty(la))
            .sum()
    }

    /// Number of gates whose test-time value is exactly zero.
    pub fn closed_count(&self) -> usize {
        self.test_gates()
            .iter()
            .flatten()
            .filter(|z| **z == T::zero())
            .count()
    }

    pub fn cast<U: Real>(&self) -> HardConcreteGates<U> {
        HardConcreteGates {
            log_alpha: self
                .log_alpha
                .iter()
                .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect())
                .collect(),
            lambda: self.lambda,
        }
    }
}

impl<T: Real> Trainable<T> for HardConcreteGates<T> {
    fn params(&self) -> Vec<&[T]> {
        self.log_alpha.iter().map(Vec::as_slice).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.log_alpha.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

/// Unclamped stretched sample `(ζ−γ)·s + γ` and the inner sigmoid `s`.
#[inline]
pub(crate) fn stretched<T: Real>(log_alpha: T, u: T) -> (T, T) {
    let beta = T::of(BETA);
    let s = sigmoid_scalar((u.ln() - (T::one() - u).ln() + log_alpha) / beta);
    (T::of(ZETA - GAMMA) * s + T::of(GAMMA), s)
}

/// Hard concrete sample for fixed uniform noise `u ∈ (0, 1)`.
pub fn sample_gate_with_noise<T: Real>(log_alpha: &[T], u: &[T]) -> Vec<T> {
    log_alpha
        .iter()
        .zip(u)
        .map(|(&la, &ui)| stretched(la, ui).0.max(T::zero()).min(T::one()))
        .collect()
}

/// `∂z/∂log α` for fixed noise: `(ζ−γ)·s(1−s)/β` inside the clamp, zero
/// where the clamp is active.
pub fn gate_derivative<T: Real>(log_alpha: &[T], u: &[T]) -> Vec<T> {
    log_alpha
        .iter()
        .zip(u)
        .map(|(&la, &ui)| {
            let (pre, s) = stretched(la, ui);
            if pre > T::zero() && pre < T::one() {
                T::of(ZETA - GAMMA) * s * (T::one() - s) / T::of(BETA)
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Uniform noise strictly inside `(0, 1)`.
pub fn draw_uniform<T: Real, R: Rng>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break T::of(u);
            }
        })
        .collect()
}

/// One noise vector per gated layer.
pub fn draw_noise<T: Real, R: Rng>(gates: &HardConcreteGates<T>, rng: &mut R) -> Vec<Vec<T>> {
    gates
        .log_alpha
        .iter()
        .map(|la| draw_uniform(la.len(), rng))
        .collect()
}

pub fn sample_gate<T: Real, R: Rng>(log_alpha: &[T], rng: &mut R) -> Vec<T> {
    let u = draw_uniform(log_alpha.len(), rng);
    sample_gate_with_noise(log_alpha, &u)
}

/// Closed-form expected number of non-zero gates:
/// `Σ σ(log α_i − β·ln(−γ/ζ))`.
pub fn expected_l0_penalty<T: Real>(log_alpha: &[T]) -> f64 {
    let shift = penalty_shift();
    log_alpha
        .iter()
        .map(|&la| sigmoid_scalar(la.as_f64() - shift))
        .sum()
}

/// Per-filter derivative of the expected-L0 penalty.
pub(crate) fn penalty_derivative<T: Real>(log_alpha: &[T]) -> Vec<T> {
    let shift = penalty_shift();
    log_alpha
        .iter()
        .map(|&la| {
            let p = sigmoid_scalar(la.as_f64() - shift);
            T::of(p * (1.0 - p))
        })
        .collect()
}

/// Deterministic test-time gate `min(1, max(0, σ(log α)(ζ−γ) + γ))`.
pub fn test_gate<T: Real>(log_alpha: &[T]) -> Vec<T> {
    log_alpha
        .iter()
        .map(|&la| {
            (sigmoid_scalar(la) * T::of(ZETA - GAMMA) + T::of(GAMMA))
                .max(T::zero())
                .min(T::one())
        })
        .collect()
}

/// Turns trained gates into a hard mask: closed gates (`z = 0`) drop their
/// filter, and every surviving `W_z` row is multiplied by its gate value so
/// the pruned model reproduces the test-time gated model.
pub fn gates_to_mask_and_scale<T: Real>(
    model: &QrnnModel<T>,
    gates: &HardConcreteGates<T>,
) -> Result<(PruneMask, QrnnModel<T>), GateError> {
    gates.check(model)?;
    let z = gates.test_gates();
    let mut kept = Vec::with_capacity(model.num_layers());
    let mut scaled = model.clone();
    for (l, zl) in z.iter().enumerate() {
        let keep: Vec<usize> = (0..zl.len()).filter(|&i| zl[i] > T::zero()).collect();
        if keep.is_empty() {
            return Err(GateError::AllClosed(l));
        }
        let w = scaled.layer_mut(l).gate_mut(Gate::Z);
        for &i in &keep {
            for x in w.row_mut(i) {
                *x = *x * zl[i];
            }
        }
        kept.push(keep);
    }
    kept.push((0..*model.config().hidden_sizes.last().unwrap()).collect());
    let mask = PruneMask::new(model.config().hidden_sizes.clone(), kept)?;
    let pruned = apply_mask(&scaled, &mask)?;
    Ok((mask, pruned))
}

/// Gate training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrainConfig {
    pub lambda: f64,
    pub init_log_alpha: f64,
    #[serde(flatten)]
    pub schedule: LoopConfig,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5.5e-4,
            init_log_alpha: DEFAULT_INIT_LOG_ALPHA,
            schedule: LoopConfig {
                steps: 5000,
                lr: 5e-3,
                ..LoopConfig::default()
            },
        }
    }
}

/// Learns `log α` by Adam on `CE + λ·Σ penalty` with one hard concrete
/// sample per step. The model's weights are never modified.
pub fn train_gates<T: Real>(
    model: &QrnnModel<T>,
    stream: &[u32],
    cfg: &GateTrainConfig,
) -> Result<HardConcreteGates<T>, TrainError> {
    let mut gates = HardConcreteGates::new(model, cfg.init_log_alpha, cfg.lambda);
    let mut noise_rng = crate::rng::rng_for(cfg.schedule.seed, "gate-noise");
    let before = model.checksum();
    train::run_loop(
        stream,
        &cfg.schedule,
        &mut gates,
        |gates, batch| {
            let u = draw_noise(gates, &mut noise_rng);
            let extras = Extras {
                gates: Some((gates, GateNoise::Sampled(&u))),
                sru: None,
            };
            grad::loss_and_gradients(model, &extras, batch, ParamSet::GateLogAlphas)
        },
        |_, _| {},
    )?;
    if model.checksum() != before {
        return Err(TrainError::BaseModified);
    }
    Ok(gates)
}

/// FLOPs fraction of the mask the gates would produce (1.0 when no filter
/// is closed), or `None` when some layer would lose every filter.
pub fn gates_flops_fraction<T: Real>(
    model: &QrnnModel<T>,
    gates: &HardConcreteGates<T>,
) -> Option<f64> {
    gates_to_mask_and_scale(model, gates)
        .ok()
        .map(|(mask, _)| FlopsModel::new(model.config()).fraction(&mask))
}

/// Searches λ (bisection in log space) so the trained gates land near
/// `target` FLOPs. Returns the best gates found and their achieved fraction.
pub fn calibrate_lambda<T: Real>(
    model: &QrnnModel<T>,
    stream: &[u32],
    target: f64,
    base: &GateTrainConfig,
    bounds: (f64, f64),
    iterations: usize,
) -> Result<(HardConcreteGates<T>, f64), TrainError> {
    let (mut lo, mut hi) = (bounds.0.ln(), bounds.1.ln());
    let mut best: Option<(HardConcreteGates<T>, f64)> = None;
    for _ in 0..iterations.max(1) {
        let mid = 0.5 * (lo + hi);
        let cfg = GateTrainConfig {
            lambda: mid.exp(),
            ..base.clone()
        };
        let gates = train_gates(model, stream, &cfg)?;
        let achieved = gates_flops_fraction(model, &gates).unwrap_or(0.0);
        info!(
            "lambda {:.3e}: {:.4} FLOPs (target {target})",
            cfg.lambda, achieved
        );
        let better = best
            .as_ref()
            .is_none_or(|(_, a)| (achieved - target).abs() < (a - target).abs());
        if better && achieved > 0.0 {
            best = Some((gates, achieved));
        }
        // More penalty closes more gates, lowering FLOPs.
        if achieved > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.ok_or(TrainError::NoFeasiblePoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hyperparameters_bracket_unit_interval() {
        const { assert!(GAMMA < 0.0 && ZETA > 1.0) };
        assert!((penalty_shift() + (2.0 / 3.0) * 11f64.ln()).abs() < 1e-15);
        assert!((zero_threshold() + 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_at_half() {
        let z = sample_gate_with_noise(&[0.0f64], &[0.5]);
        assert!((z[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_clamps_at_extremes() {
        assert_eq!(sample_gate_with_noise(&[0.0f64], &[1e-12]), vec![0.0]);
        assert_eq!(sample_gate_with_noise(&[0.0f64], &[1.0 - 1e-12]), vec![1.0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let la = vec![0.3f32; 16];
        let a = sample_gate(&la, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_gate(&la, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|z| (0.0..=1.0).contains(z)));
    }

    #[test]
    fn penalty_closed_form_values() {
        assert!((expected_l0_penalty(&[0.0f64]) - 0.8318).abs() < 1e-4);
        assert!(expected_l0_penalty(&[-60.0f64]) < 1e-20);
        assert!((expected_l0_penalty(&[0.0f64, 0.0]) - 2.0 * 0.8318).abs() < 2e-4);
    }

    #[test]
    fn test_gate_values() {
        assert!((test_gate(&[0.0f64])[0] - 0.5).abs() < 1e-15);
        assert_eq!(test_gate(&[-10.0f64]), vec![0.0]);
        assert_eq!(test_gate(&[10.0f64]), vec![1.0]);
        let t = zero_threshold();
        assert_eq!(test_gate(&[t - 1e-6]), vec![0.0]);
        assert!(test_gate(&[t + 1e-6])[0] > 0.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let u = [0.37f64, 0.81, 0.05];
        let la = [0.2f64, -0.4, 1.3];
        let d = gate_derivative(&la, &u);
        for i in 0..3 {
            let h = 1e-6;
            let mut p = la;
            p[i] += h;
            let mut m = la;
            m[i] -= h;
            let fd =
                (sample_gate_with_noise(&p, &u)[i] - sample_gate_with_noise(&m, &u)[i]) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-6, "{i}: {fd} vs {}", d[i]);
        }
    }

    #[test]
    fn penalty_is_increasing() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.25).collect();
        let p: Vec<f64> = xs.iter().map(|&x| expected_l0_penalty(&[x])).collect();
        assert!(p.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for la in [-3.0f64, 0.0, 3.0] {
            let n = 100_000;
            let open = (0..n)
                .filter(|_| sample_gate(&[la], &mut rng)[0] > 0.0)
                .count();
            let mc = open as f64 / n as f64;
            assert!(
                (mc - expected_l0_penalty(&[la])).abs() < 0.01,
                "log α {la}: {mc}"
            );
        }
    }
}
