//! Single-rank updates: after pruning, each gate matrix of every layer gets a
//! learned correction `ΔW = u·vᵀ` while the pruned weights stay frozen.
//!
//! An update is only meaningful for the operating point it was trained on,
//! so it carries the FLOPs fraction and the hash of its prune mask, and
//! [`apply_sru`] refuses to combine it with any other mask.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, Extras, ParamSet, Trainable};
use crate::model::{Gate, ModelError, QrnnModel};
use crate::pruning::PruneMask;
use crate::rng::rng_for;
use crate::tensor::{Matrix, Real};
use crate::train::{self, LoopConfig, TrainError};

/// Standard deviation of the initial `u` and `v` entries.
pub const INIT_STD: f64 = 0.1;

/// Fixed per-update overhead in the stored form: the FLOPs fraction as an
/// f64 and the raw 32-byte mask digest.
pub const TAG_BYTES: usize = 8 + 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SruError {
    #[error("update was trained for mask {expected}, got mask {got}")]
    MaskMismatch { expected: String, got: String },
    #[error("update has {got} layers, model has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("layer {layer} {gate}: factor lengths ({u}, {v}) do not match weight shape {shape:?}")]
    FactorShape {
        layer: usize,
        gate: &'static str,
        u: usize,
        v: usize,
        shape: (usize, usize),
    },
    #[error("model shape does not match the pruned shape of the mask")]
    ModelMaskMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A rank-1 factor pair: `ΔW = u·vᵀ` with `u` of length `m` and `v` of length `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOne<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> RankOne<T> {
    pub fn outer(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.u.len(), self.v.len());
        for (i, &ui) in self.u.iter().enumerate() {
            for (o, &vj) in out.row_mut(i).iter_mut().zip(&self.v) {
                *o = ui * vj;
            }
        }
        out
    }
}

/// The operating point an update belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruTag {
    pub flops_fraction: f64,
    pub mask_hash: String,
}

/// Rank-1 updates for `W_z`, `W_f`, `W_o` of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruUpdate<T> {
    pub layers: Vec<[RankOne<T>; 3]>,
    pub tag: SruTag,
}

impl<T: Real> SruUpdate<T> {
    /// Zero update (`u = v = 0`) shaped for `model`.
    pub fn zeros(model: &QrnnModel<T>, tag: SruTag) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let (m, s) = l.w_z.shape();
                std::array::from_fn(|_| RankOne {
                    u: vec![T::zero(); m],
                    v: vec![T::zero(); s],
                })
            })
            .collect();
        Self { layers, tag }
    }

    pub fn factor(&self, layer: usize, gate: Gate) -> &RankOne<T> {
        &self.layers[layer][gate_index(gate)]
    }

    pub fn num_elements(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(|r| r.u.len() + r.v.len())
            .sum()
    }

    pub fn check<U: Real>(&self, model: &QrnnModel<U>) -> Result<(), SruError> {
        if self.layers.len() != model.num_layers() {
            return Err(SruError::LayerCount {
                expected: model.num_layers(),
                got: self.layers.len(),
            });
        }
        for (l, (factors, w)) in self.layers.iter().zip(model.layers()).enumerate() {
            for g in Gate::ALL {
                let r = &factors[gate_index(g)];
                let shape = w.gate(g).shape();
                if (r.u.len(), r.v.len()) != shape {
                    return Err(SruError::FactorShape {
                        layer: l,
                        gate: g.name(),
                        u: r.u.len(),
                        v: r.v.len(),
                        shape,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SruUpdate<U> {
        let conv = |x: &[T]| x.iter().map(|v| U::of(v.as_f64())).collect();
        SruUpdate {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    std::array::from_fn(|g| RankOne {
                        u: conv(&l[g].u),
                        v: conv(&l[g].v),
                    })
                })
                .collect(),
            tag: self.tag.clone(),
        }
    }
}

pub(crate) fn gate_index(g: Gate) -> usize {
    match g {
        Gate::Z => 0,
        Gate::F => 1,
        Gate::O => 2,
    }
}

/// Parameters in order: `u`, `v` of `W_z`, `W_f`, `W_o` for each layer.
impl<T: Real> Trainable<T> for SruUpdate<T> {
    fn params(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .flat_map(|r| [r.u.as_slice(), r.v.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.iter_mut())
            .flat_map(|r| [r.u.as_mut_slice(), r.v.as_mut_slice()])
            .collect()
    }
}

/// Entries drawn from `Normal(0, 0.1)`, seeded.
pub fn init_sru<T: Real>(
    pruned: &QrnnModel<T>,
    mask: &PruneMask,
    flops_fraction: f64,
    seed: u64,
) -> SruUpdate<T> {
    let mut rng = rng_for(seed, "sru-init");
    init_sru_with(pruned, mask, flops_fraction, &mut rng)
}

pub fn init_sru_with<T: Real, R: Rng>(
    pruned: &QrnnModel<T>,
    mask: &PruneMask,
    flops_fraction: f64,
    rng: &mut R,
) -> SruUpdate<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut sru = SruUpdate::zeros(
        pruned,
        SruTag {
            flops_fraction,
            mask_hash: mask.hash(),
        },
    );
    for p in sru.params_mut() {
        for x in p {
            *x = T::of(normal.sample(rng));
        }
    }
    sru
}

fn combine<T: Real>(
    model: &QrnnModel<T>,
    sru: &SruUpdate<T>,
    sign: T,
) -> Result<QrnnModel<T>, SruError> {
    sru.check(model)?;
    let mut out = model.clone();
    for (l, factors) in sru.layers.iter().enumerate() {
        for g in Gate::ALL {
            let r = &factors[gate_index(g)];
            let w = out.layer_mut(l).gate_mut(g);
            for (i, &ui) in r.u.iter().enumerate() {
                for (x, &vj) in w.row_mut(i).iter_mut().zip(&r.v) {
                    *x = *x + sign * (ui * vj);
                }
            }
        }
    }
    Ok(out)
}

/// `W* = W + u·vᵀ` for every gate, without any mask check.
pub(crate) fn add_rank_one<T: Real>(
    model: &QrnnModel<T>,
    sru: &SruUpdate<T>,
) -> Result<QrnnModel<T>, SruError> {
    combine(model, sru, T::one())
}

/// Adds the update to a pruned model, checking it was trained for `mask`.
pub fn apply_sru<T: Real>(
    pruned: &QrnnModel<T>,
    mask: &PruneMask,
    sru: &SruUpdate<T>,
) -> Result<QrnnModel<T>, SruError> {
    let hash = mask.hash();
    if hash != sru.tag.mask_hash {
        return Err(SruError::MaskMismatch {
            expected: sru.tag.mask_hash.clone(),
            got: hash,
        });
    }
    if pruned.config().hidden_sizes != mask.kept_counts() {
        return Err(SruError::ModelMaskMismatch);
    }
    add_rank_one(pruned, sru)
}

/// Inverse of [`apply_sru`]: subtracts `u·vᵀ`.
pub fn remove_sru<T: Real>(
    model: &QrnnModel<T>,
    sru: &SruUpdate<T>,
) -> Result<QrnnModel<T>, SruError> {
    combine(model, sru, -T::one())
}

/// Width of one stored factor element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementWidth {
    F32,
    F16,
}

impl ElementWidth {
    pub fn bytes(self) -> usize {
        match self {
            ElementWidth::F32 => 4,
            ElementWidth::F16 => 2,
        }
    }
}

/// Stored size of one update: its tag plus every factor element.
pub fn sru_storage_bytes<T: Real>(sru: &SruUpdate<T>, width: ElementWidth) -> usize {
    TAG_BYTES + sru.num_elements() * width.bytes()
}

/// Same size computed from shapes alone: `3·Σ_l (m_l + s_l)` elements.
pub fn sru_storage_bytes_for(hidden: &[usize], stacked: &[usize], width: ElementWidth) -> usize {
    let elements: usize = hidden.iter().zip(stacked).map(|(m, s)| 3 * (m + s)).sum();
    TAG_BYTES + elements * width.bytes()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruTrainConfig {
    #[serde(flatten)]
    pub schedule: LoopConfig,
}

impl Default for SruTrainConfig {
    fn default() -> Self {
        Self {
            schedule: LoopConfig {
                steps: 2000,
                lr: 5e-3,
                ..LoopConfig::default()
            },
        }
    }
}

/// Trains the factors on the frozen pruned model by Adam on cross-entropy.
pub fn train_sru<T: Real>(
    pruned: &QrnnModel<T>,
    mask: &PruneMask,
    flops_fraction: f64,
    stream: &[u32],
    cfg: &SruTrainConfig,
) -> Result<SruUpdate<T>, TrainError> {
    if pruned.config().hidden_sizes != mask.kept_counts() {
        return Err(SruError::ModelMaskMismatch.into());
    }
    let mut sru = init_sru(pruned, mask, flops_fraction, cfg.schedule.seed);
    train::run_loop(
        stream,
        &cfg.schedule,
        &mut sru,
        |sru, batch| {
            let extras = Extras {
                gates: None,
                sru: Some(sru),
            };
            grad::loss_and_gradients(pruned, &extras, batch, ParamSet::SruFactors)
        },
        |_, _| {},
    )?;
    Ok(sru)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pruning::{apply_mask, filter_norm_mask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> QrnnModel<f64> {
        let cfg = ModelConfig::new(11, 4, vec![6, 4], vec![2, 1]).unwrap();
        QrnnModel::init_random(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_update_is_identity() {
        let m = model();
        let mask = PruneMask::full(m.config());
        let sru = SruUpdate::zeros(
            &m,
            SruTag {
                flops_fraction: 1.0,
                mask_hash: mask.hash(),
            },
        );
        assert_eq!(apply_sru(&m, &mask, &sru).unwrap(), m);
    }

    #[test]
    fn apply_then_remove_round_trips() {
        let m = model();
        let mask = PruneMask::full(m.config());
        let sru = init_sru(&m, &mask, 1.0, 4);
        let back = remove_sru(&apply_sru(&m, &mask, &sru).unwrap(), &sru).unwrap();
        for (a, b) in m.layers().iter().zip(back.layers()) {
            for g in Gate::ALL {
                for (x, y) in a.gate(g).data().iter().zip(b.gate(g).data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn update_is_rank_one() {
        let m = model();
        let mask = PruneMask::full(m.config());
        let sru = init_sru(&m, &mask, 1.0, 9);
        let applied = apply_sru(&m, &mask, &sru).unwrap();
        let delta = applied.layers()[0].w_f.sub(&m.layers()[0].w_f).unwrap();
        // Every 2×2 minor of a rank-1 matrix vanishes.
        for (i, j) in [(0, 1), (2, 5), (3, 4)] {
            for (p, q) in [(0, 1), (2, 7)] {
                let det = delta.get(i, p) * delta.get(j, q) - delta.get(i, q) * delta.get(j, p);
                assert!(det.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_mask_is_refused() {
        let m = model();
        let mask = filter_norm_mask(&m, 0.5).unwrap();
        let pruned = apply_mask(&m, &mask).unwrap();
        let sru = init_sru(&pruned, &mask, 0.7, 1);
        let other = PruneMask::new(
            mask.base_hidden().to_vec(),
            vec![vec![0, 1, 2], vec![0, 1, 2, 3]],
        )
        .unwrap();
        assert_ne!(other.hash(), mask.hash());
        assert!(matches!(
            apply_sru(&pruned, &other, &sru),
            Err(SruError::MaskMismatch { .. })
        ));
        assert!(apply_sru(&pruned, &mask, &sru).is_ok());
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig::new(50, 64, vec![200, 64], vec![2, 1]).unwrap();
        let m: QrnnModel<f64> = QrnnModel::zeros(cfg).unwrap();
        let sru = init_sru(&m, &PruneMask::full(m.config()), 1.0, 3);
        let xs: Vec<f64> = sru.params().into_iter().flatten().copied().collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn storage_size_matches_shape_formula() {
        let m = model();
        let sru = init_sru(&m, &PruneMask::full(m.config()), 1.0, 3);
        let hidden = m.config().hidden_sizes.clone();
        let stacked: Vec<usize> = (0..2).map(|l| m.config().stacked_dim(l)).collect();
        for w in [ElementWidth::F32, ElementWidth::F16] {
            assert_eq!(
                sru_storage_bytes(&sru, w),
                sru_storage_bytes_for(&hidden, &stacked, w)
            );
        }
        // (6 + 8) + (4 + 6) per gate, three gates.
        assert_eq!(sru.num_elements(), 72);
    }
}
