//! Structured filter pruning with indices tied across `W_z`, `W_f`, `W_o`.
//!
//! Dropping filter `i` of layer `l` deletes row `i` of all three gate
//! matrices of layer `l` and, in layer `l+1`, the input column `i` of every
//! window block. The final layer's filters are never dropped because its
//! output feeds the tied embedding projection.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Gate, LayerState, ModelConfig, ModelError, QrnnLayerWeights, QrnnModel};
use crate::rng::rng_for;
use crate::tensor::Real;

/// Achieved FLOPs may differ from the requested operating point by this much.
pub const OPERATING_POINT_TOLERANCE: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("mask has {got} layers, model has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("layer {layer}: kept set is empty")]
    EmptyLayer { layer: usize },
    #[error("layer {layer}: filter index {index} out of range for {size} filters")]
    IndexOutOfRange {
        layer: usize,
        index: usize,
        size: usize,
    },
    #[error("layer {layer}: kept indices must be strictly increasing")]
    Unsorted { layer: usize },
    #[error("the final layer is tied to the embedding and cannot be pruned")]
    FinalLayerPruned,
    #[error("per-layer drop fraction {0} must lie in [0, 1) and leave at least one filter")]
    FractionOutOfRange(f64),
    #[error("target FLOPs fraction {0} must lie in (0, 1]")]
    TargetOutOfRange(f64),
    #[error(
        "target FLOPs fraction {target} is unreachable; the minimum achievable is {minimum:.4}"
    )]
    Unreachable { target: f64, minimum: f64 },
    #[error("activation statistics missing or mis-shaped for layer {0}")]
    StatsShape(usize),
    #[error("activation statistics need a non-empty token stream")]
    EmptyStream,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-layer sorted kept-filter indices, relative to the unpruned model
/// whose hidden sizes are `base_hidden`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneMask {
    base_hidden: Vec<usize>,
    kept: Vec<Vec<usize>>,
}

impl PruneMask {
    pub fn new(base_hidden: Vec<usize>, kept: Vec<Vec<usize>>) -> Result<Self, PruneError> {
        let mask = Self { base_hidden, kept };
        mask.validate()?;
        Ok(mask)
    }

    /// Keeps everything.
    pub fn full(config: &ModelConfig) -> Self {
        Self {
            base_hidden: config.hidden_sizes.clone(),
            kept: config
                .hidden_sizes
                .iter()
                .map(|&m| (0..m).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), PruneError> {
        if self.kept.len() != self.base_hidden.len() {
            return Err(PruneError::LayerCount {
                expected: self.base_hidden.len(),
                got: self.kept.len(),
            });
        }
        for (layer, (kept, &size)) in self.kept.iter().zip(&self.base_hidden).enumerate() {
            if kept.is_empty() {
                return Err(PruneError::EmptyLayer { layer });
            }
            if kept.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PruneError::Unsorted { layer });
            }
            if let Some(&index) = kept.iter().find(|&&i| i >= size) {
                return Err(PruneError::IndexOutOfRange { layer, index, size });
            }
        }
        if let (Some(last), Some(&size)) = (self.kept.last(), self.base_hidden.last()) {
            if last.len() != size {
                return Err(PruneError::FinalLayerPruned);
            }
        }
        Ok(())
    }

    pub fn base_hidden(&self) -> &[usize] {
        &self.base_hidden
    }

    pub fn kept(&self, layer: usize) -> &[usize] {
        &self.kept[layer]
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.kept.len()
    }

    pub fn is_full(&self) -> bool {
        self.kept
            .iter()
            .zip(&self.base_hidden)
            .all(|(k, &m)| k.len() == m)
    }

    /// Dropped indices of `layer`, ascending.
    pub fn dropped(&self, layer: usize) -> Vec<usize> {
        let kept = &self.kept[layer];
        (0..self.base_hidden[layer])
            .filter(|i| kept.binary_search(i).is_err())
            .collect()
    }

    /// Hex SHA-256 identifying this mask.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("mask serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Hidden sizes of the pruned model.
    pub fn pruned_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            hidden_sizes: self.kept_counts(),
            ..base.clone()
        }
    }

    fn check_against(&self, config: &ModelConfig) -> Result<(), PruneError> {
        self.validate()?;
        if self.base_hidden != config.hidden_sizes {
            return Err(PruneError::LayerCount {
                expected: config.num_layers,
                got: self.kept.len(),
            });
        }
        Ok(())
    }
}

/// Returns a physically smaller copy of `model`.
pub fn apply_mask<T: Real>(
    model: &QrnnModel<T>,
    mask: &PruneMask,
) -> Result<QrnnModel<T>, PruneError> {
    let base = model.config();
    mask.check_against(base)?;
    let mut layers = Vec::with_capacity(base.num_layers);
    for (l, layer) in model.layers().iter().enumerate() {
        let rows = mask.kept(l);
        let k = layer.input_dim();
        let cols: Vec<usize> = if l == 0 {
            (0..layer.w_z.cols()).collect()
        } else {
            let prev = mask.kept(l - 1);
            (0..layer.window())
                .flat_map(|j| prev.iter().map(move |&i| j * k + i))
                .collect()
        };
        let new_k = if l == 0 { k } else { mask.kept(l - 1).len() };
        let cut = |g: Gate| layer.gate(g).select_rows(rows).select_cols(&cols);
        layers.push(QrnnLayerWeights::new(
            cut(Gate::Z),
            cut(Gate::F),
            cut(Gate::O),
            new_k,
            layer.window(),
        )?);
    }
    Ok(QrnnModel::new(
        mask.pruned_config(base),
        model.embedding().clone(),
        layers,
    )?)
}

/// Filters dropped per layer for a uniform per-layer fraction: `⌊n·m⌋`.
pub fn drop_count(fraction: f64, filters: usize) -> usize {
    // The epsilon keeps e.g. 0.29·100 from flooring to 28.
    ((fraction * filters as f64) + 1e-9).floor() as usize
}

fn prunable_layers(config: &ModelConfig) -> std::ops::Range<usize> {
    0..config.num_layers - 1
}

fn check_fraction(config: &ModelConfig, fraction: f64) -> Result<(), PruneError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(PruneError::FractionOutOfRange(fraction));
    }
    for l in prunable_layers(config) {
        if drop_count(fraction, config.hidden_sizes[l]) >= config.hidden_sizes[l] {
            return Err(PruneError::FractionOutOfRange(fraction));
        }
    }
    Ok(())
}

/// Kept counts implied by a uniform fraction.
pub fn kept_counts_for_fraction(
    config: &ModelConfig,
    fraction: f64,
) -> Result<Vec<usize>, PruneError> {
    check_fraction(config, fraction)?;
    Ok(config
        .hidden_sizes
        .iter()
        .enumerate()
        .map(|(l, &m)| {
            if l + 1 < config.num_layers {
                m - drop_count(fraction, m)
            } else {
                m
            }
        })
        .collect())
}

/// Drops the `k` lowest-scoring filters; ties drop the lower index first.
fn bottom_k_mask(
    config: &ModelConfig,
    scores: &[Vec<f64>],
    fraction: f64,
) -> Result<PruneMask, PruneError> {
    let kept = kept_counts_for_fraction(config, fraction)?;
    mask_from_scores(config, scores, &kept)
}

/// Keeps the `kept[l]` highest-scoring filters of each prunable layer
/// (ties keep the higher index). The final layer is always kept whole.
pub fn mask_from_scores(
    config: &ModelConfig,
    scores: &[Vec<f64>],
    kept: &[usize],
) -> Result<PruneMask, PruneError> {
    if kept.len() != config.num_layers {
        return Err(PruneError::LayerCount {
            expected: config.num_layers,
            got: kept.len(),
        });
    }
    let mut out = Vec::with_capacity(config.num_layers);
    for (l, &m) in config.hidden_sizes.iter().enumerate() {
        if l + 1 == config.num_layers {
            out.push((0..m).collect());
            continue;
        }
        if kept[l] == 0 {
            return Err(PruneError::EmptyLayer { layer: l });
        }
        let s = scores
            .get(l)
            .filter(|s| s.len() == m)
            .ok_or(PruneError::StatsShape(l))?;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        let mut keep: Vec<usize> = order[m.saturating_sub(kept[l])..].to_vec();
        keep.sort_unstable();
        out.push(keep);
    }
    PruneMask::new(config.hidden_sizes.clone(), out)
}

/// Drops `⌊n·m⌋` uniformly random filters per prunable layer.
pub fn random_mask<T: Real>(
    model: &QrnnModel<T>,
    fraction: f64,
    seed: u64,
) -> Result<PruneMask, PruneError> {
    let config = model.config();
    check_fraction(config, fraction)?;
    let mut rng = rng_for(seed, "random-mask");
    let kept = config
        .hidden_sizes
        .iter()
        .enumerate()
        .map(|(l, &m)| {
            if l + 1 == config.num_layers {
                return (0..m).collect();
            }
            let dropped = sample(&mut rng, m, drop_count(fraction, m)).into_vec();
            let mut keep: Vec<usize> = (0..m).filter(|i| !dropped.contains(i)).collect();
            keep.sort_unstable();
            keep
        })
        .collect();
    PruneMask::new(config.hidden_sizes.clone(), kept)
}

/// L1 norm of each row of `W_z`, per layer.
pub fn filter_norms<T: Real>(model: &QrnnModel<T>) -> Vec<Vec<f64>> {
    model
        .layers()
        .iter()
        .map(|layer| {
            (0..layer.hidden())
                .map(|i| layer.w_z.row(i).iter().map(|x| x.as_f64().abs()).sum())
                .collect()
        })
        .collect()
}

/// Drops the filters with the smallest `W_z` row L1 norms.
pub fn filter_norm_mask<T: Real>(
    model: &QrnnModel<T>,
    fraction: f64,
) -> Result<PruneMask, PruneError> {
    bottom_k_mask(model.config(), &filter_norms(model), fraction)
}

/// Mean absolute hidden activation per filter, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub per_layer: Vec<Vec<f32>>,
    pub tokens: usize,
}

impl ActivationStats {
    pub fn num_filters(&self) -> usize {
        self.per_layer.iter().map(Vec::len).sum()
    }

    /// Stored size at 4 bytes per filter.
    pub fn storage_bytes(&self) -> usize {
        4 * self.num_filters()
    }
}

const STATS_CHUNK: usize = 256;

/// Single in-order pass over the first `max_tokens` tokens of `stream`
/// (all of it when `None`), carrying recurrent state throughout.
pub fn collect_activation_stats<T: Real>(
    model: &QrnnModel<T>,
    stream: &[u32],
    max_tokens: Option<usize>,
) -> Result<ActivationStats, PruneError> {
    let n = max_tokens.map_or(stream.len(), |m| m.min(stream.len()));
    if n == 0 {
        return Err(PruneError::EmptyStream);
    }
    let mut sums: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|l| vec![0.0; l.hidden()])
        .collect();
    let mut states: Vec<LayerState<T>> = model.initial_states();
    for chunk in stream[..n].chunks(STATS_CHUNK) {
        let outputs = model.hidden_outputs(chunk, &mut states, None, None)?;
        for (sum, h) in sums.iter_mut().zip(&outputs) {
            for (i, s) in sum.iter_mut().enumerate() {
                *s += h.row(i).iter().map(|x| x.as_f64().abs()).sum::<f64>();
            }
        }
    }
    Ok(ActivationStats {
        per_layer: sums
            .into_iter()
            .map(|s| s.into_iter().map(|x| (x / n as f64) as f32).collect())
            .collect(),
        tokens: n,
    })
}

/// Drops the filters with the smallest mean activation.
pub fn mean_activation_mask(
    config: &ModelConfig,
    stats: &ActivationStats,
    fraction: f64,
) -> Result<PruneMask, PruneError> {
    let scores: Vec<Vec<f64>> = stats
        .per_layer
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    bottom_k_mask(config, &scores, fraction)
}

/// Analytic FLOPs per predicted token. Per layer with `m'` kept filters and
/// `s'` surviving columns: `3·(m'·s' + m'·(s'−1))` for the convolution plus
/// `5·m'` for pooling; the tied output layer adds `V·d + V·(d−1)`.
/// Activation functions and the embedding lookup are free.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsModel {
    config: ModelConfig,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
        }
    }

    pub fn layer_flops(&self, layer: usize, kept: usize, kept_inputs: usize) -> u64 {
        let (m, s) = (
            kept as u64,
            (kept_inputs * self.config.window_sizes[layer]) as u64,
        );
        3 * (m * s + m * s.saturating_sub(1)) + 5 * m
    }

    pub fn output_flops(&self) -> u64 {
        let (v, d) = (self.config.vocab_size as u64, self.config.embed_dim as u64);
        v * d + v * d.saturating_sub(1)
    }

    /// FLOPs per token for the given kept counts.
    pub fn per_token_counts(&self, kept: &[usize]) -> u64 {
        let mut total = self.output_flops();
        for (l, &m) in kept.iter().enumerate() {
            let k = if l == 0 {
                self.config.embed_dim
            } else {
                kept[l - 1]
            };
            total += self.layer_flops(l, m, k);
        }
        total
    }

    pub fn per_token(&self, mask: &PruneMask) -> u64 {
        self.per_token_counts(&mask.kept_counts())
    }

    pub fn full(&self) -> u64 {
        self.per_token_counts(&self.config.hidden_sizes)
    }

    pub fn fraction(&self, mask: &PruneMask) -> f64 {
        self.per_token(mask) as f64 / self.full() as f64
    }
}

pub fn flops_per_token(config: &ModelConfig, mask: &PruneMask) -> u64 {
    FlopsModel::new(config).per_token(mask)
}

/// A solved operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Uniform per-layer drop fraction.
    pub fraction: f64,
    /// Achieved FLOPs relative to the unpruned model.
    pub achieved: f64,
}

/// Finds the uniform drop fraction whose FLOPs fraction is closest to
/// `target`, by binary search over the fractions at which some layer's
/// kept count changes.
pub fn solve_operating_point(
    config: &ModelConfig,
    target: f64,
) -> Result<OperatingPoint, PruneError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(PruneError::TargetOutOfRange(target));
    }
    let flops = FlopsModel::new(config);
    let full = flops.full() as f64;
    let mut breakpoints: Vec<f64> = vec![0.0];
    for l in prunable_layers(config) {
        let m = config.hidden_sizes[l];
        breakpoints.extend((1..m).map(|j| j as f64 / m as f64));
    }
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let achieved = |n: f64| {
        let kept = kept_counts_for_fraction(config, n).expect("breakpoints are valid fractions");
        flops.per_token_counts(&kept) as f64 / full
    };
    // Achieved FLOPs is non-increasing along `breakpoints`.
    let first_below = breakpoints.partition_point(|&n| achieved(n) > target);
    let minimum = achieved(*breakpoints.last().unwrap());
    if first_below == breakpoints.len() {
        if target < minimum - OPERATING_POINT_TOLERANCE {
            return Err(PruneError::Unreachable { target, minimum });
        }
        let n = *breakpoints.last().unwrap();
        return Ok(OperatingPoint {
            fraction: n,
            achieved: minimum,
        });
    }
    let mut best = breakpoints[first_below];
    if first_below > 0 {
        let above = breakpoints[first_below - 1];
        if (achieved(above) - target).abs() <= (achieved(best) - target).abs() {
            best = above;
        }
    }
    Ok(OperatingPoint {
        fraction: best,
        achieved: achieved(best),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, OpCounter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(hidden: Vec<usize>, windows: Vec<usize>, seed: u64) -> QrnnModel<f64> {
        let embed = *hidden.last().unwrap();
        let cfg = ModelConfig::new(13, embed, hidden, windows).unwrap();
        QrnnModel::init_uniform(cfg, &mut ChaCha8Rng::seed_from_u64(seed), 0.5, Some(0.5)).unwrap()
    }

    #[test]
    fn full_mask_is_identity() {
        let m = toy(vec![6, 5, 4], vec![2, 1, 1], 1);
        let pruned = apply_mask(&m, &PruneMask::full(m.config())).unwrap();
        assert_eq!(pruned, m);
    }

    #[test]
    fn drop_first_filter_removes_row_and_column() {
        let m = toy(vec![3, 4], vec![1, 1], 2);
        let mask = PruneMask::new(vec![3, 4], vec![vec![1, 2], vec![0, 1, 2, 3]]).unwrap();
        let p = apply_mask(&m, &mask).unwrap();
        assert_eq!(p.layers()[0].w_z, m.layers()[0].w_z.select_rows(&[1, 2]));
        assert_eq!(p.layers()[1].w_o, m.layers()[1].w_o.select_cols(&[1, 2]));
        assert_eq!(p.config().hidden_sizes, vec![2, 4]);
    }

    #[test]
    fn window_blocks_each_lose_the_column() {
        let m = toy(vec![3, 4], vec![1, 2], 3);
        let mask = PruneMask::new(vec![3, 4], vec![vec![0, 2], (0..4).collect()]).unwrap();
        let p = apply_mask(&m, &mask).unwrap();
        // Layer 1 has k = 3, r = 2: columns {1, 4} go.
        assert_eq!(
            p.layers()[1].w_f,
            m.layers()[1].w_f.select_cols(&[0, 2, 3, 5])
        );
        assert_eq!(p.layers()[1].input_dim(), 2);
    }

    #[test]
    fn mask_validation() {
        assert_eq!(
            PruneMask::new(vec![3, 2], vec![vec![], vec![0, 1]]),
            Err(PruneError::EmptyLayer { layer: 0 })
        );
        assert_eq!(
            PruneMask::new(vec![3, 2], vec![vec![3], vec![0, 1]]),
            Err(PruneError::IndexOutOfRange {
                layer: 0,
                index: 3,
                size: 3
            })
        );
        assert_eq!(
            PruneMask::new(vec![3, 2], vec![vec![0], vec![1]]),
            Err(PruneError::FinalLayerPruned)
        );
        assert_eq!(
            PruneMask::new(vec![3, 2], vec![vec![2, 1], vec![0, 1]]),
            Err(PruneError::Unsorted { layer: 0 })
        );
    }

    #[test]
    fn mask_hash_distinguishes_masks() {
        let a = PruneMask::new(vec![3, 2], vec![vec![0, 1], vec![0, 1]]).unwrap();
        let b = PruneMask::new(vec![3, 2], vec![vec![0, 2], vec![0, 1]]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(b.dropped(0), vec![1]);
    }

    #[test]
    fn random_mask_counts_and_determinism() {
        let m = toy(vec![100, 100, 8], vec![2, 1, 1], 4);
        assert!(random_mask(&m, 0.0, 1).unwrap().is_full());
        let mask = random_mask(&m, 0.2, 9).unwrap();
        assert_eq!(mask.kept_counts(), vec![80, 80, 8]);
        assert_eq!(mask, random_mask(&m, 0.2, 9).unwrap());
        let differing = (0..10u64)
            .filter(|&s| random_mask(&m, 0.2, s).unwrap() != mask)
            .count();
        assert!(differing >= 9);
        assert_eq!(
            random_mask(&m, 1.0, 1),
            Err(PruneError::FractionOutOfRange(1.0))
        );
    }

    #[test]
    fn drop_count_floors() {
        assert_eq!(drop_count(0.2, 100), 20);
        assert_eq!(drop_count(0.29, 100), 29);
        assert_eq!(drop_count(0.5, 3), 1);
        assert_eq!(drop_count(0.0, 7), 0);
    }

    fn model_with_z_norms(norms: &[f64]) -> QrnnModel<f64> {
        let m = norms.len();
        let cfg = ModelConfig::new(5, 2, vec![m, 2], vec![1, 1]).unwrap();
        let mut model = QrnnModel::<f64>::zeros(cfg).unwrap();
        let rows: Vec<Vec<f64>> = norms.iter().map(|&n| vec![n / 2.0, -n / 2.0]).collect();
        model.layer_mut(0).w_z = Matrix::from_rows(&rows);
        model
    }

    #[test]
    fn filter_norm_drops_smallest() {
        let model = model_with_z_norms(&[0.1, 5.0, 0.2]);
        let mask = filter_norm_mask(&model, 1.0 / 3.0).unwrap();
        assert_eq!(mask.dropped(0), vec![0]);
    }

    #[test]
    fn filter_norm_ties_drop_lower_index() {
        let model = model_with_z_norms(&[1.0; 4]);
        let mask = filter_norm_mask(&model, 0.5).unwrap();
        assert_eq!(mask.dropped(0), vec![0, 1]);
    }

    fn stats(v: Vec<f32>) -> (ModelConfig, ActivationStats) {
        let cfg = ModelConfig::new(5, 2, vec![v.len(), 2], vec![1, 1]).unwrap();
        let s = ActivationStats {
            per_layer: vec![v, vec![1.0, 1.0]],
            tokens: 10,
        };
        (cfg, s)
    }

    #[test]
    fn mean_activation_drops_smallest_and_ties_low() {
        let (cfg, s) = stats(vec![0.1, 5.0, 0.2]);
        assert_eq!(
            mean_activation_mask(&cfg, &s, 1.0 / 3.0)
                .unwrap()
                .dropped(0),
            vec![0]
        );
        let (cfg, s) = stats(vec![2.0; 4]);
        assert_eq!(
            mean_activation_mask(&cfg, &s, 0.5).unwrap().dropped(0),
            vec![0, 1]
        );
    }

    #[test]
    fn mean_activation_requires_stats() {
        let (cfg, mut s) = stats(vec![0.1, 5.0, 0.2]);
        s.per_layer.clear();
        assert_eq!(
            mean_activation_mask(&cfg, &s, 0.3),
            Err(PruneError::StatsShape(0))
        );
    }

    #[test]
    fn stats_of_constant_output() {
        // Zero weights: Z = 0, F = O = 0.5, so c stays 0 and h = 0 everywhere.
        let cfg = ModelConfig::new(5, 3, vec![4, 3], vec![2, 1]).unwrap();
        let model = QrnnModel::<f32>::zeros(cfg).unwrap();
        let s = collect_activation_stats(&model, &[1, 2, 3, 4, 0, 1], None).unwrap();
        assert_eq!(s.per_layer, vec![vec![0.0; 4], vec![0.0; 3]]);
        assert_eq!(s.tokens, 6);
        assert_eq!(
            collect_activation_stats(&model, &[], None),
            Err(PruneError::EmptyStream)
        );
    }

    #[test]
    fn stats_limit_uses_prefix() {
        let m = toy(vec![6, 4], vec![2, 1], 5);
        let stream: Vec<u32> = (0..600).map(|i| (i * 5 % 13) as u32).collect();
        let a = collect_activation_stats(&m, &stream, Some(100)).unwrap();
        let b = collect_activation_stats(&m, &stream[..100], None).unwrap();
        assert_eq!(a, b);
        let all = collect_activation_stats(&m, &stream, Some(10_000)).unwrap();
        assert_eq!(all, collect_activation_stats(&m, &stream, None).unwrap());
    }

    #[test]
    fn output_only_flops() {
        let cfg = ModelConfig::new(10, 4, vec![4], vec![1]).unwrap();
        assert_eq!(FlopsModel::new(&cfg).output_flops(), 70);
    }

    #[test]
    fn full_mask_flops_equal_instrumented_forward() {
        let m = toy(vec![7, 5, 4], vec![2, 1, 1], 6);
        let mut c = OpCounter::new();
        m.forward(&[3], Some(&mut c)).unwrap();
        assert_eq!(
            flops_per_token(m.config(), &PruneMask::full(m.config())),
            c.flops()
        );
    }

    #[test]
    fn halving_a_middle_layer_halves_both_conv_terms() {
        let cfg = ModelConfig::new(10, 4, vec![8, 8, 4], vec![1, 1, 1]).unwrap();
        let f = FlopsModel::new(&cfg);
        let full_l1 = f.layer_flops(1, 8, 8);
        let half_l1 = f.layer_flops(1, 4, 8);
        // Rows halve: m·s + m·(s−1) and 5m all scale with m.
        assert_eq!(half_l1 * 2, full_l1);
        // Next layer's inputs halve: s·m + (s−1)·m is linear in s up to the −m term.
        let next_full = 3 * (4 * 8 + 4 * 7);
        let next_half = 3 * (4 * 4 + 4 * 3);
        assert_eq!(f.layer_flops(2, 4, 8) - 20, next_full);
        assert_eq!(f.layer_flops(2, 4, 4) - 20, next_half);
    }

    #[test]
    fn operating_point_identity_and_errors() {
        let cfg = ModelConfig::new(50, 16, vec![32, 32, 16], vec![2, 1, 1]).unwrap();
        let op = solve_operating_point(&cfg, 1.0).unwrap();
        assert_eq!(op.fraction, 0.0);
        assert_eq!(op.achieved, 1.0);
        assert_eq!(
            solve_operating_point(&cfg, 0.0),
            Err(PruneError::TargetOutOfRange(0.0))
        );
        assert_eq!(
            solve_operating_point(&cfg, 1.5),
            Err(PruneError::TargetOutOfRange(1.5))
        );
        match solve_operating_point(&cfg, 0.05) {
            Err(PruneError::Unreachable { minimum, .. }) => assert!(minimum > 0.05),
            other => panic!("expected unreachable, got {other:?}"),
        }
    }

    #[test]
    fn operating_point_monotone() {
        let cfg = ModelConfig::new(40, 16, vec![24, 20, 16], vec![2, 1, 1]).unwrap();
        let fractions: Vec<f64> = (50..=100)
            .map(|t| {
                solve_operating_point(&cfg, t as f64 / 100.0)
                    .unwrap()
                    .fraction
            })
            .collect();
        assert!(fractions.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_layer_model_cannot_prune() {
        let cfg = ModelConfig::new(20, 8, vec![8], vec![2]).unwrap();
        assert!(solve_operating_point(&cfg, 1.0).is_ok());
        assert!(matches!(
            solve_operating_point(&cfg, 0.8),
            Err(PruneError::Unreachable { .. })
        ));
    }
}
