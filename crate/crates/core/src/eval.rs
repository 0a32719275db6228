//! Quality and cost metrics: perplexity, recall at 3, latency, and sweeps
//! over pruning methods and FLOPs targets.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gates::{gates_to_mask_and_scale, HardConcreteGates};
use crate::model::{ModelError, QrnnModel};
use crate::pruning::{
    apply_mask, filter_norm_mask, mean_activation_mask, random_mask, solve_operating_point,
    ActivationStats, FlopsModel, PruneError, PruneMask,
};
use crate::sru::{apply_sru, train_sru, SruTrainConfig};
use crate::tensor::{log_softmax, Real};

/// Rows whose test perplexity exceeds this are flagged in sweep output.
pub const DEFAULT_PPL_CEILING: f64 = 100.0;
/// Timed next-word predictions per latency measurement.
pub const DEFAULT_QUERIES: usize = 350;
pub const DEFAULT_WARMUP: usize = 50;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("stream needs at least two tokens to score a prediction")]
    EmptyStream,
    #[error("unknown pruning method `{0}` (expected random, filter-norm, mean-activation or l0)")]
    UnknownMethod(String),
    #[error("need at least two points with non-zero variance")]
    DegenerateSeries,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Aggregates over every next-token prediction of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StreamScores {
    pub cross_entropy_sum: f64,
    pub top3_hits: usize,
    pub top1_hits: usize,
    pub predictions: usize,
}

impl StreamScores {
    pub fn mean_cross_entropy(&self) -> f64 {
        self.cross_entropy_sum / self.predictions as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_cross_entropy().exp()
    }

    pub fn recall_at_3(&self) -> f64 {
        self.top3_hits as f64 / self.predictions as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.top1_hits as f64 / self.predictions as f64
    }

    fn merge(mut self, other: Self) -> Self {
        self.cross_entropy_sum += other.cross_entropy_sum;
        self.top3_hits += other.top3_hits;
        self.top1_hits += other.top1_hits;
        self.predictions += other.predictions;
        self
    }
}

/// 0-based rank of `target` when logits are sorted descending, with ties
/// ranked by lower token id first.
pub fn rank_of<T: Real>(logits: &[T], target: usize) -> usize {
    let t = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > t || (x == t && i < target))
        .count()
}

/// Scores every prediction of `stream` with batch 1, carrying the hidden
/// state from the first token to the last.
pub fn score_stream<T: Real>(
    model: &QrnnModel<T>,
    stream: &[u32],
) -> Result<StreamScores, EvalError> {
    if stream.len() < 2 {
        return Err(EvalError::EmptyStream);
    }
    let mut states = model.initial_states();
    let inputs = &stream[..stream.len() - 1];
    let targets = &stream[1..];
    let mut scores = StreamScores::default();
    for (x, y) in inputs.chunks(EVAL_CHUNK).zip(targets.chunks(EVAL_CHUNK)) {
        let logits = model.forward_from(x, &mut states, None)?;
        for (t, &target) in y.iter().enumerate() {
            let col = logits.col(t);
            let target = target as usize;
            if target >= col.len() {
                return Err(ModelError::TokenOutOfRange {
                    token: target as u32,
                    vocab: col.len(),
                }
                .into());
            }
            let lp = log_softmax(&col).map_err(ModelError::from)?;
            scores.cross_entropy_sum -= lp[target].as_f64();
            let rank = rank_of(&col, target);
            scores.top3_hits += usize::from(rank < 3);
            scores.top1_hits += usize::from(rank == 0);
            scores.predictions += 1;
        }
    }
    Ok(scores)
}

/// `exp` of the mean next-token cross-entropy over the whole stream.
pub fn perplexity<T: Real>(model: &QrnnModel<T>, stream: &[u32]) -> Result<f64, EvalError> {
    Ok(score_stream(model, stream)?.perplexity())
}

/// Fraction of predictions whose true token is among the three largest logits.
pub fn recall_at_3<T: Real>(model: &QrnnModel<T>, stream: &[u32]) -> Result<f64, EvalError> {
    Ok(score_stream(model, stream)?.recall_at_3())
}

/// Perplexity with the stream cut into `columns` contiguous pieces scored
/// independently (each from a fresh state) and in parallel. Every
/// prediction is still counted once.
pub fn perplexity_columns<T: Real>(
    model: &QrnnModel<T>,
    stream: &[u32],
    columns: usize,
) -> Result<f64, EvalError> {
    if stream.len() < 2 {
        return Err(EvalError::EmptyStream);
    }
    let predictions = stream.len() - 1;
    let columns = columns.clamp(1, predictions);
    let per = predictions.div_ceil(columns);
    let scores = (0..columns)
        .into_par_iter()
        .filter_map(|c| {
            let start = c * per;
            let end = ((c + 1) * per).min(predictions);
            (start < end).then(|| score_stream(model, &stream[start..=end]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores
        .into_iter()
        .fold(StreamScores::default(), StreamScores::merge)
        .perplexity())
}

/// One evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub perplexity: f64,
    pub r_at_3: f64,
    pub flops_fraction: f64,
    pub ms_per_query: Option<f64>,
    /// Externally measured energy, when available.
    pub mj_per_query: Option<f64>,
    pub tokens_evaluated: usize,
    pub tag: Option<String>,
}

pub fn evaluate<T: Real>(
    model: &QrnnModel<T>,
    stream: &[u32],
    split: &str,
    flops_fraction: f64,
) -> Result<EvalReport, EvalError> {
    let s = score_stream(model, stream)?;
    Ok(EvalReport {
        split: split.to_string(),
        perplexity: s.perplexity(),
        r_at_3: s.recall_at_3(),
        flops_fraction,
        ms_per_query: None,
        mj_per_query: None,
        tokens_evaluated: s.predictions,
        tag: None,
    })
}

/// Wall-clock cost of single-token steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub queries: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Times `queries` consecutive next-word predictions after `warmup`
/// untimed ones, feeding tokens from `tokens` in order (wrapping around).
/// Run it on an otherwise idle thread: nothing else should be timed
/// concurrently.
pub fn bench_latency<T: Real>(
    model: &QrnnModel<T>,
    tokens: &[u32],
    queries: usize,
    warmup: usize,
) -> Result<LatencyStats, EvalError> {
    if tokens.is_empty() {
        return Err(EvalError::EmptyStream);
    }
    let mut states = model.initial_states();
    let mut times = Vec::with_capacity(queries);
    for i in 0..warmup + queries {
        let tok = tokens[i % tokens.len()];
        let start = Instant::now();
        let logits = model.step(&mut states, tok)?;
        std::hint::black_box(&logits);
        if i >= warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let n = times.len().max(1) as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(LatencyStats {
        queries,
        warmup,
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}

/// Squared Pearson correlation of two series.
pub fn pearson_r2(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(EvalError::DegenerateSeries);
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateSeries);
    }
    Ok(sxy * sxy / (sxx * syy))
}

/// Filter selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    FilterNorm,
    MeanActivation,
    L0,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Random,
        Method::FilterNorm,
        Method::MeanActivation,
        Method::L0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::FilterNorm => "filter-norm",
            Method::MeanActivation => "mean-activation",
            Method::L0 => "l0",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mean-activation pruning needs activation statistics; run `collect-stats` first")]
    MissingStats,
    #[error("l0 pruning needs trained gates; run `train-gates` first")]
    MissingGates,
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Gate(#[from] crate::gates::GateError),
}

/// A pruned model ready for evaluation.
#[derive(Debug, Clone)]
pub struct PrunedModel<T> {
    pub mask: PruneMask,
    pub model: QrnnModel<T>,
    pub achieved: f64,
}

/// Builds the mask for one method at one FLOPs target and prunes. A target
/// of 1.0 returns the unmodified model under the full mask for every
/// method. For L0 the gate set whose FLOPs fraction is nearest the target
/// is used, with its scale absorption.
pub fn prune_for_target<T: Real>(
    model: &QrnnModel<T>,
    method: Method,
    target: f64,
    seed: u64,
    stats: Option<&ActivationStats>,
    gates: &[HardConcreteGates<T>],
) -> Result<PrunedModel<T>, MaskError> {
    let config = model.config();
    if target.is_nan() || target > 1.0 {
        return Err(PruneError::TargetOutOfRange(target).into());
    }
    if target == 1.0 {
        return Ok(PrunedModel {
            mask: PruneMask::full(config),
            model: model.clone(),
            achieved: 1.0,
        });
    }
    let flops = FlopsModel::new(config);
    if method == Method::L0 {
        let mut best: Option<(f64, PruneMask, QrnnModel<T>)> = None;
        for g in gates {
            let Ok((mask, pruned)) = gates_to_mask_and_scale(model, g) else {
                continue;
            };
            let achieved = flops.fraction(&mask);
            if best
                .as_ref()
                .is_none_or(|(a, _, _)| (achieved - target).abs() < (a - target).abs())
            {
                best = Some((achieved, mask, pruned));
            }
        }
        let (achieved, mask, model) = best.ok_or(MaskError::MissingGates)?;
        return Ok(PrunedModel {
            mask,
            model,
            achieved,
        });
    }
    let point = solve_operating_point(config, target)?;
    let mask = match method {
        Method::Random => random_mask(model, point.fraction, seed)?,
        Method::FilterNorm => filter_norm_mask(model, point.fraction)?,
        Method::MeanActivation => mean_activation_mask(
            config,
            stats.ok_or(MaskError::MissingStats)?,
            point.fraction,
        )?,
        Method::L0 => unreachable!("handled above"),
    };
    let pruned = apply_mask(model, &mask)?;
    Ok(PrunedModel {
        achieved: flops.fraction(&mask),
        mask,
        model: pruned,
    })
}

/// Everything a sweep needs besides the method/target grid.
pub struct SweepInputs<'a, T> {
    pub model: &'a QrnnModel<T>,
    pub valid: &'a [u32],
    pub test: &'a [u32],
    pub stats: Option<&'a ActivationStats>,
    /// Trained gate sets, for L0 rows.
    pub gates: &'a [HardConcreteGates<T>],
    /// When set, every pruned cell also gets a row with a trained rank-1
    /// update, trained on `sru_stream`.
    pub sru: Option<(&'a SruTrainConfig, &'a [u32])>,
    /// `(queries, warmup)` for latency; `None` leaves the column empty.
    pub bench: Option<(usize, usize)>,
    pub seed: u64,
    pub ppl_ceiling: f64,
}

/// One row of sweep output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub target_flops: f64,
    pub achieved_flops: Option<f64>,
    pub val_ppl: Option<f64>,
    pub test_ppl: Option<f64>,
    pub r_at_3: Option<f64>,
    pub ms_per_query: Option<f64>,
    pub sru: bool,
    pub seed: u64,
    /// Test perplexity above the display ceiling.
    pub over_ceiling: bool,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(method: &str, target: f64, sru: bool, seed: u64, error: String) -> Self {
        Self {
            method: method.to_string(),
            target_flops: target,
            achieved_flops: None,
            val_ppl: None,
            test_ppl: None,
            r_at_3: None,
            ms_per_query: None,
            sru,
            seed,
            over_ceiling: false,
            error: Some(error),
        }
    }
}

pub const CSV_HEADER: &str =
    "method,target_flops,achieved_flops,val_ppl,test_ppl,r_at_3,ms_per_query,sru,seed";

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.target_flops,
            opt(r.achieved_flops),
            opt(r.val_ppl),
            opt(r.test_ppl),
            opt(r.r_at_3),
            opt(r.ms_per_query),
            r.sru,
            r.seed
        ));
    }
    out
}

pub fn rows_to_json(rows: &[SweepRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

struct Cell<T> {
    row: SweepRow,
    model: Option<QrnnModel<T>>,
}

fn run_cell<T: Real>(
    inputs: &SweepInputs<'_, T>,
    method: Option<Method>,
    target: f64,
    with_sru: bool,
) -> Cell<T> {
    let name = method.map_or("unpruned", Method::name);
    let fail = |e: String| Cell {
        row: SweepRow::failed(name, target, with_sru, inputs.seed, e),
        model: None,
    };
    let pruned = match method {
        None => PrunedModel {
            mask: PruneMask::full(inputs.model.config()),
            model: inputs.model.clone(),
            achieved: 1.0,
        },
        Some(m) => match prune_for_target(
            inputs.model,
            m,
            target,
            inputs.seed,
            inputs.stats,
            inputs.gates,
        ) {
            Ok(p) => p,
            Err(e) => return fail(e.to_string()),
        },
    };
    let model = if with_sru {
        let (cfg, stream) = inputs.sru.expect("sru rows only requested with a config");
        let sru = match train_sru(&pruned.model, &pruned.mask, pruned.achieved, stream, cfg) {
            Ok(s) => s,
            Err(e) => return fail(e.to_string()),
        };
        match apply_sru(&pruned.model, &pruned.mask, &sru) {
            Ok(m) => m,
            Err(e) => return fail(e.to_string()),
        }
    } else {
        pruned.model
    };
    let scored = score_stream(&model, inputs.valid)
        .and_then(|v| Ok((v, score_stream(&model, inputs.test)?)));
    match scored {
        Ok((v, t)) => Cell {
            row: SweepRow {
                method: name.to_string(),
                target_flops: target,
                achieved_flops: Some(pruned.achieved),
                val_ppl: Some(v.perplexity()),
                test_ppl: Some(t.perplexity()),
                r_at_3: Some(t.recall_at_3()),
                ms_per_query: None,
                sru: with_sru,
                seed: inputs.seed,
                over_ceiling: t.perplexity() > inputs.ppl_ceiling,
                error: None,
            },
            model: Some(model),
        },
        Err(e) => fail(e.to_string()),
    }
}

/// Evaluates the unpruned model and every `(method, target)` cell. Quality
/// metrics run on a pool of `threads` workers; latency runs afterwards,
/// one cell at a time. Cells whose prerequisites are missing yield error
/// rows and the sweep continues.
pub fn sweep<T: Real>(
    inputs: &SweepInputs<'_, T>,
    methods: &[Method],
    targets: &[f64],
    threads: usize,
) -> Vec<SweepRow> {
    let mut jobs: Vec<(Option<Method>, f64, bool)> = vec![(None, 1.0, false)];
    for &m in methods {
        for &t in targets {
            jobs.push((Some(m), t, false));
            if inputs.sru.is_some() && t < 1.0 {
                jobs.push((Some(m), t, true));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    let mut cells: Vec<Cell<T>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, t, s)| run_cell(inputs, m, t, s))
            .collect()
    });
    if let Some((queries, warmup)) = inputs.bench {
        for cell in &mut cells {
            if let Some(model) = &cell.model {
                if let Ok(stats) = bench_latency(model, inputs.test, queries, warmup) {
                    cell.row.ms_per_query = Some(stats.mean_ms);
                }
            }
        }
    }
    cells.into_iter().map(|c| c.row).collect()
}
