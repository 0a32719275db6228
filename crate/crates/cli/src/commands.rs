//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use qrnn_core::data::{write_markov_corpus, Corpus, MarkovCorpusConfig, TokenStream, Vocab};
use qrnn_core::eval::{self, MaskError, Method, SweepInputs};
use qrnn_core::gates::{
    calibrate_lambda, gates_flops_fraction, gates_to_mask_and_scale, train_gates, GateTrainConfig,
};
use qrnn_core::pruning::{collect_activation_stats, FlopsModel};
use qrnn_core::sru::{sru_storage_bytes, train_sru, ElementWidth, SruTrainConfig};
use qrnn_core::storage::{self, Checkpoint, PruneRecord, SruEntry};
use qrnn_core::train::{train_baseline_with, BaselineConfig, LoopConfig};
use qrnn_core::ModelConfig;
use serde::Serialize;

use crate::error::CliError;
use crate::{
    BenchArgs, CollectStatsArgs, Command, EvalArgs, GenCorpusArgs, PruneArgs, ScheduleArgs,
    SweepArgs, TrainBaselineArgs, TrainGatesArgs, TrainSruArgs,
};

const LOG_EVERY: usize = 100;
/// λ search range for `train-gates --target-flops`.
const LAMBDA_BOUNDS: (f64, f64) = (1e-6, 10.0);

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    let stamp = Stamp::new(&cmd);
    let out = match cmd {
        Command::GenCorpus(a) => gen_corpus(a)?,
        Command::TrainBaseline(a) => train_baseline(a)?,
        Command::CollectStats(a) => collect_stats(a)?,
        Command::Prune(a) => prune(a)?,
        Command::TrainGates(a) => train_gates_cmd(a)?,
        Command::TrainSru(a) => train_sru_cmd(a)?,
        Command::Eval(a) => return eval_cmd(a),
        Command::Bench(a) => return bench(a),
        Command::Sweep(a) => sweep(a)?,
    };
    stamp.write(&out)
}

/// Reproducibility record written beside every output.
#[derive(Serialize)]
struct Stamp {
    qrnn_version: &'static str,
    format_version: u8,
    invocation: serde_json::Value,
}

impl Stamp {
    fn new(cmd: &Command) -> Self {
        Self {
            qrnn_version: env!("CARGO_PKG_VERSION"),
            format_version: storage::VERSION,
            invocation: serde_json::to_value(cmd).unwrap_or(serde_json::Value::Null),
        }
    }

    fn write(&self, out: &Path) -> Result<(), CliError> {
        let path = if out.is_dir() {
            out.join("corpus.stamp.json")
        } else {
            PathBuf::from(format!("{}.stamp.json", out.display()))
        };
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        write_file(&path, json + "\n")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn vocab_path(model: &Path) -> PathBuf {
    model.with_extension("vocab")
}

/// Copies the vocabulary that sits beside `src` to sit beside `dst`.
fn carry_vocab(src: &Path, dst: &Path) -> Result<(), CliError> {
    let (from, to) = (vocab_path(src), vocab_path(dst));
    if from != to && from.exists() {
        fs::copy(&from, &to).map_err(|e| CliError::Data(format!("{}: {e}", to.display())))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

/// Loads the corpus with the vocabulary stored beside `model`.
fn load_corpus(dir: &Path, model: &Path, ckpt: &Checkpoint) -> Result<Corpus, CliError> {
    let vocab = Vocab::load(&vocab_path(model))?;
    if let Some(expected) = &ckpt.vocab_hash {
        if *expected != vocab.hash() {
            return Err(CliError::Data(format!(
                "{}: vocabulary does not match the one the model was trained with",
                vocab_path(model).display()
            )));
        }
    }
    if vocab.len() != ckpt.model.config().vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            ckpt.model.config().vocab_size
        )));
    }
    Ok(Corpus::load_with_vocab(dir, vocab)?)
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a TokenStream, CliError> {
    corpus.split(name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown split `{name}` (expected train, valid or test)"
        ))
    })
}

fn require_unpruned(ckpt: &Checkpoint, what: &str) -> Result<(), CliError> {
    if ckpt.prune.is_some() {
        return Err(CliError::Config(format!(
            "{what} expects an unpruned checkpoint"
        )));
    }
    Ok(())
}

fn schedule(s: &ScheduleArgs, default_steps: usize) -> LoopConfig {
    LoopConfig {
        steps: s.steps.unwrap_or(default_steps),
        lr: s.lr,
        batch_size: s.batch_size,
        bptt: s.bptt,
        clip: s.clip,
        seed: s.seed,
        log_every: LOG_EVERY,
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<PathBuf, CliError> {
    let cfg = MarkovCorpusConfig {
        words: a.words,
        train_tokens: a.train_tokens,
        valid_tokens: a.valid_tokens,
        test_tokens: a.test_tokens,
        seed: a.seed,
        ..MarkovCorpusConfig::default()
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    write_markov_corpus(&a.out, &cfg)?;
    info!("wrote corpus to {}", a.out.display());
    Ok(a.out)
}

fn train_baseline(a: TrainBaselineArgs) -> Result<PathBuf, CliError> {
    if let Some(n) = a.layers {
        if n != a.hidden.len() {
            return Err(CliError::Config(format!(
                "--layers {n} disagrees with {} --hidden sizes",
                a.hidden.len()
            )));
        }
    }
    let corpus = Corpus::load(&a.corpus, a.vocab_cap)?;
    let config = ModelConfig::new(
        corpus.vocab.len(),
        a.embed,
        a.hidden.clone(),
        a.window.clone(),
    )?;
    let cfg = BaselineConfig {
        schedule: schedule(&a.schedule, LoopConfig::default().steps),
        ..BaselineConfig::default()
    };
    info!(
        "training {}-layer model, hidden {:?}, vocab {}, {} steps",
        config.num_layers, config.hidden_sizes, config.vocab_size, cfg.schedule.steps
    );
    let valid = &corpus.valid.ids;
    let (model, _) = train_baseline_with::<f32>(config, &corpus.train.ids, &cfg, |step, m| {
        if a.eval_every > 0 && step % a.eval_every == 0 {
            match eval::perplexity(m, valid) {
                Ok(p) => info!("step {step}: valid perplexity {p:.2}"),
                Err(e) => warn!("step {step}: validation failed: {e}"),
            }
        }
    })?;
    if !valid.is_empty() {
        println!("valid perplexity {:.3}", eval::perplexity(&model, valid)?);
    }
    let mut ckpt = Checkpoint::new(model);
    ckpt.vocab_hash = Some(corpus.vocab.hash());
    ckpt.save(&a.out)?;
    corpus.vocab.save(&vocab_path(&a.out))?;
    info!("saved {}", a.out.display());
    Ok(a.out)
}

fn collect_stats(a: CollectStatsArgs) -> Result<PathBuf, CliError> {
    let mut ckpt = load_checkpoint(&a.model)?;
    require_unpruned(&ckpt, "collect-stats")?;
    let corpus = load_corpus(&a.corpus, &a.model, &ckpt)?;
    let max_tokens = match a.max_tokens.as_str() {
        "all" => None,
        n => Some(n.parse::<usize>().map_err(|_| {
            CliError::Config(format!("--max-tokens expects a count or `all`, got `{n}`"))
        })?),
    };
    let stats = collect_activation_stats(&ckpt.model, &corpus.train.ids, max_tokens)?;
    info!("activation statistics over {} tokens", stats.tokens);
    ckpt.stats = Some(stats);
    ckpt.save(&a.out)?;
    carry_vocab(&a.model, &a.out)?;
    Ok(a.out)
}

fn prune(a: PruneArgs) -> Result<PathBuf, CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    require_unpruned(&ckpt, "prune")?;
    let method = Method::from_str(&a.method)?;
    let base = &ckpt.model;

    let stats_ckpt;
    let stats = if method == Method::MeanActivation {
        stats_ckpt = match &a.stats {
            Some(p) => load_checkpoint(p)?,
            None => ckpt.clone(),
        };
        Some(stats_ckpt.stats.as_ref().ok_or(MaskError::MissingStats)?)
    } else {
        None
    };

    let gates = match (&a.gates, method) {
        (Some(tag), _) => vec![ckpt.gates(tag).cloned().ok_or_else(|| {
            CliError::Config(format!("no gate set tagged `{tag}`; run train-gates first"))
        })?],
        (None, Method::L0) => ckpt.gates.iter().map(|g| g.gates.clone()).collect(),
        (None, _) => Vec::new(),
    };
    if method == Method::L0 && gates.is_empty() {
        return Err(MaskError::MissingGates.into());
    }

    let (mask, model, achieved, target) = match a.target_flops {
        Some(target) => {
            let p = eval::prune_for_target(base, method, target, a.seed, stats, &gates)?;
            (p.mask, p.model, p.achieved, target)
        }
        None if method == Method::L0 && gates.len() == 1 => {
            let (mask, model) = gates_to_mask_and_scale(base, &gates[0])?;
            let achieved = FlopsModel::new(base.config()).fraction(&mask);
            (mask, model, achieved, achieved)
        }
        None => {
            return Err(CliError::Config(
                "--target-flops is required (l0 may omit it when --gates names one set)".into(),
            ))
        }
    };
    println!("achieved FLOPs fraction {achieved:.4} (target {target})");
    let out = Checkpoint {
        model,
        vocab_hash: ckpt.vocab_hash.clone(),
        prune: Some(PruneRecord {
            base_config: base.config().clone(),
            mask,
            method: method.name().to_string(),
            target_flops: target,
            achieved_flops: achieved,
        }),
        stats: None,
        gates: Vec::new(),
        sru: Vec::new(),
    };
    out.save(&a.out)?;
    carry_vocab(&a.model, &a.out)?;
    Ok(a.out)
}

fn train_gates_cmd(a: TrainGatesArgs) -> Result<PathBuf, CliError> {
    let mut ckpt = load_checkpoint(&a.model)?;
    require_unpruned(&ckpt, "train-gates")?;
    let corpus = load_corpus(&a.corpus, &a.model, &ckpt)?;
    let cfg = GateTrainConfig {
        lambda: a.lambda,
        init_log_alpha: a.init_log_alpha,
        schedule: schedule(&a.schedule, GateTrainConfig::default().schedule.steps),
    };
    let train = &corpus.train.ids;
    let gates = match a.target_flops {
        Some(target) => {
            calibrate_lambda(
                &ckpt.model,
                train,
                target,
                &cfg,
                LAMBDA_BOUNDS,
                a.search_iters,
            )?
            .0
        }
        None => train_gates(&ckpt.model, train, &cfg)?,
    };
    let achieved = gates_flops_fraction(&ckpt.model, &gates);
    println!(
        "gates `{}`: λ {:.3e}, {} of {} filters closed, FLOPs fraction {}",
        a.tag,
        gates.lambda,
        gates.closed_count(),
        gates.num_filters(),
        achieved.map_or_else(
            || "n/a (a layer closed entirely)".to_string(),
            |f| format!("{f:.4}")
        )
    );
    ckpt.set_gates(&a.tag, gates);
    ckpt.save(&a.out)?;
    carry_vocab(&a.model, &a.out)?;
    Ok(a.out)
}

fn parse_width(s: &str) -> Result<ElementWidth, CliError> {
    match s {
        "f32" => Ok(ElementWidth::F32),
        "f16" => Ok(ElementWidth::F16),
        _ => Err(CliError::Config(format!(
            "--width expects f32 or f16, got `{s}`"
        ))),
    }
}

fn train_sru_cmd(a: TrainSruArgs) -> Result<PathBuf, CliError> {
    let width = parse_width(&a.width)?;
    let mut ckpt = load_checkpoint(&a.model)?;
    let record = ckpt.prune.clone().ok_or_else(|| {
        CliError::Config("train-sru expects a pruned checkpoint; run prune first".into())
    })?;
    let corpus = load_corpus(&a.corpus, &a.model, &ckpt)?;
    let cfg = SruTrainConfig {
        schedule: schedule(&a.schedule, SruTrainConfig::default().schedule.steps),
    };
    let mask = record.mask;
    let update = train_sru(
        &ckpt.model,
        &mask,
        record.achieved_flops,
        &corpus.train.ids,
        &cfg,
    )?;
    let bytes = sru_storage_bytes(&update, width);
    let hash = mask.hash();
    ckpt.sru.retain(|s| s.update.tag.mask_hash != hash);
    ckpt.sru.push(SruEntry {
        mask,
        update,
        width,
    });
    let valid = &corpus.valid.ids;
    if !valid.is_empty() {
        let before = eval::perplexity(&ckpt.model, valid)?;
        let after = eval::perplexity(&ckpt.model_with_sru()?, valid)?;
        println!("valid perplexity {before:.3} -> {after:.3} with update ({bytes} bytes)");
    }
    ckpt.save(&a.out)?;
    carry_vocab(&a.model, &a.out)?;
    Ok(a.out)
}

fn model_for(ckpt: &Checkpoint, sru: bool) -> Result<qrnn_core::QrnnModel<f32>, CliError> {
    if sru {
        Ok(ckpt.model_with_sru()?)
    } else {
        Ok(ckpt.model.clone())
    }
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus, &a.model, &ckpt)?;
    let stream = split(&corpus, &a.split)?;
    let model = model_for(&ckpt, a.sru)?;
    let fraction = FlopsModel::new(ckpt.base_config()).fraction(&ckpt.mask());
    let mut report = eval::evaluate(&model, &stream.ids, &a.split, fraction)?;
    report.tag = ckpt.prune.as_ref().map(|p| p.method.clone());
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?
        );
    } else {
        println!("split {}", report.split);
        println!("perplexity {:.3}", report.perplexity);
        println!("r@3 {:.4}", report.r_at_3);
        println!("flops_fraction {:.4}", report.flops_fraction);
        println!("tokens {}", report.tokens_evaluated);
    }
    Ok(())
}

/// Token source for benchmarking when no corpus is given.
fn synthetic_tokens(vocab: usize) -> Vec<u32> {
    (0..1024u64)
        .map(|i| ((i * 7919) % vocab as u64) as u32)
        .collect()
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    let tokens = match &a.corpus {
        Some(dir) => load_corpus(dir, &a.model, &ckpt)?.test.ids,
        None => synthetic_tokens(ckpt.model.config().vocab_size),
    };
    let model = model_for(&ckpt, a.sru)?;
    let stats = eval::bench_latency(&model, &tokens, a.queries, a.warmup)?;
    println!(
        "queries {} warmup {}: {:.4} ± {:.4} ms per query",
        stats.queries, stats.warmup, stats.mean_ms, stats.std_ms
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<PathBuf, CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    require_unpruned(&ckpt, "sweep")?;
    let corpus = load_corpus(&a.corpus, &a.model, &ckpt)?;
    let methods = a
        .methods
        .iter()
        .map(|m| Method::from_str(m))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(t) = a
        .targets
        .iter()
        .find(|t| !(t.is_finite() && **t > 0.0 && **t <= 1.0))
    {
        return Err(CliError::Config(format!(
            "FLOPs target {t} is outside (0, 1]"
        )));
    }
    let gates: Vec<_> = ckpt.gates.iter().map(|g| g.gates.clone()).collect();
    let sru_cfg = SruTrainConfig {
        schedule: LoopConfig {
            steps: a.sru_steps,
            seed: a.seed,
            log_every: 0,
            ..SruTrainConfig::default().schedule
        },
    };
    let inputs = SweepInputs {
        model: &ckpt.model,
        valid: &corpus.valid.ids,
        test: &corpus.test.ids,
        stats: ckpt.stats.as_ref(),
        gates: &gates,
        sru: (a.sru_steps > 0).then_some((&sru_cfg, corpus.train.ids.as_slice())),
        bench: a.bench.then_some((a.queries, a.warmup)),
        seed: a.seed,
        ppl_ceiling: a.ceiling,
    };
    let rows = eval::sweep(&inputs, &methods, &a.targets, a.threads.max(1));
    for r in rows.iter().filter(|r| r.error.is_some()) {
        warn!(
            "{} at {}: {}",
            r.method,
            r.target_flops,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let csv = eval::rows_to_csv(&rows);
    write_file(&a.out, &csv)?;
    let json_path = a
        .json
        .clone()
        .unwrap_or_else(|| a.out.with_extension("json"));
    write_file(&json_path, eval::rows_to_json(&rows))?;
    print!("{csv}");
    Ok(a.out)
}
