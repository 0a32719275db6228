//! Shared fixtures and a scalar-loop reference QRNN used as an independent
//! oracle for the matrix implementation.

#![allow(dead_code, clippy::needless_range_loop)]

use qrnn_core::pruning::PruneMask;
use qrnn_core::{ModelConfig, QrnnModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Three layers with mixed windows so pruning touches both column blocks
/// and a following layer.
pub fn toy_config() -> ModelConfig {
    ModelConfig::new(17, 6, vec![9, 7, 6], vec![2, 3, 1]).unwrap()
}

pub fn toy_model(seed: u64) -> QrnnModel<f64> {
    QrnnModel::init_uniform(toy_config(), &mut rng(seed), 0.8, Some(0.7)).unwrap()
}

pub fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// A random valid mask: every prunable layer keeps a random non-empty
/// subset, the last layer keeps everything.
pub fn random_mask(config: &ModelConfig, r: &mut ChaCha8Rng) -> PruneMask {
    let n = config.num_layers;
    let kept = config
        .hidden_sizes
        .iter()
        .enumerate()
        .map(|(l, &m)| {
            if l + 1 == n {
                return (0..m).collect();
            }
            loop {
                let keep: Vec<usize> = (0..m).filter(|_| r.random_bool(0.6)).collect();
                if !keep.is_empty() {
                    break keep;
                }
            }
        })
        .collect();
    PruneMask::new(config.hidden_sizes.clone(), kept).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reference forward from zero state, one scalar at a time. `z_scale[l][i]`
/// multiplies filter `i`'s `W_z` pre-activation; `zeroed[l]` lists hidden
/// channels forced to zero after pooling. Returns logits per position.
pub fn naive_forward(
    model: &QrnnModel<f64>,
    tokens: &[u32],
    z_scale: Option<&[Vec<f64>]>,
    zeroed: Option<&[Vec<usize>]>,
) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let emb = model.embedding();
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb.row(t as usize).to_vec())
        .collect();
    for (l, layer) in model.layers().iter().enumerate() {
        let k = cfg.input_dim(l);
        let r = cfg.window_sizes[l];
        let m = cfg.hidden_sizes[l];
        let mut c = vec![0.0; m];
        let mut hs = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let mut h = vec![0.0; m];
            for i in 0..m {
                let (mut pz, mut pf, mut po) = (0.0, 0.0, 0.0);
                for j in 0..r {
                    let src = t as isize - (r - 1) as isize + j as isize;
                    if src < 0 {
                        continue;
                    }
                    for q in 0..k {
                        let x = xs[src as usize][q];
                        pz += layer.w_z.get(i, j * k + q) * x;
                        pf += layer.w_f.get(i, j * k + q) * x;
                        po += layer.w_o.get(i, j * k + q) * x;
                    }
                }
                if let Some(s) = z_scale.and_then(|s| s.get(l)) {
                    pz *= s[i];
                }
                let (z, f, o) = (pz.tanh(), sigmoid(pf), sigmoid(po));
                c[i] = f * c[i] + (1.0 - f) * z;
                h[i] = o * c[i];
            }
            if let Some(zs) = zeroed.and_then(|z| z.get(l)) {
                for &i in zs {
                    h[i] = 0.0;
                }
            }
            hs.push(h);
        }
        xs = hs;
    }
    xs.iter()
        .map(|h| {
            (0..cfg.vocab_size)
                .map(|v| emb.row(v).iter().zip(h).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A small seeded Markov corpus encoded with its own vocabulary.
pub fn small_corpus(words: usize, train_tokens: usize) -> qrnn_core::data::Corpus {
    let mc = qrnn_core::data::MarkovCorpusConfig {
        words,
        train_tokens,
        valid_tokens: train_tokens / 10,
        test_tokens: train_tokens / 10,
        ..Default::default()
    };
    let (train, valid, test) = qrnn_core::data::markov_corpus(&mc);
    let vocab = qrnn_core::data::Vocab::build(&train, 10_000).unwrap();
    qrnn_core::data::Corpus::from_texts(vocab, &train, &valid, &test)
}

/// Baseline trained quietly with Adam at learning rate 1e-2.
pub fn quick_baseline(config: ModelConfig, train: &[u32], steps: usize) -> QrnnModel<f32> {
    let cfg = qrnn_core::train::BaselineConfig {
        schedule: qrnn_core::train::LoopConfig {
            steps,
            lr: 1e-2,
            log_every: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    qrnn_core::train::train_baseline(config, train, &cfg)
        .unwrap()
        .0
}
