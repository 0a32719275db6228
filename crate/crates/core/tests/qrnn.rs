#![allow(clippy::needless_range_loop)]

mod common;

use common::{max_abs_diff, naive_forward, random_tokens, rng, toy_model};
use qrnn_core::model::fo_pool;
use qrnn_core::{Matrix, ModelConfig, QrnnModel};
use rand::Rng;

#[test]
fn forward_matches_scalar_reference() {
    for seed in 0..20 {
        let model = toy_model(seed);
        let mut r = rng(100 + seed);
        let len = r.random_range(1..=64);
        let tokens = random_tokens(&mut r, 17, len);
        let logits = model.forward(&tokens, None).unwrap();
        let reference = naive_forward(&model, &tokens, None, None);
        for (t, want) in reference.iter().enumerate() {
            let d = max_abs_diff(&logits.col(t), want);
            assert!(d <= 1e-6, "seed {seed} t {t}: {d}");
        }
    }
}

#[test]
fn stepping_matches_batch_forward() {
    for seed in 0..20 {
        let model: QrnnModel<f32> = toy_model(seed).cast();
        let mut r = rng(200 + seed);
        let len = r.random_range(1..=64);
        let tokens = random_tokens(&mut r, 17, len);
        let batch = model.forward(&tokens, None).unwrap();
        let mut states = model.initial_states();
        for (t, &tok) in tokens.iter().enumerate() {
            let step = model.step(&mut states, tok).unwrap();
            for (a, b) in step.iter().zip(batch.col(t)) {
                assert!((a - b).abs() <= 1e-5, "seed {seed} t {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn chunked_forward_matches_whole_sequence() {
    let model = toy_model(3);
    let tokens = random_tokens(&mut rng(9), 17, 50);
    let whole = model.forward(&tokens, None).unwrap();
    let mut states = model.initial_states();
    let mut t0 = 0;
    for chunk in tokens.chunks(7) {
        let part = model.forward_from(chunk, &mut states, None).unwrap();
        for t in 0..chunk.len() {
            assert!(max_abs_diff(&part.col(t), &whole.col(t0 + t)) <= 1e-12);
        }
        t0 += chunk.len();
    }
}

#[test]
fn fo_pool_matches_per_timestep_loop() {
    let mut r = rng(5);
    let (m, n) = (5, 40);
    let gen = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
        Matrix::from_vec(m, n, (0..m * n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    };
    let z = gen(&mut r, -1.0, 1.0);
    let f = gen(&mut r, 0.0, 1.0);
    let o = gen(&mut r, 0.0, 1.0);
    let c0: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let (h, c_last) = fo_pool(&z, &f, &o, &c0, None).unwrap();
    let mut c = c0.clone();
    for t in 0..n {
        for i in 0..m {
            c[i] = f.get(i, t) * c[i] + (1.0 - f.get(i, t)) * z.get(i, t);
            assert!((h.get(i, t) - o.get(i, t) * c[i]).abs() <= 1e-6);
        }
    }
    assert!(max_abs_diff(&c, &c_last) <= 1e-6);
}

#[test]
fn single_layer_window_one_reference() {
    let cfg = ModelConfig::new(5, 3, vec![3], vec![1]).unwrap();
    let model: QrnnModel<f64> = QrnnModel::init_uniform(cfg, &mut rng(1), 1.0, Some(1.0)).unwrap();
    let tokens = [4, 0, 2, 2, 1];
    let logits = model.forward(&tokens, None).unwrap();
    for (t, want) in naive_forward(&model, &tokens, None, None)
        .iter()
        .enumerate()
    {
        assert!(max_abs_diff(&logits.col(t), want) <= 1e-12);
    }
}
