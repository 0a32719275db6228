mod common;

use common::{
    max_abs_diff, naive_forward, quick_baseline, random_tokens, rng, small_corpus, toy_model,
};
use qrnn_core::gates::{
    expected_l0_penalty, gates_to_mask_and_scale, sample_gate, test_gate, train_gates,
    zero_threshold, GateTrainConfig, HardConcreteGates,
};
use qrnn_core::train::LoopConfig;
use qrnn_core::ModelConfig;
use rand::Rng;

#[test]
fn closed_form_penalty_matches_monte_carlo() {
    let mut r = rng(11);
    let mut cases = vec![-3.0, 0.0, 3.0];
    cases.extend((0..20).map(|_| r.random_range(-4.0..4.0)));
    for log_alpha in cases {
        let n = 100_000;
        let la = vec![log_alpha; n];
        let open = sample_gate(&la, &mut r)
            .iter()
            .filter(|&&z| z > 0.0)
            .count();
        let mc = open as f64 / n as f64;
        let closed = expected_l0_penalty(&[log_alpha]);
        assert!(
            (mc - closed).abs() <= 0.01,
            "log α {log_alpha}: {mc} vs {closed}"
        );
    }
}

#[test]
fn test_gate_zero_threshold() {
    let t = zero_threshold();
    assert!((t + 11f64.ln()).abs() <= 1e-6);
    assert_eq!(test_gate(&[t - 1e-6])[0], 0.0);
    assert!(test_gate(&[t + 1e-6])[0] > 0.0);
    assert!((test_gate(&[0.0f64])[0] - 0.5).abs() < 1e-12);
}

#[test]
fn mask_and_scale_preserves_test_time_logits() {
    let mut r = rng(12);
    for case in 0..100 {
        let model = toy_model(case % 10);
        let mut gates = HardConcreteGates::new(&model, 0.0, 0.0);
        for la in gates.log_alpha.iter_mut() {
            for (i, x) in la.iter_mut().enumerate() {
                // Keep at least filter 0 open so no layer closes entirely.
                *x = if i == 0 {
                    1.0
                } else {
                    r.random_range(-6.0..4.0)
                };
            }
        }
        let (mask, pruned) = gates_to_mask_and_scale(&model, &gates).unwrap();
        let z = gates.test_gates();
        let len = r.random_range(1..=30);
        let tokens = random_tokens(&mut r, 17, len);
        let want = naive_forward(&model, &tokens, Some(&z), None);
        let got = pruned.forward(&tokens, None).unwrap();
        for (t, w) in want.iter().enumerate() {
            let d = max_abs_diff(&got.col(t), w);
            assert!(d <= 1e-5, "case {case} t {t}: {d}");
        }
        for (l, zl) in z.iter().enumerate() {
            let closed: Vec<usize> = (0..zl.len()).filter(|&i| zl[i] == 0.0).collect();
            assert_eq!(mask.dropped(l), closed);
        }
    }
}

#[test]
fn open_gates_are_identity() {
    let model = toy_model(1);
    let gates = HardConcreteGates::new(&model, 10.0, 0.0);
    assert!(gates.test_gates().iter().flatten().all(|&z| z == 1.0));
    let (mask, pruned) = gates_to_mask_and_scale(&model, &gates).unwrap();
    assert!(mask.is_full());
    let tokens = random_tokens(&mut rng(2), 17, 20);
    assert_eq!(
        pruned.forward(&tokens, None).unwrap(),
        model.forward(&tokens, None).unwrap()
    );
}

#[test]
fn closed_gate_zeroes_its_channel() {
    let model = toy_model(2);
    let mut z: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|l| vec![1.0; l.hidden()])
        .collect();
    z.pop();
    z[0][3] = 0.0;
    z[1][0] = 0.0;
    let tokens = random_tokens(&mut rng(3), 17, 25);
    let mut states = model.initial_states();
    let h = model
        .hidden_outputs(&tokens, &mut states, Some(&z), None)
        .unwrap();
    assert!(h[0].row(3).iter().all(|&x| x == 0.0));
    assert!(h[1].row(0).iter().all(|&x| x == 0.0));
    assert!(h[0].row(2).iter().any(|&x| x != 0.0));
}

#[test]
fn penalty_pressure_controls_closure() {
    let corpus = small_corpus(60, 12_000);
    let config = ModelConfig::new(corpus.vocab.len(), 16, vec![16, 16], vec![2, 1]).unwrap();
    let model = quick_baseline(config, &corpus.train.ids, 300);
    let ids = &corpus.train.ids;
    let run = |lambda: f64, steps: usize| {
        let cfg = GateTrainConfig {
            lambda,
            schedule: LoopConfig {
                steps,
                log_every: 0,
                ..GateTrainConfig::default().schedule
            },
            ..GateTrainConfig::default()
        };
        train_gates(&model, ids, &cfg).unwrap()
    };
    let free = run(0.0, 200);
    assert_eq!(free.closed_count(), 0);
    let heavy = run(1.0, 2000);
    assert!(
        2 * heavy.closed_count() >= heavy.num_filters(),
        "{} of {} closed",
        heavy.closed_count(),
        heavy.num_filters()
    );
}
