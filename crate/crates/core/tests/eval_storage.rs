mod common;

use common::{quick_baseline, random_tokens, rng, small_corpus, toy_model};
use qrnn_core::data::unigram_perplexity;
use qrnn_core::eval::{perplexity, score_stream};
use qrnn_core::gates::HardConcreteGates;
use qrnn_core::grad::{forward_with_tape, Batch, Extras};
use qrnn_core::pruning::{apply_mask, collect_activation_stats, filter_norm_mask, PruneMask};
use qrnn_core::sru::{init_sru, ElementWidth};
use qrnn_core::storage::{Checkpoint, PruneRecord, SruEntry};
use qrnn_core::{ModelConfig, QrnnModel};

#[test]
fn perplexity_agrees_with_training_loss_path() {
    let corpus = small_corpus(50, 8000);
    let config = ModelConfig::new(corpus.vocab.len(), 12, vec![12, 12], vec![2, 1]).unwrap();
    let model: QrnnModel<f64> = quick_baseline(config, &corpus.train.ids, 150).cast();
    let stream = &corpus.valid.ids[..600];
    let batch = Batch::new(vec![stream[..599].to_vec()], vec![stream[1..].to_vec()]);
    let loss = forward_with_tape(&model, &Extras::none(), &batch)
        .unwrap()
        .loss();
    let ppl = perplexity(&model, stream).unwrap();
    assert!(
        (ppl - loss.exp()).abs() / ppl < 1e-4,
        "{ppl} vs {}",
        loss.exp()
    );
    assert!(ppl < unigram_perplexity(&corpus.train.ids, stream, corpus.vocab.len()));
}

#[test]
fn zero_model_scores_uniformly() {
    let cfg = ModelConfig::new(100, 4, vec![4], vec![2]).unwrap();
    let model: QrnnModel<f64> = QrnnModel::zeros(cfg).unwrap();
    let stream = random_tokens(&mut rng(31), 100, 2001);
    let s = score_stream(&model, &stream).unwrap();
    assert!((s.perplexity() - 100.0).abs() < 1e-9);
    let expected = stream[1..].iter().filter(|&&t| t < 3).count() as f64 / 2000.0;
    assert_eq!(s.recall_at_3(), expected);
}

#[test]
fn checkpoint_with_every_section_round_trips_through_disk() {
    let base: QrnnModel<f32> = toy_model(5).cast();
    let tokens = random_tokens(&mut rng(32), 17, 40);

    let mut full = Checkpoint::new(base.clone());
    full.vocab_hash = Some("abc".into());
    full.stats = Some(collect_activation_stats(&base, &tokens, None).unwrap());
    full.set_gates("a", HardConcreteGates::new(&base, 1.5, 1e-3));
    full.set_gates("b", HardConcreteGates::new(&base, -0.5, 2e-3));

    let mask = filter_norm_mask(&base, 0.3).unwrap();
    let pruned = apply_mask(&base, &mask).unwrap();
    let mut small = Checkpoint::new(pruned.clone());
    small.prune = Some(PruneRecord {
        base_config: base.config().clone(),
        mask: mask.clone(),
        method: "filter-norm".into(),
        target_flops: 0.7,
        achieved_flops: 0.71,
    });
    small.sru.push(SruEntry {
        update: init_sru(&pruned, &mask, 0.71, 4),
        mask,
        width: ElementWidth::F32,
    });

    let dir = tempfile::tempdir().unwrap();
    for (name, ckpt) in [("full.qz", &full), ("small.qz", &small)] {
        let path = dir.path().join(name);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(&back, ckpt);
        assert_eq!(
            back.model.forward(&tokens, None).unwrap(),
            ckpt.model.forward(&tokens, None).unwrap()
        );
        assert_eq!(std::fs::read(&path).unwrap(), ckpt.to_bytes().unwrap());
    }
    let back = Checkpoint::load(&dir.path().join("small.qz")).unwrap();
    assert_eq!(
        back.model_with_sru().unwrap(),
        small.model_with_sru().unwrap()
    );
    assert!(!back.mask().is_full());
    assert_eq!(
        Checkpoint::load(&dir.path().join("full.qz"))
            .unwrap()
            .mask(),
        PruneMask::full(base.config())
    );
}

#[test]
fn gate_storage_is_four_bytes_per_prunable_filter() {
    let base = toy_model(6);
    let gates = HardConcreteGates::<f64>::new(&base, 2.0, 0.0);
    let prunable: usize = base.config().hidden_sizes[..base.num_layers() - 1]
        .iter()
        .sum();
    assert_eq!(gates.num_filters(), prunable);
    assert_eq!(gates.storage_bytes(), 4 * prunable);
}
