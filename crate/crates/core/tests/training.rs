mod common;

use common::*;
use swaplm_core::corpus::{Batch, TokenId, CLS, SEP};
use swaplm_core::objectives::{corrupt_rts, targets_slm_all};
use swaplm_core::train::{adam_step, clip_global_norm, pretrain_to_dir, probe_hardness, AdamState};
use swaplm_core::{
    Checkpoint, CountMatrix, HeadType, ModelConfig, Objective, ObjectiveConfig, Pretrainer, TrainConfig, Transformer,
};

#[test]
fn slm_all_memorizes_fixed_sentences() {
    const V: usize = 30;
    let vocab = word_vocab(V);
    let mut r = rng(4);
    let rows: Vec<Vec<TokenId>> = (0..8)
        .map(|_| {
            let mut row = vec![CLS];
            row.extend((0..10).map(|_| rand::Rng::random_range(&mut r, 5..V as TokenId)));
            row.push(SEP);
            row
        })
        .collect();
    let batch = Batch::from_rows(&rows, 12).unwrap();
    let mut model = Transformer::new(ModelConfig::desk(V, 12, HeadType::Lm), 0).unwrap();
    let mut opt = AdamState::new(&model.params);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::desk(Objective::SlmAll, 200, 12)
    };
    let ocfg = ObjectiveConfig::new(Objective::Rts);
    for _ in 0..200 {
        let cb = targets_slm_all(&corrupt_rts(&batch, &vocab, &ocfg, &mut r).unwrap()).unwrap();
        let mut grads = model.loss_and_grad(&cb).unwrap().grads.unwrap();
        clip_global_norm(&mut grads, 1.0);
        adam_step(&mut model.params, &mut grads, &mut opt, 3e-3, &cfg).unwrap();
    }
    let mut clean = targets_slm_all(&corrupt_rts(&batch, &vocab, &ocfg, &mut r).unwrap()).unwrap();
    clean.input_ids.assign(&clean.original_ids);
    clean.corruption_mask.fill(false);
    let loss = model.loss(&clean).unwrap();
    assert!(loss < 0.1, "identity loss {loss}");
}

fn small_config(objective: Objective, steps: usize) -> TrainConfig {
    let cfg = TrainConfig {
        batch_size: 8,
        warmup_steps: 5,
        log_every: 5,
        ..TrainConfig::desk(objective, steps, 24)
    };
    TrainConfig {
        checkpoint_every: cfg.total_steps / 2,
        ..cfg
    }
}

fn small_model(vocab: usize, head: HeadType) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        intermediate: 32,
        ..ModelConfig::desk(vocab, 24, head)
    }
}

fn resume_matches(objective: Objective) {
    let (vocab, seqs) = synth_corpus(20_000, 2);
    let clusters = (objective == Objective::Crts).then(|| round_robin_clusters(vocab.len(), 5));
    let cfg = small_config(objective, 20);
    let generator = cfg.needs_generator().then(|| small_model(vocab.len(), HeadType::Lm));
    let mcfg = small_model(vocab.len(), objective.head());

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Pretrainer::new(
        &seqs,
        &vocab,
        mcfg.clone(),
        generator.clone(),
        cfg.clone(),
        clusters.as_ref(),
    )
    .unwrap();
    let full_ck = pretrain_to_dir(&mut full, full_dir.path()).unwrap();

    let mid = cfg.checkpoint_every;
    let half = Checkpoint::load(&full_dir.path().join(format!("step-{mid}.ckpt"))).unwrap();
    assert_eq!(half.step, mid);
    let mut resumed = Pretrainer::resume(half, &seqs, &vocab, clusters.as_ref()).unwrap();
    resumed.run_until(cfg.total_steps, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint(), full_ck);
}

#[test]
fn resume_matches_uninterrupted_rts() {
    resume_matches(Objective::Rts);
}

#[test]
fn resume_matches_uninterrupted_crts() {
    resume_matches(Objective::Crts);
}

#[test]
fn resume_matches_uninterrupted_generator_run() {
    resume_matches(Objective::TdGen);
}

#[test]
fn resume_rejects_a_different_corpus() {
    let (vocab, seqs) = synth_corpus(20_000, 2);
    let cfg = small_config(Objective::Rts, 10);
    let mut t = Pretrainer::new(
        &seqs,
        &vocab,
        small_model(vocab.len(), HeadType::Binary),
        None,
        cfg,
        None,
    )
    .unwrap();
    t.run_until(3, &mut |_| Ok(())).unwrap();
    let ck = t.checkpoint();
    let mut other = seqs.clone();
    other.swap(0, 1);
    let err = Pretrainer::resume(ck, &other, &vocab, None).err().unwrap();
    assert!(matches!(err, swaplm_core::Error::CheckpointMismatch(_)), "{err}");
}

/// A single initialization can lean either way, so chance is measured
/// across initializations.
#[test]
fn untrained_model_detects_at_chance() {
    // Each init carries its own output bias, so chance only holds on average
    // over many inits; a small encoder keeps 400 of them cheap.
    let (vocab, seqs) = synth_corpus(60_000, 5);
    let batches = swaplm_core::pack_batches(seqs, 64, 32, 0).unwrap();
    let clusters = round_robin_clusters(vocab.len(), 10);
    let cm = CountMatrix::new(10, 2.0).unwrap();
    let cfg = ModelConfig {
        max_len: 64,
        ..small_model(vocab.len(), HeadType::Binary)
    };
    let (mut hit_u, mut hit_c, mut positions) = (0.0, 0.0, 0);
    for seed in 0..400 {
        let model = Transformer::new(cfg.clone(), seed).unwrap();
        let r = probe_hardness(&model, &cm, &clusters, &vocab, &batches, 1, seed).unwrap();
        hit_u += r.acc_uniform * r.positions as f64;
        hit_c += r.acc_crts * r.positions as f64;
        positions += r.positions;
    }
    assert!(positions >= 10_000, "{positions} positions");
    for acc in [hit_u / positions as f64, hit_c / positions as f64] {
        assert!((acc - 0.5).abs() <= 0.02, "accuracy {acc} over {positions} positions");
    }
}
