mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use swaplm_core::corpus::{is_special, MASK, NUM_SPECIALS};
use swaplm_core::crts::{OutcomeDelta, OutcomeEvent};
use swaplm_core::flops::{estimate, FlopsOptions};
use swaplm_core::objectives::{corrupt_crts, corrupt_mlm, corrupt_rts, corrupt_slm, targets_slm_all};
use swaplm_core::{lr_at, CorruptedBatch, CountMatrix, HeadType, ModelConfig, Objective, ObjectiveConfig, TrainConfig};

const V: usize = 45;

fn corrupt(objective: Objective, payloads: &[usize], seed: u64) -> CorruptedBatch {
    let vocab = word_vocab(V);
    let clusters = round_robin_clusters(V, 6);
    let cm = CountMatrix::new(6, 2.0).unwrap();
    let sampler = cm.sampler(&clusters).unwrap();
    let mut r = rng(seed);
    let b = random_batch(payloads, 40, V, &mut r);
    let cfg = ObjectiveConfig::new(objective);
    match objective {
        Objective::Rts | Objective::TdGen => corrupt_rts(&b, &vocab, &cfg, &mut r).unwrap(),
        Objective::Crts => corrupt_crts(&b, &sampler, &cfg, &mut r).unwrap(),
        Objective::Slm => corrupt_slm(&b, &vocab, &cfg, &mut r).unwrap(),
        Objective::Mlm => corrupt_mlm(&b, &vocab, &cfg, &mut r).unwrap(),
        Objective::SlmAll => targets_slm_all(&corrupt_rts(&b, &vocab, &cfg, &mut r).unwrap()).unwrap(),
    }
}

fn check_batch(cb: &CorruptedBatch, objective: Objective) -> Result<(), TestCaseError> {
    for (row, &e) in eligible_per_row(cb).iter().enumerate() {
        let expected = if e == 0 {
            0
        } else {
            ((0.15 * e as f64).round() as usize).clamp(1, e)
        };
        let got = cb.corruption_mask.row(row).iter().filter(|&&c| c).count();
        prop_assert_eq!(got, expected, "row {} with {} eligible", row, e);
    }
    for (idx, &c) in cb.corruption_mask.indexed_iter() {
        if c {
            prop_assert!(!is_special(cb.original_ids[idx]));
        }
        if objective.whole_output_loss() || objective.head() == HeadType::Binary {
            prop_assert_eq!(cb.loss_mask[idx], cb.attention_mask[idx]);
        } else {
            prop_assert_eq!(cb.loss_mask[idx], c);
        }
        if objective == Objective::Mlm {
            continue;
        }
        prop_assert!(cb.input_ids[idx] != MASK);
        if c {
            prop_assert!(cb.input_ids[idx] != cb.original_ids[idx]);
            prop_assert!(!is_special(cb.input_ids[idx]));
        } else {
            prop_assert_eq!(cb.input_ids[idx], cb.original_ids[idx]);
        }
    }
    Ok(())
}

fn payloads() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..=38, 1..5)
}

proptest! {
    #[test]
    fn corruption_invariants(payloads in payloads(), seed in any::<u64>()) {
        for objective in [Objective::Rts, Objective::Crts, Objective::Slm, Objective::Mlm, Objective::SlmAll] {
            check_batch(&corrupt(objective, &payloads, seed), objective)?;
        }
    }

    #[test]
    fn mask_appears_only_in_mlm(payloads in payloads(), seed in any::<u64>()) {
        let cb = corrupt(Objective::Mlm, &payloads, seed);
        for (idx, &id) in cb.input_ids.indexed_iter() {
            if id == MASK {
                prop_assert!(cb.corruption_mask[idx]);
            }
        }
    }

    #[test]
    fn merged_and_sequential_updates_agree(
        events in prop::collection::vec((0usize..5, 0usize..5, any::<bool>()), 0..200),
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..6),
    ) {
        let events: Vec<OutcomeEvent> = events
            .into_iter()
            .map(|(i, j, ok)| OutcomeEvent { source_cluster: i, target_cluster: j, discriminator_correct: ok })
            .collect();
        let mut bounds: Vec<usize> = cuts.iter().map(|c| c.index(events.len() + 1)).collect();
        bounds.extend([0, events.len()]);
        bounds.sort_unstable();
        let mut sequential = CountMatrix::new(5, 2.0).unwrap();
        let mut merged = OutcomeDelta::new();
        for w in bounds.windows(2) {
            let part: OutcomeDelta = events[w[0]..w[1]].iter().copied().collect();
            sequential.update_counts(&part).unwrap();
            merged = merged.merge(&part);
        }
        let mut at_once = CountMatrix::new(5, 2.0).unwrap();
        at_once.update_counts(&merged).unwrap();
        prop_assert_eq!(sequential.counts(), at_once.counts());
        prop_assert_eq!(merged.events(), events.len() as u64);
    }

    #[test]
    fn row_distributions_are_normalised(f in prop::collection::vec(-50i64..50, 16), gamma in 0.1f64..8.0) {
        let cm = CountMatrix::from_counts(Array2::from_shape_vec((4, 4), f).unwrap(), gamma).unwrap();
        for i in 0..4 {
            let p = cm.row_distribution(i).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let row = cm.counts().row(i);
            // Larger counts never get less mass.
            for a in 0..4 {
                for b in 0..4 {
                    if row[a] > row[b] {
                        prop_assert!(p[a] >= p[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn replacement_law_sums_to_one(sizes in prop::collection::vec(1usize..6, 2..6), alpha_pick in any::<prop::sample::Index>(),
                                   f in prop::collection::vec(-9i64..9, 36)) {
        let n = sizes.len();
        let clusters = block_clusters(&sizes);
        let f = Array2::from_shape_fn((n, n), |(i, j)| f[i * 6 + j]);
        let cm = CountMatrix::from_counts(f, 2.0).unwrap();
        let sampler = cm.sampler(&clusters).unwrap();
        let regular = clusters.vocab_size() - NUM_SPECIALS;
        prop_assume!(regular >= 2);
        let alpha = (NUM_SPECIALS + alpha_pick.index(regular)) as u32;
        let total: f64 = (NUM_SPECIALS..clusters.vocab_size())
            .map(|b| b as u32)
            .filter(|&b| b != alpha)
            .map(|b| sampler.probability(alpha, b).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "total {}", total);
    }

    #[test]
    fn learning_rate_is_piecewise_linear(warmup in 1usize..200, extra in 2usize..500, peak in 1e-5f64..1e-2) {
        let cfg = TrainConfig {
            peak_lr: peak,
            warmup_steps: warmup,
            total_steps: warmup + extra,
            seq_len_schedule: vec![(warmup + extra, 16)],
            ..TrainConfig::desk(Objective::Rts, 10, 16)
        };
        let total = warmup + extra;
        prop_assert_eq!(lr_at(0, &cfg), 0.0);
        prop_assert_eq!(lr_at(warmup, &cfg), peak);
        prop_assert_eq!(lr_at(total, &cfg), 0.0);
        for t in 0..=total {
            let expected = if t <= warmup {
                peak * t as f64 / warmup as f64
            } else {
                peak * (total - t) as f64 / extra as f64
            };
            prop_assert!((lr_at(t, &cfg) - expected).abs() <= 1e-15 * peak);
        }
    }

    #[test]
    fn flops_grow_with_steps_and_length(steps in 1usize..10_000, len in 8usize..256, vocab in 100usize..5000) {
        let cost = |steps: usize, len: usize| {
            let cfg = TrainConfig {
                seq_len_schedule: vec![(steps, len)],
                total_steps: steps,
                warmup_steps: 0,
                ..TrainConfig::desk(Objective::Rts, steps, len)
            };
            let m = ModelConfig::desk(vocab, 512, HeadType::Binary);
            estimate(&m, None, &cfg, Objective::Rts, &FlopsOptions::default())
        };
        prop_assert!(cost(steps + 1, len) > cost(steps, len));
        prop_assert!(cost(steps, len + 1) > cost(steps, len));
        prop_assert!((cost(2 * steps, len) - 2.0 * cost(steps, len)).abs() <= 1e-9 * cost(steps, len));
    }
}

#[test]
fn absolute_count_change_matches_replacements() {
    let clusters = round_robin_clusters(V, 6);
    let mut cm = CountMatrix::new(6, 2.0).unwrap();
    let mut r = rng(11);
    for step in 0..50 {
        let b = random_batch(&[30, 22, 38], 40, V, &mut r);
        let cb = corrupt_crts(
            &b,
            &cm.sampler(&clusters).unwrap(),
            &ObjectiveConfig::new(Objective::Crts),
            &mut r,
        )
        .unwrap();
        let replaced = count(&cb.corruption_mask);
        assert_eq!(cb.replacements.len(), replaced);
        let delta: OutcomeDelta = cb
            .replacements
            .iter()
            .enumerate()
            .map(|(k, rep)| OutcomeEvent {
                source_cluster: rep.source_cluster,
                target_cluster: rep.target_cluster,
                discriminator_correct: (k + step) % 3 == 0,
            })
            .collect();
        let before = cm.counts().clone();
        cm.update_counts(&delta).unwrap();
        // Each event moves one entry by one; opposite outcomes on one pair
        // cancel in pairs.
        let moved: i64 = (cm.counts() - &before).iter().map(|d| d.abs()).sum();
        let events: i64 = delta.iter().map(|(_, v)| v.abs()).sum();
        assert_eq!(delta.events() as usize, replaced);
        assert_eq!(moved, events);
        assert!(moved <= replaced as i64 && (replaced as i64 - moved) % 2 == 0);
    }
}
