//! Desk-scale run on the synthetic corpus: `cargo run --release --example desk_run -- rts 2000 1e-3`.
//! C-RTS runs first train skip-gram embeddings and cluster them.

use std::time::Instant;

use swaplm_core::cluster::kmeans;
use swaplm_core::corpus::{build_vocab, encode};
use swaplm_core::embed::{train_sgns, SgnsConfig};
use swaplm_core::model::ModelConfig;
use swaplm_core::synth::{generate, SynthConfig};
use swaplm_core::train::probe_hardness;
use swaplm_core::{Objective, Pretrainer, TrainConfig};

fn main() -> swaplm_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let objective: Objective = args.get(1).map_or("rts", String::as_str).parse()?;
    let steps: usize = args.get(2).map_or(Ok(2000), |s| s.parse()).unwrap();
    let lr: f64 = args.get(3).map_or(Ok(1e-3), |s| s.parse()).unwrap();
    let max_len = 64;

    let env = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let defaults = SynthConfig::default();
    let synth = SynthConfig {
        classes: env("SYNTH_CLASSES", defaults.classes),
        successors: env("SYNTH_SUCCESSORS", defaults.successors),
        pool: env("SYNTH_POOL", defaults.pool),
        topics: env("SYNTH_TOPICS", defaults.topics),
        words_per_class: env("SYNTH_WORDS", defaults.words_per_class),
        ..defaults
    };
    let docs = generate(&synth)?;
    let vocab = build_vocab(&docs, 5000, 1)?;
    let seqs: Vec<_> = docs.iter().map(|d| encode(&vocab, d)).collect();
    let clusters = if objective == Objective::Crts {
        let table = train_sgns(&seqs, &vocab, &SgnsConfig::default())?;
        Some(kmeans(&table, &vocab, env("CLUSTERS", 32), 100, 0)?)
    } else {
        None
    };
    let model_cfg = ModelConfig::desk(vocab.len(), max_len, objective.head());
    let cfg = TrainConfig {
        peak_lr: lr,
        ..TrainConfig::desk(objective, steps, max_len)
    };
    let mut t = Pretrainer::new(&seqs, &vocab, model_cfg, None, cfg, clusters.as_ref())?;
    println!(
        "vocab {} train batches {} held-out {}",
        vocab.len(),
        t.train_batches(max_len).len(),
        t.held_out().len()
    );
    let start = Instant::now();
    let every = (steps / 10).max(1);
    let mut marks: Vec<usize> = (1..=10).map(|k| k * every).collect();
    marks.insert(0, 100.min(steps));
    for m in marks {
        t.run_until(m, &mut |_| Ok(()))?;
        let e = t.evaluate_held_out(1)?;
        println!(
            "step {:5} {:6.1}s loss {:.4} rep_loss {:.4} rep_acc {:.3} bal {:?}",
            t.step(),
            start.elapsed().as_secs_f64(),
            e.loss,
            e.replaced_loss,
            e.replaced_accuracy,
            e.balanced_accuracy
        );
    }
    if let (Some(cm), Some(c)) = (t.count_matrix(), clusters.as_ref()) {
        let r = probe_hardness(t.model(), cm, c, &vocab, t.held_out(), env("PASSES", 12), 0)?;
        println!("probe {r:?}");
    }
    Ok(())
}
