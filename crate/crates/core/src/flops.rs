//! Training-cost estimates in floating-point operations.
//!
//! Only dense matrix products are counted (2 FLOPs per multiply-add); the
//! backward pass costs twice the forward. Input embeddings are sparse row
//! lookups, so they cost `2·E` per token rather than a `V × E` product.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{HeadType, ModelConfig};
use crate::objectives::Objective;
use crate::train::TrainConfig;

pub const BACKWARD_MULTIPLIER: f64 = 2.0;
/// Vocabulary of the base-scale byte-level BPE tokenizer.
pub const BASE_VOCAB: usize = 50_265;

/// Where the generator's LM head is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorHead {
    /// Every input position.
    AllPositions,
    /// Only the masked positions.
    SelectedPositions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsOptions {
    pub backward_multiplier: f64,
    pub generator_head: GeneratorHead,
    /// Width of the generator's (tied) embeddings; projected to and from its
    /// hidden size when they differ. `None` means the generator's hidden size.
    pub generator_embedding: Option<usize>,
}

impl Default for FlopsOptions {
    fn default() -> Self {
        Self {
            backward_multiplier: BACKWARD_MULTIPLIER,
            generator_head: GeneratorHead::AllPositions,
            generator_embedding: None,
        }
    }
}

/// Cost shape of one network: encoder plus embeddings plus head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCost {
    pub model: ModelConfig,
    pub embedding: usize,
    /// Fraction of positions where the head is evaluated.
    pub head_fraction: f64,
}

impl NetworkCost {
    pub fn encoder_per_token(&self, seq_len: usize) -> f64 {
        let (h, i, l) = (self.model.hidden as f64, self.model.intermediate as f64, seq_len as f64);
        self.model.layers as f64 * (8.0 * h * h + 4.0 * l * h + 4.0 * h * i)
    }

    fn projection(&self) -> f64 {
        if self.embedding == self.model.hidden {
            0.0
        } else {
            2.0 * (self.embedding * self.model.hidden) as f64
        }
    }

    pub fn embedding_per_token(&self) -> f64 {
        2.0 * self.embedding as f64 + self.projection()
    }

    pub fn head_per_token(&self) -> f64 {
        let per_position = match self.model.head_type {
            HeadType::Binary => 2.0 * self.model.hidden as f64,
            HeadType::Lm => 2.0 * (self.embedding * self.model.vocab_size) as f64 + self.projection(),
        };
        self.head_fraction * per_position
    }

    pub fn per_token(&self, seq_len: usize) -> f64 {
        self.encoder_per_token(seq_len) + self.embedding_per_token() + self.head_per_token()
    }

    /// Forward plus backward over every `(steps, seq_len)` phase.
    pub fn total(&self, phases: &[(usize, usize)], batch_size: usize, backward_multiplier: f64) -> f64 {
        phases
            .iter()
            .map(|&(steps, len)| steps as f64 * batch_size as f64 * len as f64 * self.per_token(len))
            .sum::<f64>()
            * (1.0 + backward_multiplier)
    }
}

/// Networks trained for `objective`: the main network and, when given, the
/// generator.
pub fn networks(
    main: &ModelConfig,
    generator: Option<&ModelConfig>,
    objective: Objective,
    replace_rate: f64,
    opts: &FlopsOptions,
) -> Vec<NetworkCost> {
    let main_fraction = match objective {
        Objective::Mlm | Objective::Slm => replace_rate,
        _ => 1.0,
    };
    let mut out = vec![NetworkCost {
        model: ModelConfig {
            head_type: objective.head(),
            ..main.clone()
        },
        embedding: main.hidden,
        head_fraction: main_fraction,
    }];
    if let Some(g) = generator {
        out.push(NetworkCost {
            model: ModelConfig {
                head_type: HeadType::Lm,
                ..g.clone()
            },
            embedding: opts.generator_embedding.unwrap_or(g.hidden),
            head_fraction: match opts.generator_head {
                GeneratorHead::AllPositions => 1.0,
                GeneratorHead::SelectedPositions => replace_rate,
            },
        });
    }
    out
}

/// Total training FLOPs of `objective` under `train`'s phases and batch size.
pub fn estimate(
    main: &ModelConfig,
    generator: Option<&ModelConfig>,
    train: &TrainConfig,
    objective: Objective,
    opts: &FlopsOptions,
) -> f64 {
    networks(main, generator, objective, train.objective.replace_rate, opts)
        .iter()
        .map(|n| n.total(&train.seq_len_schedule, train.batch_size, opts.backward_multiplier))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub name: String,
    pub flops: f64,
    /// Relative to the first row.
    pub ratio: f64,
}

pub fn report(entries: &[(String, f64)]) -> Vec<FlopsRow> {
    let base = entries.first().map_or(1.0, |e| e.1);
    entries
        .iter()
        .map(|(name, flops)| FlopsRow {
            name: name.clone(),
            flops: *flops,
            ratio: if base == 0.0 { 0.0 } else { flops / base },
        })
        .collect()
}

pub fn report_text(rows: &[FlopsRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>10}  {:>6}\n", "name", "flops", "ratio");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>10.3e}  {:>6.3}", r.name, r.flops, r.ratio);
    }
    s
}

pub fn report_jsonl(rows: &[FlopsRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("plain struct") + "\n")
        .collect()
}

/// The six compared pre-training setups, named after their model families.
pub fn comparison(
    main: &ModelConfig,
    generator: &ModelConfig,
    single: &TrainConfig,
    with_generator: &TrainConfig,
    opts: &FlopsOptions,
) -> Vec<(String, f64)> {
    let one = |o: Objective| estimate(main, None, single, o, opts);
    let two = |o: Objective| estimate(main, Some(generator), with_generator, o, opts);
    vec![
        ("RoBERTa-MLM".into(), one(Objective::Mlm)),
        ("RoBERTa-RTS".into(), one(Objective::Rts)),
        ("RoBERTa-C-RTS".into(), one(Objective::Crts)),
        ("RoBERTa-SLM".into(), one(Objective::Slm)),
        ("ELECTRA".into(), two(Objective::TdGen)),
        ("ELECTRA-SLM-all".into(), two(Objective::SlmAll)),
    ]
}

/// Base-scale comparison: 12-layer/768 main network, 12-layer/256 generator
/// with 768-wide tied embeddings.
pub fn base_comparison(opts: &FlopsOptions) -> Vec<(String, f64)> {
    let main = ModelConfig::base(BASE_VOCAB, HeadType::Binary);
    let generator = ModelConfig::generator(BASE_VOCAB);
    let opts = FlopsOptions {
        generator_embedding: opts.generator_embedding.or(Some(main.hidden)),
        ..opts.clone()
    };
    comparison(
        &main,
        &generator,
        &TrainConfig::base(Objective::Rts),
        &TrainConfig::base(Objective::TdGen),
        &opts,
    )
}

pub fn desk_comparison(vocab_size: usize, steps: usize, max_len: usize, opts: &FlopsOptions) -> Vec<(String, f64)> {
    let main = ModelConfig::desk(vocab_size, max_len, HeadType::Binary);
    let generator = ModelConfig::desk_generator(vocab_size, max_len);
    let single = TrainConfig::desk(Objective::Rts, steps, max_len);
    let with_generator = TrainConfig::desk(Objective::TdGen, steps, max_len);
    comparison(&main, &generator, &single, &with_generator, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_cost_nothing() {
        let mut t = TrainConfig::desk(Objective::Rts, 10, 16);
        t.seq_len_schedule = vec![(0, 16)];
        let m = ModelConfig::desk(100, 16, HeadType::Binary);
        assert_eq!(estimate(&m, None, &t, Objective::Rts, &FlopsOptions::default()), 0.0);
    }

    #[test]
    fn single_entry_report() {
        let rows = report(&[("x".into(), 5.0)]);
        assert_eq!(rows[0].ratio, 1.0);
        assert!(report_text(&rows).contains("1.000"));
        assert_eq!(report_jsonl(&rows).lines().count(), 1);
    }

    fn by_name(rows: &[(String, f64)], name: &str) -> f64 {
        rows.iter().find(|r| r.0 == name).unwrap().1
    }

    #[test]
    fn base_head_ratio_and_ordering() {
        let rows = base_comparison(&FlopsOptions::default());
        let (mlm, rts) = (by_name(&rows, "RoBERTa-MLM"), by_name(&rows, "RoBERTa-RTS"));
        let r = mlm / rts;
        assert!((1.03..=1.10).contains(&r), "{r}");
        let td = by_name(&rows, "ELECTRA");
        let all = by_name(&rows, "ELECTRA-SLM-all");
        assert!(rts < mlm && mlm < td && td < all);
    }

    #[test]
    fn rts_mlm_gap_is_the_head_difference() {
        let t = TrainConfig::base(Objective::Rts);
        let m = ModelConfig::base(BASE_VOCAB, HeadType::Binary);
        let o = FlopsOptions::default();
        let gap = estimate(&m, None, &t, Objective::Mlm, &o) - estimate(&m, None, &t, Objective::Rts, &o);
        let tokens: f64 = t
            .seq_len_schedule
            .iter()
            .map(|&(s, l)| (s * l * t.batch_size) as f64)
            .sum();
        let per_token = 0.15 * 2.0 * 768.0 * BASE_VOCAB as f64 - 2.0 * 768.0;
        assert!((gap - 3.0 * tokens * per_token).abs() / gap < 1e-12);
    }

    #[test]
    fn two_identical_configs_match() {
        let a = desk_comparison(500, 100, 32, &FlopsOptions::default());
        let b = desk_comparison(500, 100, 32, &FlopsOptions::default());
        assert_eq!(a, b);
        assert_eq!(a[1].1, a[2].1);
        assert_eq!(a[0].1, a[3].1);
    }
}
