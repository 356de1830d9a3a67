//! Seeded synthetic corpus: word classes follow a sparse second-order Markov
//! chain and words within a class follow a Zipf law. Each document has one
//! topic, and every class holds a separate word list per topic. Word
//! `cKKtTwNN` is the `NN`-th most likely word of class `KK` under topic `T`,
//! so labels are recoverable from the surface form.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Words per class and topic.
    pub words_per_class: usize,
    pub topics: usize,
    pub zipf_s: f64,
    /// Candidate next classes per previous class.
    pub pool: usize,
    /// Allowed next classes per (class, class) context, drawn from the pool
    /// of the nearer class.
    pub successors: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Generation stops once the text reaches this many bytes.
    pub target_bytes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            words_per_class: 12,
            topics: 4,
            zipf_s: 1.1,
            pool: 3,
            successors: 1,
            min_words: 30,
            max_words: 60,
            target_bytes: 1_000_000,
            seed: 0,
        }
    }
}

pub fn word(class: usize, topic: usize, rank: usize) -> String {
    format!("c{class:02}t{topic}w{rank:02}")
}

fn fields(word: &str) -> Option<(usize, usize, usize)> {
    let rest = word.strip_prefix('c')?;
    let (class, rest) = rest.split_once('t')?;
    let (topic, rank) = rest.split_once('w')?;
    Some((class.parse().ok()?, topic.parse().ok()?, rank.parse().ok()?))
}

/// Class index encoded in a generated word.
pub fn class_of(word: &str) -> Option<usize> {
    fields(word).map(|f| f.0)
}

pub fn topic_of(word: &str) -> Option<usize> {
    fields(word).map(|f| f.1)
}

/// One document per line.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<String>> {
    if cfg.classes < 2
        || cfg.words_per_class < 1
        || cfg.topics < 1
        || cfg.successors < 1
        || cfg.successors > cfg.pool
        || cfg.pool > cfg.classes
    {
        return Err(Error::config(
            "synthetic corpus needs >= 2 classes and 1 <= successors <= pool <= classes",
        ));
    }
    if cfg.min_words < 2 || cfg.min_words > cfg.max_words || cfg.zipf_s <= 0.0 {
        return Err(Error::config("bad synthetic document length or Zipf exponent"));
    }
    let mut r = rng::stream(cfg.seed, &[rng::label::SYNTH]);
    let k = cfg.classes;

    let zipf: Vec<f64> = (1..=cfg.words_per_class)
        .map(|rank| (rank as f64).powf(-cfg.zipf_s))
        .collect();
    let within = WeightedIndex::new(&zipf).map_err(|e| Error::config(e.to_string()))?;

    let pools: Vec<Vec<usize>> = (0..k).map(|_| index::sample(&mut r, k, cfg.pool).into_vec()).collect();
    let mut next: Vec<(Vec<usize>, WeightedIndex<f64>)> = Vec::with_capacity(k * k);
    for ctx in 0..k * k {
        let pool = &pools[ctx % k];
        let to: Vec<usize> = index::sample(&mut r, pool.len(), cfg.successors)
            .iter()
            .map(|i| pool[i])
            .collect();
        let w: Vec<f64> = (0..cfg.successors).map(|_| r.random_range(0.2..1.0)).collect();
        next.push((to, WeightedIndex::new(&w).map_err(|e| Error::config(e.to_string()))?));
    }

    let mut docs = Vec::new();
    let mut bytes = 0;
    while bytes < cfg.target_bytes {
        let n = r.random_range(cfg.min_words..=cfg.max_words);
        let topic = r.random_range(0..cfg.topics);
        let (mut a, mut b) = (r.random_range(0..k), r.random_range(0..k));
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            let (to, w) = &next[a * k + b];
            let c = to[w.sample(&mut r)];
            words.push(word(c, topic, within.sample(&mut r)));
            (a, b) = (b, c);
        }
        let doc = words.join(" ");
        bytes += doc.len() + 1;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig {
            target_bytes: 20_000,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let bytes: usize = a.iter().map(|d| d.len() + 1).sum();
        assert!((20_000..21_000).contains(&bytes));
        for d in &a {
            let n = d.split(' ').count();
            assert!((30..=60).contains(&n));
        }
        assert_ne!(a, generate(&SynthConfig { seed: 1, ..cfg }).unwrap());
    }

    #[test]
    fn class_round_trip() {
        assert_eq!(class_of(&word(7, 2, 13)), Some(7));
        assert_eq!(topic_of(&word(7, 2, 13)), Some(2));
        assert_eq!(class_of("hello"), None);
    }

    #[test]
    fn transitions_stay_within_successor_sets() {
        let cfg = SynthConfig {
            target_bytes: 50_000,
            successors: 2,
            ..SynthConfig::default()
        };
        let mut seen = std::collections::HashMap::<(usize, usize), std::collections::BTreeSet<usize>>::new();
        for d in generate(&cfg).unwrap() {
            let cs: Vec<usize> = d.split(' ').map(|w| class_of(w).unwrap()).collect();
            for t in cs.windows(3) {
                seen.entry((t[0], t[1])).or_default().insert(t[2]);
            }
        }
        assert!(seen.values().all(|s| s.len() <= cfg.successors));
        let mut after = std::collections::HashMap::<usize, std::collections::BTreeSet<usize>>::new();
        for ((_, b), s) in &seen {
            after.entry(*b).or_default().extend(s);
        }
        assert!(after.values().all(|s| s.len() <= cfg.pool));
    }

    #[test]
    fn one_topic_per_document() {
        let cfg = SynthConfig {
            target_bytes: 20_000,
            ..SynthConfig::default()
        };
        for d in generate(&cfg).unwrap() {
            let t: std::collections::BTreeSet<_> = d.split(' ').map(|w| topic_of(w).unwrap()).collect();
            assert_eq!(t.len(), 1);
        }
    }
}
