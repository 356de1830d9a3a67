//! Fixtures shared by the benchmarks: a small synthetic corpus with its
//! vocabulary, skip-gram table, clustering and packed desk batches.

use swaplm_core::embed::{train_sgns, EmbeddingTable, SgnsConfig};
use swaplm_core::synth::{generate, SynthConfig};
use swaplm_core::{build_vocab, encode, kmeans, pack_batches, Batch, ClusterModel, TokenSequence, Vocab};

pub const MAX_LEN: usize = 64;
pub const BATCH: usize = 32;
pub const CLUSTERS: usize = 32;

pub struct Fixture {
    pub vocab: Vocab,
    pub seqs: Vec<TokenSequence>,
    pub table: EmbeddingTable,
    pub clusters: ClusterModel,
    pub batches: Vec<Batch>,
}

pub fn fixture() -> Fixture {
    let docs = generate(&SynthConfig {
        target_bytes: 200_000,
        ..SynthConfig::default()
    })
    .expect("default synthetic config is valid");
    let vocab = build_vocab(&docs, 5000, 1).expect("non-empty corpus");
    let seqs: Vec<TokenSequence> = docs.iter().map(|d| encode(&vocab, d)).collect();
    let table = train_sgns(
        &seqs,
        &vocab,
        &SgnsConfig {
            epochs: 1,
            ..SgnsConfig::default()
        },
    )
    .expect("sgns");
    let clusters = kmeans(&table, &vocab, CLUSTERS, 50, 0).expect("kmeans");
    let batches = pack_batches(seqs.iter().cloned(), MAX_LEN, BATCH, 0).expect("packing");
    Fixture {
        vocab,
        seqs,
        table,
        clusters,
        batches,
    }
}
