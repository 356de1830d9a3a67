//! Pre-training objectives for transformer encoders that avoid the MASK
//! symbol, with the supporting pipeline: vocabulary, word embeddings,
//! vocabulary clustering, the count-matrix replacement sampler, a desk-scale
//! encoder with exact gradients, the training loop and a FLOPs estimator.

pub mod cluster;
pub mod config;
pub mod corpus;
pub mod crts;
pub mod embed;
pub mod error;
pub mod flops;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod train;

pub use cluster::{kmeans, ClusterModel};
pub use corpus::{build_vocab, decode, encode, pack_batches, Batch, TokenId, TokenSequence, Vocab};
pub use crts::{CountMatrix, OutcomeDelta, OutcomeEvent, ReplacementSampler};
pub use embed::{nearest, train_sgns, EmbeddingTable, SgnsConfig};
pub use error::{Error, Result};
pub use model::{HeadType, ModelConfig, Transformer, TransformerParams};
pub use objectives::{CorruptedBatch, Objective, ObjectiveConfig};
pub use train::{lr_at, Checkpoint, Pretrainer, TrainConfig};
