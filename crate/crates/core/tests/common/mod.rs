#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swaplm_core::corpus::{Batch, TokenId, NUM_SPECIALS};
use swaplm_core::model::{ModelConfig, Transformer};
use swaplm_core::objectives::CorruptedBatch;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows framed by CLS/SEP with random regular payloads of the given lengths.
pub fn random_batch(payloads: &[usize], max_len: usize, vocab: usize, r: &mut impl Rng) -> Batch {
    let rows: Vec<Vec<TokenId>> = payloads
        .iter()
        .map(|&n| {
            let mut row = vec![swaplm_core::corpus::CLS];
            row.extend((0..n).map(|_| r.random_range(NUM_SPECIALS as TokenId..vocab as TokenId)));
            row.push(swaplm_core::corpus::SEP);
            row
        })
        .collect();
    Batch::from_rows(&rows, max_len).unwrap()
}

/// Randomize every parameter, gains and biases included, so no gradient
/// path is trivially zero.
pub fn scramble(model: &mut Transformer, scale: f64, r: &mut impl Rng) {
    for t in model.params.tensors_mut() {
        let gain = t.name.ends_with("_g");
        for x in t.data.iter_mut() {
            let u: f64 = r.random_range(-1.0..1.0);
            *x = if gain { 1.0 + 0.3 * u } else { scale * u };
        }
    }
}

fn scalar(model: &mut Transformer, i: usize) -> &mut f64 {
    let mut i = i;
    for t in model.params.tensors_mut() {
        if i < t.data.len() {
            return &mut t.data[i];
        }
        i -= t.data.len();
    }
    panic!("scalar index out of range")
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compare analytic gradients with central differences at `samples`
/// random scalar parameters.
pub fn grad_check(model: &Transformer, cb: &CorruptedBatch, samples: usize, eps: f64, seed: u64) -> GradCheck {
    let mut analytic = model.loss_and_grad(cb).unwrap().grads.unwrap().to_flat();
    let total = analytic.len();
    let mut m = model.clone();
    let mut r = rng(seed);
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for _ in 0..samples {
        let i = r.random_range(0..total);
        let orig = *scalar(&mut m, i);
        *scalar(&mut m, i) = orig + eps;
        let up = m.loss(cb).unwrap();
        *scalar(&mut m, i) = orig - eps;
        let down = m.loss(cb).unwrap();
        *scalar(&mut m, i) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = i;
        }
        out.checked += 1;
    }
    analytic.clear();
    out
}

pub fn desk_model(vocab: usize, max_len: usize, head: swaplm_core::model::HeadType, seed: u64) -> Transformer {
    Transformer::new(ModelConfig::desk(vocab, max_len, head), seed).unwrap()
}

pub fn count(mask: &Array2<bool>) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Vocabulary of `size` ids: the specials plus `w0, w1, ...` with strictly
/// decreasing frequencies, so id order is fixed.
pub fn word_vocab(size: usize) -> swaplm_core::Vocab {
    let regular = size - NUM_SPECIALS;
    let lines: Vec<String> = (0..regular)
        .map(|i| vec![format!("w{i}"); regular - i].join(" "))
        .collect();
    swaplm_core::build_vocab(lines, size, 1).unwrap()
}

/// Regular ids dealt round-robin into `n` clusters.
pub fn round_robin_clusters(vocab_size: usize, n: usize) -> swaplm_core::ClusterModel {
    let assignment = (0..vocab_size)
        .map(|id| (id >= NUM_SPECIALS).then(|| (id - NUM_SPECIALS) % n))
        .collect();
    swaplm_core::ClusterModel::from_assignment(n, assignment, Array2::zeros((n, 1))).unwrap()
}

/// Regular ids in contiguous blocks of the given sizes.
pub fn block_clusters(sizes: &[usize]) -> swaplm_core::ClusterModel {
    let mut assignment = vec![None; NUM_SPECIALS];
    for (j, &s) in sizes.iter().enumerate() {
        assignment.extend(std::iter::repeat_n(Some(j), s));
    }
    swaplm_core::ClusterModel::from_assignment(sizes.len(), assignment, Array2::zeros((sizes.len(), 1))).unwrap()
}

/// Non-special, non-PAD positions of each row.
pub fn eligible_per_row(cb: &CorruptedBatch) -> Vec<usize> {
    cb.original_ids
        .rows()
        .into_iter()
        .zip(cb.attention_mask.rows())
        .map(|(ids, a)| {
            ids.iter()
                .zip(a.iter())
                .filter(|&(&id, &a)| a && !swaplm_core::corpus::is_special(id))
                .count()
        })
        .collect()
}

/// Synthetic corpus of roughly `bytes` bytes, encoded with its own vocabulary.
pub fn synth_corpus(bytes: usize, seed: u64) -> (swaplm_core::Vocab, Vec<swaplm_core::TokenSequence>) {
    let cfg = swaplm_core::synth::SynthConfig {
        target_bytes: bytes,
        seed,
        ..Default::default()
    };
    let docs = swaplm_core::synth::generate(&cfg).unwrap();
    let vocab = swaplm_core::build_vocab(&docs, 5000, 1).unwrap();
    let seqs = docs.iter().map(|d| swaplm_core::encode(&vocab, d)).collect();
    (vocab, seqs)
}
