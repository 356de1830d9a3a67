//! Text ingestion: vocabulary construction, encoding and fixed-length batch
//! packing.
//!
//! Tokenization is whitespace splitting plus lowercasing. Special tokens
//! always occupy the lowest ids so "is this a special?" is a single compare.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

/// Surface forms of the specials, in id order.
pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

#[inline]
pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Registry of special-token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            pad: PAD,
            unk: UNK,
            cls: CLS,
            sep: SEP,
            mask: MASK,
        }
    }
}

/// Build parameters recorded next to a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMeta {
    pub min_freq: u64,
    pub max_size: usize,
    pub corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    id_of: HashMap<String, TokenId>,
    freq: Vec<u64>,
    specials: Specials,
    meta: VocabMeta,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, freq: Vec<u64>, meta: VocabMeta) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            id_of,
            freq,
            specials: Specials::default(),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn meta(&self) -> &VocabMeta {
        &self.meta
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn freq(&self, id: TokenId) -> u64 {
        self.freq.get(id as usize).copied().unwrap_or(0)
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    /// Number of non-special tokens.
    pub fn num_regular(&self) -> usize {
        self.len() - NUM_SPECIALS
    }

    /// Ids of all non-special tokens, in id order.
    pub fn regular_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIALS as TokenId..self.len() as TokenId
    }

    /// Write the token list to `path` and the metadata record to
    /// `path.meta`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        let freqs: Vec<String> = self.freq.iter().map(u64::to_string).collect();
        let mut meta = fs::File::create(meta_path(path))?;
        writeln!(meta, "min_freq={}", self.meta.min_freq)?;
        writeln!(meta, "max_size={}", self.meta.max_size)?;
        writeln!(meta, "corpus_hash={}", self.meta.corpus_hash)?;
        writeln!(meta, "freqs={}", freqs.join(","))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let tokens: Vec<String> = BufReader::new(fs::File::open(path)?)
            .lines()
            .collect::<std::io::Result<_>>()?;
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS].iter().zip(SPECIAL_SURFACES).any(|(a, b)| a != b) {
            return Err(Error::parse(&name, 1, "vocab must start with the special tokens"));
        }

        let meta_name = meta_path(path).display().to_string();
        let kv = crate::config::KvFile::load(&meta_path(path))?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::parse(&meta_name, 0, format!("missing key {k}")))
        };
        let parse_num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(&meta_name, 0, format!("bad value for {k}")))
        };
        let meta = VocabMeta {
            min_freq: parse_num("min_freq")?,
            max_size: parse_num("max_size")? as usize,
            corpus_hash: get("corpus_hash")?.to_string(),
        };
        let freq = match kv.get("freqs") {
            Some(s) if !s.is_empty() => s
                .split(',')
                .map(|f| f.parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(&meta_name, 0, "bad freqs list"))?,
            _ => vec![0; tokens.len()],
        };
        if freq.len() != tokens.len() {
            return Err(Error::parse(&meta_name, 0, "freqs length differs from vocab"));
        }
        Ok(Self::from_parts(tokens, freq, meta))
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Count whitespace-split, lowercased words and keep the most frequent ones.
///
/// Ties in frequency are broken lexicographically. Words that collide with a
/// special surface form are ignored.
pub fn build_vocab<I, S>(lines: I, max_size: usize, min_freq: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size <= NUM_SPECIALS {
        return Err(Error::config(format!(
            "max_size must exceed the {NUM_SPECIALS} special tokens"
        )));
    }
    if min_freq == 0 {
        return Err(Error::config("min_freq must be at least 1"));
    }

    let mut hasher = Sha256::new();
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0usize;
    for line in lines {
        let line = line.as_ref();
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        for w in words(line) {
            total += 1;
            if SPECIAL_SURFACES.contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut ranked: Vec<(String, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);

    let mut tokens: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
    let mut freq = vec![0u64; NUM_SPECIALS];
    for (t, c) in ranked {
        tokens.push(t);
        freq.push(c);
    }
    let corpus_hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(Vocab::from_parts(
        tokens,
        freq,
        VocabMeta {
            min_freq,
            max_size,
            corpus_hash,
        },
    ))
}

/// A run of token ids without CLS/SEP/PAD framing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Out-of-vocabulary words (and words spelled like a special) map to UNK.
pub fn encode(vocab: &Vocab, text: &str) -> TokenSequence {
    let ids = words(text)
        .map(|w| match vocab.id(&w) {
            Some(id) if !is_special(id) => id,
            _ => UNK,
        })
        .collect();
    TokenSequence { ids }
}

pub fn decode(vocab: &Vocab, seq: &TokenSequence) -> String {
    seq.ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_SURFACES[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A B×L matrix of left-aligned, PAD-filled rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub ids: Array2<TokenId>,
    pub attention_mask: Array2<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Build a batch from already framed rows, padding each to `max_len`.
    pub fn from_rows(rows: &[Vec<TokenId>], max_len: usize) -> Result<Self> {
        let mut ids = Array2::from_elem((rows.len(), max_len), PAD);
        let mut attention_mask = Array2::from_elem((rows.len(), max_len), false);
        let mut lengths = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.len() > max_len {
                return Err(Error::Shape(format!(
                    "row of length {} exceeds max_len {max_len}",
                    row.len()
                )));
            }
            for (p, &id) in row.iter().enumerate() {
                ids[[r, p]] = id;
                attention_mask[[r, p]] = true;
            }
            lengths.push(row.len());
        }
        Ok(Self {
            ids,
            attention_mask,
            lengths,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.ids.ncols()
    }

    pub fn row(&self, r: usize) -> ArrayView1<'_, TokenId> {
        self.ids.row(r)
    }
}

/// Frame every sequence as `CLS tokens SEP`, splitting long sequences into
/// several rows, shuffle all rows with `rng_seed` and group them into batches.
///
/// Sequences are packed greedily one per row; sentence boundaries inside a
/// document are not tracked. The final batch may hold fewer than
/// `batch_size` rows.
pub fn pack_batches<I>(seqs: I, max_len: usize, batch_size: usize, rng_seed: u64) -> Result<Vec<Batch>>
where
    I: IntoIterator<Item = TokenSequence>,
{
    if max_len < 3 {
        return Err(Error::config("max_len must be at least 3"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let payload = max_len - 2;
    let mut rows: Vec<Vec<TokenId>> = Vec::new();
    for seq in seqs {
        for chunk in seq.ids.chunks(payload) {
            let mut row = Vec::with_capacity(chunk.len() + 2);
            row.push(CLS);
            row.extend_from_slice(chunk);
            row.push(SEP);
            rows.push(row);
        }
    }
    rows.shuffle(&mut rng::stream(rng_seed, &[rng::label::PACK]));
    rows.chunks(batch_size)
        .map(|chunk| Batch::from_rows(chunk, max_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_and_thresholds() {
        let v = build_vocab(["a a b"], 10, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS + 2);
        assert_eq!(v.freq(v.id("a").unwrap()), 2);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));

        let v = build_vocab(["a a b"], 10, 2).unwrap();
        assert_eq!(v.num_regular(), 1);
        assert!(v.id("b").is_none());
    }

    #[test]
    fn ties_are_lexicographic_and_specials_lead() {
        let v = build_vocab(["B a c c"], 7, 1).unwrap();
        assert_eq!(&v.tokens()[..NUM_SPECIALS], &SPECIAL_SURFACES);
        assert_eq!(v.token(5), Some("c"));
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.len(), 7);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
        }
    }

    #[test]
    fn empty_and_bad_config() {
        assert!(matches!(
            build_vocab(Vec::<String>::new(), 10, 1),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(build_vocab(["   "], 10, 1), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocab(["a"], NUM_SPECIALS, 1), Err(Error::Config(_))));
        assert!(matches!(build_vocab(["a"], 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = build_vocab(["a b"], 10, 1).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(encode(&v, "a b").ids, vec![a, b]);
        assert_eq!(encode(&v, "A zzz").ids, vec![a, UNK]);
        assert!(encode(&v, "").is_empty());
        assert_eq!(encode(&v, "<pad> a").ids, vec![UNK, a]);
        assert_eq!(decode(&v, &encode(&v, "a zzz b")), "a <unk> b");
    }

    #[test]
    fn packing_frames_and_splits() {
        let seq = TokenSequence {
            ids: vec![10, 11, 12, 13],
        };
        let b = pack_batches([seq], 8, 4, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].row(0).to_vec(), vec![CLS, 10, 11, 12, 13, SEP, PAD, PAD]);
        assert_eq!(b[0].lengths, vec![6]);

        let seq = TokenSequence {
            ids: (10..20).collect(),
        };
        let b = pack_batches([seq], 8, 4, 0).unwrap();
        let mut payloads: Vec<usize> = b[0].lengths.iter().map(|l| l - 2).collect();
        payloads.sort();
        assert_eq!(payloads, vec![4, 6]);
    }

    #[test]
    fn packing_rejects_bad_config() {
        assert!(pack_batches(Vec::new(), 2, 4, 0).is_err());
        assert!(pack_batches(Vec::new(), 8, 0, 0).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(["x y y z z z"], 10, 1).unwrap();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.freqs(), v.freqs());
        assert_eq!(back.meta(), v.meta());
        assert_eq!(back.id("z"), Some(5));
    }

    proptest! {
        #[test]
        fn packing_conserves_tokens_and_is_deterministic(
            lens in proptest::collection::vec(0usize..40, 1..20),
            max_len in 3usize..16,
            batch_size in 1usize..6,
            seed in any::<u64>(),
        ) {
            let seqs: Vec<TokenSequence> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| TokenSequence { ids: (0..n).map(|j| (5 + (i * 7 + j) % 50) as TokenId).collect() })
                .collect();
            let total: usize = lens.iter().sum();
            let a = pack_batches(seqs.clone(), max_len, batch_size, seed).unwrap();
            let b = pack_batches(seqs, max_len, batch_size, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let mut packed = 0;
            for batch in &a {
                for r in 0..batch.rows() {
                    let len = batch.lengths[r];
                    for p in 0..batch.max_len() {
                        let id = batch.ids[[r, p]];
                        prop_assert_eq!(batch.attention_mask[[r, p]], p < len);
                        if p >= len { prop_assert_eq!(id, PAD); }
                        if !is_special(id) { packed += 1; }
                    }
                }
            }
            prop_assert_eq!(packed, total);
        }
    }
}
