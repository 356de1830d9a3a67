//! Skip-gram word embeddings trained with negative sampling.
//!
//! The vectors feed the K-means clustering behind the C-RTS sampler, so
//! only the center table is returned. Specials never act as centers,
//! contexts or negatives and keep their initial rows.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::corpus::{is_special, TokenId, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Array2<f64>,
    pub trained_epochs: usize,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn row(&self, id: TokenId) -> ArrayView1<'_, f64> {
        self.vectors.row(id as usize)
    }

    /// Header `V d`, then one row of `d` decimals per vocab id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for row in self.vectors.rows() {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let header = lines.next().ok_or_else(|| Error::parse(&name, 1, "missing header"))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&name, 1, "header must be `V d`"))?;
        let [v, d] = dims[..] else {
            return Err(Error::parse(&name, 1, "header must be `V d`"));
        };
        let mut vectors = Array2::zeros((v, d));
        for r in 0..v {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(&name, r + 2, "missing row"))??;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(&name, r + 2, "bad number"))?;
            if vals.len() != d {
                return Err(Error::parse(&name, r + 2, format!("expected {d} values")));
            }
            vectors.row_mut(r).assign(&ArrayView1::from(&vals));
        }
        Ok(Self {
            vectors,
            trained_epochs: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly towards zero over training.
    pub lr: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-ln sigmoid(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn train_sgns(corpus: &[TokenSequence], vocab: &Vocab, cfg: &SgnsConfig) -> Result<EmbeddingTable> {
    train_sgns_logged(corpus, vocab, cfg).map(|(t, _)| t)
}

/// Train and also return the loss of every (center, context) update.
pub fn train_sgns_logged(
    corpus: &[TokenSequence],
    vocab: &Vocab,
    cfg: &SgnsConfig,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    if cfg.dim < 2 || cfg.window < 1 || cfg.negatives < 1 {
        return Err(Error::config("sgns needs dim >= 2, window >= 1, negatives >= 1"));
    }
    if vocab.num_regular() < 2 {
        return Err(Error::config("sgns needs at least two regular tokens"));
    }
    let docs: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|s| {
            s.ids
                .iter()
                .copied()
                .filter(|&id| !is_special(id) && (id as usize) < vocab.len())
                .collect()
        })
        .collect();
    let total_tokens: usize = docs.iter().map(Vec::len).sum();
    if total_tokens <= cfg.window {
        return Err(Error::config(format!(
            "corpus of {total_tokens} tokens is shorter than the window"
        )));
    }

    let v = vocab.len();
    let d = cfg.dim;
    let mut rng = rng::stream(cfg.seed, &[rng::label::SGNS]);
    let half = 0.5 / d as f64;
    let mut center = Array2::from_shape_simple_fn((v, d), || rng.random_range(-half..half));
    let mut context = Array2::<f64>::zeros((v, d));

    let first = vocab.regular_ids().start;
    let weights: Vec<f64> = vocab
        .regular_ids()
        .map(|id| (vocab.freq(id).max(1) as f64).powf(0.75))
        .collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;

    let mut losses = Vec::new();
    let budget = (cfg.epochs * total_tokens) as f64;
    let mut seen = 0usize;
    let mut grad = vec![0.0; d];
    for _ in 0..cfg.epochs {
        for doc in &docs {
            for (i, &c) in doc.iter().enumerate() {
                let lr = cfg.lr * (1.0 - seen as f64 / budget).max(1e-4);
                seen += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(doc.len());
                for (j, &o) in doc.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let mut loss = 0.0;
                    let h = center.row(c as usize).to_owned();
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (o, 1.0)
                        } else {
                            let t = first + noise.sample(&mut rng) as TokenId;
                            if t == o {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let mut ctx = context.row_mut(target as usize);
                        let score = h.dot(&ctx);
                        loss += if label > 0.0 {
                            neg_log_sigmoid(score)
                        } else {
                            neg_log_sigmoid(-score)
                        };
                        let g = (label - sigmoid(score)) * lr;
                        for ((gr, cx), hx) in grad.iter_mut().zip(ctx.iter_mut()).zip(h.iter()) {
                            *gr += g * *cx;
                            *cx += g * hx;
                        }
                    }
                    center
                        .row_mut(c as usize)
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(w, g)| *w += g);
                    losses.push(loss);
                }
            }
        }
    }
    Ok((
        EmbeddingTable {
            vectors: center,
            trained_epochs: cfg.epochs,
        },
        losses,
    ))
}

/// The `k` ids closest to `token_id` in Euclidean distance, excluding the
/// token itself. Ties are broken by id.
pub fn nearest(table: &EmbeddingTable, token_id: TokenId, k: usize) -> Result<Vec<(TokenId, f64)>> {
    let v = table.len();
    if token_id as usize >= v {
        return Err(Error::OutOfRange {
            what: "token id",
            index: token_id as usize,
            limit: v,
        });
    }
    if k >= v {
        return Err(Error::config(format!("k = {k} must be smaller than V = {v}")));
    }
    let q = table.row(token_id);
    let mut all: Vec<(TokenId, f64)> = (0..v as TokenId)
        .filter(|&i| i != token_id)
        .map(|i| {
            let d2: f64 = table.row(i).iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (i, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode};
    use ndarray::array;

    #[test]
    fn nearest_handles_duplicates_and_geometry() {
        let t = EmbeddingTable {
            vectors: array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            trained_epochs: 0,
        };
        assert_eq!(nearest(&t, 0, 1).unwrap(), vec![(1, 0.0)]);

        let t = EmbeddingTable {
            vectors: Array2::eye(4),
            trained_epochs: 0,
        };
        for (_, d) in nearest(&t, 2, 3).unwrap() {
            assert!((d - 2f64.sqrt()).abs() < 1e-15);
        }
        assert!(nearest(&t, 4, 1).is_err());
        assert!(nearest(&t, 0, 4).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let vocab = build_vocab(["x y x y x y z"], 10, 1).unwrap();
        let seq = encode(&vocab, "x y x y x y z");
        let cfg = SgnsConfig {
            dim: 4,
            epochs: 0,
            seed: 9,
            ..SgnsConfig::default()
        };
        let a = train_sgns(std::slice::from_ref(&seq), &vocab, &cfg).unwrap();
        let b = train_sgns(
            std::slice::from_ref(&seq),
            &vocab,
            &SgnsConfig {
                epochs: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        // Specials keep their initial rows regardless of training.
        for s in 0..crate::corpus::NUM_SPECIALS {
            assert_eq!(a.vectors.row(s), b.vectors.row(s));
        }
        let again = train_sgns(&[seq], &vocab, &cfg).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.trained_epochs, 0);
        let half = 0.5 / 4.0;
        assert!(a.vectors.iter().all(|x| x.abs() <= half));
    }

    #[test]
    fn short_corpus_and_bad_config() {
        let vocab = build_vocab(["a b"], 10, 1).unwrap();
        let seq = encode(&vocab, "a b");
        assert!(train_sgns(std::slice::from_ref(&seq), &vocab, &SgnsConfig::default()).is_err());
        let cfg = SgnsConfig {
            dim: 1,
            ..SgnsConfig::default()
        };
        assert!(train_sgns(&[seq], &vocab, &cfg).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let t = EmbeddingTable {
            vectors: array![[0.1, -2.5e-17], [1.0 / 3.0, 7.0]],
            trained_epochs: 1,
        };
        t.save(&path).unwrap();
        let back = EmbeddingTable::load(&path).unwrap();
        assert_eq!(back.vectors, t.vectors);
    }
}
