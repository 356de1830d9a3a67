//! History-based replacement sampler.
//!
//! A signed count matrix `F` (n × n over clusters) records, for every
//! source/target cluster pair, how often the discriminator failed minus how
//! often it succeeded at spotting a replacement. Each row is min-max
//! normalised and passed through a softmax scaled by `gamma` to obtain the
//! distribution over target clusters; the replacement token is then drawn
//! uniformly from the chosen cluster.
//!
//! The original token is never re-drawn. When the chosen cluster holds only
//! the original token, the cluster draw is repeated up to
//! [`SINGLETON_RETRIES`] times before falling back to a uniform draw over
//! all other regular tokens.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::corpus::{is_special, TokenId, NUM_SPECIALS};
use crate::error::{Error, Result};

pub const SINGLETON_RETRIES: usize = 8;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_CLUSTERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    f: Array2<i64>,
    gamma: f64,
}

/// Outcome of one replaced position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutcomeEvent {
    pub source_cluster: usize,
    pub target_cluster: usize,
    pub discriminator_correct: bool,
}

/// Sparse, mergeable accumulation of outcome events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutcomeDelta {
    entries: BTreeMap<(usize, usize), i64>,
    events: u64,
}

impl OutcomeDelta {
    pub fn new() -> Self {
        Self::default()
    }

    /// A correct detection contributes -1, a miss +1.
    pub fn record(&mut self, e: OutcomeEvent) {
        let step = if e.discriminator_correct { -1 } else { 1 };
        *self.entries.entry((e.source_cluster, e.target_cluster)).or_insert(0) += step;
        self.events += 1;
    }

    pub fn merge(mut self, other: &OutcomeDelta) -> Self {
        for (&k, &v) in &other.entries {
            *self.entries.entry(k).or_insert(0) += v;
        }
        self.events += other.events;
        self
    }

    /// Number of events folded into this delta.
    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), i64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }
}

impl FromIterator<OutcomeEvent> for OutcomeDelta {
    fn from_iter<T: IntoIterator<Item = OutcomeEvent>>(iter: T) -> Self {
        let mut d = OutcomeDelta::new();
        iter.into_iter().for_each(|e| d.record(e));
        d
    }
}

impl CountMatrix {
    /// All-zero `n × n` matrix.
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("count matrix needs at least one cluster"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self {
            f: Array2::zeros((n, n)),
            gamma,
        })
    }

    pub fn from_counts(f: Array2<i64>, gamma: f64) -> Result<Self> {
        if f.nrows() != f.ncols() {
            return Err(Error::Shape(format!("count matrix must be square, got {:?}", f.dim())));
        }
        let mut m = Self::new(f.nrows(), gamma)?;
        m.f = f;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn counts(&self) -> &Array2<i64> {
        &self.f
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::OutOfRange {
                what: "cluster index",
                index: i,
                limit: self.n(),
            });
        }
        Ok(())
    }

    /// Target-cluster distribution for source cluster `i`.
    pub fn row_distribution(&self, i: usize) -> Result<Vec<f64>> {
        self.check_index(i)?;
        let row = self.f.row(i);
        let lo = *row.iter().min().expect("non-empty row");
        let hi = *row.iter().max().expect("non-empty row");
        let n = self.n();
        if lo == hi {
            return Ok(vec![1.0 / n as f64; n]);
        }
        let span = (hi - lo) as f64;
        // Normalised scores lie in [0, 1]; shifting by the maximum keeps
        // every exponent non-positive.
        let w: Vec<f64> = row
            .iter()
            .map(|&x| (self.gamma * ((x - lo) as f64 / span - 1.0)).exp())
            .collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / z).collect())
    }

    pub fn update_counts(&mut self, delta: &OutcomeDelta) -> Result<()> {
        for ((i, j), _) in delta.iter() {
            self.check_index(i)?;
            self.check_index(j)?;
        }
        for ((i, j), v) in delta.iter() {
            self.f[[i, j]] += v;
        }
        Ok(())
    }

    /// Freeze the current counts into a sampler over `clusters`.
    pub fn sampler<'a>(&self, clusters: &'a ClusterModel) -> Result<ReplacementSampler<'a>> {
        if clusters.n() != self.n() {
            return Err(Error::Shape(format!(
                "count matrix has {} clusters, cluster model has {}",
                self.n(),
                clusters.n()
            )));
        }
        let rows = (0..self.n())
            .map(|i| self.row_distribution(i))
            .collect::<Result<Vec<_>>>()?;
        let cdfs = rows
            .iter()
            .map(|p| {
                p.iter()
                    .scan(0.0, |acc, &x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        Ok(ReplacementSampler { clusters, rows, cdfs })
    }

    /// Header `n gamma`, then `n` rows of `n` signed integers.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{} {}", self.n(), self.gamma)?;
        for row in self.f.rows() {
            let line: Vec<String> = row.iter().map(i64::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 1, "missing header"))?
            .split_whitespace()
            .collect();
        let [n, gamma] = header[..] else {
            return Err(Error::parse(&name, 1, "header must be `n gamma`"));
        };
        let n: usize = n.parse().map_err(|_| Error::parse(&name, 1, "bad n"))?;
        let gamma: f64 = gamma.parse().map_err(|_| Error::parse(&name, 1, "bad gamma"))?;
        let mut f = Array2::zeros((n, n));
        for i in 0..n {
            let vals: Vec<i64> = lines
                .next()
                .ok_or_else(|| Error::parse(&name, i + 2, "missing row"))?
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(&name, i + 2, "bad integer"))?;
            if vals.len() != n {
                return Err(Error::parse(&name, i + 2, format!("expected {n} values")));
            }
            for (j, v) in vals.into_iter().enumerate() {
                f[[i, j]] = v;
            }
        }
        Self::from_counts(f, gamma)
    }
}

/// Read-only snapshot of the replacement law for a fixed count matrix.
#[derive(Debug, Clone)]
pub struct ReplacementSampler<'a> {
    clusters: &'a ClusterModel,
    rows: Vec<Vec<f64>>,
    cdfs: Vec<Vec<f64>>,
}

/// A drawn replacement with the cluster pair it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub token: TokenId,
    pub source_cluster: usize,
    pub target_cluster: usize,
}

impl<'a> ReplacementSampler<'a> {
    pub fn clusters(&self) -> &ClusterModel {
        self.clusters
    }

    fn num_regular(&self) -> usize {
        self.clusters.vocab_size() - NUM_SPECIALS
    }

    fn draw_cluster(&self, i: usize, rng: &mut impl Rng) -> usize {
        let cdf = &self.cdfs[i];
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }

    /// Probability that a cluster draw for source `i` lands on a cluster
    /// consisting solely of `alpha`.
    fn singleton_mass(&self, i: usize) -> f64 {
        if self.clusters.members(i).len() == 1 {
            self.rows[i][i]
        } else {
            0.0
        }
    }

    pub fn sample(&self, alpha: TokenId, rng: &mut impl Rng) -> Result<Replacement> {
        let i = self.clusters.cluster_of(alpha)?;
        for _ in 0..=SINGLETON_RETRIES {
            let j = self.draw_cluster(i, rng);
            let members = self.clusters.members(j);
            if j != i {
                let token = members[rng.random_range(0..members.len())];
                return Ok(Replacement {
                    token,
                    source_cluster: i,
                    target_cluster: j,
                });
            }
            if members.len() > 1 {
                // Uniform over the cluster minus alpha.
                let pos = members.binary_search(&alpha).expect("alpha is in its own cluster");
                let mut r = rng.random_range(0..members.len() - 1);
                if r >= pos {
                    r += 1;
                }
                return Ok(Replacement {
                    token: members[r],
                    source_cluster: i,
                    target_cluster: j,
                });
            }
        }
        let regular = self.num_regular();
        if regular < 2 {
            return Err(Error::config("need at least two regular tokens"));
        }
        let mut t = NUM_SPECIALS as TokenId + rng.random_range(0..regular - 1) as TokenId;
        if t >= alpha {
            t += 1;
        }
        Ok(Replacement {
            token: t,
            source_cluster: i,
            target_cluster: self.clusters.cluster_of(t)?,
        })
    }

    /// Exact probability that [`sample`](Self::sample) returns `beta` for
    /// `alpha`, including the singleton retry and fallback branches.
    pub fn probability(&self, alpha: TokenId, beta: TokenId) -> Result<f64> {
        if alpha == beta {
            return Err(Error::SameToken(alpha));
        }
        if is_special(beta) {
            return Err(Error::SpecialToken(beta));
        }
        let i = self.clusters.cluster_of(alpha)?;
        let j = self.clusters.cluster_of(beta)?;
        let s = self.singleton_mass(i);
        let size = self.clusters.members(j).len() - usize::from(i == j);
        let direct = self.rows[i][j] / size as f64;
        // Each failed round (singleton drawn) repeats the cluster draw.
        let rounds = (SINGLETON_RETRIES + 1) as i32;
        let through_retries = if s > 0.0 {
            direct * (1.0 - s.powi(rounds)) / (1.0 - s)
        } else {
            direct
        };
        let fallback = s.powi(rounds) / (self.num_regular() - 1) as f64;
        Ok(through_retries + fallback)
    }
}

/// Draw a replacement for `alpha` under the current counts.
pub fn sample_replacement(
    cm: &CountMatrix,
    clusters: &ClusterModel,
    alpha: TokenId,
    rng: &mut impl Rng,
) -> Result<TokenId> {
    if is_special(alpha) {
        return Err(Error::SpecialToken(alpha));
    }
    Ok(cm.sampler(clusters)?.sample(alpha, rng)?.token)
}

/// The exact law realised by [`sample_replacement`].
pub fn replacement_probability(
    cm: &CountMatrix,
    clusters: &ClusterModel,
    alpha: TokenId,
    beta: TokenId,
) -> Result<f64> {
    if is_special(alpha) {
        return Err(Error::SpecialToken(alpha));
    }
    cm.sampler(clusters)?.probability(alpha, beta)
}
