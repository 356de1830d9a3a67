//! K-means partition of the vocabulary into clusters over embedding vectors.
//!
//! k-means++ seeding followed by Lloyd iterations. Specials are left
//! unclustered. A cluster that empties during Lloyd is reseeded with the
//! point farthest from the centroid of the currently largest cluster, so
//! every cluster keeps at least one member.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{is_special, TokenId, Vocab};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    n: usize,
    assignment: Vec<Option<usize>>,
    members: Vec<Vec<TokenId>>,
    pub centroids: Array2<f64>,
    /// Final within-cluster sum of squared distances. NaN for models loaded
    /// from a cluster file, which does not carry it.
    pub sse: f64,
    /// SSE after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

impl ClusterModel {
    /// Build a model from an explicit assignment (vocab id -> cluster, `None`
    /// for specials). Used by fixtures and by the file loader.
    pub fn from_assignment(n: usize, assignment: Vec<Option<usize>>, centroids: Array2<f64>) -> Result<Self> {
        let mut members = vec![Vec::new(); n];
        for (id, a) in assignment.iter().enumerate() {
            match *a {
                Some(c) if c >= n => {
                    return Err(Error::OutOfRange {
                        what: "cluster index",
                        index: c,
                        limit: n,
                    })
                }
                Some(_) if is_special(id as TokenId) => {
                    return Err(Error::config(format!("special id {id} cannot be clustered")))
                }
                None if !is_special(id as TokenId) => {
                    return Err(Error::config(format!("regular id {id} has no cluster")))
                }
                Some(c) => members[c].push(id as TokenId),
                None => {}
            }
        }
        if let Some(j) = members.iter().position(Vec::is_empty) {
            return Err(Error::config(format!("cluster {j} is empty")));
        }
        if centroids.nrows() != n {
            return Err(Error::Shape(format!(
                "{} centroids for {n} clusters",
                centroids.nrows()
            )));
        }
        Ok(Self {
            n,
            assignment,
            members,
            centroids,
            sse: f64::NAN,
            sse_history: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vocab_size(&self) -> usize {
        self.assignment.len()
    }

    /// Cluster of a non-special token.
    pub fn cluster_of(&self, token_id: TokenId) -> Result<usize> {
        if is_special(token_id) {
            return Err(Error::SpecialToken(token_id));
        }
        match self.assignment.get(token_id as usize) {
            Some(Some(c)) => Ok(*c),
            _ => Err(Error::OutOfRange {
                what: "token id",
                index: token_id as usize,
                limit: self.assignment.len(),
            }),
        }
    }

    /// Sorted member ids of cluster `j`.
    pub fn members(&self, j: usize) -> &[TokenId] {
        &self.members[j]
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    /// Header `n V`, then `token_id cluster_index` per vocab id (-1 for
    /// specials), then one centroid per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{} {}", self.n, self.assignment.len())?;
        for (id, a) in self.assignment.iter().enumerate() {
            let c = a.map_or(-1, |c| c as i64);
            writeln!(out, "{id} {c}")?;
        }
        for row in self.centroids.rows() {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let lines: Vec<String> = BufReader::new(fs::File::open(path)?)
            .lines()
            .collect::<std::io::Result<_>>()?;
        let nums = |i: usize| -> Result<Vec<f64>> {
            lines
                .get(i)
                .ok_or_else(|| Error::parse(&name, i + 1, "unexpected end of file"))?
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(&name, i + 1, "bad number"))
        };
        let header = nums(0)?;
        let [n, v] = header[..] else {
            return Err(Error::parse(&name, 1, "header must be `n V`"));
        };
        let (n, v) = (n as usize, v as usize);
        let mut assignment = Vec::with_capacity(v);
        for i in 0..v {
            let row = nums(i + 1)?;
            let [id, c] = row[..] else {
                return Err(Error::parse(&name, i + 2, "expected `token_id cluster_index`"));
            };
            if id as usize != i {
                return Err(Error::parse(&name, i + 2, "token ids must be in order"));
            }
            assignment.push(if c < 0.0 { None } else { Some(c as usize) });
        }
        let mut rows = Vec::with_capacity(n);
        for j in 0..n {
            rows.push(nums(v + 1 + j)?);
        }
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::parse(&name, v + 2, "ragged centroid rows"));
        }
        let centroids =
            Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| Error::parse(&name, v + 2, e.to_string()))?;
        Self::from_assignment(n, assignment, centroids)
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every point, ties to the lower index.
fn assign(points: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    (0..points.nrows())
        .into_par_iter()
        .map(|p| {
            let x = points.row(p);
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(x, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

fn recompute(points: &Array2<f64>, labels: &[usize], centroids: &mut Array2<f64>) -> Vec<usize> {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros(centroids.dim());
    for (p, &j) in labels.iter().enumerate() {
        counts[j] += 1;
        let mut s = sums.row_mut(j);
        s += &points.row(p);
    }
    for (j, &c) in counts.iter().enumerate().take(k) {
        if c > 0 {
            let mean = &sums.row(j) / c as f64;
            centroids.row_mut(j).assign(&mean);
        }
    }
    counts
}

fn sse(points: &Array2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(p, &j)| sq_dist(points.row(p), centroids.row(j)))
        .sum()
}

fn kmeans_pp(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let m = points.nrows();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = (0..m).map(|p| sq_dist(points.row(p), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a chosen center.
            Err(_) => {
                let free: Vec<usize> = (0..m).filter(|p| !chosen.contains(p)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (p, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(p), points.row(next)));
        }
    }
    let mut centroids = Array2::zeros((k, points.ncols()));
    for (j, &p) in chosen.iter().enumerate() {
        centroids.row_mut(j).assign(&points.row(p));
    }
    centroids
}

/// Reseed each empty cluster with the farthest member of the largest one.
fn repair_empty(points: &Array2<f64>, labels: &mut [usize], centroids: &mut Array2<f64>, counts: &mut Vec<usize>) {
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("at least one cluster");
        let far = labels
            .iter()
            .enumerate()
            .filter(|&(_, &j)| j == largest)
            .map(|(p, _)| (p, sq_dist(points.row(p), centroids.row(largest))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(p, _)| p)
            .expect("largest cluster is non-empty");
        labels[far] = empty;
        *counts = recompute(points, labels, centroids);
    }
}

/// Cluster the regular-token rows of `table` into `n` groups.
pub fn kmeans(table: &EmbeddingTable, vocab: &Vocab, n: usize, max_iter: usize, seed: u64) -> Result<ClusterModel> {
    if table.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "embedding table has {} rows for a vocab of {}",
            table.len(),
            vocab.len()
        )));
    }
    let ids: Vec<TokenId> = vocab.regular_ids().collect();
    if n == 0 || n > ids.len() {
        return Err(Error::config(format!(
            "cannot form {n} clusters from {} candidate points",
            ids.len()
        )));
    }
    if max_iter == 0 {
        return Err(Error::config("max_iter must be at least 1"));
    }
    let mut points = Array2::zeros((ids.len(), table.dim()));
    for (p, &id) in ids.iter().enumerate() {
        points.row_mut(p).assign(&table.row(id));
    }

    let mut rng = rng::stream(seed, &[rng::label::KMEANS]);
    let mut centroids = kmeans_pp(&points, n, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let next = assign(&points, &centroids);
        if next == labels {
            break;
        }
        labels = next;
        let mut counts = recompute(&points, &labels, &mut centroids);
        repair_empty(&points, &mut labels, &mut centroids, &mut counts);
        history.push(sse(&points, &labels, &centroids));
    }

    let mut assignment = vec![None; vocab.len()];
    for (p, &id) in ids.iter().enumerate() {
        assignment[id as usize] = Some(labels[p]);
    }
    let mut model = ClusterModel::from_assignment(n, assignment, centroids)?;
    model.sse = *history.last().expect("at least one iteration");
    model.sse_history = history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, NUM_SPECIALS};

    fn vocab_of(n: usize) -> Vocab {
        let words: Vec<String> = (0..n).map(|i| format!("w{i:03}")).collect();
        build_vocab([words.join(" ")], n + NUM_SPECIALS, 1).unwrap()
    }

    fn table(vocab: &Vocab, points: &[[f64; 2]]) -> EmbeddingTable {
        let mut vectors = Array2::zeros((vocab.len(), 2));
        for (p, x) in points.iter().enumerate() {
            vectors.row_mut(NUM_SPECIALS + p).assign(&ArrayView1::from(&x[..]));
        }
        EmbeddingTable {
            vectors,
            trained_epochs: 0,
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let vocab = vocab_of(4);
        let t = table(&vocab, &[[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]]);
        let m = kmeans(&t, &vocab, 4, 10, 1).unwrap();
        assert_eq!(m.sse, 0.0);
        for j in 0..4 {
            assert_eq!(m.members(j).len(), 1);
        }
    }

    #[test]
    fn duplicate_points_still_fill_clusters() {
        let vocab = vocab_of(4);
        let t = table(&vocab, &[[1.0, 1.0]; 4]);
        let m = kmeans(&t, &vocab, 3, 10, 2).unwrap();
        assert!((0..3).all(|j| !m.members(j).is_empty()));
        assert_eq!(m.sse, 0.0);
    }

    #[test]
    fn specials_are_unclustered() {
        let vocab = vocab_of(4);
        let t = table(&vocab, &[[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]]);
        let m = kmeans(&t, &vocab, 2, 10, 1).unwrap();
        assert!(matches!(m.cluster_of(0), Err(Error::SpecialToken(0))));
        for j in 0..m.n() {
            for &id in m.members(j) {
                assert_eq!(m.cluster_of(id).unwrap(), j);
            }
        }
        let covered: usize = (0..m.n()).map(|j| m.members(j).len()).sum();
        assert_eq!(covered, vocab.num_regular());
    }

    #[test]
    fn too_many_clusters() {
        let vocab = vocab_of(3);
        let t = table(&vocab, &[[0.0, 0.0], [1.0, 0.0], [0.0, 5.0]]);
        assert!(kmeans(&t, &vocab, 4, 10, 1).is_err());
        assert!(kmeans(&t, &vocab, 2, 0, 1).is_err());
    }

    #[test]
    fn repair_reseeds_from_largest_cluster() {
        let points = ndarray::array![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]];
        let mut labels = vec![0, 0, 0];
        let mut centroids = ndarray::array![[0.0, 0.0], [100.0, 100.0]];
        let mut counts = recompute(&points, &labels, &mut centroids);
        counts[1] = 0;
        repair_empty(&points, &mut labels, &mut centroids, &mut counts);
        assert_eq!(labels, vec![0, 0, 1]);
        assert_eq!(centroids.row(1).to_vec(), vec![10.0, 0.0]);
        assert_eq!(centroids.row(0).to_vec(), vec![0.5, 0.0]);
    }

    #[test]
    fn file_round_trip() {
        let vocab = vocab_of(6);
        let t = table(
            &vocab,
            &[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0], [9.0, 0.0], [9.0, 0.1]],
        );
        let m = kmeans(&t, &vocab, 3, 20, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.txt");
        m.save(&path).unwrap();
        let back = ClusterModel::load(&path).unwrap();
        assert_eq!(back.assignment(), m.assignment());
        assert_eq!(back.centroids, m.centroids);
        assert!(back.sse.is_nan());
    }
}
