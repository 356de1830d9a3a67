//! Corruption pipelines producing training examples for every pre-training
//! objective.
//!
//! Each pipeline first picks the positions to corrupt for every row of the
//! batch, and only then draws replacements. Two pipelines fed identically
//! seeded streams therefore corrupt the same positions.
//!
//! | objective | replacement             | head   | loss positions |
//! |-----------|-------------------------|--------|----------------|
//! | MLM       | 80% MASK / 10% random   | LM     | selected       |
//! | RTS       | uniform random          | binary | all non-PAD    |
//! | C-RTS     | count-matrix sampler    | binary | all non-PAD    |
//! | SLM       | uniform random          | LM     | selected       |
//! | SLM-all   | any of RTS/C-RTS/TD     | LM     | all non-PAD    |
//! | TD        | generator sample        | binary | all non-PAD    |

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_special, Batch, TokenId, Vocab, MASK, NUM_SPECIALS};
use crate::crts::ReplacementSampler;
use crate::error::{Error, Result};
use crate::model::{HeadType, Transformer};

/// Label for positions that do not contribute to the loss. Never a vocab id.
pub const IGNORE_LABEL: i64 = -100;

pub const DEFAULT_REPLACE_RATE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    Mlm,
    Rts,
    Crts,
    Slm,
    SlmAll,
    TdGen,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Mlm,
        Objective::Rts,
        Objective::Crts,
        Objective::Slm,
        Objective::SlmAll,
        Objective::TdGen,
    ];

    /// Head the (discriminating) network needs for this objective.
    pub fn head(self) -> HeadType {
        match self {
            Objective::Rts | Objective::Crts | Objective::TdGen => HeadType::Binary,
            Objective::Mlm | Objective::Slm | Objective::SlmAll => HeadType::Lm,
        }
    }

    /// Whether the loss covers every non-PAD position.
    pub fn whole_output_loss(self) -> bool {
        !matches!(self, Objective::Mlm | Objective::Slm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Rts => "rts",
            Objective::Crts => "crts",
            Objective::Slm => "slm",
            Objective::SlmAll => "slm_all",
            Objective::TdGen => "td_gen",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::config(format!("unknown objective `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub replace_rate: f64,
    pub mlm_mask_frac: f64,
    pub mlm_random_frac: f64,
    pub seed: u64,
}

impl ObjectiveConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            replace_rate: DEFAULT_REPLACE_RATE,
            mlm_mask_frac: 0.8,
            mlm_random_frac: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.replace_rate > 0.0 && self.replace_rate < 1.0) {
            return Err(Error::config("replace_rate must lie in (0, 1)"));
        }
        if self.mlm_mask_frac < 0.0 || self.mlm_random_frac < 0.0 || self.mlm_mask_frac + self.mlm_random_frac > 1.0 {
            return Err(Error::config("MLM fractions must be non-negative and sum to at most 1"));
        }
        Ok(())
    }
}

/// Cluster pair behind one C-RTS replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub row: usize,
    pub pos: usize,
    pub source_cluster: usize,
    pub target_cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedBatch {
    pub input_ids: Array2<TokenId>,
    pub original_ids: Array2<TokenId>,
    /// Where the input was altered; for MLM, every selected position.
    pub corruption_mask: Array2<bool>,
    pub labels: Array2<i64>,
    pub loss_mask: Array2<bool>,
    pub attention_mask: Array2<bool>,
    pub objective: Objective,
    /// Filled by C-RTS only.
    pub replacements: Vec<ReplacementRecord>,
}

impl CorruptedBatch {
    fn identity(batch: &Batch, objective: Objective) -> Self {
        Self {
            input_ids: batch.ids.clone(),
            original_ids: batch.ids.clone(),
            corruption_mask: Array2::from_elem(batch.ids.dim(), false),
            labels: Array2::from_elem(batch.ids.dim(), IGNORE_LABEL),
            loss_mask: Array2::from_elem(batch.ids.dim(), false),
            attention_mask: batch.attention_mask.clone(),
            objective,
            replacements: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.input_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.ncols()
    }

    /// Binary labels (1 = replaced) over all non-PAD positions.
    fn set_detection_targets(&mut self) {
        for ((l, &c), &a) in self
            .labels
            .iter_mut()
            .zip(self.corruption_mask.iter())
            .zip(self.attention_mask.iter())
        {
            *l = if a { i64::from(c) } else { IGNORE_LABEL };
        }
        self.loss_mask.assign(&self.attention_mask);
    }

    /// Original ids at the selected positions only.
    fn set_selected_targets(&mut self) {
        for ((l, &c), &o) in self
            .labels
            .iter_mut()
            .zip(self.corruption_mask.iter())
            .zip(self.original_ids.iter())
        {
            *l = if c { i64::from(o) } else { IGNORE_LABEL };
        }
        self.loss_mask.assign(&self.corruption_mask);
    }

    /// Number of loss positions.
    pub fn loss_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Exactly `round(rate * E)` distinct positions (at least one when `E > 0`)
/// among the `E` non-special, non-PAD positions of a row, sorted.
pub fn select_positions(
    ids: ArrayView1<TokenId>,
    attention: ArrayView1<bool>,
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let eligible: Vec<usize> = ids
        .iter()
        .zip(attention.iter())
        .enumerate()
        .filter(|&(_, (&id, &a))| a && !is_special(id))
        .map(|(p, _)| p)
        .collect();
    let e = eligible.len();
    if e == 0 {
        return Vec::new();
    }
    let k = ((rate * e as f64).round() as usize).clamp(1, e);
    let mut picked: Vec<usize> = index::sample(rng, e, k).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    picked
}

fn select_all(ids: ArrayView2<TokenId>, attention: ArrayView2<bool>, rate: f64, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    ids.rows()
        .into_iter()
        .zip(attention.rows())
        .map(|(r, a)| select_positions(r, a, rate, rng))
        .collect()
}

/// Uniform regular id different from `original`.
fn uniform_other(vocab_len: usize, original: TokenId, rng: &mut impl Rng) -> TokenId {
    let regular = vocab_len - NUM_SPECIALS;
    let mut t = (NUM_SPECIALS + rng.random_range(0..regular - 1)) as TokenId;
    if !is_special(original) && t >= original {
        t += 1;
    }
    t
}

fn check_vocab(vocab: &Vocab) -> Result<()> {
    if vocab.num_regular() < 2 {
        return Err(Error::config("corruption needs at least two regular tokens"));
    }
    Ok(())
}

fn replace_uniform(
    batch: &Batch,
    vocab: &Vocab,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
    tag: Objective,
) -> Result<CorruptedBatch> {
    check_vocab(vocab)?;
    let mut cb = CorruptedBatch::identity(batch, tag);
    let positions = select_all(batch.ids.view(), batch.attention_mask.view(), cfg.replace_rate, rng);
    for (r, ps) in positions.iter().enumerate() {
        for &p in ps {
            cb.input_ids[[r, p]] = uniform_other(vocab.len(), cb.original_ids[[r, p]], rng);
            cb.corruption_mask[[r, p]] = true;
        }
    }
    Ok(cb)
}

/// Random token substitution: binary original/replaced targets on every
/// non-PAD position.
pub fn corrupt_rts(batch: &Batch, vocab: &Vocab, cfg: &ObjectiveConfig, rng: &mut impl Rng) -> Result<CorruptedBatch> {
    let mut cb = replace_uniform(batch, vocab, cfg, rng, Objective::Rts)?;
    cb.set_detection_targets();
    Ok(cb)
}

/// Random token substitution driven by the count-matrix sampler.
pub fn corrupt_crts(
    batch: &Batch,
    sampler: &ReplacementSampler<'_>,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<CorruptedBatch> {
    let clusters = sampler.clusters();
    if clusters.vocab_size() - NUM_SPECIALS < 2 {
        return Err(Error::config("corruption needs at least two regular tokens"));
    }
    if let Some(&max) = batch.ids.iter().max() {
        if max as usize >= clusters.vocab_size() {
            return Err(Error::Shape("batch ids exceed the clustered vocabulary".into()));
        }
    }
    let mut cb = CorruptedBatch::identity(batch, Objective::Crts);
    let positions = select_all(batch.ids.view(), batch.attention_mask.view(), cfg.replace_rate, rng);
    for (r, ps) in positions.iter().enumerate() {
        for &p in ps {
            let rep = sampler.sample(cb.original_ids[[r, p]], rng)?;
            cb.input_ids[[r, p]] = rep.token;
            cb.corruption_mask[[r, p]] = true;
            cb.replacements.push(ReplacementRecord {
                row: r,
                pos: p,
                source_cluster: rep.source_cluster,
                target_cluster: rep.target_cluster,
            });
        }
    }
    cb.set_detection_targets();
    Ok(cb)
}

/// Swapped language model: uniform replacements, never MASK; predict the
/// original token at the replaced positions.
pub fn corrupt_slm(batch: &Batch, vocab: &Vocab, cfg: &ObjectiveConfig, rng: &mut impl Rng) -> Result<CorruptedBatch> {
    let mut cb = replace_uniform(batch, vocab, cfg, rng, Objective::Slm)?;
    cb.set_selected_targets();
    Ok(cb)
}

/// BERT-style masking: of the selected positions, `mlm_mask_frac` become
/// MASK, `mlm_random_frac` a random other token, the rest stay unchanged.
pub fn corrupt_mlm(batch: &Batch, vocab: &Vocab, cfg: &ObjectiveConfig, rng: &mut impl Rng) -> Result<CorruptedBatch> {
    check_vocab(vocab)?;
    cfg.validate()?;
    let mut cb = CorruptedBatch::identity(batch, Objective::Mlm);
    let positions = select_all(batch.ids.view(), batch.attention_mask.view(), cfg.replace_rate, rng);
    for (r, ps) in positions.iter().enumerate() {
        for &p in ps {
            let u: f64 = rng.random();
            if u < cfg.mlm_mask_frac {
                cb.input_ids[[r, p]] = MASK;
            } else if u < cfg.mlm_mask_frac + cfg.mlm_random_frac {
                cb.input_ids[[r, p]] = uniform_other(vocab.len(), cb.original_ids[[r, p]], rng);
            }
            cb.corruption_mask[[r, p]] = true;
        }
    }
    cb.set_selected_targets();
    Ok(cb)
}

/// Turn a replaced-token batch into whole-sentence reconstruction targets.
pub fn targets_slm_all(cb: &CorruptedBatch) -> Result<CorruptedBatch> {
    if cb.objective == Objective::Mlm || cb.input_ids.iter().any(|&id| id == MASK) {
        return Err(Error::SlmAllForbidsMask);
    }
    let mut out = cb.clone();
    for ((l, &o), &a) in out
        .labels
        .iter_mut()
        .zip(out.original_ids.iter())
        .zip(out.attention_mask.iter())
    {
        *l = if a { i64::from(o) } else { IGNORE_LABEL };
    }
    out.loss_mask.assign(&out.attention_mask);
    out.objective = Objective::SlmAll;
    Ok(out)
}

/// Generator input: every selected position is masked, with MLM targets.
pub fn mask_for_generator(batch: &Batch, cfg: &ObjectiveConfig, rng: &mut impl Rng) -> CorruptedBatch {
    let mut cb = CorruptedBatch::identity(batch, Objective::Mlm);
    let positions = select_all(batch.ids.view(), batch.attention_mask.view(), cfg.replace_rate, rng);
    for (r, ps) in positions.iter().enumerate() {
        for &p in ps {
            cb.input_ids[[r, p]] = MASK;
            cb.corruption_mask[[r, p]] = true;
        }
    }
    cb.set_selected_targets();
    cb
}

/// Sample a replacement at every masked position from generator logits
/// (`rows*len × V`). Sampling is restricted to regular tokens; a
/// temperature of zero takes the argmax. A sample equal to the original
/// leaves the position uncorrupted with label 0.
pub fn replace_from_logits(
    masked: &CorruptedBatch,
    logits: ArrayView2<f64>,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<CorruptedBatch> {
    let (b, l) = masked.input_ids.dim();
    let v = logits.ncols();
    if logits.nrows() != b * l || v <= NUM_SPECIALS + 1 {
        return Err(Error::Shape(format!(
            "generator logits {:?} do not match batch {b}x{l}",
            logits.dim()
        )));
    }
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::config("temperature must be non-negative"));
    }
    let mut cb = CorruptedBatch::identity(
        &Batch {
            ids: masked.original_ids.clone(),
            attention_mask: masked.attention_mask.clone(),
            lengths: Vec::new(),
        },
        Objective::TdGen,
    );
    let mut probs = vec![0.0; v - NUM_SPECIALS];
    for r in 0..b {
        for p in 0..l {
            if !masked.corruption_mask[[r, p]] {
                continue;
            }
            let row = logits.row(r * l + p);
            let scores = &row.as_slice().expect("contiguous logits")[NUM_SPECIALS..];
            let pick = if temperature == 0.0 {
                scores
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &s)| if s > best.1 { (i, s) } else { best },
                    )
                    .0
            } else {
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (q, &s) in probs.iter_mut().zip(scores) {
                    *q = ((s - m) / temperature).exp();
                    z += *q;
                }
                let u = rng.random::<f64>() * z;
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, &q) in probs.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            let token = (NUM_SPECIALS + pick) as TokenId;
            if token != cb.original_ids[[r, p]] {
                cb.input_ids[[r, p]] = token;
                cb.corruption_mask[[r, p]] = true;
            }
        }
    }
    cb.set_detection_targets();
    Ok(cb)
}

/// Token detection with a learned generator: mask, run the generator, and
/// sample replacements from its output distribution.
pub fn corrupt_with_generator(
    batch: &Batch,
    generator: &Transformer,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
    temperature: f64,
) -> Result<CorruptedBatch> {
    if generator.config.head_type != HeadType::Lm {
        return Err(Error::HeadMismatch("generator needs an LM head".into()));
    }
    if let Some(&max) = batch.ids.iter().max() {
        if max as usize >= generator.config.vocab_size {
            return Err(Error::Shape(format!(
                "token id {max} outside generator vocabulary of {}",
                generator.config.vocab_size
            )));
        }
    }
    let masked = mask_for_generator(batch, cfg, rng);
    let out = generator.forward(masked.input_ids.view(), masked.attention_mask.view())?;
    let logits = out
        .logits
        .view()
        .into_shape_with_order((batch.rows() * batch.max_len(), generator.config.vocab_size))
        .map_err(|e| Error::Shape(e.to_string()))?;
    replace_from_logits(&masked, logits, temperature, rng)
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    objective: Objective,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DumpRow {
    input_ids: Vec<TokenId>,
    original_ids: Vec<TokenId>,
    labels: Vec<i64>,
    corruption_mask: Vec<u8>,
    loss_mask: Vec<u8>,
    attention_mask: Vec<u8>,
}

fn bits(v: ArrayView1<bool>) -> Vec<u8> {
    v.iter().map(|&b| u8::from(b)).collect()
}

/// Line-delimited JSON: one header record, then one record per row.
pub fn write_dump(out: &mut impl Write, cb: &CorruptedBatch, seed: u64) -> Result<()> {
    serde_json::to_writer(
        &mut *out,
        &DumpHeader {
            objective: cb.objective,
            seed,
        },
    )?;
    writeln!(out)?;
    for r in 0..cb.rows() {
        let row = DumpRow {
            input_ids: cb.input_ids.row(r).to_vec(),
            original_ids: cb.original_ids.row(r).to_vec(),
            labels: cb.labels.row(r).to_vec(),
            corruption_mask: bits(cb.corruption_mask.row(r)),
            loss_mask: bits(cb.loss_mask.row(r)),
            attention_mask: bits(cb.attention_mask.row(r)),
        };
        serde_json::to_writer(&mut *out, &row)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Inverse of [`write_dump`]; C-RTS replacement records are not dumped.
pub fn read_dump(input: impl BufRead) -> Result<(CorruptedBatch, u64)> {
    let mut lines = input.lines();
    let header: DumpHeader = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| Error::parse("dump", 1, "missing header"))??,
    )?;
    let rows: Vec<DumpRow> = lines.map(|l| Ok(serde_json::from_str(&l?)?)).collect::<Result<_>>()?;
    let l = rows.first().map_or(0, |r| r.input_ids.len());
    let b = rows.len();
    let mat = |f: &dyn Fn(&DumpRow) -> Vec<i64>| -> Result<Array2<i64>> {
        let flat: Vec<i64> = rows.iter().flat_map(f).collect();
        Array2::from_shape_vec((b, l), flat).map_err(|e| Error::Shape(e.to_string()))
    };
    let ids = |f: &dyn Fn(&DumpRow) -> &Vec<TokenId>| mat(&|r| f(r).iter().map(|&x| i64::from(x)).collect());
    let mask = |f: &dyn Fn(&DumpRow) -> &Vec<u8>| mat(&|r| f(r).iter().map(|&x| i64::from(x)).collect());
    let cb = CorruptedBatch {
        input_ids: ids(&|r| &r.input_ids)?.mapv(|x| x as TokenId),
        original_ids: ids(&|r| &r.original_ids)?.mapv(|x| x as TokenId),
        corruption_mask: mask(&|r| &r.corruption_mask)?.mapv(|x| x != 0),
        labels: mat(&|r| r.labels.clone())?,
        loss_mask: mask(&|r| &r.loss_mask)?.mapv(|x| x != 0),
        attention_mask: mask(&|r| &r.attention_mask)?.mapv(|x| x != 0),
        objective: header.objective,
        replacements: Vec::new(),
    };
    Ok((cb, header.seed))
}
