use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::fingerprint;
use super::{adam_step, clip_global_norm, lr_at, AdamState, Checkpoint, SlmAllSource, TrainConfig};
use crate::cluster::ClusterModel;
use crate::corpus::{is_special, pack_batches, Batch, TokenSequence, Vocab};
use crate::crts::{CountMatrix, OutcomeDelta, OutcomeEvent};
use crate::error::{Error, Result};
use crate::model::{HeadType, ModelConfig, Transformer};
use crate::objectives::{
    corrupt_crts, corrupt_mlm, corrupt_rts, corrupt_slm, mask_for_generator, replace_from_logits, targets_slm_all,
    CorruptedBatch, Objective,
};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Steps completed after this update.
    pub step: usize,
    pub loss: f64,
    pub generator_loss: Option<f64>,
    pub positions: usize,
    pub correct: usize,
    pub replaced: usize,
    pub replaced_correct: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub batches: usize,
    /// Mean loss over loss positions.
    pub loss: f64,
    pub replaced_positions: usize,
    /// Mean per-position loss at replaced positions.
    pub replaced_loss: f64,
    pub replaced_accuracy: f64,
    /// Binary heads: mean of the detection rates on replaced and on
    /// original non-special positions.
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_loss: Option<f64>,
    /// Binary objectives: accuracy over all loss positions of the batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator_accuracy: Option<f64>,
    /// LM objectives: argmax accuracy at replaced (or masked) positions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replaced_accuracy: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out: Option<EvalReport>,
}

struct Packed {
    train: Vec<Batch>,
    held_out: Vec<Batch>,
}

/// Stateful pre-training run over a fixed corpus.
pub struct Pretrainer<'a> {
    cfg: TrainConfig,
    vocab: Vocab,
    clusters: Option<&'a ClusterModel>,
    model: Transformer,
    optimizer: AdamState,
    generator: Option<(Transformer, AdamState)>,
    count_matrix: Option<CountMatrix>,
    step: usize,
    fingerprint: String,
    packs: BTreeMap<usize, Packed>,
    started: Instant,
}

fn corpus_digest(seqs: &[TokenSequence]) -> String {
    let mut h = Sha256::new();
    for s in seqs {
        for id in &s.ids {
            h.update(id.to_le_bytes());
        }
        h.update(u32::MAX.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl<'a> Pretrainer<'a> {
    /// `generator_cfg` defaults to the desk generator when the objective
    /// needs one.
    pub fn new(
        seqs: &[TokenSequence],
        vocab: &Vocab,
        model_cfg: ModelConfig,
        generator_cfg: Option<ModelConfig>,
        cfg: TrainConfig,
        clusters: Option<&'a ClusterModel>,
    ) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        let objective = cfg.objective.objective;
        if model_cfg.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        if model_cfg.head_type != objective.head() {
            return Err(Error::HeadMismatch(format!(
                "{objective} trains a {} head, model config has {}",
                objective.head(),
                model_cfg.head_type
            )));
        }
        if objective == Objective::Crts {
            let c = clusters.ok_or_else(|| Error::MissingDependency("C-RTS needs a cluster model".into()))?;
            if c.vocab_size() != vocab.len() {
                return Err(Error::config("cluster model does not cover the vocabulary"));
            }
        }
        let longest = cfg.seq_len_schedule.iter().map(|p| p.1).max().unwrap_or(0);
        if longest > model_cfg.max_len {
            return Err(Error::config(format!(
                "schedule length {longest} exceeds model max_len {}",
                model_cfg.max_len
            )));
        }

        let generator = if cfg.needs_generator() {
            let gcfg = generator_cfg.unwrap_or_else(|| ModelConfig::desk_generator(vocab.len(), model_cfg.max_len));
            gcfg.validate()?;
            if gcfg.head_type != HeadType::Lm || gcfg.vocab_size != vocab.len() || gcfg.max_len < longest {
                return Err(Error::HeadMismatch(
                    "generator must be an LM model over the same vocabulary".into(),
                ));
            }
            let g = Transformer::new(gcfg, rng::derive_seed(cfg.seed, &[rng::label::GENERATOR]))?;
            let opt = AdamState::new(&g.params);
            Some((g, opt))
        } else {
            None
        };

        let mut packs = BTreeMap::new();
        for &(_, len) in &cfg.seq_len_schedule {
            if packs.contains_key(&len) {
                continue;
            }
            let mut train = pack_batches(seqs.iter().cloned(), len, cfg.batch_size, cfg.seed)?;
            let held = ((train.len() as f64 * cfg.held_out_frac).ceil() as usize).max(1);
            if train.len() <= held {
                return Err(Error::config(format!(
                    "corpus packs into {} batches at length {len}; too few to hold out {held}",
                    train.len()
                )));
            }
            let held_out = train.split_off(train.len() - held);
            packs.insert(len, Packed { train, held_out });
        }

        let model = Transformer::new(model_cfg, cfg.seed)?;
        let optimizer = AdamState::new(&model.params);
        let count_matrix = match (objective, clusters) {
            (Objective::Crts, Some(c)) => Some(CountMatrix::new(c.n(), cfg.crts_gamma)?),
            _ => None,
        };
        let assignment = clusters.map(|c| c.assignment().to_vec());
        let fingerprint = fingerprint(&[
            &model.config,
            &generator.as_ref().map(|g| g.0.config.clone()),
            &cfg,
            &vocab.meta().corpus_hash,
            &corpus_digest(seqs),
            &assignment,
        ]);
        Ok(Self {
            cfg,
            vocab: vocab.clone(),
            clusters,
            model,
            optimizer,
            generator,
            count_matrix,
            step: 0,
            fingerprint,
            packs,
            started: Instant::now(),
        })
    }

    /// Continue from `ck`; the run's inputs and configs must match the ones
    /// that produced it.
    pub fn resume(
        ck: Checkpoint,
        seqs: &[TokenSequence],
        vocab: &Vocab,
        clusters: Option<&'a ClusterModel>,
    ) -> Result<Self> {
        let gcfg = ck.generator.as_ref().map(|g| g.0.config.clone());
        let mut t = Self::new(
            seqs,
            vocab,
            ck.model.config.clone(),
            gcfg,
            ck.train_config.clone(),
            clusters,
        )?;
        if t.fingerprint != ck.fingerprint {
            return Err(Error::CheckpointMismatch(
                "configuration or inputs differ from the checkpointed run".into(),
            ));
        }
        if ck.step > t.cfg.total_steps || ck.seed != t.cfg.seed {
            return Err(Error::CheckpointMismatch(
                "step or seed out of range for this run".into(),
            ));
        }
        if t.count_matrix.is_some() != ck.count_matrix.is_some() || t.generator.is_some() != ck.generator.is_some() {
            return Err(Error::CheckpointMismatch(
                "checkpoint state does not match the objective".into(),
            ));
        }
        t.model = ck.model;
        t.optimizer = ck.optimizer;
        t.generator = ck.generator;
        t.count_matrix = ck.count_matrix;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            seed: self.cfg.seed,
            train_config: self.cfg.clone(),
            fingerprint: self.fingerprint.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            generator: self.generator.clone(),
            count_matrix: self.count_matrix.clone(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn generator(&self) -> Option<&Transformer> {
        self.generator.as_ref().map(|g| &g.0)
    }

    pub fn count_matrix(&self) -> Option<&CountMatrix> {
        self.count_matrix.as_ref()
    }

    pub fn train_batches(&self, max_len: usize) -> &[Batch] {
        self.packs.get(&max_len).map_or(&[], |p| &p.train)
    }

    /// Held-out batches for the sequence length active at the current step.
    pub fn held_out(&self) -> &[Batch] {
        let len = self
            .cfg
            .max_len_at(self.step.min(self.cfg.total_steps.saturating_sub(1)));
        self.packs.get(&len).map_or(&[], |p| &p.held_out)
    }

    fn batch_for(&self, step: usize) -> &Batch {
        let len = self.cfg.max_len_at(step);
        let train = &self.packs[&len].train;
        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let epoch = (step / n) as u64;
        order.shuffle(&mut rng::stream(
            self.cfg.seed,
            &[rng::label::PACK, 1 + epoch, len as u64],
        ));
        &train[order[step % n]]
    }

    /// Corrupt `batch` with the run's objective, using the current generator
    /// and count matrix. Also returns the generator's MLM batch.
    fn corrupt(&self, batch: &Batch, r: &mut StreamRng) -> Result<(CorruptedBatch, Option<CorruptedBatch>)> {
        let ocfg = &self.cfg.objective;
        let with_generator = |r: &mut StreamRng| -> Result<(CorruptedBatch, CorruptedBatch)> {
            let (g, _) = self.generator.as_ref().expect("generator objectives carry a generator");
            let masked = mask_for_generator(batch, ocfg, r);
            let out = g.forward(masked.input_ids.view(), masked.attention_mask.view())?;
            let (b, l, v) = out.logits.dim();
            let flat = out
                .logits
                .into_shape_with_order((b * l, v))
                .map_err(|e| Error::Shape(e.to_string()))?;
            let cb = replace_from_logits(&masked, flat.view(), self.cfg.gen_temperature, r)?;
            Ok((cb, masked))
        };
        Ok(match ocfg.objective {
            Objective::Mlm => (corrupt_mlm(batch, &self.vocab, ocfg, r)?, None),
            Objective::Rts => (corrupt_rts(batch, &self.vocab, ocfg, r)?, None),
            Objective::Slm => (corrupt_slm(batch, &self.vocab, ocfg, r)?, None),
            Objective::Crts => {
                let cm = self.count_matrix.as_ref().expect("C-RTS carries a count matrix");
                let sampler = cm.sampler(self.clusters.expect("checked in new"))?;
                (corrupt_crts(batch, &sampler, ocfg, r)?, None)
            }
            Objective::SlmAll => match self.cfg.slm_all_source {
                SlmAllSource::Uniform => (targets_slm_all(&corrupt_rts(batch, &self.vocab, ocfg, r)?)?, None),
                SlmAllSource::Generator => {
                    let (cb, masked) = with_generator(r)?;
                    (targets_slm_all(&cb)?, Some(masked))
                }
            },
            Objective::TdGen => {
                let (cb, masked) = with_generator(r)?;
                (cb, Some(masked))
            }
        })
    }

    fn corrupted_at(&self, step: usize) -> Result<(CorruptedBatch, Option<CorruptedBatch>)> {
        let mut r = rng::stream(self.cfg.seed, &[rng::label::CORRUPT, step as u64]);
        self.corrupt(self.batch_for(step), &mut r)
    }

    /// The corrupted batch the update at 0-based `step` trains on, under the
    /// current generator and count matrix.
    pub fn corrupted_batch(&self, step: usize) -> Result<CorruptedBatch> {
        Ok(self.corrupted_at(step)?.0)
    }

    /// Run one optimizer update.
    pub fn train_step(&mut self) -> Result<StepStats> {
        if self.step >= self.cfg.total_steps {
            return Err(Error::config("run already reached total_steps"));
        }
        let t = self.step;
        let lr = lr_at(t + 1, &self.cfg);
        let (cb, masked) = self.corrupted_at(t)?;

        let mut generator_loss = None;
        if let (Some(masked), Some((g, opt))) = (masked, self.generator.as_mut()) {
            let out = g.loss_and_grad(&masked)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("generator loss at step {t}")));
            }
            let mut grads = out.grads.expect("requested");
            clip_global_norm(&mut grads, self.cfg.grad_clip);
            adam_step(&mut g.params, &mut grads, opt, lr, &self.cfg)?;
            generator_loss = Some(out.loss);
        }

        let out = self.model.loss_and_grad(&cb)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {t}")));
        }
        let mut grads = out.grads.expect("requested");
        if self.cfg.objective.objective == Objective::TdGen {
            grads.scale(self.cfg.disc_weight);
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        adam_step(&mut self.model.params, &mut grads, &mut self.optimizer, lr, &self.cfg)?;

        if let Some(cm) = self.count_matrix.as_mut() {
            let preds = out.predictions.as_ref().expect("binary head");
            let delta: OutcomeDelta = cb
                .replacements
                .iter()
                .map(|rep| OutcomeEvent {
                    source_cluster: rep.source_cluster,
                    target_cluster: rep.target_cluster,
                    discriminator_correct: preds[[rep.row, rep.pos]],
                })
                .collect();
            cm.update_counts(&delta)?;
        }

        let replaced = cb.corruption_mask.iter().filter(|&&c| c).count();
        let replaced_correct = cb
            .corruption_mask
            .iter()
            .zip(out.hits.iter())
            .filter(|&(&c, &h)| c && h)
            .count();
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: out.loss,
            generator_loss,
            positions: out.positions,
            correct: out.correct,
            replaced,
            replaced_correct,
            lr,
            grad_norm,
        })
    }

    fn record(&self, s: &StepStats) -> MetricsRecord {
        let binary = self.model.config.head_type == HeadType::Binary;
        MetricsRecord {
            step: s.step,
            loss: s.loss,
            generator_loss: s.generator_loss,
            discriminator_accuracy: binary.then(|| ratio(s.correct, s.positions)),
            replaced_accuracy: (!binary).then(|| ratio(s.replaced_correct, s.replaced)),
            lr: s.lr,
            wall_ms: if self.cfg.wall_clock {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
            held_out: None,
        }
    }

    /// Train until `until` steps are complete (capped at `total_steps`),
    /// passing a metrics record to `sink` every `log_every` steps.
    pub fn run_until(&mut self, until: usize, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while self.step < until {
            let s = self.train_step()?;
            let eval_now = self.cfg.eval_every > 0 && s.step % self.cfg.eval_every == 0;
            if s.step % self.cfg.log_every == 0 || s.step == self.cfg.total_steps || eval_now {
                let mut rec = self.record(&s);
                if eval_now {
                    rec.held_out = Some(self.evaluate_held_out(1)?);
                }
                sink(&rec)?;
            }
        }
        Ok(())
    }

    /// Held-out evaluation with the run's own corruption, `passes` times over
    /// the held-out batches with fresh corruption seeds. Independent of the
    /// training step, so repeated calls agree.
    pub fn evaluate_held_out(&self, passes: usize) -> Result<EvalReport> {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut rep_loss = 0.0;
        let mut rep_n = 0usize;
        let mut rep_hit = 0usize;
        let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
        let mut batches = 0;
        let binary = self.model.config.head_type == HeadType::Binary;
        for p in 0..passes {
            for (i, b) in self.held_out().iter().enumerate() {
                let mut r = rng::stream(self.cfg.seed, &[rng::label::PROBE, 0, p as u64, i as u64]);
                let (cb, _) = self.corrupt(b, &mut r)?;
                let out = self.model.evaluate(&cb, false)?;
                batches += 1;
                loss_sum += out.position_loss.sum();
                loss_n += out.positions;
                for (idx, &c) in cb.corruption_mask.indexed_iter() {
                    if c && cb.loss_mask[idx] {
                        rep_n += 1;
                        rep_loss += out.position_loss[idx];
                        rep_hit += usize::from(out.hits[idx]);
                    }
                }
                if let Some(pred) = out.predictions.as_ref() {
                    for (idx, &c) in cb.corruption_mask.indexed_iter() {
                        if !cb.attention_mask[idx] || is_special(cb.original_ids[idx]) {
                            continue;
                        }
                        if c {
                            pos += 1;
                            tp += usize::from(pred[idx]);
                        } else {
                            neg += 1;
                            tn += usize::from(!pred[idx]);
                        }
                    }
                }
            }
        }
        Ok(EvalReport {
            batches,
            loss: ratio_f(loss_sum, loss_n),
            replaced_positions: rep_n,
            replaced_loss: ratio_f(rep_loss, rep_n),
            replaced_accuracy: ratio(rep_hit, rep_n),
            balanced_accuracy: binary.then(|| 0.5 * (ratio(tp, pos) + ratio(tn, neg))),
        })
    }
}

fn ratio_f(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Train a full run, writing `metrics.jsonl`, periodic `step-N.ckpt` files
/// and `final.ckpt` into `out_dir`.
pub fn pretrain_to_dir(trainer: &mut Pretrainer<'_>, out_dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(out_dir)?;
    let mut metrics = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?,
    );
    let total = trainer.config().total_steps;
    let every = trainer.config().checkpoint_every;
    while trainer.step() < total {
        let next = trainer
            .step()
            .checked_div(every)
            .map_or(total, |k| ((k + 1) * every).min(total));
        trainer.run_until(next, &mut |rec| {
            serde_json::to_writer(&mut metrics, rec)?;
            writeln!(metrics)?;
            Ok(())
        })?;
        metrics.flush()?;
        if every > 0 && trainer.step().is_multiple_of(every) && trainer.step() < total {
            trainer
                .checkpoint()
                .save(&out_dir.join(format!("step-{}.ckpt", trainer.step())))?;
        }
    }
    let ck = trainer.checkpoint();
    ck.save(&out_dir.join("final.ckpt"))?;
    Ok(ck)
}
