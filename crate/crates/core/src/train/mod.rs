//! Pre-training loop, optimizer, checkpoints and held-out probes.

mod adam;
mod checkpoint;
mod probe;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Objective, ObjectiveConfig};

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use probe::{probe_hardness, ProbeReport};
pub use trainer::{pretrain_to_dir, EvalReport, MetricsRecord, Pretrainer, StepStats};

/// Total steps of single-network objectives at the base scale.
pub const BASE_TOTAL_STEPS: usize = 900_000;
/// Steps with a generator: 689K at length 128 plus 77K at 512.
pub const GENERATOR_TOTAL_STEPS: usize = 766_000;

/// A 2-layer model on a 2000-step decay barely moves at the base rate.
pub const DESK_PEAK_LR: f64 = 1e-3;

/// Source of replacements when `objective` is SLM-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlmAllSource {
    Uniform,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// `(steps, max_len)` phases run in order; their steps sum to `total_steps`.
    pub seq_len_schedule: Vec<(usize, usize)>,
    pub grad_clip: f64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    /// 0 disables held-out evaluation inside the metrics stream.
    pub eval_every: usize,
    pub held_out_frac: f64,
    /// Weight of the discriminator loss next to the generator's MLM loss.
    pub disc_weight: f64,
    pub gen_temperature: f64,
    pub crts_gamma: f64,
    pub slm_all_source: SlmAllSource,
    /// Record wall-clock time in metrics; off keeps metrics bit-reproducible.
    pub wall_clock: bool,
}

/// Scale a single-network step budget by 766/900 when a generator is
/// trained alongside.
pub fn generator_scaled_steps(steps: usize) -> usize {
    ((steps as u128 * GENERATOR_TOTAL_STEPS as u128 + BASE_TOTAL_STEPS as u128 / 2) / BASE_TOTAL_STEPS as u128) as usize
}

impl TrainConfig {
    /// Base-scale settings: 900K steps (766K with a generator), the last
    /// ninth at length 512, batch 256, peak lr 1e-4 after 10K warm-up steps.
    pub fn base(objective: Objective) -> Self {
        let generator = objective == Objective::TdGen;
        let schedule = if generator {
            vec![(689_000, 128), (77_000, 512)]
        } else {
            vec![(800_000, 128), (100_000, 512)]
        };
        let total = schedule.iter().map(|p| p.0).sum();
        Self {
            peak_lr: 1e-4,
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            warmup_steps: 10_000,
            total_steps: total,
            batch_size: 256,
            weight_decay: 0.01,
            seed: 0,
            objective: ObjectiveConfig::new(objective),
            seq_len_schedule: schedule,
            grad_clip: 1.0,
            log_every: 1000,
            checkpoint_every: 50_000,
            eval_every: 0,
            held_out_frac: 0.05,
            disc_weight: 50.0,
            gen_temperature: 1.0,
            crts_gamma: crate::crts::DEFAULT_GAMMA,
            slm_all_source: SlmAllSource::Uniform,
            wall_clock: false,
        }
    }

    /// Desk scale: peak lr 1e-3, batch 32, 100 warm-up steps, one phase at
    /// `max_len`. With a generator the step budget is scaled by 766/900.
    pub fn desk(objective: Objective, total_steps: usize, max_len: usize) -> Self {
        let total = if objective == Objective::TdGen {
            generator_scaled_steps(total_steps)
        } else {
            total_steps
        };
        Self {
            peak_lr: DESK_PEAK_LR,
            warmup_steps: 100.min(total.saturating_sub(1)),
            total_steps: total,
            batch_size: 32,
            seq_len_schedule: vec![(total, max_len)],
            log_every: 10,
            checkpoint_every: 0,
            ..Self::base(objective)
        }
    }

    pub fn needs_generator(&self) -> bool {
        self.objective.objective == Objective::TdGen
            || (self.objective.objective == Objective::SlmAll && self.slm_all_source == SlmAllSource::Generator)
    }

    pub fn max_len_at(&self, step: usize) -> usize {
        let mut end = 0;
        for &(steps, len) in &self.seq_len_schedule {
            end += steps;
            if step < end {
                return len;
            }
        }
        self.seq_len_schedule.last().map_or(0, |p| p.1)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config("need 0 <= warmup_steps < total_steps"));
        }
        let rates = [
            self.peak_lr,
            self.adam_eps,
            self.grad_clip,
            self.gen_temperature,
            self.crts_gamma,
        ];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) || self.weight_decay < 0.0 || self.disc_weight < 0.0 {
            return Err(Error::config(
                "learning rate, eps, clip, temperature and gamma must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        if !(self.held_out_frac > 0.0 && self.held_out_frac < 1.0) {
            return Err(Error::config("held_out_frac must lie in (0, 1)"));
        }
        let phases: usize = self.seq_len_schedule.iter().map(|p| p.0).sum();
        if phases != self.total_steps || self.seq_len_schedule.iter().any(|p| p.1 < 3) {
            return Err(Error::config(format!(
                "seq_len_schedule covers {phases} steps, total_steps is {}",
                self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        cfg.peak_lr * (step as f64 / cfg.warmup_steps as f64)
    } else if step >= cfg.total_steps {
        0.0
    } else {
        cfg.peak_lr * ((cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64)
    }
}
