use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::corpus::{Batch, Vocab};
use crate::crts::CountMatrix;
use crate::error::{Error, Result};
use crate::model::{HeadType, Transformer};
use crate::objectives::{corrupt_crts, corrupt_rts, Objective, ObjectiveConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Detection rate on uniformly drawn replacements.
    pub acc_uniform: f64,
    /// Detection rate on count-matrix replacements at the same positions.
    pub acc_crts: f64,
    pub positions: usize,
}

/// Discriminator detection rate at replaced positions under uniform and
/// count-matrix replacements. Each (pass, batch) pair corrupts with the same
/// seed under both schemes, so both see the same positions.
pub fn probe_hardness(
    model: &Transformer,
    count_matrix: &CountMatrix,
    clusters: &ClusterModel,
    vocab: &Vocab,
    batches: &[Batch],
    passes: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if model.config.head_type != HeadType::Binary {
        return Err(Error::HeadMismatch("hardness probe needs a binary-head model".into()));
    }
    let sampler = count_matrix.sampler(clusters)?;
    let ucfg = ObjectiveConfig::new(Objective::Rts);
    let ccfg = ObjectiveConfig::new(Objective::Crts);
    let (mut hit_u, mut hit_c, mut positions) = (0usize, 0usize, 0usize);
    for p in 0..passes {
        for (i, b) in batches.iter().enumerate() {
            let path = [rng::label::PROBE, 1, p as u64, i as u64];
            let u = corrupt_rts(b, vocab, &ucfg, &mut rng::stream(seed, &path))?;
            let c = corrupt_crts(b, &sampler, &ccfg, &mut rng::stream(seed, &path))?;
            debug_assert_eq!(u.corruption_mask, c.corruption_mask);
            let pu = model.evaluate(&u, false)?.predictions.expect("binary head");
            let pc = model.evaluate(&c, false)?.predictions.expect("binary head");
            for (idx, &m) in u.corruption_mask.indexed_iter() {
                if m {
                    positions += 1;
                    hit_u += usize::from(pu[idx]);
                    hit_c += usize::from(pc[idx]);
                }
            }
        }
    }
    if positions == 0 {
        return Err(Error::config("probe batches contain no replaceable positions"));
    }
    Ok(ProbeReport {
        acc_uniform: hit_u as f64 / positions as f64,
        acc_crts: hit_c as f64 / positions as f64,
        positions,
    })
}
