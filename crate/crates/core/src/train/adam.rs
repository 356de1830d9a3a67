use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::TransformerParams;

/// First and second moments plus the number of updates taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: TransformerParams,
    pub v: TransformerParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &TransformerParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut TransformerParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Bias-corrected Adam with decoupled weight decay on weights only.
pub fn adam_step(
    params: &mut TransformerParams,
    grads: &mut TransformerParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    let shrink = 1.0 - lr * cfg.weight_decay;
    let ps = params.tensors_mut();
    let gs = grads.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    if ps.len() != gs.len() || ps.len() != ms.len() || ps.len() != vs.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        if p.data.len() != g.data.len() || p.data.len() != m.data.len() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
        }
        let decay = if p.decay { shrink } else { 1.0 };
        for (((w, &gi), mi), vi) in p
            .data
            .iter_mut()
            .zip(g.data.iter())
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            *w = *w * decay - lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadType, ModelConfig};
    use crate::objectives::Objective;

    fn setup() -> (TransformerParams, TrainConfig) {
        let cfg = ModelConfig::desk(10, 4, HeadType::Binary);
        (TransformerParams::init(&cfg, 0), TrainConfig::base(Objective::Rts))
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, cfg) = setup();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.b_bin[0] = 1.0;
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &mut g,
            &mut s,
            1e-3,
            &TrainConfig {
                weight_decay: 0.0,
                ..cfg
            },
        )
        .unwrap();
        let expected = before.b_bin[0] - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.b_bin[0] - expected).abs() < 1e-18);
        assert_eq!(p.tok_emb, before.tok_emb);
    }

    #[test]
    fn decay_only_touches_weights() {
        let (mut p, cfg) = setup();
        p.lm_b.fill(1.0);
        let before = p.clone();
        let mut g = p.zeros_like();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut g, &mut s, 0.1, &cfg).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert_eq!(p.tok_emb, before.tok_emb.mapv(|x| x * f));
        assert_eq!(p.lm_b, before.lm_b);
        assert_eq!(p.lnf_g, before.lnf_g);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let (mut p, cfg) = setup();
        let mut g = p.zeros_like();
        g.layers[1].w1[[0, 0]] = f64::NAN;
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &mut g, &mut s, 0.1, &cfg).unwrap_err();
        assert!(err.to_string().contains("layers.1.w1"), "{err}");
    }

    #[test]
    fn clipping() {
        let (p, _) = setup();
        let mut g = p.zeros_like();
        g.b_bin[0] = 3.0;
        g.lm_b[0] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
