use ndarray::{s, Array1, Array2, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use super::forward::Encoded;
use super::ops::{gelu_grad, layer_norm_backward, sigmoid, softplus};
use super::{HeadType, Transformer, TransformerParams};
use crate::error::{Error, Result};
use crate::objectives::CorruptedBatch;

pub struct LossOutput {
    /// Mean over loss positions; 0 when there are none.
    pub loss: f64,
    pub positions: usize,
    /// Loss positions where the thresholded binary prediction, or the LM
    /// argmax, equals the label.
    pub correct: usize,
    /// Binary head only: `sigmoid(logit) > 0.5` at every position.
    pub predictions: Option<Array2<bool>>,
    /// Per-position correctness; false off the loss mask.
    pub hits: Array2<bool>,
    /// Per-position loss; zero off the loss mask.
    pub position_loss: Array2<f64>,
    pub grads: Option<TransformerParams>,
}

/// `sigmoid(logit) > threshold` per position of `batch × len × 1` logits.
pub fn predict_binary(logits: ArrayView3<f64>, threshold: f64) -> Result<Array2<bool>> {
    if logits.len_of(Axis(2)) != 1 {
        return Err(Error::HeadMismatch(
            "binary predictions need single-logit outputs".into(),
        ));
    }
    Ok(logits.index_axis(Axis(2), 0).mapv(|z| sigmoid(z) > threshold))
}

fn loss_rows(cb: &CorruptedBatch) -> Vec<usize> {
    cb.loss_mask
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

fn binary_label(cb: &CorruptedBatch, r: usize, len: usize) -> Result<f64> {
    match cb.labels[[r / len, r % len]] {
        0 => Ok(0.0),
        1 => Ok(1.0),
        l => Err(Error::Shape(format!("binary label {l} at a loss position"))),
    }
}

fn lm_label(cb: &CorruptedBatch, r: usize, len: usize, v: usize) -> Result<usize> {
    let l = cb.labels[[r / len, r % len]];
    if l < 0 || l as usize >= v {
        return Err(Error::Shape(format!("LM label {l} at a loss position")));
    }
    Ok(l as usize)
}

/// Returns `(loss, argmax == label)` and writes `softmax - onehot` into `row`.
fn softmax_xent(row: &mut [f64], label: usize) -> (f64, bool) {
    let mut arg = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[arg] {
            arg = i;
        }
    }
    let mx = row[arg];
    let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
    let loss = mx + z.ln() - row[label];
    for x in row.iter_mut() {
        *x = (*x - mx).exp() / z;
    }
    row[label] -= 1.0;
    (loss, arg == label)
}

/// Mean loss of `batch × len × out` logits against `cb`'s labels and mask.
pub fn loss_from_logits(cb: &CorruptedBatch, logits: ArrayView3<f64>, head: HeadType) -> Result<f64> {
    if cb.objective.head() != head {
        return Err(Error::HeadMismatch(format!(
            "{} needs a {} head",
            cb.objective,
            cb.objective.head()
        )));
    }
    let (b, l, out) = logits.dim();
    if (b, l) != cb.input_ids.dim() || (head == HeadType::Binary) != (out == 1) {
        return Err(Error::Shape("logits do not match the batch".into()));
    }
    let rows = loss_rows(cb);
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &r in &rows {
        let z = logits.slice(s![r / l, r % l, ..]);
        total += match head {
            HeadType::Binary => softplus(z[0]) - binary_label(cb, r, l)? * z[0],
            HeadType::Lm => {
                let mut row = z.to_vec();
                softmax_xent(&mut row, lm_label(cb, r, l, out)?).0
            }
        };
    }
    Ok(total / rows.len() as f64)
}

impl Transformer {
    fn check_batch(&self, cb: &CorruptedBatch) -> Result<()> {
        if cb.objective.head() != self.config.head_type {
            return Err(Error::HeadMismatch(format!(
                "{} needs a {} head, model has {}",
                cb.objective,
                cb.objective.head(),
                self.config.head_type
            )));
        }
        Ok(())
    }

    pub fn loss(&self, cb: &CorruptedBatch) -> Result<f64> {
        Ok(self.evaluate(cb, false)?.loss)
    }

    pub fn loss_and_grad(&self, cb: &CorruptedBatch) -> Result<LossOutput> {
        self.evaluate(cb, true)
    }

    /// Forward pass, loss, statistics and (optionally) exact gradients.
    pub fn evaluate(&self, cb: &CorruptedBatch, with_grad: bool) -> Result<LossOutput> {
        self.check_batch(cb)?;
        let enc = self.encode(cb.input_ids.view(), cb.attention_mask.view())?;
        let len = enc.len;
        let rows = loss_rows(cb);
        let count = rows.len().max(1) as f64;
        let p = &self.params;
        let mut grads = with_grad.then(|| p.zeros_like());
        let mut dhidden = Array2::<f64>::zeros(enc.hidden.dim());
        let mut loss = 0.0;
        let mut correct = 0;
        let mut predictions = None;
        let mut hits = Array2::from_elem((enc.batch, len), false);
        let mut position_loss = Array2::<f64>::zeros((enc.batch, len));

        match self.config.head_type {
            HeadType::Binary => {
                let z = enc.hidden.dot(&p.w_bin) + p.b_bin[0];
                let mut dz = Array1::<f64>::zeros(z.len());
                for &r in &rows {
                    let y = binary_label(cb, r, len)?;
                    let l = softplus(z[r]) - y * z[r];
                    let hit = (sigmoid(z[r]) > 0.5) == (y == 1.0);
                    loss += l;
                    correct += usize::from(hit);
                    position_loss[[r / len, r % len]] = l;
                    hits[[r / len, r % len]] = hit;
                    dz[r] = (sigmoid(z[r]) - y) / count;
                }
                predictions = Some(
                    z.mapv(|x| sigmoid(x) > 0.5)
                        .into_shape_with_order((enc.batch, len))
                        .map_err(|e| Error::Shape(e.to_string()))?,
                );
                if let Some(g) = grads.as_mut() {
                    g.w_bin = enc.hidden.t().dot(&dz);
                    g.b_bin[0] = dz.sum();
                    dhidden = dz.insert_axis(Axis(1)).dot(&p.w_bin.view().insert_axis(Axis(0)));
                }
            }
            HeadType::Lm => {
                if !rows.is_empty() {
                    let sel = enc.hidden.select(Axis(0), &rows);
                    let mut dlogits = sel.dot(&p.tok_emb.t()) + &p.lm_b;
                    let v = self.config.vocab_size;
                    for (i, &r) in rows.iter().enumerate() {
                        let label = lm_label(cb, r, len, v)?;
                        let mut row = dlogits.row_mut(i);
                        let (l, hit) = softmax_xent(row.as_slice_mut().expect("contiguous"), label);
                        loss += l;
                        correct += usize::from(hit);
                        position_loss[[r / len, r % len]] = l;
                        hits[[r / len, r % len]] = hit;
                    }
                    if let Some(g) = grads.as_mut() {
                        dlogits /= count;
                        g.tok_emb = dlogits.t().dot(&sel);
                        g.lm_b = dlogits.sum_axis(Axis(0));
                        let dsel = dlogits.dot(&p.tok_emb);
                        for (i, &r) in rows.iter().enumerate() {
                            dhidden.row_mut(r).assign(&dsel.row(i));
                        }
                    }
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            if !rows.is_empty() {
                self.backward_encoder(&enc, dhidden, g);
            }
        }
        Ok(LossOutput {
            loss: loss / count,
            positions: rows.len(),
            correct,
            predictions,
            hits,
            position_loss,
            grads,
        })
    }

    /// Backpropagate `dhidden` (gradient w.r.t. the final normed states)
    /// through the encoder, accumulating into `g`.
    fn backward_encoder(&self, enc: &Encoded, dhidden: Array2<f64>, g: &mut TransformerParams) {
        let p = &self.params;
        let cfg = &self.config;
        let (bsz, len) = (enc.batch, enc.len);
        let nh = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = layer_norm_backward(dhidden.view(), p.lnf_g.view(), &enc.lnf, &mut g.lnf_g, &mut g.lnf_b);
        for (li, lc) in enc.layers.iter().enumerate().rev() {
            let lp = &p.layers[li];
            let gl = &mut g.layers[li];

            // Feed-forward sublayer.
            gl.w2 += &lc.gu.t().dot(&dx);
            gl.b2 += &dx.sum_axis(Axis(0));
            let mut du = dx.dot(&lp.w2.t());
            Zip::from(&mut du).and(&lc.u).for_each(|d, &u| *d *= gelu_grad(u));
            gl.w1 += &lc.c.t().dot(&du);
            gl.b1 += &du.sum_axis(Axis(0));
            let dc = du.dot(&lp.w1.t());
            dx += &layer_norm_backward(dc.view(), lp.ln2_g.view(), &lc.ln2, &mut gl.ln2_g, &mut gl.ln2_b);

            // Attention sublayer.
            gl.wo += &lc.ctx.t().dot(&dx);
            gl.bo += &dx.sum_axis(Axis(0));
            let dctx = dx.dot(&lp.wo.t());
            let blocks: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)> = (0..bsz * nh)
                .into_par_iter()
                .map(|bh| {
                    let (b, hd) = (bh / nh, bh % nh);
                    let rows = s![b * len..(b + 1) * len, hd * dh..(hd + 1) * dh];
                    let pm = &lc.probs[bh];
                    let dc = dctx.slice(rows);
                    let dv = pm.t().dot(&dc);
                    let mut ds = dc.dot(&lc.v.slice(rows).t());
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(pm.rows()) {
                        let dot = drow.dot(&prow);
                        Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                    }
                    let dq = ds.dot(&lc.k.slice(rows));
                    let dk = ds.t().dot(&lc.q.slice(rows));
                    (dq, dk, dv)
                })
                .collect();
            let n = bsz * len;
            let mut dq = Array2::<f64>::zeros((n, cfg.hidden));
            let mut dk = dq.clone();
            let mut dv = dq.clone();
            for (bh, (bq, bk, bv)) in blocks.into_iter().enumerate() {
                let (b, hd) = (bh / nh, bh % nh);
                let rows = s![b * len..(b + 1) * len, hd * dh..(hd + 1) * dh];
                dq.slice_mut(rows).assign(&bq);
                dk.slice_mut(rows).assign(&bk);
                dv.slice_mut(rows).assign(&bv);
            }
            let at = lc.a.t();
            gl.wq += &at.dot(&dq);
            gl.wk += &at.dot(&dk);
            gl.wv += &at.dot(&dv);
            gl.bq += &dq.sum_axis(Axis(0));
            gl.bk += &dk.sum_axis(Axis(0));
            gl.bv += &dv.sum_axis(Axis(0));
            let da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            dx += &layer_norm_backward(da.view(), lp.ln1_g.view(), &lc.ln1, &mut gl.ln1_g, &mut gl.ln1_b);
        }

        for (r, row) in dx.rows().into_iter().enumerate() {
            let (b, l) = (r / len, r % len);
            let mut t = g.tok_emb.row_mut(enc.ids[[b, l]] as usize);
            t += &row;
            let mut pe = g.pos_emb.row_mut(l);
            pe += &row;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Batch;
    use crate::model::ModelConfig;
    use crate::objectives::{CorruptedBatch, Objective, IGNORE_LABEL};
    use ndarray::{array, Array3};

    fn batch_for(objective: Objective, labels: Array2<i64>, loss: Array2<bool>) -> CorruptedBatch {
        let ids = array![[2u32, 6, 7, 3]];
        let b = Batch::from_rows(&[ids.row(0).to_vec()], 4).unwrap();
        CorruptedBatch {
            input_ids: b.ids.clone(),
            original_ids: b.ids.clone(),
            corruption_mask: Array2::from_elem((1, 4), false),
            labels,
            loss_mask: loss,
            attention_mask: b.attention_mask,
            objective,
            replacements: Vec::new(),
        }
    }

    #[test]
    fn closed_form_losses() {
        let cb = batch_for(Objective::Rts, array![[0, 1, 0, 0]], Array2::from_elem((1, 4), true));
        let z = Array3::<f64>::zeros((1, 4, 1));
        assert!((loss_from_logits(&cb, z.view(), HeadType::Binary).unwrap() - 2f64.ln()).abs() < 1e-15);

        let v = 12;
        let cb = batch_for(
            Objective::Slm,
            array![[IGNORE_LABEL, 9, IGNORE_LABEL, IGNORE_LABEL]],
            array![[false, true, false, false]],
        );
        let mut z = Array3::<f64>::zeros((1, 4, v));
        assert!((loss_from_logits(&cb, z.view(), HeadType::Lm).unwrap() - (v as f64).ln()).abs() < 1e-12);
        z[[0, 1, 9]] = 30.0;
        assert!(loss_from_logits(&cb, z.view(), HeadType::Lm).unwrap() < 1e-9);
        assert!(loss_from_logits(&cb, z.view(), HeadType::Binary).is_err());
    }

    #[test]
    fn empty_loss_mask_gives_zero_everything() {
        let m = Transformer::new(ModelConfig::desk(12, 4, HeadType::Lm), 1).unwrap();
        let cb = batch_for(
            Objective::Slm,
            Array2::from_elem((1, 4), IGNORE_LABEL),
            Array2::from_elem((1, 4), false),
        );
        let mut out = m.loss_and_grad(&cb).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.as_mut().unwrap().to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unused_head_gets_no_gradient() {
        let m = Transformer::new(ModelConfig::desk(12, 4, HeadType::Binary), 1).unwrap();
        let cb = batch_for(Objective::Rts, array![[0, 1, 0, 0]], Array2::from_elem((1, 4), true));
        let g = m.loss_and_grad(&cb).unwrap().grads.unwrap();
        assert!(g.lm_b.iter().all(|&x| x == 0.0));
        let m = Transformer::new(ModelConfig::desk(12, 4, HeadType::Lm), 1).unwrap();
        let cb = batch_for(
            Objective::Slm,
            array![[IGNORE_LABEL, 9, 5, IGNORE_LABEL]],
            array![[false, true, true, false]],
        );
        let g = m.loss_and_grad(&cb).unwrap().grads.unwrap();
        assert!(g.w_bin.iter().chain(g.b_bin.iter()).all(|&x| x == 0.0));
        assert!(m
            .loss(&batch_for(
                Objective::Rts,
                array![[0, 1, 0, 0]],
                Array2::from_elem((1, 4), true)
            ))
            .is_err());
    }

    #[test]
    fn binary_threshold_is_strict() {
        let z = array![[[0.0], [10.0], [-1.0]]];
        assert_eq!(predict_binary(z.view(), 0.5).unwrap(), array![[false, true, false]]);
        assert!(predict_binary(Array3::<f64>::zeros((1, 2, 3)).view(), 0.5).is_err());
    }
}
